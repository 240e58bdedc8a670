//! Verify tape gradients against central finite differences, from a single
//! primitive up to a full batch loss. Runs in f64: at f32 scale the check
//! is meaningless.
//!
//!     cargo run --release --example grad_check

use fovea::datagen::{generate_dataset, SynthConfig};
use fovea::encoder::{Encoder, EncoderConfig};
use fovea::gradcheck::{grad_check, grad_check_multi};
use fovea::pretrain::run::LoadedDataset;
use fovea::pretrain::{batch_loss, build_batch, build_batch_loss, AblationFlags, TrainConfig};
use fovea::rng::Rng;
use fovea::tape::Tape;
use fovea::tensor::Tensor;

fn main() -> fovea::Result<()> {
    // A single primitive: f(x) = sum(gelu(x . w)).
    let mut rng = Rng::seed_from(1);
    let x0 = Tensor::new(vec![3, 4], (0..12).map(|_| rng.range_f64(-1.0, 1.0)).collect())?;
    let w = Tensor::new(vec![4, 2], (0..8).map(|_| rng.range_f64(-1.0, 1.0)).collect())?;
    let f = |params: &[Tensor<f64>]| -> fovea::Result<f64> {
        let mut tape: Tape<f64> = Tape::new();
        let x = tape.leaf(params[0].clone());
        let wc = tape.constant(w.clone());
        let mm = tape.matmul(x, wc)?;
        let g = tape.gelu(mm)?;
        let s = tape.sum(g)?;
        tape.value(s).item()
    };
    let mut tape: Tape<f64> = Tape::new();
    let x = tape.leaf(x0.clone());
    let wc = tape.constant(w.clone());
    let mm = tape.matmul(x, wc)?;
    let g = tape.gelu(mm)?;
    let s = tape.sum(g)?;
    tape.backward(s)?;
    let analytic = tape.grad(x).unwrap().to_vec();
    let report = grad_check(f, &[x0], &[analytic], 1e-5, usize::MAX)?;
    println!(
        "matmul+gelu: {} coords, max rel err {:.2e}",
        report.coords_checked, report.max_rel_err
    );

    // The full training loss on a batch of 2, every tower involved.
    let dir = std::env::temp_dir().join("fovea_example_gradcheck");
    let _ = std::fs::remove_dir_all(&dir);
    generate_dataset(&SynthConfig { seed: 9, count: 8, ..SynthConfig::default() }, &dir)?;
    let ds = LoadedDataset::load(&dir.join("index.txt"))?;
    let enc: Encoder<f64> = Encoder::new(EncoderConfig::desk(4))?;
    let cfg = TrainConfig {
        batch_size: 2,
        global_ratio: 0.5,
        ..TrainConfig::default()
    };
    let flags = AblationFlags::default();
    let mut rng = Rng::seed_from(2);
    let batch = build_batch(&ds.records, &cfg, &flags, &mut rng)?;

    let mut fwd = enc.forward();
    let (total, metrics) = build_batch_loss(&mut fwd, &ds, &batch, &cfg, &flags)?;
    println!(
        "\nbatch loss {:.4} (contrastive {:.4}, ce {:.4}, overlap {:.4})",
        metrics.loss_total, metrics.loss_contrastive, metrics.loss_ce, metrics.loss_dice
    );
    fwd.tape.backward(total)?;
    let grads = fwd.param_grads();

    let mut params = Vec::new();
    let mut analytic = Vec::new();
    let mut names = Vec::new();
    for i in 0..enc.params.len() {
        if let Some(g) = &grads[i] {
            let (name, t) = enc.params.at(i);
            params.push(t.clone());
            analytic.push(g.clone());
            names.push(name.to_string());
        }
    }
    drop(fwd);
    println!(
        "checking 2 coordinates in each of {} parameter tensors...",
        params.len()
    );
    let base = enc.params.clone();
    let names2 = names.clone();
    let report = grad_check_multi(
        move |probe: &[Tensor<f64>]| {
            let mut store = base.clone();
            for (name, t) in names2.iter().zip(probe) {
                *store.get_mut(name)? = t.clone();
            }
            let e = Encoder::from_parts(enc.cfg.clone(), store)?;
            Ok(batch_loss(&e, &ds, &batch, &cfg, &flags)?.loss_total)
        },
        &params,
        &analytic,
        &[1e-3, 1e-5],
        2,
    )?;
    println!(
        "full training loss: {} coords, max rel err {:.2e} (tolerance 1e-4)",
        report.coords_checked, report.max_rel_err
    );
    assert!(report.max_rel_err < 1e-4);
    println!("gradients verified.");
    Ok(())
}
