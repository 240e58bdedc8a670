//! Adaptive-moment optimizer with decoupled weight decay, plus the training
//! state sidecar for resumable runs.

use crate::encoder::ParamStore;
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use std::io::{Read, Write};
use std::path::Path;

pub struct AdamW<T: Scalar> {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub step_count: u64,
    m: Vec<Vec<T>>,
    v: Vec<Vec<T>>,
}

impl<T: Scalar> AdamW<T> {
    pub fn new(params: &ParamStore<T>, beta1: f64, beta2: f64, weight_decay: f64) -> Self {
        let m = (0..params.len())
            .map(|i| vec![T::ZERO; params.at(i).1.numel()])
            .collect();
        let v = (0..params.len())
            .map(|i| vec![T::ZERO; params.at(i).1.numel()])
            .collect();
        AdamW {
            beta1,
            beta2,
            eps: 1e-8,
            weight_decay,
            step_count: 0,
            m,
            v,
        }
    }

    /// One update. `grads` is indexed like the parameter store; `None`
    /// entries (parameters untouched by the step's tape) are skipped
    /// entirely, including their decay.
    pub fn step(
        &mut self,
        params: &mut ParamStore<T>,
        grads: &[Option<Vec<T>>],
        lr: f64,
    ) -> Result<()> {
        if grads.len() != params.len() {
            return Err(Error::Dimension(format!(
                "{} gradients for {} parameters",
                grads.len(),
                params.len()
            )));
        }
        self.step_count += 1;
        let b1 = T::from_f64(self.beta1);
        let b2 = T::from_f64(self.beta2);
        let one_m_b1 = T::from_f64(1.0 - self.beta1);
        let one_m_b2 = T::from_f64(1.0 - self.beta2);
        let bc1 = T::from_f64(1.0 - self.beta1.powi(self.step_count as i32));
        let bc2 = T::from_f64(1.0 - self.beta2.powi(self.step_count as i32));
        let lr_t = T::from_f64(lr);
        let wd = T::from_f64(self.weight_decay);
        let eps = T::from_f64(self.eps);
        for (i, grad) in grads.iter().enumerate() {
            let Some(g) = grad else { continue };
            let w = params.at_mut(i);
            if g.len() != w.numel() {
                return Err(Error::Dimension(format!(
                    "gradient length {} vs parameter {}",
                    g.len(),
                    w.numel()
                )));
            }
            let m = &mut self.m[i];
            let v = &mut self.v[i];
            for (j, (&gj, wj)) in g.iter().zip(w.data_mut().iter_mut()).enumerate() {
                m[j] = b1 * m[j] + one_m_b1 * gj;
                v[j] = b2 * v[j] + one_m_b2 * gj * gj;
                let mhat = m[j] / bc1;
                let vhat = v[j] / bc2;
                *wj = *wj - lr_t * (mhat / (vhat.sqrt() + eps) + wd * *wj);
            }
        }
        Ok(())
    }
}

/// Linear warmup to the configured rate, constant afterwards.
pub fn lr_at(step: usize, base_lr: f64, warmup_steps: usize) -> f64 {
    if warmup_steps == 0 || step >= warmup_steps {
        base_lr
    } else {
        base_lr * (step + 1) as f64 / warmup_steps as f64
    }
}

const STATE_MAGIC: &[u8; 4] = b"FVTS";

/// Optimizer moments + step counter + batch RNG state, written next to
/// checkpoints so an interrupted run resumes exactly.
pub struct TrainState {
    pub step: u64,
    pub rng_state: [u64; 4],
    pub opt_step: u64,
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
}

pub fn save_state<T: Scalar>(
    path: &Path,
    step: u64,
    rng_state: [u64; 4],
    opt: &AdamW<T>,
) -> Result<()> {
    let mut buf = Vec::new();
    buf.extend_from_slice(STATE_MAGIC);
    buf.extend_from_slice(&step.to_le_bytes());
    for s in rng_state {
        buf.extend_from_slice(&s.to_le_bytes());
    }
    buf.extend_from_slice(&opt.step_count.to_le_bytes());
    buf.extend_from_slice(&(opt.m.len() as u32).to_le_bytes());
    for (m, v) in opt.m.iter().zip(&opt.v) {
        buf.extend_from_slice(&(m.len() as u32).to_le_bytes());
        for &x in m {
            buf.extend_from_slice(&x.to_f64().to_le_bytes());
        }
        for &x in v {
            buf.extend_from_slice(&x.to_f64().to_le_bytes());
        }
    }
    let mut f = std::fs::File::create(path)?;
    f.write_all(&buf)?;
    Ok(())
}

pub fn load_state(path: &Path) -> Result<TrainState> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut bytes)?;
    let fail = || Error::Data(format!("{}: truncated training state", path.display()));
    let mut pos = 0usize;
    let take = |pos: &mut usize, n: usize| -> Result<&[u8]> {
        if *pos + n > bytes.len() {
            return Err(fail());
        }
        let s = &bytes[*pos..*pos + n];
        *pos += n;
        Ok(s)
    };
    if take(&mut pos, 4)? != STATE_MAGIC {
        return Err(Error::Data(format!(
            "{}: not a training state file",
            path.display()
        )));
    }
    let u64_at = |pos: &mut usize| -> Result<u64> {
        let b = take(pos, 8)?;
        let mut a = [0u8; 8];
        a.copy_from_slice(b);
        Ok(u64::from_le_bytes(a))
    };
    let step = u64_at(&mut pos)?;
    let mut rng_state = [0u64; 4];
    for s in &mut rng_state {
        *s = u64_at(&mut pos)?;
    }
    let opt_step = u64_at(&mut pos)?;
    let count = {
        let b = take(&mut pos, 4)?;
        u32::from_le_bytes([b[0], b[1], b[2], b[3]]) as usize
    };
    let mut m = Vec::with_capacity(count);
    let mut v = Vec::with_capacity(count);
    for _ in 0..count {
        let len = {
            let b = take(&mut pos, 4)?;
            u32::from_le_bytes([b[0], b[1], b[2], b[3]]) as usize
        };
        let mut mi = Vec::with_capacity(len);
        for _ in 0..len {
            let b = take(&mut pos, 8)?;
            let mut a = [0u8; 8];
            a.copy_from_slice(b);
            mi.push(f64::from_le_bytes(a));
        }
        let mut vi = Vec::with_capacity(len);
        for _ in 0..len {
            let b = take(&mut pos, 8)?;
            let mut a = [0u8; 8];
            a.copy_from_slice(b);
            vi.push(f64::from_le_bytes(a));
        }
        m.push(mi);
        v.push(vi);
    }
    Ok(TrainState {
        step,
        rng_state,
        opt_step,
        m,
        v,
    })
}

impl<T: Scalar> AdamW<T> {
    pub fn restore(&mut self, state: &TrainState) -> Result<()> {
        if state.m.len() != self.m.len() {
            return Err(Error::Data(format!(
                "training state has {} moment vectors, optimizer expects {}",
                state.m.len(),
                self.m.len()
            )));
        }
        self.step_count = state.opt_step;
        for (i, (m, v)) in state.m.iter().zip(&state.v).enumerate() {
            if m.len() != self.m[i].len() {
                return Err(Error::Data("moment length mismatch".into()));
            }
            self.m[i] = m.iter().map(|&x| T::from_f64(x)).collect();
            self.v[i] = v.iter().map(|&x| T::from_f64(x)).collect();
        }
        Ok(())
    }
}
