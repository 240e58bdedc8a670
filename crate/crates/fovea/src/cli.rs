//! Command-line front end: one binary, five subcommands, deterministic
//! given (config, seed).

use crate::datagen::{
    self, preset_boxes, select_salient_boxes, write_dataset, DatasetRecord, MaskSet, Region,
    RegionKind, SourceTag, SynthConfig,
};
use crate::encoder::{select_patches, Encoder, Prompt};
use crate::error::{Error, Result};
use crate::harness::{
    counts_at_fraction, render_heatmaps, render_selection_overlay, rows_to_csv, run_accounting,
    run_scaling, ScalingSchedule,
};
use crate::pretrain::run::LoadedDataset;
use crate::pretrain::{parse_kv, train_loop, AblationFlags, TrainConfig};
use crate::pyramid::ImagePyramid;
use crate::raster::RasterImage;
use std::io::Write as _;
use std::path::{Path, PathBuf};

pub const HELP: &str = "\
fovea: scale-selective high-resolution vision encoding

Encode a global low-res view, score patch relevance against a prompt, and
extract high-res features only at the top-k selected multi-scale patches.

USAGE:
    fovea <subcommand> [flags]

SUBCOMMANDS:
    synth       Generate a synthetic scene/document dataset with region ground truth
    curate      Score preset boxes against segmentation masks and emit salient regions
    pretrain    Train an encoder with localized contrastive + selection supervision
    select      Select patches for one image and render score maps and an overlay
    bench       Run scaling-regime token/FLOP accounting and checkpoint evaluation
    help        Print this message

FLAGS (synth):
    --spec <file>        Scene generator config (key = value; see README)
    --count <n>          Number of records to generate
    --out <dir>          Output directory (images/ + index.txt)
    --seed <n>           Override the spec file seed

FLAGS (curate):
    --masks <glob>       Mask files (run-length text format), e.g. 'masks/*.mask'
    --images <glob>      Image files paired with masks by filename stem
    --k <n>              Max salient boxes per image
    --fraction <f>       Preset box side as a fraction of the shortest image side (default 0.2)
    --out <dir>          Output directory for index.txt

FLAGS (pretrain):
    --config <file>      Training config (key = value; see README)
    --dataset <index>    Dataset index file produced by synth
    --out <dir>          Output directory (checkpoints + metrics.csv)
    --seed <n>           Override the config file seed
    --resume             Continue from ckpt_last.ckpt/train_state.bin in --out
    --ablate <name>      Disable one design (repeatable): gt-selection,
                         inbox-pool, mix-global, intra-image, multi-scale,
                         scale-pe, kv-cache

FLAGS (select):
    --checkpoint <file>  Trained encoder checkpoint
    --image <ppm>        Input image (binary PPM)
    --prompt <tokens>    Top-down prompt, space-separated vocabulary words
    --bottom-up          Use the learned saliency prompt instead of text
    --k <n>              Total patches to select (proportional across scales)
    --fraction <f>       Fraction of all patches to select
    --smooth <sigma>     Gaussian-smooth the score maps (sigma in grid cells; off by default)
    --out <dir>          Output directory (heatmaps, overlay, selection.txt)

FLAGS (bench):
    --schedule <file>    Scaling schedule (regime/profile/points; see README)
    --out <csv>          Output CSV path
    --checkpoints <dir>  Checkpoint directory (res{side}_train{pct}.ckpt); token accounting only when omitted
    --dataset <index>    Eval dataset (required with --checkpoints)
    --seed <n>           Evaluation seed (default 0)

EXIT CODES:
    0  success
    1  usage or config error
    2  data error (missing or malformed files)
    3  numeric failure
";

/// Parse argv (without the program name), run, and map errors to exit codes.
pub fn run(args: &[String]) -> i32 {
    match dispatch(args) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("{e}");
            e.exit_code()
        }
    }
}

fn dispatch(args: &[String]) -> Result<()> {
    let Some(cmd) = args.first() else {
        print!("{HELP}");
        return Ok(());
    };
    match cmd.as_str() {
        "help" | "--help" | "-h" => {
            print!("{HELP}");
            Ok(())
        }
        "synth" => cmd_synth(&args[1..]),
        "curate" => cmd_curate(&args[1..]),
        "pretrain" => cmd_pretrain(&args[1..]),
        "select" => cmd_select(&args[1..]),
        "bench" => cmd_bench(&args[1..]),
        other => Err(Error::Usage(format!(
            "unknown subcommand '{other}'; run 'fovea help'"
        ))),
    }
}

// ── flag parsing ────────────────────────────────────────────────────────

struct Flags {
    values: Vec<(String, String)>,
    switches: Vec<String>,
}

fn parse_flags(args: &[String], value_flags: &[&str], switch_flags: &[&str]) -> Result<Flags> {
    let mut values = Vec::new();
    let mut switches = Vec::new();
    let mut i = 0;
    while i < args.len() {
        let a = &args[i];
        if switch_flags.contains(&a.as_str()) {
            switches.push(a.clone());
            i += 1;
        } else if value_flags.contains(&a.as_str()) {
            let v = args.get(i + 1).ok_or_else(|| {
                Error::Usage(format!("flag {a} expects a value"))
            })?;
            values.push((a.clone(), v.clone()));
            i += 2;
        } else {
            return Err(Error::Usage(format!("unknown flag '{a}'")));
        }
    }
    Ok(Flags { values, switches })
}

impl Flags {
    fn get(&self, name: &str) -> Option<&str> {
        self.values
            .iter()
            .find(|(k, _)| k == name)
            .map(|(_, v)| v.as_str())
    }

    fn require(&self, name: &str) -> Result<&str> {
        self.get(name)
            .ok_or_else(|| Error::Usage(format!("missing required flag {name}")))
    }

    fn get_all(&self, name: &str) -> Vec<&str> {
        self.values
            .iter()
            .filter(|(k, _)| k == name)
            .map(|(_, v)| v.as_str())
            .collect()
    }

    fn has(&self, name: &str) -> bool {
        self.switches.iter().any(|s| s == name)
    }

    fn parse<T: std::str::FromStr>(&self, name: &str) -> Result<Option<T>> {
        match self.get(name) {
            None => Ok(None),
            Some(v) => v
                .parse()
                .map(Some)
                .map_err(|_| Error::Usage(format!("cannot parse {name} value '{v}'"))),
        }
    }
}

/// Minimal glob: a path whose final component may contain `*` wildcards.
fn expand_glob(pattern: &str) -> Result<Vec<PathBuf>> {
    let path = Path::new(pattern);
    let file_pat = path
        .file_name()
        .and_then(|f| f.to_str())
        .ok_or_else(|| Error::Usage(format!("bad glob '{pattern}'")))?;
    if !file_pat.contains('*') {
        return Ok(vec![path.to_path_buf()]);
    }
    let dir = match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p.to_path_buf(),
        _ => PathBuf::from("."),
    };
    let mut out = Vec::new();
    for entry in std::fs::read_dir(&dir)? {
        let entry = entry?;
        let name = entry.file_name();
        let Some(name) = name.to_str() else { continue };
        if wildcard_match(file_pat, name) {
            out.push(dir.join(name));
        }
    }
    out.sort();
    Ok(out)
}

fn wildcard_match(pattern: &str, text: &str) -> bool {
    // Greedy segment matching for '*' patterns.
    let parts: Vec<&str> = pattern.split('*').collect();
    let mut pos = 0usize;
    for (i, part) in parts.iter().enumerate() {
        if part.is_empty() {
            continue;
        }
        if i == 0 {
            if !text.starts_with(part) {
                return false;
            }
            pos = part.len();
        } else if i == parts.len() - 1 && !pattern.ends_with('*') {
            return text.len() >= pos && text[pos..].ends_with(part);
        } else {
            match text[pos..].find(part) {
                Some(at) => pos += at + part.len(),
                None => return false,
            }
        }
    }
    true
}

// ── synth ───────────────────────────────────────────────────────────────

fn synth_config_from_file(path: &Path) -> Result<SynthConfig> {
    let text = std::fs::read_to_string(path)?;
    let mut cfg = SynthConfig::default();
    for (key, value, lineno) in parse_kv(&text, &path.display().to_string())? {
        let bad = || Error::Config(format!(
            "{}:{lineno}: field {key}: cannot parse '{value}'",
            path.display()
        ));
        match key.as_str() {
            "seed" => cfg.seed = value.parse().map_err(|_| bad())?,
            "resolution" => cfg.resolution = value.parse().map_err(|_| bad())?,
            "glyph_count" => cfg.glyph_count = value.parse().map_err(|_| bad())?,
            "glyph_side" => cfg.glyph_side = value.parse().map_err(|_| bad())?,
            "natural_fraction" => cfg.natural_fraction = value.parse().map_err(|_| bad())?,
            "paste_fraction" => cfg.paste_fraction = value.parse().map_err(|_| bad())?,
            "paste_bg_side" => cfg.paste_bg_side = value.parse().map_err(|_| bad())?,
            "low_res_side" => cfg.low_res_side = value.parse().map_err(|_| bad())?,
            other => {
                return Err(Error::Config(format!(
                    "{}:{lineno}: unknown field '{other}'",
                    path.display()
                )));
            }
        }
    }
    Ok(cfg)
}

fn cmd_synth(args: &[String]) -> Result<()> {
    let flags = parse_flags(args, &["--spec", "--count", "--out", "--seed"], &[])?;
    let mut cfg = match flags.get("--spec") {
        Some(p) => synth_config_from_file(Path::new(p))?,
        None => SynthConfig::default(),
    };
    if let Some(count) = flags.parse::<usize>("--count")? {
        cfg.count = count;
    }
    if let Some(seed) = flags.parse::<u64>("--seed")? {
        cfg.seed = seed;
    }
    let out = PathBuf::from(flags.require("--out")?);
    std::fs::create_dir_all(&out)?;
    let records = datagen::generate_dataset(&cfg, &out)?;
    println!(
        "wrote {} records ({} natural / {} document) under {}",
        records.len(),
        records.iter().filter(|r| r.source == SourceTag::Natural).count(),
        records.iter().filter(|r| r.source == SourceTag::Document).count(),
        out.display()
    );
    Ok(())
}

// ── curate ──────────────────────────────────────────────────────────────

fn stem(path: &Path) -> String {
    path.file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default()
}

fn path_for_index(image: &Path, index_dir: &Path) -> Result<String> {
    let canonical = image
        .canonicalize()
        .unwrap_or_else(|_| image.to_path_buf());
    let base = index_dir
        .canonicalize()
        .unwrap_or_else(|_| index_dir.to_path_buf());
    let p = canonical
        .strip_prefix(&base)
        .map(Path::to_path_buf)
        .unwrap_or(canonical);
    Ok(p.display().to_string())
}

fn cmd_curate(args: &[String]) -> Result<()> {
    let flags = parse_flags(args, &["--masks", "--images", "--k", "--fraction", "--out"], &[])?;
    let mask_paths = expand_glob(flags.require("--masks")?)?;
    let image_paths = expand_glob(flags.require("--images")?)?;
    let k: usize = flags
        .parse::<usize>("--k")?
        .ok_or_else(|| Error::Usage("missing required flag --k".into()))?;
    if k == 0 {
        return Err(Error::Usage("--k must be at least 1".into()));
    }
    let fraction = flags.parse::<f64>("--fraction")?.unwrap_or(0.2);
    let out = PathBuf::from(flags.require("--out")?);
    std::fs::create_dir_all(&out)?;

    let mut records = Vec::new();
    let mut skipped = 0usize;
    for mask_path in &mask_paths {
        let masks = match MaskSet::read(mask_path) {
            Ok(m) => m,
            Err(e) => {
                eprintln!("skipping {}: {e}", mask_path.display());
                skipped += 1;
                continue;
            }
        };
        let mask_stem = stem(mask_path);
        let Some(image) = image_paths.iter().find(|p| stem(p) == mask_stem) else {
            eprintln!("skipping {}: no image with stem '{mask_stem}'", mask_path.display());
            skipped += 1;
            continue;
        };
        // Candidates with zero saliency are not salient; an image with no
        // masks legitimately yields zero regions.
        let candidates: Vec<_> = preset_boxes(masks.width, masks.height, fraction)
            .into_iter()
            .filter(|b| datagen::box_saliency(b, &masks) > 0.0)
            .collect();
        let boxes = select_salient_boxes(&candidates, &masks, k);
        let regions = boxes
            .into_iter()
            .map(|bbox| Region {
                bbox,
                caption: Vec::new(),
                kind: RegionKind::Local,
            })
            .collect();
        records.push(DatasetRecord {
            image_path: path_for_index(image, &out)?,
            width: masks.width,
            height: masks.height,
            source: SourceTag::Natural,
            regions,
        });
    }
    if records.is_empty() {
        return Err(Error::Data(format!(
            "all {skipped} mask files were skipped; nothing to write"
        )));
    }
    let index = out.join("index.txt");
    write_dataset(&records, &index)?;
    println!(
        "curated {} images ({} skipped) -> {}",
        records.len(),
        skipped,
        index.display()
    );
    Ok(())
}

// ── pretrain ────────────────────────────────────────────────────────────

fn cmd_pretrain(args: &[String]) -> Result<()> {
    let flags = parse_flags(
        args,
        &["--config", "--dataset", "--out", "--seed", "--ablate"],
        &["--resume"],
    )?;
    let mut cfg = match flags.get("--config") {
        Some(p) => TrainConfig::from_file(Path::new(p))?,
        None => TrainConfig::default(),
    };
    if let Some(seed) = flags.parse::<u64>("--seed")? {
        cfg.seed = seed;
    }
    let mut ablations = AblationFlags::default();
    for name in flags.get_all("--ablate") {
        ablations.ablate(name)?;
    }
    let dataset_path = PathBuf::from(flags.require("--dataset")?);
    let out = PathBuf::from(flags.require("--out")?);
    let ds = LoadedDataset::load(&dataset_path)?;
    let mut enc: Encoder<f32> = Encoder::new(crate::encoder::EncoderConfig::desk(cfg.seed))?;
    let resume = flags.has("--resume");
    let summary = train_loop(&mut enc, &ds, &cfg, &ablations, &out, resume)?;
    println!(
        "trained {} steps; final iou {:.4}, recall {:.4}, retrieval {:.4}; metrics at {}",
        summary.steps,
        summary.final_eval.iou,
        summary.final_eval.recall,
        summary.final_eval.retrieval,
        summary.metrics_path.display()
    );
    Ok(())
}

// ── select ──────────────────────────────────────────────────────────────

fn prompt_from_words(text: &str) -> Result<Vec<u16>> {
    let mut ids = Vec::new();
    for word in text.split_whitespace() {
        match datagen::scene::token_id(word) {
            Some(id) => ids.push(id),
            None => {
                let vocab: Vec<String> = datagen::scene::vocab()
                    .into_iter()
                    .map(|(_, n)| n.to_string())
                    .collect();
                return Err(Error::Usage(format!(
                    "unknown prompt token '{word}'; valid vocabulary: {}",
                    vocab.join(", ")
                )));
            }
        }
    }
    if ids.is_empty() {
        return Err(Error::Usage("empty prompt".into()));
    }
    Ok(ids)
}

fn cmd_select(args: &[String]) -> Result<()> {
    let flags = parse_flags(
        args,
        &["--checkpoint", "--image", "--prompt", "--k", "--fraction", "--smooth", "--out"],
        &["--bottom-up"],
    )?;
    let enc: Encoder<f32> = Encoder::load(Path::new(flags.require("--checkpoint")?))?;
    let image = RasterImage::read_ppm(Path::new(flags.require("--image")?))?;
    let out = PathBuf::from(flags.require("--out")?);
    std::fs::create_dir_all(&out)?;

    let prompt = match (flags.get("--prompt"), flags.has("--bottom-up")) {
        (Some(words), false) => Prompt::TopDown(prompt_from_words(words)?),
        (None, true) => Prompt::BottomUp,
        (Some(_), true) => {
            return Err(Error::Usage("--prompt and --bottom-up are mutually exclusive".into()));
        }
        (None, false) => {
            return Err(Error::Usage("one of --prompt or --bottom-up is required".into()));
        }
    };
    let cfg = &enc.cfg;
    let counts = match (flags.parse::<usize>("--k")?, flags.parse::<f64>("--fraction")?) {
        (Some(k), None) => crate::encoder::allocate_k(k, &cfg.cells_per_scale())?,
        (None, Some(f)) => {
            if !(0.0..=1.0).contains(&f) {
                return Err(Error::Usage("--fraction must be in [0, 1]".into()));
            }
            counts_at_fraction(cfg, f)?
        }
        (None, None) => counts_at_fraction(cfg, 0.25)?,
        (Some(_), Some(_)) => {
            return Err(Error::Usage("--k and --fraction are mutually exclusive".into()));
        }
    };

    let smoothing = flags.parse::<f64>("--smooth")?;
    if let Some(sigma) = smoothing {
        if sigma <= 0.0 {
            return Err(Error::Usage("--smooth expects a positive sigma".into()));
        }
    }
    let pyr = ImagePyramid::build(&image, cfg.low_res_side, cfg.patch_side, &cfg.scale_sides())?;
    let mut fwd = enc.forward();
    let (tokens, _cache) = fwd.encode_low_res(&pyr)?;
    let aux = fwd.aux_highres_encode(&pyr)?;
    let prompt_id = fwd.prompt_embedding(&prompt)?;
    let grids = cfg.scale_grids();
    let scored = fwd.selection_score(tokens, &aux, prompt_id, &grids, smoothing)?;
    let cap = counts.iter().sum::<usize>().max(1);
    let selection = select_patches(&scored.map, &counts, cap)?;

    for (i, img) in render_heatmaps(&scored.map).into_iter().enumerate() {
        img.write_ppm(&out.join(format!("heatmap_scale{i}.ppm")))?;
    }
    render_selection_overlay(&pyr, &selection)?.write_ppm(&out.join("overlay.ppm"))?;

    let mut text = String::new();
    for (s, indices) in selection.per_scale.iter().enumerate() {
        text.push_str(&format!("scale {s} side {} k {}:", grids[s], indices.len()));
        for i in indices {
            text.push_str(&format!(" {i}"));
        }
        text.push('\n');
    }
    std::fs::write(out.join("selection.txt"), &text)?;
    print!("{text}");
    Ok(())
}

// ── bench ───────────────────────────────────────────────────────────────

fn cmd_bench(args: &[String]) -> Result<()> {
    let flags = parse_flags(
        args,
        &["--schedule", "--out", "--checkpoints", "--dataset", "--seed"],
        &[],
    )?;
    let schedule = ScalingSchedule::from_file(Path::new(flags.require("--schedule")?))?;
    let out = PathBuf::from(flags.require("--out")?);
    let seed = flags.parse::<u64>("--seed")?.unwrap_or(0);
    let rows = match flags.get("--checkpoints") {
        None => run_accounting(&schedule)?,
        Some(dir) => {
            let ds_path = flags.get("--dataset").ok_or_else(|| {
                Error::Usage("--dataset is required together with --checkpoints".into())
            })?;
            let ds = LoadedDataset::load(Path::new(ds_path))?;
            run_scaling(&schedule, Path::new(dir), &ds, seed)?
        }
    };
    let csv = rows_to_csv(&rows);
    if let Some(parent) = out.parent() {
        if !parent.as_os_str().is_empty() {
            std::fs::create_dir_all(parent)?;
        }
    }
    let mut f = std::fs::File::create(&out)?;
    f.write_all(csv.as_bytes())?;
    println!("wrote {} rows to {}", rows.len(), out.display());
    Ok(())
}
