//! Scaling-regime schedules, the experiment runner, and the
//! dynamic-resolution selection plan.

use crate::encoder::{allocate_k, select_patches, Encoder, EncoderConfig};
use crate::error::{Error, Result};
use crate::harness::cost::{count_tokens, selection_of_counts};
use crate::harness::eval::recall_eval;
use crate::pretrain::run::LoadedDataset;
use crate::scalar::Scalar;
use crate::rng::Rng;
use std::path::Path;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Regime {
    /// Select 100% of the patches at every resolution.
    WholeImage,
    /// Hold the selected-patch budget fixed while resolution grows.
    ConstantCost,
    /// Fixed resolution, growing selection budget.
    ConstantRes,
    /// Fixed training budget, larger budgets at test time.
    TestTime,
}

impl Regime {
    pub fn as_str(self) -> &'static str {
        match self {
            Regime::WholeImage => "whole-image",
            Regime::ConstantCost => "constant-cost",
            Regime::ConstantRes => "constant-res",
            Regime::TestTime => "test-time",
        }
    }

    pub fn parse(s: &str) -> Option<Regime> {
        match s {
            "whole-image" => Some(Regime::WholeImage),
            "constant-cost" => Some(Regime::ConstantCost),
            "constant-res" => Some(Regime::ConstantRes),
            "test-time" => Some(Regime::TestTime),
            _ => None,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Profile {
    /// Trainable desk geometry (64/8, scales up to x4).
    Desk,
    /// 378/14 geometry with the 4K ladder; accounting only.
    Ladder4k,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SchedulePoint {
    pub max_side: usize,
    pub train_fraction: f64,
    pub test_fraction: f64,
}

/// Parsed schedule file:
///
/// ```text
/// regime = constant-cost
/// profile = desk            # or "4k"
/// point = 256, 0.25, 0.25   # max resolution, train fraction, test fraction
/// ```
#[derive(Clone, Debug)]
pub struct ScalingSchedule {
    pub regime: Regime,
    pub profile: Profile,
    pub points: Vec<SchedulePoint>,
}

impl ScalingSchedule {
    pub fn from_file(path: &Path) -> Result<ScalingSchedule> {
        let text = std::fs::read_to_string(path)?;
        Self::from_text(&text, &path.display().to_string())
    }

    pub fn from_text(text: &str, path: &str) -> Result<ScalingSchedule> {
        let mut regime = None;
        let mut profile = Profile::Desk;
        let mut points = Vec::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let lineno = i + 1;
            let (k, v) = line.split_once('=').ok_or_else(|| Error::Config(format!(
                "{path}:{lineno}: expected 'key = value'"
            )))?;
            match k.trim() {
                "regime" => {
                    regime = Some(Regime::parse(v.trim()).ok_or_else(|| {
                        Error::Config(format!("{path}:{lineno}: unknown regime '{}'", v.trim()))
                    })?);
                }
                "profile" => {
                    profile = match v.trim() {
                        "desk" => Profile::Desk,
                        "4k" => Profile::Ladder4k,
                        other => {
                            return Err(Error::Config(format!(
                                "{path}:{lineno}: unknown profile '{other}'"
                            )));
                        }
                    };
                }
                "point" => {
                    let parts: Vec<&str> = v.split(',').map(str::trim).collect();
                    if parts.len() != 3 {
                        return Err(Error::Config(format!(
                            "{path}:{lineno}: point needs 'max_side, train_fraction, test_fraction'"
                        )));
                    }
                    let max_side: usize = parts[0].parse().map_err(|_| {
                        Error::Config(format!("{path}:{lineno}: bad max_side '{}'", parts[0]))
                    })?;
                    let tf: f64 = parts[1].parse().map_err(|_| {
                        Error::Config(format!("{path}:{lineno}: bad train fraction"))
                    })?;
                    let sf: f64 = parts[2].parse().map_err(|_| {
                        Error::Config(format!("{path}:{lineno}: bad test fraction"))
                    })?;
                    for f in [tf, sf] {
                        if !(f > 0.0 && f <= 1.0) {
                            return Err(Error::Config(format!(
                                "{path}:{lineno}: fractions must be in (0, 1]"
                            )));
                        }
                    }
                    points.push(SchedulePoint {
                        max_side,
                        train_fraction: tf,
                        test_fraction: sf,
                    });
                }
                other => {
                    return Err(Error::Config(format!(
                        "{path}:{lineno}: unknown field '{other}'"
                    )));
                }
            }
        }
        let regime =
            regime.ok_or_else(|| Error::Config(format!("{path}: missing 'regime' field")))?;
        if points.is_empty() {
            return Err(Error::Config(format!("{path}: no points")));
        }
        Ok(ScalingSchedule {
            regime,
            profile,
            points,
        })
    }

    /// Encoder config for a point: the profile's ladder truncated to scales
    /// that fit inside the point's maximum side.
    pub fn config_for(&self, point: &SchedulePoint, seed: u64) -> Result<EncoderConfig> {
        let mut cfg = match self.profile {
            Profile::Desk => EncoderConfig::desk(seed),
            Profile::Ladder4k => EncoderConfig::ladder_4k(),
        };
        cfg.scale_multipliers.retain(|&m| m * cfg.low_res_side <= point.max_side);
        if cfg.scale_multipliers.is_empty() {
            return Err(Error::Config(format!(
                "max_side {} below the smallest scale of the profile",
                point.max_side
            )));
        }
        Ok(cfg)
    }
}

/// Expected checkpoint filename for a schedule point.
pub fn checkpoint_name(point: &SchedulePoint) -> String {
    format!(
        "res{}_train{}.ckpt",
        point.max_side,
        (point.train_fraction * 100.0).round() as usize
    )
}

#[derive(Clone, Debug)]
pub struct ScalingRow {
    pub regime: &'static str,
    pub max_side: usize,
    pub train_fraction: f64,
    pub test_fraction: f64,
    pub selected_total: usize,
    pub hr_tokens: usize,
    pub lowres_tokens: usize,
    pub stage1_flops: u64,
    pub aux_flops: u64,
    pub stage3_flops: u64,
    pub recall: Option<f64>,
    pub retrieval: Option<f64>,
    pub checkpoint_hash: Option<String>,
    pub status: String,
}

pub const SCALING_CSV_HEADER: &str = "regime,max_side,train_fraction,test_fraction,selected_total,hr_tokens,lowres_tokens,stage1_flops,aux_flops,stage3_flops,recall,retrieval,checkpoint_hash,status";

pub fn rows_to_csv(rows: &[ScalingRow]) -> String {
    let mut out = String::from(SCALING_CSV_HEADER);
    out.push('\n');
    let opt = |v: &Option<f64>| v.map(|x| format!("{x:.6}")).unwrap_or_default();
    for r in rows {
        out.push_str(&format!(
            "{},{},{},{},{},{},{},{},{},{},{},{},{},{}\n",
            r.regime,
            r.max_side,
            r.train_fraction,
            r.test_fraction,
            r.selected_total,
            r.hr_tokens,
            r.lowres_tokens,
            r.stage1_flops,
            r.aux_flops,
            r.stage3_flops,
            opt(&r.recall),
            opt(&r.retrieval),
            r.checkpoint_hash.clone().unwrap_or_default(),
            r.status
        ));
    }
    out
}

fn fnv1a(bytes: &[u8]) -> String {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        h ^= u64::from(b);
        h = h.wrapping_mul(0x100_0000_01b3);
    }
    format!("{h:016x}")
}

/// Per-scale selected counts at a fraction of all cells (proportional
/// allocation of round(fraction * total)).
pub fn counts_at_fraction(cfg: &EncoderConfig, fraction: f64) -> Result<Vec<usize>> {
    let cells = cfg.cells_per_scale();
    let total: usize = cells.iter().sum();
    let k = ((total as f64) * fraction).round() as usize;
    allocate_k(k.min(total), &cells)
}

/// Accounting-only rows: token and FLOP columns, no checkpoints needed.
pub fn run_accounting(schedule: &ScalingSchedule) -> Result<Vec<ScalingRow>> {
    let mut rows = Vec::new();
    for point in &schedule.points {
        let cfg = schedule.config_for(point, 0)?;
        let counts = counts_at_fraction(&cfg, point.test_fraction)?;
        let sel = selection_of_counts(&cfg, &counts)?;
        let report = count_tokens(&cfg, &sel)?;
        rows.push(ScalingRow {
            regime: schedule.regime.as_str(),
            max_side: point.max_side,
            train_fraction: point.train_fraction,
            test_fraction: point.test_fraction,
            selected_total: sel.total(),
            hr_tokens: report.hr_tokens,
            lowres_tokens: report.lowres_tokens,
            stage1_flops: report.stage1_flops,
            aux_flops: report.aux_flops,
            stage3_flops: report.stage3_flops,
            recall: None,
            retrieval: None,
            checkpoint_hash: None,
            status: "tokens-only".into(),
        });
    }
    Ok(rows)
}

/// Test-time evaluation of one trained point: predicted top-down selection
/// at the test fraction, recall against ground-truth boxes, and in-batch
/// retrieval with all-selected pooling.
fn eval_point(
    enc: &Encoder<f32>,
    ds: &LoadedDataset,
    refs: &[(usize, usize)],
    fraction: f64,
    seed: u64,
) -> Result<(Option<f64>, Option<f64>)> {
    let cfg = &enc.cfg;
    let grids = cfg.scale_grids();
    let counts = counts_at_fraction(cfg, fraction)?;
    let cap: usize = counts.iter().sum::<usize>().max(1);

    let mut recall_sum = 0.0;
    let mut recall_n = 0usize;
    let mut embs: Vec<(Vec<f64>, Vec<f64>)> = Vec::new();
    let take = refs.len().min(16);
    for &(rec_idx, region_idx) in &refs[..take] {
        let rec = &ds.records[rec_idx];
        let region = &rec.regions[region_idx];
        let pyr = ds.pyramid(rec_idx, cfg)?;
        let mut fwd = enc.forward();
        let (tokens, cache) = fwd.encode_low_res(&pyr)?;
        let aux = fwd.aux_highres_encode(&pyr)?;
        let prompt = fwd.text_encode(&region.caption)?;
        let scored = fwd.selection_score(tokens, &aux, prompt, &grids, None)?;
        let sel = select_patches(&scored.map, &counts, cap)?;
        if let Some(r) = recall_eval(&sel, &[region.bbox], &grids, rec.width, rec.height)? {
            recall_sum += r;
            recall_n += 1;
        }
        // Test-time embedding: encode the selected patches, pool everything.
        if sel.total() > 0 {
            let hr = fwd.encode_high_res(&pyr, &sel, &cache, Default::default())?;
            let pooled = fwd.attention_pool(hr, &vec![true; sel.total()])?;
            let img = fwd.tape.normalize_rows(pooled)?;
            let iv = fwd.tape.value(img).data().iter().map(|v| v.to_f64()).collect();
            let tv = fwd
                .tape
                .value(prompt)
                .data()
                .iter()
                .map(|v| v.to_f64())
                .collect();
            embs.push((iv, tv));
        }
    }
    let recall = (recall_n > 0).then(|| recall_sum / recall_n as f64);
    // Retrieval in batches of up to 8 candidates.
    let retrieval = if embs.len() >= 2 {
        let mut rng = Rng::seed_from(seed).derive("scaling-retrieval");
        let mut hits = 0;
        let mut total = 0;
        let bsz = embs.len().min(8);
        for _ in 0..4 {
            let picks = rng.sample_distinct(embs.len(), bsz);
            for &i in &picks {
                let mut best = usize::MAX;
                let mut best_sim = f64::NEG_INFINITY;
                for &j in &picks {
                    let sim: f64 = embs[i].0.iter().zip(&embs[j].1).map(|(a, b)| a * b).sum();
                    if sim > best_sim {
                        best_sim = sim;
                        best = j;
                    }
                }
                if best == i {
                    hits += 1;
                }
                total += 1;
            }
        }
        Some(hits as f64 / total as f64)
    } else {
        None
    };
    Ok((recall, retrieval))
}

/// Full scaling run: one row per schedule point, loading the point's
/// checkpoint from `checkpoints_dir` (missing ones are skipped with a
/// reason, not an error).
pub fn run_scaling(
    schedule: &ScalingSchedule,
    checkpoints_dir: &Path,
    ds: &LoadedDataset,
    seed: u64,
) -> Result<Vec<ScalingRow>> {
    let refs: Vec<(usize, usize)> = (0..ds.len())
        .flat_map(|ri| {
            ds.records[ri]
                .local_regions()
                .filter(|(_, r)| !r.caption.is_empty())
                .map(move |(j, _)| (ri, j))
                .collect::<Vec<_>>()
        })
        .collect();
    let mut rows = run_accounting(schedule)?;
    for (row, point) in rows.iter_mut().zip(&schedule.points) {
        let ckpt = checkpoints_dir.join(checkpoint_name(point));
        if !ckpt.exists() {
            row.status = format!("skipped: missing {}", checkpoint_name(point));
            continue;
        }
        let enc: Encoder<f32> = Encoder::load(&ckpt)?;
        let expect = schedule.config_for(point, enc.cfg.seed)?;
        if enc.cfg != expect {
            row.status = format!(
                "skipped: {} was trained with a different geometry",
                checkpoint_name(point)
            );
            continue;
        }
        row.checkpoint_hash = Some(fnv1a(&std::fs::read(&ckpt)?));
        let (recall, retrieval) = eval_point(&enc, ds, &refs, point.test_fraction, seed)?;
        row.recall = recall;
        row.retrieval = retrieval;
        row.status = "ok".into();
    }
    Ok(rows)
}

/// Default activation threshold: a scale is selected from only when the
/// image resolution reaches 70% of that scale's side.
pub const DYNAMIC_THRESHOLD_RATIO: f64 = 0.7;

/// Per-scale selection plan for an input resolution: scales whose side
/// exceeds `image_res / threshold_ratio` stay inactive (k = 0); the
/// per-round budget splits over active scales proportionally to their
/// areas, largest-remainder rounded.
pub fn dynamic_resolution_schedule(
    image_res: usize,
    cfg: &EncoderConfig,
    threshold_ratio: f64,
) -> Result<Vec<usize>> {
    if image_res < cfg.low_res_side {
        return Err(Error::Argument(format!(
            "image resolution {image_res} below the low-res side {}",
            cfg.low_res_side
        )));
    }
    let sides = cfg.scale_sides();
    let active: Vec<bool> = sides
        .iter()
        .map(|&s| (image_res as f64) >= threshold_ratio * s as f64)
        .collect();
    let active_cells: Vec<usize> = sides
        .iter()
        .zip(&active)
        .map(|(&s, &a)| {
            if a {
                let g = s / cfg.patch_side;
                g * g
            } else {
                0
            }
        })
        .collect();
    let total_active: usize = active_cells.iter().sum();
    if total_active == 0 {
        return Ok(vec![0; sides.len()]);
    }
    let budget = cfg.per_round_cap.min(total_active);
    // allocate_k ignores zero-cell scales naturally.
    allocate_k(budget, &active_cells)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn schedule_file_parses() {
        let text = "regime = constant-cost\nprofile = desk\npoint = 128, 1.0, 1.0\npoint = 256, 0.25, 0.25\n";
        let s = ScalingSchedule::from_text(text, "t").unwrap();
        assert_eq!(s.regime, Regime::ConstantCost);
        assert_eq!(s.points.len(), 2);
        assert_eq!(s.points[1].max_side, 256);
        assert!(ScalingSchedule::from_text("point = 1,1,1\n", "t").is_err()); // no regime
        assert!(ScalingSchedule::from_text("regime = bogus\n", "t").is_err());
    }

    #[test]
    fn config_ladder_truncates_to_max_side() {
        let s = ScalingSchedule::from_text(
            "regime = whole-image\npoint = 128, 1.0, 1.0\npoint = 256, 1.0, 1.0\n",
            "t",
        )
        .unwrap();
        let c128 = s.config_for(&s.points[0], 0).unwrap();
        assert_eq!(c128.scale_multipliers, vec![2]);
        let c256 = s.config_for(&s.points[1], 0).unwrap();
        assert_eq!(c256.scale_multipliers, vec![2, 4]);
    }

    #[test]
    fn constant_cost_rows_share_token_counts() {
        // Fixed 320-patch budget on both ladders: equal hr_tokens.
        let text = "regime = constant-cost\npoint = 128, 1.0, 1.0\npoint = 256, 0.25, 0.25\n";
        let s = ScalingSchedule::from_text(text, "t").unwrap();
        // Fractions picked so round(f * cells) = 256 both times:
        // 128-ladder has 256 cells (f=1.0), 256-ladder has 1280 (f=0.2).
        let text2 = "regime = constant-cost\npoint = 128, 1.0, 1.0\npoint = 256, 0.2, 0.2\n";
        let s2 = ScalingSchedule::from_text(text2, "t").unwrap();
        let rows = run_accounting(&s2).unwrap();
        assert_eq!(rows[0].selected_total, rows[1].selected_total);
        assert_eq!(rows[0].hr_tokens, rows[1].hr_tokens);
        assert_eq!(rows[0].stage3_flops, rows[1].stage3_flops);
        drop(s);
    }

    #[test]
    fn accounting_reproduces_4k_ladder_anchors() {
        let text = "regime = whole-image\nprofile = 4k\n\
                    point = 756, 1.0, 1.0\npoint = 1512, 1.0, 1.0\npoint = 3780, 1.0, 0.17558\n";
        let s = ScalingSchedule::from_text(text, "t").unwrap();
        let rows = run_accounting(&s).unwrap();
        assert_eq!(rows[0].hr_tokens, 729);
        assert_eq!(rows[1].hr_tokens, 3645);
        // 0.17558 of 87480 cells rounds to 15360 selected -> 3840 tokens.
        assert_eq!(rows[2].selected_total, 15360);
        assert_eq!(rows[2].hr_tokens, 3840);
    }

    #[test]
    fn dynamic_plan_gates_fine_scales_by_resolution() {
        let cfg = EncoderConfig::desk(0);
        // Below 0.7 * 128: nothing active.
        let plan = dynamic_resolution_schedule(64, &cfg, DYNAMIC_THRESHOLD_RATIO).unwrap();
        assert_eq!(plan, vec![0, 0]);
        // Between the two thresholds: only the x2 scale selects.
        let plan = dynamic_resolution_schedule(150, &cfg, DYNAMIC_THRESHOLD_RATIO).unwrap();
        assert!(plan[0] > 0);
        assert_eq!(plan[1], 0);
        // At/above 0.7 * 256: all scales active, proportional to area.
        let plan = dynamic_resolution_schedule(180, &cfg, DYNAMIC_THRESHOLD_RATIO).unwrap();
        assert!(plan[0] > 0 && plan[1] > 0);
        assert_eq!(plan.iter().sum::<usize>(), cfg.per_round_cap);
        assert_eq!(plan[1], 4 * plan[0]); // 1024 vs 256 cells
    }

    #[test]
    fn dynamic_plan_matches_4k_ladder_rule() {
        // With the 4K ladder, a 2000px image sits under 0.7 * 3780 = 2646,
        // so the finest scale gets zero.
        let cfg = EncoderConfig::ladder_4k();
        let plan = dynamic_resolution_schedule(2000, &cfg, DYNAMIC_THRESHOLD_RATIO).unwrap();
        assert!(plan[0] > 0 && plan[1] > 0);
        assert_eq!(plan[2], 0);
        let plan = dynamic_resolution_schedule(2700, &cfg, DYNAMIC_THRESHOLD_RATIO).unwrap();
        assert!(plan[2] > 0);
    }

    #[test]
    fn csv_is_deterministic() {
        let text = "regime = whole-image\npoint = 256, 1.0, 1.0\n";
        let s = ScalingSchedule::from_text(text, "t").unwrap();
        let a = rows_to_csv(&run_accounting(&s).unwrap());
        let b = rows_to_csv(&run_accounting(&s).unwrap());
        assert_eq!(a, b);
        assert!(a.starts_with(SCALING_CSV_HEADER));
    }
}
