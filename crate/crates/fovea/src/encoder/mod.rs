//! Three-stage scale-selective encoder.
//!
//! Stage 1 runs a small ViT over the low-res view and records per-layer keys
//! and values. Stage 2 scores patch relevance against a prompt embedding by
//! combining low-res token cosines with features from a light convolutional
//! high-res encoder. Stage 3 embeds only the selected multi-scale patches and
//! runs the same ViT over them, concatenating the cached low-res keys/values
//! into every attention layer so local features see global context.

pub mod aux;
pub mod params;
pub mod selection;

use crate::error::{Error, Result};
use crate::pyramid::ImagePyramid;
use crate::rng::Rng;
use crate::scalar::Scalar;
use crate::tape::{Tape, TensorId};
use crate::tensor::Tensor;
use std::path::Path;

pub use aux::{selection_score_on, AuxFeatures, ScoredMaps};
pub use params::ParamStore;
pub use selection::{allocate_k, select_patches, select_rounds, Provenance, ScoreGrid, ScoreMap, SelectionSet};

/// Longest caption the text tower accepts (positional table size).
pub const MAX_CAPTION_LEN: usize = 32;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct EncoderConfig {
    /// Side of the square low-res view, pixels.
    pub low_res_side: usize,
    /// Patch side shared by every stage, pixels.
    pub patch_side: usize,
    /// High-res scale sides as multiples of `low_res_side`, strictly
    /// increasing, e.g. [2, 4].
    pub scale_multipliers: Vec<usize>,
    pub embed_dim: usize,
    pub num_heads: usize,
    pub num_layers: usize,
    /// Convolution blocks in the auxiliary high-res encoder.
    pub aux_blocks: usize,
    pub vocab_size: usize,
    pub text_layers: usize,
    /// Most patches one stage-3 round may select.
    pub per_round_cap: usize,
    pub seed: u64,
}

impl EncoderConfig {
    /// Profile small enough to train on a laptop CPU.
    pub fn desk(seed: u64) -> Self {
        EncoderConfig {
            low_res_side: 64,
            patch_side: 8,
            scale_multipliers: vec![2, 4],
            embed_dim: 64,
            num_heads: 2,
            num_layers: 3,
            aux_blocks: 3,
            vocab_size: 256,
            text_layers: 2,
            per_round_cap: 320,
            seed,
        }
    }

    /// The 378/14 geometry with a 4K scale ladder (756/1512/3780). Used for
    /// token and FLOP accounting; too large to train here.
    pub fn ladder_4k() -> Self {
        EncoderConfig {
            low_res_side: 378,
            patch_side: 14,
            scale_multipliers: vec![2, 4, 10],
            embed_dim: 64,
            num_heads: 2,
            num_layers: 3,
            aux_blocks: 3,
            vocab_size: 256,
            text_layers: 2,
            per_round_cap: 2560,
            seed: 0,
        }
    }

    pub fn scale_sides(&self) -> Vec<usize> {
        self.scale_multipliers
            .iter()
            .map(|m| m * self.low_res_side)
            .collect()
    }

    pub fn low_grid(&self) -> usize {
        self.low_res_side / self.patch_side
    }

    pub fn low_cells(&self) -> usize {
        self.low_grid() * self.low_grid()
    }

    pub fn scale_grids(&self) -> Vec<usize> {
        self.scale_sides()
            .iter()
            .map(|s| s / self.patch_side)
            .collect()
    }

    pub fn cells_per_scale(&self) -> Vec<usize> {
        self.scale_grids().iter().map(|g| g * g).collect()
    }

    pub fn total_cells(&self) -> usize {
        self.cells_per_scale().iter().sum()
    }

    pub fn patch_dim(&self) -> usize {
        self.patch_side * self.patch_side * 3
    }

    /// Index of the scale fed to the auxiliary encoder: the largest-but-one
    /// scale, or the only scale on single-scale ladders.
    pub fn aux_scale_index(&self) -> usize {
        self.scale_multipliers.len().saturating_sub(2)
    }

    pub fn aux_input_side(&self) -> usize {
        self.scale_sides()[self.aux_scale_index()]
    }

    /// Aux channel width after block `i` (before the final projection).
    pub fn aux_width(i: usize) -> usize {
        16 << i
    }

    pub fn validate(&self) -> Result<()> {
        if self.patch_side == 0 || self.low_res_side % self.patch_side != 0 {
            return Err(Error::Config(format!(
                "low_res_side {} must be divisible by patch_side {}",
                self.low_res_side, self.patch_side
            )));
        }
        if self.scale_multipliers.is_empty() {
            return Err(Error::Config("scale_multipliers must not be empty".into()));
        }
        let mut prev = 1;
        for &m in &self.scale_multipliers {
            if m <= prev {
                return Err(Error::Config(
                    "scale_multipliers must be strictly increasing and > 1".into(),
                ));
            }
            prev = m;
        }
        if self.embed_dim == 0 || self.embed_dim % self.num_heads != 0 {
            return Err(Error::Config(format!(
                "embed_dim {} must be divisible by num_heads {}",
                self.embed_dim, self.num_heads
            )));
        }
        if self.num_layers == 0 || self.text_layers == 0 || self.aux_blocks == 0 {
            return Err(Error::Config("layer counts must be positive".into()));
        }
        let aux_side = self.aux_input_side();
        if aux_side % (1 << self.aux_blocks) != 0 {
            return Err(Error::Config(format!(
                "aux input side {aux_side} not divisible by 2^{}",
                self.aux_blocks
            )));
        }
        if self.vocab_size == 0 || self.per_round_cap == 0 {
            return Err(Error::Config("vocab_size and per_round_cap must be positive".into()));
        }
        Ok(())
    }
}

/// Per-layer keys and values of the low-res token sequence.
pub struct KvCache {
    /// (keys [tokens, d], values [tokens, d]) per transformer layer.
    pub layers: Vec<(TensorId, TensorId)>,
    pub tokens: usize,
}

#[derive(Clone, Copy, Debug)]
pub struct HighResOpts {
    /// Concatenate cached low-res K/V into stage-3 attention.
    pub use_kv_cache: bool,
    /// Add the per-scale learned offset on top of the interpolated
    /// positional embedding.
    pub use_scale_pe: bool,
}

impl Default for HighResOpts {
    fn default() -> Self {
        HighResOpts {
            use_kv_cache: true,
            use_scale_pe: true,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum Prompt {
    /// Select patches relevant to a caption.
    TopDown(Vec<u16>),
    /// Select by intrinsic saliency via the learned constant prompt vector.
    BottomUp,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PromptMode {
    TopDown,
    BottomUp,
}

/// Detached prompt embedding, for callers outside a tape pass.
#[derive(Clone, Debug)]
pub struct PromptEmbedding<T> {
    pub vector: Vec<T>,
    pub mode: PromptMode,
}

impl<T: Scalar> PromptEmbedding<T> {
    pub fn from_tape(tape: &Tape<T>, id: TensorId, mode: PromptMode) -> Result<Self> {
        let vector = tape.value(id).data().to_vec();
        if vector.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numeric("prompt embedding has non-finite values".into()));
        }
        Ok(PromptEmbedding { vector, mode })
    }
}

/// Output of the multi-round encode: round selections plus features
/// concatenated in (round, scale, index) order.
pub struct MultiRoundOutput<T: Scalar> {
    pub features: TensorId,
    pub rounds: Vec<SelectionSet>,
    pub low_res_tokens: TensorId,
    pub cache: KvCache,
    pub score_map: ScoreMap<T>,
}

pub struct Encoder<T: Scalar> {
    pub cfg: EncoderConfig,
    pub params: ParamStore<T>,
}

impl<T: Scalar> Encoder<T> {
    pub fn new(cfg: EncoderConfig) -> Result<Self> {
        cfg.validate()?;
        let params = init_params(&cfg)?;
        Ok(Encoder { cfg, params })
    }

    pub fn from_parts(cfg: EncoderConfig, params: ParamStore<T>) -> Result<Self> {
        cfg.validate()?;
        Ok(Encoder { cfg, params })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        params::save_checkpoint(path, &self.cfg, &self.params)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let (cfg, params) = params::load_checkpoint(path)?;
        Self::from_parts(cfg, params)
    }

    pub fn forward(&self) -> Forward<'_, T> {
        Forward::new(self)
    }

    /// Convert parameter precision (training f32 <-> verification f64).
    pub fn convert<U: Scalar>(&self) -> Result<Encoder<U>> {
        Encoder::from_parts(self.cfg.clone(), self.params.convert())
    }
}

fn normal_tensor<T: Scalar>(rng: &mut Rng, shape: Vec<usize>, sigma: f64) -> Tensor<T> {
    let n: usize = shape.iter().product();
    let data: Vec<T> = (0..n).map(|_| T::from_f64(rng.normal() * sigma)).collect();
    Tensor::new(shape, data).expect("shape/data consistent")
}

fn init_params<T: Scalar>(cfg: &EncoderConfig) -> Result<ParamStore<T>> {
    let mut rng = Rng::seed_from(cfg.seed).derive("encoder-init");
    let mut p = ParamStore::new();
    let d = cfg.embed_dim;
    let pd = cfg.patch_dim();

    p.insert("patch_embed.w", normal_tensor(&mut rng, vec![pd, d], 0.02))?;
    p.insert("patch_embed.b", Tensor::zeros(vec![d]))?;
    p.insert(
        "pos.low",
        normal_tensor(&mut rng, vec![cfg.low_cells(), d], 0.02),
    )?;
    for s in 0..cfg.scale_multipliers.len() {
        p.insert(
            &format!("pos.scale.{s}"),
            normal_tensor(&mut rng, vec![d], 0.02),
        )?;
    }
    for prefix_layers in [("vit", cfg.num_layers), ("text", cfg.text_layers)] {
        let (prefix, layers) = prefix_layers;
        for l in 0..layers {
            let pre = format!("{prefix}.{l}");
            p.insert(&format!("{pre}.ln1.g"), Tensor::full(vec![d], T::ONE))?;
            p.insert(&format!("{pre}.ln1.b"), Tensor::zeros(vec![d]))?;
            for w in ["wq", "wk", "wv", "wo"] {
                p.insert(
                    &format!("{pre}.attn.{w}"),
                    normal_tensor(&mut rng, vec![d, d], 0.02),
                )?;
                p.insert(
                    &format!("{pre}.attn.{}", w.replace('w', "b")),
                    Tensor::zeros(vec![d]),
                )?;
            }
            p.insert(&format!("{pre}.ln2.g"), Tensor::full(vec![d], T::ONE))?;
            p.insert(&format!("{pre}.ln2.b"), Tensor::zeros(vec![d]))?;
            p.insert(
                &format!("{pre}.mlp.w1"),
                normal_tensor(&mut rng, vec![d, 4 * d], 0.02),
            )?;
            p.insert(&format!("{pre}.mlp.b1"), Tensor::zeros(vec![4 * d]))?;
            p.insert(
                &format!("{pre}.mlp.w2"),
                normal_tensor(&mut rng, vec![4 * d, d], 0.02),
            )?;
            p.insert(&format!("{pre}.mlp.b2"), Tensor::zeros(vec![d]))?;
        }
        p.insert(&format!("{prefix}.final.g"), Tensor::full(vec![d], T::ONE))?;
        p.insert(&format!("{prefix}.final.b"), Tensor::zeros(vec![d]))?;
    }
    // Aux conv stack: depthwise 3x3, pointwise expansion, activation, pool.
    let mut cin = 3usize;
    for b in 0..cfg.aux_blocks {
        let cout = EncoderConfig::aux_width(b);
        let dw_sigma = (2.0 / 9.0f64).sqrt();
        let pw_sigma = (2.0 / cin as f64).sqrt();
        p.insert(
            &format!("aux.{b}.dw"),
            normal_tensor(&mut rng, vec![3, 3, 1, cin], dw_sigma),
        )?;
        p.insert(&format!("aux.{b}.dwb"), Tensor::zeros(vec![cin]))?;
        p.insert(
            &format!("aux.{b}.pw"),
            normal_tensor(&mut rng, vec![1, 1, cin, cout], pw_sigma),
        )?;
        p.insert(&format!("aux.{b}.pwb"), Tensor::zeros(vec![cout]))?;
        cin = cout;
    }
    p.insert("aux.proj.w", normal_tensor(&mut rng, vec![cin, d], 0.02))?;
    p.insert("aux.proj.b", Tensor::zeros(vec![d]))?;

    p.insert("prompt.bottom_up", normal_tensor(&mut rng, vec![1, d], 0.02))?;

    p.insert("pool.q", normal_tensor(&mut rng, vec![1, d], 0.02))?;
    p.insert("pool.wk", normal_tensor(&mut rng, vec![d, d], 0.02))?;
    p.insert("pool.wv", normal_tensor(&mut rng, vec![d, d], 0.02))?;

    p.insert(
        "text.embed",
        normal_tensor(&mut rng, vec![cfg.vocab_size, d], 0.02),
    )?;
    p.insert(
        "text.pos",
        normal_tensor(&mut rng, vec![MAX_CAPTION_LEN, d], 0.02),
    )?;
    p.insert("text.proj.w", normal_tensor(&mut rng, vec![d, d], 0.02))?;
    p.insert("text.proj.b", Tensor::zeros(vec![d]))?;

    // Contrastive temperature/bias live with the model so checkpoints are
    // self-contained. t = exp(t_prime).
    p.insert("contrast.t_prime", Tensor::scalar(T::from_f64(10.0f64.ln())))?;
    p.insert("contrast.bias", Tensor::scalar(T::from_f64(-10.0)))?;
    Ok(p)
}

/// One forward pass: a tape plus lazily inserted parameter leaves.
pub struct Forward<'e, T: Scalar> {
    pub enc: &'e Encoder<T>,
    pub tape: Tape<T>,
    param_ids: Vec<Option<TensorId>>,
}

impl<'e, T: Scalar> Forward<'e, T> {
    pub fn new(enc: &'e Encoder<T>) -> Self {
        Forward {
            enc,
            tape: Tape::new(),
            param_ids: vec![None; enc.params.len()],
        }
    }

    /// Tape id of a named parameter, inserting the leaf on first use.
    pub fn param(&mut self, name: &str) -> Result<TensorId> {
        let idx = self.enc.params.index_of(name)?;
        if let Some(id) = self.param_ids[idx] {
            return Ok(id);
        }
        let id = self.tape.leaf(self.enc.params.at(idx).1.clone());
        self.param_ids[idx] = Some(id);
        Ok(id)
    }

    /// Post-backward gradients in parameter-store order (None when a
    /// parameter never entered this pass or received no gradient).
    pub fn param_grads(&self) -> Vec<Option<Vec<T>>> {
        self.param_ids
            .iter()
            .map(|slot| slot.and_then(|id| self.tape.grad(id).map(<[T]>::to_vec)))
            .collect()
    }

    fn check_pyramid(&self, pyr: &ImagePyramid) -> Result<()> {
        let cfg = &self.enc.cfg;
        if pyr.low_res.width != cfg.low_res_side
            || pyr.patch_side != cfg.patch_side
            || pyr.scales.iter().map(|s| s.width).collect::<Vec<_>>() != cfg.scale_sides()
        {
            return Err(Error::Dimension(format!(
                "pyramid (low {}, patch {}, scales {:?}) does not match config (low {}, patch {}, scales {:?})",
                pyr.low_res.width,
                pyr.patch_side,
                pyr.scales.iter().map(|s| s.width).collect::<Vec<_>>(),
                cfg.low_res_side,
                cfg.patch_side,
                cfg.scale_sides()
            )));
        }
        Ok(())
    }

    /// Multi-head self attention over `x_norm`, optionally prepending cached
    /// keys/values. Returns (output, (keys, values)) where keys/values cover
    /// the current tokens only.
    fn attention(
        &mut self,
        x_norm: TensorId,
        prefix: &str,
        extra_kv: Option<(TensorId, TensorId)>,
    ) -> Result<(TensorId, (TensorId, TensorId))> {
        let d = self.enc.cfg.embed_dim;
        let heads = self.enc.cfg.num_heads;
        let dh = d / heads;
        let wq = self.param(&format!("{prefix}.attn.wq"))?;
        let bq = self.param(&format!("{prefix}.attn.bq"))?;
        let wk = self.param(&format!("{prefix}.attn.wk"))?;
        let bk = self.param(&format!("{prefix}.attn.bk"))?;
        let wv = self.param(&format!("{prefix}.attn.wv"))?;
        let bv = self.param(&format!("{prefix}.attn.bv"))?;
        let wo = self.param(&format!("{prefix}.attn.wo"))?;
        let bo = self.param(&format!("{prefix}.attn.bo"))?;

        let q = self.tape.matmul(x_norm, wq)?;
        let q = self.tape.add_bias(q, bq)?;
        let k = self.tape.matmul(x_norm, wk)?;
        let k = self.tape.add_bias(k, bk)?;
        let v = self.tape.matmul(x_norm, wv)?;
        let v = self.tape.add_bias(v, bv)?;

        let (k_all, v_all) = match extra_kv {
            Some((ck, cv)) => (
                self.tape.concat_rows(&[ck, k])?,
                self.tape.concat_rows(&[cv, v])?,
            ),
            None => (k, v),
        };

        let scale = 1.0 / (dh as f64).sqrt();
        let mut head_outs = Vec::with_capacity(heads);
        for h in 0..heads {
            let qh = self.tape.slice_cols(q, h * dh, (h + 1) * dh)?;
            let kh = self.tape.slice_cols(k_all, h * dh, (h + 1) * dh)?;
            let vh = self.tape.slice_cols(v_all, h * dh, (h + 1) * dh)?;
            let kt = self.tape.transpose(kh)?;
            let scores = self.tape.matmul(qh, kt)?;
            let scores = self.tape.scale(scores, scale)?;
            let attn = self.tape.softmax(scores, 1)?;
            head_outs.push(self.tape.matmul(attn, vh)?);
        }
        let merged = self.tape.concat_cols(&head_outs)?;
        let out = self.tape.matmul(merged, wo)?;
        let out = self.tape.add_bias(out, bo)?;
        Ok((out, (k, v)))
    }

    /// Pre-norm transformer block. Returns the block output and the (K, V)
    /// of the current tokens at this layer.
    fn block(
        &mut self,
        x: TensorId,
        prefix: &str,
        extra_kv: Option<(TensorId, TensorId)>,
    ) -> Result<(TensorId, (TensorId, TensorId))> {
        let g1 = self.param(&format!("{prefix}.ln1.g"))?;
        let b1 = self.param(&format!("{prefix}.ln1.b"))?;
        let normed = self.tape.layer_norm(x, g1, b1)?;
        let (attn_out, kv) = self.attention(normed, prefix, extra_kv)?;
        let x = self.tape.add(x, attn_out)?;

        let g2 = self.param(&format!("{prefix}.ln2.g"))?;
        let b2 = self.param(&format!("{prefix}.ln2.b"))?;
        let normed = self.tape.layer_norm(x, g2, b2)?;
        let w1 = self.param(&format!("{prefix}.mlp.w1"))?;
        let bm1 = self.param(&format!("{prefix}.mlp.b1"))?;
        let w2 = self.param(&format!("{prefix}.mlp.w2"))?;
        let bm2 = self.param(&format!("{prefix}.mlp.b2"))?;
        let hidden = self.tape.matmul(normed, w1)?;
        let hidden = self.tape.add_bias(hidden, bm1)?;
        let hidden = self.tape.gelu(hidden)?;
        let mlp_out = self.tape.matmul(hidden, w2)?;
        let mlp_out = self.tape.add_bias(mlp_out, bm2)?;
        let x = self.tape.add(x, mlp_out)?;
        Ok((x, kv))
    }

    fn final_norm(&mut self, x: TensorId, prefix: &str) -> Result<TensorId> {
        let g = self.param(&format!("{prefix}.final.g"))?;
        let b = self.param(&format!("{prefix}.final.b"))?;
        self.tape.layer_norm(x, g, b)
    }

    /// Stage 1: ViT over the low-res view, recording per-layer K/V.
    pub fn encode_low_res(&mut self, pyr: &ImagePyramid) -> Result<(TensorId, KvCache)> {
        self.check_pyramid(pyr)?;
        let patches = self.tape.constant(pyr.low_res_patches());
        let pe_w = self.param("patch_embed.w")?;
        let pe_b = self.param("patch_embed.b")?;
        let x = self.tape.matmul(patches, pe_w)?;
        let x = self.tape.add_bias(x, pe_b)?;
        let pos = self.param("pos.low")?;
        let mut x = self.tape.add(x, pos)?;
        let mut layers = Vec::with_capacity(self.enc.cfg.num_layers);
        for l in 0..self.enc.cfg.num_layers {
            let (nx, kv) = self.block(x, &format!("vit.{l}"), None)?;
            x = nx;
            layers.push(kv);
        }
        let tokens = self.final_norm(x, "vit")?;
        Ok((
            tokens,
            KvCache {
                layers,
                tokens: self.enc.cfg.low_cells(),
            },
        ))
    }

    /// Positional embedding for selected patches: the low-res positional grid
    /// bilinearly resampled to each scale grid, gathered at the selected
    /// cells, plus (optionally) the scale's learned offset vector.
    pub fn scale_positional_embedding(
        &mut self,
        selection: &SelectionSet,
        with_offsets: bool,
    ) -> Result<TensorId> {
        let cfg = &self.enc.cfg;
        let g = cfg.low_grid();
        let d = cfg.embed_dim;
        let grids = cfg.scale_grids();
        if selection.per_scale.len() != grids.len() {
            return Err(Error::Dimension(format!(
                "selection covers {} scales, config has {}",
                selection.per_scale.len(),
                grids.len()
            )));
        }
        let pos = self.param("pos.low")?;
        let pos_grid = self.tape.reshape(pos, vec![g, g, d])?;
        let mut parts = Vec::new();
        for (s, indices) in selection.per_scale.iter().enumerate() {
            if indices.is_empty() {
                continue;
            }
            let gs = grids[s];
            let up = self.tape.interpolate_bilinear(pos_grid, gs, gs)?;
            let flat = self.tape.reshape(up, vec![gs * gs, d])?;
            let mut sel = self.tape.gather_rows(flat, indices)?;
            if with_offsets {
                let off = self.param(&format!("pos.scale.{s}"))?;
                sel = self.tape.add_bias(sel, off)?;
            }
            parts.push(sel);
        }
        if parts.is_empty() {
            return Ok(self.tape.constant(Tensor::zeros(vec![0, d])));
        }
        self.tape.concat_rows(&parts)
    }

    /// Stage 3: embed the selected multi-scale patches and run the shared
    /// ViT over them with the low-res KV cache concatenated into every
    /// attention layer. Output rows follow (scale, index) order.
    pub fn encode_high_res(
        &mut self,
        pyr: &ImagePyramid,
        selection: &SelectionSet,
        cache: &KvCache,
        opts: HighResOpts,
    ) -> Result<TensorId> {
        self.check_pyramid(pyr)?;
        let cfg = &self.enc.cfg;
        if cache.layers.len() != cfg.num_layers {
            return Err(Error::Config(format!(
                "cache has {} layers, config expects {}",
                cache.layers.len(),
                cfg.num_layers
            )));
        }
        if cache.tokens != cfg.low_cells() {
            return Err(Error::Dimension(format!(
                "cache holds {} tokens, low-res grid has {}",
                cache.tokens,
                cfg.low_cells()
            )));
        }
        if selection.total() == 0 {
            return Ok(self.tape.constant(Tensor::zeros(vec![0, cfg.embed_dim])));
        }
        let mut patch_parts = Vec::new();
        for (s, indices) in selection.per_scale.iter().enumerate() {
            if indices.is_empty() {
                continue;
            }
            patch_parts.push(self.tape.constant(pyr.scale_patches(s, indices)));
        }
        let patches = self.tape.concat_rows(&patch_parts)?;
        let pe_w = self.param("patch_embed.w")?;
        let pe_b = self.param("patch_embed.b")?;
        let x = self.tape.matmul(patches, pe_w)?;
        let x = self.tape.add_bias(x, pe_b)?;
        let pos = self.scale_positional_embedding(selection, opts.use_scale_pe)?;
        let mut x = self.tape.add(x, pos)?;
        for l in 0..cfg.num_layers {
            let extra = if opts.use_kv_cache {
                Some(cache.layers[l])
            } else {
                None
            };
            let (nx, _) = self.block(x, &format!("vit.{l}"), extra)?;
            x = nx;
        }
        self.final_norm(x, "vit")
    }

    /// Multi-round selection and encoding for budgets beyond the per-round
    /// cap. Rounds share the low-res cache; each stage-3 pass is otherwise
    /// independent.
    pub fn encode_multi_round(
        &mut self,
        pyr: &ImagePyramid,
        prompt: &Prompt,
        total_k: usize,
        smoothing_sigma: Option<f64>,
    ) -> Result<MultiRoundOutput<T>> {
        let cfg = &self.enc.cfg;
        if total_k > cfg.total_cells() {
            return Err(Error::Argument(format!(
                "total_k {total_k} exceeds {} cells",
                cfg.total_cells()
            )));
        }
        let (tokens, cache) = self.encode_low_res(pyr)?;
        let aux = self.aux_highres_encode(pyr)?;
        let prompt_id = self.prompt_embedding(prompt)?;
        let grids = cfg.scale_grids();
        let scored = self.selection_score(tokens, &aux, prompt_id, &grids, smoothing_sigma)?;
        let rounds = select_rounds(&scored.map, total_k, cfg.per_round_cap)?;
        let mut feats = Vec::with_capacity(rounds.len());
        for round in &rounds {
            feats.push(self.encode_high_res(pyr, round, &cache, HighResOpts::default())?);
        }
        let features = if feats.is_empty() {
            self.tape.constant(Tensor::zeros(vec![0, cfg.embed_dim]))
        } else if feats.len() == 1 {
            feats[0]
        } else {
            self.tape.concat_rows(&feats)?
        };
        Ok(MultiRoundOutput {
            features,
            rounds,
            low_res_tokens: tokens,
            cache,
            score_map: scored.map,
        })
    }

    /// Single-query attention pooling; masked-out tokens receive -inf logits
    /// so the output depends only on kept tokens.
    pub fn attention_pool(&mut self, tokens: TensorId, keep: &[bool]) -> Result<TensorId> {
        let (n, _d) = self.tape.value(tokens).dims2()?;
        if keep.len() != n {
            return Err(Error::Dimension(format!(
                "keep mask of {} for {} tokens",
                keep.len(),
                n
            )));
        }
        if !keep.iter().any(|&k| k) {
            return Err(Error::Argument("attention_pool with empty keep set".into()));
        }
        let wk = self.param("pool.wk")?;
        let wv = self.param("pool.wv")?;
        let q = self.param("pool.q")?;
        let k = self.tape.matmul(tokens, wk)?;
        let v = self.tape.matmul(tokens, wv)?;
        let kt = self.tape.transpose(k)?;
        let logits = self.tape.matmul(q, kt)?;
        let logits = self
            .tape
            .scale(logits, 1.0 / (self.enc.cfg.embed_dim as f64).sqrt())?;
        let mask_data: Vec<T> = keep
            .iter()
            .map(|&keep| if keep { T::ZERO } else { T::neg_infinity() })
            .collect();
        let mask = self
            .tape
            .constant(Tensor::new(vec![1, n], mask_data)?);
        let masked = self.tape.add(logits, mask)?;
        let attn = self.tape.softmax(masked, 1)?;
        self.tape.matmul(attn, v)
    }

    /// Small transformer text tower: token + positional embeddings, blocks,
    /// mean pooling, projection, unit normalization.
    pub fn text_encode(&mut self, caption: &[u16]) -> Result<TensorId> {
        let cfg = &self.enc.cfg;
        if caption.is_empty() {
            return Err(Error::Argument("empty caption".into()));
        }
        if caption.len() > MAX_CAPTION_LEN {
            return Err(Error::Argument(format!(
                "caption of {} tokens exceeds the maximum {MAX_CAPTION_LEN}",
                caption.len()
            )));
        }
        if let Some(&bad) = caption.iter().find(|&&t| (t as usize) >= cfg.vocab_size) {
            return Err(Error::Argument(format!(
                "token id {bad} outside vocabulary of {}",
                cfg.vocab_size
            )));
        }
        let ids: Vec<usize> = caption.iter().map(|&t| t as usize).collect();
        let table = self.param("text.embed")?;
        let emb = self.tape.gather_rows(table, &ids)?;
        let pos_table = self.param("text.pos")?;
        let positions: Vec<usize> = (0..ids.len()).collect();
        let pos = self.tape.gather_rows(pos_table, &positions)?;
        let mut x = self.tape.add(emb, pos)?;
        for l in 0..cfg.text_layers {
            let (nx, _) = self.block(x, &format!("text.{l}"), None)?;
            x = nx;
        }
        let x = self.final_norm(x, "text")?;
        let n = ids.len();
        let pool_row = self
            .tape
            .constant(Tensor::full(vec![1, n], T::from_f64(1.0 / n as f64)));
        let pooled = self.tape.matmul(pool_row, x)?;
        let w = self.param("text.proj.w")?;
        let b = self.param("text.proj.b")?;
        let proj = self.tape.matmul(pooled, w)?;
        let proj = self.tape.add_bias(proj, b)?;
        self.tape.normalize_rows(proj)
    }

    /// Prompt embedding: caption through the text tower, or the learned
    /// constant vector for bottom-up selection.
    pub fn prompt_embedding(&mut self, prompt: &Prompt) -> Result<TensorId> {
        match prompt {
            Prompt::TopDown(caption) => self.text_encode(caption),
            Prompt::BottomUp => self.param("prompt.bottom_up"),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::raster::RasterImage;

    fn desk_encoder() -> Encoder<f32> {
        Encoder::new(EncoderConfig::desk(5)).unwrap()
    }

    fn desk_pyramid(fill: [f32; 3]) -> ImagePyramid {
        let base = RasterImage::filled(256, 256, fill);
        ImagePyramid::build(&base, 64, 8, &[128, 256]).unwrap()
    }

    #[test]
    fn low_res_token_count_follows_grid() {
        // (64/8)^2 = 64 tokens on the small profile.
        let enc = desk_encoder();
        let pyr = desk_pyramid([0.2, 0.4, 0.6]);
        let mut fwd = enc.forward();
        let (tokens, cache) = fwd.encode_low_res(&pyr).unwrap();
        assert_eq!(fwd.tape.value(tokens).shape(), &[64, 64]);
        assert_eq!(cache.layers.len(), 3);
        for &(k, v) in &cache.layers {
            assert_eq!(fwd.tape.value(k).shape(), &[64, 64]);
            assert_eq!(fwd.tape.value(v).shape(), &[64, 64]);
        }
    }

    #[test]
    fn ladder_4k_geometry_gives_729_tokens() {
        // 378/14 -> 27x27 = 729 output tokens.
        let cfg = EncoderConfig::ladder_4k();
        assert_eq!(cfg.low_cells(), 729);
        assert_eq!(cfg.scale_grids(), vec![54, 108, 270]);
    }

    #[test]
    fn zero_image_yields_finite_tokens() {
        let enc = desk_encoder();
        let pyr = desk_pyramid([0.0, 0.0, 0.0]);
        let mut fwd = enc.forward();
        let (tokens, _) = fwd.encode_low_res(&pyr).unwrap();
        assert!(fwd.tape.value(tokens).data().iter().all(|v| v.is_finite()));
    }

    #[test]
    fn pyramid_config_mismatch_is_dimension_error() {
        let enc = desk_encoder();
        let base = RasterImage::filled(256, 256, [0.1; 3]);
        let pyr = ImagePyramid::build(&base, 64, 8, &[128]).unwrap();
        let mut fwd = enc.forward();
        assert!(matches!(
            fwd.encode_low_res(&pyr),
            Err(Error::Dimension(_))
        ));
    }

    #[test]
    fn empty_selection_is_a_legal_no_op() {
        let enc = desk_encoder();
        let pyr = desk_pyramid([0.5; 3]);
        let mut fwd = enc.forward();
        let (_tokens, cache) = fwd.encode_low_res(&pyr).unwrap();
        let sel = SelectionSet::empty(2);
        let out = fwd
            .encode_high_res(&pyr, &sel, &cache, HighResOpts::default())
            .unwrap();
        assert_eq!(fwd.tape.value(out).shape(), &[0, 64]);
    }

    #[test]
    fn high_res_output_order_and_shape() {
        let enc = desk_encoder();
        let pyr = desk_pyramid([0.3, 0.1, 0.9]);
        let mut fwd = enc.forward();
        let (_tokens, cache) = fwd.encode_low_res(&pyr).unwrap();
        let sel = SelectionSet {
            per_scale: vec![vec![0, 5], vec![7]],
            k_used: vec![2, 1],
        };
        let out = fwd
            .encode_high_res(&pyr, &sel, &cache, HighResOpts::default())
            .unwrap();
        assert_eq!(fwd.tape.value(out).shape(), &[3, 64]);
    }

    #[test]
    fn cache_layer_mismatch_is_config_error() {
        let enc = desk_encoder();
        let pyr = desk_pyramid([0.5; 3]);
        let mut fwd = enc.forward();
        let (_t, cache) = fwd.encode_low_res(&pyr).unwrap();
        let bad = KvCache {
            layers: cache.layers[..2].to_vec(),
            tokens: cache.tokens,
        };
        let sel = SelectionSet {
            per_scale: vec![vec![0], vec![]],
            k_used: vec![1, 0],
        };
        assert!(matches!(
            fwd.encode_high_res(&pyr, &sel, &bad, HighResOpts::default()),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn scale_pe_knot_alignment_on_triple_ladder() {
        // With a x3 multiplier, fine cell (3j+1) centers coincide with
        // coarse cell j centers, so interpolation lands on a knot and must
        // reproduce the low-res embedding exactly.
        let mut cfg = EncoderConfig::desk(9);
        cfg.scale_multipliers = vec![3];
        cfg.aux_blocks = 1; // aux side 192 not divisible by 8 otherwise
        let enc: Encoder<f64> = Encoder::new(cfg).unwrap();
        let g = enc.cfg.low_grid(); // 8
        let gs = 3 * g; // 24
        let d = enc.cfg.embed_dim;
        let (cj, ci) = (2usize, 5usize); // arbitrary low-res cell
        let fine = (3 * cj + 1) * gs + (3 * ci + 1);
        let mut fwd = enc.forward();
        let sel = SelectionSet {
            per_scale: vec![vec![fine]],
            k_used: vec![1],
        };
        let emb = fwd.scale_positional_embedding(&sel, false).unwrap();
        let got = fwd.tape.value(emb).data().to_vec();
        let table = enc.params.get("pos.low").unwrap();
        let want = &table.data()[(cj * g + ci) * d..(cj * g + ci + 1) * d];
        for (a, b) in got.iter().zip(want) {
            assert!((a - b).abs() < 1e-12, "{a} vs {b}");
        }
    }

    #[test]
    fn same_position_different_scale_differs_by_offset_delta() {
        // With the positional table zeroed, the interpolated part vanishes
        // at every scale, so two selections at any positions carry the
        // scale offsets alone and differ exactly by (offset_0 - offset_1).
        // (On a 2x ladder no cell centers coincide across scales, so the
        // equal-interpolation construction needs the zeroed table.)
        let enc: Encoder<f64> = Encoder::new(EncoderConfig::desk(11)).unwrap();
        let d = enc.cfg.embed_dim;
        let mut zeroed = enc;
        *zeroed.params.get_mut("pos.low").unwrap() =
            crate::tensor::Tensor::zeros(vec![zeroed.cfg.low_cells(), d]);
        let mut fwd = zeroed.forward();
        let sel = SelectionSet {
            per_scale: vec![vec![37], vec![411]],
            k_used: vec![1, 1],
        };
        let emb = fwd.scale_positional_embedding(&sel, true).unwrap();
        let got = fwd.tape.value(emb).data().to_vec();
        let off0 = zeroed.params.get("pos.scale.0").unwrap().data().to_vec();
        let off1 = zeroed.params.get("pos.scale.1").unwrap().data().to_vec();
        // With an all-zero positional table the embedding equals the scale
        // offset alone, so rows differ exactly by (offset_0 - offset_1).
        for c in 0..d {
            assert!((got[c] - off0[c]).abs() < 1e-12);
            assert!((got[d + c] - off1[c]).abs() < 1e-12);
            let delta = got[c] - got[d + c];
            assert!((delta - (off0[c] - off1[c])).abs() < 1e-12);
        }
    }

    #[test]
    fn pool_single_token_equals_value_projection() {
        let enc: Encoder<f64> = Encoder::new(EncoderConfig::desk(13)).unwrap();
        let d = enc.cfg.embed_dim;
        let mut rng = crate::rng::Rng::seed_from(79);
        let data: Vec<f64> = (0..3 * d).map(|_| rng.range_f64(-1.0, 1.0)).collect();
        let mut fwd = enc.forward();
        let tokens = fwd
            .tape
            .constant(Tensor::new(vec![3, d], data.clone()).unwrap());
        let out = fwd
            .attention_pool(tokens, &[false, true, false])
            .unwrap();
        // Softmax over a singleton is 1, so out = token_1 . Wv exactly.
        let wv = enc.params.get("pool.wv").unwrap();
        let token = &data[d..2 * d];
        let got = fwd.tape.value(out).data();
        for j in 0..d {
            let mut want = 0.0;
            for i in 0..d {
                want += token[i] * wv.data()[i * d + j];
            }
            assert!((got[j] - want).abs() < 1e-9);
        }
    }

    #[test]
    fn pool_is_bit_identical_under_masked_token_changes() {
        let enc: Encoder<f32> = desk_encoder();
        let d = enc.cfg.embed_dim;
        let mut rng = crate::rng::Rng::seed_from(83);
        let base: Vec<f32> = (0..4 * d).map(|_| rng.range_f64(-1.0, 1.0) as f32).collect();
        let keep = [true, false, true, false];
        let run = |data: Vec<f32>| {
            let mut fwd = enc.forward();
            let tokens = fwd.tape.constant(Tensor::new(vec![4, d], data).unwrap());
            let out = fwd.attention_pool(tokens, &keep).unwrap();
            fwd.tape.value(out).data().to_vec()
        };
        let a = run(base.clone());
        let mut wild = base;
        for r in [1usize, 3] {
            for c in 0..d {
                wild[r * d + c] = (rng.range_f64(-100.0, 100.0)) as f32;
            }
        }
        let b = run(wild);
        assert_eq!(a, b);
    }

    #[test]
    fn pool_empty_keep_set_is_an_error() {
        let enc = desk_encoder();
        let mut fwd = enc.forward();
        let tokens = fwd.tape.constant(Tensor::zeros(vec![2, 64]));
        assert!(fwd.attention_pool(tokens, &[false, false]).is_err());
    }

    #[test]
    fn pool_identical_tokens_all_kept() {
        let enc: Encoder<f64> = Encoder::new(EncoderConfig::desk(17)).unwrap();
        let d = enc.cfg.embed_dim;
        let mut rng = crate::rng::Rng::seed_from(89);
        let row: Vec<f64> = (0..d).map(|_| rng.range_f64(-1.0, 1.0)).collect();
        let mut data = Vec::new();
        for _ in 0..5 {
            data.extend_from_slice(&row);
        }
        let mut fwd = enc.forward();
        let tokens = fwd.tape.constant(Tensor::new(vec![5, d], data).unwrap());
        let out = fwd.attention_pool(tokens, &[true; 5]).unwrap();
        let wv = enc.params.get("pool.wv").unwrap();
        let got = fwd.tape.value(out).data();
        for j in 0..d {
            let mut want = 0.0;
            for i in 0..d {
                want += row[i] * wv.data()[i * d + j];
            }
            assert!((got[j] - want).abs() < 1e-9);
        }
    }

    #[test]
    fn text_encode_contracts() {
        let enc = desk_encoder();
        let mut fwd = enc.forward();
        // Unit norm.
        let e = fwd.text_encode(&[3, 10, 200]).unwrap();
        let v = fwd.tape.value(e).data();
        let norm: f32 = v.iter().map(|x| x * x).sum::<f32>().sqrt();
        assert!((norm - 1.0).abs() < 1e-6);
        // Determinism.
        let e2 = fwd.text_encode(&[3, 10, 200]).unwrap();
        assert_eq!(fwd.tape.value(e).data(), fwd.tape.value(e2).data());
        // Positional encoding: permuted captions differ.
        let p = fwd.text_encode(&[200, 10, 3]).unwrap();
        assert_ne!(fwd.tape.value(e).data(), fwd.tape.value(p).data());
        // Errors.
        assert!(fwd.text_encode(&[]).is_err());
        assert!(fwd.text_encode(&[900]).is_err());
    }

    #[test]
    fn multi_round_matches_single_round_when_under_cap() {
        let mut cfg = EncoderConfig::desk(19);
        cfg.per_round_cap = 50;
        let enc: Encoder<f32> = Encoder::new(cfg).unwrap();
        let mut img = RasterImage::filled(256, 256, [0.2; 3]);
        let mut rng = crate::rng::Rng::seed_from(97);
        for _ in 0..500 {
            let x = rng.below(256);
            let y = rng.below(256);
            img.set_pixel(x, y, [1.0, rng.uniform() as f32, 0.0]);
        }
        let pyr = ImagePyramid::build(&img, 64, 8, &[128, 256]).unwrap();

        let mut fwd = enc.forward();
        let out = fwd
            .encode_multi_round(&pyr, &Prompt::BottomUp, 30, None)
            .unwrap();
        assert_eq!(out.rounds.len(), 1);
        assert_eq!(fwd.tape.value(out.features).shape(), &[30, 64]);

        // Same selection encoded directly must agree bitwise.
        let mut fwd2 = enc.forward();
        let (_t, cache) = fwd2.encode_low_res(&pyr).unwrap();
        let direct = fwd2
            .encode_high_res(&pyr, &out.rounds[0], &cache, HighResOpts::default())
            .unwrap();
        assert_eq!(
            fwd.tape.value(out.features).data(),
            fwd2.tape.value(direct).data()
        );
    }

    #[test]
    fn multi_round_partitions_across_rounds() {
        let mut cfg = EncoderConfig::desk(23);
        cfg.per_round_cap = 40;
        let enc: Encoder<f32> = Encoder::new(cfg).unwrap();
        let pyr = desk_pyramid([0.4, 0.2, 0.6]);
        let mut fwd = enc.forward();
        let out = fwd
            .encode_multi_round(&pyr, &Prompt::BottomUp, 100, None)
            .unwrap();
        assert_eq!(out.rounds.len(), 3);
        assert_eq!(
            out.rounds.iter().map(SelectionSet::total).sum::<usize>(),
            100
        );
        assert_eq!(fwd.tape.value(out.features).shape(), &[100, 64]);
        let mut seen = std::collections::HashSet::new();
        for r in &out.rounds {
            for (s, list) in r.per_scale.iter().enumerate() {
                for &i in list {
                    assert!(seen.insert((s, i)), "duplicate selection ({s}, {i})");
                }
            }
        }
    }
}
