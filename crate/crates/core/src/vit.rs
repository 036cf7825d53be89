//! Vision-transformer feature extractor.
//!
//! The image is cut into non-overlapping square patches, each patch is
//! projected to `d_model` and offset by a learned per-position embedding, and
//! the sequence runs through `depth` pre-norm encoder blocks. When a
//! classification token is used it is prepended before the blocks and dropped
//! afterwards, so the output always has exactly one row per patch.
//!
//! Parameter names are hierarchical and block numbers are 1-based:
//!
//! ```text
//! vit.patch_embed.weight   [d_model × patch_size²·channels]
//! vit.patch_embed.bias     [d_model]
//! vit.pos_embed            [seq_len × d_model]
//! vit.cls_token            [d_model]               (only with use_cls_token)
//! vit.block.{n}.ln1.gamma / .beta                  [d_model]
//! vit.block.{n}.attn.{q,k,v,out}_proj.weight       [d_model × d_model]
//! vit.block.{n}.attn.{q,k,v,out}_proj.bias         [d_model]
//! vit.block.{n}.ln2.gamma / .beta                  [d_model]
//! vit.block.{n}.mlp.fc1.weight / .bias             [mlp_width × d_model] / [mlp_width]
//! vit.block.{n}.mlp.fc2.weight / .bias             [d_model × mlp_width] / [d_model]
//! ```

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::params::{uniform, Bindings, Linear, ParamId, ParamStore};
use crate::tensor::{Scalar, Tape, Tensor, Var};

/// Standard deviation used for the patch projection, positional table and
/// classification token (uniform with matching variance).
const EMBED_STD: f64 = 0.02;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ViTConfig {
    pub image_size: usize,
    pub patch_size: usize,
    pub channels: usize,
    pub d_model: usize,
    pub depth: usize,
    pub heads: usize,
    pub mlp_width: usize,
    /// Number of leading encoder blocks excluded from training.
    pub freeze_n: usize,
    pub use_cls_token: bool,
    pub ln_eps: f64,
}

impl Default for ViTConfig {
    fn default() -> Self {
        Self {
            image_size: 224,
            patch_size: 16,
            channels: 3,
            d_model: 768,
            depth: 12,
            heads: 12,
            mlp_width: 3072,
            freeze_n: 6,
            use_cls_token: true,
            ln_eps: 1e-6,
        }
    }
}

impl ViTConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("image_size", self.image_size),
            ("patch_size", self.patch_size),
            ("channels", self.channels),
            ("d_model", self.d_model),
            ("heads", self.heads),
            ("mlp_width", self.mlp_width),
        ];
        if let Some((key, _)) = positive.iter().find(|(_, v)| *v == 0) {
            return Err(Error::Config(format!("vit.{key} must be at least 1")));
        }
        if self.image_size % self.patch_size != 0 {
            return Err(Error::Config(format!(
                "vit.image_size {} is not divisible by vit.patch_size {}",
                self.image_size, self.patch_size
            )));
        }
        if self.d_model % self.heads != 0 {
            return Err(Error::Config(format!(
                "vit.d_model {} is not divisible by vit.heads {}",
                self.d_model, self.heads
            )));
        }
        if self.freeze_n > self.depth {
            return Err(Error::Config(format!(
                "vit.freeze_n {} exceeds vit.depth {}",
                self.freeze_n, self.depth
            )));
        }
        if !(self.ln_eps >= 0.0 && self.ln_eps.is_finite()) {
            return Err(Error::Config("vit.ln_eps must be a finite non-negative number".into()));
        }
        Ok(())
    }

    pub fn grid(&self) -> usize {
        self.image_size / self.patch_size
    }

    /// Patch count `P`.
    pub fn num_patches(&self) -> usize {
        self.grid() * self.grid()
    }

    /// Flattened patch width `patch_size² · channels`.
    pub fn patch_dim(&self) -> usize {
        self.patch_size * self.patch_size * self.channels
    }

    /// Encoder sequence length including the classification token.
    pub fn seq_len(&self) -> usize {
        self.num_patches() + usize::from(self.use_cls_token)
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.heads
    }
}

#[derive(Clone, Copy, Debug)]
pub struct LayerNormParams {
    pub gamma: ParamId,
    pub beta: ParamId,
}

impl LayerNormParams {
    fn register<T: Scalar>(store: &mut ParamStore<T>, prefix: &str, d: usize) -> Self {
        Self {
            gamma: store.register(format!("{prefix}.gamma"), Tensor::full(&[d], T::one())),
            beta: store.register(format!("{prefix}.beta"), Tensor::zeros(&[d])),
        }
    }

    fn forward<T: Scalar>(&self, tape: &mut Tape<'_, T>, x: Var, binds: &Bindings, eps: f64) -> Result<Var> {
        tape.layer_norm(x, binds[self.gamma], binds[self.beta], eps)
    }
}

#[derive(Clone, Debug)]
pub struct EncoderBlock {
    pub ln1: LayerNormParams,
    pub q_proj: Linear,
    pub k_proj: Linear,
    pub v_proj: Linear,
    pub out_proj: Linear,
    pub ln2: LayerNormParams,
    pub fc1: Linear,
    pub fc2: Linear,
}

impl EncoderBlock {
    pub fn ids(&self) -> Vec<ParamId> {
        let mut ids = vec![self.ln1.gamma, self.ln1.beta];
        for lin in [&self.q_proj, &self.k_proj, &self.v_proj, &self.out_proj] {
            ids.extend(lin.ids());
        }
        ids.extend([self.ln2.gamma, self.ln2.beta]);
        ids.extend(self.fc1.ids());
        ids.extend(self.fc2.ids());
        ids
    }
}

/// Handles to every encoder parameter.
#[derive(Clone, Debug)]
pub struct ViTParams {
    pub patch_projection: Linear,
    pub pos_embed: ParamId,
    pub cls_token: Option<ParamId>,
    pub blocks: Vec<EncoderBlock>,
}

impl ViTParams {
    pub fn register<T: Scalar>(cfg: &ViTConfig, store: &mut ParamStore<T>, rng: &mut impl Rng) -> Self {
        let d = cfg.d_model;
        let embed_bound = EMBED_STD * 3f64.sqrt();
        let patch_projection = Linear::register(store, "vit.patch_embed", d, cfg.patch_dim(), embed_bound, rng);
        let pos_embed = store.register("vit.pos_embed", uniform(&[cfg.seq_len(), d], embed_bound, rng));
        let cls_token = cfg
            .use_cls_token
            .then(|| store.register("vit.cls_token", uniform(&[d], embed_bound, rng)));
        let blocks = (1..=cfg.depth)
            .map(|n| {
                let p = format!("vit.block.{n}");
                EncoderBlock {
                    ln1: LayerNormParams::register(store, &format!("{p}.ln1"), d),
                    q_proj: Linear::fan_in(store, &format!("{p}.attn.q_proj"), d, d, rng),
                    k_proj: Linear::fan_in(store, &format!("{p}.attn.k_proj"), d, d, rng),
                    v_proj: Linear::fan_in(store, &format!("{p}.attn.v_proj"), d, d, rng),
                    out_proj: Linear::fan_in(store, &format!("{p}.attn.out_proj"), d, d, rng),
                    ln2: LayerNormParams::register(store, &format!("{p}.ln2"), d),
                    fc1: Linear::fan_in(store, &format!("{p}.mlp.fc1"), cfg.mlp_width, d, rng),
                    fc2: Linear::fan_in(store, &format!("{p}.mlp.fc2"), d, cfg.mlp_width, rng),
                }
            })
            .collect();
        Self {
            patch_projection,
            pos_embed,
            cls_token,
            blocks,
        }
    }

    /// The embedding stage: patch projection, positional table and
    /// classification token.
    pub fn embedding_ids(&self) -> Vec<ParamId> {
        let mut ids = self.patch_projection.ids().to_vec();
        ids.push(self.pos_embed);
        ids.extend(self.cls_token);
        ids
    }

    pub fn ids(&self) -> Vec<ParamId> {
        let mut ids = self.embedding_ids();
        for b in &self.blocks {
            ids.extend(b.ids());
        }
        ids
    }
}

fn check_image_shape<T: Scalar>(image: &Tensor<T>, cfg: &ViTConfig) -> Result<(usize, usize)> {
    let &[h, w, c] = image.shape() else {
        return Err(Error::shape(format!("image must be [H × W × C], got {:?}", image.shape())));
    };
    if h % cfg.patch_size != 0 || w % cfg.patch_size != 0 {
        return Err(Error::shape(format!(
            "image {h}×{w} is not divisible into {p}×{p} patches",
            p = cfg.patch_size
        )));
    }
    if h != cfg.image_size || w != cfg.image_size || c != cfg.channels {
        return Err(Error::shape(format!(
            "image {:?} does not match configured {s}×{s}×{}",
            image.shape(),
            cfg.channels,
            s = cfg.image_size
        )));
    }
    Ok((h / cfg.patch_size, w / cfg.patch_size))
}

/// Cuts an `[H × W × C]` image into `[P × patch_size²·C]` rows. Patches are
/// ordered row-major over the patch grid; within a patch, values are ordered
/// by pixel row, pixel column, then channel.
pub fn patchify<T: Scalar>(image: &Tensor<T>, cfg: &ViTConfig) -> Result<Tensor<T>> {
    let (gh, gw) = check_image_shape(image, cfg)?;
    let (ps, c) = (cfg.patch_size, cfg.channels);
    let w = gw * ps;
    let src = image.data();
    let mut out = Vec::with_capacity(src.len());
    for pr in 0..gh {
        for pc in 0..gw {
            for i in 0..ps {
                let start = ((pr * ps + i) * w + pc * ps) * c;
                out.extend_from_slice(&src[start..start + ps * c]);
            }
        }
    }
    Tensor::new(&[gh * gw, ps * ps * c], out)
}

/// Inverse of [`patchify`].
pub fn unpatchify<T: Scalar>(patches: &Tensor<T>, cfg: &ViTConfig) -> Result<Tensor<T>> {
    let (ps, c, g) = (cfg.patch_size, cfg.channels, cfg.grid());
    if patches.shape() != [cfg.num_patches(), cfg.patch_dim()] {
        return Err(Error::shape(format!(
            "expected patches [{} × {}], got {:?}",
            cfg.num_patches(),
            cfg.patch_dim(),
            patches.shape()
        )));
    }
    let w = g * ps;
    let mut out = vec![T::zero(); w * w * c];
    for (p, patch) in patches.data().chunks(ps * ps * c).enumerate() {
        let (pr, pc) = (p / g, p % g);
        for i in 0..ps {
            let start = ((pr * ps + i) * w + pc * ps) * c;
            out[start..start + ps * c].copy_from_slice(&patch[i * ps * c..(i + 1) * ps * c]);
        }
    }
    Tensor::new(&[w, w, c], out)
}

/// Projects patch rows and adds positional rows; with a classification token
/// the token becomes row 0 and the patches follow.
pub fn embed<T: Scalar>(
    tape: &mut Tape<'_, T>,
    patches: Var,
    params: &ViTParams,
    binds: &Bindings,
) -> Result<Var> {
    let projected = params.patch_projection.forward(tape, patches, binds)?;
    let seq = match params.cls_token {
        Some(cls) => {
            let width = tape.shape(binds[cls])[0];
            let row = tape.reshape(binds[cls], &[1, width])?;
            tape.concat_rows(&[row, projected])?
        }
        None => projected,
    };
    tape.add(seq, binds[params.pos_embed])
}

fn attention<T: Scalar>(
    tape: &mut Tape<'_, T>,
    x: Var,
    block: &EncoderBlock,
    binds: &Bindings,
    cfg: &ViTConfig,
    trace: &mut Vec<Var>,
) -> Result<Var> {
    let q = block.q_proj.forward(tape, x, binds)?;
    let k = block.k_proj.forward(tape, x, binds)?;
    let v = block.v_proj.forward(tape, x, binds)?;
    let dh = cfg.head_dim();
    let scale = 1.0 / (dh as f64).sqrt();
    let mut heads = Vec::with_capacity(cfg.heads);
    for h in 0..cfg.heads {
        let qh = tape.slice_cols(q, h * dh, dh)?;
        let kh = tape.slice_cols(k, h * dh, dh)?;
        let vh = tape.slice_cols(v, h * dh, dh)?;
        let scores = tape.matmul_bt(qh, kh)?;
        let scores = tape.scale(scores, scale)?;
        let weights = tape.softmax_lastdim(scores)?;
        trace.push(weights);
        heads.push(tape.matmul(weights, vh)?);
    }
    let merged = if heads.len() == 1 { heads[0] } else { tape.concat_cols(&heads)? };
    block.out_proj.forward(tape, merged, binds)
}

fn block_forward<T: Scalar>(
    tape: &mut Tape<'_, T>,
    x: Var,
    block: &EncoderBlock,
    binds: &Bindings,
    cfg: &ViTConfig,
    trace: &mut Vec<Var>,
) -> Result<Var> {
    let h = block.ln1.forward(tape, x, binds, cfg.ln_eps)?;
    let a = attention(tape, h, block, binds, cfg, trace)?;
    let x = tape.add(x, a)?;
    let h = block.ln2.forward(tape, x, binds, cfg.ln_eps)?;
    let h = block.fc1.forward(tape, h, binds)?;
    let h = tape.gelu(h)?;
    let h = block.fc2.forward(tape, h, binds)?;
    tape.add(x, h)
}

/// Output of [`encoder_forward_traced`].
pub struct EncoderTrace {
    pub output: Var,
    /// Attention weight matrices `[seq × seq]`, block-major then head.
    pub attention: Vec<Var>,
}

/// Runs the encoder stack and drops the classification-token row, returning
/// `[P × d_model]`.
pub fn encoder_forward<T: Scalar>(
    tape: &mut Tape<'_, T>,
    z0: Var,
    params: &ViTParams,
    binds: &Bindings,
    cfg: &ViTConfig,
) -> Result<Var> {
    encoder_forward_traced(tape, z0, params, binds, cfg).map(|t| t.output)
}

pub fn encoder_forward_traced<T: Scalar>(
    tape: &mut Tape<'_, T>,
    z0: Var,
    params: &ViTParams,
    binds: &Bindings,
    cfg: &ViTConfig,
) -> Result<EncoderTrace> {
    let expected = [cfg.seq_len(), cfg.d_model];
    if tape.shape(z0) != expected {
        return Err(Error::shape(format!(
            "encoder input must be {expected:?}, got {:?}",
            tape.shape(z0)
        )));
    }
    let mut attention = Vec::new();
    let mut x = z0;
    for block in &params.blocks {
        x = block_forward(tape, x, block, binds, cfg, &mut attention)?;
    }
    let output = if cfg.use_cls_token {
        tape.slice_rows(x, 1, cfg.num_patches())?
    } else {
        x
    };
    Ok(EncoderTrace { output, attention })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
pub struct FreezeSummary {
    pub frozen_tensors: usize,
    pub trainable_tensors: usize,
    pub frozen_values: usize,
    pub trainable_values: usize,
}

/// Freezes the embedding stage (patch projection, positional table,
/// classification token) and blocks `1..=freeze_n`; marks the remaining
/// blocks trainable. Counts cover encoder parameters only.
pub fn apply_freeze<T: Scalar>(params: &ViTParams, store: &mut ParamStore<T>, cfg: &ViTConfig) -> FreezeSummary {
    let mut summary = FreezeSummary {
        frozen_tensors: 0,
        trainable_tensors: 0,
        frozen_values: 0,
        trainable_values: 0,
    };
    let mut mark = |store: &mut ParamStore<T>, id: ParamId, trainable: bool| {
        store.set_requires_grad(id, trainable);
        let n = store.get(id).numel();
        if trainable {
            summary.trainable_tensors += 1;
            summary.trainable_values += n;
        } else {
            summary.frozen_tensors += 1;
            summary.frozen_values += n;
        }
    };
    for id in params.embedding_ids() {
        mark(store, id, false);
    }
    for (i, block) in params.blocks.iter().enumerate() {
        let trainable = i >= cfg.freeze_n;
        for id in block.ids() {
            mark(store, id, trainable);
        }
    }
    summary
}
