//! Trainable sequence head: bridge projection, one bidirectional GRU layer,
//! temporal mean pooling and the linear classifier.
//!
//! GRU cell, per direction, with `W·` acting on the input and `U·` on the
//! previous state:
//!
//! ```text
//! r = σ(W_r x + U_r h + b_r)
//! u = σ(W_u x + U_u h + b_u)
//! c = tanh(W_c x + r ⊙ (U_c h + b_c))
//! h' = (1 − u) ⊙ c + u ⊙ h
//! ```
//!
//! Both directions start from a zero state.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::params::{uniform, Bindings, Linear, ParamId, ParamStore};
use crate::tensor::{Scalar, Tape, Var};

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct HeadConfig {
    pub d_vit: usize,
    /// Hidden width per direction.
    pub d_gru: usize,
    pub num_classes: usize,
}

impl Default for HeadConfig {
    fn default() -> Self {
        Self {
            d_vit: 768,
            d_gru: 512,
            num_classes: 3,
        }
    }
}

impl HeadConfig {
    pub fn validate(&self) -> Result<()> {
        for (key, v) in [("d_vit", self.d_vit), ("d_gru", self.d_gru), ("num_classes", self.num_classes)] {
            if v == 0 {
                return Err(Error::Config(format!("head.{key} must be at least 1")));
            }
        }
        Ok(())
    }

    /// Width of the concatenated bidirectional state.
    pub fn pooled_width(&self) -> usize {
        2 * self.d_gru
    }
}

/// Gate parameters of one GRU direction.
#[derive(Clone, Copy, Debug)]
pub struct GruDirection {
    pub w_r: ParamId,
    pub w_u: ParamId,
    pub w_c: ParamId,
    pub u_r: ParamId,
    pub u_u: ParamId,
    pub u_c: ParamId,
    pub b_r: ParamId,
    pub b_u: ParamId,
    pub b_c: ParamId,
}

impl GruDirection {
    fn register<T: Scalar>(store: &mut ParamStore<T>, prefix: &str, d: usize, rng: &mut impl Rng) -> Self {
        let bound = 1.0 / (d as f64).sqrt();
        let mut reg = |name: &str, shape: &[usize]| store.register(format!("{prefix}.{name}"), uniform(shape, bound, rng));
        Self {
            w_r: reg("w_r", &[d, d]),
            w_u: reg("w_u", &[d, d]),
            w_c: reg("w_c", &[d, d]),
            u_r: reg("u_r", &[d, d]),
            u_u: reg("u_u", &[d, d]),
            u_c: reg("u_c", &[d, d]),
            b_r: reg("b_r", &[d]),
            b_u: reg("b_u", &[d]),
            b_c: reg("b_c", &[d]),
        }
    }

    pub fn ids(&self) -> [ParamId; 9] {
        [
            self.w_r, self.w_u, self.w_c, self.u_r, self.u_u, self.u_c, self.b_r, self.b_u, self.b_c,
        ]
    }
}

#[derive(Clone, Debug)]
pub struct HeadParams {
    pub bridge: Linear,
    pub forward: GruDirection,
    pub backward: GruDirection,
    pub classifier: Linear,
}

impl HeadParams {
    /// Registers `head.bridge.*`, `head.gru.fwd.*`, `head.gru.bwd.*` and
    /// `head.cls.*`.
    pub fn register<T: Scalar>(cfg: &HeadConfig, store: &mut ParamStore<T>, rng: &mut impl Rng) -> Self {
        Self {
            bridge: Linear::fan_in(store, "head.bridge", cfg.d_gru, cfg.d_vit, rng),
            forward: GruDirection::register(store, "head.gru.fwd", cfg.d_gru, rng),
            backward: GruDirection::register(store, "head.gru.bwd", cfg.d_gru, rng),
            classifier: Linear::fan_in(store, "head.cls", cfg.num_classes, cfg.pooled_width(), rng),
        }
    }

    pub fn ids(&self) -> Vec<ParamId> {
        let mut ids = self.bridge.ids().to_vec();
        ids.extend(self.forward.ids());
        ids.extend(self.backward.ids());
        ids.extend(self.classifier.ids());
        ids
    }
}

/// Row-wise affine map `[P × d_vit] → [P × d_gru]`.
pub fn bridge_project<T: Scalar>(tape: &mut Tape<'_, T>, z_vit: Var, head: &HeadParams, binds: &Bindings) -> Result<Var> {
    head.bridge.forward(tape, z_vit, binds)
}

/// One GRU update for row vectors `x` and `h_prev`, both `[1 × d_gru]`.
pub fn gru_step<T: Scalar>(
    tape: &mut Tape<'_, T>,
    x: Var,
    h_prev: Var,
    dir: &GruDirection,
    binds: &Bindings,
) -> Result<Var> {
    let gate = |tape: &mut Tape<'_, T>, w: ParamId, u: ParamId, b: ParamId| -> Result<Var> {
        let wx = tape.matmul_bt(x, binds[w])?;
        let uh = tape.matmul_bt(h_prev, binds[u])?;
        let s = tape.add(wx, uh)?;
        let s = tape.add_bias(s, binds[b])?;
        tape.sigmoid(s)
    };
    let r = gate(tape, dir.w_r, dir.u_r, dir.b_r)?;
    let u = gate(tape, dir.w_u, dir.u_u, dir.b_u)?;
    let wx = tape.matmul_bt(x, binds[dir.w_c])?;
    let uh = tape.matmul_bt(h_prev, binds[dir.u_c])?;
    let uh = tape.add_bias(uh, binds[dir.b_c])?;
    let gated = tape.mul(r, uh)?;
    let pre = tape.add(wx, gated)?;
    let c = tape.tanh(pre)?;
    let keep = tape.one_minus(u)?;
    let fresh = tape.mul(keep, c)?;
    let carried = tape.mul(u, h_prev)?;
    tape.add(fresh, carried)
}

/// Runs one direction over `rows` in the given order, from a zero state, and
/// returns the state after each step.
pub fn gru_sequence<T: Scalar>(
    tape: &mut Tape<'_, T>,
    rows: &[Var],
    dir: &GruDirection,
    binds: &Bindings,
) -> Result<Vec<Var>> {
    let d = tape.shape(binds[dir.u_r])[0];
    let mut h = tape.constant(&[1, d], vec![T::zero(); d])?;
    let mut states = Vec::with_capacity(rows.len());
    for &x in rows {
        h = gru_step(tape, x, h, dir, binds)?;
        states.push(h);
    }
    Ok(states)
}

/// Rows of a `[P × d]` matrix as `[1 × d]` slices.
pub fn split_rows<T: Scalar>(tape: &mut Tape<'_, T>, x: Var) -> Result<Vec<Var>> {
    let &[p, _] = tape.shape(x) else {
        return Err(Error::shape(format!("expected a sequence matrix, got {:?}", tape.shape(x))));
    };
    (0..p).map(|i| tape.slice_rows(x, i, 1)).collect()
}

/// `[P × d_gru] → [P × 2·d_gru]`; row `i` is the forward state after
/// `z_1..z_i` followed by the backward state after `z_P..z_i`.
pub fn bigru_forward<T: Scalar>(tape: &mut Tape<'_, T>, z_bridge: Var, head: &HeadParams, binds: &Bindings) -> Result<Var> {
    let rows = split_rows(tape, z_bridge)?;
    let forward = gru_sequence(tape, &rows, &head.forward, binds)?;
    let reversed: Vec<Var> = rows.iter().rev().copied().collect();
    let mut backward = gru_sequence(tape, &reversed, &head.backward, binds)?;
    backward.reverse();
    let fwd = tape.concat_rows(&forward)?;
    let bwd = tape.concat_rows(&backward)?;
    tape.concat_cols(&[fwd, bwd])
}

/// Temporal mean over sequence positions, `[P × w] → [1 × w]`.
pub fn mean_pool<T: Scalar>(tape: &mut Tape<'_, T>, h: Var) -> Result<Var> {
    tape.mean_rows(h)
}

/// Raw class logits `[1 × num_classes]`.
pub fn classify<T: Scalar>(tape: &mut Tape<'_, T>, pooled: Var, head: &HeadParams, binds: &Bindings) -> Result<Var> {
    head.classifier.forward(tape, pooled, binds)
}
