//! Mean-velocity flow: the conditioned decoder network `u_θ(z, r, t | c)`,
//! the self-referential training target built from a forward-mode
//! derivative, and the one-step displacement primitive.
//!
//! The flow convention is `z_t = (1−t)·x0 + t·x1` with instantaneous
//! velocity `v = x1 − x0`, so `z_0` is noise, `z_1` is data, and a sample is
//! recovered in one step as `x1 = x0 + u(x0, 0, 1)`. The training target
//!
//! ```text
//! u_tgt = v − (t − r)·(v·∂_z u + ∂_t u)
//! ```
//!
//! uses the directional derivative of the network along `(v, 0, 1)` in
//! `(z, r, t)`: exactly the quantity forward-mode evaluation yields in one
//! pass. The target is always plain data (never a tape node), so gradients
//! cannot flow through it.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::diffkit::{
    normal_init, xavier_uniform, DiffError, ParamStore, Tape, Tensor, Var,
};
use crate::rng::Rng;

#[derive(Debug, Error)]
pub enum FlowError {
    #[error("times must satisfy 0 ≤ r ≤ t ≤ 1, got r={r}, t={t}")]
    BadTimes { r: f64, t: f64 },
    #[error("x0 and x1 must share length: {lhs} vs {rhs}")]
    ShapeMismatch { lhs: usize, rhs: usize },
    #[error(transparent)]
    Diff(#[from] DiffError),
}

/// An ordered pair of flow times `0 ≤ r ≤ t ≤ 1`. `r = t` degenerates the
/// mean velocity to the instantaneous velocity.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TimePair {
    pub r: f64,
    pub t: f64,
}

impl TimePair {
    pub fn new(r: f64, t: f64) -> Result<Self, FlowError> {
        if !(0.0 <= r && r <= t && t <= 1.0) {
            return Err(FlowError::BadTimes { r, t });
        }
        Ok(Self { r, t })
    }

    /// The degenerate pair `r = t`.
    pub fn instant(t: f64) -> Result<Self, FlowError> {
        Self::new(t, t)
    }

    /// The full-interval pair `(0, 1)` used by one-step sampling.
    pub fn one_step() -> Self {
        Self { r: 0.0, t: 1.0 }
    }
}

/// Draw a training time pair: two independent uniforms ordered as
/// `(min, max)`, collapsed to `r = t` with probability `p_equal` so the
/// instantaneous anchor of the identity stays in the training distribution.
/// `t` is always the max of the two draws, so its marginal CDF is `t²`.
pub fn sample_time_pair(rng: &mut Rng, p_equal: f64) -> TimePair {
    use rand::Rng as _;
    debug_assert!((0.0..=1.0).contains(&p_equal));
    let a: f64 = rng.random();
    let b: f64 = rng.random();
    let (mut r, t) = if a <= b { (a, b) } else { (b, a) };
    if rng.random::<f64>() < p_equal {
        r = t;
    }
    TimePair { r, t }
}

/// One training example in normalized-delta space.
///
/// The path is the straight line `z_s = (1−s)·x0 + s·x1`, noise at `s = 0`
/// and data at `s = 1`. The average-velocity network is *anchored at the
/// start of its interval*: `u(z, r, t)` means "the average velocity over
/// `[r, t]` of the path passing through `z` at time `r`". That anchoring is
/// what makes one-step generation `x̂1 = x0 + u(x0, 0, 1)` an explicit
/// evaluation — the query state `x0` is the time-0 state, which is exactly
/// where training supervises the field. (Anchoring at the *end* state
/// instead would make the same query ask for the path that terminates at a
/// noise point, a region the data never covers and where the ideal field is
/// unbounded as `t → 1`.)
#[derive(Debug, Clone, PartialEq)]
pub struct FlowSample {
    pub x0: Vec<f64>,
    pub x1: Vec<f64>,
    pub times: TimePair,
    /// Anchor state `(1−r)·x0 + r·x1`: the network input.
    pub z_r: Vec<f64>,
    /// Interpolant `(1−t)·x0 + t·x1`: the state at the far end of the
    /// interval (kept for diagnostics; the instantaneous target velocity is
    /// the same everywhere on a linear path).
    pub z_t: Vec<f64>,
    /// Instantaneous velocity `x1 − x0` (time-independent for linear paths).
    pub v: Vec<f64>,
}

/// Build the anchor state, far-end interpolant, and velocity for a
/// noise/data pair at `times`.
pub fn interpolate(x0: &[f64], x1: &[f64], times: TimePair) -> Result<FlowSample, FlowError> {
    if x0.len() != x1.len() {
        return Err(FlowError::ShapeMismatch {
            lhs: x0.len(),
            rhs: x1.len(),
        });
    }
    let lerp = |s: f64| -> Vec<f64> {
        x0.iter()
            .zip(x1)
            .map(|(&a, &b)| (1.0 - s) * a + s * b)
            .collect()
    };
    let v = x0.iter().zip(x1).map(|(&a, &b)| b - a).collect();
    Ok(FlowSample {
        x0: x0.to_vec(),
        x1: x1.to_vec(),
        times,
        z_r: lerp(times.r),
        z_t: lerp(times.t),
        v,
    })
}

/// Reshape a flattened delta vector `[x0, y0, x1, y1, …]` into the `[T, 2]`
/// token layout the decoder consumes.
pub fn flat_to_tokens(flat: &[f64]) -> Tensor {
    assert!(flat.len() % 2 == 0, "flattened deltas must pair up");
    Tensor::new(vec![flat.len() / 2, 2], flat.to_vec()).expect("finite by construction")
}

/// Inverse of [`flat_to_tokens`].
pub fn tokens_to_flat(t: &Tensor) -> Vec<f64> {
    t.data().to_vec()
}

/// Sinusoidal embedding of a scalar time to a `[1, width]` row, built from
/// differentiable ops so both derivative modes see `∂/∂s`.
pub fn time_embedding(tape: &mut Tape, s: Var, width: usize) -> Result<Var, DiffError> {
    assert!(width >= 2 && width % 2 == 0, "embedding width must be even");
    let half = width / 2;
    let freqs: Vec<f64> = (0..half)
        .map(|i| 10_000f64.powf(-(i as f64) / half as f64))
        .collect();
    let freqs = tape.constant(Tensor::new(vec![1, half], freqs)?);
    let args = tape.mul(s, freqs)?;
    let sin = tape.sin(args)?;
    let cos = tape.cos(args)?;
    tape.concat_cols(&[sin, cos])
}

/// The loss geometry for flow supervision.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LossKind {
    L1,
    L2,
}

/// Cross-attention decoder over noise tokens.
///
/// The `T_f` per-step noise deltas are the queries; keys and values are the
/// scene context tokens plus sinusoidal embeddings of the flow times. There
/// is deliberately no self-attention between noise tokens, so each query row
/// is an independent function of the keys — which is what lets `g` proposal
/// sets be stacked into one `[g·T_f, 2]` forward pass.
///
/// With `include_r` off, the `r` token is dropped and the same architecture
/// serves as the instantaneous-velocity baseline network `v_θ(z, t | c)`.
#[derive(Debug, Clone)]
pub struct DecoderNet {
    pub prefix: String,
    pub width: usize,
    pub depth: usize,
    pub heads: usize,
    pub t_f: usize,
    pub include_r: bool,
}

impl DecoderNet {
    /// Create parameters under `prefix.*` in the store.
    #[allow(clippy::too_many_arguments)]
    pub fn init(
        store: &mut ParamStore,
        prefix: &str,
        width: usize,
        depth: usize,
        heads: usize,
        t_f: usize,
        include_r: bool,
        rng: &mut Rng,
    ) -> Result<Self, DiffError> {
        assert!(width % heads == 0, "width must divide into heads");
        assert!(width % 2 == 0, "width must be even for time embeddings");
        assert!(depth >= 1 && t_f >= 1);
        let p = prefix;
        store.insert(&format!("{p}.token_w"), xavier_uniform(rng, 2, width))?;
        store.insert(&format!("{p}.token_b"), Tensor::zeros(&[width]))?;
        store.insert(&format!("{p}.pos"), normal_init(rng, &[t_f, width], 0.02))?;
        store.insert(&format!("{p}.kv_ln_g"), Tensor::full(&[width], 1.0))?;
        store.insert(&format!("{p}.kv_ln_b"), Tensor::zeros(&[width]))?;
        for i in 0..depth {
            let b = format!("{p}.blk{i}");
            store.insert(&format!("{b}.ln1_g"), Tensor::full(&[width], 1.0))?;
            store.insert(&format!("{b}.ln1_b"), Tensor::zeros(&[width]))?;
            for name in ["q", "k", "v", "o"] {
                store.insert(
                    &format!("{b}.{name}_w"),
                    xavier_uniform(rng, width, width),
                )?;
                store.insert(&format!("{b}.{name}_b"), Tensor::zeros(&[width]))?;
            }
            store.insert(&format!("{b}.ln2_g"), Tensor::full(&[width], 1.0))?;
            store.insert(&format!("{b}.ln2_b"), Tensor::zeros(&[width]))?;
            store.insert(&format!("{b}.ffn_w1"), xavier_uniform(rng, width, width))?;
            store.insert(&format!("{b}.ffn_b1"), Tensor::zeros(&[width]))?;
            store.insert(&format!("{b}.ffn_w2"), xavier_uniform(rng, width, width))?;
            store.insert(&format!("{b}.ffn_b2"), Tensor::zeros(&[width]))?;
        }
        store.insert(&format!("{p}.out_w"), xavier_uniform(rng, width, 2))?;
        store.insert(&format!("{p}.out_b"), Tensor::zeros(&[2]))?;
        Ok(Self {
            prefix: prefix.to_string(),
            width,
            depth,
            heads,
            t_f,
            include_r,
        })
    }

    /// Reconstruct the handle over parameters already present in a store
    /// (checkpoint load path).
    pub fn attach(
        prefix: &str,
        width: usize,
        depth: usize,
        heads: usize,
        t_f: usize,
        include_r: bool,
    ) -> Self {
        Self {
            prefix: prefix.to_string(),
            width,
            depth,
            heads,
            t_f,
            include_r,
        }
    }

    fn affine(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        x: Var,
        w: &str,
        b: &str,
    ) -> Result<Var, DiffError> {
        let w = tape.param(store, w)?;
        let b = tape.param(store, b)?;
        let xw = tape.matmul(x, w)?;
        tape.add(xw, b)
    }

    fn ln(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        x: Var,
        g: &str,
        b: &str,
    ) -> Result<Var, DiffError> {
        let g = tape.param(store, g)?;
        let b = tape.param(store, b)?;
        tape.layernorm(x, g, b)
    }

    /// Assemble the key/value rows: context tokens ⊕ (r embedding if the
    /// mean-flow form) ⊕ t embedding, jointly layer-normalized.
    pub fn keys_values(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        ctx: Var,
        r: Option<Var>,
        t: Var,
    ) -> Result<Var, DiffError> {
        let p = &self.prefix;
        let mut rows = vec![ctx];
        if self.include_r {
            let r = r.expect("mean-flow decoder requires the r input");
            rows.push(time_embedding(tape, r, self.width)?);
        }
        rows.push(time_embedding(tape, t, self.width)?);
        let kv = tape.concat_rows(&rows)?;
        self.ln(tape, store, kv, &format!("{p}.kv_ln_g"), &format!("{p}.kv_ln_b"))
    }

    /// Decode `groups` stacked token sets `[groups·T_f, 2]` against shared
    /// keys/values.
    pub fn decode(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        z: Var,
        kv: Var,
        groups: usize,
    ) -> Result<Var, DiffError> {
        let p = &self.prefix;
        assert_eq!(
            tape.value(z).shape(),
            &[groups * self.t_f, 2],
            "noise tokens must be [groups·T_f, 2]"
        );
        let mut x = self.affine(
            tape,
            store,
            z,
            &format!("{p}.token_w"),
            &format!("{p}.token_b"),
        )?;
        let pos = tape.param(store, &format!("{p}.pos"))?;
        let pos = if groups == 1 {
            pos
        } else {
            tape.concat_rows(&vec![pos; groups])?
        };
        x = tape.add(x, pos)?;

        let head_dim = self.width / self.heads;
        for i in 0..self.depth {
            let b = format!("{p}.blk{i}");
            let q_in = self.ln(tape, store, x, &format!("{b}.ln1_g"), &format!("{b}.ln1_b"))?;
            let q = self.affine(tape, store, q_in, &format!("{b}.q_w"), &format!("{b}.q_b"))?;
            let k = self.affine(tape, store, kv, &format!("{b}.k_w"), &format!("{b}.k_b"))?;
            let v = self.affine(tape, store, kv, &format!("{b}.v_w"), &format!("{b}.v_b"))?;
            let mut heads_out = Vec::with_capacity(self.heads);
            for h in 0..self.heads {
                let qh = tape.slice_cols(q, h * head_dim, head_dim)?;
                let kh = tape.slice_cols(k, h * head_dim, head_dim)?;
                let vh = tape.slice_cols(v, h * head_dim, head_dim)?;
                let qh = tape.scale(qh, 1.0 / (head_dim as f64).sqrt())?;
                let scores = tape.matmul_nt(qh, kh)?;
                let att = tape.softmax(scores)?;
                heads_out.push(tape.matmul(att, vh)?);
            }
            let merged = tape.concat_cols(&heads_out)?;
            let attn = self.affine(tape, store, merged, &format!("{b}.o_w"), &format!("{b}.o_b"))?;
            x = tape.add(x, attn)?;
            let f_in = self.ln(tape, store, x, &format!("{b}.ln2_g"), &format!("{b}.ln2_b"))?;
            let f = self.affine(tape, store, f_in, &format!("{b}.ffn_w1"), &format!("{b}.ffn_b1"))?;
            let f = tape.gelu(f)?;
            let f = self.affine(tape, store, f, &format!("{b}.ffn_w2"), &format!("{b}.ffn_b2"))?;
            x = tape.add(x, f)?;
        }
        // The head reads the residual stream directly (no normalization):
        // velocity targets contain an exact `-x0` noise-cancellation term,
        // which the affine head can only represent if the token magnitude
        // survives to the output.
        self.affine(tape, store, x, &format!("{p}.out_w"), &format!("{p}.out_b"))
    }

    /// Full forward pass: `u_θ(z, r, t | ctx)` (or `v_θ(z, t | ctx)` when
    /// `include_r` is off).
    #[allow(clippy::too_many_arguments)]
    pub fn forward(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        z: Var,
        r: Option<Var>,
        t: Var,
        ctx: Var,
        groups: usize,
    ) -> Result<Var, DiffError> {
        let kv = self.keys_values(tape, store, ctx, r, t)?;
        self.decode(tape, store, z, kv, groups)
    }
}

/// Record a network evaluation whose primal is the on-tape prediction and
/// whose forward-mode tangent yields the training target.
///
/// With the network anchored at the start of its interval (input state
/// `z_anchor` lives at time `r`), the exact relation between the average
/// velocity `u` and the instantaneous velocity `v` follows from
/// differentiating `(t−r)·u(z_r, r, t) = ∫_r^t v(z_s, s) ds` along the path
/// with respect to `r` (the anchor moves with velocity `v` as `r` shifts):
///
/// ```text
/// u = v + (t−r)·(v·∂_z u + ∂_r u)
/// ```
///
/// so the tangent direction is `(v, 1, 0)` in `(z, r, t)`: `z` carries `v`,
/// `r` carries `1`, and `t` carries nothing. The returned target
/// `u_tgt = v + (t−r)·du` is a plain tensor — structurally detached — and
/// collapses bit-exactly to `v` when `r = t` (the multiplication by the
/// zero gap never runs).
pub fn meanflow_target_with<F>(
    tape: &mut Tape,
    z_anchor: &Tensor,
    v: &Tensor,
    times: TimePair,
    forward: F,
) -> Result<(Var, Tensor), DiffError>
where
    F: FnOnce(&mut Tape, Var, Var, Var) -> Result<Var, DiffError>,
{
    let z = tape.leaf_with_tangent(z_anchor.clone(), v.clone())?;
    let r = tape.leaf_with_tangent(Tensor::scalar(times.r), Tensor::scalar(1.0))?;
    let t = tape.leaf(Tensor::scalar(times.t));
    let u = forward(tape, z, r, t)?;
    if tape.value(u).shape() != v.shape() {
        return Err(DiffError::ShapeMismatch {
            op: "meanflow_target",
            lhs: tape.value(u).shape().to_vec(),
            rhs: v.shape().to_vec(),
        });
    }
    let du = tape
        .tangent(u)
        .cloned()
        .unwrap_or_else(|| Tensor::zeros(v.shape()));
    let gap = times.t - times.r;
    let data: Vec<f64> = v
        .data()
        .iter()
        .zip(du.data())
        .map(|(&vi, &di)| vi + gap * di)
        .collect();
    let u_tgt = Tensor::new(v.shape().to_vec(), data)?;
    Ok((u, u_tgt))
}

/// Batch flow loss between on-tape predictions and detached targets:
/// mean absolute error (or mean squared error) over coordinates, averaged
/// over the batch.
pub fn flow_loss(
    tape: &mut Tape,
    pairs: &[(Var, Tensor)],
    kind: LossKind,
) -> Result<Var, DiffError> {
    assert!(!pairs.is_empty(), "flow loss needs a non-empty batch");
    let mut total: Option<Var> = None;
    for (u, tgt) in pairs {
        let c = tape.constant(tgt.clone());
        let d = tape.sub(*u, c)?;
        let per = match kind {
            LossKind::L1 => {
                let a = tape.abs(d)?;
                tape.mean_all(a)?
            }
            LossKind::L2 => {
                let sq = tape.mul(d, d)?;
                tape.mean_all(sq)?
            }
        };
        total = Some(match total {
            None => per,
            Some(acc) => tape.add(acc, per)?,
        });
    }
    tape.scale(total.expect("non-empty batch"), 1.0 / pairs.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffkit::GradMap;
    use crate::rng::rng_from;

    #[test]
    fn time_pairs_respect_p_equal_extremes() {
        let mut rng = rng_from(0);
        for _ in 0..1_000 {
            let tp = sample_time_pair(&mut rng, 1.0);
            assert_eq!(tp.r, tp.t);
        }
        for _ in 0..10_000 {
            let tp = sample_time_pair(&mut rng, 0.0);
            assert!(tp.t > tp.r, "continuous draws never tie");
            assert!((0.0..=1.0).contains(&tp.r) && tp.t <= 1.0);
        }
    }

    #[test]
    fn t_marginal_matches_max_of_two_uniforms() {
        let mut rng = rng_from(1);
        let n = 100_000;
        let mut ts: Vec<f64> = (0..n)
            .map(|_| sample_time_pair(&mut rng, 0.25).t)
            .collect();
        ts.sort_by(|a, b| a.partial_cmp(b).unwrap());
        // Kolmogorov distance against CDF F(t) = t²
        let mut ks = 0.0f64;
        for (i, &t) in ts.iter().enumerate() {
            let emp_hi = (i + 1) as f64 / n as f64;
            let emp_lo = i as f64 / n as f64;
            let f = t * t;
            ks = ks.max((emp_hi - f).abs()).max((f - emp_lo).abs());
        }
        assert!(ks < 0.01, "KS distance {ks} vs t² CDF");
    }

    #[test]
    fn time_pair_validation() {
        assert!(TimePair::new(0.2, 0.7).is_ok());
        assert!(TimePair::new(0.7, 0.2).is_err());
        assert!(TimePair::new(-0.1, 0.5).is_err());
        assert!(TimePair::new(0.5, 1.1).is_err());
        assert_eq!(TimePair::one_step(), TimePair { r: 0.0, t: 1.0 });
    }

    #[test]
    fn interpolation_boundaries_and_midpoint() {
        let x0 = [0.0, 0.0];
        let x1 = [2.0, 4.0];
        let s = interpolate(&x0, &x1, TimePair::new(0.0, 0.0).unwrap()).unwrap();
        assert_eq!(s.z_r, x0);
        assert_eq!(s.z_t, x0);
        let s = interpolate(&x0, &x1, TimePair::new(1.0, 1.0).unwrap()).unwrap();
        assert_eq!(s.z_r, x1);
        assert_eq!(s.z_t, x1);
        let s = interpolate(&x0, &x1, TimePair::new(0.25, 0.5).unwrap()).unwrap();
        assert_eq!(s.z_r, vec![0.5, 1.0]);
        assert_eq!(s.z_t, vec![1.0, 2.0]);
        assert_eq!(s.v, vec![2.0, 4.0]);
        // one-step pair anchors at the pure-noise state
        let s = interpolate(&x0, &x1, TimePair::one_step()).unwrap();
        assert_eq!(s.z_r, x0);
        assert!(interpolate(&x0, &[1.0], TimePair::one_step()).is_err());
    }

    /// The identity closes on a linear-in-time field: v(s) = 2s has mean
    /// velocity u(r, t) = (t² − r²)/(t − r) = t + r. With the anchor at `r`
    /// the instantaneous velocity enters at the anchor, v(r) = 2r, and the
    /// scripted true field contributes ∂_r u = 1, so the target evaluates
    /// to 2r + (t−r)·1 = t + r.
    #[test]
    fn scripted_linear_field_closes_the_identity() {
        for (r, t) in [(0.2, 0.9), (0.0, 1.0), (0.5, 0.5), (0.3, 0.31)] {
            let times = TimePair::new(r, t).unwrap();
            let z = Tensor::scalar(0.7);
            let v = Tensor::scalar(2.0 * r);
            let mut tape = Tape::new();
            let (_, tgt) = meanflow_target_with(&mut tape, &z, &v, times, |tp, _z, rv, tv| {
                tp.add(tv, rv)
            })
            .unwrap();
            let analytic = t + r;
            assert!(
                (tgt.data()[0] - analytic).abs() < 1e-9,
                "u_tgt {} vs analytic {analytic} at (r={r}, t={t})",
                tgt.data()[0]
            );
        }
    }

    /// A hundred random pairs of the same closure, the form the acceptance
    /// gate uses.
    #[test]
    fn scripted_linear_field_closes_on_random_pairs() {
        let mut rng = rng_from(17);
        for _ in 0..100 {
            let tp = sample_time_pair(&mut rng, 0.1);
            let z = Tensor::scalar(-0.4);
            let v = Tensor::scalar(2.0 * tp.r);
            let mut tape = Tape::new();
            let (_, tgt) =
                meanflow_target_with(&mut tape, &z, &v, tp, |t, _z, rv, tv| t.add(tv, rv))
                    .unwrap();
            assert!((tgt.data()[0] - (tp.t + tp.r)).abs() < 1e-9);
        }
    }

    /// Quadratic field: v(s) = 3s² has mean velocity t² + tr + r². At the
    /// anchor: v(r) = 3r², ∂_r u = t + 2r, and
    /// 3r² + (t−r)(t+2r) = t² + tr + r².
    #[test]
    fn scripted_quadratic_field_closes_the_identity() {
        for (r, t) in [(0.1, 0.8), (0.0, 1.0), (0.4, 0.6)] {
            let times = TimePair::new(r, t).unwrap();
            let z = Tensor::scalar(-0.3);
            let v = Tensor::scalar(3.0 * r * r);
            let mut tape = Tape::new();
            let (_, tgt) = meanflow_target_with(&mut tape, &z, &v, times, |tp, _z, rv, tv| {
                // u = t² + t·r + r²
                let tt = tp.mul(tv, tv)?;
                let tr = tp.mul(tv, rv)?;
                let rr = tp.mul(rv, rv)?;
                let s = tp.add(tt, tr)?;
                tp.add(s, rr)
            })
            .unwrap();
            let analytic = t * t + t * r + r * r;
            assert!(
                (tgt.data()[0] - analytic).abs() < 1e-9,
                "u_tgt {} vs {analytic}",
                tgt.data()[0]
            );
        }
    }

    #[test]
    fn constant_net_target_is_v_and_r_equals_t_is_bitwise_v() {
        let z = Tensor::new(vec![2, 2], vec![0.1, -0.2, 0.3, 0.4]).unwrap();
        let v = Tensor::new(vec![2, 2], vec![1.0, -2.0, 0.5, 0.25]).unwrap();
        // constant net: no dependence on z, r, t at all
        let times = TimePair::new(0.2, 0.9).unwrap();
        let mut tape = Tape::new();
        let (_, tgt) = meanflow_target_with(&mut tape, &z, &v, times, |tp, _z, _r, _t| {
            Ok(tp.constant(Tensor::new(vec![2, 2], vec![7.0; 4]).unwrap()))
        })
        .unwrap();
        assert_eq!(tgt.data(), v.data(), "du = 0 → u_tgt = v");

        // r = t through a real network: (t−r) = 0 must erase du bit-exactly
        let mut store = ParamStore::new();
        let mut rng = rng_from(3);
        let net =
            DecoderNet::init(&mut store, "d", 8, 1, 2, 2, true, &mut rng).unwrap();
        let ctx = Tensor::new(vec![3, 8], (0..24).map(|i| (i as f64).sin()).collect()).unwrap();
        let mut tape = Tape::new();
        let ctx_var = tape.leaf(ctx);
        let (_, tgt) = meanflow_target_with(
            &mut tape,
            &z,
            &v,
            TimePair::instant(0.6).unwrap(),
            |tp, zv, rv, tv| net.forward(tp, &store, zv, Some(rv), tv, ctx_var, 1),
        )
        .unwrap();
        assert_eq!(tgt.data(), v.data(), "r = t must give u_tgt == v bitwise");
    }

    fn tiny_net(seed: u64) -> (ParamStore, DecoderNet, Tensor) {
        let mut store = ParamStore::new();
        let mut rng = rng_from(seed);
        let net = DecoderNet::init(&mut store, "d", 8, 1, 2, 2, true, &mut rng).unwrap();
        let ctx =
            Tensor::new(vec![3, 8], (0..24).map(|i| ((i * 7) as f64 * 0.13).cos()).collect())
                .unwrap();
        (store, net, ctx)
    }

    #[test]
    fn decoder_output_matches_input_token_shape() {
        let (store, net, ctx) = tiny_net(0);
        let z = Tensor::new(vec![2, 2], vec![0.4, -0.1, 0.2, 0.9]).unwrap();
        let mut tape = Tape::new();
        let ctx_v = tape.leaf(ctx);
        let zv = tape.leaf(z);
        let r = tape.leaf(Tensor::scalar(0.1));
        let t = tape.leaf(Tensor::scalar(0.8));
        let u = net
            .forward(&mut tape, &store, zv, Some(r), t, ctx_v, 1)
            .unwrap();
        assert_eq!(tape.value(u).shape(), &[2, 2]);
    }

    #[test]
    fn stacked_groups_factorize_into_independent_forwards() {
        let (store, net, ctx) = tiny_net(5);
        let za = Tensor::new(vec![2, 2], vec![0.4, -0.1, 0.2, 0.9]).unwrap();
        let zb = Tensor::new(vec![2, 2], vec![-0.7, 0.3, 0.05, -0.2]).unwrap();
        let single = |z: &Tensor| -> Vec<f64> {
            let mut tape = Tape::new();
            let ctx_v = tape.leaf(ctx.clone());
            let zv = tape.leaf(z.clone());
            let r = tape.leaf(Tensor::scalar(0.0));
            let t = tape.leaf(Tensor::scalar(1.0));
            let u = net
                .forward(&mut tape, &store, zv, Some(r), t, ctx_v, 1)
                .unwrap();
            tape.value(u).data().to_vec()
        };
        let mut expected = single(&za);
        expected.extend(single(&zb));

        let mut tape = Tape::new();
        let ctx_v = tape.leaf(ctx);
        let stacked = Tensor::new(
            vec![4, 2],
            za.data().iter().chain(zb.data()).copied().collect(),
        )
        .unwrap();
        let zv = tape.leaf(stacked);
        let r = tape.leaf(Tensor::scalar(0.0));
        let t = tape.leaf(Tensor::scalar(1.0));
        let u = net
            .forward(&mut tape, &store, zv, Some(r), t, ctx_v, 2)
            .unwrap();
        for (a, b) in tape.value(u).data().iter().zip(&expected) {
            assert!((a - b).abs() < 1e-12, "{a} vs {b}");
        }
    }

    #[test]
    fn baseline_variant_runs_without_r() {
        let mut store = ParamStore::new();
        let mut rng = rng_from(9);
        let net = DecoderNet::init(&mut store, "fm", 8, 1, 2, 2, false, &mut rng).unwrap();
        let ctx = Tensor::new(vec![2, 8], vec![0.1; 16]).unwrap();
        let z = Tensor::new(vec![2, 2], vec![0.0, 0.5, -0.5, 0.25]).unwrap();
        let mut tape = Tape::new();
        let ctx_v = tape.leaf(ctx);
        let zv = tape.leaf(z);
        let t = tape.leaf(Tensor::scalar(0.4));
        let u = net.forward(&mut tape, &store, zv, None, t, ctx_v, 1).unwrap();
        assert_eq!(tape.value(u).shape(), &[2, 2]);
    }

    #[test]
    fn time_embedding_shape_range_and_tangent() {
        let mut tape = Tape::new();
        let s = tape
            .leaf_with_tangent(Tensor::scalar(0.37), Tensor::scalar(1.0))
            .unwrap();
        let e = time_embedding(&mut tape, s, 16).unwrap();
        assert_eq!(tape.value(e).shape(), &[1, 16]);
        assert!(tape.value(e).data().iter().all(|v| v.abs() <= 1.0));
        let tan = tape.tangent(e).expect("tangent flows through sin/cos");
        assert!(tan.data().iter().any(|&v| v != 0.0));
    }

    /// Losses and their target interplay.
    #[test]
    fn flow_loss_zero_and_offset_values() {
        let tgt = Tensor::new(vec![2, 2], vec![0.5, -0.5, 1.0, 2.0]).unwrap();
        let mut tape = Tape::new();
        let exact = tape.leaf(tgt.clone());
        let l = flow_loss(&mut tape, &[(exact, tgt.clone())], LossKind::L1).unwrap();
        assert_eq!(tape.value(l).item().unwrap(), 0.0);
        let shifted = Tensor::new(vec![2, 2], vec![1.5, 0.5, 2.0, 3.0]).unwrap();
        let off = tape.leaf(shifted);
        let l1 = flow_loss(&mut tape, &[(off, tgt.clone())], LossKind::L1).unwrap();
        assert!((tape.value(l1).item().unwrap() - 1.0).abs() < 1e-12);
        let l2 = flow_loss(&mut tape, &[(off, tgt)], LossKind::L2).unwrap();
        assert!((tape.value(l2).item().unwrap() - 1.0).abs() < 1e-12);
    }

    fn loss_value(
        store: &ParamStore,
        net: &DecoderNet,
        ctx: &Tensor,
        z: &Tensor,
        times: TimePair,
        frozen_tgt: &Tensor,
        kind: LossKind,
    ) -> f64 {
        let mut tape = Tape::new();
        let ctx_v = tape.leaf(ctx.clone());
        let zv = tape.leaf(z.clone());
        let r = tape.leaf(Tensor::scalar(times.r));
        let t = tape.leaf(Tensor::scalar(times.t));
        let u = net.forward(&mut tape, store, zv, Some(r), t, ctx_v, 1).unwrap();
        let l = flow_loss(&mut tape, &[(u, frozen_tgt.clone())], kind).unwrap();
        tape.value(l).item().unwrap()
    }

    fn loss_grads(
        store: &ParamStore,
        net: &DecoderNet,
        ctx: &Tensor,
        z: &Tensor,
        v: &Tensor,
        times: TimePair,
        kind: LossKind,
    ) -> (GradMap, Tensor) {
        let mut tape = Tape::new();
        let ctx_v = tape.leaf(ctx.clone());
        let (u, tgt) = meanflow_target_with(&mut tape, z, v, times, |tp, zv, rv, tv| {
            net.forward(tp, store, zv, Some(rv), tv, ctx_v, 1)
        })
        .unwrap();
        let l = flow_loss(&mut tape, &[(u, tgt.clone())], kind).unwrap();
        (tape.backward(l).unwrap(), tgt)
    }

    /// Finite differences against the analytic gradient, holding the target
    /// frozen at its value for the unperturbed parameters (the detached
    /// target means the loss the optimizer sees treats it as a constant).
    #[test]
    fn flow_loss_gradients_match_finite_differences() {
        let (store, net, ctx) = tiny_net(11);
        let z = Tensor::new(vec![2, 2], vec![0.4, -0.6, 0.15, 0.8]).unwrap();
        let v = Tensor::new(vec![2, 2], vec![1.2, -0.3, 0.7, -0.9]).unwrap();
        let times = TimePair::new(0.25, 0.85).unwrap();

        for kind in [LossKind::L2, LossKind::L1] {
            let (grads, tgt) = loss_grads(&store, &net, &ctx, &z, &v, times, kind);
            let eps = 1e-5;
            for name in [
                "d.token_w",
                "d.pos",
                "d.blk0.q_w",
                "d.blk0.k_w",
                "d.blk0.v_w",
                "d.blk0.o_w",
                "d.blk0.ffn_w1",
                "d.blk0.ln1_g",
                "d.kv_ln_b",
                "d.out_w",
                "d.out_b",
            ] {
                let g = grads.get(name).unwrap_or_else(|| panic!("no grad {name}"));
                let base = store.get(name).unwrap().clone();
                // probe a few entries spread through the tensor
                let n = base.len();
                for probe in [0, n / 2, n - 1] {
                    let mut stp = store.clone();
                    let mut d = base.data().to_vec();
                    d[probe] += eps;
                    stp.set_value(name, Tensor::new(base.shape().to_vec(), d.clone()).unwrap())
                        .unwrap();
                    let hi = loss_value(&stp, &net, &ctx, &z, times, &tgt, kind);
                    d[probe] -= 2.0 * eps;
                    stp.set_value(name, Tensor::new(base.shape().to_vec(), d).unwrap())
                        .unwrap();
                    let lo = loss_value(&stp, &net, &ctx, &z, times, &tgt, kind);
                    let fd = (hi - lo) / (2.0 * eps);
                    let an = g.data()[probe];
                    let denom = an.abs().max(fd.abs()).max(1e-7);
                    assert!(
                        ((an - fd) / denom).abs() < 1e-4,
                        "{name}[{probe}] ({kind:?}): analytic {an} vs fd {fd}"
                    );
                }
            }
        }
    }

    /// The target must act as a constant: computing it on the training tape
    /// (via the tangent) and computing it on a throwaway tape must give the
    /// same parameter gradients.
    #[test]
    fn target_branch_leaks_no_gradient() {
        let (store, net, ctx) = tiny_net(13);
        let z = Tensor::new(vec![2, 2], vec![0.3, 0.2, -0.4, 0.6]).unwrap();
        let v = Tensor::new(vec![2, 2], vec![-0.5, 1.1, 0.2, 0.4]).unwrap();
        let times = TimePair::new(0.1, 0.9).unwrap();

        let (grads_fused, tgt_fused) =
            loss_grads(&store, &net, &ctx, &z, &v, times, LossKind::L1);

        // separate computation: target from a throwaway tape, prediction on
        // a fresh tape without any tangents at all
        let mut scratch = Tape::new();
        let ctx_v = scratch.leaf(ctx.clone());
        let (_, tgt_sep) = meanflow_target_with(&mut scratch, &z, &v, times, |tp, zv, rv, tv| {
            net.forward(tp, &store, zv, Some(rv), tv, ctx_v, 1)
        })
        .unwrap();
        assert_eq!(tgt_fused, tgt_sep);

        let mut tape = Tape::new();
        let ctx_v = tape.leaf(ctx);
        let zv = tape.leaf(z);
        let r = tape.leaf(Tensor::scalar(times.r));
        let t = tape.leaf(Tensor::scalar(times.t));
        let u = net.forward(&mut tape, &store, zv, Some(r), t, ctx_v, 1).unwrap();
        let l = flow_loss(&mut tape, &[(u, tgt_sep)], LossKind::L1).unwrap();
        let grads_sep = tape.backward(l).unwrap();

        assert_eq!(grads_fused.len(), grads_sep.len());
        for (name, g) in &grads_fused {
            let other = &grads_sep[name];
            for (a, b) in g.data().iter().zip(other.data()) {
                assert!((a - b).abs() < 1e-12, "{name}: {a} vs {b}");
            }
        }
    }
}
