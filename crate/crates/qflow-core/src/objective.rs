//! Flow-matching targets, dual-branch losses, the relative
//! temporal-complexity constraint, and inference-time action sampling.
//!
//! Training draws a noise chunk ε and a time τ, builds the linear-path
//! sample `x_τ = τ·ε + (1−τ)·a` with target velocity `u_τ = ε − a`, and
//! scores the quantized branch with `‖v − u_τ‖²`. The raw-prefix branch is
//! wrapped in stop-gradient and only enters through the hinge
//! `[C(N(v_q)) − C(N(v_r))]₊` on normalized temporal complexity.

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::diffcore::{Scalar, Tape, VarId};
use crate::error::{Error, Result};
use crate::policy::{
    expert_velocity_node, prefix_block_forward, ActionChunk, BlockVars, ExpertVars, ModelDims,
    QuantSlot,
};
use crate::quantizer::{QuantConfig, SteMode};

/// One flow-matching draw: noise, time, interpolant and target velocity.
#[derive(Clone, Debug)]
pub struct FlowSample {
    pub epsilon: Array2<f64>,
    pub tau: f64,
    pub x_tau: Array2<f64>,
    pub u_tau: Array2<f64>,
}

/// `x_τ = τ·ε + (1−τ)·a`, `u_τ = ε − a`.
pub fn make_flow_sample(a: &ActionChunk, epsilon: Array2<f64>, tau: f64) -> Result<FlowSample> {
    if epsilon.dim() != a.values().dim() {
        return Err(Error::Shape {
            op: "make_flow_sample",
            detail: format!("noise {:?} vs chunk {:?}", epsilon.dim(), a.values().dim()),
        });
    }
    if !(0.0..=1.0).contains(&tau) {
        return Err(Error::InvalidArgument(format!("tau must lie in [0, 1], got {tau}")));
    }
    let x_tau = epsilon.mapv(|v| tau * v) + a.values().mapv(|v| (1.0 - tau) * v);
    let u_tau = &epsilon - a.values();
    Ok(FlowSample { epsilon, tau, x_tau, u_tau })
}

/// Weights of the temporal-complexity terms and the hinge.
#[derive(Clone, Copy, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct TCWeights {
    pub lambda1: f64,
    pub lambda2: f64,
    pub lambda_tc: f64,
}

impl TCWeights {
    pub fn validate(&self) -> Result<()> {
        if self.lambda1 < 0.0 || self.lambda2 < 0.0 || self.lambda_tc < 0.0 {
            return Err(Error::InvalidArgument(
                "temporal-complexity weights must be nonnegative".into(),
            ));
        }
        Ok(())
    }
}

impl Default for TCWeights {
    fn default() -> Self {
        // λ_tc = 0.3 sits at the stable plateau of the sensitivity sweep.
        TCWeights { lambda1: 1.0, lambda2: 1.0, lambda_tc: 0.3 }
    }
}

/// Per-dimension quantile range used to normalize actions: the affine map
/// sends `[lower, upper]` to `[−1, 1]`.
#[derive(Clone, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct NormStats {
    pub lower: Vec<f64>,
    pub upper: Vec<f64>,
}

impl NormStats {
    pub fn new(lower: Vec<f64>, upper: Vec<f64>) -> Result<Self> {
        if lower.len() != upper.len() || lower.is_empty() {
            return Err(Error::InvalidArgument(
                "quantile bounds must be nonempty and same length".into(),
            ));
        }
        for (lo, hi) in lower.iter().zip(&upper) {
            if !(hi > lo) || !lo.is_finite() || !hi.is_finite() {
                return Err(Error::InvalidArgument(format!(
                    "need upper > lower per dimension, got [{lo}, {hi}]"
                )));
            }
        }
        Ok(NormStats { lower, upper })
    }

    /// Identity map: `[−1, 1]` per dimension.
    pub fn identity(dims: usize) -> Self {
        NormStats { lower: vec![-1.0; dims], upper: vec![1.0; dims] }
    }

    /// Per-dimension q01/q99 over every timestep of the given chunks, with
    /// degenerate (constant) dimensions padded to a unit range.
    pub fn from_actions(chunks: &[ActionChunk]) -> Result<Self> {
        let d = chunks
            .first()
            .ok_or_else(|| Error::InvalidArgument("need at least one action chunk".into()))?
            .dim();
        let mut lower = Vec::with_capacity(d);
        let mut upper = Vec::with_capacity(d);
        for j in 0..d {
            let mut vals: Vec<f64> = chunks
                .iter()
                .flat_map(|c| c.values().column(j).to_vec())
                .collect();
            vals.sort_by(|a, b| a.partial_cmp(b).unwrap());
            let lo = interpolated_quantile(&vals, 0.01);
            let hi = interpolated_quantile(&vals, 0.99);
            if hi - lo < 1e-12 {
                let c = 0.5 * (hi + lo);
                lower.push(c - 0.5);
                upper.push(c + 0.5);
            } else {
                lower.push(lo);
                upper.push(hi);
            }
        }
        NormStats::new(lower, upper)
    }

    pub fn dims(&self) -> usize {
        self.lower.len()
    }

    fn center(&self, j: usize) -> f64 {
        0.5 * (self.lower[j] + self.upper[j])
    }

    fn half_range(&self, j: usize) -> f64 {
        0.5 * (self.upper[j] - self.lower[j])
    }

    /// Plain per-dimension affine normalization.
    pub fn normalize(&self, v: &Array2<f64>) -> Result<Array2<f64>> {
        if v.ncols() != self.dims() {
            return Err(Error::Shape {
                op: "normalize_actions",
                detail: format!("{} dims vs {} stats", v.ncols(), self.dims()),
            });
        }
        let mut out = v.clone();
        for j in 0..self.dims() {
            let c = self.center(j);
            let r = self.half_range(j);
            out.column_mut(j).mapv_inplace(|x| (x - c) / r);
        }
        Ok(out)
    }

    /// Tape version of [`NormStats::normalize`].
    pub fn normalize_node(&self, tape: &mut Tape, v: VarId) -> Result<VarId> {
        let d = self.dims();
        let neg_center = Array2::from_shape_fn((1, d), |(_, j)| -self.center(j));
        let inv_range = Array2::from_shape_fn((1, d), |(_, j)| 1.0 / self.half_range(j));
        let c = tape.constant(neg_center)?;
        let r = tape.constant(inv_range)?;
        let shifted = tape.add_row(v, c)?;
        tape.mul_row(shifted, r)
    }
}

/// Sorted-sample quantile with linear interpolation between order statistics.
fn interpolated_quantile(sorted: &[f64], p: f64) -> f64 {
    let n = sorted.len();
    if n == 1 {
        return sorted[0];
    }
    let pos = p * (n - 1) as f64;
    let lo = pos.floor() as usize;
    let frac = pos - lo as f64;
    if lo + 1 >= n {
        sorted[n - 1]
    } else {
        sorted[lo] * (1.0 - frac) + sorted[lo + 1] * frac
    }
}

/// Reduction convention for the flow-matching loss.
#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FmReduction {
    /// Squared Euclidean norm over all T·D entries (the displayed formula).
    Sum,
    /// Mean over entries, for learning-rate comparability.
    Mean,
}

/// `‖v − u‖²` with the configured reduction.
pub fn fm_loss(v: &Array2<f64>, u: &Array2<f64>, reduction: FmReduction) -> Result<Scalar> {
    if v.dim() != u.dim() {
        return Err(Error::Shape {
            op: "fm_loss",
            detail: format!("{:?} vs {:?}", v.dim(), u.dim()),
        });
    }
    let sum: f64 = v.iter().zip(u.iter()).map(|(a, b)| (a - b) * (a - b)).sum();
    let value = match reduction {
        FmReduction::Sum => sum,
        FmReduction::Mean => sum / v.len() as f64,
    };
    Scalar::new(value)
}

fn fm_loss_node(tape: &mut Tape, v: VarId, u: VarId, reduction: FmReduction) -> Result<VarId> {
    let diff = tape.sub(v, u)?;
    let sq = tape.mul(diff, diff)?;
    match reduction {
        FmReduction::Sum => tape.sum_all(sq),
        FmReduction::Mean => tape.mean_all(sq),
    }
}

/// Temporal complexity: λ₁·mean of squared first differences over
/// (T−1)·D entries plus λ₂·mean of squared second differences over
/// (T−2)·D entries.
pub fn temporal_complexity(v: &Array2<f64>, w: &TCWeights) -> Result<Scalar> {
    let t = v.nrows();
    if t < 3 {
        return Err(Error::InvalidArgument(format!(
            "temporal complexity needs T >= 3, got {t}"
        )));
    }
    let d = v.ncols();
    let mut first = 0.0;
    for i in 0..t - 1 {
        for j in 0..d {
            let diff = v[[i + 1, j]] - v[[i, j]];
            first += diff * diff;
        }
    }
    let mut second = 0.0;
    for i in 0..t - 2 {
        for j in 0..d {
            let diff = v[[i + 2, j]] - 2.0 * v[[i + 1, j]] + v[[i, j]];
            second += diff * diff;
        }
    }
    Scalar::new(
        w.lambda1 * first / ((t - 1) * d) as f64 + w.lambda2 * second / ((t - 2) * d) as f64,
    )
}

fn temporal_complexity_node(tape: &mut Tape, v: VarId, w: &TCWeights) -> Result<VarId> {
    let t = tape.value(v).nrows();
    if t < 3 {
        return Err(Error::InvalidArgument(format!(
            "temporal complexity needs T >= 3, got {t}"
        )));
    }
    let head = tape.slice_rows(v, 0, t - 1)?;
    let tail = tape.slice_rows(v, 1, t - 1)?;
    let d1 = tape.sub(tail, head)?;
    let d1sq = tape.mul(d1, d1)?;
    let first = tape.mean_all(d1sq)?;

    let a = tape.slice_rows(v, 0, t - 2)?;
    let b = tape.slice_rows(v, 1, t - 2)?;
    let c = tape.slice_rows(v, 2, t - 2)?;
    let b2 = tape.scale(b, -2.0)?;
    let d2 = tape.add(c, b2)?;
    let d2 = tape.add(d2, a)?;
    let d2sq = tape.mul(d2, d2)?;
    let second = tape.mean_all(d2sq)?;

    let first = tape.scale(first, w.lambda1)?;
    let second = tape.scale(second, w.lambda2)?;
    tape.add(first, second)
}

/// `max(c_q − c_r, 0)`.
pub fn tc_hinge(c_q: Scalar, c_r: Scalar) -> Scalar {
    Scalar::new((c_q.value() - c_r.value()).max(0.0)).expect("finite inputs")
}

/// How the reference branch is conditioned.
#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RawBranch {
    /// Reference sees the raw prefix directly (no block at all).
    FullBypass,
    /// Reference runs the block with the quantization slot disabled.
    QuantSlotBypass,
}

/// Loss-assembly configuration.
#[derive(Clone, Copy, Debug)]
pub struct ObjectiveCfg<'a> {
    pub dims: &'a ModelDims,
    pub quant: &'a QuantConfig,
    pub ste: SteMode,
    pub quantization_enabled: bool,
    pub dual_branch_enabled: bool,
    pub raw_branch: RawBranch,
    pub reduction: FmReduction,
    pub weights: TCWeights,
}

/// Node handles for the assembled objective.
#[derive(Clone, Copy, Debug)]
pub struct ObjectiveParts {
    pub loss: VarId,
    pub fm: VarId,
    /// Hinge term (before λ_tc); absent when the reference branch is off.
    pub tc: Option<VarId>,
    pub v_q: VarId,
    pub v_r: Option<VarId>,
}

pub enum RawSource<'a> {
    Compute,
    /// Inject a fixed reference velocity (isolation checks).
    Frozen(&'a Array2<f64>),
}

pub fn dual_branch_loss_with_raw(
    tape: &mut Tape,
    h: VarId,
    sample: &FlowSample,
    block: &BlockVars,
    expert: &ExpertVars,
    stats: &NormStats,
    cfg: &ObjectiveCfg,
    raw: RawSource,
) -> Result<ObjectiveParts> {
    let x_tau = tape.constant(sample.x_tau.clone())?;
    let u_tau = tape.constant(sample.u_tau.clone())?;

    let quant_slot = if cfg.quantization_enabled {
        QuantSlot::Enabled(cfg.quant, cfg.ste)
    } else {
        QuantSlot::Disabled
    };
    let prefix_q = prefix_block_forward(tape, h, block, cfg.dims, quant_slot)?;
    let v_q = expert_velocity_node(tape, x_tau, sample.tau, prefix_q, expert, cfg.dims)?;
    let fm = fm_loss_node(tape, v_q, u_tau, cfg.reduction)?;

    if !cfg.dual_branch_enabled {
        return Ok(ObjectiveParts { loss: fm, fm, tc: None, v_q, v_r: None });
    }

    // Reference branch: stop-gradient around the whole raw-prefix velocity,
    // sharing the expert weights with the quantized branch.
    let v_r = match raw {
        RawSource::Compute => {
            let prefix_r = match cfg.raw_branch {
                RawBranch::FullBypass => h,
                RawBranch::QuantSlotBypass => {
                    prefix_block_forward(tape, h, block, cfg.dims, QuantSlot::Disabled)?
                }
            };
            let raw_v =
                expert_velocity_node(tape, x_tau, sample.tau, prefix_r, expert, cfg.dims)?;
            tape.stop_gradient(raw_v)?
        }
        RawSource::Frozen(v) => tape.constant(v.clone())?,
    };

    let nq = stats.normalize_node(tape, v_q)?;
    let nr = stats.normalize_node(tape, v_r)?;
    let c_q = temporal_complexity_node(tape, nq, &cfg.weights)?;
    let c_r = temporal_complexity_node(tape, nr, &cfg.weights)?;
    let gap = tape.sub(c_q, c_r)?;
    let hinge = tape.relu(gap)?;
    let scaled = tape.scale(hinge, cfg.weights.lambda_tc)?;
    let loss = tape.add(fm, scaled)?;
    Ok(ObjectiveParts { loss, fm, tc: Some(hinge), v_q, v_r: Some(v_r) })
}

/// Assemble the training objective `ℒ = ℒ_fm + λ_tc·ℒ_tc` on the tape.
pub fn dual_branch_loss(
    tape: &mut Tape,
    h: VarId,
    sample: &FlowSample,
    block: &BlockVars,
    expert: &ExpertVars,
    stats: &NormStats,
    cfg: &ObjectiveCfg,
) -> Result<ObjectiveParts> {
    dual_branch_loss_with_raw(tape, h, sample, block, expert, stats, cfg, RawSource::Compute)
}

/// Euler integration of a velocity field from τ=1 down to τ=0.
///
/// `x₁ = ε` (seeded unit normal); each step applies
/// `x ← x − Δ·v(x, τ)` with `Δ = 1/n_steps`.
pub fn sample_actions_with_field<F>(
    mut field: F,
    chunk_len: usize,
    action_dim: usize,
    n_steps: usize,
    seed: u64,
) -> Result<ActionChunk>
where
    F: FnMut(&Array2<f64>, f64) -> Result<Array2<f64>>,
{
    if n_steps < 1 {
        return Err(Error::InvalidArgument("n_steps must be >= 1".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut x = Array2::from_shape_fn((chunk_len, action_dim), |_| rng.sample(StandardNormal));
    let delta = 1.0 / n_steps as f64;
    for k in 0..n_steps {
        let tau = (1.0 - k as f64 * delta).clamp(0.0, 1.0);
        let v = field(&x, tau)?;
        if v.dim() != x.dim() {
            return Err(Error::Shape {
                op: "sample_actions",
                detail: format!("field returned {:?}, expected {:?}", v.dim(), x.dim()),
            });
        }
        x.zip_mut_with(&v, |xi, vi| *xi -= delta * vi);
    }
    ActionChunk::new(x)
}

/// Sample an action chunk from the expert conditioned on a prefix.
pub fn sample_actions(
    prefix: &crate::policy::PrefixLatent,
    params: &crate::diffcore::ParamSet,
    dims: &ModelDims,
    n_steps: usize,
    seed: u64,
) -> Result<ActionChunk> {
    sample_actions_with_field(
        |x, tau| Ok(crate::policy::expert_velocity(x, tau, prefix, params, dims)?.into_values()),
        dims.chunk_len,
        dims.action_dim,
        n_steps,
        seed,
    )
}

/// Bit-exact check that the stop-gradient reference branch contributes no
/// gradient: the gradient of the full objective equals the gradient with
/// the reference velocity replaced by a constant copy.
pub fn raw_branch_gradient_isolation_check(seed: u64) -> Result<bool> {
    use crate::policy::{bind_block, bind_expert, init_params};

    let dims = ModelDims {
        m_tokens: 4,
        d_model: 8,
        n_heads: 2,
        d_ff: 16,
        l_q: 1,
        d_expert: 12,
        chunk_len: 4,
        action_dim: 2,
    };
    let params = init_params(seed, &dims)?;
    let mut rng = ChaCha8Rng::seed_from_u64(crate::derive_seed(seed, "isolation", 0));
    let h = Array2::from_shape_fn((dims.m_tokens, dims.d_model), |_| rng.gen_range(-1.0..1.0));
    let a = ActionChunk::new(Array2::from_shape_fn(
        (dims.chunk_len, dims.action_dim),
        |_| rng.gen_range(-1.0..1.0),
    ))?;
    let eps = Array2::from_shape_fn((dims.chunk_len, dims.action_dim), |_| {
        rng.sample(StandardNormal)
    });
    let tau = rng.gen_range(0.1..0.9);
    let sample = make_flow_sample(&a, eps, tau)?;
    let stats = NormStats::identity(dims.action_dim);
    let quant = QuantConfig::default();
    let cfg = ObjectiveCfg {
        dims: &dims,
        quant: &quant,
        ste: SteMode::Adaptive,
        quantization_enabled: true,
        dual_branch_enabled: true,
        raw_branch: RawBranch::FullBypass,
        reduction: FmReduction::Sum,
        weights: TCWeights::default(),
    };

    // Capture the live reference velocity, then recompute the loss with the
    // reference injected as a constant.
    let captured = std::cell::RefCell::new(None);
    let (v_live, g_live) = crate::diffcore::value_and_grad(&params, |tape, vars| {
        let block = bind_block(vars, &dims)?;
        let expert = bind_expert(vars)?;
        let hid = tape.constant(h.clone())?;
        let parts = dual_branch_loss_with_raw(
            tape,
            hid,
            &sample,
            &block,
            &expert,
            &stats,
            &cfg,
            RawSource::Compute,
        )?;
        *captured.borrow_mut() = Some(tape.value(parts.v_r.expect("dual branch on")).clone());
        Ok(parts.loss)
    })?;
    let frozen = captured.into_inner().expect("reference branch captured");
    let (v_frozen, g_frozen) = crate::diffcore::value_and_grad(&params, |tape, vars| {
        let block = bind_block(vars, &dims)?;
        let expert = bind_expert(vars)?;
        let hid = tape.constant(h.clone())?;
        let parts = dual_branch_loss_with_raw(
            tape,
            hid,
            &sample,
            &block,
            &expert,
            &stats,
            &cfg,
            RawSource::Frozen(&frozen),
        )?;
        Ok(parts.loss)
    })?;

    if v_live.value().to_bits() != v_frozen.value().to_bits() {
        return Ok(false);
    }
    for (name, g) in g_live.iter() {
        let other = g_frozen.get(name)?;
        for (x, y) in g.iter().zip(other.iter()) {
            if x.to_bits() != y.to_bits() {
                return Ok(false);
            }
        }
    }
    Ok(true)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffcore::{self, ParamSet, SurrogateMode};
    use crate::policy::{bind_block, bind_expert, init_params};
    use ndarray::array;

    fn chunk(values: Array2<f64>) -> ActionChunk {
        ActionChunk::new(values).unwrap()
    }

    #[test]
    fn flow_sample_endpoints() {
        let a = chunk(array![[1.0, 0.0], [0.5, 0.5], [0.0, 1.0]]);
        let eps = array![[0.0, 1.0], [1.0, 0.0], [0.5, 0.5]];
        let s0 = make_flow_sample(&a, eps.clone(), 0.0).unwrap();
        assert_eq!(&s0.x_tau, a.values());
        assert_eq!(s0.u_tau, &eps - a.values());
        let s1 = make_flow_sample(&a, eps.clone(), 1.0).unwrap();
        assert_eq!(s1.x_tau, eps);
    }

    #[test]
    fn flow_sample_midpoint() {
        let a = chunk(array![[1.0, 0.0], [1.0, 0.0], [1.0, 0.0]]);
        let eps = array![[0.0, 1.0], [0.0, 1.0], [0.0, 1.0]];
        let s = make_flow_sample(&a, eps, 0.5).unwrap();
        assert_eq!(s.x_tau, array![[0.5, 0.5], [0.5, 0.5], [0.5, 0.5]]);
        assert_eq!(s.u_tau, array![[-1.0, 1.0], [-1.0, 1.0], [-1.0, 1.0]]);
    }

    #[test]
    fn flow_sample_rejects_mismatched_shapes() {
        let a = chunk(array![[1.0], [0.5], [0.0]]);
        let eps = Array2::zeros((3, 2));
        assert!(make_flow_sample(&a, eps, 0.5).is_err());
    }

    #[test]
    fn fm_loss_counting_and_zero() {
        let v = Array2::ones((2, 3));
        let z = Array2::zeros((2, 3));
        assert_eq!(fm_loss(&v, &v, FmReduction::Sum).unwrap().value(), 0.0);
        assert_eq!(fm_loss(&v, &z, FmReduction::Sum).unwrap().value(), 6.0);
        assert_eq!(fm_loss(&v, &z, FmReduction::Mean).unwrap().value(), 1.0);
    }

    #[test]
    fn fm_loss_matches_naive_loop() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let v = Array2::from_shape_fn((4, 3), |_| rng.gen_range(-2.0..2.0));
        let u = Array2::from_shape_fn((4, 3), |_| rng.gen_range(-2.0..2.0));
        let mut acc = 0.0;
        for i in 0..4 {
            for j in 0..3 {
                let d: f64 = v[[i, j]] - u[[i, j]];
                acc += d * d;
            }
        }
        let got = fm_loss(&v, &u, FmReduction::Sum).unwrap().value();
        assert!((got - acc).abs() < 1e-12);
    }

    #[test]
    fn normalization_identity_and_affine() {
        let stats = NormStats::identity(2);
        let v = array![[0.3, -0.7], [1.0, 0.0], [-1.0, 0.5]];
        assert_eq!(stats.normalize(&v).unwrap(), v);

        let stats = NormStats::new(vec![0.0], vec![10.0]).unwrap();
        let v = array![[5.0], [0.0], [10.0]];
        let n = stats.normalize(&v).unwrap();
        assert_eq!(n, array![[0.0], [-1.0], [1.0]]);
    }

    #[test]
    fn constant_dimension_is_padded_to_unit_range() {
        let chunks = vec![
            chunk(array![[2.0, 1.0], [2.0, 2.0], [2.0, 3.0]]),
            chunk(array![[2.0, 0.0], [2.0, 4.0], [2.0, 2.0]]),
        ];
        let stats = NormStats::from_actions(&chunks).unwrap();
        assert!((stats.upper[0] - stats.lower[0] - 1.0).abs() < 1e-12);
        let n = stats.normalize(chunks[0].values()).unwrap();
        assert!(n.iter().all(|v| v.is_finite()));
        assert!(n.column(0).iter().all(|&v| v == 0.0));
    }

    // T=3, D=1, v=(0,1,3), λ₁=λ₂=1: first diffs (1,2) → mean 2.5;
    // second diff (1) → 1; C = 3.5.
    #[test]
    fn temporal_complexity_hand_case() {
        let v = array![[0.0], [1.0], [3.0]];
        let w = TCWeights { lambda1: 1.0, lambda2: 1.0, lambda_tc: 0.0 };
        let c = temporal_complexity(&v, &w).unwrap().value();
        assert!((c - 3.5).abs() < 1e-12);
        let first = (1.0f64 + 4.0) / 2.0;
        let second = 1.0f64;
        assert!((c - (first + second)).abs() < 1e-12);
    }

    #[test]
    fn temporal_complexity_vanishes_for_constant_and_scales_quadratically() {
        let w = TCWeights::default();
        let constant = Array2::from_elem((5, 2), 3.7);
        assert_eq!(temporal_complexity(&constant, &w).unwrap().value(), 0.0);

        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let v = Array2::from_shape_fn((6, 2), |_| rng.gen_range(-1.0..1.0));
        let c1 = temporal_complexity(&v, &w).unwrap().value();
        let c3 = temporal_complexity(&v.mapv(|x| 3.0 * x), &w).unwrap().value();
        assert!((c3 - 9.0 * c1).abs() < 1e-9 * c1.abs().max(1.0));
    }

    #[test]
    fn temporal_complexity_requires_three_steps() {
        let v = array![[0.0], [1.0]];
        assert!(temporal_complexity(&v, &TCWeights::default()).is_err());
    }

    #[test]
    fn tape_complexity_matches_plain() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let v = Array2::from_shape_fn((7, 3), |_| rng.gen_range(-2.0..2.0));
        let w = TCWeights { lambda1: 0.7, lambda2: 1.3, lambda_tc: 0.0 };
        let plain = temporal_complexity(&v, &w).unwrap().value();
        let mut tape = Tape::new();
        let vid = tape.constant(v).unwrap();
        let c = temporal_complexity_node(&mut tape, vid, &w).unwrap();
        assert!((tape.scalar(c) - plain).abs() < 1e-12);
    }

    #[test]
    fn hinge_clamps_and_orders() {
        let s = |v: f64| Scalar::new(v).unwrap();
        assert_eq!(tc_hinge(s(2.0), s(2.0)).value(), 0.0);
        assert_eq!(tc_hinge(s(2.0), s(5.0)).value(), 0.0);
        assert_eq!(tc_hinge(s(5.0), s(2.0)).value(), 3.0);
        // Monotone: nondecreasing in c_q, nonincreasing in c_r.
        assert!(tc_hinge(s(6.0), s(2.0)).value() >= tc_hinge(s(5.0), s(2.0)).value());
        assert!(tc_hinge(s(5.0), s(3.0)).value() <= tc_hinge(s(5.0), s(2.0)).value());
    }

    fn tiny_setup(
        seed: u64,
    ) -> (ModelDims, ParamSet, Array2<f64>, ActionChunk, FlowSample, NormStats) {
        let dims = ModelDims {
            m_tokens: 4,
            d_model: 8,
            n_heads: 2,
            d_ff: 16,
            l_q: 1,
            d_expert: 12,
            chunk_len: 4,
            action_dim: 2,
        };
        let params = init_params(seed, &dims).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xabcd);
        let h = Array2::from_shape_fn((dims.m_tokens, dims.d_model), |_| rng.gen_range(-1.0..1.0));
        let a = chunk(Array2::from_shape_fn(
            (dims.chunk_len, dims.action_dim),
            |_| rng.gen_range(-1.0..1.0),
        ));
        let eps = Array2::from_shape_fn((dims.chunk_len, dims.action_dim), |_| {
            rng.sample(StandardNormal)
        });
        let tau = rng.gen_range(0.1..0.9);
        let sample = make_flow_sample(&a, eps, tau).unwrap();
        let stats = NormStats::identity(dims.action_dim);
        (dims, params, h, a, sample, stats)
    }

    fn objective_cfg<'a>(
        dims: &'a ModelDims,
        quant: &'a QuantConfig,
        lambda_tc: f64,
    ) -> ObjectiveCfg<'a> {
        ObjectiveCfg {
            dims,
            quant,
            ste: SteMode::Adaptive,
            quantization_enabled: true,
            dual_branch_enabled: true,
            raw_branch: RawBranch::FullBypass,
            reduction: FmReduction::Sum,
            weights: TCWeights { lambda1: 1.0, lambda2: 1.0, lambda_tc },
        }
    }

    #[test]
    fn lambda_zero_reduces_to_fm_loss() {
        let (dims, params, h, _a, sample, stats) = tiny_setup(3);
        let quant = QuantConfig::default();
        let cfg = objective_cfg(&dims, &quant, 0.0);
        let (value, _) = diffcore::value_and_grad(&params, |tape, vars| {
            let block = bind_block(vars, &dims)?;
            let expert = bind_expert(vars)?;
            let hid = tape.constant(h.clone())?;
            let parts = dual_branch_loss(tape, hid, &sample, &block, &expert, &stats, &cfg)?;
            assert_eq!(tape.scalar(parts.loss), tape.scalar(parts.fm));
            Ok(parts.loss)
        })
        .unwrap();
        assert!(value.value() >= 0.0);
    }

    #[test]
    fn identical_branches_give_zero_hinge() {
        // Quantization disabled + quant-slot bypass: both branches see the
        // same conditioning, so v_q == v_r and the hinge is zero.
        let (dims, params, h, _a, sample, stats) = tiny_setup(5);
        let quant = QuantConfig::default();
        let mut cfg = objective_cfg(&dims, &quant, 0.3);
        cfg.quantization_enabled = false;
        cfg.raw_branch = RawBranch::QuantSlotBypass;
        diffcore::eval_loss(&params, |tape, vars| {
            let block = bind_block(vars, &dims)?;
            let expert = bind_expert(vars)?;
            let hid = tape.constant(h.clone())?;
            let parts = dual_branch_loss(tape, hid, &sample, &block, &expert, &stats, &cfg)?;
            assert_eq!(tape.value(parts.v_q), tape.value(parts.v_r.unwrap()));
            assert_eq!(tape.scalar(parts.tc.unwrap()), 0.0);
            assert_eq!(tape.scalar(parts.loss), tape.scalar(parts.fm));
            Ok(parts.loss)
        })
        .unwrap();
    }

    #[test]
    fn losses_are_nonnegative() {
        for seed in 0..6u64 {
            let (dims, params, h, _a, sample, stats) = tiny_setup(seed);
            let quant = QuantConfig::default();
            let cfg = objective_cfg(&dims, &quant, 0.3);
            diffcore::eval_loss(&params, |tape, vars| {
                let block = bind_block(vars, &dims)?;
                let expert = bind_expert(vars)?;
                let hid = tape.constant(h.clone())?;
                let parts = dual_branch_loss(tape, hid, &sample, &block, &expert, &stats, &cfg)?;
                assert!(tape.scalar(parts.loss) >= 0.0);
                assert!(tape.scalar(parts.tc.unwrap()) >= 0.0);
                Ok(parts.loss)
            })
            .unwrap();
        }
    }

    #[test]
    fn high_frequency_perturbation_increases_complexity() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let v = Array2::from_shape_fn((8, 2), |_| rng.gen_range(-1.0..1.0));
        let w = TCWeights::default();
        let base = temporal_complexity(&v, &w).unwrap().value();
        for delta in [1e-3, 0.1, 1.0] {
            let perturbed = Array2::from_shape_fn((8, 2), |(i, j)| {
                v[[i, j]] + if i % 2 == 0 { delta } else { -delta }
            });
            let c = temporal_complexity(&perturbed, &w).unwrap().value();
            assert!(c > base, "alternating ±{delta} must increase C: {c} vs {base}");
        }
    }

    #[test]
    fn full_objective_passes_fd_checks() {
        let (dims, params, h, _a, sample, stats) = tiny_setup(7);
        let quant = QuantConfig::default();
        let cfg = objective_cfg(&dims, &quant, 0.3);
        let report = diffcore::finite_difference_check(
            &params,
            |tape, vars| {
                let block = bind_block(vars, &dims)?;
                let expert = bind_expert(vars)?;
                let hid = tape.constant(h.clone())?;
                Ok(dual_branch_loss(tape, hid, &sample, &block, &expert, &stats, &cfg)?.loss)
            },
            1e-5,
            1e-6,
            SurrogateMode::Frozen,
            23,
        )
        .unwrap();
        assert!(report.passed(1e-6), "max rel err {}", report.max_rel_err);
    }

    #[test]
    fn raw_branch_receives_no_gradient() {
        for seed in [1u64, 2, 3, 4] {
            assert!(raw_branch_gradient_isolation_check(seed).unwrap());
        }
    }

    #[test]
    fn oracle_constant_field_recovers_target() {
        let t = 5;
        let d = 2;
        for n_steps in [1usize, 2, 7, 40] {
            let seed = 99;
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let eps = Array2::from_shape_fn((t, d), |_| rng.sample::<f64, _>(StandardNormal));
            let a = Array2::from_shape_fn((t, d), |(i, j)| (i as f64) * 0.1 - (j as f64) * 0.2);
            // The true field for the linear path is constant: v = ε − a.
            let field = |_x: &Array2<f64>, _tau: f64| Ok(&eps - &a);
            let x0 = sample_actions_with_field(field, t, d, n_steps, seed).unwrap();
            for (got, want) in x0.values().iter().zip(a.iter()) {
                assert!((got - want).abs() < 1e-9, "n_steps={n_steps}: {got} vs {want}");
            }
        }
    }

    #[test]
    fn single_step_is_one_euler_update() {
        let t = 4;
        let d = 1;
        let seed = 7;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let eps = Array2::from_shape_fn((t, d), |_| rng.sample::<f64, _>(StandardNormal));
        let field = |x: &Array2<f64>, _tau: f64| Ok(x.mapv(|v| 2.0 * v));
        let got = sample_actions_with_field(field, t, d, 1, seed).unwrap();
        let want = &eps - &eps.mapv(|v| 2.0 * v);
        assert_eq!(got.values(), &want);
    }

    #[test]
    fn sampling_is_deterministic_per_seed() {
        let (dims, params, h, ..) = tiny_setup(11);
        let prefix = crate::policy::PrefixLatent::new(h).unwrap();
        let a = sample_actions(&prefix, &params, &dims, 5, 42).unwrap();
        let b = sample_actions(&prefix, &params, &dims, 5, 42).unwrap();
        let c = sample_actions(&prefix, &params, &dims, 5, 43).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, c);
    }
}
