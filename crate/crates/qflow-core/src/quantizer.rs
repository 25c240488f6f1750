//! Symmetric uniform per-token activation quantizer with an adaptive gated
//! straight-through estimator.
//!
//! For a token vector `z` the quantizer computes
//! `s = max(‖z‖∞, ε) / q_max` and snaps each coordinate to
//! `s · clip(round(z/s), −q_max, q_max)` with round-half-to-even ties.
//! Coordinates that clip to `±q_max` are emitted as `±max(‖z‖∞, ε)` itself,
//! which makes the operator exactly idempotent: requantizing reproduces the
//! same scale bit-for-bit.

use ndarray::{Array1, Array2, ArrayView1};

use crate::diffcore::{GateSrc, Tape, VarId};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct QuantConfig {
    /// Bit width b ≥ 2; the grid has q_max = 2^(b−1) − 1 positive levels.
    pub bits: u32,
    /// Lower bound of the learned gate, in (0, 1].
    pub g_min: f64,
    /// Zero-norm guard for the scale computation.
    pub scale_epsilon: f64,
}

impl QuantConfig {
    pub fn new(bits: u32, g_min: f64, scale_epsilon: f64) -> Result<Self> {
        let cfg = QuantConfig { bits, g_min, scale_epsilon };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.bits < 2 || self.bits > 31 {
            return Err(Error::InvalidArgument(format!(
                "quantizer bits must be in [2, 31], got {}",
                self.bits
            )));
        }
        if !(self.g_min > 0.0 && self.g_min <= 1.0) {
            return Err(Error::InvalidArgument(format!(
                "g_min must be in (0, 1], got {}",
                self.g_min
            )));
        }
        if !(self.scale_epsilon > 0.0) {
            return Err(Error::InvalidArgument(format!(
                "scale_epsilon must be > 0, got {}",
                self.scale_epsilon
            )));
        }
        Ok(())
    }

    pub fn q_max(&self) -> f64 {
        ((1u64 << (self.bits - 1)) - 1) as f64
    }
}

impl Default for QuantConfig {
    fn default() -> Self {
        QuantConfig { bits: 8, g_min: 0.1, scale_epsilon: 1e-12 }
    }
}

/// Trainable gate parameter for the adaptive straight-through estimator.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GateState {
    pub alpha: f64,
}

impl GateState {
    pub fn new(alpha: f64) -> Result<Self> {
        if !alpha.is_finite() {
            return Err(Error::NonFinite { op: "gate_state" });
        }
        Ok(GateState { alpha })
    }
}

impl Default for GateState {
    fn default() -> Self {
        // Symmetric start: the gate sits midway between g_min and 1.
        GateState { alpha: 0.0 }
    }
}

/// Per-token quantization scale `s = max(‖z‖∞, ε) / q_max`.
pub fn token_scale(z: ArrayView1<f64>, cfg: &QuantConfig) -> f64 {
    let max_abs = z.iter().fold(0.0f64, |acc, v| acc.max(v.abs()));
    max_abs.max(cfg.scale_epsilon) / cfg.q_max()
}

/// Symmetric uniform quantization of one token vector.
pub fn quantize(z: ArrayView1<f64>, cfg: &QuantConfig) -> Result<Array1<f64>> {
    if !z.iter().all(|v| v.is_finite()) {
        return Err(Error::NonFinite { op: "quantize" });
    }
    let q_max = cfg.q_max();
    let max_abs = z.iter().fold(0.0f64, |acc, v| acc.max(v.abs())).max(cfg.scale_epsilon);
    let s = max_abs / q_max;
    Ok(z.mapv(|v| {
        let level = (v / s).round_ties_even().clamp(-q_max, q_max);
        if level == q_max {
            max_abs
        } else if level == -q_max {
            -max_abs
        } else if level == 0.0 {
            0.0 // canonical zero: a −0.0 level must not leak sign bits
        } else {
            s * level
        }
    }))
}

/// Row-wise (per-token) quantization of an M×d latent.
pub fn quantize_tokens(z: &Array2<f64>, cfg: &QuantConfig) -> Result<Array2<f64>> {
    let mut out = Array2::zeros(z.dim());
    for (i, row) in z.rows().into_iter().enumerate() {
        out.row_mut(i).assign(&quantize(row, cfg)?);
    }
    Ok(out)
}

/// Gate value `g = g_min + (1 − g_min)·σ(α)`, strictly increasing in α.
pub fn gate_value(state: &GateState, cfg: &QuantConfig) -> f64 {
    cfg.g_min + (1.0 - cfg.g_min) * logistic(state.alpha)
}

fn logistic(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Gate mode for STE sites inside the prefix block.
#[derive(Clone, Copy, Debug)]
pub enum SteMode {
    /// Learned gate: `g = g_min + (1 − g_min)·σ(α)` with a live α leaf.
    Adaptive,
    /// Fixed gate (1.0 reproduces the standard straight-through estimator).
    Fixed(f64),
}

/// Build the gate node `g_min + (1 − g_min)·σ(α)` on the tape.
pub fn gate_node(tape: &mut Tape, alpha: VarId, cfg: &QuantConfig) -> Result<VarId> {
    let sig = tape.sigmoid(alpha)?;
    let scaled = tape.scale(sig, 1.0 - cfg.g_min)?;
    tape.add_scalar(scaled, cfg.g_min)
}

/// Straight-through quantization of a (tokens × d) node: forward equals
/// [`quantize_tokens`] bit-exactly; the pullback is `g·v`, and with an
/// adaptive gate the residual-term gradient `Σ v ⊙ z` reaches α through g.
pub fn ste_quantize(
    tape: &mut Tape,
    z: VarId,
    cfg: &QuantConfig,
    alpha: Option<VarId>,
    mode: SteMode,
) -> Result<VarId> {
    let forward = quantize_tokens(tape.value(z), cfg)?;
    let gate = match mode {
        SteMode::Adaptive => {
            let alpha = alpha.ok_or_else(|| {
                Error::InvalidArgument("adaptive STE requires a gate parameter".into())
            })?;
            GateSrc::Var(gate_node(tape, alpha, cfg)?)
        }
        SteMode::Fixed(g) => {
            if !g.is_finite() {
                return Err(Error::NonFinite { op: "ste_quantize" });
            }
            GateSrc::Const(g)
        }
    };
    tape.gated_surrogate(z, gate, forward)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffcore::{self, ParamSet, SurrogateMode};
    use ndarray::{array, Array1};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    /// Independent scalar reference: straight transliteration of the
    /// formula, one coordinate at a time, no vector shortcuts.
    fn quantize_reference(z: &[f64], bits: u32, eps: f64) -> Vec<f64> {
        let q_max = (2f64.powi(bits as i32 - 1)) - 1.0;
        let mut max_abs = 0.0f64;
        for &v in z {
            max_abs = max_abs.max(v.abs());
        }
        let m = max_abs.max(eps);
        let s = m / q_max;
        z.iter()
            .map(|&v| {
                let l = (v / s).round_ties_even().clamp(-q_max, q_max);
                if l == q_max {
                    m
                } else if l == -q_max {
                    -m
                } else if l == 0.0 {
                    0.0
                } else {
                    s * l
                }
            })
            .collect()
    }

    #[test]
    fn zero_vector_maps_to_zero() {
        let cfg = QuantConfig::default();
        let z = Array1::zeros(5);
        let q = quantize(z.view(), &cfg).unwrap();
        assert!(q.iter().all(|&v| v == 0.0));
    }

    // Hand-evaluated: z = [1.0, −0.5, 0.25], b = 3 → q_max = 3, s = 1/3,
    // half-even rounding gives levels [3, −2, 1] → [1.0, −2/3, 1/3].
    #[test]
    fn hand_case_b3() {
        let cfg = QuantConfig::new(3, 0.1, 1e-12).unwrap();
        let z = array![1.0, -0.5, 0.25];
        let q = quantize(z.view(), &cfg).unwrap();
        let s = 1.0 / 3.0;
        assert_eq!(q[0], 1.0);
        assert_eq!(q[1], -2.0 * s);
        assert_eq!(q[2], s);
        let reference = quantize_reference(z.as_slice().unwrap(), 3, 1e-12);
        assert_eq!(q.to_vec(), reference);
    }

    #[test]
    fn q_max_for_common_widths() {
        assert_eq!(QuantConfig::new(8, 0.1, 1e-12).unwrap().q_max(), 127.0);
        assert_eq!(QuantConfig::new(3, 0.1, 1e-12).unwrap().q_max(), 3.0);
        assert_eq!(QuantConfig::new(16, 0.1, 1e-12).unwrap().q_max(), 32767.0);
    }

    #[test]
    fn matches_scalar_reference_on_random_vectors() {
        let mut rng = ChaCha8Rng::seed_from_u64(40);
        for bits in [3u32, 4, 8, 16] {
            let cfg = QuantConfig::new(bits, 0.1, 1e-12).unwrap();
            for _ in 0..200 {
                let z: Vec<f64> = (0..16).map(|_| rng.gen_range(-4.0..4.0)).collect();
                let q = quantize(Array1::from_vec(z.clone()).view(), &cfg).unwrap();
                assert_eq!(q.to_vec(), quantize_reference(&z, bits, 1e-12));
            }
        }
    }

    #[test]
    fn gate_value_midpoint_and_limits() {
        let cfg = QuantConfig::default();
        let g0 = gate_value(&GateState { alpha: 0.0 }, &cfg);
        assert!((g0 - 0.55).abs() < 1e-15);
        let hi = gate_value(&GateState { alpha: 60.0 }, &cfg);
        let lo = gate_value(&GateState { alpha: -60.0 }, &cfg);
        assert!((hi - 1.0).abs() < 1e-12);
        assert!((lo - 0.1).abs() < 1e-12);
    }

    #[test]
    fn gate_value_direct_evaluation() {
        let cfg = QuantConfig::default();
        let g = gate_value(&GateState { alpha: -2.0 }, &cfg);
        let expected = 0.1 + 0.9 / (1.0 + 2.0f64.exp());
        assert!((g - expected).abs() < 1e-15);
    }

    #[test]
    fn gate_bounds_and_monotonicity() {
        let cfg = QuantConfig::default();
        let mut prev = f64::NEG_INFINITY;
        for i in -50..=50 {
            let g = gate_value(&GateState { alpha: i as f64 / 5.0 }, &cfg);
            assert!(g >= cfg.g_min && g <= 1.0);
            assert!(g > prev, "gate must be strictly increasing in alpha");
            prev = g;
        }
    }

    #[test]
    fn ste_forward_matches_quantize_bit_exactly() {
        let cfg = QuantConfig::default();
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let z = Array2::from_shape_fn((4, 8), |_| rng.gen_range(-2.0..2.0));
        let expected = quantize_tokens(&z, &cfg).unwrap();

        let mut params = ParamSet::new();
        params.insert("z", z).unwrap();
        params.insert("alpha", Array2::from_elem((1, 1), 0.3)).unwrap();
        let mut tape = Tape::new();
        let zid = tape.leaf(params.get("z").unwrap().clone()).unwrap();
        let aid = tape.leaf(params.get("alpha").unwrap().clone()).unwrap();
        let q = ste_quantize(&mut tape, zid, &cfg, Some(aid), SteMode::Adaptive).unwrap();
        assert_eq!(tape.value(q), &expected);
    }

    #[test]
    fn ste_backward_is_gate_times_cotangent_and_reaches_alpha() {
        let cfg = QuantConfig::default();
        let mut rng = ChaCha8Rng::seed_from_u64(23);
        let z = Array2::from_shape_fn((3, 4), |_| rng.gen_range(-2.0..2.0));
        let weights = Array2::from_shape_fn((3, 4), |_| rng.gen_range(-1.0..1.0));
        let alpha = -0.7;

        let mut params = ParamSet::new();
        params.insert("z", z.clone()).unwrap();
        params.insert("alpha", Array2::from_elem((1, 1), alpha)).unwrap();
        let w = weights.clone();
        let cfg2 = cfg;
        let (_, grads) = diffcore::value_and_grad(&params, move |tape, vars| {
            let q = ste_quantize(tape, vars["z"], &cfg2, Some(vars["alpha"]), SteMode::Adaptive)?;
            let wid = tape.constant(w.clone())?;
            let prod = tape.mul(wid, q)?;
            tape.sum_all(prod)
        })
        .unwrap();

        let g = gate_value(&GateState { alpha }, &cfg);
        let gz = grads.get("z").unwrap();
        for (gv, wv) in gz.iter().zip(weights.iter()) {
            assert_eq!(*gv, g * wv, "pullback must equal g·v exactly");
        }
        // dL/dα = (Σ v ⊙ z) · dg/dα with dg/dα = (1−g_min)σ(α)(1−σ(α)).
        let sig = 1.0 / (1.0 + (-alpha).exp());
        let dg = (1.0 - cfg.g_min) * sig * (1.0 - sig);
        let expected_alpha = (&weights * &z).sum() * dg;
        let ga = grads.get("alpha").unwrap()[[0, 0]];
        assert!((ga - expected_alpha).abs() <= 1e-15 * expected_alpha.abs().max(1.0));
        assert!(ga != 0.0, "gradient must reach alpha");
    }

    #[test]
    fn fd_probe_matches_gated_surrogate_contract() {
        let cfg = QuantConfig::default();
        let mut rng = ChaCha8Rng::seed_from_u64(31);
        let z = Array2::from_shape_fn((2, 6), |_| rng.gen_range(-2.0..2.0));
        let mut params = ParamSet::new();
        params.insert("z", z).unwrap();
        params.insert("alpha", Array2::from_elem((1, 1), 0.4)).unwrap();
        let report = diffcore::finite_difference_check(
            &params,
            |tape, vars| {
                let q =
                    ste_quantize(tape, vars["z"], &QuantConfig::default(), Some(vars["alpha"]), SteMode::Adaptive)?;
                let sq = tape.mul(q, q)?;
                tape.mean_all(sq)
            },
            1e-5,
            1e-6,
            SurrogateMode::Frozen,
            77,
        )
        .unwrap();
        assert!(report.passed(1e-6), "rel err {}", report.max_rel_err);
        let _ = cfg;
    }

    mod properties {
        use super::*;
        use proptest::prelude::*;

        fn finite_vec() -> impl Strategy<Value = Vec<f64>> {
            proptest::collection::vec(-1e6f64..1e6, 1..24)
        }

        proptest! {
            #[test]
            fn idempotent(z in finite_vec(), bits in 2u32..17) {
                let cfg = QuantConfig::new(bits, 0.1, 1e-12).unwrap();
                let z = Array1::from_vec(z);
                let q1 = quantize(z.view(), &cfg).unwrap();
                let q2 = quantize(q1.view(), &cfg).unwrap();
                prop_assert_eq!(q1, q2);
            }

            #[test]
            fn error_bounded_by_half_scale(z in finite_vec(), bits in 2u32..17) {
                let cfg = QuantConfig::new(bits, 0.1, 1e-12).unwrap();
                let z = Array1::from_vec(z);
                let s = token_scale(z.view(), &cfg);
                let q = quantize(z.view(), &cfg).unwrap();
                for (a, b) in q.iter().zip(z.iter()) {
                    prop_assert!((a - b).abs() <= 0.5 * s);
                }
            }

            #[test]
            fn level_count_bounded(z in finite_vec(), bits in 2u32..9) {
                let cfg = QuantConfig::new(bits, 0.1, 1e-12).unwrap();
                let z = Array1::from_vec(z);
                let q = quantize(z.view(), &cfg).unwrap();
                let mut levels: Vec<u64> = q.iter().map(|v| v.to_bits()).collect();
                levels.sort_unstable();
                levels.dedup();
                prop_assert!(levels.len() <= (2u64.pow(bits) - 1) as usize);
            }

            #[test]
            fn sign_symmetric_on_tie_free_inputs(z in finite_vec(), bits in 2u32..17) {
                let cfg = QuantConfig::new(bits, 0.1, 1e-12).unwrap();
                let z = Array1::from_vec(z);
                // Random draws essentially never land on exact rounding
                // ties; half-even is odd-symmetric there.
                let q_pos = quantize(z.view(), &cfg).unwrap();
                let q_neg = quantize(z.mapv(|v| -v).view(), &cfg).unwrap();
                for (a, b) in q_pos.iter().zip(q_neg.iter()) {
                    prop_assert_eq!(*a, -*b);
                }
            }
        }
    }
}
