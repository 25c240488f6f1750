//! Quantized prefix transformer block and the flow-matching action expert.
//!
//! Each block layer applies full (non-causal, position-free) multi-head
//! attention over the prefix tokens, layer-normalises the residual, quantizes
//! the attention-updated tokens through the gated straight-through estimator,
//! then applies the MLP sublayer:
//!
//! ```text
//! H_att = LN(H + MHA(H));  Ĥ = Q_b(H_att)  (per token, when enabled);
//! out   = LN(Ĥ + MLP(Ĥ))
//! ```
//!
//! The expert maps a noisy action chunk, an integration time and a prefix to
//! a velocity field: the chunk is flattened, the time enters as Fourier
//! features, the prefix as a mean-pooled token vector; the concatenation runs
//! through a two-hidden-layer MLP and a linear head.

use std::collections::BTreeMap;

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::diffcore::{ParamSet, Tape, VarId};
use crate::error::{Error, Result};
use crate::quantizer::{ste_quantize, QuantConfig, SteMode};

/// Number of Fourier frequencies used to embed the integration time.
pub const N_TAU_FREQS: usize = 8;

const LN_EPS: f64 = 1e-5;

/// M×d prefix token embeddings.
#[derive(Clone, Debug, PartialEq)]
pub struct PrefixLatent(Array2<f64>);

impl PrefixLatent {
    pub fn new(tokens: Array2<f64>) -> Result<Self> {
        if tokens.nrows() < 1 || tokens.ncols() < 1 {
            return Err(Error::Shape {
                op: "prefix_latent",
                detail: format!("need at least 1×1, got {:?}", tokens.dim()),
            });
        }
        if !tokens.iter().all(|v| v.is_finite()) {
            return Err(Error::NonFinite { op: "prefix_latent" });
        }
        Ok(PrefixLatent(tokens))
    }

    pub fn tokens(&self) -> &Array2<f64> {
        &self.0
    }

    pub fn into_tokens(self) -> Array2<f64> {
        self.0
    }

    pub fn m(&self) -> usize {
        self.0.nrows()
    }

    pub fn d(&self) -> usize {
        self.0.ncols()
    }
}

/// T×D action trajectory (T ≥ 3 so second differences exist).
#[derive(Clone, Debug, PartialEq)]
pub struct ActionChunk(Array2<f64>);

impl ActionChunk {
    pub fn new(values: Array2<f64>) -> Result<Self> {
        if values.nrows() < 3 || values.ncols() < 1 {
            return Err(Error::Shape {
                op: "action_chunk",
                detail: format!("need at least 3×1, got {:?}", values.dim()),
            });
        }
        if !values.iter().all(|v| v.is_finite()) {
            return Err(Error::NonFinite { op: "action_chunk" });
        }
        Ok(ActionChunk(values))
    }

    pub fn values(&self) -> &Array2<f64> {
        &self.0
    }

    pub fn into_values(self) -> Array2<f64> {
        self.0
    }

    pub fn horizon(&self) -> usize {
        self.0.nrows()
    }

    pub fn dim(&self) -> usize {
        self.0.ncols()
    }
}

/// Model dimensions shared by the block and the expert.
#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct ModelDims {
    /// Prefix tokens M.
    pub m_tokens: usize,
    /// Hidden width d.
    pub d_model: usize,
    pub n_heads: usize,
    /// Block MLP width.
    pub d_ff: usize,
    /// Quantized block depth L_q.
    pub l_q: usize,
    /// Expert MLP width.
    pub d_expert: usize,
    /// Action chunk length T.
    pub chunk_len: usize,
    /// Action dimension D.
    pub action_dim: usize,
}

impl ModelDims {
    pub fn validate(&self) -> Result<()> {
        if self.m_tokens < 1 || self.d_model < 1 || self.d_ff < 1 || self.d_expert < 1 {
            return Err(Error::InvalidArgument("model dims must be positive".into()));
        }
        if self.n_heads < 1 || self.d_model % self.n_heads != 0 {
            return Err(Error::InvalidArgument(format!(
                "d_model {} must be divisible by n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        if self.l_q < 1 {
            return Err(Error::InvalidArgument("l_q must be >= 1".into()));
        }
        if self.chunk_len < 3 {
            return Err(Error::InvalidArgument("chunk_len must be >= 3".into()));
        }
        if self.action_dim < 1 {
            return Err(Error::InvalidArgument("action_dim must be >= 1".into()));
        }
        Ok(())
    }

    /// Width of the expert input: flattened chunk ⊕ τ features ⊕ pooled prefix.
    pub fn expert_input(&self) -> usize {
        self.chunk_len * self.action_dim + 2 * N_TAU_FREQS + self.d_model
    }
}

impl Default for ModelDims {
    fn default() -> Self {
        ModelDims {
            m_tokens: 16,
            d_model: 64,
            n_heads: 8,
            d_ff: 256,
            l_q: 1,
            d_expert: 128,
            chunk_len: 8,
            action_dim: 2,
        }
    }
}

fn block_names(layer: usize) -> [String; 13] {
    [
        format!("block.l{layer}.ln1.gamma"),
        format!("block.l{layer}.ln1.beta"),
        format!("block.l{layer}.attn.wq"),
        format!("block.l{layer}.attn.wk"),
        format!("block.l{layer}.attn.wv"),
        format!("block.l{layer}.attn.wo"),
        format!("block.l{layer}.mlp.w1"),
        format!("block.l{layer}.mlp.b1"),
        format!("block.l{layer}.mlp.w2"),
        format!("block.l{layer}.mlp.b2"),
        format!("block.l{layer}.ln2.gamma"),
        format!("block.l{layer}.ln2.beta"),
        format!("block.l{layer}.gate.alpha"),
    ]
}

const EXPERT_NAMES: [&str; 6] = [
    "expert.w1",
    "expert.b1",
    "expert.w2",
    "expert.b2",
    "expert.head_w",
    "expert.head_b",
];

/// Tape bindings for one block layer.
#[derive(Clone, Copy, Debug)]
pub struct LayerVars {
    pub ln1_gamma: VarId,
    pub ln1_beta: VarId,
    pub wq: VarId,
    pub wk: VarId,
    pub wv: VarId,
    pub wo: VarId,
    pub w1: VarId,
    pub b1: VarId,
    pub w2: VarId,
    pub b2: VarId,
    pub ln2_gamma: VarId,
    pub ln2_beta: VarId,
    pub gate_alpha: VarId,
}

/// Tape bindings for the whole block stack.
#[derive(Clone, Debug)]
pub struct BlockVars {
    pub layers: Vec<LayerVars>,
}

/// Tape bindings for the expert.
#[derive(Clone, Copy, Debug)]
pub struct ExpertVars {
    pub w1: VarId,
    pub b1: VarId,
    pub w2: VarId,
    pub b2: VarId,
    pub head_w: VarId,
    pub head_b: VarId,
}

fn lookup(vars: &BTreeMap<String, VarId>, name: &str) -> Result<VarId> {
    vars.get(name)
        .copied()
        .ok_or_else(|| Error::MissingParam(name.to_string()))
}

pub fn bind_block(vars: &BTreeMap<String, VarId>, dims: &ModelDims) -> Result<BlockVars> {
    let mut layers = Vec::with_capacity(dims.l_q);
    for l in 0..dims.l_q {
        let n = block_names(l);
        layers.push(LayerVars {
            ln1_gamma: lookup(vars, &n[0])?,
            ln1_beta: lookup(vars, &n[1])?,
            wq: lookup(vars, &n[2])?,
            wk: lookup(vars, &n[3])?,
            wv: lookup(vars, &n[4])?,
            wo: lookup(vars, &n[5])?,
            w1: lookup(vars, &n[6])?,
            b1: lookup(vars, &n[7])?,
            w2: lookup(vars, &n[8])?,
            b2: lookup(vars, &n[9])?,
            ln2_gamma: lookup(vars, &n[10])?,
            ln2_beta: lookup(vars, &n[11])?,
            gate_alpha: lookup(vars, &n[12])?,
        });
    }
    Ok(BlockVars { layers })
}

pub fn bind_expert(vars: &BTreeMap<String, VarId>) -> Result<ExpertVars> {
    Ok(ExpertVars {
        w1: lookup(vars, EXPERT_NAMES[0])?,
        b1: lookup(vars, EXPERT_NAMES[1])?,
        w2: lookup(vars, EXPERT_NAMES[2])?,
        b2: lookup(vars, EXPERT_NAMES[3])?,
        head_w: lookup(vars, EXPERT_NAMES[4])?,
        head_b: lookup(vars, EXPERT_NAMES[5])?,
    })
}

fn uniform_init(rng: &mut ChaCha8Rng, rows: usize, cols: usize, fan_in: usize) -> Array2<f64> {
    let bound = 1.0 / (fan_in as f64).sqrt();
    Array2::from_shape_fn((rows, cols), |_| rng.gen_range(-bound..bound))
}

/// Deterministic parameter initialisation: scaled-uniform ±1/√fan_in
/// weights, zero biases, unit layer-norm scales, zero offsets, zero gate α.
pub fn init_params(seed: u64, dims: &ModelDims) -> Result<ParamSet> {
    dims.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let d = dims.d_model;
    let mut params = ParamSet::new();
    for l in 0..dims.l_q {
        let n = block_names(l);
        params.insert(&n[0], Array2::ones((1, d)))?;
        params.insert(&n[1], Array2::zeros((1, d)))?;
        for w in &n[2..6] {
            params.insert(w.clone(), uniform_init(&mut rng, d, d, d))?;
        }
        params.insert(&n[6], uniform_init(&mut rng, d, dims.d_ff, d))?;
        params.insert(&n[7], Array2::zeros((1, dims.d_ff)))?;
        params.insert(&n[8], uniform_init(&mut rng, dims.d_ff, d, dims.d_ff))?;
        params.insert(&n[9], Array2::zeros((1, d)))?;
        params.insert(&n[10], Array2::ones((1, d)))?;
        params.insert(&n[11], Array2::zeros((1, d)))?;
        params.insert(&n[12], Array2::zeros((1, 1)))?;
    }
    let e_in = dims.expert_input();
    let de = dims.d_expert;
    let td = dims.chunk_len * dims.action_dim;
    params.insert(EXPERT_NAMES[0], uniform_init(&mut rng, e_in, de, e_in))?;
    params.insert(EXPERT_NAMES[1], Array2::zeros((1, de)))?;
    params.insert(EXPERT_NAMES[2], uniform_init(&mut rng, de, de, de))?;
    params.insert(EXPERT_NAMES[3], Array2::zeros((1, de)))?;
    params.insert(EXPERT_NAMES[4], uniform_init(&mut rng, de, td, de))?;
    params.insert(EXPERT_NAMES[5], Array2::zeros((1, td)))?;
    Ok(params)
}

/// Quantization behaviour of the block forward.
#[derive(Clone, Copy, Debug)]
pub enum QuantSlot<'a> {
    /// Identity at the quantization slot.
    Disabled,
    /// Straight-through quantization with the given gate mode.
    Enabled(&'a QuantConfig, SteMode),
}

fn mha(tape: &mut Tape, h: VarId, layer: &LayerVars, dims: &ModelDims) -> Result<VarId> {
    let d_head = dims.d_model / dims.n_heads;
    let scale = 1.0 / (d_head as f64).sqrt();
    let q = tape.matmul(h, layer.wq)?;
    let k = tape.matmul(h, layer.wk)?;
    let v = tape.matmul(h, layer.wv)?;
    let mut heads: Option<VarId> = None;
    for head in 0..dims.n_heads {
        let start = head * d_head;
        let qh = tape.slice_cols(q, start, d_head)?;
        let kh = tape.slice_cols(k, start, d_head)?;
        let vh = tape.slice_cols(v, start, d_head)?;
        let kt = tape.transpose(kh)?;
        let scores = tape.matmul(qh, kt)?;
        let scores = tape.scale(scores, scale)?;
        let attn = tape.softmax_rows(scores)?;
        let out = tape.matmul(attn, vh)?;
        heads = Some(match heads {
            None => out,
            Some(prev) => tape.concat_cols(prev, out)?,
        });
    }
    tape.matmul(heads.expect("n_heads >= 1"), layer.wo)
}

fn mlp(tape: &mut Tape, x: VarId, layer: &LayerVars) -> Result<VarId> {
    let h = tape.matmul(x, layer.w1)?;
    let h = tape.add_row(h, layer.b1)?;
    let h = tape.gelu(h)?;
    let h = tape.matmul(h, layer.w2)?;
    tape.add_row(h, layer.b2)
}

/// Forward pass of the stacked quantized prefix block.
pub fn prefix_block_forward(
    tape: &mut Tape,
    h: VarId,
    block: &BlockVars,
    dims: &ModelDims,
    quant: QuantSlot,
) -> Result<VarId> {
    let (rows, cols) = tape.value(h).dim();
    if rows != dims.m_tokens || cols != dims.d_model {
        return Err(Error::Shape {
            op: "prefix_block_forward",
            detail: format!("prefix {rows}×{cols}, expected {}×{}", dims.m_tokens, dims.d_model),
        });
    }
    let mut x = h;
    for layer in &block.layers {
        let att = mha(tape, x, layer, dims)?;
        let res = tape.add(x, att)?;
        let h_att = tape.layer_norm(res, layer.ln1_gamma, layer.ln1_beta, LN_EPS)?;
        let h_quant = match quant {
            QuantSlot::Disabled => h_att,
            QuantSlot::Enabled(cfg, mode) => {
                ste_quantize(tape, h_att, cfg, Some(layer.gate_alpha), mode)?
            }
        };
        let m = mlp(tape, h_quant, layer)?;
        let res2 = tape.add(h_quant, m)?;
        x = tape.layer_norm(res2, layer.ln2_gamma, layer.ln2_beta, LN_EPS)?;
    }
    Ok(x)
}

/// Fourier features of the integration time: sin/cos at dyadic frequencies.
pub fn tau_features(tau: f64) -> Array2<f64> {
    let mut out = Array2::zeros((1, 2 * N_TAU_FREQS));
    for k in 0..N_TAU_FREQS {
        let w = std::f64::consts::PI * (1u64 << k) as f64;
        out[[0, 2 * k]] = (w * tau).sin();
        out[[0, 2 * k + 1]] = (w * tau).cos();
    }
    out
}

/// Expert velocity head on the tape.
pub fn expert_velocity_node(
    tape: &mut Tape,
    x_tau: VarId,
    tau: f64,
    prefix: VarId,
    expert: &ExpertVars,
    dims: &ModelDims,
) -> Result<VarId> {
    if !(0.0..=1.0).contains(&tau) {
        return Err(Error::InvalidArgument(format!("tau must lie in [0, 1], got {tau}")));
    }
    let (t, d_act) = tape.value(x_tau).dim();
    if t != dims.chunk_len || d_act != dims.action_dim {
        return Err(Error::Shape {
            op: "expert_velocity",
            detail: format!("chunk {t}×{d_act}, expected {}×{}", dims.chunk_len, dims.action_dim),
        });
    }
    let flat = tape.reshape(x_tau, 1, t * d_act)?;
    let feats = tape.constant(tau_features(tau))?;
    let pooled = tape.mean_rows(prefix)?;
    let joined = tape.concat_cols(flat, feats)?;
    let joined = tape.concat_cols(joined, pooled)?;
    let h = tape.matmul(joined, expert.w1)?;
    let h = tape.add_row(h, expert.b1)?;
    let h = tape.gelu(h)?;
    let h = tape.matmul(h, expert.w2)?;
    let h = tape.add_row(h, expert.b2)?;
    let h = tape.gelu(h)?;
    let v = tape.matmul(h, expert.head_w)?;
    let v = tape.add_row(v, expert.head_b)?;
    tape.reshape(v, t, d_act)
}

fn bind_subset(tape: &mut Tape, params: &ParamSet) -> Result<BTreeMap<String, VarId>> {
    let mut vars = BTreeMap::new();
    for (name, value) in params.iter() {
        vars.insert(name.clone(), tape.constant(value.clone())?);
    }
    Ok(vars)
}

/// Plain (non-tape) block application, for inference and evaluation.
pub fn apply_prefix_block(
    prefix: &PrefixLatent,
    params: &ParamSet,
    dims: &ModelDims,
    quant: QuantSlot,
) -> Result<PrefixLatent> {
    let mut tape = Tape::new();
    let vars = bind_subset(&mut tape, params)?;
    let block = bind_block(&vars, dims)?;
    let h = tape.constant(prefix.tokens().clone())?;
    let out = prefix_block_forward(&mut tape, h, &block, dims, quant)?;
    PrefixLatent::new(tape.value(out).clone())
}

/// Plain (non-tape) expert velocity evaluation.
pub fn expert_velocity(
    x_tau: &Array2<f64>,
    tau: f64,
    prefix: &PrefixLatent,
    params: &ParamSet,
    dims: &ModelDims,
) -> Result<ActionChunk> {
    let mut tape = Tape::new();
    let vars = bind_subset(&mut tape, params)?;
    let expert = bind_expert(&vars)?;
    let x = tape.constant(x_tau.clone())?;
    let p = tape.constant(prefix.tokens().clone())?;
    let out = expert_velocity_node(&mut tape, x, tau, p, &expert, dims)?;
    ActionChunk::new(tape.value(out).clone())
}
