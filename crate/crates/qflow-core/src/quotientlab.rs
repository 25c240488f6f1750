//! Executable oracles for the quotient theory on finite worlds.
//!
//! A [`DiscreteWorld`] is a finite input set with a latent map and a joint
//! input/trajectory probability table. [`bayes_law`] computes the conditional
//! trajectory law per latent (exact for proper scoring losses, where the
//! argmin over distributions is the conditional itself). [`build_quotient`]
//! groups latents with equal laws; [`check_sufficiency`] and
//! [`check_minimality`] verify that the grouping is exactly
//! action-sufficient and coarsest. [`estimate_action_complexity`] is the
//! Monte-Carlo action-sensitive complexity with exact per-draw monotonicity
//! under function-class inclusion, and [`check_injectivity`] is the
//! finite-set encoder collision checker.

use std::collections::BTreeMap;

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

/// Finite world: inputs, their latents, trajectory ids and the joint table.
#[derive(Clone, Debug, PartialEq)]
pub struct DiscreteWorld {
    /// Input ids, e.g. `(task, nuisance)` labels.
    pub inputs: Vec<String>,
    /// Latent ids.
    pub latents: Vec<String>,
    /// `latent_of[i]` is the latent index of input `i`.
    pub latent_of: Vec<usize>,
    /// Trajectory ids.
    pub trajectories: Vec<String>,
    /// `joint[[i, a]] = P(X = inputs[i], A = trajectories[a])`, sums to 1.
    pub joint: Array2<f64>,
}

impl DiscreteWorld {
    pub fn new(
        inputs: Vec<String>,
        latents: Vec<String>,
        latent_of: Vec<usize>,
        trajectories: Vec<String>,
        joint: Array2<f64>,
    ) -> Result<Self> {
        let world = DiscreteWorld { inputs, latents, latent_of, trajectories, joint };
        world.validate()?;
        Ok(world)
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.inputs.len();
        let a = self.trajectories.len();
        if n == 0 || a == 0 || self.latents.is_empty() {
            return Err(Error::InvalidWorld("inputs, latents and trajectories must be nonempty".into()));
        }
        if self.latent_of.len() != n {
            return Err(Error::InvalidWorld("latent_of must cover every input".into()));
        }
        if self.joint.dim() != (n, a) {
            return Err(Error::InvalidWorld(format!(
                "joint table is {:?}, expected ({n}, {a})",
                self.joint.dim()
            )));
        }
        if self.joint.iter().any(|&p| !(p >= 0.0) || !p.is_finite()) {
            return Err(Error::InvalidWorld("joint table must be nonnegative and finite".into()));
        }
        let total: f64 = self.joint.sum();
        if (total - 1.0).abs() > 1e-9 {
            return Err(Error::InvalidWorld(format!("joint table sums to {total}, expected 1")));
        }
        let mut latent_seen = vec![false; self.latents.len()];
        for (i, &l) in self.latent_of.iter().enumerate() {
            if l >= self.latents.len() {
                return Err(Error::InvalidWorld(format!("input {i} maps to unknown latent {l}")));
            }
            latent_seen[l] = true;
            if self.joint.row(i).sum() <= 0.0 {
                return Err(Error::InvalidWorld(format!(
                    "input `{}` has zero marginal probability",
                    self.inputs[i]
                )));
            }
        }
        if !latent_seen.iter().all(|&s| s) {
            return Err(Error::InvalidWorld("every latent id must cover some input".into()));
        }
        Ok(())
    }

    pub fn n_inputs(&self) -> usize {
        self.inputs.len()
    }

    pub fn n_latents(&self) -> usize {
        self.latents.len()
    }
}

/// A distribution over trajectory ids.
#[derive(Clone, Debug, PartialEq)]
pub struct ActionLaw(Vec<f64>);

impl ActionLaw {
    pub fn new(probs: Vec<f64>) -> Result<Self> {
        if probs.is_empty() || probs.iter().any(|&p| !(p >= 0.0) || !p.is_finite()) {
            return Err(Error::InvalidWorld("law must be nonnegative and nonempty".into()));
        }
        let total: f64 = probs.iter().sum();
        if (total - 1.0).abs() > 1e-12 {
            return Err(Error::InvalidWorld(format!("law sums to {total}, expected 1 within 1e-12")));
        }
        Ok(ActionLaw(probs))
    }

    pub fn probs(&self) -> &[f64] {
        &self.0
    }

    /// Total-variation distance `½ Σ |p − q|`.
    pub fn tv_distance(&self, other: &ActionLaw) -> f64 {
        0.5 * self
            .0
            .iter()
            .zip(&other.0)
            .map(|(p, q)| (p - q).abs())
            .sum::<f64>()
    }
}

/// Bayes-optimal trajectory law per latent: `P(A | latent)`.
///
/// For proper scoring losses the minimizer of the expected loss over
/// distributions is the conditional law itself, so no numeric optimization
/// is involved.
pub fn bayes_law(world: &DiscreteWorld) -> Result<Vec<ActionLaw>> {
    world.validate()?;
    let n_lat = world.n_latents();
    let n_act = world.trajectories.len();
    let mut mass = vec![0.0f64; n_lat];
    let mut cond = vec![vec![0.0f64; n_act]; n_lat];
    for (i, &l) in world.latent_of.iter().enumerate() {
        for a in 0..n_act {
            cond[l][a] += world.joint[[i, a]];
        }
        mass[l] += world.joint.row(i).sum();
    }
    let mut laws = Vec::with_capacity(n_lat);
    for (l, m) in mass.iter().enumerate() {
        if *m <= 0.0 {
            return Err(Error::InvalidWorld(format!(
                "latent `{}` has zero mass",
                world.latents[l]
            )));
        }
        let probs: Vec<f64> = cond[l].iter().map(|p| p / m).collect();
        // Conditioning can leave the sum a few ulps off 1; renormalisation
        // here would hide table errors, so only the tolerance check guards it.
        laws.push(ActionLaw::new(probs)?);
    }
    Ok(laws)
}

/// Partition of latent indices into classes `0..n_classes`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Partition {
    class_of: Vec<usize>,
    n_classes: usize,
}

impl Partition {
    pub fn new(class_of: Vec<usize>) -> Result<Self> {
        if class_of.is_empty() {
            return Err(Error::InvalidArgument("partition must cover at least one latent".into()));
        }
        let n_classes = class_of.iter().max().unwrap() + 1;
        let mut seen = vec![false; n_classes];
        for &c in &class_of {
            seen[c] = true;
        }
        if !seen.iter().all(|&s| s) {
            return Err(Error::InvalidArgument("partition classes must be contiguous and nonempty".into()));
        }
        Ok(Partition { class_of, n_classes })
    }

    pub fn class_of(&self, latent: usize) -> usize {
        self.class_of[latent]
    }

    pub fn n_classes(&self) -> usize {
        self.n_classes
    }

    pub fn len(&self) -> usize {
        self.class_of.len()
    }

    pub fn is_empty(&self) -> bool {
        self.class_of.is_empty()
    }

    pub fn classes(&self) -> Vec<Vec<usize>> {
        let mut out = vec![Vec::new(); self.n_classes];
        for (latent, &c) in self.class_of.iter().enumerate() {
            out[c].push(latent);
        }
        out
    }

    /// True iff every class of `self` lies inside one class of `other`
    /// ("may split but not merge").
    pub fn refines(&self, other: &Partition) -> bool {
        if self.class_of.len() != other.class_of.len() {
            return false;
        }
        let mut target: Vec<Option<usize>> = vec![None; self.n_classes];
        for (latent, &c) in self.class_of.iter().enumerate() {
            match target[c] {
                None => target[c] = Some(other.class_of[latent]),
                Some(t) => {
                    if t != other.class_of[latent] {
                        return false;
                    }
                }
            }
        }
        true
    }
}

/// Group latents whose laws agree within `tol` total variation.
///
/// Transitivity is enforced by keying on a canonical representative: each
/// probability is snapped to the `tol`-grid and classes are formed by exact
/// key match. This is an equivalence relation by construction; worlds whose
/// law differences are either ≈0 or well above `tol` are grouped exactly.
pub fn build_quotient(laws: &[ActionLaw], tol: f64) -> Result<Partition> {
    if tol < 0.0 {
        return Err(Error::InvalidArgument(format!("tolerance must be >= 0, got {tol}")));
    }
    if laws.is_empty() {
        return Err(Error::InvalidArgument("need at least one law".into()));
    }
    let key_of = |law: &ActionLaw| -> Vec<i64> {
        law.probs()
            .iter()
            .map(|&p| if tol == 0.0 { p.to_bits() as i64 } else { (p / tol).round() as i64 })
            .collect()
    };
    let mut classes: BTreeMap<Vec<i64>, usize> = BTreeMap::new();
    let mut class_of = Vec::with_capacity(laws.len());
    for law in laws {
        let key = key_of(law);
        let next = classes.len();
        let id = *classes.entry(key).or_insert(next);
        class_of.push(id);
    }
    Partition::new(class_of)
}

/// True iff within every class all laws agree within `tol` total variation,
/// i.e. a decoder defined on classes recovers each latent's law exactly.
pub fn check_sufficiency(partition: &Partition, laws: &[ActionLaw], tol: f64) -> bool {
    if partition.len() != laws.len() {
        return false;
    }
    for class in partition.classes() {
        for (i, &a) in class.iter().enumerate() {
            for &b in &class[i + 1..] {
                if laws[a].tv_distance(&laws[b]) > tol {
                    return false;
                }
            }
        }
    }
    true
}

/// True iff the partition is sufficient and merging any two classes breaks
/// sufficiency (no strictly coarser representation stays exact).
pub fn check_minimality(partition: &Partition, laws: &[ActionLaw], tol: f64) -> bool {
    if !check_sufficiency(partition, laws, tol) {
        return false;
    }
    let classes = partition.classes();
    for i in 0..classes.len() {
        for j in i + 1..classes.len() {
            // The merged class stays sufficient iff every cross pair agrees.
            let merged_ok = classes[i].iter().all(|&a| {
                classes[j].iter().all(|&b| laws[a].tv_distance(&laws[b]) <= tol)
            });
            if merged_ok {
                return false;
            }
        }
    }
    true
}

/// Finite list of trajectory predictors over a shared input universe.
#[derive(Clone, Debug)]
pub struct FunctionClass {
    predictors: Vec<BTreeMap<String, Array2<f64>>>,
}

impl FunctionClass {
    pub fn new(predictors: Vec<BTreeMap<String, Array2<f64>>>) -> Result<Self> {
        if predictors.is_empty() {
            return Err(Error::InvalidArgument("function class must be nonempty".into()));
        }
        let shape = predictors[0]
            .values()
            .next()
            .ok_or_else(|| Error::InvalidArgument("predictors must map at least one input".into()))?
            .dim();
        for p in &predictors {
            for v in p.values() {
                if v.dim() != shape {
                    return Err(Error::Shape {
                        op: "function_class",
                        detail: format!("{:?} vs {:?}", v.dim(), shape),
                    });
                }
                if !v.iter().all(|x| x.is_finite()) {
                    return Err(Error::NonFinite { op: "function_class" });
                }
            }
        }
        Ok(FunctionClass { predictors })
    }

    pub fn len(&self) -> usize {
        self.predictors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.predictors.is_empty()
    }

    /// Subclass with the first `k` predictors (for nested-pair tests).
    pub fn truncated(&self, k: usize) -> Result<Self> {
        FunctionClass::new(self.predictors[..k.min(self.predictors.len())].to_vec())
    }

    fn output(&self, pred: usize, input: &str) -> Result<&Array2<f64>> {
        self.predictors[pred]
            .get(input)
            .ok_or_else(|| Error::InvalidArgument(format!("predictor {pred} has no output for `{input}`")))
    }
}

/// Normalized trajectory inner product `⟨u, v⟩_T = (1/T) Σ_t ⟨u_t, v_t⟩`.
pub fn trajectory_inner(u: &Array2<f64>, v: &Array2<f64>) -> f64 {
    let t = u.nrows() as f64;
    u.iter().zip(v.iter()).map(|(a, b)| a * b).sum::<f64>() / t
}

/// Normalized trajectory norm `‖v‖_T = √⟨v, v⟩_T`.
pub fn trajectory_norm(v: &Array2<f64>) -> f64 {
    trajectory_inner(v, v).sqrt()
}

/// Per-draw supremum of the Rademacher correlation, exposed so that
/// inclusion monotonicity can be asserted draw by draw.
pub fn complexity_draw_sup(
    fc: &FunctionClass,
    inputs: &[String],
    signs: &[Array2<f64>],
) -> Result<f64> {
    let n = inputs.len() as f64;
    let mut sup = f64::NEG_INFINITY;
    for pred in 0..fc.len() {
        let mut acc = 0.0;
        for (i, input) in inputs.iter().enumerate() {
            acc += trajectory_inner(&signs[i], fc.output(pred, input)?);
        }
        sup = sup.max(acc / n);
    }
    Ok(sup)
}

fn rademacher_signs(rng: &mut ChaCha8Rng, n: usize, t: usize, d: usize) -> Vec<Array2<f64>> {
    (0..n)
        .map(|_| Array2::from_shape_fn((t, d), |_| if rng.gen::<bool>() { 1.0 } else { -1.0 }))
        .collect()
}

/// Monte-Carlo action-sensitive complexity:
/// `√T · E_σ[ sup_f (1/n) Σ_i ⟨σ_i, f(x_i)⟩_T ]`.
///
/// Deterministic per seed; draw `k` uses the master ChaCha stream `k`, so
/// nested classes see identical sign draws for the same seed.
pub fn estimate_action_complexity(
    fc: &FunctionClass,
    inputs: &[String],
    n_draws: usize,
    seed: u64,
) -> Result<f64> {
    if n_draws < 1 {
        return Err(Error::InvalidArgument("n_draws must be >= 1".into()));
    }
    if inputs.is_empty() {
        return Err(Error::InvalidArgument("need at least one input".into()));
    }
    let (t, d) = fc.output(0, &inputs[0])?.dim();
    let mut acc = 0.0;
    for draw in 0..n_draws {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(draw as u64);
        let signs = rademacher_signs(&mut rng, inputs.len(), t, d);
        acc += complexity_draw_sup(fc, inputs, &signs)?;
    }
    Ok((t as f64).sqrt() * acc / n_draws as f64)
}

/// Exact pairwise collision check after canonical byte serialization
/// (−0.0 normalised to 0.0). Returns the colliding id pairs.
pub fn check_injectivity<I, F>(encoder: F, inputs: &[I]) -> Result<Vec<(String, String)>>
where
    I: std::fmt::Display,
    F: Fn(&I) -> Result<Array2<f64>>,
{
    let mut seen: BTreeMap<Vec<u8>, String> = BTreeMap::new();
    let mut collisions = Vec::new();
    for input in inputs {
        let enc = encoder(input)?;
        if !enc.iter().all(|v| v.is_finite()) {
            return Err(Error::NonFinite { op: "check_injectivity" });
        }
        let mut bytes = Vec::with_capacity(16 + enc.len() * 8);
        bytes.extend_from_slice(&(enc.nrows() as u64).to_le_bytes());
        bytes.extend_from_slice(&(enc.ncols() as u64).to_le_bytes());
        for &v in enc.iter() {
            let canonical = if v == 0.0 { 0.0f64 } else { v };
            bytes.extend_from_slice(&canonical.to_le_bytes());
        }
        let id = input.to_string();
        if let Some(first) = seen.get(&bytes) {
            collisions.push((first.clone(), id));
        } else {
            seen.insert(bytes, id);
        }
    }
    Ok(collisions)
}

// ---------------------------------------------------------------------------
// World files
// ---------------------------------------------------------------------------

/// Serialize a world to the plain text format consumed by `quotient-verify`.
///
/// ```text
/// # optional comments
/// version 1
/// inputs x1 x2 ...
/// latents x1=h1 x2=h1 ...
/// trajectories a1 a2 ...
/// joint
/// <input> <trajectory> <probability>   # one entry per line, zeros omitted
/// end
/// ```
pub fn world_to_string(world: &DiscreteWorld) -> String {
    let mut out = String::new();
    out.push_str("version 1\n");
    out.push_str("inputs");
    for i in &world.inputs {
        out.push(' ');
        out.push_str(i);
    }
    out.push('\n');
    out.push_str("latents");
    for (i, &l) in world.latent_of.iter().enumerate() {
        out.push(' ');
        out.push_str(&format!("{}={}", world.inputs[i], world.latents[l]));
    }
    out.push('\n');
    out.push_str("trajectories");
    for t in &world.trajectories {
        out.push(' ');
        out.push_str(t);
    }
    out.push('\n');
    out.push_str("joint\n");
    for i in 0..world.n_inputs() {
        for a in 0..world.trajectories.len() {
            let p = world.joint[[i, a]];
            if p > 0.0 {
                out.push_str(&format!(
                    "{} {} {:.17e}\n",
                    world.inputs[i], world.trajectories[a], p
                ));
            }
        }
    }
    out.push_str("end\n");
    out
}

/// Parse the [`world_to_string`] format.
pub fn world_from_str(text: &str) -> Result<DiscreteWorld> {
    let mut lines = text
        .lines()
        .map(str::trim)
        .filter(|l| !l.is_empty() && !l.starts_with('#'));
    let bad = |msg: &str| Error::CorruptFile(format!("world file: {msg}"));

    let version = lines.next().ok_or_else(|| bad("missing version line"))?;
    match version.strip_prefix("version ") {
        Some("1") => {}
        Some(other) => {
            return Err(Error::VersionMismatch {
                got: other.trim().parse().unwrap_or(0),
                expected: 1,
            })
        }
        None => return Err(bad("first line must be `version 1`")),
    }

    let inputs_line = lines.next().ok_or_else(|| bad("missing inputs line"))?;
    let inputs: Vec<String> = inputs_line
        .strip_prefix("inputs")
        .ok_or_else(|| bad("expected `inputs ...`"))?
        .split_whitespace()
        .map(String::from)
        .collect();

    let latents_line = lines.next().ok_or_else(|| bad("missing latents line"))?;
    let mut latent_names: Vec<String> = Vec::new();
    let mut latent_of = vec![usize::MAX; inputs.len()];
    for pair in latents_line
        .strip_prefix("latents")
        .ok_or_else(|| bad("expected `latents ...`"))?
        .split_whitespace()
    {
        let (inp, lat) = pair
            .split_once('=')
            .ok_or_else(|| bad(&format!("latent entry `{pair}` is not input=latent")))?;
        let i = inputs
            .iter()
            .position(|x| x == inp)
            .ok_or_else(|| bad(&format!("latent entry references unknown input `{inp}`")))?;
        let l = match latent_names.iter().position(|x| x == lat) {
            Some(l) => l,
            None => {
                latent_names.push(lat.to_string());
                latent_names.len() - 1
            }
        };
        latent_of[i] = l;
    }
    if latent_of.iter().any(|&l| l == usize::MAX) {
        return Err(bad("every input needs a latent assignment"));
    }

    let traj_line = lines.next().ok_or_else(|| bad("missing trajectories line"))?;
    let trajectories: Vec<String> = traj_line
        .strip_prefix("trajectories")
        .ok_or_else(|| bad("expected `trajectories ...`"))?
        .split_whitespace()
        .map(String::from)
        .collect();

    match lines.next() {
        Some("joint") => {}
        _ => return Err(bad("expected `joint` section")),
    }
    let mut joint = Array2::zeros((inputs.len(), trajectories.len()));
    let mut closed = false;
    for line in lines {
        if line == "end" {
            closed = true;
            break;
        }
        let mut parts = line.split_whitespace();
        let (inp, traj, prob) = match (parts.next(), parts.next(), parts.next(), parts.next()) {
            (Some(i), Some(t), Some(p), None) => (i, t, p),
            _ => return Err(bad(&format!("malformed joint entry `{line}`"))),
        };
        let i = inputs
            .iter()
            .position(|x| x == inp)
            .ok_or_else(|| bad(&format!("joint entry references unknown input `{inp}`")))?;
        let a = trajectories
            .iter()
            .position(|x| x == traj)
            .ok_or_else(|| bad(&format!("joint entry references unknown trajectory `{traj}`")))?;
        let p: f64 = prob
            .parse()
            .map_err(|_| bad(&format!("bad probability `{prob}`")))?;
        joint[[i, a]] = p;
    }
    if !closed {
        return Err(bad("missing `end` terminator (truncated file?)"));
    }
    DiscreteWorld::new(inputs, latent_names, latent_of, trajectories, joint)
}

pub fn write_world(path: &std::path::Path, world: &DiscreteWorld) -> Result<()> {
    std::fs::write(path, world_to_string(world))?;
    Ok(())
}

pub fn read_world(path: &std::path::Path) -> Result<DiscreteWorld> {
    let text = std::fs::read_to_string(path)?;
    world_from_str(&text)
}

// ---------------------------------------------------------------------------
// Random-world generators (shared by tests of Theorem-level properties)
// ---------------------------------------------------------------------------

/// Build a random world with |X| ≤ `max_inputs`, |A| ≤ `max_trajectories`
/// and planted law-sharing structure: latents are assigned laws from a pool,
/// so the ground-truth quotient groups latents by pool index.
pub fn random_world(seed: u64, max_inputs: usize, max_trajectories: usize) -> DiscreteWorld {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n_inputs = rng.gen_range(2..=max_inputs.max(2));
    let n_traj = rng.gen_range(2..=max_trajectories.max(2));
    // Latents: between 1 and n_inputs, each input assigned uniformly.
    let n_latents = rng.gen_range(1..=n_inputs);
    let mut latent_of: Vec<usize> = (0..n_latents).collect(); // cover every latent
    for _ in n_latents..n_inputs {
        latent_of.push(rng.gen_range(0..n_latents));
    }
    // Law pool smaller than the latent count so some latents share laws.
    let n_pool = rng.gen_range(1..=n_latents);
    let pool: Vec<Vec<f64>> = (0..n_pool)
        .map(|_| {
            let raw: Vec<f64> = (0..n_traj).map(|_| rng.gen_range(0.05..1.0)).collect();
            let s: f64 = raw.iter().sum();
            raw.into_iter().map(|p| p / s).collect()
        })
        .collect();
    let mut law_of_latent: Vec<usize> = (0..n_pool).collect();
    for _ in n_pool..n_latents {
        law_of_latent.push(rng.gen_range(0..n_pool));
    }
    // Input marginals and the joint table P(x, a) = P(x)·law(latent(x))(a).
    let raw_marg: Vec<f64> = (0..n_inputs).map(|_| rng.gen_range(0.2..1.0)).collect();
    let marg_sum: f64 = raw_marg.iter().sum();
    let mut joint = Array2::zeros((n_inputs, n_traj));
    for i in 0..n_inputs {
        let px = raw_marg[i] / marg_sum;
        let law = &pool[law_of_latent[latent_of[i]]];
        for a in 0..n_traj {
            joint[[i, a]] = px * law[a];
        }
    }
    DiscreteWorld {
        inputs: (0..n_inputs).map(|i| format!("x{i}")).collect(),
        latents: (0..n_latents).map(|l| format!("h{l}")).collect(),
        latent_of,
        trajectories: (0..n_traj).map(|a| format!("a{a}")).collect(),
        joint,
    }
}

/// A random exact action-sufficient representation: a refinement of the
/// quotient obtained by randomly splitting its classes.
pub fn random_sufficient_refinement(
    quotient: &Partition,
    seed: u64,
) -> Partition {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut next = 0usize;
    let mut class_of = vec![0usize; quotient.len()];
    for class in quotient.classes() {
        // Split this class into 1..=|class| random buckets.
        let buckets = rng.gen_range(1..=class.len());
        let ids: Vec<usize> = (0..buckets).map(|k| next + k).collect();
        // Guarantee nonempty buckets: first `buckets` members spread out.
        for (k, &latent) in class.iter().enumerate() {
            let b = if k < buckets { k } else { rng.gen_range(0..buckets) };
            class_of[latent] = ids[b];
        }
        next += buckets;
    }
    Partition::new(class_of).expect("refinement is a valid partition")
}
