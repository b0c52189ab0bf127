//! Multi-head self-attention with adaptive spatial-attention dropout (ASAD).
//!
//! For every head the planner looks at the detached attention probabilities
//! `Â = softmax_row(q kᵀ / √d)` and
//!
//! 1. scores each query by its temporal matching probability
//!    `f_tem(i) = max_{j in other frame} Â[i, j]`,
//! 2. spreads `f_tem(i)` over the query's within-frame keys in proportion to
//!    `Â[i, j]`, giving the dropout-probability matrix `W` (self, temporal-self
//!    and between-frame entries stay zero),
//! 3. draws `N_d = floor(P · Σ_i |Ω_s(i)|)` distinct entries of `W` without
//!    replacement, with probability proportional to `W`, and
//! 4. sets the drawn scores to `-inf` before the recorded softmax.
//!
//! Planning never records on the tape, so no gradient flows through `W`.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::{softmax_rows, Real, Tensor};
use crate::tokenizer::FrameLayout;

/// How attention elements are suppressed during a forward pass.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum DropMode {
    /// Adaptive spatial-attention dropout.
    #[default]
    Asad,
    /// `N_d` uniformly drawn non-self positions, within or between frames.
    Random,
    /// Plain multi-head attention.
    None,
}

impl std::str::FromStr for DropMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "asad" => Ok(DropMode::Asad),
            "random" => Ok(DropMode::Random),
            "none" => Ok(DropMode::None),
            other => Err(Error::rejected(format!("unknown dropout mode {other:?}"))),
        }
    }
}

/// Frame membership of each row of an attention matrix. Rows may be a
/// subset of the full two-frame sequence (encoder inputs after masking).
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SeqLayout {
    frame: Vec<u8>,
    twin: Vec<Option<usize>>,
    frame_sizes: [usize; 2],
}

impl SeqLayout {
    /// Layout for rows holding `tokens` of the two-frame sequence.
    pub fn from_tokens(layout: &FrameLayout, tokens: &[usize]) -> Self {
        let mut row_of = vec![usize::MAX; layout.total_tokens];
        for (r, &t) in tokens.iter().enumerate() {
            row_of[t] = r;
        }
        let frame: Vec<u8> = tokens.iter().map(|&t| layout.frame_of(t) as u8).collect();
        let twin = tokens
            .iter()
            .map(|&t| Some(row_of[layout.temporal_twin(t)]).filter(|&r| r != usize::MAX))
            .collect();
        let in_first = frame.iter().filter(|&&f| f == 0).count();
        Self { frame, twin, frame_sizes: [in_first, tokens.len() - in_first] }
    }

    pub fn full(layout: &FrameLayout) -> Self {
        let tokens: Vec<usize> = (0..layout.total_tokens).collect();
        Self::from_tokens(layout, &tokens)
    }

    pub fn len(&self) -> usize {
        self.frame.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frame.is_empty()
    }

    #[inline]
    pub fn same_frame(&self, i: usize, j: usize) -> bool {
        self.frame[i] == self.frame[j]
    }

    #[inline]
    pub fn twin(&self, i: usize) -> Option<usize> {
        self.twin[i]
    }

    /// Whether `(i, j)` may be dropped by ASAD: same frame, not the query itself.
    #[inline]
    pub fn is_spatial(&self, i: usize, j: usize) -> bool {
        i != j && self.same_frame(i, j)
    }

    /// Number of within-frame, non-self elements: `N (N/2 - 1)` for a full
    /// balanced sequence.
    pub fn spatial_elements(&self) -> usize {
        self.frame_sizes.iter().map(|&n| n * n.saturating_sub(1)).sum()
    }
}

impl From<&FrameLayout> for SeqLayout {
    fn from(layout: &FrameLayout) -> Self {
        SeqLayout::full(layout)
    }
}

/// `floor(x)` that tolerates representation error just below an integer.
pub(crate) fn floor_count(x: f64) -> usize {
    (x + 1e-9).floor().max(0.0) as usize
}

/// Dropout budget `N_d = floor(P · Σ_i |Ω_s(i)|)`.
pub fn drop_budget(seq: &SeqLayout, ratio: f64) -> usize {
    floor_count(ratio * seq.spatial_elements() as f64)
}

/// Budget for a full `N`-token sequence: `floor(P · N (N/2 - 1))`.
pub fn drop_budget_for(total_tokens: usize, ratio: f64) -> usize {
    floor_count(ratio * (total_tokens * (total_tokens / 2).saturating_sub(1)) as f64)
}

/// Attention weights of one layer, borrowed from a parameter store.
#[derive(Clone, Copy, Debug)]
pub struct AttentionWeights<'a, T: Real> {
    pub qkv_w: &'a Tensor<T>,
    pub qkv_b: &'a Tensor<T>,
    pub out_w: &'a Tensor<T>,
    pub out_b: &'a Tensor<T>,
    pub heads: usize,
}

/// Pre-softmax scores and row-softmaxed probabilities of one head.
#[derive(Clone, Debug)]
pub struct AttentionMatrix<T: Real> {
    pub scores: Tensor<T>,
    pub probs: Tensor<T>,
}

fn head_width(total: usize, heads: usize) -> Result<usize> {
    if heads == 0 || !total.is_multiple_of(heads) {
        return Err(Error::rejected(format!("width {total} not divisible by {heads} heads")));
    }
    Ok(total / heads)
}

/// Scores `q kᵀ / √d` and probabilities for one head, outside any tape.
pub fn attention_matrix<T: Real>(z: &Tensor<T>, w: &AttentionWeights<'_, T>, head: usize) -> Result<AttentionMatrix<T>> {
    let width = w.qkv_w.cols() / 3;
    let dk = head_width(width, w.heads)?;
    if head >= w.heads {
        return Err(Error::rejected(format!("head {head} out of range {}", w.heads)));
    }
    if !z.all_finite() {
        return Err(Error::NonFinite { op: "attention_matrix input" });
    }
    let mut qkv = z.matmul(w.qkv_w)?;
    for r in 0..qkv.rows() {
        for (v, &b) in qkv.row_mut(r).iter_mut().zip(w.qkv_b.data()) {
            *v = *v + b;
        }
    }
    let q = qkv.slice_cols(head * dk, dk)?;
    let k = qkv.slice_cols(width + head * dk, dk)?;
    let scale = T::one() / T::c(dk as f64).sqrt();
    let scores = q.matmul_nt(&k)?.map(|v| v * scale);
    let probs = softmax_rows(&scores)?;
    Ok(AttentionMatrix { scores, probs })
}

/// `f_tem(i)`: the largest probability query `i` puts on any other-frame key.
pub fn temporal_match_prob<T: Real>(probs: &Tensor<T>, seq: &SeqLayout) -> Vec<T> {
    let n = probs.cols();
    (0..probs.rows())
        .map(|i| {
            let row = probs.row(i);
            (0..n).filter(|&j| !seq.same_frame(i, j)).map(|j| row[j]).fold(T::zero(), T::max)
        })
        .collect()
}

/// Sum of the within-frame, non-self probabilities of row `i`.
fn spatial_mass<T: Real>(row: &[T], i: usize, seq: &SeqLayout) -> T {
    row.iter()
        .enumerate()
        .filter(|&(j, _)| seq.is_spatial(i, j))
        .fold(T::zero(), |acc, (_, &v)| acc + v)
}

/// Dropout-probability matrix
/// `W[i, j] = f_tem(i) · Â[i, j] / Σ_{j' in Ω_s(i)} Â[i, j']` on within-frame,
/// non-self entries and zero elsewhere.
pub fn dropout_prob_matrix<T: Real>(probs: &Tensor<T>, f_tem: &[T], seq: &SeqLayout) -> Result<Tensor<T>> {
    let (n, m) = probs.matrix_dims("dropout_prob_matrix")?;
    if n != m || n != seq.len() || f_tem.len() != n {
        return Err(Error::rejected("dropout_prob_matrix inputs disagree on sequence length"));
    }
    let mut w = Tensor::zeros(&[n, n]);
    for i in 0..n {
        let row = probs.row(i);
        let mass = spatial_mass(row, i, seq);
        let has_spatial = (0..n).any(|j| seq.is_spatial(i, j));
        if !has_spatial {
            continue;
        }
        if mass <= T::zero() {
            return Err(Error::Internal(format!("row {i} has zero within-frame attention mass")));
        }
        let coef = f_tem[i] / mass;
        let out = w.row_mut(i);
        for j in 0..n {
            if seq.is_spatial(i, j) {
                out[j] = coef * row[j];
            }
        }
        if let Some(t) = seq.twin(i) {
            out[t] = T::zero();
        }
    }
    Ok(w)
}

/// Draws `count` distinct indices with probability proportional to `weights`,
/// sequentially without replacement. Zero-weight indices are never drawn.
///
/// Uses exponential keys `ln(u) / w`: the `count` largest keys are distributed
/// exactly as `count` successive weighted draws without replacement.
pub fn weighted_sample_without_replacement(weights: &[f64], count: usize, rng: &mut impl Rng) -> Result<Vec<usize>> {
    if count == 0 {
        return Ok(Vec::new());
    }
    let mut keyed: Vec<(f64, usize)> = Vec::with_capacity(weights.len());
    for (i, &w) in weights.iter().enumerate() {
        if w.is_nan() || w < 0.0 {
            return Err(Error::rejected(format!("weight {w} at {i} is not a probability mass")));
        }
        if w > 0.0 {
            let u: f64 = 1.0 - rng.random::<f64>();
            keyed.push((u.ln() / w, i));
        }
    }
    if keyed.len() < count {
        return Err(Error::rejected(format!(
            "cannot draw {count} distinct elements from a support of {}",
            keyed.len()
        )));
    }
    if count < keyed.len() {
        keyed.select_nth_unstable_by(count - 1, |a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
        keyed.truncate(count);
    }
    let mut picked: Vec<usize> = keyed.into_iter().map(|(_, i)| i).collect();
    picked.sort_unstable();
    Ok(picked)
}

/// A sampled drop plan for one head.
#[derive(Clone, Debug)]
pub struct DropPlan<T: Real> {
    pub weights: Tensor<T>,
    pub ratio: f64,
    pub budget: usize,
    /// Flat row-major indices `i * N + j` of the dropped elements, sorted.
    pub dropped: Vec<usize>,
}

/// Samples `N_d = floor(P · N (N/2 - 1))` entries of `W` for a full `N`-token
/// sequence.
pub fn sample_drop_indices<T: Real>(weights: &Tensor<T>, ratio: f64, rng: &mut impl Rng) -> Result<DropPlan<T>> {
    if !(0.0..1.0).contains(&ratio) {
        return Err(Error::rejected(format!("dropout ratio {ratio} outside [0, 1)")));
    }
    let (n, _) = weights.matrix_dims("sample_drop_indices")?;
    let seq = SeqLayout::full(&FrameLayout::new(1, n / 2));
    plan_from_weights(weights.clone(), &seq, ratio, rng)
}

/// Uniformly draws `count` distinct off-diagonal positions of an `n × n` matrix.
pub fn sample_random_positions(n: usize, count: usize, rng: &mut impl Rng) -> Result<Vec<usize>> {
    let candidates = n * n.saturating_sub(1);
    if count > candidates {
        return Err(Error::rejected(format!("cannot drop {count} of {candidates} off-diagonal positions")));
    }
    let mut out: Vec<usize> = rand::seq::index::sample(rng, candidates, count)
        .into_iter()
        .map(|k| {
            let (i, j) = (k / (n - 1), k % (n - 1));
            let j = if j >= i { j + 1 } else { j };
            i * n + j
        })
        .collect();
    out.sort_unstable();
    Ok(out)
}

/// Attention parameters of one layer on a tape.
#[derive(Clone, Copy, Debug)]
pub struct AttentionVars {
    pub qkv_w: Var,
    pub qkv_b: Var,
    pub out_w: Var,
    pub out_b: Var,
    pub heads: usize,
}

/// Where the suppressed positions of each head come from.
pub enum PlanSource<'r, R: Rng> {
    /// No suppression.
    Off,
    /// Fresh plans per head.
    Sample { mode: DropMode, ratio: f64, rng: &'r mut R },
    /// Previously recorded plans, one list of flat indices per head.
    Replay(&'r [Vec<usize>]),
}

/// What was observed for one head during a forward pass.
#[derive(Clone, Debug, Default)]
pub struct HeadTrace {
    pub dropped: Vec<usize>,
    /// Mean over query rows of the probability mass on same-frame keys
    /// (including the query itself), measured before suppression.
    pub within_mass: f64,
    pub between_mass: f64,
    /// Temporal matching probability per row, when requested.
    pub f_tem: Option<Vec<f64>>,
    /// Largest post-softmax probability at a dropped position.
    pub max_dropped_prob: f64,
    /// Largest `|Σ_j p[i, j] - 1|` over rows after suppression.
    pub max_row_error: f64,
}

#[derive(Clone, Copy, Debug, Default)]
pub struct TraceRequest {
    pub masses: bool,
    pub f_tem: bool,
    /// Check the softmax after suppression.
    pub suppression: bool,
}

fn frame_masses<T: Real>(probs: &Tensor<T>, seq: &SeqLayout) -> (f64, f64) {
    let n = probs.rows();
    let mut within = 0.0;
    let mut between = 0.0;
    for i in 0..n {
        for (j, &p) in probs.row(i).iter().enumerate() {
            if seq.same_frame(i, j) {
                within += p.f64();
            } else {
                between += p.f64();
            }
        }
    }
    (within / n as f64, between / n as f64)
}

/// Draws the drop set from `W` with the budget implied by `seq`.
fn plan_from_weights<T: Real>(weights: Tensor<T>, seq: &SeqLayout, ratio: f64, rng: &mut impl Rng) -> Result<DropPlan<T>> {
    let budget = drop_budget(seq, ratio);
    let flat: Vec<f64> = weights.data().iter().map(|v| v.f64()).collect();
    let dropped = weighted_sample_without_replacement(&flat, budget, rng)?;
    Ok(DropPlan { weights, ratio, budget, dropped })
}

/// ASAD plan for one head from its detached scores. Also returns the
/// probabilities and `f_tem` it planned from.
pub fn plan_asad<T: Real>(scores: &Tensor<T>, seq: &SeqLayout, ratio: f64, rng: &mut impl Rng) -> Result<(DropPlan<T>, Tensor<T>, Vec<T>)> {
    let probs = softmax_rows(scores)?;
    let f_tem = temporal_match_prob(&probs, seq);
    let weights = dropout_prob_matrix(&probs, &f_tem, seq)?;
    let plan = plan_from_weights(weights, seq, ratio, rng)?;
    Ok((plan, probs, f_tem))
}

/// Multi-head self-attention over `z` (rows laid out per `seq`), with the
/// suppression chosen by `plan`. Returns the output and one trace per head.
pub fn masked_self_attention<T: Real, R: Rng>(
    tape: &mut Tape<'_, T>,
    z: Var,
    vars: &AttentionVars,
    seq: &SeqLayout,
    plan: &mut PlanSource<'_, R>,
    request: TraceRequest,
) -> Result<(Var, Vec<HeadTrace>)> {
    let width = tape.value(vars.qkv_w).cols() / 3;
    let dk = head_width(width, vars.heads)?;
    let n = tape.value(z).rows();
    if n != seq.len() {
        return Err(Error::rejected(format!("sequence of {n} rows but layout of {}", seq.len())));
    }
    let qkv = tape.matmul(z, vars.qkv_w)?;
    let qkv = tape.add_row_bias(qkv, vars.qkv_b)?;
    let scale = T::one() / T::c(dk as f64).sqrt();

    let mut outputs = Vec::with_capacity(vars.heads);
    let mut traces = Vec::with_capacity(vars.heads);
    for h in 0..vars.heads {
        let q = tape.slice_cols(qkv, h * dk, dk)?;
        let k = tape.slice_cols(qkv, width + h * dk, dk)?;
        let v = tape.slice_cols(qkv, 2 * width + h * dk, dk)?;
        let raw = tape.matmul_nt(q, k)?;
        let scores = tape.scale(raw, scale)?;

        let mut trace = HeadTrace::default();
        let mut detached: Option<(Tensor<T>, Vec<T>)> = None;
        let dropped = match plan {
            PlanSource::Off => Vec::new(),
            PlanSource::Replay(plans) => plans
                .get(h)
                .cloned()
                .ok_or_else(|| Error::rejected(format!("no recorded plan for head {h}")))?,
            PlanSource::Sample { mode: DropMode::None, .. } => Vec::new(),
            PlanSource::Sample { mode: DropMode::Asad, ratio, rng } => {
                let (plan, probs, f_tem) = plan_asad(tape.value(scores), seq, *ratio, &mut **rng)?;
                detached = Some((probs, f_tem));
                plan.dropped
            }
            PlanSource::Sample { mode: DropMode::Random, ratio, rng } => {
                sample_random_positions(n, drop_budget(seq, *ratio), &mut **rng)?
            }
        };

        let suppressed = if dropped.is_empty() { scores } else { tape.suppress(scores, dropped.clone())? };
        let probs = tape.softmax_rows(suppressed)?;

        if request.masses || request.f_tem {
            let (p, f) = match detached {
                Some(pair) => pair,
                None if dropped.is_empty() => {
                    let p = tape.value(probs).clone();
                    let f = if request.f_tem { temporal_match_prob(&p, seq) } else { Vec::new() };
                    (p, f)
                }
                None => {
                    let p = softmax_rows(tape.value(scores))?;
                    let f = if request.f_tem { temporal_match_prob(&p, seq) } else { Vec::new() };
                    (p, f)
                }
            };
            if request.masses {
                let (w, b) = frame_masses(&p, seq);
                trace.within_mass = w;
                trace.between_mass = b;
            }
            if request.f_tem {
                trace.f_tem = Some(f.iter().map(|v| v.f64()).collect());
            }
        }
        if request.suppression {
            let p = tape.value(probs);
            trace.max_dropped_prob = dropped.iter().map(|&k| p.data()[k].f64()).fold(0.0, f64::max);
            trace.max_row_error = (0..p.rows())
                .map(|i| (p.row(i).iter().map(|v| v.f64()).sum::<f64>() - 1.0).abs())
                .fold(0.0, f64::max);
        }
        trace.dropped = dropped;
        traces.push(trace);
        outputs.push(tape.matmul(probs, v)?);
    }
    let merged = tape.concat_cols(&outputs)?;
    let projected = tape.matmul(merged, vars.out_w)?;
    Ok((tape.add_row_bias(projected, vars.out_b)?, traces))
}
