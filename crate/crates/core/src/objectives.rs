//! Identity losses (NT-Xent, BYOL-style, ReLIC-style), the manipulation
//! loss, their weighted sum, and numeric forms of the KL decomposition and
//! the instance-discrimination upper bound.
//!
//! Batches hold `2B` views; `pos[i]` is the row of view `i`'s positive.

use serde::{Deserialize, Serialize};

use crate::actions::BinningSpec;
use crate::error::{Error, Result};
use crate::gradcore::{Graph, Var};
use crate::tensor::Tensor;

/// Small constant of the BYOL-style identity model.
pub const BYOL_EPS: f64 = 1e-6;

/// Scalar summary of one objective evaluation.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub total: f64,
    pub id_loss: f64,
    pub manip_loss: f64,
    pub reg_loss: f64,
    pub id_accuracy: f64,
    pub manip_accuracy: f64,
    /// Set when every manipulation pair was masked.
    pub manip_empty: bool,
}

/// `pos[i] = (i + B) mod 2B`.
pub fn positives(two_b: usize) -> Vec<usize> {
    let b = two_b / 2;
    (0..two_b).map(|i| (i + b) % two_b).collect()
}

/// Checks that `pos` is an involution without fixed points.
pub fn check_pairs(pos: &[usize]) -> Result<()> {
    for (i, &p) in pos.iter().enumerate() {
        if p >= pos.len() || p == i || pos[p] != i {
            return Err(Error::InvalidArgument(format!("anchor {i} has no valid positive")));
        }
    }
    Ok(())
}

fn diag_mask(n: usize) -> Vec<bool> {
    (0..n * n).map(|k| k / n != k % n).collect()
}

/// `−log softmax(s/τ)[positive]` over one row of candidate similarities.
pub fn contrastive_nll(similarities: &[f64], positive: usize, tau: f64) -> f64 {
    let mx = similarities.iter().fold(f64::NEG_INFINITY, |m, s| m.max(s / tau));
    let lse = mx + similarities.iter().map(|s| (s / tau - mx).exp()).sum::<f64>().ln();
    lse - similarities[positive] / tau
}

/// Fraction of rows whose positive strictly beats every other candidate.
fn identification_accuracy(sims: &Tensor, pos: &[usize]) -> f64 {
    let n = pos.len();
    let hits = (0..n)
        .filter(|&i| {
            let row = sims.row(i);
            (0..n).filter(|&j| j != i && j != pos[i]).all(|j| row[j] < row[pos[i]])
        })
        .count();
    hits as f64 / n.max(1) as f64
}

#[derive(Debug, Clone, Copy)]
pub struct IdOutput {
    pub loss: Var,
    pub accuracy: f64,
}

fn check_embeddings(g: &Graph, anchors: Var, candidates: Var, pos: &[usize], tau: f64) -> Result<()> {
    check_pairs(pos)?;
    if !(tau > 0.0) {
        return Err(Error::InvalidArgument(format!("temperature {tau} must be positive")));
    }
    let (a, c) = (g.shape(anchors), g.shape(candidates));
    if a.len() != 2 || a != c || a[0] != pos.len() {
        return Err(Error::InvalidArgument(format!(
            "embeddings {a:?} and {c:?} do not match {} anchors",
            pos.len()
        )));
    }
    Ok(())
}

/// Log-probabilities `log q(a_id = 0 | x_i, x_n)` over candidates `n ≠ i`.
fn candidate_log_probs(g: &mut Graph, anchors: Var, candidates: Var, tau: f64) -> Result<(Var, Var)> {
    let n = g.shape(anchors)[0];
    let sims = g.matmul_nt(anchors, candidates)?;
    let logits = g.scale(sims, 1.0 / tau);
    let lp = g.log_softmax_rows(logits, Some(diag_mask(n)))?;
    Ok((sims, lp))
}

/// NT-Xent over normalized embeddings, averaged over all `2B` anchors.
/// `candidates` may be the same node as `anchors`.
pub fn ntxent_id_loss(g: &mut Graph, anchors: Var, candidates: Var, pos: &[usize], tau: f64) -> Result<IdOutput> {
    check_embeddings(g, anchors, candidates, pos, tau)?;
    let (sims, lp) = candidate_log_probs(g, anchors, candidates, tau)?;
    let index: Vec<(usize, usize)> = pos.iter().enumerate().map(|(i, &p)| (i, p)).collect();
    let picked = g.gather(lp, &index)?;
    let m = g.mean(picked);
    let loss = g.scale(m, -1.0);
    let accuracy = identification_accuracy(g.value(sims), pos);
    Ok(IdOutput { loss, accuracy })
}

#[derive(Debug, Clone, Copy)]
pub struct RelicOutput {
    pub loss: Var,
    pub ntxent: f64,
    /// Mean per-anchor `KL(q_c1 ; q_c2)`.
    pub consistency: f64,
    pub accuracy: f64,
}

/// NT-Xent of online anchors against (target) candidates plus `α` times the
/// mean KL between each anchor's candidate distribution and that of its
/// positive, with candidates aligned through the pairing.
pub fn relic_id_loss(
    g: &mut Graph,
    anchors: Var,
    candidates: Var,
    pos: &[usize],
    tau: f64,
    alpha: f64,
) -> Result<RelicOutput> {
    if !(alpha >= 0.0) {
        return Err(Error::InvalidArgument(format!("alpha {alpha} must be non-negative")));
    }
    check_embeddings(g, anchors, candidates, pos, tau)?;
    let n = pos.len();
    let (sims, lp) = candidate_log_probs(g, anchors, candidates, tau)?;
    let index: Vec<(usize, usize)> = pos.iter().enumerate().map(|(i, &p)| (i, p)).collect();
    let picked = g.gather(lp, &index)?;
    let m = g.mean(picked);
    let nt = g.scale(m, -1.0);

    // row i of lp2 is row pos(i) of lp with columns relabelled by pos
    let lp2 = g.select(lp, pos, pos)?;
    let q1 = g.exp(lp);
    let off_diag = g.input(Tensor::from_fn(&[n, n], |k| if k / n != k % n { 1.0 } else { 0.0 }));
    let q1 = g.mul(q1, off_diag)?;
    let diff = g.sub(lp, lp2)?;
    let terms = g.mul(q1, diff)?;
    let total = g.sum(terms);
    let kl = g.scale(total, 1.0 / n as f64);
    let weighted = g.scale(kl, alpha);
    let loss = g.add(nt, weighted)?;
    Ok(RelicOutput {
        loss,
        ntxent: g.value(nt).item(),
        consistency: g.value(kl).item(),
        accuracy: identification_accuracy(g.value(sims), pos),
    })
}

/// `(1 − ε)·mean_i ‖p_i − z̃_pos(i)‖²` over normalized rows; the target side is detached.
pub fn byol_id_loss(g: &mut Graph, online: Var, target: Var, pos: &[usize]) -> Result<IdOutput> {
    check_embeddings(g, online, target, pos, 1.0)?;
    let n = pos.len();
    let cols: Vec<usize> = (0..g.shape(target)[1]).collect();
    let t = g.detach(target);
    let aligned = g.select(t, pos, &cols)?;
    let d = g.sub(online, aligned)?;
    let sq = g.square(d);
    let s = g.sum(sq);
    let loss = g.scale(s, (1.0 - BYOL_EPS) / n as f64);
    let sims = Tensor::new(vec![n, n], {
        let (o, tv) = (g.value(online), g.value(target));
        (0..n * n)
            .map(|k| o.row(k / n).iter().zip(tv.row(k % n)).map(|(a, b)| a * b).sum())
            .collect()
    })?;
    Ok(IdOutput {
        loss,
        accuracy: identification_accuracy(&sims, pos),
    })
}

#[derive(Debug, Clone, Copy)]
pub struct ManipOutput {
    pub loss: Var,
    pub accuracy: f64,
    pub empty: bool,
}

fn check_manip(g: &Graph, out: Var, rows: usize, mask: &[bool], width: usize) -> Result<()> {
    if g.shape(out) != [rows, width] || mask.len() != rows {
        return Err(Error::InvalidArgument(format!(
            "manipulation outputs {:?} with {} labels and {} mask flags, expected width {width}",
            g.shape(out),
            rows,
            mask.len()
        )));
    }
    Ok(())
}

/// Weighted mean over unmasked rows and components, or an empty marker.
fn masked_mean(g: &mut Graph, per_component: Var, mask: &[bool]) -> Result<(Var, bool)> {
    let active = mask.iter().filter(|m| **m).count();
    if active == 0 {
        return Ok((g.input(Tensor::scalar(0.0)), true));
    }
    let weights = Tensor::vector(
        mask.iter()
            .flat_map(|&m| [if m { 1.0 } else { 0.0 }; 6])
            .collect(),
    );
    let w = g.input(weights);
    let weighted = g.mul(per_component, w)?;
    let s = g.sum(weighted);
    Ok((g.scale(s, 1.0 / (6 * active) as f64), false))
}

/// Softmax cross-entropy over `K` bins for each of the 6 components.
pub fn manip_loss(g: &mut Graph, logits: Var, labels: &[[usize; 6]], mask: &[bool], k: usize) -> Result<ManipOutput> {
    let rows = labels.len();
    check_manip(g, logits, rows, mask, 6 * k)?;
    if let Some(l) = labels.iter().flatten().find(|&&l| l >= k) {
        return Err(Error::InvalidArgument(format!("label {l} outside 0..{k}")));
    }
    let flat = g.reshape(logits, &[6 * rows, k])?;
    let lp = g.log_softmax_rows(flat, None)?;
    let index: Vec<(usize, usize)> = labels
        .iter()
        .enumerate()
        .flat_map(|(r, l)| (0..6).map(move |c| (6 * r + c, l[c])))
        .collect();
    let picked = g.gather(lp, &index)?;
    let nll = g.scale(picked, -1.0);
    let (loss, empty) = masked_mean(g, nll, mask)?;
    let lv = g.value(logits);
    let predicted: Vec<[usize; 6]> = (0..rows)
        .map(|r| {
            let row = lv.row(r);
            std::array::from_fn(|c| argmax(&row[c * k..(c + 1) * k]))
        })
        .collect();
    Ok(ManipOutput {
        loss,
        accuracy: component_accuracy(&predicted, labels, mask),
        empty,
    })
}

/// Squared error on continuous actions; accuracy compares binned predictions.
pub fn manip_regression_loss(
    g: &mut Graph,
    outputs: Var,
    targets: &[[f64; 6]],
    mask: &[bool],
    spec: &BinningSpec,
) -> Result<ManipOutput> {
    let rows = targets.len();
    check_manip(g, outputs, rows, mask, 6)?;
    let t = g.input(Tensor::matrix(rows, 6, targets.iter().flatten().copied().collect())?);
    let d = g.sub(outputs, t)?;
    let sq = g.square(d);
    let flat = g.reshape(sq, &[6 * rows])?;
    let (loss, empty) = masked_mean(g, flat, mask)?;
    let ov = g.value(outputs);
    let predicted: Vec<[usize; 6]> = (0..rows)
        .map(|r| std::array::from_fn(|c| spec.bin(c, ov.row(r)[c])))
        .collect();
    let labels: Vec<[usize; 6]> = targets
        .iter()
        .map(|a| std::array::from_fn(|c| spec.bin(c, a[c])))
        .collect();
    Ok(ManipOutput {
        loss,
        accuracy: component_accuracy(&predicted, &labels, mask),
        empty,
    })
}

fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, x) in v.iter().enumerate() {
        if *x > v[best] {
            best = i;
        }
    }
    best
}

fn component_accuracy(predicted: &[[usize; 6]], labels: &[[usize; 6]], mask: &[bool]) -> f64 {
    let mut hits = 0;
    let mut total = 0;
    for ((p, l), &m) in predicted.iter().zip(labels).zip(mask) {
        if m {
            hits += p.iter().zip(l).filter(|(a, b)| a == b).count();
            total += 6;
        }
    }
    if total == 0 {
        0.0
    } else {
        hits as f64 / total as f64
    }
}

/// Weighted sum `id + λ_manip·manip + λ_reg·reg`.
#[allow(clippy::too_many_arguments)]
pub fn total_loss(
    id_loss: f64,
    manip_loss: f64,
    reg_loss: f64,
    lambda_manip: f64,
    lambda_reg: f64,
    id_accuracy: f64,
    manip_accuracy: f64,
    manip_empty: bool,
) -> Result<LossBreakdown> {
    if !(lambda_manip >= 0.0 && lambda_reg >= 0.0) {
        return Err(Error::InvalidArgument(format!(
            "loss weights must be non-negative, got {lambda_manip} and {lambda_reg}"
        )));
    }
    Ok(LossBreakdown {
        total: id_loss + lambda_manip * manip_loss + lambda_reg * reg_loss,
        id_loss,
        manip_loss,
        reg_loss,
        id_accuracy,
        manip_accuracy,
        manip_empty,
    })
}

/// Two-level action distribution: `a_id ∈ {0, 1}`, and a conditional over
/// manipulation outcomes below `a_id = 0`. The `a_id = 1` branch has a single
/// formal leaf.
#[derive(Debug, Clone, PartialEq)]
pub struct ActionTreeDist {
    pub p_same: f64,
    pub p_switch: f64,
    pub manip: Vec<f64>,
}

const PROB_TOL: f64 = 1e-12;

impl ActionTreeDist {
    pub fn new(p_same: f64, manip: Vec<f64>) -> Result<Self> {
        let d = Self {
            p_same,
            p_switch: 1.0 - p_same,
            manip,
        };
        d.validate()?;
        Ok(d)
    }

    pub fn validate(&self) -> Result<()> {
        let all = [self.p_same, self.p_switch].into_iter().chain(self.manip.iter().copied());
        if all.clone().any(|p| !(p >= 0.0) || !p.is_finite()) {
            return Err(Error::InvalidArgument("negative or non-finite probability".into()));
        }
        if (self.p_same + self.p_switch - 1.0).abs() > PROB_TOL {
            return Err(Error::InvalidArgument("identity branch does not sum to 1".into()));
        }
        if self.manip.is_empty() || (self.manip.iter().sum::<f64>() - 1.0).abs() > PROB_TOL {
            return Err(Error::InvalidArgument("manipulation branch does not sum to 1".into()));
        }
        Ok(())
    }
}

fn kl_term(p: f64, q: f64) -> Result<f64> {
    if p == 0.0 {
        Ok(0.0)
    } else if q == 0.0 {
        Err(Error::InvalidArgument("KL divergence is infinite: q = 0 where p > 0".into()))
    } else {
        Ok(p * (p / q).ln())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct KlParts {
    /// KL over the joint tree.
    pub joint: f64,
    pub id: f64,
    /// `p(a_id = 0)`-weighted KL of the manipulation conditionals.
    pub manip: f64,
}

/// Returns the joint KL and its identity and manipulation parts.
pub fn kl_decompose(p: &ActionTreeDist, q: &ActionTreeDist) -> Result<KlParts> {
    p.validate()?;
    q.validate()?;
    if p.manip.len() != q.manip.len() {
        return Err(Error::InvalidArgument("manipulation supports differ".into()));
    }
    let id = kl_term(p.p_same, q.p_same)? + kl_term(p.p_switch, q.p_switch)?;
    let mut cond = 0.0;
    for (a, b) in p.manip.iter().zip(&q.manip) {
        cond += kl_term(*a, *b)?;
    }
    let mut joint = kl_term(p.p_switch, q.p_switch)?;
    for (a, b) in p.manip.iter().zip(&q.manip) {
        joint += kl_term(p.p_same * a, q.p_same * b)?;
    }
    Ok(KlParts {
        joint,
        id,
        manip: p.p_same * cond,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct BoundViolation {
    pub anchor: usize,
    pub candidate: usize,
    pub l_id: f64,
    pub bound: f64,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct BoundReport {
    pub checked: usize,
    /// Smallest `bound − L_id` seen.
    pub min_slack: f64,
    pub violations: Vec<BoundViolation>,
}

impl BoundReport {
    pub fn holds(&self) -> bool {
        self.violations.is_empty()
    }
}

fn log_sum_exp(v: impl Iterator<Item = f64> + Clone) -> f64 {
    let mx = v.clone().fold(f64::NEG_INFINITY, f64::max);
    if mx == f64::NEG_INFINITY {
        return mx;
    }
    mx + v.map(|x| (x - mx).exp()).sum::<f64>().ln()
}

/// `(L_id, −log q(x''))` for one anchor whose candidate logits are `row`,
/// with `x''` at `positive` and the pair under test at `candidate`.
pub fn anchor_bound(row: &[f64], positive: usize, candidate: usize) -> (f64, f64) {
    let lse = log_sum_exp(row.iter().copied());
    let bound = lse - row[positive];
    let l_id = if candidate == positive {
        bound
    } else {
        lse - log_sum_exp(row.iter().enumerate().filter(|(j, _)| *j != candidate).map(|(_, v)| *v))
    };
    (l_id, bound)
}

/// For every anchor and candidate under one-hot `p_EC`, checks
/// `L_id(x, x') ≤ −log q(a_id = 0 | x, x'')` where `x''` is the anchor's positive.
/// `L_id` is `−log q(x')` for the positive and `−log(1 − q(x'))` otherwise.
pub fn verify_upper_bound(z: &Tensor, pos: &[usize], tau: f64, slack_tol: f64) -> Result<BoundReport> {
    check_pairs(pos)?;
    let n = pos.len();
    if z.rows() != n || !(tau > 0.0) {
        return Err(Error::InvalidArgument("embeddings or temperature invalid".into()));
    }
    let logits: Vec<Vec<f64>> = (0..n)
        .map(|i| {
            (0..n)
                .map(|j| z.row(i).iter().zip(z.row(j)).map(|(a, b)| a * b).sum::<f64>() / tau)
                .collect()
        })
        .collect();
    let mut report = BoundReport {
        min_slack: f64::INFINITY,
        ..Default::default()
    };
    for i in 0..n {
        let row: Vec<f64> = (0..n).filter(|&j| j != i).map(|j| logits[i][j]).collect();
        let col = |j: usize| if j > i { j - 1 } else { j };
        for c in (0..n).filter(|&j| j != i) {
            let (l_id, bound) = anchor_bound(&row, col(pos[i]), col(c));
            let slack = bound - l_id;
            report.checked += 1;
            report.min_slack = report.min_slack.min(slack);
            if slack < -slack_tol {
                report.violations.push(BoundViolation {
                    anchor: i,
                    candidate: c,
                    l_id,
                    bound,
                });
            }
        }
    }
    Ok(report)
}
