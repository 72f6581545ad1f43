//! Entropy, KL and Jensen-Shannon machinery over routing distributions.
//!
//! Everything here is in nats. Two averaging conventions coexist:
//! domain means used by the divergence loss are unweighted averages of
//! sequence means, while the diversity decomposition weights each domain by
//! its token share `T_j / T`. The two coincide when all sequences have the
//! same length, which packed training batches guarantee.

use std::collections::BTreeMap;
use std::ops::Range;

use serde::{Deserialize, Serialize};

use crate::diffengine::{Graph, Tensor, Var};
use crate::error::{Error, Result};
use crate::routing::ExpertDistribution;

/// Identifier of a domain label.
pub type DomainId = usize;

const DIST_TOL: f64 = 1e-9;

fn check_dist(p: &[f64]) -> Result<()> {
    if p.is_empty() {
        return Err(Error::InvalidDistribution("empty".into()));
    }
    if let Some(v) = p.iter().find(|v| !v.is_finite() || **v < 0.0) {
        return Err(Error::InvalidDistribution(format!("entry {v}")));
    }
    let s: f64 = p.iter().sum();
    if (s - 1.0).abs() > DIST_TOL {
        return Err(Error::InvalidDistribution(format!("sums to {s}")));
    }
    Ok(())
}

fn check_pair(p: &[f64], q: &[f64]) -> Result<()> {
    check_dist(p)?;
    check_dist(q)?;
    if p.len() != q.len() {
        return Err(Error::InvalidDistribution(format!("lengths {} and {}", p.len(), q.len())));
    }
    Ok(())
}

fn xlogx(x: f64) -> f64 {
    if x == 0.0 {
        0.0
    } else {
        x * x.ln()
    }
}

/// `H(p) = -sum p_i ln p_i` with `0 ln 0 = 0`. Entries must be nonnegative
/// and sum to one.
pub fn entropy(p: &[f64]) -> Result<f64> {
    check_dist(p)?;
    Ok(entropy_unchecked(p))
}

pub(crate) fn entropy_unchecked(p: &[f64]) -> f64 {
    -p.iter().map(|&v| xlogx(v)).sum::<f64>()
}

/// `KL(p || q) = sum p_i ln(p_i / q_i)`.
///
/// Returns `f64::INFINITY` when `p` puts mass where `q` has none.
pub fn kl(p: &[f64], q: &[f64]) -> Result<f64> {
    check_pair(p, q)?;
    Ok(kl_unchecked(p, q))
}

pub(crate) fn kl_unchecked(p: &[f64], q: &[f64]) -> f64 {
    let mut total = 0.0;
    for (&pi, &qi) in p.iter().zip(q) {
        if pi == 0.0 {
            continue;
        }
        if qi == 0.0 {
            return f64::INFINITY;
        }
        total += pi * (pi / qi).ln();
    }
    total.max(0.0)
}

fn midpoint(p: &[f64], q: &[f64]) -> Vec<f64> {
    p.iter().zip(q).map(|(a, b)| 0.5 * (a + b)).collect()
}

/// Equal-weight Jensen-Shannon divergence, `½KL(p‖m) + ½KL(q‖m)` with
/// `m = ½(p + q)`. Bounded by `ln 2`.
pub fn jsd_pair(p: &[f64], q: &[f64]) -> Result<f64> {
    check_pair(p, q)?;
    Ok(jsd_kl_form(p, q))
}

fn jsd_kl_form(p: &[f64], q: &[f64]) -> f64 {
    let m = midpoint(p, q);
    let v = 0.5 * kl_unchecked(p, &m) + 0.5 * kl_unchecked(q, &m);
    v.clamp(0.0, std::f64::consts::LN_2)
}

/// Entropy form of the same quantity: `H(m) - ½H(p) - ½H(q)`.
pub fn jsd_pair_entropy_form(p: &[f64], q: &[f64]) -> Result<f64> {
    check_pair(p, q)?;
    let m = midpoint(p, q);
    Ok(entropy_unchecked(&m) - 0.5 * entropy_unchecked(p) - 0.5 * entropy_unchecked(q))
}

fn weighted_mean(dists: &[&[f64]], weights: &[f64]) -> Result<Vec<f64>> {
    if dists.is_empty() || dists.len() != weights.len() {
        return Err(Error::InvalidArgument(format!(
            "{} distributions with {} weights",
            dists.len(),
            weights.len()
        )));
    }
    if weights.iter().any(|&w| w.is_nan() || w < 0.0) {
        return Err(Error::InvalidArgument("weights must be nonnegative".into()));
    }
    let ws: f64 = weights.iter().sum();
    if (ws - 1.0).abs() > 1e-9 {
        return Err(Error::InvalidArgument(format!("weights sum to {ws}")));
    }
    let n = dists[0].len();
    for d in dists {
        check_dist(d)?;
        if d.len() != n {
            return Err(Error::InvalidDistribution("length mismatch".into()));
        }
    }
    let mut mean = vec![0.0; n];
    for (d, &w) in dists.iter().zip(weights) {
        for (m, v) in mean.iter_mut().zip(d.iter()) {
            *m += w * v;
        }
    }
    Ok(mean)
}

/// Generalized JSD in KL form: `sum_k w_k KL(p_k ‖ p̄)` with `p̄ = sum_k w_k p_k`.
pub fn generalized_jsd(dists: &[&[f64]], weights: &[f64]) -> Result<f64> {
    let mean = weighted_mean(dists, weights)?;
    Ok(dists
        .iter()
        .zip(weights)
        .map(|(d, w)| if *w == 0.0 { 0.0 } else { w * kl_unchecked(d, &mean) })
        .sum())
}

/// Generalized JSD in entropy form: `H(p̄) - sum_k w_k H(p_k)`.
pub fn generalized_jsd_entropy_form(dists: &[&[f64]], weights: &[f64]) -> Result<f64> {
    let mean = weighted_mean(dists, weights)?;
    Ok(entropy_unchecked(&mean)
        - dists
            .iter()
            .zip(weights)
            .map(|(d, w)| w * entropy_unchecked(d))
            .sum::<f64>())
}

/// Token-to-sequence aggregation: the mean of a sequence's token distributions.
pub fn sequence_mean(per_token: &[ExpertDistribution]) -> Result<ExpertDistribution> {
    let first = per_token
        .first()
        .ok_or_else(|| Error::InvalidArgument("sequence_mean of an empty sequence".into()))?;
    let n = first.len();
    let mut mean = vec![0.0; n];
    for p in per_token {
        if p.len() != n {
            return Err(Error::InvalidDistribution("length mismatch".into()));
        }
        for (m, v) in mean.iter_mut().zip(p.probs()) {
            *m += v;
        }
    }
    let t = per_token.len() as f64;
    mean.iter_mut().for_each(|m| *m /= t);
    ExpertDistribution::new(mean)
}

/// Routing summary of one domain in a batch.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DomainAggregate {
    pub domain: DomainId,
    pub mean: ExpertDistribution,
    pub tokens: usize,
    pub sequences: usize,
}

/// Per-sequence input to [`domain_mean`].
#[derive(Debug, Clone)]
pub struct SequenceSummary {
    pub domain: DomainId,
    pub mean: ExpertDistribution,
    pub tokens: usize,
}

/// Sequence-to-domain aggregation: unweighted mean of sequence means per
/// domain, ordered by domain id.
pub fn domain_mean(seqs: &[SequenceSummary]) -> Result<Vec<DomainAggregate>> {
    if seqs.is_empty() {
        return Err(Error::InvalidArgument("domain_mean of an empty batch".into()));
    }
    let n = seqs[0].mean.len();
    let mut groups: BTreeMap<DomainId, (Vec<f64>, usize, usize)> = BTreeMap::new();
    for s in seqs {
        if s.mean.len() != n {
            return Err(Error::InvalidDistribution("length mismatch".into()));
        }
        let e = groups.entry(s.domain).or_insert_with(|| (vec![0.0; n], 0, 0));
        for (acc, v) in e.0.iter_mut().zip(s.mean.probs()) {
            *acc += v;
        }
        e.1 += s.tokens;
        e.2 += 1;
    }
    groups
        .into_iter()
        .map(|(domain, (sum, tokens, count))| {
            let mean = sum.into_iter().map(|v| v / count as f64).collect();
            Ok(DomainAggregate {
                domain,
                mean: ExpertDistribution::new(mean)?,
                tokens,
                sequences: count,
            })
        })
        .collect()
}

/// Value of the expert divergence loss and whether it was skipped.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DivergenceLoss {
    pub value: f64,
    /// True when fewer than two domains were present.
    pub skipped: bool,
}

/// Mean over domain pairs of `-ln(JSD(p̄_j, p̄_k) + eps)`.
pub fn expert_divergence_loss(aggregates: &[DomainAggregate], eps: f64) -> Result<DivergenceLoss> {
    if eps.is_nan() || eps <= 0.0 {
        return Err(Error::InvalidArgument(format!("eps must be positive, got {eps}")));
    }
    if aggregates.len() < 2 {
        return Ok(DivergenceLoss {
            value: 0.0,
            skipped: true,
        });
    }
    let mut total = 0.0;
    let mut pairs = 0usize;
    for (j, a) in aggregates.iter().enumerate() {
        for b in &aggregates[j + 1..] {
            total -= (jsd_pair(a.mean.probs(), b.mean.probs())? + eps).ln();
            pairs += 1;
        }
    }
    Ok(DivergenceLoss {
        value: total / pairs as f64,
        skipped: false,
    })
}

/// Differentiable divergence loss of one layer.
///
/// `probs` is the `[T, N]` router output; `sequences[s]` are the token rows
/// of sequence `s`, labelled `domains[s]`. Token-to-sequence and
/// sequence-to-domain means are constant averaging matrices applied to
/// `probs`; pairwise JSDs use the entropy form so zero entries are safe.
/// Returns `None` when fewer than two domains are present.
pub fn expert_divergence_loss_graph(
    g: &mut Graph,
    probs: Var,
    sequences: &[Range<usize>],
    domains: &[DomainId],
    eps: f64,
) -> Result<Option<Var>> {
    if eps.is_nan() || eps <= 0.0 {
        return Err(Error::InvalidArgument(format!("eps must be positive, got {eps}")));
    }
    if sequences.len() != domains.len() || sequences.is_empty() {
        return Err(Error::InvalidArgument("one domain label per sequence required".into()));
    }
    let t = g.shape(probs).0;
    let labels: Vec<DomainId> = {
        let mut v = domains.to_vec();
        v.sort_unstable();
        v.dedup();
        v
    };
    if labels.len() < 2 {
        return Ok(None);
    }

    let s = sequences.len();
    let mut seq_avg = vec![0.0; s * t];
    for (i, r) in sequences.iter().enumerate() {
        if r.is_empty() || r.end > t {
            return Err(Error::InvalidArgument(format!("bad sequence range {r:?} for {t} tokens")));
        }
        for col in r.clone() {
            seq_avg[i * t + col] = 1.0 / r.len() as f64;
        }
    }
    let m = labels.len();
    let mut dom_avg = vec![0.0; m * s];
    for (j, label) in labels.iter().enumerate() {
        let members: Vec<usize> = (0..s).filter(|&i| domains[i] == *label).collect();
        for &i in &members {
            dom_avg[j * s + i] = 1.0 / members.len() as f64;
        }
    }
    let seq_avg = g.constant(Tensor::matrix(s, t, seq_avg)?);
    let dom_avg = g.constant(Tensor::matrix(m, s, dom_avg)?);
    let seq_means = g.matmul(seq_avg, probs)?;
    let dom_means = g.matmul(dom_avg, seq_means)?;

    let (mut left, mut right) = (Vec::new(), Vec::new());
    for j in 0..m {
        for k in j + 1..m {
            left.push(j);
            right.push(k);
        }
    }
    let pj = g.gather_rows(dom_means, &left)?;
    let pk = g.gather_rows(dom_means, &right)?;
    let sum = g.add(pj, pk)?;
    let mid = g.scale(sum, 0.5)?;
    // JSD = ½Σ p ln p + ½Σ q ln q − Σ m ln m
    let nj = g.xlogx(pj)?;
    let nk = g.xlogx(pk)?;
    let nm = g.xlogx(mid)?;
    let nj = g.sum_rows(nj)?;
    let nk = g.sum_rows(nk)?;
    let nm = g.sum_rows(nm)?;
    let ends = g.add(nj, nk)?;
    let ends = g.scale(ends, 0.5)?;
    let jsd = g.sub(ends, nm)?;
    let shifted = g.add_scalar(jsd, eps)?;
    let logs = g.log(shifted)?;
    let mean = g.mean_all(logs)?;
    Ok(Some(g.scale(mean, -1.0)?))
}

/// Raw sum of pairwise JSDs between domain means.
pub fn pairwise_sum(aggregates: &[DomainAggregate]) -> Result<f64> {
    let means: Vec<&[f64]> = aggregates.iter().map(|a| a.mean.probs()).collect();
    pairwise_sum_of(&means)
}

fn pairwise_sum_of(means: &[&[f64]]) -> Result<f64> {
    if means.len() < 2 {
        return Err(Error::InvalidArgument(format!("need at least 2 domains, got {}", means.len())));
    }
    let mut total = 0.0;
    for j in 0..means.len() {
        for k in j + 1..means.len() {
            total += jsd_pair(means[j], means[k])?;
        }
    }
    Ok(total)
}

/// Symmetric `M x M` matrix of pairwise JSDs.
pub fn jsd_matrix(aggregates: &[DomainAggregate]) -> Result<Vec<Vec<f64>>> {
    let m = aggregates.len();
    let mut out = vec![vec![0.0; m]; m];
    for j in 0..m {
        for k in j + 1..m {
            let v = jsd_pair(aggregates[j].mean.probs(), aggregates[k].mean.probs())?;
            out[j][k] = v;
            out[k][j] = v;
        }
    }
    Ok(out)
}

/// Total/inter/intra routing diversity of one layer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DivergenceReport {
    pub d_total: f64,
    pub d_inter: f64,
    pub d_intra: f64,
    pub jsd: Vec<Vec<f64>>,
    pub global_mean: ExpertDistribution,
    pub domains: Vec<DomainAggregate>,
}

/// Decompose routing diversity over labelled token distributions.
///
/// `tokens[t]` is `(domain, p(x_t))`. Domain means and weights are
/// token-weighted.
pub fn decompose(tokens: &[(DomainId, &ExpertDistribution)]) -> Result<DivergenceReport> {
    let (_, first) = tokens
        .first()
        .ok_or_else(|| Error::InvalidArgument("decompose needs at least one token".into()))?;
    let n = first.len();
    let t = tokens.len() as f64;

    let mut global = vec![0.0; n];
    let mut mean_token_entropy = 0.0;
    let mut groups: BTreeMap<DomainId, (Vec<f64>, usize)> = BTreeMap::new();
    for (d, p) in tokens {
        if p.len() != n {
            return Err(Error::InvalidDistribution("length mismatch".into()));
        }
        let e = groups.entry(*d).or_insert_with(|| (vec![0.0; n], 0));
        for ((g, acc), v) in global.iter_mut().zip(e.0.iter_mut()).zip(p.probs()) {
            *g += v;
            *acc += v;
        }
        e.1 += 1;
        mean_token_entropy += entropy_unchecked(p.probs());
    }
    global.iter_mut().for_each(|g| *g /= t);
    mean_token_entropy /= t;

    let mut domains = Vec::with_capacity(groups.len());
    let mut weighted_domain_entropy = 0.0;
    for (domain, (sum, count)) in groups {
        let mean: Vec<f64> = sum.into_iter().map(|v| v / count as f64).collect();
        weighted_domain_entropy += (count as f64 / t) * entropy_unchecked(&mean);
        domains.push(DomainAggregate {
            domain,
            mean: ExpertDistribution::new_unchecked(mean),
            tokens: count,
            sequences: 0,
        });
    }
    let h_global = entropy_unchecked(&global);
    Ok(DivergenceReport {
        d_total: h_global - mean_token_entropy,
        d_inter: h_global - weighted_domain_entropy,
        d_intra: weighted_domain_entropy - mean_token_entropy,
        jsd: jsd_matrix(&domains)?,
        global_mean: ExpertDistribution::new_unchecked(global),
        domains,
    })
}

/// `(1 + x) ln(1 + x) - x`, accurate near zero.
fn xlog_excess(x: f64) -> f64 {
    if x.abs() >= 0.1 {
        return (1.0 + x) * x.ln_1p() - x;
    }
    // sum over n >= 2 of (-x)^n / (n (n - 1))
    let mut power = x * x;
    let mut sum = 0.0;
    for n in 2..80 {
        let n = n as f64;
        let term = power / (n * (n - 1.0));
        sum += term;
        if term.abs() <= 1e-18 * sum.abs() {
            break;
        }
        power *= -x;
    }
    sum
}

/// Result of the local proportionality experiment.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Proportionality {
    pub s_pair: f64,
    pub d_inter: f64,
    /// `s_pair / d_inter`; `None` when `d_inter` is zero.
    pub ratio: Option<f64>,
    /// The second-order prediction `M^2 / 4`.
    pub predicted: f64,
}

/// Evaluate `S_pair` and equal-weight `D_inter` on `{base + t·δ_j}`.
pub fn proportionality_check(base: &[f64], deltas: &[Vec<f64>], t: f64) -> Result<Proportionality> {
    check_dist(base)?;
    let m = deltas.len();
    if m < 2 {
        return Err(Error::InvalidArgument("need at least 2 perturbations".into()));
    }
    for (i, d) in deltas.iter().enumerate() {
        if d.len() != base.len() {
            return Err(Error::InvalidArgument(format!("perturbation {i} has the wrong length")));
        }
    }
    for i in 0..base.len() {
        let s: f64 = deltas.iter().map(|d| d[i]).sum();
        if s.abs() > 1e-9 {
            return Err(Error::InvalidArgument("perturbations must sum to zero".into()));
        }
    }
    let points: Vec<Vec<f64>> = deltas
        .iter()
        .map(|d| base.iter().zip(d).map(|(b, x)| b + t * x).collect())
        .collect();
    for p in &points {
        check_dist(p)?;
    }
    // KL(r(1+x) || r) = sum r g(x), with x built from the perturbations
    let kl_from = |r: &[f64], x: &dyn Fn(usize) -> f64| -> f64 {
        (0..r.len()).filter(|&i| r[i] > 0.0).map(|i| r[i] * xlog_excess(x(i) / r[i])).sum()
    };
    let mut s_pair = 0.0;
    for j in 0..m {
        for k in j + 1..m {
            let r: Vec<f64> = (0..base.len())
                .map(|i| base[i] + t * (deltas[j][i] + deltas[k][i]) / 2.0)
                .collect();
            let half = |i: usize| t * (deltas[j][i] - deltas[k][i]) / 2.0;
            s_pair += 0.5 * (kl_from(&r, &half) + kl_from(&r, &|i| -half(i)));
        }
    }
    let centre: Vec<f64> = (0..base.len())
        .map(|i| deltas.iter().map(|d| d[i]).sum::<f64>() / m as f64)
        .collect();
    let mean: Vec<f64> = (0..base.len()).map(|i| base[i] + t * centre[i]).collect();
    let d_inter = deltas
        .iter()
        .map(|d| kl_from(&mean, &|i| t * (d[i] - centre[i])))
        .sum::<f64>()
        / m as f64;
    let ratio = (d_inter > 0.0).then(|| s_pair / d_inter);
    Ok(Proportionality {
        s_pair,
        d_inter,
        ratio,
        predicted: (m * m) as f64 / 4.0,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::f64::consts::LN_2;

    fn dist(v: &[f64]) -> ExpertDistribution {
        ExpertDistribution::new(v.to_vec()).unwrap()
    }

    #[test]
    fn entropy_closed_forms() {
        assert!((entropy(&[0.25; 4]).unwrap() - 4f64.ln()).abs() < 1e-15);
        assert_eq!(entropy(&[0.0, 1.0, 0.0]).unwrap(), 0.0);
        assert!((entropy(&[0.5, 0.5]).unwrap() - LN_2).abs() < 1e-15);
        assert!(entropy(&[-0.1, 1.1]).is_err());
    }

    #[test]
    fn kl_closed_forms() {
        let p = [0.2, 0.3, 0.5];
        assert_eq!(kl(&p, &p).unwrap(), 0.0);
        assert!((kl(&[1.0, 0.0], &[0.5, 0.5]).unwrap() - LN_2).abs() < 1e-15);
        assert_eq!(kl(&[0.5, 0.5], &[1.0, 0.0]).unwrap(), f64::INFINITY);
    }

    #[test]
    fn kl_matches_scalar_loop() {
        let p: [f64; 4] = [0.1, 0.4, 0.2, 0.3];
        let q: [f64; 4] = [0.25, 0.15, 0.35, 0.25];
        let mut oracle = 0.0;
        for i in 0..4 {
            oracle += p[i] * p[i].ln() - p[i] * q[i].ln();
        }
        assert!((kl(&p, &q).unwrap() - oracle).abs() < 1e-14);
    }

    #[test]
    fn jsd_closed_forms() {
        let p = [0.3, 0.7];
        assert_eq!(jsd_pair(&p, &p).unwrap(), 0.0);
        assert!((jsd_pair(&[1.0, 0.0], &[0.0, 1.0]).unwrap() - LN_2).abs() < 1e-15);
        let a = jsd_pair(&[0.5, 0.5], &[1.0, 0.0]).unwrap();
        let b = jsd_pair_entropy_form(&[0.5, 0.5], &[1.0, 0.0]).unwrap();
        // H(0.75, 0.25) - ½ ln 2
        let analytic = -(0.75 * 0.75f64.ln() + 0.25 * 0.25f64.ln()) - 0.5 * LN_2;
        assert!((a - b).abs() < 1e-12);
        assert!((a - analytic).abs() < 1e-12);
        assert!((a - 0.2158).abs() < 1e-4);
    }

    #[test]
    fn generalized_jsd_closed_forms() {
        let p = [0.2, 0.8];
        assert_eq!(generalized_jsd(&[&p, &p, &p], &[0.2, 0.3, 0.5]).unwrap(), 0.0);
        let v = generalized_jsd(&[&[1.0, 0.0], &[0.0, 1.0]], &[0.5, 0.5]).unwrap();
        assert!((v - LN_2).abs() < 1e-15);
        assert!(generalized_jsd(&[&p, &p], &[0.5, 0.6]).is_err());
    }

    #[test]
    fn sequence_mean_cases() {
        let a = dist(&[0.3, 0.7]);
        assert_eq!(sequence_mean(std::slice::from_ref(&a)).unwrap(), a);
        let m = sequence_mean(&[dist(&[1.0, 0.0]), dist(&[0.0, 1.0])]).unwrap();
        assert_eq!(m.probs(), &[0.5, 0.5]);
        assert!(sequence_mean(&[]).is_err());
    }

    #[test]
    fn domain_mean_echoes_single_sequences() {
        let seqs = vec![
            SequenceSummary { domain: 1, mean: dist(&[0.1, 0.9]), tokens: 4 },
            SequenceSummary { domain: 0, mean: dist(&[0.6, 0.4]), tokens: 4 },
        ];
        let agg = domain_mean(&seqs).unwrap();
        assert_eq!(agg.len(), 2);
        assert_eq!(agg[0].domain, 0);
        assert_eq!(agg[0].mean.probs(), &[0.6, 0.4]);
        assert_eq!(agg[1].mean.probs(), &[0.1, 0.9]);
    }

    #[test]
    fn divergence_loss_closed_forms() {
        let agg = |d, p: &[f64]| DomainAggregate { domain: d, mean: dist(p), tokens: 1, sequences: 1 };
        let same = [agg(0, &[0.5, 0.5]), agg(1, &[0.5, 0.5])];
        let v = expert_divergence_loss(&same, 1e-8).unwrap();
        assert!(!v.skipped);
        assert!((v.value - 18.420680743952367).abs() < 1e-6);
        let disjoint = [agg(0, &[1.0, 0.0]), agg(1, &[0.0, 1.0])];
        let v = expert_divergence_loss(&disjoint, 1e-8).unwrap();
        assert!((v.value + (LN_2 + 1e-8).ln()).abs() < 1e-12);
        assert!((v.value - 0.3665).abs() < 1e-4);
        let single = expert_divergence_loss(&same[..1], 1e-8).unwrap();
        assert!(single.skipped);
        assert_eq!(single.value, 0.0);
    }

    #[test]
    fn pairwise_sum_cases() {
        let agg = |d, p: &[f64]| DomainAggregate { domain: d, mean: dist(p), tokens: 1, sequences: 1 };
        assert_eq!(pairwise_sum(&[agg(0, &[0.4, 0.6]), agg(1, &[0.4, 0.6])]).unwrap(), 0.0);
        let v = pairwise_sum(&[agg(0, &[1.0, 0.0]), agg(1, &[0.0, 1.0])]).unwrap();
        assert!((v - LN_2).abs() < 1e-15);
        assert!(pairwise_sum(&[agg(0, &[1.0, 0.0])]).is_err());
    }

    #[test]
    fn decompose_closed_forms() {
        let p = dist(&[0.2, 0.3, 0.5]);
        let r = decompose(&[(0, &p), (1, &p), (1, &p)]).unwrap();
        assert!(r.d_total.abs() < 1e-15 && r.d_inter.abs() < 1e-15 && r.d_intra.abs() < 1e-15);

        let a = dist(&[1.0, 0.0]);
        let b = dist(&[0.0, 1.0]);
        let r = decompose(&[(0, &a), (1, &b)]).unwrap();
        assert!((r.d_total - LN_2).abs() < 1e-15);
        assert!((r.d_inter - LN_2).abs() < 1e-15);
        assert!(r.d_intra.abs() < 1e-15);
        assert!(decompose(&[]).is_err());
    }

    #[test]
    fn proportionality_degenerate_and_two_point() {
        let base = [0.25; 4];
        let d = vec![vec![0.1, -0.1, 0.05, -0.05], vec![-0.1, 0.1, -0.05, 0.05]];
        let r = proportionality_check(&base, &d, 0.0).unwrap();
        assert_eq!(r.s_pair, 0.0);
        assert_eq!(r.d_inter, 0.0);
        assert!(r.ratio.is_none());
        let r = proportionality_check(&base, &d, 1e-3).unwrap();
        assert!((r.ratio.unwrap() - 1.0).abs() < 1e-12, "{r:?}");
        assert_eq!(r.predicted, 1.0);
    }

    fn logits_6x4() -> Tensor {
        let v: Vec<f64> = (0..24).map(|i| ((i * 37 % 17) as f64 - 8.0) * 0.21).collect();
        Tensor::matrix(6, 4, v).unwrap()
    }

    const SEQS: [Range<usize>; 3] = [0..2, 2..4, 4..6];

    #[test]
    fn graph_loss_matches_scalar_pipeline() {
        let logits = logits_6x4();
        let probs = crate::diffengine::softmax_rows(&logits).unwrap();
        let domains = [0, 1, 0];
        let summaries: Vec<SequenceSummary> = SEQS
            .iter()
            .zip(domains)
            .map(|(r, d)| {
                let toks: Vec<ExpertDistribution> = r.clone().map(|t| dist(probs.row_slice(t))).collect();
                SequenceSummary { domain: d, mean: sequence_mean(&toks).unwrap(), tokens: r.len() }
            })
            .collect();
        let scalar = expert_divergence_loss(&domain_mean(&summaries).unwrap(), 1e-8).unwrap();

        let mut g = Graph::new();
        let p = g.constant(probs);
        let l = expert_divergence_loss_graph(&mut g, p, &SEQS, &domains, 1e-8).unwrap().unwrap();
        assert!((g.value(l).item().unwrap() - scalar.value).abs() < 1e-10);
    }

    #[test]
    fn graph_loss_skips_single_domain() {
        let mut g = Graph::new();
        let p = g.constant(crate::diffengine::softmax_rows(&logits_6x4()).unwrap());
        assert!(expert_divergence_loss_graph(&mut g, p, &SEQS, &[2, 2, 2], 1e-8).unwrap().is_none());
    }

    #[test]
    fn graph_loss_gradient_matches_finite_differences() {
        let report = crate::diffengine::grad_check(
            |g, v| {
                let p = g.softmax_rows(v[0])?;
                Ok(expert_divergence_loss_graph(g, p, &SEQS, &[0, 1, 2], 1e-8)?.expect("3 domains"))
            },
            &[logits_6x4()],
            1e-5,
        )
        .unwrap();
        assert!(report.max_rel_error <= 1e-4, "{report:?}");
    }

    #[test]
    fn proportionality_matches_generic_jsd() {
        let base = [0.1, 0.2, 0.3, 0.4];
        let d = vec![vec![0.3, -0.1, 0.0, -0.2], vec![-0.1, 0.2, -0.2, 0.1], vec![-0.2, -0.1, 0.2, 0.1]];
        let t = 0.1;
        let pts: Vec<Vec<f64>> = d.iter().map(|x| base.iter().zip(x).map(|(b, v)| b + t * v).collect()).collect();
        let refs: Vec<&[f64]> = pts.iter().map(Vec::as_slice).collect();
        let r = proportionality_check(&base, &d, t).unwrap();
        assert!((r.s_pair - pairwise_sum_of(&refs).unwrap()).abs() < 1e-14);
        assert!((r.d_inter - generalized_jsd(&refs, &[1.0 / 3.0; 3]).unwrap()).abs() < 1e-14);
        for x in [-0.5, -0.09, -1e-6, 0.0, 1e-9, 0.05, 0.3] {
            let direct = (1.0 + x) * f64::ln_1p(x) - x;
            assert!((xlog_excess(x) - direct).abs() <= 1e-16 + 1e-12 * direct.abs(), "{x}");
        }
    }

    #[test]
    fn proportionality_rejects_invalid_inputs() {
        let base = [0.5, 0.5];
        let unbalanced = vec![vec![0.1, -0.1], vec![0.1, -0.1]];
        assert!(proportionality_check(&base, &unbalanced, 0.1).is_err());
        let big = vec![vec![1.0, -1.0], vec![-1.0, 1.0]];
        assert!(proportionality_check(&base, &big, 1.0).is_err());
    }
}
