//! Router and sparse top-K mixture layer on single hidden vectors.
//!
//! The batched, differentiable version lives in [`crate::model`]; it uses
//! [`topk_gate`] for expert selection so both paths agree on tie-breaking.

use serde::{Deserialize, Serialize};

use crate::diffengine::Tensor;
use crate::error::{shape_err, Error, Result};

/// Probability vector over the experts of one layer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ExpertDistribution(Vec<f64>);

impl ExpertDistribution {
    pub fn new(probs: Vec<f64>) -> Result<Self> {
        if probs.is_empty() {
            return Err(Error::InvalidDistribution("no experts".into()));
        }
        if let Some(v) = probs.iter().find(|v| !v.is_finite() || **v < 0.0) {
            return Err(Error::InvalidDistribution(format!("entry {v}")));
        }
        let s: f64 = probs.iter().sum();
        if (s - 1.0).abs() > 1e-9 {
            return Err(Error::InvalidDistribution(format!("sums to {s}")));
        }
        Ok(Self(probs))
    }

    /// Caller guarantees validity (e.g. the output of a softmax or a mean of valid rows).
    pub(crate) fn new_unchecked(probs: Vec<f64>) -> Self {
        Self(probs)
    }

    pub fn uniform(n: usize) -> Self {
        Self(vec![1.0 / n as f64; n])
    }

    pub fn probs(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn argmax(&self) -> usize {
        topk_indices(&self.0, 1)[0]
    }
}

/// Selected experts and their renormalised gate weights.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GateAssignment {
    /// Expert indices, highest probability first.
    pub selected: Vec<usize>,
    pub gates: Vec<f64>,
}

/// Router projection `W_r`, one row per expert.
#[derive(Debug, Clone, PartialEq)]
pub struct RouterWeights(Tensor);

impl RouterWeights {
    pub fn new(weights: Tensor) -> Result<Self> {
        if weights.shape().len() != 2 {
            return Err(shape_err("RouterWeights", "expected [num_experts, hidden]"));
        }
        Ok(Self(weights))
    }

    pub fn num_experts(&self) -> usize {
        self.0.rows()
    }

    pub fn hidden_size(&self) -> usize {
        self.0.cols()
    }

    pub fn tensor(&self) -> &Tensor {
        &self.0
    }
}

/// `softmax(W_r x)`, the full distribution over all experts.
pub fn route(router: &RouterWeights, x: &[f64]) -> Result<ExpertDistribution> {
    if x.len() != router.hidden_size() {
        return Err(shape_err(
            "route",
            format!("hidden size {} but router expects {}", x.len(), router.hidden_size()),
        ));
    }
    let logits: Vec<f64> = (0..router.num_experts())
        .map(|i| router.0.row_slice(i).iter().zip(x).map(|(w, v)| w * v).sum())
        .collect();
    let p = crate::diffengine::softmax_rows(&Tensor::row(logits))?;
    Ok(ExpertDistribution(p.into_data()))
}

/// Indices of the `k` largest values; ties go to the lower index.
pub(crate) fn topk_indices(p: &[f64], k: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..p.len()).collect();
    idx.sort_by(|&a, &b| p[b].total_cmp(&p[a]).then(a.cmp(&b)));
    idx.truncate(k);
    idx
}

/// Keep the `k` most probable experts and renormalise their probabilities.
pub fn topk_gate(p: &ExpertDistribution, k: usize) -> Result<GateAssignment> {
    if k == 0 || k > p.len() {
        return Err(Error::InvalidArgument(format!(
            "top_k {k} must lie in 1..={}",
            p.len()
        )));
    }
    let selected = topk_indices(&p.0, k);
    let total: f64 = selected.iter().map(|&i| p.0[i]).sum();
    let gates = selected.iter().map(|&i| p.0[i] / total).collect();
    Ok(GateAssignment { selected, gates })
}

/// SwiGLU feed-forward expert: `W_down (silu(x W_gate) ⊙ x W_up)`.
#[derive(Debug, Clone, PartialEq)]
pub struct ExpertFfn {
    /// `[hidden, intermediate]`
    pub w_gate: Tensor,
    /// `[hidden, intermediate]`
    pub w_up: Tensor,
    /// `[intermediate, hidden]`
    pub w_down: Tensor,
}

impl ExpertFfn {
    pub fn forward(&self, x: &[f64]) -> Result<Vec<f64>> {
        let (d, inter) = (self.w_gate.rows(), self.w_gate.cols());
        if x.len() != d || self.w_up.shape() != self.w_gate.shape() || self.w_down.rows() != inter {
            return Err(shape_err("ExpertFfn::forward", "dimension mismatch"));
        }
        let mut h = vec![0.0; inter];
        for (j, hj) in h.iter_mut().enumerate() {
            let (mut a, mut b) = (0.0, 0.0);
            for (i, xi) in x.iter().enumerate() {
                a += xi * self.w_gate.get(i, j);
                b += xi * self.w_up.get(i, j);
            }
            *hj = a / (1.0 + (-a).exp()) * b;
        }
        let out_dim = self.w_down.cols();
        let mut y = vec![0.0; out_dim];
        for (j, hj) in h.iter().enumerate() {
            for (o, yo) in y.iter_mut().enumerate() {
                *yo += hj * self.w_down.get(j, o);
            }
        }
        Ok(y)
    }
}

/// Router plus `N` experts.
#[derive(Debug, Clone, PartialEq)]
pub struct MoeLayer {
    pub router: RouterWeights,
    pub experts: Vec<ExpertFfn>,
    pub top_k: usize,
}

/// Output of one token through a [`MoeLayer`].
#[derive(Debug, Clone, PartialEq)]
pub struct MoeOutput {
    pub y: Vec<f64>,
    pub probs: ExpertDistribution,
    pub assignment: GateAssignment,
}

/// `y = sum_{i in T} g_i E_i(x)`, evaluating only the selected experts.
pub fn moe_forward(layer: &MoeLayer, x: &[f64]) -> Result<MoeOutput> {
    if layer.experts.len() != layer.router.num_experts() {
        return Err(shape_err(
            "moe_forward",
            format!("{} experts but router has {} rows", layer.experts.len(), layer.router.num_experts()),
        ));
    }
    let probs = route(&layer.router, x)?;
    let assignment = topk_gate(&probs, layer.top_k)?;
    let mut y = vec![0.0; x.len()];
    for (&i, &g) in assignment.selected.iter().zip(&assignment.gates) {
        let e = layer.experts[i].forward(x)?;
        if e.len() != y.len() {
            return Err(shape_err("moe_forward", "expert output size differs from hidden size"));
        }
        for (yo, eo) in y.iter_mut().zip(e) {
            *yo += g * eo;
        }
    }
    Ok(MoeOutput { y, probs, assignment })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_router_is_uniform() {
        let r = RouterWeights::new(Tensor::zeros(&[5, 3])).unwrap();
        let p = route(&r, &[0.3, -1.0, 2.0]).unwrap();
        for &v in p.probs() {
            assert!((v - 0.2).abs() < 1e-15);
        }
    }

    #[test]
    fn analytic_two_expert_route() {
        let r = RouterWeights::new(Tensor::matrix(2, 1, vec![0.0, 3f64.ln()]).unwrap()).unwrap();
        let p = route(&r, &[1.0]).unwrap();
        assert!((p.probs()[0] - 0.25).abs() < 1e-15);
        assert!((p.probs()[1] - 0.75).abs() < 1e-15);
    }

    #[test]
    fn route_rejects_dimension_mismatch() {
        let r = RouterWeights::new(Tensor::zeros(&[4, 3])).unwrap();
        assert!(route(&r, &[1.0, 2.0]).is_err());
    }

    #[test]
    fn topk_examples() {
        let p = ExpertDistribution::new(vec![0.5, 0.3, 0.2]).unwrap();
        let a = topk_gate(&p, 2).unwrap();
        assert_eq!(a.selected, vec![0, 1]);
        assert!((a.gates[0] - 0.625).abs() < 1e-15);
        assert!((a.gates[1] - 0.375).abs() < 1e-15);

        let all = topk_gate(&p, 3).unwrap();
        let mut pairs: Vec<(usize, f64)> = all.selected.iter().copied().zip(all.gates.iter().copied()).collect();
        pairs.sort_by_key(|&(i, _)| i);
        for (i, g) in pairs {
            assert!((g - p.probs()[i]).abs() < 1e-15);
        }

        let tied = ExpertDistribution::uniform(4);
        let a = topk_gate(&tied, 2).unwrap();
        assert_eq!(a.selected, vec![0, 1]);
        assert_eq!(a.gates, vec![0.5, 0.5]);
    }

    #[test]
    fn topk_rejects_out_of_range() {
        let p = ExpertDistribution::uniform(3);
        assert!(topk_gate(&p, 0).is_err());
        assert!(topk_gate(&p, 4).is_err());
    }

    fn expert(seed: f64, d: usize, inter: usize) -> ExpertFfn {
        let gen = |n: usize, off: f64| -> Vec<f64> { (0..n).map(|i| ((i as f64 + off) * seed).sin() * 0.5).collect() };
        ExpertFfn {
            w_gate: Tensor::matrix(d, inter, gen(d * inter, 0.1)).unwrap(),
            w_up: Tensor::matrix(d, inter, gen(d * inter, 0.7)).unwrap(),
            w_down: Tensor::matrix(inter, d, gen(d * inter, 1.3)).unwrap(),
        }
    }

    fn layer(n: usize, k: usize, identical: bool) -> MoeLayer {
        let d = 4;
        let router: Vec<f64> = (0..n * d).map(|i| (i as f64 * 0.77).cos()).collect();
        MoeLayer {
            router: RouterWeights::new(Tensor::matrix(n, d, router).unwrap()).unwrap(),
            experts: (0..n)
                .map(|i| expert(if identical { 1.3 } else { 1.3 + i as f64 * 0.41 }, d, 6))
                .collect(),
            top_k: k,
        }
    }

    #[test]
    fn identical_experts_ignore_routing() {
        let l = layer(4, 2, true);
        let x = [0.3, -0.2, 0.9, 0.1];
        let out = moe_forward(&l, &x).unwrap();
        let single = l.experts[0].forward(&x).unwrap();
        for (a, b) in out.y.iter().zip(&single) {
            assert!((a - b).abs() < 1e-14);
        }
    }

    #[test]
    fn top1_is_the_argmax_expert() {
        let l = layer(4, 1, false);
        let x = [0.3, -0.2, 0.9, 0.1];
        let out = moe_forward(&l, &x).unwrap();
        assert_eq!(out.assignment.gates, vec![1.0]);
        let e = l.experts[out.probs.argmax()].forward(&x).unwrap();
        assert_eq!(out.y, e);
    }

    #[test]
    fn top2_matches_dense_mixture() {
        let l = layer(5, 2, false);
        let x = [-0.6, 0.4, 0.25, 1.1];
        let out = moe_forward(&l, &x).unwrap();
        // dense oracle: every expert evaluated, masked by membership in T
        let p = out.probs.probs();
        let sel = &out.assignment.selected;
        let norm: f64 = sel.iter().map(|&i| p[i]).sum();
        let mut dense = vec![0.0; 4];
        for i in 0..5 {
            let mask = if sel.contains(&i) { 1.0 } else { 0.0 };
            let e = l.experts[i].forward(&x).unwrap();
            for (d, v) in dense.iter_mut().zip(e) {
                *d += mask * p[i] / norm * v;
            }
        }
        for (a, b) in out.y.iter().zip(&dense) {
            assert!((a - b).abs() < 1e-13);
        }
        assert!((out.assignment.gates.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }
}
