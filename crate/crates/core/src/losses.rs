//! Load-balancing loss and the composed training objective.

use serde::{Deserialize, Serialize};

use crate::diffengine::{Graph, Tensor, Var};
use crate::error::{Error, Result};
use crate::routing::ExpertDistribution;

/// Per-expert hard usage `f_i`: fraction of tokens whose selection contains `i`.
pub fn expert_usage(selections: &[Vec<usize>], num_experts: usize) -> Result<Vec<f64>> {
    let k = selections
        .first()
        .ok_or_else(|| Error::InvalidArgument("load balance loss of an empty batch".into()))?
        .len();
    let mut f = vec![0.0; num_experts];
    for sel in selections {
        if sel.len() != k {
            return Err(Error::InvalidArgument("selections must all have size K".into()));
        }
        for &i in sel {
            if i >= num_experts {
                return Err(Error::OutOfRange {
                    what: "expert",
                    index: i,
                    limit: num_experts,
                });
            }
            f[i] += 1.0;
        }
    }
    let t = selections.len() as f64;
    f.iter_mut().for_each(|v| *v /= t);
    Ok(f)
}

/// `N * sum_i f_i P_i` with hard usage `f_i` and mean soft probability `P_i`.
pub fn load_balance_loss(per_token: &[ExpertDistribution], selections: &[Vec<usize>]) -> Result<f64> {
    if per_token.is_empty() || per_token.len() != selections.len() {
        return Err(Error::InvalidArgument(format!(
            "{} distributions and {} selections",
            per_token.len(),
            selections.len()
        )));
    }
    let n = per_token[0].len();
    let f = expert_usage(selections, n)?;
    let mut p_mean = vec![0.0; n];
    for p in per_token {
        for (m, v) in p_mean.iter_mut().zip(p.probs()) {
            *m += v;
        }
    }
    let t = per_token.len() as f64;
    Ok(n as f64 * f.iter().zip(&p_mean).map(|(f, p)| f * p / t).sum::<f64>())
}

/// Differentiable load-balancing loss over a `[T, N]` probability node.
/// Usage fractions enter as constants.
pub fn load_balance_loss_graph(g: &mut Graph, probs: Var, selections: &[Vec<usize>]) -> Result<Var> {
    let (t, n) = g.shape(probs);
    if selections.len() != t {
        return Err(Error::InvalidArgument(format!("{t} tokens but {} selections", selections.len())));
    }
    let f = g.constant(Tensor::row(expert_usage(selections, n)?));
    let p_mean = g.mean_cols(probs)?;
    let prod = g.mul(f, p_mean)?;
    let s = g.sum_all(prod)?;
    g.scale(s, n as f64)
}

/// The three loss components and their weighted sum.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub l_lm: f64,
    pub l_lb: f64,
    pub l_ed: f64,
    pub l_final: f64,
    pub alpha: f64,
    pub beta: f64,
}

pub const DEFAULT_ALPHA: f64 = 1e-3;
pub const DEFAULT_BETA: f64 = 5e-4;

/// `L_final = L_LM + alpha L_LB + beta L_ED`.
pub fn compose(l_lm: f64, l_lb: f64, l_ed: f64, alpha: f64, beta: f64) -> Result<LossBreakdown> {
    let mut b = LossBreakdown {
        l_lm,
        l_lb,
        l_ed,
        l_final: f64::NAN,
        alpha,
        beta,
    };
    for (name, v) in [("l_lm", l_lm), ("l_lb", l_lb), ("l_ed", l_ed), ("alpha", alpha), ("beta", beta)] {
        if !v.is_finite() {
            return Err(Error::NonFiniteLoss {
                component: name,
                breakdown: format!("{b:?}"),
            });
        }
    }
    b.l_final = l_lm + alpha * l_lb + beta * l_ed;
    Ok(b)
}
