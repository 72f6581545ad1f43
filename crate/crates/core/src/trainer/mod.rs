//! Training step, optimizer, learning-rate schedule and run orchestration.

mod run;

pub use run::{
    load_checkpoint, read_metrics, run_training, split_corpus, DataConfig, RunConfig, RunOptions, RunSummary, TrainedCheckpoint,
};

use serde::{Deserialize, Serialize};

use crate::data::DomainBatch;
use crate::diffengine::{grad_check_with, GradCheckReport, Graph, Stencil, Tensor, Var};
use crate::divergence::{decompose, domain_mean, expert_divergence_loss, expert_divergence_loss_graph};
use crate::error::{Error, Result};
use crate::losses::{compose, load_balance_loss, load_balance_loss_graph, LossBreakdown};
use crate::model::{lm_targets, GraphForward, MoeModel, Param, RoutingTrace};

/// How per-layer auxiliary losses are combined before weighting.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum LayerCombine {
    #[default]
    Mean,
    Sum,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub alpha: f64,
    pub beta: f64,
    /// Stabiliser inside `-ln(JSD + eps)`.
    pub eps: f64,
    pub lr: f64,
    pub warmup_steps: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub weight_decay: f64,
    pub adam_eps: f64,
    pub total_steps: u64,
    pub seed: u64,
    pub layer_combine: LayerCombine,
    /// Global gradient-norm clip; 0 disables.
    pub grad_clip: f64,
    pub checkpoint_interval: u64,
    pub batch_size: usize,
    pub seq_len: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            alpha: crate::losses::DEFAULT_ALPHA,
            beta: crate::losses::DEFAULT_BETA,
            eps: 1e-8,
            lr: 5e-4,
            warmup_steps: 100,
            beta1: 0.9,
            beta2: 0.95,
            weight_decay: 0.1,
            adam_eps: 1e-8,
            total_steps: 2000,
            seed: 0,
            layer_combine: LayerCombine::Mean,
            grad_clip: 1.0,
            checkpoint_interval: 500,
            batch_size: 8,
            seq_len: 64,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let nonneg = [
            ("alpha", self.alpha),
            ("beta", self.beta),
            ("weight_decay", self.weight_decay),
            ("grad_clip", self.grad_clip),
        ];
        for (name, v) in nonneg {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::Config(format!("{name} must be a finite value >= 0, got {v}")));
            }
        }
        for (name, v) in [("eps", self.eps), ("lr", self.lr), ("adam_eps", self.adam_eps)] {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::Config(format!("{name} must be positive, got {v}")));
            }
        }
        for (name, v) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(0.0..1.0).contains(&v) {
                return Err(Error::Config(format!("{name} must lie in [0, 1), got {v}")));
            }
        }
        if self.warmup_steps > self.total_steps {
            return Err(Error::Config(format!(
                "warmup_steps {} exceeds total_steps {}",
                self.warmup_steps, self.total_steps
            )));
        }
        if self.batch_size == 0 || self.seq_len == 0 {
            return Err(Error::Config("batch_size and seq_len must be positive".into()));
        }
        if self.checkpoint_interval == 0 {
            return Err(Error::Config("checkpoint_interval must be positive".into()));
        }
        Ok(())
    }
}

/// Linear warmup from 0 to `lr`, then constant.
pub fn lr_at(step: u64, config: &TrainConfig) -> f64 {
    if config.warmup_steps == 0 || step >= config.warmup_steps {
        config.lr
    } else {
        config.lr * step as f64 / config.warmup_steps as f64
    }
}

/// Hyperparameters of the AdamW update.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamW {
    pub beta1: f64,
    pub beta2: f64,
    pub weight_decay: f64,
    pub eps: f64,
}

impl AdamW {
    pub fn from_config(c: &TrainConfig) -> Self {
        Self {
            beta1: c.beta1,
            beta2: c.beta2,
            weight_decay: c.weight_decay,
            eps: c.adam_eps,
        }
    }
}

/// First and second moments per parameter plus the update count.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub step: u64,
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
}

impl AdamState {
    pub fn new(params: &[Param]) -> Self {
        Self {
            step: 0,
            m: params.iter().map(|p| Tensor::zeros(p.tensor.shape())).collect(),
            v: params.iter().map(|p| Tensor::zeros(p.tensor.shape())).collect(),
        }
    }
}

/// Bias-corrected Adam step with decoupled weight decay on `decay` params.
pub fn adamw_update(params: &mut [Param], grads: &[Tensor], state: &mut AdamState, lr: f64, opt: &AdamW) -> Result<()> {
    if grads.len() != params.len() || state.m.len() != params.len() || state.v.len() != params.len() {
        return Err(Error::Shape {
            op: "adamw_update",
            detail: format!(
                "{} params, {} grads, {} moments",
                params.len(),
                grads.len(),
                state.m.len()
            ),
        });
    }
    for (i, (p, g)) in params.iter().zip(grads).enumerate() {
        if p.tensor.shape() != g.shape() || state.m[i].shape() != g.shape() || state.v[i].shape() != g.shape() {
            return Err(Error::Shape {
                op: "adamw_update",
                detail: format!("{}: param {:?} vs grad {:?}", p.name, p.tensor.shape(), g.shape()),
            });
        }
    }
    state.step += 1;
    let t = state.step as i32;
    let c1 = 1.0 - opt.beta1.powi(t);
    let c2 = 1.0 - opt.beta2.powi(t);
    for (i, (p, g)) in params.iter_mut().zip(grads).enumerate() {
        let shrink = if p.decay { 1.0 - lr * opt.weight_decay } else { 1.0 };
        let m = state.m[i].data_mut();
        let v = state.v[i].data_mut();
        for (((w, &gi), mi), vi) in p.tensor.data_mut().iter_mut().zip(g.data()).zip(m.iter_mut()).zip(v.iter_mut()) {
            *mi = opt.beta1 * *mi + (1.0 - opt.beta1) * gi;
            *vi = opt.beta2 * *vi + (1.0 - opt.beta2) * gi * gi;
            let mhat = *mi / c1;
            let vhat = *vi / c2;
            *w = *w * shrink - lr * mhat / (vhat.sqrt() + opt.eps);
        }
    }
    Ok(())
}

/// Decomposition summary of one layer.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LayerDivergence {
    pub d_total: f64,
    pub d_inter: f64,
    pub d_intra: f64,
}

/// One metrics record.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepMetrics {
    pub step: u64,
    #[serde(flatten)]
    pub losses: LossBreakdown,
    /// True when the batch held a single domain and the divergence term was dropped.
    pub ed_skipped: bool,
    pub d_total: Vec<f64>,
    pub d_inter: Vec<f64>,
    pub d_intra: Vec<f64>,
    pub m_b: usize,
    pub lr: f64,
    /// Global gradient norm before clipping.
    pub grad_norm: f64,
    /// Wall-clock milliseconds; not written to the log.
    #[serde(skip)]
    pub wall_ms: f64,
}

impl StepMetrics {
    pub fn layers(&self) -> Vec<LayerDivergence> {
        (0..self.d_total.len())
            .map(|l| LayerDivergence {
                d_total: self.d_total[l],
                d_inter: self.d_inter[l],
                d_intra: self.d_intra[l],
            })
            .collect()
    }
}

/// Losses and parameter gradients of one batch.
#[derive(Debug, Clone)]
pub struct StepGradients {
    pub grads: Vec<Tensor>,
    pub losses: LossBreakdown,
    pub ed_skipped: bool,
    pub trace: RoutingTrace,
}

fn combine(g: &mut Graph, parts: &[Var], rule: LayerCombine) -> Result<Var> {
    let mut acc = parts[0];
    for &p in &parts[1..] {
        acc = g.add(acc, p)?;
    }
    match rule {
        LayerCombine::Sum => Ok(acc),
        LayerCombine::Mean => g.scale(acc, 1.0 / parts.len() as f64),
    }
}

/// Loss nodes recorded on a graph.
#[derive(Debug, Clone, Copy)]
pub struct ObjectiveVars {
    pub l_lm: Var,
    pub l_lb: Var,
    /// `None` when the batch holds a single domain.
    pub l_ed: Option<Var>,
    pub total: Var,
}

/// Record `L_LM`, the combined auxiliary losses and `L_final` on top of a forward pass.
pub fn objective_graph(g: &mut Graph, fwd: &GraphForward, sequences: &[Vec<usize>], config: &TrainConfig) -> Result<ObjectiveVars> {
    let (rows, targets) = lm_targets(sequences, &fwd.trace.sequences);
    if rows.is_empty() {
        return Err(Error::InvalidArgument("batch has no next-token targets".into()));
    }
    let picked = g.gather_rows(fwd.logits, &rows)?;
    let l_lm = g.cross_entropy_mean(picked, &targets)?;

    let mut lb_parts = Vec::new();
    let mut ed_parts = Vec::new();
    for (l, &probs) in fwd.layer_probs.iter().enumerate() {
        let sel = fwd.trace.layers[l].selections();
        lb_parts.push(load_balance_loss_graph(g, probs, &sel)?);
        if let Some(ed) = expert_divergence_loss_graph(g, probs, &fwd.trace.sequences, &fwd.trace.domains, config.eps)? {
            ed_parts.push(ed);
        }
    }
    let l_lb = combine(g, &lb_parts, config.layer_combine)?;
    let l_ed = if ed_parts.is_empty() {
        None
    } else {
        Some(combine(g, &ed_parts, config.layer_combine)?)
    };

    let lb_term = g.scale(l_lb, config.alpha)?;
    let mut total = g.add(l_lm, lb_term)?;
    if let Some(ed) = l_ed {
        if config.beta != 0.0 {
            let ed_term = g.scale(ed, config.beta)?;
            total = g.add(total, ed_term)?;
        }
    }
    Ok(ObjectiveVars { l_lm, l_lb, l_ed, total })
}

/// Record `L_final` for `batch` on a fresh graph and differentiate it.
pub fn step_gradients(model: &MoeModel, batch: &DomainBatch, config: &TrainConfig) -> Result<StepGradients> {
    let mut g = Graph::new();
    let fwd = model.forward_graph(&mut g, &batch.sequences, &batch.domains, true)?;
    let obj = objective_graph(&mut g, &fwd, &batch.sequences, config)?;
    let losses = compose(
        g.value(obj.l_lm).item()?,
        g.value(obj.l_lb).item()?,
        match obj.l_ed {
            Some(v) => g.value(v).item()?,
            None => 0.0,
        },
        config.alpha,
        config.beta,
    )?;

    let grads = g.backward(obj.total)?;
    let grads = fwd
        .param_vars
        .iter()
        .zip(model.params())
        .map(|(&v, p)| grads.get_or_zeros(v, &p.tensor).with_grad(false))
        .collect();
    Ok(StepGradients {
        grads,
        losses,
        ed_skipped: obj.l_ed.is_none(),
        trace: fwd.trace,
    })
}

/// One of the losses recorded by [`objective_graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LossTerm {
    Lm,
    Lb,
    Ed,
    Final,
}

/// Finite-difference check of one loss term against backward, over every model parameter.
pub fn objective_grad_check(
    model: &MoeModel,
    batch: &DomainBatch,
    config: &TrainConfig,
    term: LossTerm,
    h: f64,
    stencil: Stencil,
) -> Result<GradCheckReport> {
    let tensors: Vec<Tensor> = model.params().iter().map(|p| p.tensor.clone()).collect();
    grad_check_with(
        |g, vars| {
            let fwd = model.forward_with_params(g, vars.to_vec(), &batch.sequences, &batch.domains)?;
            let obj = objective_graph(g, &fwd, &batch.sequences, config)?;
            match term {
                LossTerm::Lm => Ok(obj.l_lm),
                LossTerm::Lb => Ok(obj.l_lb),
                LossTerm::Final => Ok(obj.total),
                LossTerm::Ed => obj
                    .l_ed
                    .ok_or_else(|| Error::InvalidArgument("divergence loss needs at least two domains".into())),
            }
        },
        &tensors,
        h,
        stencil,
    )
}

/// The composed objective recomputed from a forward pass with the scalar
/// (non-graph) loss functions.
pub fn evaluate_objective(model: &MoeModel, batch: &DomainBatch, config: &TrainConfig) -> Result<(LossBreakdown, bool)> {
    let (logits, trace) = model.forward(&batch.sequences, &batch.domains)?;
    let (rows, targets) = lm_targets(&batch.sequences, &trace.sequences);
    let mut nll = 0.0;
    for (&r, &t) in rows.iter().zip(&targets) {
        nll += crate::diffengine::cross_entropy_mean(&Tensor::row(logits.row_slice(r).to_vec()), &[t])?;
    }
    let l_lm = nll / rows.len() as f64;
    let layers = trace.layers.len() as f64;
    let scale = match config.layer_combine {
        LayerCombine::Mean => 1.0 / layers,
        LayerCombine::Sum => 1.0,
    };
    let mut l_lb = 0.0;
    let mut l_ed = 0.0;
    let mut skipped = false;
    for (l, layer) in trace.layers.iter().enumerate() {
        l_lb += load_balance_loss(&layer.probs, &layer.selections())?;
        let aggs = domain_mean(&trace.sequence_summaries(l)?)?;
        let ed = expert_divergence_loss(&aggs, config.eps)?;
        skipped = ed.skipped;
        l_ed += ed.value;
    }
    Ok((compose(l_lm, l_lb * scale, l_ed * scale, config.alpha, config.beta)?, skipped))
}

/// Global L2 norm of `grads`.
pub fn global_norm(grads: &[Tensor]) -> f64 {
    grads
        .iter()
        .flat_map(|g| g.data())
        .map(|v| v * v)
        .sum::<f64>()
        .sqrt()
}

/// Per-layer decomposition of a routing trace.
pub fn trace_divergence(trace: &RoutingTrace) -> Result<Vec<LayerDivergence>> {
    (0..trace.layers.len())
        .map(|l| {
            let r = decompose(&trace.labeled_tokens(l))?;
            Ok(LayerDivergence {
                d_total: r.d_total,
                d_inter: r.d_inter,
                d_intra: r.d_intra,
            })
        })
        .collect()
}

/// One optimisation step; `state.step + 1` is the step number logged.
pub fn train_step(
    model: &mut MoeModel,
    batch: &DomainBatch,
    config: &TrainConfig,
    state: &mut AdamState,
) -> Result<StepMetrics> {
    let start = std::time::Instant::now();
    let step = state.step + 1;
    let StepGradients {
        mut grads,
        losses,
        ed_skipped,
        trace,
    } = step_gradients(model, batch, config)?;
    let grad_norm = global_norm(&grads);
    if !grad_norm.is_finite() {
        return Err(Error::NonFiniteLoss {
            component: "gradient",
            breakdown: format!("{losses:?}"),
        });
    }
    if config.grad_clip > 0.0 && grad_norm > config.grad_clip {
        let k = config.grad_clip / grad_norm;
        for g in &mut grads {
            g.data_mut().iter_mut().for_each(|v| *v *= k);
        }
    }
    let lr = lr_at(step, config);
    adamw_update(model.params_mut(), &grads, state, lr, &AdamW::from_config(config))?;
    let layers = trace_divergence(&trace)?;
    Ok(StepMetrics {
        step,
        losses,
        ed_skipped,
        d_total: layers.iter().map(|l| l.d_total).collect(),
        d_inter: layers.iter().map(|l| l.d_inter).collect(),
        d_intra: layers.iter().map(|l| l.d_intra).collect(),
        m_b: batch.num_domains(),
        lr,
        grad_norm,
        wall_ms: start.elapsed().as_secs_f64() * 1e3,
    })
}
