//! Toy decoder-only transformer with a top-K MoE feed-forward in every block.
//!
//! Pre-norm blocks, multi-head causal attention, learned absolute position
//! embeddings, SwiGLU experts and an untied output head. Forward passes
//! record every layer's full router distribution in a [`RoutingTrace`].

mod checkpoint;
mod config;

use std::collections::HashMap;
use std::ops::Range;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

pub use checkpoint::{Checkpoint, CHECKPOINT_MAGIC};
pub use config::ModelConfig;

use crate::diffengine::{Graph, Tensor, Var};
use crate::divergence::{DomainId, SequenceSummary};
use crate::error::{Error, Result};
use crate::routing::{topk_gate, ExpertDistribution, ExpertFfn, GateAssignment, MoeLayer, RouterWeights};

const LN_EPS: f64 = 1e-5;
const MASK: f64 = -1e30;

/// Named parameter tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct Param {
    pub name: String,
    pub tensor: Tensor,
    /// Whether decoupled weight decay applies (matrices, not norm gains).
    pub decay: bool,
}

#[derive(Debug, Clone, PartialEq)]
struct LayerIndex {
    ln1: (usize, usize),
    wq: usize,
    wk: usize,
    wv: usize,
    wo: usize,
    ln2: (usize, usize),
    router: usize,
    experts: Vec<[usize; 3]>,
}

#[derive(Debug, Clone, PartialEq)]
struct Index {
    tok_emb: usize,
    pos_emb: usize,
    layers: Vec<LayerIndex>,
    ln_f: (usize, usize),
    lm_head: usize,
}

/// Parameters and configuration of the toy MoE transformer.
#[derive(Debug, Clone, PartialEq)]
pub struct MoeModel {
    config: ModelConfig,
    params: Vec<Param>,
    index: Index,
}

/// Routing of one layer: a full distribution and gate assignment per token.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerTrace {
    pub probs: Vec<ExpertDistribution>,
    pub assignments: Vec<GateAssignment>,
}

impl LayerTrace {
    pub fn selections(&self) -> Vec<Vec<usize>> {
        self.assignments.iter().map(|a| a.selected.clone()).collect()
    }
}

/// Router outputs of a forward pass, with sequence boundaries and labels.
#[derive(Debug, Clone, PartialEq)]
pub struct RoutingTrace {
    pub layers: Vec<LayerTrace>,
    /// Token rows of each sequence.
    pub sequences: Vec<Range<usize>>,
    /// Domain label of each sequence.
    pub domains: Vec<DomainId>,
}

impl RoutingTrace {
    pub fn num_tokens(&self) -> usize {
        self.sequences.last().map_or(0, |r| r.end)
    }

    /// `(domain, p(x_t))` for every token of `layer`.
    pub fn labeled_tokens(&self, layer: usize) -> Vec<(DomainId, &ExpertDistribution)> {
        let probs = &self.layers[layer].probs;
        self.sequences
            .iter()
            .zip(&self.domains)
            .flat_map(|(r, &d)| probs[r.clone()].iter().map(move |p| (d, p)))
            .collect()
    }

    /// Token-to-sequence aggregation of `layer`.
    pub fn sequence_summaries(&self, layer: usize) -> Result<Vec<SequenceSummary>> {
        let probs = &self.layers[layer].probs;
        self.sequences
            .iter()
            .zip(&self.domains)
            .map(|(r, &d)| {
                Ok(SequenceSummary {
                    domain: d,
                    mean: crate::divergence::sequence_mean(&probs[r.clone()])?,
                    tokens: r.len(),
                })
            })
            .collect()
    }
}

/// Nodes produced by [`MoeModel::forward_graph`].
#[derive(Debug, Clone)]
pub struct GraphForward {
    pub logits: Var,
    /// `[T, N]` router probabilities per layer.
    pub layer_probs: Vec<Var>,
    /// `[T, d]` input and output of each MoE sublayer.
    pub moe_io: Vec<(Var, Var)>,
    pub trace: RoutingTrace,
    /// One leaf per parameter, in [`MoeModel::params`] order.
    pub param_vars: Vec<Var>,
}

impl MoeModel {
    /// Randomly initialised model; deterministic in `seed`.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let normal = Normal::new(0.0, config.init_std).map_err(|e| Error::Config(e.to_string()))?;
        let out_scale = 1.0 / (2.0 * config.num_layers as f64).sqrt();
        let mut params = Vec::new();
        let mut add = |name: String, shape: &[usize], kind: Init, rng: &mut ChaCha8Rng| -> usize {
            let tensor = match kind {
                Init::Normal(scale) => {
                    let n = shape.iter().product();
                    let data = (0..n).map(|_| normal.sample(rng) * scale).collect();
                    Tensor::new(shape.to_vec(), data).expect("positive shape")
                }
                Init::Ones => Tensor::filled(shape, 1.0),
                Init::Zeros => Tensor::zeros(shape),
            };
            params.push(Param {
                name,
                tensor,
                decay: matches!(kind, Init::Normal(_)),
            });
            params.len() - 1
        };
        let (d, inter, v) = (config.hidden_size, config.intermediate_size, config.vocab_size);
        let tok_emb = add("tok_emb".into(), &[v, d], Init::Normal(1.0), &mut rng);
        let pos_emb = add("pos_emb".into(), &[config.max_seq_len, d], Init::Normal(1.0), &mut rng);
        let mut layers = Vec::new();
        for l in 0..config.num_layers {
            let p = |s: &str| format!("layers.{l}.{s}");
            let ln1 = (
                add(p("ln1.gamma"), &[1, d], Init::Ones, &mut rng),
                add(p("ln1.beta"), &[1, d], Init::Zeros, &mut rng),
            );
            let wq = add(p("attn.wq"), &[d, d], Init::Normal(1.0), &mut rng);
            let wk = add(p("attn.wk"), &[d, d], Init::Normal(1.0), &mut rng);
            let wv = add(p("attn.wv"), &[d, d], Init::Normal(1.0), &mut rng);
            let wo = add(p("attn.wo"), &[d, d], Init::Normal(out_scale), &mut rng);
            let ln2 = (
                add(p("ln2.gamma"), &[1, d], Init::Ones, &mut rng),
                add(p("ln2.beta"), &[1, d], Init::Zeros, &mut rng),
            );
            let router = add(p("router"), &[config.num_experts, d], Init::Normal(1.0), &mut rng);
            let experts = (0..config.num_experts)
                .map(|e| {
                    [
                        add(p(&format!("experts.{e}.w_gate")), &[d, inter], Init::Normal(1.0), &mut rng),
                        add(p(&format!("experts.{e}.w_up")), &[d, inter], Init::Normal(1.0), &mut rng),
                        add(p(&format!("experts.{e}.w_down")), &[inter, d], Init::Normal(out_scale), &mut rng),
                    ]
                })
                .collect();
            layers.push(LayerIndex {
                ln1,
                wq,
                wk,
                wv,
                wo,
                ln2,
                router,
                experts,
            });
        }
        let ln_f = (
            add("ln_f.gamma".into(), &[1, d], Init::Ones, &mut rng),
            add("ln_f.beta".into(), &[1, d], Init::Zeros, &mut rng),
        );
        let lm_head = add("lm_head".into(), &[d, v], Init::Normal(1.0), &mut rng);
        Ok(Self {
            config,
            params,
            index: Index {
                tok_emb,
                pos_emb,
                layers,
                ln_f,
                lm_head,
            },
        })
    }

    /// Model with `config`'s layout and the given named tensors.
    pub fn from_named(config: ModelConfig, named: &[(String, Tensor)]) -> Result<Self> {
        let mut model = Self::new(config, 0)?;
        let lookup: HashMap<&str, &Tensor> = named.iter().map(|(n, t)| (n.as_str(), t)).collect();
        for p in &mut model.params {
            let t = lookup
                .get(p.name.as_str())
                .ok_or_else(|| Error::Checkpoint(format!("missing parameter {}", p.name)))?;
            if t.shape() != p.tensor.shape() {
                return Err(Error::Checkpoint(format!(
                    "parameter {} has shape {:?}, expected {:?}",
                    p.name,
                    t.shape(),
                    p.tensor.shape()
                )));
            }
            p.tensor = (*t).clone().with_grad(false);
        }
        Ok(model)
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &[Param] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Param] {
        &mut self.params
    }

    pub fn named_tensors(&self) -> Vec<(String, Tensor)> {
        self.params.iter().map(|p| (p.name.clone(), p.tensor.clone())).collect()
    }

    pub fn num_parameters(&self) -> usize {
        self.params.iter().map(|p| p.tensor.len()).sum()
    }

    fn layer_index(&self, layer: usize) -> Result<&LayerIndex> {
        self.index.layers.get(layer).ok_or(Error::OutOfRange {
            what: "layer",
            index: layer,
            limit: self.config.num_layers,
        })
    }

    pub fn router(&self, layer: usize) -> Result<&Tensor> {
        let i = self.layer_index(layer)?.router;
        Ok(&self.params[i].tensor)
    }

    pub fn router_mut(&mut self, layer: usize) -> Result<&mut Tensor> {
        let i = self.layer_index(layer)?.router;
        Ok(&mut self.params[i].tensor)
    }

    /// Mutable `(w_gate, w_up, w_down)` of every expert at `layer`, by expert index.
    pub fn expert_param_indices(&self, layer: usize) -> Result<Vec<[usize; 3]>> {
        Ok(self.layer_index(layer)?.experts.clone())
    }

    /// The MoE sublayer of `layer` as a standalone single-token layer.
    pub fn moe_layer(&self, layer: usize) -> Result<MoeLayer> {
        let li = self.layer_index(layer)?;
        Ok(MoeLayer {
            router: RouterWeights::new(self.params[li.router].tensor.clone())?,
            experts: li
                .experts
                .iter()
                .map(|e| ExpertFfn {
                    w_gate: self.params[e[0]].tensor.clone(),
                    w_up: self.params[e[1]].tensor.clone(),
                    w_down: self.params[e[2]].tensor.clone(),
                })
                .collect(),
            top_k: self.config.top_k,
        })
    }

    fn check_inputs(&self, sequences: &[Vec<usize>], domains: &[DomainId]) -> Result<()> {
        if sequences.is_empty() {
            return Err(Error::InvalidArgument("forward on an empty batch".into()));
        }
        if domains.len() != sequences.len() {
            return Err(Error::InvalidArgument(format!(
                "{} sequences but {} domain labels",
                sequences.len(),
                domains.len()
            )));
        }
        for s in sequences {
            if s.is_empty() {
                return Err(Error::InvalidArgument("empty sequence".into()));
            }
            if s.len() > self.config.max_seq_len {
                return Err(Error::InvalidArgument(format!(
                    "sequence of {} tokens exceeds max_seq_len {}",
                    s.len(),
                    self.config.max_seq_len
                )));
            }
            if let Some(&t) = s.iter().find(|&&t| t >= self.config.vocab_size) {
                return Err(Error::OutOfRange {
                    what: "token",
                    index: t,
                    limit: self.config.vocab_size,
                });
            }
        }
        Ok(())
    }

    /// Record a forward pass on `g`. With `grad`, parameter leaves require gradients.
    pub fn forward_graph(
        &self,
        g: &mut Graph,
        sequences: &[Vec<usize>],
        domains: &[DomainId],
        grad: bool,
    ) -> Result<GraphForward> {
        let param_vars: Vec<Var> = self
            .params
            .iter()
            .map(|p| g.leaf(p.tensor.clone().with_grad(grad)))
            .collect();
        self.forward_with_params(g, param_vars, sequences, domains)
    }

    /// Like [`MoeModel::forward_graph`] but reading parameters from existing
    /// nodes, one per entry of [`MoeModel::params`] and in that order.
    pub fn forward_with_params(
        &self,
        g: &mut Graph,
        param_vars: Vec<Var>,
        sequences: &[Vec<usize>],
        domains: &[DomainId],
    ) -> Result<GraphForward> {
        self.check_inputs(sequences, domains)?;
        if param_vars.len() != self.params.len() {
            return Err(Error::InvalidArgument(format!(
                "{} parameter nodes for {} parameters",
                param_vars.len(),
                self.params.len()
            )));
        }
        for (v, p) in param_vars.iter().zip(&self.params) {
            if g.value(*v).shape() != p.tensor.shape() {
                return Err(Error::Shape {
                    op: "forward_with_params",
                    detail: format!("{} is {:?}, expected {:?}", p.name, g.value(*v).shape(), p.tensor.shape()),
                });
            }
        }
        let cfg = &self.config;
        let pv = |i: usize| param_vars[i];

        let mut ranges = Vec::with_capacity(sequences.len());
        let mut tokens = Vec::new();
        let mut positions = Vec::new();
        for s in sequences {
            let start = tokens.len();
            tokens.extend_from_slice(s);
            positions.extend(0..s.len());
            ranges.push(start..tokens.len());
        }
        let t_total = tokens.len();

        let tok = g.gather_rows(pv(self.index.tok_emb), &tokens)?;
        let pos = g.gather_rows(pv(self.index.pos_emb), &positions)?;
        let mut x = g.add(tok, pos)?;

        let mut masks: HashMap<usize, Var> = HashMap::new();
        let mut layer_probs = Vec::with_capacity(cfg.num_layers);
        let mut moe_io = Vec::with_capacity(cfg.num_layers);
        let mut layer_traces = Vec::with_capacity(cfg.num_layers);
        let dh = cfg.head_dim();
        let scale = 1.0 / (dh as f64).sqrt();

        for li in &self.index.layers {
            // attention
            let h = g.layernorm(x, pv(li.ln1.0), pv(li.ln1.1), LN_EPS)?;
            let q = g.matmul(h, pv(li.wq))?;
            let k = g.matmul(h, pv(li.wk))?;
            let v = g.matmul(h, pv(li.wv))?;
            let mut seq_outs = Vec::with_capacity(ranges.len());
            for r in &ranges {
                let len = r.len();
                let mask = *masks.entry(len).or_insert_with(|| g.constant(causal_mask(len)));
                let mut heads = Vec::with_capacity(cfg.num_heads);
                for hd in 0..cfg.num_heads {
                    let cols = hd * dh..(hd + 1) * dh;
                    let qs = g.slice(q, r.clone(), cols.clone())?;
                    let ks = g.slice(k, r.clone(), cols.clone())?;
                    let vs = g.slice(v, r.clone(), cols)?;
                    let scores = g.matmul_nt(qs, ks)?;
                    let scores = g.scale(scores, scale)?;
                    let scores = g.add(scores, mask)?;
                    let att = g.softmax_rows(scores)?;
                    heads.push(g.matmul(att, vs)?);
                }
                seq_outs.push(g.concat_cols(&heads)?);
            }
            let attn = g.concat_rows(&seq_outs)?;
            let attn = g.matmul(attn, pv(li.wo))?;
            x = g.add(x, attn)?;

            // mixture of experts
            let h = g.layernorm(x, pv(li.ln2.0), pv(li.ln2.1), LN_EPS)?;
            let logits = g.matmul_nt(h, pv(li.router))?;
            let probs = g.softmax_rows(logits)?;
            let (moe, trace) = self.moe_block(g, h, probs, &li.experts, &param_vars, t_total)?;
            x = g.add(x, moe)?;
            moe_io.push((h, moe));
            layer_probs.push(probs);
            layer_traces.push(trace);
        }

        let h = g.layernorm(x, pv(self.index.ln_f.0), pv(self.index.ln_f.1), LN_EPS)?;
        let logits = g.matmul(h, pv(self.index.lm_head))?;
        Ok(GraphForward {
            logits,
            layer_probs,
            moe_io,
            trace: RoutingTrace {
                layers: layer_traces,
                sequences: ranges,
                domains: domains.to_vec(),
            },
            param_vars,
        })
    }

    fn moe_block(
        &self,
        g: &mut Graph,
        h: Var,
        probs: Var,
        experts: &[[usize; 3]],
        param_vars: &[Var],
        t_total: usize,
    ) -> Result<(Var, LayerTrace)> {
        let k = self.config.top_k;
        let p_val = g.value(probs).clone();
        let mut dists = Vec::with_capacity(t_total);
        let mut assignments = Vec::with_capacity(t_total);
        for t in 0..t_total {
            let d = ExpertDistribution::new_unchecked(p_val.row_slice(t).to_vec());
            assignments.push(topk_gate(&d, k)?);
            dists.push(d);
        }

        // renormalised gates; selection indices are constants
        let picked: Vec<Var> = (0..k)
            .map(|slot| {
                let idx: Vec<(usize, usize)> = assignments.iter().enumerate().map(|(t, a)| (t, a.selected[slot])).collect();
                g.gather_elems(probs, &idx)
            })
            .collect::<Result<_>>()?;
        let mut denom = picked[0];
        for &p in &picked[1..] {
            denom = g.add(denom, p)?;
        }
        let gates: Vec<Var> = picked.iter().map(|&p| g.div(p, denom)).collect::<Result<_>>()?;
        let gates_all = if k == 1 { gates[0] } else { g.concat_rows(&gates)? };

        let mut outputs = Vec::new();
        let mut dest = Vec::new();
        for (e, w) in experts.iter().enumerate() {
            let mut rows = Vec::new();
            let mut gate_rows = Vec::new();
            for (t, a) in assignments.iter().enumerate() {
                if let Some(slot) = a.selected.iter().position(|&s| s == e) {
                    rows.push(t);
                    gate_rows.push(slot * t_total + t);
                }
            }
            if rows.is_empty() {
                continue;
            }
            let xe = g.gather_rows(h, &rows)?;
            let a = g.matmul(xe, param_vars[w[0]])?;
            let b = g.matmul(xe, param_vars[w[1]])?;
            let a = g.silu(a)?;
            let hidden = g.mul(a, b)?;
            let ye = g.matmul(hidden, param_vars[w[2]])?;
            let ge = g.gather_rows(gates_all, &gate_rows)?;
            outputs.push(g.mul_col(ye, ge)?);
            dest.extend(rows);
        }
        let stacked = g.concat_rows(&outputs)?;
        let out = g.scatter_add_rows(stacked, &dest, t_total)?;
        Ok((
            out,
            LayerTrace {
                probs: dists,
                assignments,
            },
        ))
    }

    /// Forward pass returning next-token logits `[T, V]` and the routing trace.
    pub fn forward(&self, sequences: &[Vec<usize>], domains: &[DomainId]) -> Result<(Tensor, RoutingTrace)> {
        let mut g = Graph::new();
        let out = self.forward_graph(&mut g, sequences, domains, false)?;
        Ok((g.value(out.logits).clone(), out.trace))
    }

    /// Total next-token NLL (nats) and number of predicted tokens.
    pub fn nll(&self, sequences: &[Vec<usize>]) -> Result<(f64, usize)> {
        let domains = vec![0; sequences.len()];
        let (logits, trace) = self.forward(sequences, &domains)?;
        let (rows, targets) = lm_targets(sequences, &trace.sequences);
        let mut total = 0.0;
        for (&r, &t) in rows.iter().zip(&targets) {
            total += crate::diffengine::cross_entropy_mean(&Tensor::row(logits.row_slice(r).to_vec()), &[t])?;
        }
        Ok((total, rows.len()))
    }

    /// `exp(mean NLL)` over every predicted token of `sequences`.
    pub fn perplexity(&self, sequences: &[Vec<usize>]) -> Result<f64> {
        if sequences.is_empty() {
            return Err(Error::InvalidArgument("perplexity of an empty dataset".into()));
        }
        let mut total = 0.0;
        let mut count = 0;
        for chunk in sequences.chunks(16) {
            let (nll, n) = self.nll(chunk)?;
            total += nll;
            count += n;
        }
        if count == 0 {
            return Err(Error::InvalidArgument("no sequence has a next token to predict".into()));
        }
        Ok((total / count as f64).exp())
    }
}

enum Init {
    Normal(f64),
    Ones,
    Zeros,
}

fn causal_mask(len: usize) -> Tensor {
    let mut m = Tensor::zeros(&[len, len]);
    for i in 0..len {
        for v in &mut m.row_slice_mut(i)[i + 1..] {
            *v = MASK;
        }
    }
    m
}

/// Logit rows and their next-token targets: every position but the last of each sequence.
pub fn lm_targets(sequences: &[Vec<usize>], ranges: &[Range<usize>]) -> (Vec<usize>, Vec<usize>) {
    let mut rows = Vec::new();
    let mut targets = Vec::new();
    for (s, r) in sequences.iter().zip(ranges) {
        for i in 0..s.len().saturating_sub(1) {
            rows.push(r.start + i);
            targets.push(s[i + 1]);
        }
    }
    (rows, targets)
}
