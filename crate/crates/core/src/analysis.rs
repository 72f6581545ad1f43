//! Post-hoc specialisation analyses on a frozen model.
//!
//! Validation sets are per-domain lists of token sequences. Every analysis
//! runs forward passes in chunks of [`EVAL_CHUNK`] sequences.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::divergence::{decompose, entropy, DivergenceReport, DomainId};
use crate::error::{Error, Result};
use crate::model::MoeModel;
use crate::routing::ExpertDistribution;

pub const EVAL_CHUNK: usize = 16;

/// Validation sequences keyed by domain.
pub type ValSets = BTreeMap<DomainId, Vec<Vec<usize>>>;

fn check_valsets(valsets: &ValSets) -> Result<()> {
    if valsets.is_empty() || valsets.values().any(Vec::is_empty) {
        return Err(Error::InvalidArgument("validation sets must be nonempty".into()));
    }
    Ok(())
}

pub fn is_identity(perm: &[usize]) -> bool {
    perm.iter().enumerate().all(|(i, &p)| i == p)
}

pub fn invert_permutation(perm: &[usize]) -> Vec<usize> {
    let mut inv = vec![0; perm.len()];
    for (i, &p) in perm.iter().enumerate() {
        inv[p] = i;
    }
    inv
}

/// Copy of `model` whose router at `layer` has rows `W'[i] = W[perm[i]]`.
pub fn apply_router_permutation(model: &MoeModel, layer: usize, perm: &[usize]) -> Result<MoeModel> {
    let w = model.router(layer)?;
    let n = w.rows();
    let mut seen = vec![false; n];
    if perm.len() != n || perm.iter().any(|&p| p >= n || std::mem::replace(&mut seen[p], true)) {
        return Err(Error::InvalidArgument(format!("{perm:?} is not a permutation of 0..{n}")));
    }
    let mut out = model.clone();
    let src = w.clone();
    let dst = out.router_mut(layer)?;
    for (i, &p) in perm.iter().enumerate() {
        dst.row_slice_mut(i).copy_from_slice(src.row_slice(p));
    }
    Ok(out)
}

/// Uniformly random router-row permutation at `layer`. The identity draw is
/// rejected whenever another permutation exists.
pub fn permute_router(model: &MoeModel, layer: usize, seed: u64) -> Result<(MoeModel, Vec<usize>)> {
    let n = model.router(layer)?.rows();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut perm: Vec<usize> = (0..n).collect();
    loop {
        perm.shuffle(&mut rng);
        if n < 2 || !is_identity(&perm) {
            break;
        }
    }
    Ok((apply_router_permutation(model, layer, &perm)?, perm))
}

/// Perplexity change of one domain under one permutation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DomainDelta {
    pub layer: usize,
    pub domain: DomainId,
    pub ppl_orig: f64,
    pub ppl_shuf: f64,
    pub delta: f64,
    pub seed: u64,
    pub permutation: Vec<usize>,
}

/// One permutation draw at one layer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PermutationResult {
    pub layer: usize,
    pub seed: u64,
    pub permutation: Vec<usize>,
    pub domains: Vec<DomainDelta>,
}

/// Several draws at one layer and their per-domain mean.
#[derive(Debug, Clone, PartialEq)]
pub struct DeltaPpl {
    pub layer: usize,
    pub draws: Vec<PermutationResult>,
    pub mean_delta: BTreeMap<DomainId, f64>,
}

impl DeltaPpl {
    /// Mean over domains of the per-domain mean.
    pub fn overall(&self) -> f64 {
        self.mean_delta.values().sum::<f64>() / self.mean_delta.len() as f64
    }

    /// Every draw's rows, ready for JSONL export.
    pub fn records(&self) -> Vec<&DomainDelta> {
        self.draws.iter().flat_map(|d| &d.domains).collect()
    }
}

/// Perplexity of every validation domain.
pub fn domain_perplexities(model: &MoeModel, valsets: &ValSets) -> Result<BTreeMap<DomainId, f64>> {
    check_valsets(valsets)?;
    valsets
        .iter()
        .map(|(&d, seqs)| Ok((d, model.perplexity(seqs)?)))
        .collect()
}

/// ΔPPL of one explicit permutation at `layer`.
pub fn delta_ppl_for(
    model: &MoeModel,
    layer: usize,
    valsets: &ValSets,
    perm: &[usize],
    seed: u64,
    original: &BTreeMap<DomainId, f64>,
) -> Result<PermutationResult> {
    let shuffled = apply_router_permutation(model, layer, perm)?;
    let mut domains = Vec::new();
    for (&d, seqs) in valsets {
        let ppl_orig = *original
            .get(&d)
            .ok_or_else(|| Error::InvalidArgument(format!("no baseline perplexity for domain {d}")))?;
        let ppl_shuf = shuffled.perplexity(seqs)?;
        domains.push(DomainDelta {
            layer,
            domain: d,
            ppl_orig,
            ppl_shuf,
            delta: ppl_shuf - ppl_orig,
            seed,
            permutation: perm.to_vec(),
        });
    }
    Ok(PermutationResult {
        layer,
        seed,
        permutation: perm.to_vec(),
        domains,
    })
}

/// Mean ΔPPL over `draws` random permutations; draw `i` uses seed `seed + i`.
pub fn delta_ppl(model: &MoeModel, layer: usize, valsets: &ValSets, seed: u64, draws: usize) -> Result<DeltaPpl> {
    if draws == 0 {
        return Err(Error::InvalidArgument("draws must be positive".into()));
    }
    model.router(layer)?;
    let original = domain_perplexities(model, valsets)?;
    let mut results = Vec::with_capacity(draws);
    for i in 0..draws {
        let s = seed.wrapping_add(i as u64);
        let (_, perm) = permute_router(model, layer, s)?;
        results.push(delta_ppl_for(model, layer, valsets, &perm, s, &original)?);
    }
    let mut mean_delta = BTreeMap::new();
    for &d in valsets.keys() {
        let sum: f64 = results
            .iter()
            .flat_map(|r| &r.domains)
            .filter(|x| x.domain == d)
            .map(|x| x.delta)
            .sum();
        mean_delta.insert(d, sum / draws as f64);
    }
    Ok(DeltaPpl {
        layer,
        draws: results,
        mean_delta,
    })
}

/// Router statistics of one layer accumulated per domain.
#[derive(Debug, Clone, PartialEq)]
pub struct DomainRouting {
    /// Sum of soft probabilities over the domain's tokens.
    pub soft: Vec<f64>,
    /// Top-K selection counts.
    pub hard: Vec<u64>,
    pub tokens: usize,
}

/// Per-layer, per-domain routing statistics over validation sets.
#[derive(Debug, Clone, PartialEq)]
pub struct ValRouting {
    pub num_experts: usize,
    pub layers: Vec<BTreeMap<DomainId, DomainRouting>>,
}

pub fn collect_routing(model: &MoeModel, valsets: &ValSets) -> Result<ValRouting> {
    check_valsets(valsets)?;
    let cfg = model.config();
    let n = cfg.num_experts;
    let mut layers: Vec<BTreeMap<DomainId, DomainRouting>> = vec![BTreeMap::new(); cfg.num_layers];
    for (&d, seqs) in valsets {
        for chunk in seqs.chunks(EVAL_CHUNK) {
            let (_, trace) = model.forward(chunk, &vec![d; chunk.len()])?;
            for (l, lt) in trace.layers.iter().enumerate() {
                let acc = layers[l].entry(d).or_insert_with(|| DomainRouting {
                    soft: vec![0.0; n],
                    hard: vec![0; n],
                    tokens: 0,
                });
                for (p, a) in lt.probs.iter().zip(&lt.assignments) {
                    for (s, v) in acc.soft.iter_mut().zip(p.probs()) {
                        *s += v;
                    }
                    for &e in &a.selected {
                        acc.hard[e] += 1;
                    }
                    acc.tokens += 1;
                }
            }
        }
    }
    Ok(ValRouting { num_experts: n, layers })
}

/// Which router statistic a heatmap is built from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    /// Mean router probability.
    Soft,
    /// Top-K selection frequency.
    Hard,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum HeatmapKind {
    /// Rows are domains, columns experts.
    DomainByExpert,
    /// Rows are experts, columns domains.
    ExpertByDomain,
}

/// Row-normalised activation frequencies.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HeatmapMatrix {
    pub kind: HeatmapKind,
    pub layer: usize,
    pub domains: Vec<DomainId>,
    pub num_experts: usize,
    pub values: Vec<Vec<f64>>,
    /// Rows replaced by a uniform row because they had no mass.
    pub flagged: Vec<bool>,
}

fn normalise(row: &[f64]) -> (Vec<f64>, bool) {
    let s: f64 = row.iter().sum();
    if s > 0.0 {
        (row.iter().map(|v| v / s).collect(), false)
    } else {
        (vec![1.0 / row.len() as f64; row.len()], true)
    }
}

impl HeatmapMatrix {
    fn layer_stats(routing: &ValRouting, layer: usize) -> Result<&BTreeMap<DomainId, DomainRouting>> {
        routing.layers.get(layer).ok_or(Error::OutOfRange {
            what: "layer",
            index: layer,
            limit: routing.layers.len(),
        })
    }

    /// Domain rows over experts from collected statistics.
    pub fn activation(routing: &ValRouting, layer: usize, mode: Activation) -> Result<Self> {
        let stats = Self::layer_stats(routing, layer)?;
        let mut values = Vec::new();
        let mut flagged = Vec::new();
        for r in stats.values() {
            let raw: Vec<f64> = match mode {
                Activation::Soft => r.soft.iter().map(|v| v / r.tokens as f64).collect(),
                Activation::Hard => r.hard.iter().map(|&c| c as f64).collect(),
            };
            let (row, flag) = normalise(&raw);
            values.push(row);
            flagged.push(flag);
        }
        Ok(Self {
            kind: HeatmapKind::DomainByExpert,
            layer,
            domains: stats.keys().copied().collect(),
            num_experts: routing.num_experts,
            values,
            flagged,
        })
    }

    /// Expert rows over domains: `P(domain | expert)`.
    pub fn inverse(routing: &ValRouting, layer: usize, mode: Activation) -> Result<Self> {
        let stats = Self::layer_stats(routing, layer)?;
        let mut values = Vec::new();
        let mut flagged = Vec::new();
        for e in 0..routing.num_experts {
            let raw: Vec<f64> = stats
                .values()
                .map(|r| match mode {
                    Activation::Soft => r.soft[e],
                    Activation::Hard => r.hard[e] as f64,
                })
                .collect();
            let (row, flag) = normalise(&raw);
            values.push(row);
            flagged.push(flag);
        }
        Ok(Self {
            kind: HeatmapKind::ExpertByDomain,
            layer,
            domains: stats.keys().copied().collect(),
            num_experts: routing.num_experts,
            values,
            flagged,
        })
    }

    fn labels(&self, names: Option<&[String]>) -> (Vec<String>, Vec<String>) {
        let domain = |d: DomainId| names.and_then(|n| n.get(d)).cloned().unwrap_or_else(|| format!("domain{d}"));
        let doms: Vec<String> = self.domains.iter().map(|&d| domain(d)).collect();
        let exps: Vec<String> = (0..self.num_experts).map(|e| format!("expert{e}")).collect();
        match self.kind {
            HeatmapKind::DomainByExpert => (doms, exps),
            HeatmapKind::ExpertByDomain => (exps, doms),
        }
    }

    /// CSV with a one-line header; the last column marks flagged rows.
    pub fn to_csv(&self, domain_names: Option<&[String]>) -> String {
        let (rows, cols) = self.labels(domain_names);
        let mut out = String::from("row");
        for c in &cols {
            out.push(',');
            out.push_str(c);
        }
        out.push_str(",flagged\n");
        for ((label, row), flag) in rows.iter().zip(&self.values).zip(&self.flagged) {
            out.push_str(label);
            for v in row {
                write!(out, ",{v}").expect("write to string");
            }
            writeln!(out, ",{}", u8::from(*flag)).expect("write to string");
        }
        out
    }

    pub fn write_csv(&self, path: &Path, domain_names: Option<&[String]>) -> Result<()> {
        fs::write(path, self.to_csv(domain_names))?;
        Ok(())
    }

    /// Mean cosine similarity over all pairs of rows.
    pub fn mean_pairwise_cosine(&self) -> Option<f64> {
        let n = self.values.len();
        if n < 2 {
            return None;
        }
        let mut total = 0.0;
        let mut pairs = 0;
        for i in 0..n {
            for j in i + 1..n {
                total += cosine(&self.values[i], &self.values[j]);
                pairs += 1;
            }
        }
        Some(total / pairs as f64)
    }

    /// Mean Shannon entropy (nats) of the rows.
    pub fn mean_row_entropy(&self) -> Result<f64> {
        let mut total = 0.0;
        for r in &self.values {
            total += entropy(r)?;
        }
        Ok(total / self.values.len() as f64)
    }
}

pub fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    dot / (na * nb)
}

/// Domain-by-expert mean soft activation at `layer`.
pub fn activation_heatmap(model: &MoeModel, layer: usize, valsets: &ValSets) -> Result<HeatmapMatrix> {
    model.router(layer)?;
    HeatmapMatrix::activation(&collect_routing(model, valsets)?, layer, Activation::Soft)
}

/// Expert-by-domain selection frequencies at `layer`.
pub fn inverse_heatmap(model: &MoeModel, layer: usize, valsets: &ValSets) -> Result<HeatmapMatrix> {
    model.router(layer)?;
    HeatmapMatrix::inverse(&collect_routing(model, valsets)?, layer, Activation::Hard)
}

/// One expert on the three-domain simplex.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TernaryPoint {
    pub expert: usize,
    pub x: f64,
    pub y: f64,
    pub barycentric: [f64; 3],
    pub flagged: bool,
}

/// Planar simplex coordinates with A at (0,0), B at (1,0), C at (1/2, √3/2).
pub fn ternary_coords(inverse: &HeatmapMatrix) -> Result<Vec<TernaryPoint>> {
    if inverse.kind != HeatmapKind::ExpertByDomain {
        return Err(Error::InvalidArgument("ternary coordinates need an expert-by-domain matrix".into()));
    }
    if inverse.domains.len() != 3 {
        return Err(Error::InvalidArgument(format!(
            "ternary coordinates need exactly 3 domain columns, got {}",
            inverse.domains.len()
        )));
    }
    let h = 3f64.sqrt() / 2.0;
    Ok(inverse
        .values
        .iter()
        .zip(&inverse.flagged)
        .enumerate()
        .map(|(e, (r, &flagged))| TernaryPoint {
            expert: e,
            x: r[1] + 0.5 * r[2],
            y: h * r[2],
            barycentric: [r[0], r[1], r[2]],
            flagged,
        })
        .collect())
}

pub fn ternary_csv(points: &[TernaryPoint]) -> String {
    let mut out = String::from("expert,x,y,p_a,p_b,p_c,flagged\n");
    for p in points {
        writeln!(
            out,
            "{},{},{},{},{},{},{}",
            p.expert,
            p.x,
            p.y,
            p.barycentric[0],
            p.barycentric[1],
            p.barycentric[2],
            u8::from(p.flagged)
        )
        .expect("write to string");
    }
    out
}

/// Per-layer decomposition of router diversity over all validation tokens.
pub fn divergence_report(model: &MoeModel, valsets: &ValSets) -> Result<Vec<DivergenceReport>> {
    check_valsets(valsets)?;
    let layers = model.config().num_layers;
    let mut tokens: Vec<Vec<(DomainId, ExpertDistribution)>> = vec![Vec::new(); layers];
    for (&d, seqs) in valsets {
        for chunk in seqs.chunks(EVAL_CHUNK) {
            let (_, trace) = model.forward(chunk, &vec![d; chunk.len()])?;
            for (l, lt) in trace.layers.into_iter().enumerate() {
                tokens[l].extend(lt.probs.into_iter().map(|p| (d, p)));
            }
        }
    }
    tokens
        .iter()
        .map(|t| decompose(&t.iter().map(|(d, p)| (*d, p)).collect::<Vec<_>>()))
        .collect()
}

pub fn divergence_csv(reports: &[DivergenceReport]) -> String {
    let mut out = String::from("layer,d_total,d_inter,d_intra\n");
    for (l, r) in reports.iter().enumerate() {
        writeln!(out, "{l},{},{},{}", r.d_total, r.d_inter, r.d_intra).expect("write to string");
    }
    out
}

/// JSONL with one record per (draw, domain).
pub fn delta_ppl_jsonl(results: &[DeltaPpl]) -> Result<String> {
    let mut out = String::new();
    for r in results {
        for rec in r.records() {
            out.push_str(&serde_json::to_string(rec)?);
            out.push('\n');
        }
    }
    Ok(out)
}

pub fn delta_ppl_csv(results: &[DeltaPpl]) -> String {
    let mut out = String::from("layer,domain,mean_delta\n");
    for r in results {
        for (d, v) in &r.mean_delta {
            writeln!(out, "{},{d},{v}", r.layer).expect("write to string");
        }
    }
    out
}
