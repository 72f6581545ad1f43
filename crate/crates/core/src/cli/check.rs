//! Invariant suite behind the `check` verb.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::data::DomainBatch;
use crate::diffengine::Stencil;
use crate::divergence::{decompose, generalized_jsd, generalized_jsd_entropy_form, proportionality_check};
use crate::error::Result;
use crate::model::{ModelConfig, MoeModel};
use crate::routing::ExpertDistribution;
use crate::trainer::{objective_grad_check, LossTerm, TrainConfig};

/// Outcome of one invariant.
#[derive(Debug, Clone, PartialEq)]
pub struct CheckOutcome {
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

fn outcome(name: &str, passed: bool, detail: String) -> CheckOutcome {
    CheckOutcome {
        name: name.to_string(),
        passed,
        detail,
    }
}

fn random_dist(rng: &mut ChaCha8Rng, n: usize, temperature: f64) -> Vec<f64> {
    let logits: Vec<f64> = (0..n)
        .map(|_| rng.sample::<f64, _>(StandardNormal) * temperature)
        .collect();
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = logits.iter().map(|l| (l - max).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|v| v / s).collect()
}

/// `D_total = D_inter + D_intra` on random labelled traces.
pub fn decomposition_identity(cases: usize, seed: u64) -> Result<CheckOutcome> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst: f64 = 0.0;
    for _ in 0..cases {
        let n = rng.gen_range(4..=64);
        let m = rng.gen_range(2..=8);
        let t = rng.gen_range(m.max(8)..=512);
        let temp = rng.gen_range(0.1..4.0);
        let tokens: Vec<(usize, ExpertDistribution)> = (0..t)
            .map(|i| {
                let d = if i < m { i } else { rng.gen_range(0..m) };
                (d, ExpertDistribution::new(random_dist(&mut rng, n, temp)).expect("softmax output"))
            })
            .collect();
        let refs: Vec<(usize, &ExpertDistribution)> = tokens.iter().map(|(d, p)| (*d, p)).collect();
        let r = decompose(&refs)?;
        worst = worst.max((r.d_total - r.d_inter - r.d_intra).abs());
    }
    Ok(outcome(
        "decomposition identity",
        worst <= 1e-10,
        format!("{cases} traces, max |D_total - D_inter - D_intra| = {worst:.3e}"),
    ))
}

/// KL form and entropy form of the generalised JSD agree.
pub fn jsd_dual_forms(cases: usize, seed: u64) -> Result<CheckOutcome> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst: f64 = 0.0;
    for _ in 0..cases {
        let n = rng.gen_range(2..=32);
        let m = rng.gen_range(2..=8);
        let dists: Vec<Vec<f64>> = (0..m).map(|_| random_dist(&mut rng, n, 2.0)).collect();
        let w = random_dist(&mut rng, m, 1.0);
        let refs: Vec<&[f64]> = dists.iter().map(Vec::as_slice).collect();
        let a = generalized_jsd(&refs, &w)?;
        let b = generalized_jsd_entropy_form(&refs, &w)?;
        worst = worst.max((a - b).abs());
    }
    Ok(outcome(
        "generalized JSD dual forms",
        worst <= 1e-12,
        format!("{cases} weighted sets, max |KL form - entropy form| = {worst:.3e}"),
    ))
}

/// `S_pair / D_inter -> M^2 / 4` as perturbations shrink.
pub fn proportionality_sweep(seed: u64) -> Result<CheckOutcome> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = 16;
    let scales = [1e-2, 1e-3, 1e-4];
    let mut passed = true;
    let mut detail = Vec::new();
    for m in [2usize, 3, 4, 6] {
        let base = random_dist(&mut rng, n, 0.5);
        let mut deltas: Vec<Vec<f64>> = (0..m)
            .map(|_| {
                let v: Vec<f64> = (0..n).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
                let mean = v.iter().sum::<f64>() / n as f64;
                v.into_iter().map(|x| (x - mean) * 0.02).collect()
            })
            .collect();
        // centre across perturbations
        for i in 0..n {
            let c = deltas.iter().map(|d| d[i]).sum::<f64>() / m as f64;
            for d in &mut deltas {
                d[i] -= c;
            }
        }
        let mut devs = Vec::new();
        for &t in &scales {
            let p = proportionality_check(&base, &deltas, t)?;
            let ratio = p.ratio.unwrap_or(f64::NAN);
            devs.push((ratio - p.predicted).abs() / p.predicted);
        }
        let ok = devs[1] <= 0.01 && devs.windows(2).all(|w| w[1] < w[0] || (w[0] == 0.0 && w[1] == 0.0));
        passed &= ok;
        detail.push(format!("M={m}: {}", devs.iter().map(|d| format!("{d:.2e}")).collect::<Vec<_>>().join(" ")));
    }
    Ok(outcome(
        "proportionality sweep",
        passed,
        format!("relative deviation at t=1e-2,1e-3,1e-4: {}", detail.join("; ")),
    ))
}

/// The one-layer model and two-domain batch used for gradient checks.
pub fn gradient_check_fixture(seed: u64) -> Result<(MoeModel, DomainBatch)> {
    let cfg = ModelConfig {
        num_layers: 1,
        hidden_size: 8,
        intermediate_size: 8,
        num_experts: 4,
        top_k: 2,
        num_heads: 2,
        vocab_size: 16,
        max_seq_len: 8,
        init_std: 0.5,
    };
    let model = MoeModel::new(cfg, seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xA5A5);
    let sequences: Vec<Vec<usize>> = (0..4)
        .map(|s| (0..6).map(|_| rng.gen_range(0..8) + 8 * (s % 2)).collect())
        .collect();
    let batch = DomainBatch {
        sequences,
        domains: vec![0, 1, 0, 1],
    };
    Ok((model, batch))
}

/// Backward against fourth-order central differences for every loss term.
pub fn gradient_checks(seed: u64) -> Result<Vec<CheckOutcome>> {
    let (model, batch) = gradient_check_fixture(seed)?;
    let config = TrainConfig::default();
    let mut out = Vec::new();
    for (term, name) in [
        (LossTerm::Lm, "gradient check L_LM"),
        (LossTerm::Lb, "gradient check L_LB"),
        (LossTerm::Ed, "gradient check L_ED"),
        (LossTerm::Final, "gradient check L_final"),
    ] {
        let r = objective_grad_check(&model, &batch, &config, term, 1e-3, Stencil::Central4)?;
        out.push(outcome(
            name,
            r.max_rel_error <= 1e-4,
            format!(
                "{} coordinates, max relative error {:.3e}",
                r.coordinates, r.max_rel_error
            ),
        ));
    }
    Ok(out)
}

/// Every invariant, in a fixed order.
pub fn run_all(seed: u64) -> Result<Vec<CheckOutcome>> {
    let mut out = vec![
        decomposition_identity(200, seed)?,
        jsd_dual_forms(200, seed.wrapping_add(1))?,
        proportionality_sweep(seed.wrapping_add(2))?,
    ];
    out.extend(gradient_checks(seed.wrapping_add(3))?);
    Ok(out)
}
