//! Load-balancing and expert-divergence losses on hand-built routing.

use moediv::divergence::{domain_mean, expert_divergence_loss, SequenceSummary};
use moediv::losses::{compose, expert_usage, load_balance_loss, DEFAULT_ALPHA, DEFAULT_BETA};
use moediv::routing::{topk_gate, ExpertDistribution};

fn main() -> moediv::Result<()> {
    let k = 2;
    let skewed: Vec<ExpertDistribution> = (0..6)
        .map(|t| {
            let mut p = vec![0.05; 4];
            p[t % 2] = 0.85;
            ExpertDistribution::new(p).unwrap()
        })
        .collect();
    let sel: Vec<Vec<usize>> = skewed.iter().map(|p| topk_gate(p, k).unwrap().selected).collect();
    println!("usage f = {:?}", expert_usage(&sel, 4)?);
    println!("L_LB skewed  = {:.4}", load_balance_loss(&skewed, &sel)?);

    let uniform = vec![ExpertDistribution::uniform(4); 6];
    let sel: Vec<Vec<usize>> = uniform.iter().map(|p| topk_gate(p, k).unwrap().selected).collect();
    println!("L_LB uniform = {:.4} (K = {k})", load_balance_loss(&uniform, &sel)?);

    let seq = |domain, p: Vec<f64>| SequenceSummary {
        domain,
        mean: ExpertDistribution::new(p).unwrap(),
        tokens: 16,
    };
    let close = domain_mean(&[seq(0, vec![0.3, 0.3, 0.2, 0.2]), seq(1, vec![0.25, 0.25, 0.25, 0.25])])?;
    let apart = domain_mean(&[seq(0, vec![0.7, 0.1, 0.1, 0.1]), seq(1, vec![0.1, 0.1, 0.1, 0.7])])?;
    let same = domain_mean(&[seq(0, vec![0.25; 4]), seq(1, vec![0.25; 4])])?;
    for (name, aggs) in [("identical", &same), ("close", &close), ("apart", &apart)] {
        println!("L_ED {name:9} = {:.4}", expert_divergence_loss(aggs, 1e-8)?.value);
    }

    let b = compose(2.31, 2.05, expert_divergence_loss(&apart, 1e-8)?.value, DEFAULT_ALPHA, DEFAULT_BETA)?;
    println!("L_final = {:.6} from {b:?}", b.l_final);
    Ok(())
}
