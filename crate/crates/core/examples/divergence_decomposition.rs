//! Split routing diversity of a labelled trace into inter- and intra-domain parts.

use moediv::divergence::{decompose, generalized_jsd, generalized_jsd_entropy_form, proportionality_check};
use moediv::routing::ExpertDistribution;

fn softmax(z: &[f64]) -> Vec<f64> {
    let m = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = z.iter().map(|v| (v - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.iter().map(|v| v / s).collect()
}

fn main() -> moediv::Result<()> {
    let n = 8;
    // domain d prefers experts 2d and 2d+1
    let tokens: Vec<(usize, ExpertDistribution)> = (0..120)
        .map(|t| {
            let d = t % 3;
            let logits: Vec<f64> = (0..n)
                .map(|i| if i / 2 == d { 2.0 } else { 0.0 } + ((t * 31 + i * 7) % 11) as f64 * 0.1)
                .collect();
            (d, ExpertDistribution::new(softmax(&logits)).unwrap())
        })
        .collect();
    let refs: Vec<_> = tokens.iter().map(|(d, p)| (*d, p)).collect();
    let r = decompose(&refs)?;
    println!("D_total {:.6}  D_inter {:.6}  D_intra {:.6}", r.d_total, r.d_inter, r.d_intra);
    println!("residual {:.3e}", r.d_total - r.d_inter - r.d_intra);
    for (j, row) in r.jsd.iter().enumerate() {
        println!("jsd[{j}] = {:?}", row.iter().map(|v| format!("{v:.4}")).collect::<Vec<_>>());
    }

    let means: Vec<&[f64]> = r.domains.iter().map(|a| a.mean.probs()).collect();
    let w = vec![1.0 / 3.0; 3];
    println!(
        "generalized JSD: KL form {:.12}, entropy form {:.12}",
        generalized_jsd(&means, &w)?,
        generalized_jsd_entropy_form(&means, &w)?
    );

    let base = vec![1.0 / n as f64; n];
    // opposing pairs so the perturbations cancel
    let deltas: Vec<Vec<f64>> = (0..4)
        .map(|j| {
            let sign = if j < 2 { 1.0 } else { -1.0 };
            let a = j % 2;
            (0..n).map(|i| if i == a { 0.03 * sign } else if i == a + 4 { -0.03 * sign } else { 0.0 }).collect()
        })
        .collect();
    for t in [1e-1, 1e-2, 1e-3] {
        let p = proportionality_check(&base, &deltas, t)?;
        println!("t={t:e}: S_pair/D_inter = {:.6} (M^2/4 = {})", p.ratio.unwrap(), p.predicted);
    }
    Ok(())
}
