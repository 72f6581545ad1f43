//! Train the toy model on the synthetic corpus with and without the
//! divergence term and compare inter-domain diversity.
//!
//! Usage: cargo run --release --example train_toy [steps]

use moediv::data::{synth_corpus, SynthSpec};
use moediv::trainer::{read_metrics, run_training, RunConfig, RunOptions};

fn main() -> moediv::Result<()> {
    let steps: u64 = std::env::args().nth(1).map_or(300, |s| s.parse().expect("steps"));
    let corpus = synth_corpus(&SynthSpec::three_domains(50_000), 0)?;
    let dir = tempfile::tempdir()?;

    for beta in [5e-4, 0.0] {
        let mut config = RunConfig::default();
        config.train.total_steps = steps;
        config.train.checkpoint_interval = steps;
        config.train.beta = beta;
        config.train.seed = 1;
        let out = dir.path().join(format!("beta-{beta}"));
        let summary = run_training(&config, &corpus, &out, &RunOptions::default())?;
        let metrics = read_metrics(&summary.metrics_path)?;
        let tail = &metrics[metrics.len().saturating_sub(50)..];
        let mean = |f: &dyn Fn(&moediv::trainer::StepMetrics) -> f64| tail.iter().map(f).sum::<f64>() / tail.len() as f64;
        println!(
            "beta {beta:<6} l_lm {:.4}  l_ed {:.3}  d_inter {:.4}  d_intra {:.4}",
            mean(&|m| m.losses.l_lm),
            mean(&|m| m.losses.l_ed),
            mean(&|m| m.d_inter.iter().sum::<f64>() / m.d_inter.len() as f64),
            mean(&|m| m.d_intra.iter().sum::<f64>() / m.d_intra.len() as f64),
        );
        println!("  checkpoints: {:?}", summary.checkpoints.iter().map(|p| p.file_name().unwrap()).collect::<Vec<_>>());
    }
    Ok(())
}
