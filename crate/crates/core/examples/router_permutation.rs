//! Shuffle router rows of a briefly trained model and measure the
//! perplexity change per domain.

use moediv::analysis::{delta_ppl, domain_perplexities};
use moediv::data::{synth_corpus, SynthSpec};
use moediv::trainer::{run_training, split_corpus, RunConfig, RunOptions};

fn main() -> moediv::Result<()> {
    let corpus = synth_corpus(&SynthSpec::three_domains(30_000), 0)?;
    let mut config = RunConfig::default();
    config.train.total_steps = 200;
    config.train.checkpoint_interval = 200;
    config.data.val_per_domain = 40;
    let dir = tempfile::tempdir()?;
    let model = run_training(&config, &corpus, dir.path(), &RunOptions::default())?.model;
    let (_, valsets) = split_corpus(&corpus, &config)?;

    for (d, ppl) in domain_perplexities(&model, &valsets)? {
        println!("{:6} ppl {ppl:.3}", corpus.domains[d]);
    }
    for layer in 0..model.config().num_layers {
        let r = delta_ppl(&model, layer, &valsets, 0, 3)?;
        for draw in &r.draws {
            println!("layer {layer} permutation {:?}", draw.permutation);
        }
        for (d, v) in &r.mean_delta {
            println!("layer {layer} {:6} mean dPPL {v:+.4}", corpus.domains[*d]);
        }
    }
    Ok(())
}
