//! Export activation heatmaps and ternary coordinates of a briefly trained model.

use moediv::analysis::{collect_routing, ternary_coords, ternary_csv, Activation, HeatmapMatrix};
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
    let routing = collect_routing(&model, &valsets)?;

    let layer = model.config().num_layers - 1;
    let soft = HeatmapMatrix::activation(&routing, layer, Activation::Soft)?;
    print!("{}", soft.to_csv(Some(&corpus.domains)));
    println!(
        "mean pairwise cosine {:.4}, mean row entropy {:.4}\n",
        soft.mean_pairwise_cosine().unwrap(),
        soft.mean_row_entropy()?
    );

    let inverse = HeatmapMatrix::inverse(&routing, layer, Activation::Hard)?;
    print!("{}", inverse.to_csv(Some(&corpus.domains)));
    println!();
    print!("{}", ternary_csv(&ternary_coords(&inverse)?));
    Ok(())
}
