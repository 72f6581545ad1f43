//! Route a few tokens through one MoE layer of a fresh model.

use moediv::model::{ModelConfig, MoeModel};
use moediv::routing::moe_forward;

fn main() -> moediv::Result<()> {
    let model = MoeModel::new(ModelConfig { init_std: 0.5, ..ModelConfig::default() }, 3)?;
    let layer = model.moe_layer(0)?;
    let d = model.config().hidden_size;

    for t in 0..4 {
        let x: Vec<f64> = (0..d).map(|i| ((i * 7 + t * 13) % 17) as f64 / 8.0 - 1.0).collect();
        let out = moe_forward(&layer, &x)?;
        let probs: Vec<String> = out.probs.probs().iter().map(|p| format!("{p:.3}")).collect();
        println!("token {t}: p = [{}]", probs.join(" "));
        println!(
            "  experts {:?} gates {:?} |y| = {:.4}",
            out.assignment.selected,
            out.assignment.gates.iter().map(|g| format!("{g:.3}")).collect::<Vec<_>>(),
            out.y.iter().map(|v| v * v).sum::<f64>().sqrt()
        );
    }
    Ok(())
}
