//! Run the invariant suite that backs `moediv check`.

use moediv::cli::check::run_all;

fn main() -> moediv::Result<()> {
    let seed = std::env::args().nth(1).map_or(0, |s| s.parse().expect("seed"));
    let outcomes = run_all(seed)?;
    for o in &outcomes {
        println!("{} {}: {}", if o.passed { "PASS" } else { "FAIL" }, o.name, o.detail);
    }
    if outcomes.iter().any(|o| !o.passed) {
        std::process::exit(1);
    }
    Ok(())
}
