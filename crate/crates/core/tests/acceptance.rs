//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits
//! nonzero if any criterion fails.

use std::collections::BTreeMap;
use std::path::Path;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use moediv::analysis::{
    activation_heatmap, collect_routing, delta_ppl, inverse_heatmap, ternary_coords, ternary_csv, Activation,
    DeltaPpl, HeatmapMatrix, ValSets,
};
use moediv::cli::check::gradient_check_fixture;
use moediv::data::{synth_corpus, Corpus, SynthSpec};
use moediv::diffengine::Stencil;
use moediv::divergence::{
    decompose, expert_divergence_loss, generalized_jsd, generalized_jsd_entropy_form, jsd_pair,
    proportionality_check, DomainAggregate,
};
use moediv::losses::load_balance_loss;
use moediv::model::{ModelConfig, MoeModel};
use moediv::routing::{topk_gate, ExpertDistribution};
use moediv::trainer::{
    evaluate_objective, objective_grad_check, read_metrics, run_training, split_corpus, step_gradients, LossTerm,
    RunConfig, RunOptions, StepMetrics, TrainConfig,
};

type Outcome = Result<(bool, String), String>;

fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = logits.iter().map(|l| (l - max).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|v| v / s).collect()
}

fn random_dist(rng: &mut ChaCha8Rng, n: usize, temperature: f64) -> Vec<f64> {
    let logits: Vec<f64> = (0..n).map(|_| rng.sample::<f64, _>(StandardNormal) * temperature).collect();
    softmax(&logits)
}

fn kl(p: &[f64], q: &[f64]) -> f64 {
    p.iter()
        .zip(q)
        .filter(|(a, _)| **a > 0.0)
        .map(|(a, b)| a * (a / b).ln())
        .sum()
}

fn mean_of(rows: &[&[f64]]) -> Vec<f64> {
    let mut m = vec![0.0; rows[0].len()];
    for r in rows {
        for (a, v) in m.iter_mut().zip(r.iter()) {
            *a += v;
        }
    }
    m.iter().map(|v| v / rows.len() as f64).collect()
}

/// Token-weighted total, inter and intra diversity in KL form.
fn decomposition_oracle(tokens: &[(usize, Vec<f64>)]) -> (f64, f64, f64) {
    let all: Vec<&[f64]> = tokens.iter().map(|(_, p)| p.as_slice()).collect();
    let global = mean_of(&all);
    let t = tokens.len() as f64;
    let d_total = all.iter().map(|p| kl(p, &global)).sum::<f64>() / t;
    let mut groups: BTreeMap<usize, Vec<&[f64]>> = BTreeMap::new();
    for (d, p) in tokens {
        groups.entry(*d).or_default().push(p);
    }
    let (mut inter, mut intra) = (0.0, 0.0);
    for rows in groups.values() {
        let w = rows.len() as f64 / t;
        let m = mean_of(rows);
        inter += w * kl(&m, &global);
        intra += w * rows.iter().map(|p| kl(p, &m)).sum::<f64>() / rows.len() as f64;
    }
    (d_total, inter, intra)
}

fn criterion_1() -> Outcome {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(101);
    let (mut identity, mut oracle) = (0.0f64, 0.0f64);
    for _ in 0..1000 {
        let n = rng.gen_range(4..=64);
        let m = rng.gen_range(2..=8);
        let t = rng.gen_range(8..=512);
        let temp = rng.gen_range(0.1..4.0);
        let tokens: Vec<(usize, Vec<f64>)> = (0..t)
            .map(|i| {
                let d = if i < m { i } else { rng.gen_range(0..m) };
                (d, random_dist(&mut rng, n, temp))
            })
            .collect();
        let dists: Vec<(usize, ExpertDistribution)> = tokens
            .iter()
            .map(|(d, p)| (*d, ExpertDistribution::new(p.clone()).unwrap()))
            .collect();
        let refs: Vec<(usize, &ExpertDistribution)> = dists.iter().map(|(d, p)| (*d, p)).collect();
        let r = decompose(&refs).map_err(|e| e.to_string())?;
        identity = identity.max((r.d_total - r.d_inter - r.d_intra).abs());
        let (ot, oi, oa) = decomposition_oracle(&tokens);
        oracle = oracle
            .max((r.d_total - ot).abs())
            .max((r.d_inter - oi).abs())
            .max((r.d_intra - oa).abs());
    }
    let elapsed = start.elapsed();
    Ok((
        identity <= 1e-10 && oracle <= 1e-10 && elapsed < Duration::from_secs(10),
        format!(
            "1000 traces, max identity residual {identity:.2e}, max deviation from KL-form oracle {oracle:.2e}, {:.2}s",
            elapsed.as_secs_f64()
        ),
    ))
}

fn criterion_2() -> Outcome {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(202);
    let mut worst = 0.0f64;
    for _ in 0..1000 {
        let n = rng.gen_range(2..=64);
        let m = rng.gen_range(2..=8);
        let temp = rng.gen_range(0.1..4.0);
        let dists: Vec<Vec<f64>> = (0..m).map(|_| random_dist(&mut rng, n, temp)).collect();
        let w = random_dist(&mut rng, m, 1.0);
        let refs: Vec<&[f64]> = dists.iter().map(Vec::as_slice).collect();
        let a = generalized_jsd(&refs, &w).map_err(|e| e.to_string())?;
        let b = generalized_jsd_entropy_form(&refs, &w).map_err(|e| e.to_string())?;
        worst = worst.max((a - b).abs());
    }
    let elapsed = start.elapsed();
    Ok((
        worst <= 1e-12 && elapsed < Duration::from_secs(5),
        format!(
            "1000 weighted sets, max |KL form - entropy form| {worst:.2e}, {:.2}s",
            elapsed.as_secs_f64()
        ),
    ))
}

fn criterion_3() -> Outcome {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(303);
    let n = 16;
    let scales = [1e-2, 1e-3, 1e-4];
    let mut passed = true;
    let mut worst_at_1e3 = 0.0f64;
    let mut worst_cross = 0.0f64;
    let mut failures = Vec::new();
    for m in [2usize, 3, 4, 6] {
        for instance in 0..5 {
            let base = random_dist(&mut rng, n, 0.5);
            let mut deltas: Vec<Vec<f64>> = (0..m)
                .map(|_| {
                    let v: Vec<f64> = (0..n).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
                    let mean = v.iter().sum::<f64>() / n as f64;
                    v.into_iter().map(|x| (x - mean) * 0.02).collect()
                })
                .collect();
            for i in 0..n {
                let c = deltas.iter().map(|d| d[i]).sum::<f64>() / m as f64;
                for d in &mut deltas {
                    d[i] -= c;
                }
            }
            let mut devs = Vec::new();
            for &t in &scales {
                let p = proportionality_check(&base, &deltas, t).map_err(|e| e.to_string())?;
                let ratio = p.ratio.ok_or("zero D_inter")?;
                devs.push((ratio - m as f64 * m as f64 / 4.0).abs() / (m as f64 * m as f64 / 4.0));
                if t == 1e-2 {
                    let points: Vec<Vec<f64>> = deltas
                        .iter()
                        .map(|d| base.iter().zip(d).map(|(b, x)| b + t * x).collect())
                        .collect();
                    let mut s_pair = 0.0;
                    for j in 0..m {
                        for k in j + 1..m {
                            s_pair += jsd_pair(&points[j], &points[k]).map_err(|e| e.to_string())?;
                        }
                    }
                    let refs: Vec<&[f64]> = points.iter().map(Vec::as_slice).collect();
                    let d_inter =
                        generalized_jsd(&refs, &vec![1.0 / m as f64; m]).map_err(|e| e.to_string())?;
                    worst_cross = worst_cross
                        .max((s_pair - p.s_pair).abs() / s_pair)
                        .max((d_inter - p.d_inter).abs() / d_inter);
                }
            }
            worst_at_1e3 = worst_at_1e3.max(devs[1]);
            let monotone = devs.windows(2).all(|w| w[1] < w[0] || (w[0] == 0.0 && w[1] == 0.0));
            if devs[1] > 0.01 || !monotone {
                passed = false;
                failures.push(format!("M={m}#{instance} {devs:?}"));
            }
        }
    }
    let elapsed = start.elapsed();
    Ok((
        passed && worst_cross <= 1e-8 && elapsed < Duration::from_secs(5),
        format!(
            "M in {{2,3,4,6}} x 5 instances, worst deviation at t=1e-3 {worst_at_1e3:.2e}, \
             generic-JSD cross-check {worst_cross:.2e}, {:.2}s{}",
            elapsed.as_secs_f64(),
            if failures.is_empty() { String::new() } else { format!(", failing: {}", failures.join("; ")) }
        ),
    ))
}

fn criterion_4() -> Outcome {
    let start = Instant::now();
    let (model, batch) = gradient_check_fixture(404).map_err(|e| e.to_string())?;
    let config = TrainConfig::default();
    let mut parts = Vec::new();
    let mut passed = true;
    for (term, name) in [
        (LossTerm::Lm, "L_LM"),
        (LossTerm::Lb, "L_LB"),
        (LossTerm::Ed, "L_ED"),
        (LossTerm::Final, "L_final"),
    ] {
        let r = objective_grad_check(&model, &batch, &config, term, 1e-3, Stencil::Central4).map_err(|e| e.to_string())?;
        passed &= r.max_rel_error <= 1e-4;
        parts.push(format!("{name} {:.2e}", r.max_rel_error));
    }

    // second opinion on L_final: scalar loss path against the training gradients
    let analytic = step_gradients(&model, &batch, &config).map_err(|e| e.to_string())?.grads;
    let h = 1e-3;
    let mut work = model.clone();
    let mut worst = 0.0f64;
    let mut coords = 0usize;
    for (pi, g) in analytic.iter().enumerate() {
        for ci in 0..g.len() {
            let orig = work.params()[pi].tensor.data()[ci];
            let mut at = |d: f64| -> Result<f64, String> {
                work.params_mut()[pi].tensor.data_mut()[ci] = orig + d;
                Ok(evaluate_objective(&work, &batch, &config).map_err(|e| e.to_string())?.0.l_final)
            };
            let numeric = (at(-2.0 * h)? - 8.0 * at(-h)? + 8.0 * at(h)? - at(2.0 * h)?) / (12.0 * h);
            work.params_mut()[pi].tensor.data_mut()[ci] = orig;
            let a = g.data()[ci];
            worst = worst.max((a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-8));
            coords += 1;
        }
    }
    passed &= worst <= 1e-4;
    let elapsed = start.elapsed();
    Ok((
        passed && elapsed < Duration::from_secs(30),
        format!(
            "1 layer, N=4, d=8, 2 domains, fourth-order central differences at h=1e-3; max relative error {}; scalar-path L_final {worst:.2e} over {coords} coordinates; {:.2}s",
            parts.join(", "),
            elapsed.as_secs_f64()
        ),
    ))
}

fn criterion_5() -> Outcome {
    let n = 8;
    let k = 2;
    let mut worst = 0.0f64;
    let mut detail = Vec::new();

    // f_i = K/N, P_i = 1/N
    let uniform: Vec<ExpertDistribution> = (0..n).map(|_| ExpertDistribution::uniform(n)).collect();
    let rotating: Vec<Vec<usize>> = (0..n).map(|t| (0..k).map(|j| (t + j) % n).collect()).collect();
    let lb = load_balance_loss(&uniform, &rotating).map_err(|e| e.to_string())?;
    worst = worst.max((lb - k as f64).abs());
    detail.push(format!("L_LB uniform {lb}"));

    // a model whose routers output exact zeros routes uniformly
    let cfg = ModelConfig {
        num_layers: 2,
        hidden_size: 16,
        intermediate_size: 16,
        num_experts: n,
        top_k: k,
        num_heads: 2,
        vocab_size: 32,
        max_seq_len: 16,
        init_std: 0.02,
    };
    let mut model = MoeModel::new(cfg, 5).map_err(|e| e.to_string())?;
    for l in 0..2 {
        model.router_mut(l).map_err(|e| e.to_string())?.data_mut().fill(0.0);
    }
    let seqs = vec![(0..12).collect::<Vec<usize>>(), (12..24).collect()];
    let (_, trace) = model.forward(&seqs, &[0, 1]).map_err(|e| e.to_string())?;
    for layer in &trace.layers {
        let sel: Vec<Vec<usize>> = layer.probs.iter().map(|p| topk_gate(p, k).unwrap().selected).collect();
        let lb = load_balance_loss(&layer.probs, &sel).map_err(|e| e.to_string())?;
        worst = worst.max((lb - k as f64).abs());
    }
    detail.push("zero-router model L_LB = K".into());

    let agg = |domain: usize, p: Vec<f64>| DomainAggregate {
        domain,
        mean: ExpertDistribution::new(p).unwrap(),
        tokens: 1,
        sequences: 1,
    };
    let same = random_dist(&mut ChaCha8Rng::seed_from_u64(505), n, 1.0);
    let identical = [agg(0, same.clone()), agg(1, same.clone()), agg(2, same)];
    let ed_same = expert_divergence_loss(&identical, 1e-8).map_err(|e| e.to_string())?.value;
    worst = worst.max((ed_same - 18.420680743952367).abs());
    detail.push(format!("L_ED identical {ed_same:.10}"));

    let onehot = |i: usize| {
        let mut v = vec![0.0; n];
        v[i] = 1.0;
        v
    };
    let disjoint = [agg(0, onehot(0)), agg(1, onehot(3)), agg(2, onehot(7))];
    let ed_disjoint = expert_divergence_loss(&disjoint, 1e-8).map_err(|e| e.to_string())?.value;
    let expected = -(std::f64::consts::LN_2 + 1e-8).ln();
    worst = worst.max((ed_disjoint - expected).abs());
    detail.push(format!("L_ED disjoint {ed_disjoint:.10} vs {expected:.10}"));

    Ok((worst <= 1e-6, format!("{}; max error {worst:.2e}", detail.join(", "))))
}

struct Twin {
    metrics: Vec<StepMetrics>,
    model: MoeModel,
}

struct Twins {
    edl: Twin,
    base: Twin,
    valsets: ValSets,
    elapsed: Duration,
}

fn twin_config(beta: f64) -> RunConfig {
    let mut cfg = RunConfig::default();
    cfg.train.beta = beta;
    cfg.train.seed = 1;
    cfg
}

fn train_twins(corpus: &Corpus, dir: &Path) -> Result<Twins, String> {
    let start = Instant::now();
    let mut twins = Vec::new();
    for (beta, name) in [(5e-4, "edl"), (0.0, "baseline")] {
        let s = run_training(&twin_config(beta), corpus, &dir.join(name), &RunOptions::default())
            .map_err(|e| e.to_string())?;
        let metrics = read_metrics(&s.metrics_path).map_err(|e| e.to_string())?;
        twins.push(Twin { metrics, model: s.model });
    }
    let elapsed = start.elapsed();
    let (_, valsets) = split_corpus(corpus, &twin_config(5e-4)).map_err(|e| e.to_string())?;
    let base = twins.pop().unwrap();
    let edl = twins.pop().unwrap();
    Ok(Twins {
        edl,
        base,
        valsets,
        elapsed,
    })
}

fn tail_mean(metrics: &[StepMetrics], f: impl Fn(&StepMetrics) -> f64) -> f64 {
    let tail = &metrics[metrics.len() - 100..];
    tail.iter().map(f).sum::<f64>() / tail.len() as f64
}

fn criterion_6(t: &Twins) -> Outcome {
    let d_inter = |m: &StepMetrics| m.d_inter.iter().sum::<f64>() / m.d_inter.len() as f64;
    let (edl_d, base_d) = (tail_mean(&t.edl.metrics, d_inter), tail_mean(&t.base.metrics, d_inter));
    let lm = |m: &StepMetrics| m.losses.l_lm;
    let (edl_lm, base_lm) = (tail_mean(&t.edl.metrics, lm), tail_mean(&t.base.metrics, lm));
    let steps_ok = t.edl.metrics.len() == 2000 && t.base.metrics.len() == 2000;
    let ratio = edl_d / base_d;
    Ok((
        steps_ok && ratio >= 1.5 && edl_lm <= 1.02 * base_lm && t.elapsed < Duration::from_secs(30 * 60),
        format!(
            "D_inter beta=5e-4 {edl_d:.4} vs beta=0 {base_d:.4} (x{ratio:.2}); L_LM {edl_lm:.4} vs {base_lm:.4} ({:+.2}%); {:.0}s",
            100.0 * (edl_lm / base_lm - 1.0),
            t.elapsed.as_secs_f64()
        ),
    ))
}

struct Perturbation {
    edl: Vec<DeltaPpl>,
    base: Vec<DeltaPpl>,
    max_layer: usize,
}

fn perturb_all(t: &Twins) -> Result<(Perturbation, Duration), String> {
    let start = Instant::now();
    let layers = t.edl.model.config().num_layers;
    let run = |m: &MoeModel| -> Result<Vec<DeltaPpl>, String> {
        (0..layers)
            .map(|l| delta_ppl(m, l, &t.valsets, 7, 3).map_err(|e| e.to_string()))
            .collect()
    };
    let edl = run(&t.edl.model)?;
    let base = run(&t.base.model)?;
    let max_layer = (0..layers)
        .max_by(|&a, &b| edl[a].overall().total_cmp(&edl[b].overall()))
        .unwrap();
    Ok((Perturbation { edl, base, max_layer }, start.elapsed()))
}

fn criterion_7(p: &Perturbation, elapsed: Duration) -> Outcome {
    let all_positive = p.edl.iter().all(|d| d.mean_delta.values().all(|&v| v > 0.0));
    let per_layer: Vec<String> = p
        .edl
        .iter()
        .zip(&p.base)
        .map(|(e, b)| {
            let doms: Vec<String> = e.mean_delta.values().map(|v| format!("{v:.3}")).collect();
            format!("layer {} EDL [{}] mean {:.3}, baseline {:.3}", e.layer, doms.join(" "), e.overall(), b.overall())
        })
        .collect();
    let l = p.max_layer;
    let wins = p.edl[l].overall() > p.base[l].overall();
    Ok((
        all_positive && wins && elapsed < Duration::from_secs(5 * 60),
        format!("{}; max layer {l}; {:.0}s", per_layer.join("; "), elapsed.as_secs_f64()),
    ))
}

fn parse_csv_rows(text: &str) -> Vec<Vec<f64>> {
    text.lines()
        .skip(1)
        .map(|line| {
            let cells: Vec<&str> = line.split(',').collect();
            cells[1..cells.len() - 1].iter().map(|c| c.parse().unwrap()).collect()
        })
        .collect()
}

fn criterion_8(t: &Twins, p: &Perturbation, names: &[String]) -> Outcome {
    let mut worst_row = 0.0f64;
    let mut rows = 0usize;
    let mut outside = 0usize;
    let mut points = 0usize;
    for model in [&t.edl.model, &t.base.model] {
        let routing = collect_routing(model, &t.valsets).map_err(|e| e.to_string())?;
        for l in 0..model.config().num_layers {
            let maps = [
                HeatmapMatrix::activation(&routing, l, Activation::Soft),
                HeatmapMatrix::activation(&routing, l, Activation::Hard),
                HeatmapMatrix::inverse(&routing, l, Activation::Hard),
            ];
            for h in maps {
                let h = h.map_err(|e| e.to_string())?;
                for row in parse_csv_rows(&h.to_csv(Some(names))) {
                    worst_row = worst_row.max((row.iter().sum::<f64>() - 1.0).abs());
                    rows += 1;
                }
            }
            let inv = inverse_heatmap(model, l, &t.valsets).map_err(|e| e.to_string())?;
            let tern = ternary_coords(&inv).map_err(|e| e.to_string())?;
            for line in ternary_csv(&tern).lines().skip(1) {
                let v: Vec<f64> = line.split(',').map(|c| c.parse().unwrap()).collect();
                let (x, y, bary) = (v[1], v[2], &v[3..6]);
                let tol = 1e-12;
                let in_bary = bary.iter().all(|&b| b >= -tol) && (bary.iter().sum::<f64>() - 1.0).abs() <= 1e-9;
                let s3 = 3f64.sqrt();
                let in_plane = y >= -tol && s3 * x - y >= -tol && s3 * (1.0 - x) - y >= -tol;
                outside += usize::from(!(in_bary && in_plane));
                points += 1;
            }
        }
    }
    let l = p.max_layer;
    let cos = |m: &MoeModel| -> Result<f64, String> {
        activation_heatmap(m, l, &t.valsets)
            .map_err(|e| e.to_string())?
            .mean_pairwise_cosine()
            .ok_or_else(|| "fewer than two domains".to_string())
    };
    let (edl_cos, base_cos) = (cos(&t.edl.model)?, cos(&t.base.model)?);
    Ok((
        worst_row <= 1e-9 && outside == 0 && edl_cos < base_cos,
        format!(
            "{rows} heatmap rows, max |row sum - 1| {worst_row:.2e}; {points} ternary points, {outside} outside; \
             layer {l} domain-row cosine EDL {edl_cos:.4} vs baseline {base_cos:.4}"
        ),
    ))
}

fn criterion_9(corpus: &Corpus, dir: &Path) -> Outcome {
    let mut cfg = RunConfig::default();
    cfg.train.total_steps = 40;
    cfg.train.checkpoint_interval = 10;
    cfg.train.warmup_steps = 10;
    cfg.train.seed = 9;
    let train = |name: &str, opts: RunOptions| {
        run_training(&cfg, corpus, &dir.join(name), &opts).map_err(|e| e.to_string())
    };
    let read = |name: &str, file: &str| std::fs::read(dir.join(name).join(file)).map_err(|e| e.to_string());

    train("a", RunOptions::default())?;
    train("b", RunOptions::default())?;
    let identical = read("a", "metrics.jsonl")? == read("b", "metrics.jsonl")?
        && read("a", "ckpt-000040.bin")? == read("b", "ckpt-000040.bin")?;

    train(
        "c",
        RunOptions {
            stop_after: Some(20),
            ..RunOptions::default()
        },
    )?;
    let halfway = read("c", "metrics.jsonl")?;
    train(
        "c",
        RunOptions {
            resume: true,
            ..RunOptions::default()
        },
    )?;
    let resumed = read("a", "metrics.jsonl")? == read("c", "metrics.jsonl")?
        && read("a", "ckpt-000040.bin")? == read("c", "ckpt-000040.bin")?;
    let lines = String::from_utf8_lossy(&halfway).lines().count();
    Ok((
        identical && resumed && lines == 20,
        format!(
            "40-step runs: repeat run byte-identical {identical}; stop at 20 then resume byte-identical {resumed}"
        ),
    ))
}

fn report(index: usize, name: &str, outcome: Outcome, failures: &mut usize) {
    let (passed, detail) = outcome.unwrap_or_else(|e| (false, format!("error: {e}")));
    if !passed {
        *failures += 1;
    }
    println!("{} [{index}] {name}: {detail}", if passed { "PASS" } else { "FAIL" });
}

fn main() {
    let mut failures = 0;
    report(1, "decomposition identity", criterion_1(), &mut failures);
    report(2, "generalized JSD dual forms", criterion_2(), &mut failures);
    report(3, "pairwise-sum proportionality", criterion_3(), &mut failures);
    report(4, "gradient checks", criterion_4(), &mut failures);
    report(5, "closed-form loss values", criterion_5(), &mut failures);

    let dir = tempfile::tempdir().expect("temporary directory");
    let corpus = synth_corpus(&SynthSpec::three_domains(100_000), 0).expect("synthetic corpus");
    match train_twins(&corpus, dir.path()) {
        Ok(twins) => {
            report(6, "training synergy", criterion_6(&twins), &mut failures);
            match perturb_all(&twins) {
                Ok((p, elapsed)) => {
                    report(7, "router permutation", criterion_7(&p, elapsed), &mut failures);
                    report(8, "heatmap and ternary contracts", criterion_8(&twins, &p, &corpus.domains), &mut failures);
                }
                Err(e) => {
                    report(7, "router permutation", Err(e.clone()), &mut failures);
                    report(8, "heatmap and ternary contracts", Err(e), &mut failures);
                }
            }
        }
        Err(e) => {
            for (i, name) in [(6, "training synergy"), (7, "router permutation"), (8, "heatmap and ternary contracts")] {
                report(i, name, Err(e.clone()), &mut failures);
            }
        }
    }
    report(9, "determinism and resume", criterion_9(&corpus, dir.path()), &mut failures);

    println!("{} of 9 criteria passed", 9 - failures);
    if failures > 0 {
        std::process::exit(1);
    }
}
