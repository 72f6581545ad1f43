use std::collections::BTreeMap;
use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{train_step, AdamState, StepMetrics, TrainConfig};
use crate::analysis::ValSets;
use crate::data::{load_corpus, pack_sequences, split_holdout, BatchStream, Corpus, PackedSequence};
use crate::diffengine::Tensor;
use crate::divergence::DomainId;
use crate::error::{Error, Result};
use crate::model::{Checkpoint, ModelConfig, MoeModel};

const METRICS_FILE: &str = "metrics.jsonl";
const CONFIG_FILE: &str = "config.toml";
const DATA_SEED_MIX: u64 = 0x5EED_DA7A_0B5E_55ED;

/// Corpus locations and validation split.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    /// Training corpus; `--data` overrides it.
    pub corpus: Option<PathBuf>,
    /// Separate validation corpus. Without one, validation sequences are
    /// held out of the training corpus.
    pub valset: Option<PathBuf>,
    pub val_per_domain: usize,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            corpus: None,
            valset: None,
            val_per_domain: 100,
        }
    }
}

/// Everything a training run depends on besides the corpus bytes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub data: DataConfig,
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.train.validate()?;
        if self.train.seq_len > self.model.max_seq_len {
            return Err(Error::Config(format!(
                "seq_len {} exceeds max_seq_len {}",
                self.train.seq_len, self.model.max_seq_len
            )));
        }
        if self.train.seed > i64::MAX as u64 {
            return Err(Error::Config("seed must fit in a signed 64-bit integer".into()));
        }
        Ok(())
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let c: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        c.validate()?;
        Ok(c)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_toml(&fs::read_to_string(path)?)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }
}

/// Pack `corpus` and split it into training sequences and per-domain
/// validation sets.
pub fn split_corpus(corpus: &Corpus, config: &RunConfig) -> Result<(Vec<PackedSequence>, ValSets)> {
    let packed = pack_sequences(corpus, config.train.seq_len)?;
    match &config.data.valset {
        None => Ok(split_holdout(packed, config.data.val_per_domain)),
        Some(path) => {
            let val_corpus = load_corpus(path)?;
            let mut val: BTreeMap<DomainId, Vec<Vec<usize>>> = BTreeMap::new();
            for s in pack_sequences(&val_corpus, config.train.seq_len)? {
                let name = &val_corpus.domains[s.domain];
                let id = corpus
                    .domains
                    .iter()
                    .position(|d| d == name)
                    .ok_or_else(|| Error::InvalidArgument(format!("validation domain {name} not in training corpus")))?;
                let set = val.entry(id).or_default();
                if set.len() < config.data.val_per_domain {
                    set.push(s.tokens);
                }
            }
            Ok((packed, val))
        }
    }
}

#[derive(Debug, Clone, Default)]
pub struct RunOptions {
    /// Replace an existing run directory.
    pub force: bool,
    /// Continue from the newest checkpoint in the run directory.
    pub resume: bool,
    /// Stop after this step even if `total_steps` is larger.
    pub stop_after: Option<u64>,
}

#[derive(Debug, Clone)]
pub struct RunSummary {
    pub final_step: u64,
    pub checkpoints: Vec<PathBuf>,
    pub metrics_path: PathBuf,
    pub last: Option<StepMetrics>,
    pub model: MoeModel,
}

#[derive(Serialize, Deserialize)]
struct Header {
    step: u64,
    config: RunConfig,
}

/// A model restored from disk, with its optimizer state when present.
#[derive(Debug, Clone)]
pub struct TrainedCheckpoint {
    pub step: u64,
    pub config: RunConfig,
    pub model: MoeModel,
    pub adam: Option<AdamState>,
}

fn checkpoint_name(step: u64) -> String {
    format!("ckpt-{step:06}.bin")
}

fn write_checkpoint(path: &Path, step: u64, config: &RunConfig, model: &MoeModel, adam: &AdamState) -> Result<()> {
    let header = toml::to_string(&Header {
        step,
        config: config.clone(),
    })
    .map_err(|e| Error::Checkpoint(e.to_string()))?;
    let mut tensors = Vec::new();
    for (i, p) in model.params().iter().enumerate() {
        tensors.push((format!("model/{}", p.name), p.tensor.clone()));
        tensors.push((format!("adam.m/{}", p.name), adam.m[i].clone()));
        tensors.push((format!("adam.v/{}", p.name), adam.v[i].clone()));
    }
    Checkpoint { header, tensors }.write_atomic(path)
}

pub fn load_checkpoint(path: &Path) -> Result<TrainedCheckpoint> {
    let ckpt = Checkpoint::read(path)?;
    let header: Header = toml::from_str(&ckpt.header).map_err(|e| Error::Checkpoint(format!("header: {e}")))?;
    header.config.validate()?;
    let model = MoeModel::from_named(header.config.model.clone(), &ckpt.with_prefix("model/"))?;
    let moments = |prefix: &str| -> Option<Vec<Tensor>> {
        let named: BTreeMap<String, Tensor> = ckpt.with_prefix(prefix).into_iter().collect();
        model.params().iter().map(|p| named.get(&p.name).cloned()).collect()
    };
    let adam = match (moments("adam.m/"), moments("adam.v/")) {
        (Some(m), Some(v)) => Some(AdamState {
            step: header.step,
            m,
            v,
        }),
        _ => None,
    };
    Ok(TrainedCheckpoint {
        step: header.step,
        config: header.config,
        model,
        adam,
    })
}

fn existing_checkpoints(dir: &Path) -> Result<Vec<(u64, PathBuf)>> {
    let mut out = Vec::new();
    if !dir.exists() {
        return Ok(out);
    }
    for entry in fs::read_dir(dir)? {
        let path = entry?.path();
        let step = path
            .file_name()
            .and_then(|n| n.to_str())
            .and_then(|n| n.strip_prefix("ckpt-"))
            .and_then(|n| n.strip_suffix(".bin"))
            .and_then(|n| n.parse::<u64>().ok());
        if let Some(step) = step {
            out.push((step, path));
        }
    }
    out.sort();
    Ok(out)
}

fn prepare_dir(out: &Path, opts: &RunOptions) -> Result<()> {
    let occupied = out.exists() && fs::read_dir(out)?.next().is_some();
    if occupied && !opts.resume {
        if !opts.force {
            return Err(Error::InvalidArgument(format!(
                "run directory {} already exists; pass --force to replace it",
                out.display()
            )));
        }
        fs::remove_dir_all(out)?;
    }
    fs::create_dir_all(out)?;
    Ok(())
}

/// Keep metric records up to and including `step`.
fn truncate_metrics(path: &Path, step: u64) -> Result<()> {
    if !path.exists() {
        return Ok(());
    }
    let mut kept = Vec::new();
    for line in BufReader::new(fs::File::open(path)?).lines() {
        let line = line?;
        if line.is_empty() {
            continue;
        }
        let m: StepMetrics = serde_json::from_str(&line)?;
        if m.step <= step {
            kept.push(line);
        }
    }
    let mut f = BufWriter::new(fs::File::create(path)?);
    for line in kept {
        writeln!(f, "{line}")?;
    }
    f.flush()?;
    Ok(())
}

/// Train on `corpus`, writing checkpoints, `metrics.jsonl` and the resolved
/// `config.toml` into `out`.
pub fn run_training(config: &RunConfig, corpus: &Corpus, out: &Path, opts: &RunOptions) -> Result<RunSummary> {
    config.validate()?;
    let (train_seqs, _) = split_corpus(corpus, config)?;
    if let Some(&t) = train_seqs.iter().flat_map(|s| &s.tokens).find(|&&t| t >= config.model.vocab_size) {
        return Err(Error::OutOfRange {
            what: "token",
            index: t,
            limit: config.model.vocab_size,
        });
    }
    let mut stream = BatchStream::new(train_seqs, config.train.batch_size, config.train.seed ^ DATA_SEED_MIX)?;

    prepare_dir(out, opts)?;
    let metrics_path = out.join(METRICS_FILE);
    let mut checkpoints: Vec<PathBuf> = Vec::new();

    let (mut model, mut adam) = match existing_checkpoints(out)?.pop().filter(|_| opts.resume) {
        Some((step, path)) => {
            let ck = load_checkpoint(&path)?;
            if ck.config != *config {
                return Err(Error::Config(format!("{} was written with a different configuration", path.display())));
            }
            let adam = ck
                .adam
                .ok_or_else(|| Error::Checkpoint(format!("{} has no optimizer state", path.display())))?;
            truncate_metrics(&metrics_path, step)?;
            log::info!("resuming from {} at step {step}", path.display());
            (ck.model, adam)
        }
        None => {
            if opts.resume {
                log::info!("no checkpoint in {}; starting fresh", out.display());
            }
            fs::write(&metrics_path, b"")?;
            let model = MoeModel::new(config.model.clone(), config.train.seed)?;
            let adam = AdamState::new(model.params());
            (model, adam)
        }
    };
    fs::write(out.join(CONFIG_FILE), config.to_toml()?)?;

    let mut log_file = BufWriter::new(fs::OpenOptions::new().append(true).open(&metrics_path)?);
    let end = opts
        .stop_after
        .map_or(config.train.total_steps, |s| s.min(config.train.total_steps));
    let mut last = None;
    while adam.step < end {
        let batch = stream.batch(adam.step);
        let metrics = train_step(&mut model, &batch, &config.train, &mut adam)?;
        serde_json::to_writer(&mut log_file, &metrics)?;
        log_file.write_all(b"\n")?;
        let step = metrics.step;
        if step % 100 == 0 || step == 1 {
            log::info!(
                "step {step} l_lm {:.4} l_lb {:.4} l_ed {:.4} d_inter {:?}",
                metrics.losses.l_lm,
                metrics.losses.l_lb,
                metrics.losses.l_ed,
                metrics.d_inter
            );
        }
        log::debug!("step {step} took {:.1} ms", metrics.wall_ms);
        if step % config.train.checkpoint_interval == 0 || step == end {
            log_file.flush()?;
            let path = out.join(checkpoint_name(step));
            write_checkpoint(&path, step, config, &model, &adam)?;
            checkpoints.push(path);
        }
        last = Some(metrics);
    }
    log_file.flush()?;
    Ok(RunSummary {
        final_step: adam.step,
        checkpoints,
        metrics_path,
        last,
        model,
    })
}

/// Read every record of a metrics log.
pub fn read_metrics(path: &Path) -> Result<Vec<StepMetrics>> {
    let mut out = Vec::new();
    for line in BufReader::new(fs::File::open(path)?).lines() {
        let line = line?;
        if !line.is_empty() {
            out.push(serde_json::from_str(&line)?);
        }
    }
    Ok(out)
}
