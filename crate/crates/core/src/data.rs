//! Domain-labelled corpora and batch packing.
//!
//! Corpus files hold one JSON object per line with a `text` and a `domain`
//! string field. Text is tokenised as raw bytes, so token ids are `0..256`.

use std::collections::BTreeMap;
use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Gamma};
use serde::{Deserialize, Serialize};

use crate::divergence::DomainId;
use crate::error::{Error, Result};

/// One labelled document.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Document {
    pub bytes: Vec<u8>,
    pub domain: DomainId,
}

/// Ordered documents plus the domain vocabulary (index = [`DomainId`]).
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct Corpus {
    pub documents: Vec<Document>,
    pub domains: Vec<String>,
}

#[derive(Serialize, Deserialize)]
struct Record {
    text: String,
    domain: String,
}

impl Corpus {
    /// Id of `name`, registering it on first sight.
    pub fn domain_id(&mut self, name: &str) -> DomainId {
        match self.domains.iter().position(|d| d == name) {
            Some(i) => i,
            None => {
                self.domains.push(name.to_string());
                self.domains.len() - 1
            }
        }
    }

    pub fn push(&mut self, text: &[u8], domain: &str) {
        let domain = self.domain_id(domain);
        self.documents.push(Document {
            bytes: text.to_vec(),
            domain,
        });
    }

    pub fn num_tokens(&self) -> usize {
        self.documents.iter().map(|d| d.bytes.len()).sum()
    }

    pub fn tokens_per_domain(&self) -> Vec<usize> {
        let mut out = vec![0; self.domains.len()];
        for d in &self.documents {
            out[d.domain] += d.bytes.len();
        }
        out
    }

    /// Write in the newline-delimited record format. Text must be UTF-8.
    pub fn write(&self, path: &Path) -> Result<()> {
        let mut f = std::io::BufWriter::new(fs::File::create(path)?);
        for d in &self.documents {
            let text = String::from_utf8(d.bytes.clone())
                .map_err(|_| Error::InvalidArgument("document is not UTF-8".into()))?;
            let rec = Record {
                text,
                domain: self.domains[d.domain].clone(),
            };
            serde_json::to_writer(&mut f, &rec)?;
            f.write_all(b"\n")?;
        }
        f.flush()?;
        Ok(())
    }
}

/// Read a newline-delimited corpus file. Blank lines are skipped.
pub fn load_corpus(path: &Path) -> Result<Corpus> {
    let file = fs::File::open(path)?;
    let mut corpus = Corpus::default();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: Record = serde_json::from_str(&line).map_err(|e| Error::Corpus {
            path: path.to_path_buf(),
            line: i + 1,
            msg: e.to_string(),
        })?;
        corpus.push(rec.text.as_bytes(), &rec.domain);
    }
    Ok(corpus)
}

/// One synthetic domain: its byte alphabet and how many bytes to emit.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthDomain {
    pub name: String,
    pub alphabet: Vec<u8>,
    pub bytes: usize,
}

/// Recipe for [`synth_corpus`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthSpec {
    pub domains: Vec<SynthDomain>,
    /// Bytes per document; the last document of a domain may be shorter.
    pub doc_len: usize,
    /// Gamma shape of the transition-row weights; smaller is peakier.
    pub concentration: f64,
}

impl SynthSpec {
    /// Three domains with partially overlapping lowercase alphabets.
    pub fn three_domains(bytes_per_domain: usize) -> Self {
        let span = |a: u8, b: u8| (a..=b).collect::<Vec<u8>>();
        let mut a = span(b'a', b'p');
        a.push(b' ');
        let mut b = span(b'i', b'x');
        b.push(b' ');
        let mut c = span(b'q', b'z');
        c.extend(span(b'0', b'9'));
        c.extend(*b"+= ");
        Self {
            domains: vec![
                SynthDomain { name: "alpha".into(), alphabet: a, bytes: bytes_per_domain },
                SynthDomain { name: "beta".into(), alphabet: b, bytes: bytes_per_domain },
                SynthDomain { name: "gamma".into(), alphabet: c, bytes: bytes_per_domain },
            ],
            doc_len: 512,
            concentration: 0.3,
        }
    }
}

/// First-order Markov source over a byte alphabet.
#[derive(Debug, Clone, PartialEq)]
pub struct MarkovSource {
    pub alphabet: Vec<u8>,
    /// `transitions[i][j]` = P(next = alphabet[j] | current = alphabet[i]).
    pub transitions: Vec<Vec<f64>>,
}

impl MarkovSource {
    fn random(alphabet: &[u8], concentration: f64, rng: &mut ChaCha8Rng) -> Result<Self> {
        let gamma = Gamma::new(concentration, 1.0).map_err(|e| Error::InvalidArgument(e.to_string()))?;
        let n = alphabet.len();
        let transitions = (0..n)
            .map(|_| {
                let w: Vec<f64> = (0..n).map(|_| gamma.sample(rng) + 1e-3).collect();
                let s: f64 = w.iter().sum();
                w.into_iter().map(|v| v / s).collect()
            })
            .collect();
        Ok(Self {
            alphabet: alphabet.to_vec(),
            transitions,
        })
    }

    fn emit(&self, len: usize, rng: &mut ChaCha8Rng) -> Vec<u8> {
        let mut state = rng.gen_range(0..self.alphabet.len());
        let mut out = Vec::with_capacity(len);
        for _ in 0..len {
            out.push(self.alphabet[state]);
            let u: f64 = rng.gen();
            let row = &self.transitions[state];
            let mut acc = 0.0;
            state = row.len() - 1;
            for (j, p) in row.iter().enumerate() {
                acc += p;
                if u < acc {
                    state = j;
                    break;
                }
            }
        }
        out
    }
}

/// The per-domain sources [`synth_corpus`] samples from.
pub fn synth_sources(spec: &SynthSpec, seed: u64) -> Result<Vec<MarkovSource>> {
    if spec.domains.len() < 2 {
        return Err(Error::InvalidArgument("a synthetic corpus needs at least 2 domains".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    spec.domains
        .iter()
        .map(|d| {
            if d.alphabet.is_empty() {
                return Err(Error::InvalidArgument(format!("domain {} has an empty alphabet", d.name)));
            }
            MarkovSource::random(&d.alphabet, spec.concentration, &mut rng)
        })
        .collect()
}

/// Deterministic synthetic corpus; documents are interleaved across domains.
pub fn synth_corpus(spec: &SynthSpec, seed: u64) -> Result<Corpus> {
    if spec.doc_len == 0 {
        return Err(Error::InvalidArgument("doc_len must be positive".into()));
    }
    let sources = synth_sources(spec, seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(0x9E37_79B9_7F4A_7C15));
    let mut corpus = Corpus::default();
    let mut remaining: Vec<usize> = spec.domains.iter().map(|d| d.bytes).collect();
    for d in &spec.domains {
        corpus.domain_id(&d.name);
    }
    while remaining.iter().any(|&r| r > 0) {
        for (j, d) in spec.domains.iter().enumerate() {
            let len = remaining[j].min(spec.doc_len);
            if len == 0 {
                continue;
            }
            remaining[j] -= len;
            let bytes = sources[j].emit(len, &mut rng);
            corpus.push(&bytes, &d.name);
        }
    }
    Ok(corpus)
}

/// A packed fixed-length token sequence with its domain.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PackedSequence {
    pub tokens: Vec<usize>,
    pub domain: DomainId,
}

/// Sequences of one training batch with their domain labels.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DomainBatch {
    pub sequences: Vec<Vec<usize>>,
    pub domains: Vec<DomainId>,
}

impl DomainBatch {
    pub fn from_packed(seqs: &[PackedSequence]) -> Self {
        Self {
            sequences: seqs.iter().map(|s| s.tokens.clone()).collect(),
            domains: seqs.iter().map(|s| s.domain).collect(),
        }
    }

    /// How many sequences carry each label.
    pub fn label_counts(&self) -> BTreeMap<DomainId, usize> {
        let mut m = BTreeMap::new();
        for &d in &self.domains {
            *m.entry(d).or_insert(0) += 1;
        }
        m
    }

    /// Number of distinct domains, `M_B`.
    pub fn num_domains(&self) -> usize {
        self.label_counts().len()
    }

    pub fn num_tokens(&self) -> usize {
        self.sequences.iter().map(Vec::len).sum()
    }
}

/// Chunk each domain's concatenated documents into `seq_len` pieces.
///
/// Documents of one domain are joined in corpus order; a domain's trailing
/// remainder shorter than `seq_len` is dropped, so no sequence ever spans
/// two domains.
pub fn pack_sequences(corpus: &Corpus, seq_len: usize) -> Result<Vec<PackedSequence>> {
    if seq_len == 0 {
        return Err(Error::InvalidArgument("seq_len must be positive".into()));
    }
    let mut streams: Vec<Vec<usize>> = vec![Vec::new(); corpus.domains.len()];
    for d in &corpus.documents {
        streams[d.domain].extend(d.bytes.iter().map(|&b| b as usize));
    }
    let mut out = Vec::new();
    for (domain, stream) in streams.iter().enumerate() {
        for chunk in stream.chunks_exact(seq_len) {
            out.push(PackedSequence {
                tokens: chunk.to_vec(),
                domain,
            });
        }
    }
    if out.is_empty() {
        return Err(Error::InvalidArgument(format!(
            "corpus of {} tokens is shorter than one {seq_len}-token sequence in every domain",
            corpus.num_tokens()
        )));
    }
    Ok(out)
}

/// Split off up to `per_domain` sequences of each domain (the last ones in
/// packing order) as a validation set, leaving at least one for training.
pub fn split_holdout(
    sequences: Vec<PackedSequence>,
    per_domain: usize,
) -> (Vec<PackedSequence>, BTreeMap<DomainId, Vec<Vec<usize>>>) {
    let mut counts: BTreeMap<DomainId, usize> = BTreeMap::new();
    for s in &sequences {
        *counts.entry(s.domain).or_insert(0) += 1;
    }
    let mut seen: BTreeMap<DomainId, usize> = BTreeMap::new();
    let mut train = Vec::new();
    let mut val: BTreeMap<DomainId, Vec<Vec<usize>>> = BTreeMap::new();
    for s in sequences {
        let total = counts[&s.domain];
        let hold = per_domain.min(total.saturating_sub(1));
        let i = seen.entry(s.domain).or_insert(0);
        if *i >= total - hold {
            val.entry(s.domain).or_default().push(s.tokens);
        } else {
            train.push(s);
        }
        *i += 1;
    }
    (train, val)
}

/// Deterministic, epoch-reshuffled batch order over packed sequences.
#[derive(Debug, Clone)]
pub struct BatchStream {
    sequences: Vec<PackedSequence>,
    batch_size: usize,
    seed: u64,
    cached_epoch: Option<(u64, Vec<usize>)>,
}

impl BatchStream {
    pub fn new(sequences: Vec<PackedSequence>, batch_size: usize, seed: u64) -> Result<Self> {
        if batch_size == 0 {
            return Err(Error::InvalidArgument("batch_size must be positive".into()));
        }
        if sequences.is_empty() {
            return Err(Error::InvalidArgument("no sequences to batch".into()));
        }
        Ok(Self {
            sequences,
            batch_size,
            seed,
            cached_epoch: None,
        })
    }

    pub fn batches_per_epoch(&self) -> usize {
        self.sequences.len().div_ceil(self.batch_size)
    }

    pub fn sequences(&self) -> &[PackedSequence] {
        &self.sequences
    }

    fn order(&mut self, epoch: u64) -> &[usize] {
        if self.cached_epoch.as_ref().map(|(e, _)| *e) != Some(epoch) {
            let mut rng = ChaCha8Rng::seed_from_u64(self.seed ^ epoch.wrapping_mul(0xD1B5_4A32_D192_ED03));
            let mut order: Vec<usize> = (0..self.sequences.len()).collect();
            order.shuffle(&mut rng);
            self.cached_epoch = Some((epoch, order));
        }
        &self.cached_epoch.as_ref().expect("just filled").1
    }

    /// Batch number `index` counted from the start of training.
    pub fn batch(&mut self, index: u64) -> DomainBatch {
        let per_epoch = self.batches_per_epoch() as u64;
        let (epoch, b) = (index / per_epoch, (index % per_epoch) as usize);
        let bs = self.batch_size;
        let order = self.order(epoch).to_vec();
        let picked: Vec<PackedSequence> = order[b * bs..((b + 1) * bs).min(order.len())]
            .iter()
            .map(|&i| self.sequences[i].clone())
            .collect();
        DomainBatch::from_packed(&picked)
    }

    /// All batches of one epoch in order.
    pub fn epoch(&mut self, epoch: u64) -> Vec<DomainBatch> {
        let per_epoch = self.batches_per_epoch() as u64;
        (0..per_epoch).map(|b| self.batch(epoch * per_epoch + b)).collect()
    }
}

/// Pack `corpus` and shuffle it into batches of `batch_size` (the last may be smaller).
pub fn pack_batches(corpus: &Corpus, seq_len: usize, batch_size: usize, seed: u64) -> Result<Vec<DomainBatch>> {
    let mut stream = BatchStream::new(pack_sequences(corpus, seq_len)?, batch_size, seed)?;
    Ok(stream.epoch(0))
}
