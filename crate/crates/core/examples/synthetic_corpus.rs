//! Generate the three-domain synthetic corpus and pack it into batches.
//!
//! Pass a path to also write the corpus as JSONL.

use moediv::data::{pack_batches, pack_sequences, synth_corpus, SynthSpec};

fn main() -> moediv::Result<()> {
    let corpus = synth_corpus(&SynthSpec::three_domains(20_000), 0)?;
    println!("{} documents, {} bytes", corpus.documents.len(), corpus.num_tokens());
    for (name, n) in corpus.domains.iter().zip(corpus.tokens_per_domain()) {
        let doc = corpus.documents.iter().find(|d| corpus.domains[d.domain] == *name).unwrap();
        println!("{name:6} {n:6} bytes  {:?}", String::from_utf8_lossy(&doc.bytes[..48]));
    }

    let packed = pack_sequences(&corpus, 64)?;
    println!("{} packed sequences of 64 tokens", packed.len());
    let batches = pack_batches(&corpus, 64, 8, 1)?;
    println!("first batch domains {:?}", batches[0].domains);

    if let Some(path) = std::env::args().nth(1) {
        corpus.write(path.as_ref())?;
        println!("wrote {path}");
    }
    Ok(())
}
