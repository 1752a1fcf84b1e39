//! Interpolation and analogy in latent space after a short memorization run.
//!
//! cargo run --release --example latent_arithmetic -- [steps]
//!
//! The default run memorizes the corpus first, so it takes a few minutes.

use adavae::corpus::{Corpus, Split, Vocab};
use adavae::generate::{analogy, interpolate};
use adavae::schedule::TrainSchedule;
use adavae::train::{TrainConfig, Trainer};
use adavae::{AdaVae, ModelConfig, TrainMode};

fn main() -> adavae::Result<()> {
    let steps: usize = std::env::args().nth(1).map_or(2000, |s| s.parse().unwrap());

    let corpus = Corpus::parse(include_str!("../data/toy32.txt"), Split::Train, "toy32")?;
    let vocab = Vocab::build(&corpus, 1000)?;
    let config = ModelConfig::desk(vocab.len());
    let sentences = corpus.encode_all(&vocab, config.max_seq_len);

    let schedule = TrainSchedule::new(steps, 1e-3, 5.0);
    let mut trainer = Trainer::new(
        AdaVae::new(config, 7)?,
        sentences.clone(),
        TrainConfig::new(schedule, 16, 7, TrainMode::Ft),
    )?;
    trainer.run_until(steps as u64, &mut std::io::sink())?;
    let model = &trainer.model;

    let (a, b) = (&sentences[0], &sentences[1]);
    println!("interpolating\n  a: {}\n  b: {}", vocab.decode(a), vocab.decode(b));
    for p in interpolate(model, a, b, 6, 30)? {
        println!("  tau {:.2}: {}", p.tau, vocab.decode(&p.tokens));
    }

    let (a, b, c) = (&sentences[2], &sentences[3], &sentences[4]);
    let (_, out) = analogy(model, a, b, c, 30)?;
    println!("analogy  b - a + c");
    println!(
        "  a: {}\n  b: {}\n  c: {}",
        vocab.decode(a),
        vocab.decode(b),
        vocab.decode(c)
    );
    println!("  -> {}", vocab.decode(&out));
    Ok(())
}
