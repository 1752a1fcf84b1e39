//! Memorize a 32-sentence corpus and report reconstruction quality.
//!
//! cargo run --release --example overfit -- [steps] [batch] [peak_lr] [free_bits]

use std::time::Instant;

use adavae::corpus::{Corpus, Split, Vocab};
use adavae::generate::{decode_sample, Strategy};
use adavae::schedule::TrainSchedule;
use adavae::train::{TrainConfig, Trainer};
use adavae::{AdaVae, ModelConfig, TrainMode};

fn main() -> adavae::Result<()> {
    let args: Vec<String> = std::env::args().skip(1).collect();
    let steps: usize = args.first().map_or(2000, |s| s.parse().unwrap());
    let batch: usize = args.get(1).map_or(16, |s| s.parse().unwrap());
    let lr: f64 = args.get(2).map_or(1e-3, |s| s.parse().unwrap());
    let lambda: f64 = args.get(3).map_or(5.0, |s| s.parse().unwrap());

    let corpus = Corpus::parse(include_str!("../data/toy32.txt"), Split::Train, "toy32")?;
    let vocab = Vocab::build(&corpus, 1000)?;
    let config = ModelConfig::desk(vocab.len());
    let sentences = corpus.encode_all(&vocab, config.max_seq_len);

    let model = AdaVae::new(config, 7)?;
    let schedule = TrainSchedule::new(steps, lr, lambda);
    let mut trainer = Trainer::new(
        model,
        sentences.clone(),
        TrainConfig::new(schedule, batch, 7, TrainMode::Ft),
    )?;

    let start = Instant::now();
    let mut sink = std::io::sink();
    while !trainer.is_done() {
        let next = (trainer.step + steps as u64 / 10).max(trainer.step + 1);
        let recs = trainer.run_until(next, &mut sink)?;
        let last = recs.last().unwrap();
        println!(
            "step {:>5}  beta {:.2}  rec/tok {:.4}  kl {:.3}  total {:.4}  ({:.1}s)",
            last.step + 1,
            last.beta,
            last.rec_per_token,
            last.kl_raw,
            last.total,
            start.elapsed().as_secs_f64()
        );
    }

    let model = &trainer.model;
    let acc = model.teacher_forced_accuracy(&sentences)?;
    let mut exact = 0;
    for s in &sentences {
        let z = model.encode(s)?.0;
        let out = decode_sample(model, Some(&z), 30, Strategy::Greedy)?;
        if out == s[1..s.len() - 1] {
            exact += 1;
        } else {
            println!("  miss: {:?} -> {:?}", vocab.decode(s), vocab.decode(&out));
        }
    }
    println!("teacher-forced accuracy {:.4}", acc);
    println!("exact greedy reconstructions {exact}/{}", sentences.len());
    Ok(())
}
