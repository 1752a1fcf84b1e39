//! Save mid-run, reload, and confirm the resumed run matches an unbroken one.
//!
//! cargo run --release --example checkpoint_resume -- [steps] [save_at]

use std::collections::BTreeMap;

use adavae::checkpoint::Checkpoint;
use adavae::corpus::{Corpus, Split, Vocab};
use adavae::schedule::TrainSchedule;
use adavae::train::{TrainConfig, Trainer};
use adavae::{AdaVae, ModelConfig, TrainMode};

fn main() -> adavae::Result<()> {
    let args: Vec<String> = std::env::args().skip(1).collect();
    let steps: u64 = args.first().map_or(40, |s| s.parse().unwrap());
    let save_at: u64 = args.get(1).map_or(steps / 2, |s| s.parse().unwrap());

    let corpus = Corpus::parse(include_str!("../data/toy32.txt"), Split::Train, "toy32")?;
    let vocab = Vocab::build(&corpus, 1000)?;
    let config = ModelConfig::tiny(vocab.len());
    let sentences = corpus.encode_all(&vocab, config.max_seq_len);
    let train_cfg = TrainConfig::new(TrainSchedule::new(steps as usize, 1e-2, 0.5), 4, 3, TrainMode::Pe);

    let mut straight = Trainer::new(AdaVae::new(config.clone(), 3)?, sentences.clone(), train_cfg.clone())?;
    let full = straight.run_until(steps, &mut std::io::sink())?;

    let mut first = Trainer::new(AdaVae::new(config, 3)?, sentences.clone(), train_cfg.clone())?;
    first.run_until(save_at, &mut std::io::sink())?;
    let path = std::env::temp_dir().join(format!("adavae-example-{}.ckpt", std::process::id()));
    first.checkpoint(&vocab, BTreeMap::new()).save(&path)?;
    println!("saved step {save_at} to {}", path.display());

    let mut resumed = Trainer::resume(Checkpoint::load(&path)?, sentences, train_cfg)?;
    std::fs::remove_file(&path)?;
    let tail = resumed.run_until(steps, &mut std::io::sink())?;

    let same_log = tail[..] == full[save_at as usize..];
    let same_weights = resumed
        .model
        .store
        .iter()
        .zip(straight.model.store.iter())
        .all(|((_, a), (_, b))| a.value().data() == b.value().data());
    println!("final total loss {:.6}", full.last().unwrap().total);
    println!("log identical after resume: {same_log}");
    println!("weights bit-identical: {same_weights}");
    Ok(())
}
