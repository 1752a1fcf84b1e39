//! Latent classification in every training mode, with the share of model
//! weights each mode updates (the small classification head is not counted).
//!
//! cargo run --release --example classify_modes -- [vae_steps] [classifier_steps]

use adavae::classify::{latent_classify, ClassifierConfig};
use adavae::corpus::{Corpus, Split, Vocab};
use adavae::pe::ParamsReport;
use adavae::schedule::TrainSchedule;
use adavae::train::{TrainConfig, Trainer};
use adavae::{AdaVae, ModelConfig, TrainMode};

fn main() -> adavae::Result<()> {
    let args: Vec<String> = std::env::args().skip(1).collect();
    let steps: usize = args.first().map_or(400, |s| s.parse().unwrap());
    let clf_steps: usize = args.get(1).map_or(300, |s| s.parse().unwrap());

    let train = Corpus::parse(include_str!("../data/sentiment_train.txt"), Split::Train, "train")?;
    let test = Corpus::parse(include_str!("../data/sentiment_test.txt"), Split::Test, "test")?;
    let vocab = Vocab::build(&train, 1000)?;
    let config = ModelConfig::desk(vocab.len());
    let labeled = |c: &Corpus| -> Vec<(Vec<usize>, usize)> {
        c.encode_all(&vocab, config.max_seq_len)
            .into_iter()
            .zip(c.labels())
            .map(|(t, l)| (t, l.unwrap()))
            .collect()
    };
    let (train_set, test_set) = (labeled(&train), labeled(&test));

    let sentences = train_set.iter().map(|(t, _)| t.clone()).collect();
    let schedule = TrainSchedule::new(steps, 1e-3, 1.0);
    let mut trainer = Trainer::new(
        AdaVae::new(config.clone(), 11)?,
        sentences,
        TrainConfig::new(schedule, 16, 11, TrainMode::Ft),
    )?;
    trainer.run_until(steps as u64, &mut std::io::sink())?;

    let cfg = ClassifierConfig {
        steps: clf_steps,
        lr: 3e-3,
        ..Default::default()
    };
    for mode in [TrainMode::Fb, TrainMode::Pe, TrainMode::Ft] {
        let (acc, _, _) = latent_classify(&trainer.model, &train_set, &test_set, mode, &cfg)?;
        let share = ParamsReport::for_config(&config, mode).overall;
        println!(
            "{mode}: test accuracy {acc:.3}, trainable {}/{} ({:.2}%)",
            share.trainable,
            share.total,
            100.0 * share.trainable as f64 / share.total as f64
        );
    }
    Ok(())
}
