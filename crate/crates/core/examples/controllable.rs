//! Label-conditioned latents on a two-class toy corpus.
//!
//! Trains the VAE, tunes a latent classifier in parameter-efficient mode,
//! fits one diagonal Gaussian per label over the classifier's μ(x), and
//! checks how often sampled latents are classified as the requested label.
//! Samples drawn in the VAE's own latent space are also decoded and the
//! generated text is classified.
//!
//! cargo run --release --example controllable -- [steps] [samples_per_label] [free_bits]
//!
//! Set TRAIN / TEST to use other labeled files.

use adavae::classify::{latent_classify, predict, predict_features, ClassifierConfig};
use adavae::corpus::{Corpus, Split, Vocab, BOS, EOS};
use adavae::generate::{decode_sample, Strategy};
use adavae::latent::ClassConditionalPrior;
use adavae::schedule::TrainSchedule;
use adavae::train::{TrainConfig, Trainer};
use adavae::{AdaVae, ModelConfig, TrainMode};

fn load(var: &str, builtin: &str, split: Split) -> adavae::Result<Corpus> {
    match std::env::var(var) {
        Ok(p) => Corpus::load(p, split),
        Err(_) => Corpus::parse(builtin, split, var),
    }
}

fn main() -> adavae::Result<()> {
    let args: Vec<String> = std::env::args().skip(1).collect();
    let steps: usize = args.first().map_or(1000, |s| s.parse().unwrap());
    let per_label: usize = args.get(1).map_or(100, |s| s.parse().unwrap());
    let lambda: f64 = args.get(2).map_or(1.0, |s| s.parse().unwrap());

    let train = load("TRAIN", include_str!("../data/sentiment_train.txt"), Split::Train)?;
    let test = load("TEST", include_str!("../data/sentiment_test.txt"), Split::Test)?;
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
    let schedule = TrainSchedule::new(steps, 1e-3, lambda);
    let mut trainer = Trainer::new(
        AdaVae::new(config, 11)?,
        sentences,
        TrainConfig::new(schedule, 16, 11, TrainMode::Ft),
    )?;
    trainer.run_until(steps as u64, &mut std::io::sink())?;
    let vae = trainer.model;

    let cfg = ClassifierConfig {
        lr: 3e-3,
        ..Default::default()
    };
    let (test_acc, clf, head) = latent_classify(&vae, &train_set, &test_set, TrainMode::Pe, &cfg)?;
    println!("PE classifier test accuracy {test_acc:.3}");

    let fit_prior = |m: &AdaVae| -> adavae::Result<ClassConditionalPrior> {
        let z: Vec<(Vec<f64>, usize)> = train_set
            .iter()
            .map(|(t, l)| Ok((m.encode(t)?.0, *l)))
            .collect::<adavae::Result<_>>()?;
        ClassConditionalPrior::fit(&z)
    };
    let clf_prior = fit_prior(&clf)?;
    let vae_prior = fit_prior(&vae)?;

    for label in clf_prior.labels() {
        let (mut latent_hits, mut text_hits) = (0, 0);
        for i in 0..per_label {
            let seed = 1000 * label as u64 + i as u64;
            if predict_features(&clf.store, &head, &clf_prior.sample(label, seed)?)? == label {
                latent_hits += 1;
            }
            let out = decode_sample(&vae, Some(&vae_prior.sample(label, seed)?), 30, Strategy::Greedy)?;
            let mut ids = vec![BOS];
            ids.extend(&out);
            ids.push(EOS);
            if predict(&clf, &head, &ids)? == label {
                text_hits += 1;
            }
            if i < 2 {
                println!("  label {label} sample: {}", vocab.decode(&out));
            }
        }
        println!("label {label}: latents {latent_hits}/{per_label}, decoded text {text_hits}/{per_label}");
    }
    Ok(())
}
