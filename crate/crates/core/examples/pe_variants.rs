//! Every parameter-efficient component: its size, whether a fresh model
//! matches the same model with the component removed, and a short training run.
//!
//! cargo run --release --example pe_variants -- [steps]

use adavae::corpus::{Corpus, Split, Vocab};
use adavae::pe::ParamsReport;
use adavae::schedule::TrainSchedule;
use adavae::train::{TrainConfig, Trainer};
use adavae::{AdaVae, AdapterKind, AdapterSpec, ModelConfig, TrainMode};

fn main() -> adavae::Result<()> {
    let steps: usize = std::env::args().nth(1).map_or(150, |s| s.parse().unwrap());

    let corpus = Corpus::parse(include_str!("../data/toy32.txt"), Split::Train, "toy32")?;
    let vocab = Vocab::build(&corpus, 1000)?;
    let base_cfg = ModelConfig {
        pe: None,
        ..ModelConfig::desk(vocab.len())
    };
    let sentences = corpus.encode_all(&vocab, base_cfg.max_seq_len);
    let probe = &sentences[0];

    for kind in AdapterKind::ALL {
        let spec = if kind.is_adapter() {
            AdapterSpec::adapter(kind, 16)
        } else {
            AdapterSpec::prefix(4, 0.1)
        };
        let cfg = ModelConfig {
            pe: Some(spec),
            ..base_cfg.clone()
        };
        let model = AdaVae::new(cfg.clone(), 5)?;

        // Same weights minus the PE tensors.
        let mut base = AdaVae::new(base_cfg.clone(), 5)?;
        let ids: Vec<_> = base.store.ids().collect();
        for id in ids {
            let name = base.store.param(id).name.clone();
            base.store.set(id, model.store.get(model.store.id(&name)?).clone())?;
        }
        let z = model.encode(probe)?.0;
        let with = model.logits_given(&probe[..probe.len() - 1], Some(&z))?;
        let without = base.logits_given(&probe[..probe.len() - 1], Some(&z))?;
        let gap = with
            .data()
            .iter()
            .zip(without.data())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max);

        let report = ParamsReport::for_config(&cfg, TrainMode::Pe).overall;
        let schedule = TrainSchedule::new(steps, 1e-3, 1.0);
        let mut trainer = Trainer::new(
            model,
            sentences.clone(),
            TrainConfig::new(schedule, 16, 5, TrainMode::Pe),
        )?;
        let log = trainer.run_until(steps as u64, &mut std::io::sink())?;
        println!(
            "{:<16} trainable {:>6}  init gap {gap:.2e}  rec/tok {:.3} -> {:.3}",
            kind.to_string(),
            report.trainable,
            log[0].rec_per_token,
            log.last().unwrap().rec_per_token
        );
    }
    Ok(())
}
