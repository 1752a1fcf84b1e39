//! Evaluation metrics on hand-made inputs: BLEU, self-BLEU, the combined
//! transfer scores, mutual information and active units.
//!
//! cargo run --example metrics

use adavae::metrics::{active_units_from_means, bleu, bleu_f1, g_score, mi_from_posteriors, self_bleu};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

fn words(s: &str) -> Vec<&str> {
    s.split_whitespace().collect()
}

fn main() -> adavae::Result<()> {
    let hyp = vec![words("the food was great and cheap"), words("service is slow")];
    let refs = vec![
        vec![words("the food was great and very cheap")],
        vec![words("the service is slow")],
    ];
    let b = bleu(&hyp, &refs, 4)?;
    println!("BLEU-4 {b:.4}");

    let samples = vec![
        words("the food was great"),
        words("the food was awful"),
        words("staff were rude today"),
    ];
    let sb = self_bleu(&samples, 4)?;
    println!("self-BLEU {sb:.4}");

    for (acc, bl, sbl) in [(0.9, 0.25, 0.4), (0.7, 0.45, 0.6)] {
        println!(
            "acc {acc:.2} bleu {bl:.2} self-bleu {sbl:.2}: G-score {:.4}, BLEU-F1 {:.4}",
            g_score(acc, bl),
            bleu_f1(bl, sbl)
        );
    }

    // Posteriors around two well-separated centers carry about log 2 nats
    // of information about which cluster a sentence came from.
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let jitter = Normal::new(0.0, 0.05).unwrap();
    let posteriors: Vec<(Vec<f64>, Vec<f64>)> = (0..200)
        .map(|i| {
            let c = if i % 2 == 0 { 3.0 } else { -3.0 };
            (
                vec![c + jitter.sample(&mut rng), jitter.sample(&mut rng)],
                vec![(0.3f64).ln(), 0.0],
            )
        })
        .collect();
    let mi = mi_from_posteriors(&posteriors, 4, 9)?;
    println!("MI {mi:.4} nats (log 2 = {:.4})", 2f64.ln());

    let means: Vec<Vec<f64>> = posteriors.iter().map(|(m, _)| m.clone()).collect();
    println!("active units {} of 2", active_units_from_means(&means, 0.01)?);
    Ok(())
}
