//! Schedules, the batch objective and the evaluation metrics.

mod common;

use adavae::corpus::pad_batch;
use adavae::metrics::{
    active_units_from_means, bleu, mi_from_posteriors, neg_elbo_eval, ppl_from_elbo, self_bleu, ElboSampling,
};
use adavae::params::Session;
use adavae::pe::apply_freeze;
use adavae::schedule::{beta_at_step, lr_at_step, stage_mask_at_step, TrainSchedule};
use adavae::vae::normal_noise;
use adavae::{AdaVae, ModelConfig, TrainMode};
use common::perturb;
use proptest::prelude::*;

fn model(seed: u64) -> AdaVae {
    let mut m = AdaVae::new(ModelConfig::tiny(16), seed).unwrap();
    perturb(&mut m, 0.1, seed);
    m
}

fn sentence() -> impl Strategy<Value = Vec<usize>> {
    prop::collection::vec(4usize..16, 1..8).prop_map(|mut body| {
        body.insert(0, 1);
        body.push(2);
        body
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn beta_repeats_every_cycle_and_stays_in_range(cycle in 1usize..200, t in 0usize..10_000) {
        let s = TrainSchedule::new(4 * cycle, 1e-3, 0.5);
        let t = t % (3 * cycle);
        let b = beta_at_step(t, &s);
        prop_assert!((0.0..=1.0).contains(&b));
        prop_assert!((b - beta_at_step(t + cycle, &s)).abs() < 1e-12);
        if t % cycle + 1 < cycle {
            prop_assert!(beta_at_step(t + 1, &s) >= b);
        }
    }

    #[test]
    fn lr_warms_up_linearly_then_holds(total in 6usize..5000, t in 0usize..5000, peak in 1e-5f64..1e-1) {
        let s = TrainSchedule::new(total, peak, 0.5);
        let t = t % total;
        let lr = lr_at_step(t, &s);
        let warm = total as f64 / 6.0;
        let want = if (t as f64) < warm { peak * t as f64 / warm } else { peak };
        prop_assert!((lr - want).abs() <= 1e-15 * peak.max(1.0));
        prop_assert!(lr <= peak);
        if t + 1 < total {
            prop_assert!(lr_at_step(t + 1, &s) >= lr);
        }
    }

    #[test]
    fn padding_never_changes_the_loss(
        batch in prop::collection::vec(sentence(), 1..4),
        seed in 0u64..50,
        beta in 0.0f64..1.0,
        lambda in 0.0f64..3.0,
    ) {
        let m = model(seed % 4);
        let loss = |b: &[Vec<usize>]| {
            let mut s = Session::new(&m.store, None);
            m.batch_loss(&mut s, b, beta, lambda, Some((seed, 3))).unwrap().breakdown
        };
        prop_assert_eq!(loss(&batch), loss(&pad_batch(&batch)));
    }

    #[test]
    fn batch_loss_is_mean_reconstruction_plus_hinged_mean_kl(
        batch in prop::collection::vec(sentence(), 1..4),
        beta in 0.0f64..1.0,
        lambda in 0.0f64..3.0,
    ) {
        let m = model(1);
        let k = m.config.latent_dim;
        let eps = normal_noise(5, 9, k * batch.len());
        let (mut rec, mut kl) = (0.0, 0.0);
        for (i, sent) in batch.iter().enumerate() {
            let mut s = Session::new(&m.store, None);
            let (r, kv, _, _) = m.sentence_terms(&mut s, sent, Some(&eps[i * k..(i + 1) * k])).unwrap();
            rec += s.value(r).item();
            kl += s.value(kv).data().iter().sum::<f64>();
        }
        let n = batch.len() as f64;
        let want = rec / n + beta * (kl / n).max(lambda);
        let mut s = Session::new(&m.store, None);
        let got = m.batch_loss(&mut s, &batch, beta, lambda, Some((5, 9))).unwrap().breakdown.total;
        prop_assert!((got - want).abs() <= 1e-10 * want.abs().max(1.0));
    }

    #[test]
    fn mi_is_bounded_by_log_n(
        post in prop::collection::vec((prop::collection::vec(-3.0f64..3.0, 2), prop::collection::vec(-3.0f64..0.5, 2)), 2..12),
        seed in 0u64..100,
    ) {
        let mi = mi_from_posteriors(&post, 5, seed).unwrap();
        prop_assert!(mi <= (post.len() as f64).ln() + 1e-12);
    }

    #[test]
    fn active_units_ignore_a_common_shift(
        mus in prop::collection::vec(prop::collection::vec(-1.0f64..1.0, 4), 2..20),
        shift in prop::collection::vec(-100.0f64..100.0, 4),
    ) {
        let shifted: Vec<Vec<f64>> = mus.iter().map(|m| m.iter().zip(&shift).map(|(a, b)| a + b).collect()).collect();
        // Dimensions with variance right at the threshold may flip by round-off.
        let a = active_units_from_means(&mus, 0.01).unwrap();
        let b = active_units_from_means(&shifted, 0.01).unwrap();
        let n = mus.len() as f64;
        let near = (0..4).filter(|&d| {
            let mean = mus.iter().map(|m| m[d]).sum::<f64>() / n;
            let var = mus.iter().map(|m| (m[d] - mean).powi(2)).sum::<f64>() / n;
            (var - 0.01).abs() < 1e-9
        }).count();
        prop_assert!(a.abs_diff(b) <= near);
    }

    #[test]
    fn bleu_stays_in_the_unit_interval(
        hyps in prop::collection::vec(prop::collection::vec(0u8..6, 0..8), 1..5),
        refs in prop::collection::vec(prop::collection::vec(0u8..6, 1..8), 1..3),
    ) {
        let r: Vec<Vec<Vec<u8>>> = hyps.iter().map(|_| refs.clone()).collect();
        let b = bleu(&hyps, &r, 4).unwrap();
        prop_assert!((0.0..=1.0 + 1e-12).contains(&b));
    }
}

#[test]
fn stage_one_holds_back_decoder_components() {
    let m = model(0);
    let s = TrainSchedule::new(600, 1e-3, 0.5);
    let mask = apply_freeze(&m.store, TrainMode::Pe);
    let early = stage_mask_at_step(99, &s, &mask);
    let late = stage_mask_at_step(100, &s, &mask);
    for (id, p) in m.store.iter() {
        let dec_pe = matches!(p.group, adavae::config::ParamGroup::Pe(adavae::config::Stack::Decoder));
        assert_eq!(early.is_trainable(id), mask.is_trainable(id) && !dec_pe, "{}", p.name);
        assert_eq!(late.is_trainable(id), mask.is_trainable(id));
    }
    let ft = apply_freeze(&m.store, TrainMode::Ft);
    assert_eq!(stage_mask_at_step(0, &s, &ft), ft);
}

#[test]
fn free_bits_silence_the_kl_gradient_below_the_threshold() {
    let m = model(2);
    let batch = vec![vec![1, 5, 6, 2], vec![1, 7, 2]];
    let flags = vec![true; m.store.len()];
    let grads = |beta: f64, lambda: f64| {
        let mut s = Session::new(&m.store, Some(&flags));
        let l = m.batch_loss(&mut s, &batch, beta, lambda, Some((1, 1))).unwrap();
        (s.backward(l.total).unwrap(), l.breakdown)
    };
    let (hinged, b) = grads(0.7, 1e6);
    assert_eq!(b.kl_hinged, 1e6);
    let (plain, _) = grads(0.0, 0.0);
    for id in m.store.ids() {
        let (a, c) = (hinged.get(id).unwrap(), plain.get(id).unwrap());
        for (x, y) in a.iter().zip(c) {
            assert!((x - y).abs() <= 1e-14, "{}", m.store.param(id).name);
        }
    }
    let (open, _) = grads(0.7, 0.0);
    let ls = m.store.id("latent.logsigma.b").unwrap();
    assert_ne!(open.get(ls).unwrap(), plain.get(ls).unwrap());
}

#[test]
fn bleu_by_hand() {
    let s = |t: &str| t.split(' ').map(str::to_owned).collect::<Vec<_>>();
    // Precisions 5/6, 3/5, 2/4, 1/3 and brevity penalty exp(1 − 7/6).
    let got = bleu(&[s("a b c d e f")], &[vec![s("a b c d x f g")]], 4).unwrap();
    let want = (-1.0f64 / 6.0).exp() * (1.0f64 / 12.0).powf(0.25);
    assert!((got - want).abs() < 1e-12);

    // Counts are pooled over the corpus, not averaged per sentence.
    let got = bleu(&[s("a b"), s("c d")], &[vec![s("a b")], vec![s("c e")]], 2).unwrap();
    assert!((got - (3.0f64 / 8.0).sqrt()).abs() < 1e-12);

    // Clipping: "the the the" against one "the".
    let got = bleu(&[s("the the the")], &[vec![s("the cat sat")]], 1).unwrap();
    assert!((got - 1.0 / 3.0).abs() < 1e-12);
}

#[test]
fn self_bleu_of_copies_is_one() {
    let h = vec![vec![1, 2, 3, 4, 5]; 4];
    assert!((self_bleu(&h, 4).unwrap() - 1.0).abs() < 1e-12);
    let distinct: Vec<Vec<u32>> = (0..4).map(|i| (0..5).map(|j| 10 * i + j).collect()).collect();
    assert!(self_bleu(&distinct, 4).unwrap() < 1e-6);
}

#[test]
fn neg_elbo_does_not_depend_on_sentence_order() {
    let m = model(3);
    let sents = vec![
        vec![1, 5, 6, 2],
        vec![1, 7, 8, 9, 2],
        vec![1, 10, 2],
        vec![1, 11, 12, 13, 14, 2],
    ];
    let mut rev = sents.clone();
    rev.reverse();
    let a = neg_elbo_eval(&m, &sents, ElboSampling::Mean).unwrap();
    let b = neg_elbo_eval(&m, &rev, ElboSampling::Mean).unwrap();
    assert_eq!(a.token_count, b.token_count);
    assert!((a.total_nats - b.total_nats).abs() < 1e-10);
    let pa = ppl_from_elbo(a.total_nats, a.token_count);
    assert!((pa - ppl_from_elbo(b.total_nats, b.token_count)).abs() < 1e-10 * pa);
}

#[test]
fn uniform_decoder_with_prior_posterior_costs_log_v_per_token() {
    let mut m = model(4);
    for name in [
        "wte",
        "latent.mu.w",
        "latent.mu.b",
        "latent.logsigma.w",
        "latent.logsigma.b",
    ] {
        let id = m.store.id(name).unwrap();
        m.store.get_mut(id).data_mut().fill(0.0);
    }
    let sents = vec![vec![1, 5, 6, 2], vec![1, 7, 2]];
    let e = neg_elbo_eval(&m, &sents, ElboSampling::Samples { samples: 3, seed: 1 }).unwrap();
    assert_eq!(e.kl_nats, 0.0);
    assert!((e.per_token_nats - 16f64.ln()).abs() < 1e-12);
    assert!((ppl_from_elbo(e.total_nats, e.token_count) - 16.0).abs() < 1e-9);
}
