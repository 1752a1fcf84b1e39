//! Parameter-efficient components: identity at init, the mixing rule,
//! freezing, and parameter counts.

mod common;

use adavae::classify::{train_latent_classifier, ClassifierConfig};
use adavae::config::{AdapterKind, AdapterSpec, InfusionMode, LatentConstruction, ParamGroup, Stack};
use adavae::params::{ParamStore, Session};
use adavae::pe::{apply_freeze, count_params, layout_mask, PrefixKv};
use adavae::schedule::TrainSchedule;
use adavae::tensor::Tensor;
use adavae::train::{TrainConfig, Trainer};
use adavae::transformer::{multi_head_attention, AttnParams, MaskKind, MaskMode};
use adavae::{AdaVae, ModelConfig, TrainMode};
use common::perturb;

const ADAPTERS: [AdapterKind; 3] = [
    AdapterKind::FfnParallel,
    AdapterKind::AttnParallel,
    AdapterKind::AttnSequential,
];

fn with_pe(mut cfg: ModelConfig, pe: Option<AdapterSpec>) -> ModelConfig {
    cfg.pe = pe;
    cfg
}

/// The PE-free model holding the same base, latent and infusion weights.
fn strip_pe(m: &AdaVae) -> AdaVae {
    let mut base = AdaVae::new(with_pe(m.config.clone(), None), 0).unwrap();
    let ids: Vec<_> = base.store.ids().collect();
    for id in ids {
        let name = base.store.param(id).name.clone();
        base.store
            .set(id, m.store.get(m.store.id(&name).unwrap()).clone())
            .unwrap();
    }
    base
}

fn outputs(m: &AdaVae, tokens: &[usize]) -> Vec<f64> {
    let (mu, ls) = m.encode(tokens).unwrap();
    let mut out = m.logits_given(tokens, Some(&mu)).unwrap().into_data();
    out.extend(mu);
    out.extend(ls);
    out
}

#[test]
fn fresh_adapters_change_no_output() {
    for kind in ADAPTERS {
        for seed in 0..3 {
            let cfg = with_pe(ModelConfig::tiny(20), Some(AdapterSpec::adapter(kind, 4)));
            let m = AdaVae::new(cfg, seed).unwrap();
            let base = strip_pe(&m);
            for tokens in [&[1, 7][..], &[1, 5, 9, 13, 17, 2]] {
                assert_eq!(outputs(&m, tokens), outputs(&base, tokens), "{kind} seed {seed}");
            }
        }
    }
}

#[test]
fn trained_adapters_do_change_outputs() {
    for kind in ADAPTERS {
        let cfg = with_pe(ModelConfig::tiny(20), Some(AdapterSpec::adapter(kind, 4)));
        let mut m = AdaVae::new(cfg, 1).unwrap();
        perturb(&mut m, 0.1, 1);
        assert_ne!(outputs(&m, &[1, 5, 9, 2]), outputs(&strip_pe(&m), &[1, 5, 9, 2]));
    }
}

#[test]
fn parallel_and_sequential_attention_adapters_differ() {
    let cfg = with_pe(
        ModelConfig::tiny(20),
        Some(AdapterSpec::adapter(AdapterKind::AttnParallel, 4)),
    );
    let mut par = AdaVae::new(cfg, 2).unwrap();
    perturb(&mut par, 0.2, 2);
    let seq_cfg = with_pe(
        par.config.clone(),
        Some(AdapterSpec::adapter(AdapterKind::AttnSequential, 4)),
    );
    let seq = AdaVae::from_store(seq_cfg, par.store.clone()).unwrap();
    assert_ne!(outputs(&par, &[1, 4, 8, 12, 2]), outputs(&seq, &[1, 4, 8, 12, 2]));
}

#[test]
fn empty_prefix_is_the_base_model() {
    let base = AdaVae::new(with_pe(ModelConfig::tiny(20), None), 3).unwrap();
    let empty = AdaVae::new(with_pe(ModelConfig::tiny(20), Some(AdapterSpec::prefix(0, 0.4))), 3).unwrap();
    assert_eq!(base.store.len(), empty.store.len());
    assert_eq!(outputs(&base, &[1, 6, 7, 2]), outputs(&empty, &[1, 6, 7, 2]));
}

#[test]
fn zero_mixing_ignores_prefix_values() {
    let cfg = with_pe(ModelConfig::tiny(20), Some(AdapterSpec::prefix(3, 0.0)));
    let mut m = AdaVae::new(cfg, 4).unwrap();
    perturb(&mut m, 0.3, 4);
    assert_eq!(outputs(&m, &[1, 6, 7, 2]), outputs(&strip_pe(&m), &[1, 6, 7, 2]));
}

/// One head, `d = 2`, identity projections: every intermediate is small
/// enough to write out.
fn identity_attention(store: &mut ParamStore) -> AttnParams {
    let g = ParamGroup::Base(Stack::Decoder);
    for m in ["wq", "wk", "wv", "wo"] {
        store.add(&format!("b.attn.{m}"), g, Tensor::eye(2));
    }
    for m in ["bq", "bk", "bv", "bo"] {
        store.add(&format!("b.attn.{m}"), g, Tensor::row(vec![0.0, 0.0]));
    }
    AttnParams::lookup(store, "b").unwrap()
}

fn softmax(xs: &[f64]) -> Vec<f64> {
    let m = xs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = xs.iter().map(|x| (x - m).exp()).collect();
    let z: f64 = e.iter().sum();
    e.iter().map(|v| v / z).collect()
}

fn readout(q: &[f64], keys: &[[f64; 2]], values: &[[f64; 2]]) -> [f64; 2] {
    let scale = 1.0 / 2f64.sqrt();
    let scores: Vec<f64> = keys.iter().map(|k| scale * (q[0] * k[0] + q[1] * k[1])).collect();
    let w = softmax(&scores);
    let mut out = [0.0; 2];
    for (wi, v) in w.iter().zip(values) {
        out[0] += wi * v[0];
        out[1] += wi * v[1];
    }
    out
}

#[test]
fn two_position_prefix_by_hand() {
    let x = [[0.5, -1.0], [1.5, 0.25]];
    let pk = [[1.0, 0.0], [-0.5, 2.0]];
    let pv = [[0.3, 0.7], [-1.2, 0.4]];
    let lambda2 = 0.25;

    let mut store = ParamStore::new();
    let p = identity_attention(&mut store);
    let mut s = Session::new(&store, None);
    let xv = s
        .graph
        .constant(Tensor::from_rows(&x.iter().map(|r| r.to_vec()).collect::<Vec<_>>()));
    let keys = s
        .graph
        .constant(Tensor::from_rows(&pk.iter().map(|r| r.to_vec()).collect::<Vec<_>>()));
    let values = s
        .graph
        .constant(Tensor::from_rows(&pv.iter().map(|r| r.to_vec()).collect::<Vec<_>>()));
    let prefix = PrefixKv { keys, values, lambda2 };
    let mask = MaskMode::new(MaskKind::Causal, 2);
    let out = multi_head_attention(&mut s, xv, &p, 1, &mask, &[], Some(&prefix)).unwrap();
    let got = s.value(out.out).clone();

    for (i, q) in x.iter().enumerate() {
        let own = readout(q, &x[..=i], &x[..=i]);
        let pre = readout(q, &pk, &pv);
        for c in 0..2 {
            let want = (1.0 - lambda2) * own[c] + lambda2 * pre[c];
            assert!((got.at(i, c) - want).abs() < 1e-10, "row {i} col {c}");
        }
    }
}

#[test]
fn prefix_follows_the_mixing_rule_on_random_inputs() {
    use rand::SeedableRng;
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(9);
    let m = AdaVae::new(ModelConfig::tiny(10), 9).unwrap();
    let p = AttnParams::lookup(&m.store, "enc.h0").unwrap();
    for lambda2 in [0.1, 0.5, 0.9] {
        let mut s = Session::new(&m.store, None);
        let x = s.graph.constant(Tensor::randn(&[5, 16], 1.0, &mut rng));
        let keys = s.graph.constant(Tensor::randn(&[3, 16], 1.0, &mut rng));
        let values = s.graph.constant(Tensor::randn(&[3, 16], 1.0, &mut rng));
        let mask = MaskMode::new(MaskKind::Bidirectional, 5);
        let mixed =
            multi_head_attention(&mut s, x, &p, 2, &mask, &[], Some(&PrefixKv { keys, values, lambda2 })).unwrap();
        let own = multi_head_attention(
            &mut s,
            x,
            &p,
            2,
            &mask,
            &[],
            Some(&PrefixKv {
                keys,
                values,
                lambda2: 0.0,
            }),
        )
        .unwrap();
        let pre = multi_head_attention(
            &mut s,
            x,
            &p,
            2,
            &mask,
            &[],
            Some(&PrefixKv {
                keys,
                values,
                lambda2: 1.0,
            }),
        )
        .unwrap();
        // The output projection is affine, so the mix survives it.
        let (a, b, c) = (s.value(mixed.out), s.value(own.out), s.value(pre.out));
        for i in 0..a.len() {
            let want = (1.0 - lambda2) * b.data()[i] + lambda2 * c.data()[i];
            assert!((a.data()[i] - want).abs() < 1e-12);
        }
    }
}

#[test]
fn pe_training_leaves_frozen_weights_bit_identical() {
    let sents = vec![vec![1, 4, 5, 6, 2], vec![1, 7, 8, 2], vec![1, 9, 10, 11, 12, 2]];
    for kind in [AdapterKind::FfnParallel, AdapterKind::Prefix] {
        let pe = match kind {
            AdapterKind::Prefix => AdapterSpec::prefix(2, 0.1),
            k => AdapterSpec::adapter(k, 4),
        };
        let model = AdaVae::new(with_pe(ModelConfig::tiny(14), Some(pe)), 5).unwrap();
        let init = model.store.clone();
        let mask = apply_freeze(&init, TrainMode::Pe);
        let cfg = TrainConfig::new(TrainSchedule::new(30, 1e-2, 0.5), 2, 5, TrainMode::Pe);
        let mut t = Trainer::new(model, sents.clone(), cfg).unwrap();
        t.run_until(30, &mut std::io::sink()).unwrap();
        let mut trained = 0;
        for (id, p) in init.iter() {
            let same = t.model.store.get(id).data() == p.value().data();
            if mask.is_trainable(id) {
                trained += usize::from(!same);
            } else {
                assert!(same, "{} moved", p.name);
            }
        }
        assert!(trained > 0);
    }
}

#[test]
fn feature_based_classifier_keeps_the_encoder() {
    let mut m = AdaVae::new(ModelConfig::tiny(14), 6).unwrap();
    perturb(&mut m, 0.05, 6);
    let data: Vec<(Vec<usize>, usize)> = (0..8).map(|i| (vec![1, 4 + i, 5 + i % 3, 2], i % 2)).collect();
    let before: Vec<_> = data.iter().map(|(t, _)| m.encode(t).unwrap()).collect();
    let cfg = ClassifierConfig {
        steps: 20,
        lr: 1e-2,
        ..Default::default()
    };
    train_latent_classifier(&mut m, &data, TrainMode::Fb, &cfg).unwrap();
    let after: Vec<_> = data.iter().map(|(t, _)| m.encode(t).unwrap()).collect();
    assert_eq!(before, after);

    let mut pe = m.clone();
    train_latent_classifier(&mut pe, &data, TrainMode::Pe, &cfg).unwrap();
    let after_pe: Vec<_> = data.iter().map(|(t, _)| pe.encode(t).unwrap()).collect();
    assert_ne!(before, after_pe);
    for (id, p) in m.store.iter() {
        if matches!(p.group, ParamGroup::Base(_) | ParamGroup::Embedding) {
            assert_eq!(pe.store.get(id).data(), p.value().data(), "{}", p.name);
        }
    }
}

/// Hand count of everything `cfg` holds and what PE mode trains.
fn closed_form(cfg: &ModelConfig) -> (usize, usize) {
    let (v, d, ff, k, s) = (cfg.vocab_size, cfg.d_model, cfg.d_ff, cfg.latent_dim, cfg.max_seq_len);
    let block = 4 * d + 4 * (d * d + d) + (d * ff + ff) + (ff * d + d);
    let stack = |layers: usize| s * d + layers * block + 2 * d;
    let per_block = match &cfg.pe {
        None => 0,
        Some(p) if p.kind == AdapterKind::Prefix => 2 * p.prefix_len * d,
        Some(p) => 2 * p.bottleneck * d + p.bottleneck + d,
    };
    let pe = (cfg.enc_layers + cfg.dec_layers) * per_block;
    let key = match cfg.latent {
        LatentConstruction::Attention => d * d + d,
        LatentConstruction::Pooled => 0,
    };
    let latent = key + 2 * (d * k + k);
    let map = k * d + d;
    let infusion = cfg.dec_layers
        * match cfg.infusion {
            InfusionMode::None => 0,
            InfusionMode::Atm => map,
            InfusionMode::Psa => 2 * map,
            InfusionMode::AtmPsa => 3 * map,
        };
    let trainable = pe + latent + infusion;
    (
        v * d + stack(cfg.enc_layers) + stack(cfg.dec_layers) + trainable,
        trainable,
    )
}

#[test]
fn counts_match_closed_forms() {
    let mut configs = vec![
        ModelConfig::desk(1024),
        ModelConfig::tiny(12),
        ModelConfig::paper_shaped(),
    ];
    let mut prefix = ModelConfig::desk(300);
    prefix.pe = Some(AdapterSpec::prefix(30, 0.1));
    prefix.infusion = InfusionMode::AtmPsa;
    configs.push(prefix);
    let mut pooled = ModelConfig::desk(500);
    pooled.latent = LatentConstruction::Pooled;
    pooled.infusion = InfusionMode::Atm;
    pooled.pe = Some(AdapterSpec::adapter(AdapterKind::AttnSequential, 8));
    configs.push(pooled);
    for cfg in configs {
        let (total, trainable) = closed_form(&cfg);
        let c = count_params(&cfg, &layout_mask(&cfg.param_layout(), TrainMode::Pe));
        assert_eq!((c.total, c.trainable), (total, trainable), "{cfg:?}");
        let ft = count_params(&cfg, &layout_mask(&cfg.param_layout(), TrainMode::Ft));
        assert_eq!(ft.trainable, ft.total);
    }
    // Exact desk figures for the README.
    assert_eq!(closed_form(&ModelConfig::desk(1024)), (614_400, 40_576));
}

#[test]
fn fraction_grows_with_the_bottleneck() {
    let frac = |a: usize| {
        let mut cfg = ModelConfig::desk(1024);
        cfg.d_model = 128;
        cfg.pe = Some(AdapterSpec::adapter(AdapterKind::FfnParallel, a));
        count_params(&cfg, &layout_mask(&cfg.param_layout(), TrainMode::Pe)).fraction_pct()
    };
    let (a, b, c) = (frac(16), frac(64), frac(127));
    assert!(a < b && b < c && c < 100.0, "{a} {b} {c}");
}
