//! Shared oracles for the integration tests.
//!
//! `Reference` is a straight-line re-implementation of the whole model over
//! plain `Vec<f64>` rows, written without the tape, so forward values and
//! finite-difference gradients can be checked against an independent path.

#![allow(dead_code)]

use adavae::config::{AdapterKind, InfusionMode, LatentConstruction};
use adavae::corpus::{Corpus, Split, Vocab};
use adavae::tensor::Tensor;
use adavae::AdaVae;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

pub type Mat = Vec<Vec<f64>>;

pub const PAD: usize = 0;

pub fn toy32() -> (Vocab, Vec<Vec<usize>>) {
    let corpus = Corpus::parse(include_str!("../../data/toy32.txt"), Split::Train, "toy32").unwrap();
    let vocab = Vocab::build(&corpus, 1024).unwrap();
    let sents = corpus.encode_all(&vocab, 64);
    (vocab, sents)
}

pub fn sentiment() -> (Vocab, Vec<(Vec<usize>, usize)>, Vec<(Vec<usize>, usize)>) {
    let train = Corpus::parse(include_str!("../../data/sentiment_train.txt"), Split::Train, "train").unwrap();
    let test = Corpus::parse(include_str!("../../data/sentiment_test.txt"), Split::Test, "test").unwrap();
    let vocab = Vocab::build(&train, 1024).unwrap();
    let pair = |c: &Corpus| {
        c.encode_all(&vocab, 64)
            .into_iter()
            .zip(c.labels())
            .map(|(t, l)| (t, l.unwrap()))
            .collect::<Vec<_>>()
    };
    let (a, b) = (pair(&train), pair(&test));
    (vocab, a, b)
}

/// Adds N(0, std²) noise to every parameter so zero-initialized pieces
/// (adapter up-projections, biases) carry signal.
pub fn perturb(model: &mut AdaVae, std: f64, seed: u64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let normal = Normal::new(0.0, std).unwrap();
    let ids: Vec<_> = model.store.ids().collect();
    for id in ids {
        for v in model.store.get_mut(id).data_mut() {
            *v += normal.sample(&mut rng);
        }
    }
}

pub fn random_tokens(rng: &mut ChaCha8Rng, len: usize, vocab: usize) -> Vec<usize> {
    use rand::Rng;
    (0..len).map(|_| rng.gen_range(4..vocab)).collect()
}

/// `(f(x + h) − f(x − h)) / 2h` along one coordinate of parameter `name`.
pub fn central_difference(model: &AdaVae, name: &str, index: usize, h: f64, f: impl Fn(&AdaVae) -> f64) -> f64 {
    let id = model.store.id(name).unwrap();
    let mut m = model.clone();
    let x0 = m.store.get(id).data()[index];
    m.store.get_mut(id).data_mut()[index] = x0 + h;
    let up = f(&m);
    m.store.get_mut(id).data_mut()[index] = x0 - h;
    let down = f(&m);
    (up - down) / (2.0 * h)
}

fn rows(t: &Tensor) -> Mat {
    let c = t.cols();
    t.data().chunks(c).map(<[f64]>::to_vec).collect()
}

pub fn matmul(a: &Mat, b: &Mat) -> Mat {
    a.iter()
        .map(|r| {
            (0..b[0].len())
                .map(|j| r.iter().zip(b).map(|(x, br)| x * br[j]).sum())
                .collect()
        })
        .collect()
}

pub fn linear(x: &Mat, w: &Mat, b: &[f64]) -> Mat {
    matmul(x, w)
        .into_iter()
        .map(|r| r.iter().zip(b).map(|(v, bb)| v + bb).collect())
        .collect()
}

pub fn add(a: &Mat, b: &Mat) -> Mat {
    a.iter()
        .zip(b)
        .map(|(x, y)| x.iter().zip(y).map(|(u, v)| u + v).collect())
        .collect()
}

fn scale(a: &Mat, s: f64) -> Mat {
    a.iter().map(|r| r.iter().map(|v| v * s).collect()).collect()
}

pub fn layer_norm(x: &Mat, g: &[f64], b: &[f64], eps: f64) -> Mat {
    x.iter()
        .map(|r| {
            let n = r.len() as f64;
            let mean = r.iter().sum::<f64>() / n;
            let var = r.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
            r.iter()
                .zip(g.iter().zip(b))
                .map(|(v, (g, b))| (v - mean) / (var + eps).sqrt() * g + b)
                .collect()
        })
        .collect()
}

pub fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + ((2.0 / std::f64::consts::PI).sqrt() * (x + 0.044715 * x.powi(3))).tanh())
}

/// Softmax over the visible entries; hidden entries get 0.
pub fn softmax_visible(xs: &[f64], vis: &[bool]) -> Vec<f64> {
    let m = xs
        .iter()
        .zip(vis)
        .filter(|(_, v)| **v)
        .map(|(x, _)| *x)
        .fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = xs
        .iter()
        .zip(vis)
        .map(|(x, v)| if *v { (x - m).exp() } else { 0.0 })
        .collect();
    let s: f64 = e.iter().sum();
    e.iter().map(|v| if s > 0.0 { v / s } else { 0.0 }).collect()
}

fn cols(m: &Mat, start: usize, len: usize) -> Mat {
    m.iter().map(|r| r[start..start + len].to_vec()).collect()
}

/// Independent forward pass reading weights by name.
pub struct Reference<'a> {
    pub model: &'a AdaVae,
}

impl<'a> Reference<'a> {
    pub fn new(model: &'a AdaVae) -> Self {
        Self { model }
    }

    fn t(&self, name: &str) -> &Tensor {
        self.model.store.get(self.model.store.id(name).unwrap())
    }

    fn mat(&self, name: &str) -> Mat {
        rows(self.t(name))
    }

    fn v(&self, name: &str) -> Vec<f64> {
        self.t(name).data().to_vec()
    }

    fn lin(&self, x: &Mat, name: &str) -> Mat {
        linear(x, &self.mat(&format!("{name}.w")), &self.v(&format!("{name}.b")))
    }

    /// Multi-head attention over `[extra; own]` keys for an already
    /// normalized input `x`.
    fn attention(&self, x: &Mat, block: &str, causal: bool, valid: &[bool], extra: &[(Mat, Mat)]) -> Mat {
        let cfg = &self.model.config;
        let (d, nh) = (cfg.d_model, cfg.n_heads);
        let dh = d / nh;
        let p = |m: &str| format!("{block}.attn.{m}");
        let q = linear(x, &self.mat(&p("wq")), &self.v(&p("bq")));
        let k = linear(x, &self.mat(&p("wk")), &self.v(&p("bk")));
        let v = linear(x, &self.mat(&p("wv")), &self.v(&p("bv")));
        let prefix = match &cfg.pe {
            Some(spec) if spec.kind == AdapterKind::Prefix && spec.prefix_len > 0 => Some((
                self.mat(&format!("{block}.prefix.k")),
                self.mat(&format!("{block}.prefix.v")),
                spec.prefix_lambda,
            )),
            _ => None,
        };
        let l = x.len();
        let mut out = vec![vec![0.0; d]; l];
        for h in 0..nh {
            let mut keys: Mat = Vec::new();
            let mut vals: Mat = Vec::new();
            for (ek, ev) in extra {
                keys.extend(cols(ek, h * dh, dh));
                vals.extend(cols(ev, h * dh, dh));
            }
            let n_extra = keys.len();
            keys.extend(cols(&k, h * dh, dh));
            vals.extend(cols(&v, h * dh, dh));
            for i in 0..l {
                let qi = &q[i][h * dh..(h + 1) * dh];
                let dot = |kr: &[f64]| qi.iter().zip(kr).map(|(a, b)| a * b).sum::<f64>() / (dh as f64).sqrt();
                let scores: Vec<f64> = keys.iter().map(|kr| dot(kr)).collect();
                let vis: Vec<bool> = (0..keys.len())
                    .map(|j| j < n_extra || (valid[j - n_extra] && (!causal || j - n_extra <= i)))
                    .collect();
                let w = softmax_visible(&scores, &vis);
                let mut o: Vec<f64> = (0..dh)
                    .map(|c| w.iter().zip(&vals).map(|(wj, vr)| wj * vr[c]).sum())
                    .collect();
                if let Some((pk, pv, lam)) = &prefix {
                    let pk = cols(pk, h * dh, dh);
                    let pv = cols(pv, h * dh, dh);
                    let ps: Vec<f64> = pk.iter().map(|kr| dot(kr)).collect();
                    let pw = softmax_visible(&ps, &vec![true; ps.len()]);
                    for (c, oc) in o.iter_mut().enumerate() {
                        let po: f64 = pw.iter().zip(&pv).map(|(wj, vr)| wj * vr[c]).sum();
                        *oc = (1.0 - lam) * *oc + lam * po;
                    }
                }
                out[i][h * dh..(h + 1) * dh].copy_from_slice(&o);
            }
        }
        linear(&out, &self.mat(&p("wo")), &self.v(&p("bo")))
    }

    fn adapter(&self, x: &Mat, block: &str) -> Mat {
        let down = self.lin(x, &format!("{block}.adapter.down"));
        let act: Mat = down.iter().map(|r| r.iter().map(|v| gelu(*v)).collect()).collect();
        self.lin(&act, &format!("{block}.adapter.up"))
    }

    fn block(&self, h: &Mat, block: &str, causal: bool, valid: &[bool], extra: &[(Mat, Mat)]) -> Mat {
        let cfg = &self.model.config;
        let kind = cfg.pe.as_ref().map(|p| p.kind);
        let x = layer_norm(
            h,
            &self.v(&format!("{block}.ln1.g")),
            &self.v(&format!("{block}.ln1.b")),
            cfg.ln_eps,
        );
        let mut a = self.attention(&x, block, causal, valid, extra);
        if kind == Some(AdapterKind::AttnSequential) {
            a = add(&a, &self.adapter(&a, block));
        }
        let mut h1 = add(h, &a);
        if kind == Some(AdapterKind::AttnParallel) {
            h1 = add(&h1, &self.adapter(h, block));
        }
        let y = layer_norm(
            &h1,
            &self.v(&format!("{block}.ln2.g")),
            &self.v(&format!("{block}.ln2.b")),
            cfg.ln_eps,
        );
        let u = linear(
            &y,
            &self.mat(&format!("{block}.mlp.w1")),
            &self.v(&format!("{block}.mlp.b1")),
        );
        let u: Mat = u.iter().map(|r| r.iter().map(|v| gelu(*v)).collect()).collect();
        let mut m = linear(
            &u,
            &self.mat(&format!("{block}.mlp.w2")),
            &self.v(&format!("{block}.mlp.b2")),
        );
        if kind == Some(AdapterKind::FfnParallel) {
            m = add(&m, &self.adapter(&h1, block));
        }
        add(&h1, &m)
    }

    fn stack(&self, name: &str, layers: usize, tokens: &[usize], causal: bool, extra: &[Vec<(Mat, Mat)>]) -> Mat {
        let cfg = &self.model.config;
        let wte = self.mat("wte");
        let wpe = self.mat(&format!("{name}.wpe"));
        let valid: Vec<bool> = tokens.iter().map(|&t| t != PAD).collect();
        let mut h: Mat = tokens
            .iter()
            .enumerate()
            .map(|(i, &t)| add(&vec![wte[t].clone()], &vec![wpe[i].clone()])[0].clone())
            .collect();
        for l in 0..layers {
            let e = extra.get(l).map_or(&[][..], Vec::as_slice);
            h = self.block(&h, &format!("{name}.h{l}"), causal, &valid, e);
        }
        layer_norm(
            &h,
            &self.v(&format!("{name}.ln_f.g")),
            &self.v(&format!("{name}.ln_f.b")),
            cfg.ln_eps,
        )
    }

    pub fn encoder_states(&self, tokens: &[usize]) -> Mat {
        self.stack("enc", self.model.config.enc_layers, tokens, false, &[])
    }

    /// `(μ, log σ)` from encoder states, log σ clamped to [−8, 8].
    pub fn posterior(&self, tokens: &[usize]) -> (Vec<f64>, Vec<f64>) {
        let cfg = &self.model.config;
        let h = self.encoder_states(tokens);
        let d = cfg.d_model;
        let valid: Vec<bool> = tokens.iter().map(|&t| t != PAD).collect();
        let vz: Vec<f64> = match cfg.latent {
            LatentConstruction::Attention => {
                let k = scale(&self.lin(&h, "latent.key"), 1.0 / (d as f64).sqrt());
                (0..d)
                    .map(|i| {
                        let col: Vec<f64> = k.iter().map(|r| r[i]).collect();
                        let w = softmax_visible(&col, &valid);
                        w.iter().zip(&h).map(|(wl, hr)| wl * hr[i]).sum()
                    })
                    .collect()
            }
            LatentConstruction::Pooled => {
                let n = valid.iter().filter(|v| **v).count() as f64;
                (0..d)
                    .map(|i| h.iter().zip(&valid).filter(|(_, v)| **v).map(|(r, _)| r[i] / n).sum())
                    .collect()
            }
        };
        let vz = vec![vz];
        let mu = self.lin(&vz, "latent.mu").remove(0);
        let ls = self
            .lin(&vz, "latent.logsigma")
            .remove(0)
            .into_iter()
            .map(|v| v.clamp(-8.0, 8.0))
            .collect();
        (mu, ls)
    }

    pub fn decoder_logits(&self, tokens: &[usize], z: Option<&[f64]>) -> Mat {
        let cfg = &self.model.config;
        let extra: Vec<Vec<(Mat, Mat)>> = match z {
            None => Vec::new(),
            Some(z) => {
                let z = vec![z.to_vec()];
                (0..cfg.dec_layers)
                    .map(|l| {
                        let mut e = Vec::new();
                        if matches!(cfg.infusion, InfusionMode::Atm | InfusionMode::AtmPsa) {
                            let kv = self.lin(&z, &format!("dec.h{l}.atm"));
                            e.push((kv.clone(), kv));
                        }
                        if matches!(cfg.infusion, InfusionMode::Psa | InfusionMode::AtmPsa) {
                            e.push((
                                self.lin(&z, &format!("dec.h{l}.psa.k")),
                                self.lin(&z, &format!("dec.h{l}.psa.v")),
                            ));
                        }
                        e
                    })
                    .collect()
            }
        };
        let h = self.stack("dec", cfg.dec_layers, tokens, true, &extra);
        let wte = self.mat("wte");
        h.iter()
            .map(|r| wte.iter().map(|e| r.iter().zip(e).map(|(a, b)| a * b).sum()).collect())
            .collect()
    }

    /// Summed NLL of `tokens[1..]` and the per-dimension KL.
    pub fn sentence_terms(&self, tokens: &[usize], eps: &[f64]) -> (f64, Vec<f64>, usize) {
        let end = tokens.iter().rposition(|&t| t != PAD).map_or(0, |p| p + 1);
        let tokens = &tokens[..end];
        let (mu, ls) = self.posterior(tokens);
        let z: Vec<f64> = mu.iter().zip(&ls).zip(eps).map(|((m, l), e)| m + l.exp() * e).collect();
        let zr = (self.model.config.infusion != InfusionMode::None).then_some(z.as_slice());
        let logits = self.decoder_logits(&tokens[..tokens.len() - 1], zr);
        let (mut nll, mut n) = (0.0, 0);
        for (row, &t) in logits.iter().zip(&tokens[1..]) {
            if t == PAD {
                continue;
            }
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = m + row.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
            nll += lse - row[t];
            n += 1;
        }
        let kl = mu
            .iter()
            .zip(&ls)
            .map(|(m, l)| 0.5 * (m * m + (2.0 * l).exp() - 2.0 * l - 1.0))
            .collect();
        (nll, kl, n)
    }

    /// `mean(rec) + β·max(λ, mean(Σ KL))`.
    pub fn batch_loss(&self, batch: &[Vec<usize>], beta: f64, lambda: f64, eps: &[f64]) -> f64 {
        let k = self.model.config.latent_dim;
        let n = batch.len() as f64;
        let (mut rec, mut kl) = (0.0, 0.0);
        for (i, s) in batch.iter().enumerate() {
            let (r, kv, _) = self.sentence_terms(s, &eps[i * k..(i + 1) * k]);
            rec += r / n;
            kl += kv.iter().sum::<f64>() / n;
        }
        rec + beta * kl.max(lambda)
    }
}

/// Tiny configs cycling through every PE kind, infusion mode and latent
/// construction.
pub fn variant(i: usize, vocab: usize) -> adavae::ModelConfig {
    use adavae::{AdapterSpec, ModelConfig};
    let mut c = ModelConfig::tiny(vocab);
    c.pe = Some(match i % 4 {
        0 => AdapterSpec::adapter(AdapterKind::FfnParallel, 4),
        1 => AdapterSpec::adapter(AdapterKind::AttnParallel, 4),
        2 => AdapterSpec::adapter(AdapterKind::AttnSequential, 4),
        _ => AdapterSpec::prefix(3, 0.3),
    });
    c.infusion = [InfusionMode::Psa, InfusionMode::Atm, InfusionMode::AtmPsa][i % 3];
    if i % 5 == 4 {
        c.latent = LatentConstruction::Pooled;
    }
    c
}

#[derive(Clone, Copy, Debug, Default)]
pub struct GradCheck {
    pub max_rel: f64,
    pub max_abs: f64,
    pub coords: usize,
    pub params: usize,
}

/// Relative error with a denominator floor, so coordinates whose true
/// gradient is ~0 are judged by absolute error at the level of
/// finite-difference round-off.
pub const GRAD_REL_FLOOR: f64 = 1e-5;

/// Compares tape gradients of the batch objective against central
/// differences of the reference loss at `coords` random coordinates of
/// every parameter tensor, for tiny variant `seed`.
pub fn gradient_check(seed: u64, coords: usize, h: f64) -> GradCheck {
    use adavae::params::Session;
    use adavae::vae::normal_noise;
    use rand::Rng;

    let vocab = 12;
    let mut m = AdaVae::new(variant(seed as usize, vocab), seed).unwrap();
    perturb(&mut m, 0.15, 1000 + seed);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let batch: Vec<Vec<usize>> = (0..3)
        .map(|i| {
            let mut t = vec![1];
            t.extend(random_tokens(&mut rng, 3 + i, vocab));
            t.push(2);
            t.extend(std::iter::repeat(PAD).take(2 - i));
            t
        })
        .collect();
    let (beta, lambda) = (0.8, 0.0);
    let noise = (seed, 17);
    let eps = normal_noise(noise.0, noise.1, m.config.latent_dim * batch.len());

    let flags = vec![true; m.store.len()];
    let grads = {
        let mut s = Session::new(&m.store, Some(&flags));
        let loss = m.batch_loss(&mut s, &batch, beta, lambda, Some(noise)).unwrap();
        s.backward(loss.total).unwrap()
    };
    let f = |mm: &AdaVae| Reference::new(mm).batch_loss(&batch, beta, lambda, &eps);

    let mut out = GradCheck::default();
    let entries: Vec<(String, usize, adavae::ParamId)> = m
        .store
        .iter()
        .map(|(id, p)| (p.name.clone(), p.value().len(), id))
        .collect();
    for (name, len, id) in entries {
        out.params += 1;
        let g = grads.get(id).map(<[f64]>::to_vec).unwrap_or_else(|| vec![0.0; len]);
        for _ in 0..coords.min(len) {
            let k = rng.gen_range(0..len);
            let num = central_difference(&m, &name, k, h, f);
            let abs = (g[k] - num).abs();
            let rel = abs / g[k].abs().max(num.abs()).max(GRAD_REL_FLOOR);
            out.max_abs = out.max_abs.max(abs);
            out.max_rel = out.max_rel.max(rel);
            out.coords += 1;
        }
    }
    out
}
