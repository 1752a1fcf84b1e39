//! Evaluation quantities: −ELBO/PPL, MI, active units, BLEU family.

use std::collections::HashMap;
use std::f64::consts::PI;
use std::fmt;
use std::hash::Hash;

use crate::error::{Error, Result};
use crate::objective::neg_elbo;
use crate::params::Session;
use crate::vae::{normal_noise, trim_pad, AdaVae};

/// Default active-unit variance threshold.
pub const AU_THRESHOLD: f64 = 0.01;
/// Additive smoothing for zero n-gram matches.
pub const BLEU_EPS: f64 = 1e-9;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct NegElbo {
    pub total_nats: f64,
    pub per_token_nats: f64,
    pub per_sentence_nats: f64,
    pub rec_nats: f64,
    pub kl_nats: f64,
    pub token_count: usize,
    pub sentences: usize,
}

/// How the posterior is sampled when evaluating the bound.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ElboSampling {
    /// `z = μ`, one pass (deterministic).
    Mean,
    /// Average over `samples` seeded draws per sentence.
    Samples { samples: usize, seed: u64 },
}

/// Corpus −ELBO: per sentence, reconstruction plus unhinged KL at β = 1.
pub fn neg_elbo_eval(model: &AdaVae, sentences: &[Vec<usize>], sampling: ElboSampling) -> Result<NegElbo> {
    if sentences.is_empty() {
        return Err(Error::contract("−ELBO of an empty corpus"));
    }
    let k = model.config.latent_dim;
    let (mut total, mut rec_total, mut kl_total, mut tokens) = (0.0, 0.0, 0.0, 0);
    for (i, sent) in sentences.iter().enumerate() {
        let draws: Vec<Option<Vec<f64>>> = match sampling {
            ElboSampling::Mean => vec![None],
            ElboSampling::Samples { samples, seed } => (0..samples.max(1))
                .map(|j| Some(normal_noise(seed, (i * samples.max(1) + j) as u64, k)))
                .collect(),
        };
        let s_count = draws.len() as f64;
        for (j, eps) in draws.iter().enumerate() {
            let mut s = Session::new(&model.store, None);
            let (rec, kl, n, _) = model.sentence_terms(&mut s, sent, eps.as_deref())?;
            let rec = s.value(rec).item();
            let kl = s.value(kl).data().to_vec();
            total += neg_elbo(rec, &kl) / s_count;
            rec_total += rec / s_count;
            kl_total += kl.iter().sum::<f64>() / s_count;
            if j == 0 {
                tokens += n;
            }
        }
    }
    Ok(NegElbo {
        total_nats: total,
        per_token_nats: total / tokens.max(1) as f64,
        per_sentence_nats: total / sentences.len() as f64,
        rec_nats: rec_total,
        kl_nats: kl_total,
        token_count: tokens,
        sentences: sentences.len(),
    })
}

/// `exp(total / tokens)`, an upper bound on perplexity via the ELBO.
pub fn ppl_from_elbo(total_nats: f64, token_count: usize) -> f64 {
    (total_nats / token_count.max(1) as f64).exp()
}

/// `log N(z; μ, diag(exp(2·log σ)))`.
pub fn log_normal_diag(z: &[f64], mu: &[f64], log_sigma: &[f64]) -> f64 {
    z.iter()
        .zip(mu)
        .zip(log_sigma)
        .map(|((z, m), ls)| {
            let u = (z - m) / ls.exp();
            -0.5 * (2.0 * PI).ln() - ls - 0.5 * u * u
        })
        .sum()
}

pub fn log_sum_exp(xs: &[f64]) -> f64 {
    let max = xs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if !max.is_finite() {
        return max;
    }
    max + xs.iter().map(|x| (x - max).exp()).sum::<f64>().ln()
}

/// Aggregate-posterior MI estimate from per-sentence `(μ, log σ)`:
/// `E[log q(z|x)] − E[log q(z)]` with `q(z) = (1/N) Σₘ q(z|xₘ)` and
/// `samples` seeded draws per sentence.
pub fn mi_from_posteriors(posteriors: &[(Vec<f64>, Vec<f64>)], samples: usize, seed: u64) -> Result<f64> {
    let n = posteriors.len();
    if n < 2 {
        return Err(Error::contract("MI needs at least two sentences"));
    }
    let k = posteriors[0].0.len();
    let log_n = (n as f64).ln();
    let (mut cond, mut marg) = (0.0, 0.0);
    let mut lq = vec![0.0; n];
    for (i, (mu, ls)) in posteriors.iter().enumerate() {
        for j in 0..samples.max(1) {
            let eps = normal_noise(seed, (i * samples.max(1) + j) as u64, k);
            let z: Vec<f64> = mu.iter().zip(ls).zip(&eps).map(|((m, l), e)| m + l.exp() * e).collect();
            cond += log_normal_diag(&z, mu, ls);
            for (q, (m2, l2)) in lq.iter_mut().zip(posteriors) {
                *q = log_normal_diag(&z, m2, l2);
            }
            marg += log_sum_exp(&lq) - log_n;
        }
    }
    let total = (n * samples.max(1)) as f64;
    Ok(cond / total - marg / total)
}

/// MI of the model's posterior over a corpus.
pub fn mi_estimate(model: &AdaVae, sentences: &[Vec<usize>], samples: usize, seed: u64) -> Result<f64> {
    let post: Vec<_> = sentences.iter().map(|s| model.encode(s)).collect::<Result<_>>()?;
    mi_from_posteriors(&post, samples, seed)
}

/// Number of dimensions whose μ has population variance above `threshold`.
pub fn active_units_from_means(mus: &[Vec<f64>], threshold: f64) -> Result<usize> {
    if mus.len() < 2 {
        return Err(Error::contract("active units need at least two sentences"));
    }
    let n = mus.len() as f64;
    let k = mus[0].len();
    Ok((0..k)
        .filter(|&d| {
            let mean = mus.iter().map(|m| m[d]).sum::<f64>() / n;
            let var = mus.iter().map(|m| (m[d] - mean).powi(2)).sum::<f64>() / n;
            var > threshold
        })
        .count())
}

pub fn active_units(model: &AdaVae, sentences: &[Vec<usize>], threshold: f64) -> Result<usize> {
    let mus: Vec<_> = sentences
        .iter()
        .map(|s| Ok(model.encode(s)?.0))
        .collect::<Result<_>>()?;
    active_units_from_means(&mus, threshold)
}

fn ngram_counts<T: Eq + Hash + Clone>(s: &[T], n: usize) -> HashMap<&[T], usize> {
    let mut m = HashMap::new();
    if s.len() >= n {
        for w in s.windows(n) {
            *m.entry(w).or_insert(0) += 1;
        }
    }
    m
}

/// Corpus BLEU with clipped n-gram precision, brevity penalty and uniform
/// weights over `1..=max_n`. Zero matches are smoothed to [`BLEU_EPS`];
/// orders with no hypothesis n-grams at all are left out and the weights
/// renormalized.
pub fn bleu<T: Eq + Hash + Clone>(hypotheses: &[Vec<T>], references: &[Vec<Vec<T>>], max_n: usize) -> Result<f64> {
    if hypotheses.is_empty() || hypotheses.len() != references.len() || references.iter().any(Vec::is_empty) {
        return Err(Error::contract("BLEU needs one nonempty reference set per hypothesis"));
    }
    let mut matched = vec![0usize; max_n];
    let mut possible = vec![0usize; max_n];
    let (mut hyp_len, mut ref_len) = (0usize, 0usize);
    for (h, refs) in hypotheses.iter().zip(references) {
        hyp_len += h.len();
        let closest = refs
            .iter()
            .map(Vec::len)
            .min_by_key(|&r| ((r as i64 - h.len() as i64).abs(), r))
            .unwrap();
        ref_len += closest;
        for n in 1..=max_n {
            let hc = ngram_counts(h, n);
            let mut best: HashMap<&[T], usize> = HashMap::new();
            for r in refs {
                for (g, c) in ngram_counts(r, n) {
                    let e = best.entry(g).or_insert(0);
                    *e = (*e).max(c);
                }
            }
            for (g, c) in &hc {
                matched[n - 1] += (*c).min(best.get(g).copied().unwrap_or(0));
                possible[n - 1] += c;
            }
        }
    }
    if hyp_len == 0 {
        return Ok(0.0);
    }
    let orders: Vec<usize> = (0..max_n).filter(|&i| possible[i] > 0).collect();
    let log_p: f64 = orders
        .iter()
        .map(|&i| {
            let m = if matched[i] == 0 { BLEU_EPS } else { matched[i] as f64 };
            (m / possible[i] as f64).ln()
        })
        .sum::<f64>()
        / orders.len() as f64;
    let bp = if hyp_len > ref_len {
        1.0
    } else {
        (1.0 - ref_len as f64 / hyp_len as f64).exp()
    };
    Ok(bp * log_p.exp())
}

/// Mean over hypotheses of BLEU against all the others as references.
pub fn self_bleu<T: Eq + Hash + Clone>(hypotheses: &[Vec<T>], max_n: usize) -> Result<f64> {
    if hypotheses.len() < 2 {
        return Err(Error::contract("self-BLEU needs at least two hypotheses"));
    }
    let mut total = 0.0;
    for (i, h) in hypotheses.iter().enumerate() {
        let others: Vec<Vec<T>> = hypotheses
            .iter()
            .enumerate()
            .filter(|(j, _)| *j != i)
            .map(|(_, o)| o.clone())
            .collect();
        total += bleu(std::slice::from_ref(h), &[others], max_n)?;
    }
    Ok(total / hypotheses.len() as f64)
}

/// Geometric mean of accuracy and BLEU.
pub fn g_score(acc: f64, bleu: f64) -> f64 {
    (acc * bleu).max(0.0).sqrt()
}

/// Harmonic mean of BLEU and `1 − self_bleu`; 0 when both vanish.
pub fn bleu_f1(bleu: f64, self_bleu: f64) -> f64 {
    let div = 1.0 - self_bleu;
    let den = bleu + div;
    if den <= 0.0 {
        0.0
    } else {
        2.0 * bleu * div / den
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalReport {
    pub neg_elbo: f64,
    pub neg_elbo_per_sentence: f64,
    pub ppl: f64,
    pub mi: f64,
    pub au: usize,
    pub accuracy: Option<f64>,
    pub bleu: Option<f64>,
    pub self_bleu: Option<f64>,
    pub g_score: Option<f64>,
    pub bleu_f1: Option<f64>,
}

impl EvalReport {
    /// Stable-order `key=value` pairs; absent optional values are omitted.
    pub fn pairs(&self) -> Vec<(&'static str, String)> {
        let mut out = vec![
            ("neg_elbo", self.neg_elbo.to_string()),
            ("neg_elbo_per_sentence", self.neg_elbo_per_sentence.to_string()),
            ("ppl", self.ppl.to_string()),
            ("mi", self.mi.to_string()),
            ("au", self.au.to_string()),
        ];
        for (k, v) in [
            ("accuracy", self.accuracy),
            ("bleu", self.bleu),
            ("self_bleu", self.self_bleu),
            ("g_score", self.g_score),
            ("bleu_f1", self.bleu_f1),
        ] {
            if let Some(v) = v {
                out.push((k, v.to_string()));
            }
        }
        out
    }
}

impl fmt::Display for EvalReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for (k, v) in self.pairs() {
            writeln!(f, "{k}={v}")?;
        }
        Ok(())
    }
}

/// Sentence tokens without BOS/EOS/PAD, for BLEU over model vocabularies.
pub fn content_tokens(ids: &[usize]) -> Vec<usize> {
    trim_pad(ids)
        .iter()
        .copied()
        .skip_while(|&t| t == crate::corpus::BOS)
        .take_while(|&t| t != crate::corpus::EOS)
        .collect()
}
