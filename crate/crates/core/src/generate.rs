//! Autoregressive decoding and latent-space manipulation.

use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::config::InfusionMode;
use crate::corpus::{BOS, EOS};
use crate::error::{Error, Result};
use crate::vae::{argmax, AdaVae};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Strategy {
    Greedy,
    /// Sample among the `k` most likely tokens; reproducible from `seed`.
    TopK {
        k: usize,
        seed: u64,
    },
}

impl fmt::Display for Strategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Strategy::Greedy => f.write_str("greedy"),
            Strategy::TopK { k, .. } => write!(f, "top{k}"),
        }
    }
}

impl FromStr for Strategy {
    type Err = Error;
    /// `greedy` or `topK` (seed 0; override the field afterwards).
    fn from_str(s: &str) -> Result<Self> {
        if s == "greedy" {
            return Ok(Strategy::Greedy);
        }
        s.strip_prefix("top")
            .and_then(|k| k.parse().ok())
            .filter(|&k| k > 0)
            .map(|k| Strategy::TopK { k, seed: 0 })
            .ok_or_else(|| Error::Config(format!("unknown decoding strategy `{s}`")))
    }
}

/// Decodes from BOS until EOS or `max_len` generated tokens. The returned
/// sequence excludes BOS and EOS. Every step recomputes the full prefix.
pub fn decode_sample(model: &AdaVae, z: Option<&[f64]>, max_len: usize, strategy: Strategy) -> Result<Vec<usize>> {
    let z = match model.config.infusion {
        InfusionMode::None => None,
        _ => Some(z.ok_or_else(|| Error::contract("decoding this model requires a latent"))?),
    };
    let limit = max_len.min(model.config.max_seq_len.saturating_sub(1));
    let mut rng = match strategy {
        Strategy::TopK { seed, .. } => Some(ChaCha8Rng::seed_from_u64(seed)),
        Strategy::Greedy => None,
    };
    let mut seq = vec![BOS];
    for _ in 0..limit {
        let logits = model.logits_given(&seq, z)?;
        let last = logits.row_slice(seq.len() - 1);
        let next = match (strategy, rng.as_mut()) {
            (Strategy::TopK { k, .. }, Some(rng)) if k > 1 => top_k_sample(last, k, rng),
            _ => argmax(last),
        };
        if next == EOS {
            break;
        }
        seq.push(next);
    }
    Ok(seq.split_off(1))
}

fn top_k_sample<R: Rng>(logits: &[f64], k: usize, rng: &mut R) -> usize {
    let mut idx: Vec<usize> = (0..logits.len()).collect();
    idx.sort_by(|&a, &b| logits[b].total_cmp(&logits[a]).then(a.cmp(&b)));
    idx.truncate(k.min(logits.len()));
    let max = logits[idx[0]];
    let w: Vec<f64> = idx.iter().map(|&i| (logits[i] - max).exp()).collect();
    let mut u = rng.gen::<f64>() * w.iter().sum::<f64>();
    for (i, wi) in idx.iter().zip(&w) {
        if u < *wi {
            return *i;
        }
        u -= wi;
    }
    *idx.last().unwrap()
}

/// `z₁·(1 − τ) + z₂·τ`.
pub fn lerp(z1: &[f64], z2: &[f64], tau: f64) -> Vec<f64> {
    z1.iter().zip(z2).map(|(a, b)| a * (1.0 - tau) + b * tau).collect()
}

/// `z_B + (z_C − z_A)`. Grouping the difference first makes `a = c`
/// return `z_B` exactly.
pub fn analogy_vector(za: &[f64], zb: &[f64], zc: &[f64]) -> Vec<f64> {
    zb.iter()
        .zip(za.iter().zip(zc))
        .map(|(b, (a, c))| b + (c - a))
        .collect()
}

#[derive(Clone, Debug, PartialEq)]
pub struct Interpolation {
    pub tau: f64,
    pub z: Vec<f64>,
    pub tokens: Vec<usize>,
}

/// Greedy decodes along the segment from `μ(a)` to `μ(b)` at
/// `τ ∈ {0, 1/steps, …, 1}`.
pub fn interpolate(
    model: &AdaVae,
    a: &[usize],
    b: &[usize],
    steps: usize,
    max_len: usize,
) -> Result<Vec<Interpolation>> {
    if steps == 0 {
        return Err(Error::contract("interpolation needs steps >= 1"));
    }
    let (za, zb) = (model.encode(a)?.0, model.encode(b)?.0);
    (0..=steps)
        .map(|i| {
            let tau = i as f64 / steps as f64;
            let z = lerp(&za, &zb, tau);
            let tokens = decode_sample(model, Some(&z), max_len, Strategy::Greedy)?;
            Ok(Interpolation { tau, z, tokens })
        })
        .collect()
}

/// Greedy decode of `μ(b) − μ(a) + μ(c)`.
pub fn analogy(
    model: &AdaVae,
    a: &[usize],
    b: &[usize],
    c: &[usize],
    max_len: usize,
) -> Result<(Vec<f64>, Vec<usize>)> {
    let za = model.encode(a)?.0;
    let zb = model.encode(b)?.0;
    let zc = model.encode(c)?.0;
    let z = analogy_vector(&za, &zb, &zc);
    let tokens = decode_sample(model, Some(&z), max_len, Strategy::Greedy)?;
    Ok((z, tokens))
}
