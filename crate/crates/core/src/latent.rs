//! Posterior construction, reparameterization, KL, and latent infusion.

use std::collections::BTreeMap;
use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::autograd::Var;
use crate::config::{LatentConstruction, ModelConfig};
use crate::error::{Error, Result};
use crate::params::{ParamId, ParamStore, Session};
use crate::tensor::Tensor;
use crate::transformer::ExtraKv;

/// Bounds applied to the predicted log σ.
pub const LOG_SIGMA_MIN: f64 = -8.0;
pub const LOG_SIGMA_MAX: f64 = 8.0;

#[derive(Clone, Debug)]
pub struct LatentParams {
    pub construction: LatentConstruction,
    /// Key map of the identity-query attention (absent for pooled).
    pub key: Option<(ParamId, ParamId)>,
    pub mu: (ParamId, ParamId),
    pub log_sigma: (ParamId, ParamId),
}

impl LatentParams {
    pub fn lookup(store: &ParamStore, cfg: &ModelConfig) -> Result<Self> {
        let pair = |n: &str| -> Result<(ParamId, ParamId)> {
            Ok((store.id(&format!("latent.{n}.w"))?, store.id(&format!("latent.{n}.b"))?))
        };
        Ok(Self {
            construction: cfg.latent,
            key: match cfg.latent {
                LatentConstruction::Attention => Some(pair("key")?),
                LatentConstruction::Pooled => None,
            },
            mu: pair("mu")?,
            log_sigma: pair("logsigma")?,
        })
    }
}

/// Everything computed between the encoder output and the decoder input.
#[derive(Clone, Copy, Debug)]
pub struct LatentState {
    /// Encoder final states `L × d`.
    pub h: Var,
    /// Summary vector `1 × d`.
    pub v_z: Var,
    pub mu: Var,
    pub log_sigma: Var,
    pub z: Var,
    pub kl_per_dim: Var,
}

/// Identity-query attention pooling.
///
/// With keys `K = f(H)` and the identity as query, the score for feature
/// `i` at position `l` is `K[l][i]/√d`. Scores are normalized over positions
/// per feature and `v_z[i] = Σ_l w[l][i]·H[l][i]`. Rows where `valid` is
/// false (padding) get zero weight.
pub fn latent_attention(s: &mut Session, h: Var, key: (ParamId, ParamId), valid: &[bool]) -> Result<Var> {
    let hv = s.value(h);
    let (l, d) = (hv.rows(), hv.cols());
    if valid.len() != l || l == 0 {
        return Err(Error::dim("latent_attention", hv.shape(), &[valid.len()]));
    }
    let (w, b) = (s.param(key.0), s.param(key.1));
    let k = s.graph.linear(h, w, b)?;
    let scores = s.graph.scale(k, 1.0 / (d as f64).sqrt())?;
    let vis: Arc<[bool]> = valid.iter().flat_map(|&v| std::iter::repeat_n(v, d)).collect();
    let weights = s.graph.masked_softmax(scores, 0, vis)?;
    let weighted = s.graph.mul(weights, h)?;
    s.graph.sum_rows(weighted)
}

/// Mean of the valid rows of `h` (the "LG" ablation's pooled feature).
pub fn pooled_summary(s: &mut Session, h: Var, valid: &[bool]) -> Result<Var> {
    let hv = s.value(h);
    let (l, d) = (hv.rows(), hv.cols());
    let n = valid.iter().filter(|v| **v).count();
    if valid.len() != l || n == 0 {
        return Err(Error::contract("pooled summary needs at least one valid position"));
    }
    let w: Vec<f64> = valid
        .iter()
        .flat_map(|&v| std::iter::repeat_n(if v { 1.0 / n as f64 } else { 0.0 }, d))
        .collect();
    let w = s.graph.constant(Tensor::new(vec![l, d], w)?);
    let weighted = s.graph.mul(w, h)?;
    s.graph.sum_rows(weighted)
}

/// `μ = f_μ(v_z)`, `log σ = clamp(f_σ(v_z))`, `z = μ + exp(log σ) ⊙ ε`.
pub fn reparameterize(s: &mut Session, v_z: Var, p: &LatentParams, eps: &[f64]) -> Result<(Var, Var, Var)> {
    let (mw, mb) = (s.param(p.mu.0), s.param(p.mu.1));
    let (sw, sb) = (s.param(p.log_sigma.0), s.param(p.log_sigma.1));
    let mu = s.graph.linear(v_z, mw, mb)?;
    let raw = s.graph.linear(v_z, sw, sb)?;
    let log_sigma = s.graph.clamp(raw, LOG_SIGMA_MIN, LOG_SIGMA_MAX)?;
    if eps.len() != s.value(mu).len() {
        return Err(Error::dim("reparameterize eps", s.value(mu).shape(), &[eps.len()]));
    }
    let z = reparameterize_with(s, mu, log_sigma, eps)?;
    Ok((mu, log_sigma, z))
}

/// `z = μ + exp(log σ) ⊙ ε` on existing tape values.
pub fn reparameterize_with(s: &mut Session, mu: Var, log_sigma: Var, eps: &[f64]) -> Result<Var> {
    if eps.iter().all(|e| *e == 0.0) {
        return Ok(mu);
    }
    let sigma = s.graph.exp(log_sigma)?;
    let e = s
        .graph
        .constant(Tensor::new(s.value(mu).shape().to_vec(), eps.to_vec())?);
    let noise = s.graph.mul(sigma, e)?;
    s.graph.add(mu, noise)
}

/// Per-dimension `KL(N(μ, σ²) ‖ N(0, 1)) = ½(μ² + σ² − 2·log σ − 1)`.
pub fn kl_to_standard_normal(s: &mut Session, mu: Var, log_sigma: Var) -> Result<Var> {
    let g = &mut s.graph;
    let mu2 = g.mul(mu, mu)?;
    let two_ls = g.scale(log_sigma, 2.0)?;
    let var = g.exp(two_ls)?;
    let a = g.add(mu2, var)?;
    let b = g.sub(a, two_ls)?;
    let shape = g.value(b).shape().to_vec();
    let half = g.scale(b, 0.5)?;
    let minus_half = g.constant(Tensor::filled(&shape, -0.5));
    g.add(half, minus_half)
}

/// Closed-form per-dimension KL on plain values.
pub fn kl_closed_form(mu: &[f64], log_sigma: &[f64]) -> Vec<f64> {
    mu.iter()
        .zip(log_sigma)
        .map(|(m, ls)| 0.5 * (m * m + (2.0 * ls).exp() - 2.0 * ls - 1.0))
        .collect()
}

/// Per-decoder-layer infusion projections.
#[derive(Clone, Debug, Default)]
pub struct InfusionParams {
    pub atm: Option<(ParamId, ParamId)>,
    pub psa_k: Option<(ParamId, ParamId)>,
    pub psa_v: Option<(ParamId, ParamId)>,
}

impl InfusionParams {
    pub fn lookup(store: &ParamStore, cfg: &ModelConfig, layer: usize) -> Result<Self> {
        let pair = |n: &str| -> Result<(ParamId, ParamId)> {
            Ok((
                store.id(&format!("dec.h{layer}.{n}.w"))?,
                store.id(&format!("dec.h{layer}.{n}.b"))?,
            ))
        };
        Ok(Self {
            atm: if cfg.infusion.has_atm() {
                Some(pair("atm")?)
            } else {
                None
            },
            psa_k: if cfg.infusion.has_psa() {
                Some(pair("psa.k")?)
            } else {
                None
            },
            psa_v: if cfg.infusion.has_psa() {
                Some(pair("psa.v")?)
            } else {
                None
            },
        })
    }

    /// Extra memory slots for one layer: AtM first, then PSA.
    pub fn extra_kv(&self, s: &mut Session, z: Var) -> Result<Vec<ExtraKv>> {
        let mut out = Vec::new();
        if let Some(p) = self.atm {
            let (k, v) = atm_project(s, z, p)?;
            out.push(ExtraKv { keys: k, values: v });
        }
        if let (Some(pk), Some(pv)) = (self.psa_k, self.psa_v) {
            let (k, v) = psa_project(s, z, pk, pv)?;
            out.push(ExtraKv { keys: k, values: v });
        }
        Ok(out)
    }
}

/// Add-to-memory: one shared map, so `k_z` and `v_z` are the same node.
pub fn atm_project(s: &mut Session, z: Var, p: (ParamId, ParamId)) -> Result<(Var, Var)> {
    let (w, b) = (s.param(p.0), s.param(p.1));
    let kv = s.graph.linear(z, w, b)?;
    Ok((kv, kv))
}

/// Pseudo self-attention: independent key and value maps.
pub fn psa_project(s: &mut Session, z: Var, pk: (ParamId, ParamId), pv: (ParamId, ParamId)) -> Result<(Var, Var)> {
    let (kw, kb, vw, vb) = (s.param(pk.0), s.param(pk.1), s.param(pv.0), s.param(pv.1));
    let k = s.graph.linear(z, kw, kb)?;
    let v = s.graph.linear(z, vw, vb)?;
    Ok((k, v))
}

/// Smallest per-dimension variance a fitted class Gaussian may have.
pub const VARIANCE_FLOOR: f64 = 1e-6;

/// Per-label diagonal Gaussians fitted to latent codes; stands in for a
/// learned conditional generator when sampling class-conditioned latents.
#[derive(Clone, Debug, PartialEq)]
pub struct ClassConditionalPrior {
    pub classes: BTreeMap<usize, (Vec<f64>, Vec<f64>)>,
}

impl ClassConditionalPrior {
    /// Maximum-likelihood mean and (floored) variance per label.
    pub fn fit(latents: &[(Vec<f64>, usize)]) -> Result<Self> {
        let mut grouped: BTreeMap<usize, Vec<&[f64]>> = BTreeMap::new();
        for (z, label) in latents {
            grouped.entry(*label).or_default().push(z);
        }
        let mut classes = BTreeMap::new();
        for (label, zs) in grouped {
            if zs.len() < 2 {
                return Err(Error::contract(format!("label {label} has fewer than 2 samples")));
            }
            let dim = zs[0].len();
            if zs.iter().any(|z| z.len() != dim) {
                return Err(Error::contract("latent codes of differing dimension"));
            }
            let n = zs.len() as f64;
            let mean: Vec<f64> = (0..dim).map(|i| zs.iter().map(|z| z[i]).sum::<f64>() / n).collect();
            let var: Vec<f64> = (0..dim)
                .map(|i| {
                    let v = zs.iter().map(|z| (z[i] - mean[i]).powi(2)).sum::<f64>() / n;
                    v.max(VARIANCE_FLOOR)
                })
                .collect();
            classes.insert(label, (mean, var));
        }
        Ok(Self { classes })
    }

    pub fn labels(&self) -> impl Iterator<Item = usize> + '_ {
        self.classes.keys().copied()
    }

    /// Deterministic draw for `(label, seed)`.
    pub fn sample(&self, label: usize, seed: u64) -> Result<Vec<f64>> {
        let (mean, var) = self.classes.get(&label).ok_or(Error::UnknownLabel(label))?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Ok(mean
            .iter()
            .zip(var)
            .map(|(m, v)| {
                let e: f64 = StandardNormal.sample(&mut rng);
                m + v.sqrt() * e
            })
            .collect())
    }
}
