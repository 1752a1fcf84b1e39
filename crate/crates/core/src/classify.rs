//! Linear classification heads over the posterior mean μ(x).

use std::collections::BTreeSet;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autograd::Var;
use crate::config::ParamGroup;
use crate::corpus::epoch_order;
use crate::error::{Error, Result};
use crate::optim::{Adam, AdamConfig};
use crate::params::{ParamId, ParamStore, Session};
use crate::pe::{apply_freeze, TrainMode};
use crate::tensor::Tensor;
use crate::vae::{argmax, trim_pad, AdaVae};

pub const HEAD_W: &str = "head.w";
pub const HEAD_B: &str = "head.b";

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ClassifierConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub seed: u64,
}

impl Default for ClassifierConfig {
    fn default() -> Self {
        Self {
            steps: 300,
            batch_size: 16,
            lr: 1e-3,
            seed: 0,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Head {
    pub w: ParamId,
    pub b: ParamId,
    pub classes: usize,
}

/// Adds (or re-initializes) a `latent_dim × classes` head in the store.
pub fn attach_head(store: &mut ParamStore, dim: usize, classes: usize, seed: u64) -> Result<Head> {
    let w = Tensor::randn(&[dim, classes], 0.02, &mut ChaCha8Rng::seed_from_u64(seed));
    let b = Tensor::zeros(&[classes]);
    let (w, b) = match (store.id(HEAD_W), store.id(HEAD_B)) {
        (Ok(wi), Ok(bi)) => {
            store
                .set(wi, w)
                .map_err(|_| Error::contract("existing head has a different shape"))?;
            store
                .set(bi, b)
                .map_err(|_| Error::contract("existing head has a different shape"))?;
            (wi, bi)
        }
        _ => (
            store.add(HEAD_W, ParamGroup::Head, w),
            store.add(HEAD_B, ParamGroup::Head, b),
        ),
    };
    Ok(Head { w, b, classes })
}

/// The head already stored under the standard names.
pub fn find_head(store: &ParamStore) -> Result<Head> {
    let w = store.id(HEAD_W)?;
    Ok(Head {
        w,
        b: store.id(HEAD_B)?,
        classes: store.get(w).cols(),
    })
}

fn head_logits(s: &mut Session, head: &Head, feature: Var) -> Result<Var> {
    let (w, b) = (s.param(head.w), s.param(head.b));
    s.graph.linear(feature, w, b)
}

/// Minimizes mean cross-entropy with Adam. `feature` builds the `1 × dim`
/// input of example `i` on the session's tape.
fn fit<F>(
    store: &mut ParamStore,
    flags: &[bool],
    head: &Head,
    labels: &[usize],
    cfg: &ClassifierConfig,
    mut feature: F,
) -> Result<()>
where
    F: FnMut(&mut Session, usize) -> Result<Var>,
{
    if labels.is_empty() {
        return Err(Error::contract("classifier needs training examples"));
    }
    let mut opt = Adam::new(AdamConfig::default(), store);
    let bs = cfg.batch_size.max(1);
    let per_epoch = labels.len().div_ceil(bs);
    for step in 0..cfg.steps {
        let order = epoch_order(labels.len(), cfg.seed, (step / per_epoch) as u64);
        let k = step % per_epoch;
        let idx = &order[k * bs..((k + 1) * bs).min(order.len())];
        let grads = {
            let mut s = Session::new(store, Some(flags));
            let mut total: Option<Var> = None;
            for &i in idx {
                let f = feature(&mut s, i)?;
                let logits = head_logits(&mut s, head, f)?;
                let (ce, _) = s.graph.cross_entropy(logits, &[labels[i]], usize::MAX)?;
                total = Some(match total {
                    Some(t) => s.graph.add(t, ce)?,
                    None => ce,
                });
            }
            let loss = s.graph.scale(total.unwrap(), 1.0 / idx.len() as f64)?;
            s.backward(loss)?
        };
        opt.step(store, &grads, cfg.lr);
    }
    Ok(())
}

fn check_labels(train: &[usize], test: &[usize]) -> Result<usize> {
    let seen: BTreeSet<usize> = train.iter().copied().collect();
    if let Some(l) = test.iter().find(|l| !seen.contains(l)) {
        return Err(Error::contract(format!(
            "test label {l} never appears in training data"
        )));
    }
    Ok(seen.last().map_or(0, |m| m + 1))
}

/// Head trained on fixed feature vectors (feature-based tuning).
pub fn fit_linear(features: &[Vec<f64>], labels: &[usize], cfg: &ClassifierConfig) -> Result<(ParamStore, Head)> {
    if features.len() != labels.len() || features.is_empty() {
        return Err(Error::contract("features and labels must be nonempty and aligned"));
    }
    let classes = check_labels(labels, &[])?;
    let mut store = ParamStore::new();
    let head = attach_head(&mut store, features[0].len(), classes, cfg.seed)?;
    let flags = vec![true; store.len()];
    fit(&mut store, &flags, &head, labels, cfg, |s, i| {
        Ok(s.graph.constant(Tensor::row(features[i].clone())))
    })?;
    Ok((store, head))
}

/// Predicted class for a feature vector.
pub fn predict_features(store: &ParamStore, head: &Head, z: &[f64]) -> Result<usize> {
    let mut s = Session::new(store, None);
    let f = s.graph.constant(Tensor::row(z.to_vec()));
    let l = head_logits(&mut s, head, f)?;
    Ok(argmax(s.value(l).data()))
}

/// μ(x) as a tape node, so PE/FT modes can train through the encoder.
fn mu_var(model: &AdaVae, s: &mut Session, tokens: &[usize]) -> Result<Var> {
    let tokens = trim_pad(tokens);
    let h = model.encoder_forward(s, tokens)?;
    Ok(model.posterior(s, h, tokens, None)?.mu)
}

/// Trains a head over μ(x) in `mode`, updating the model in place.
pub fn train_latent_classifier(
    model: &mut AdaVae,
    train: &[(Vec<usize>, usize)],
    mode: TrainMode,
    cfg: &ClassifierConfig,
) -> Result<Head> {
    let labels: Vec<usize> = train.iter().map(|(_, l)| *l).collect();
    let classes = check_labels(&labels, &[])?;
    let head = attach_head(&mut model.store, model.config.latent_dim, classes, cfg.seed)?;
    if mode == TrainMode::Fb {
        let feats: Vec<Vec<f64>> = train
            .iter()
            .map(|(t, _)| Ok(model.encode(t)?.0))
            .collect::<Result<_>>()?;
        let (fitted, h) = fit_linear(&feats, &labels, cfg)?;
        model.store.set(head.w, fitted.get(h.w).clone())?;
        model.store.set(head.b, fitted.get(h.b).clone())?;
        return Ok(head);
    }
    let mask = apply_freeze(&model.store, mode);
    let mut store = std::mem::take(&mut model.store);
    let view = model.clone();
    let result = fit(&mut store, mask.flags(), &head, &labels, cfg, |s, i| {
        mu_var(&view, s, &train[i].0)
    });
    model.store = store;
    result?;
    Ok(head)
}

pub fn predict(model: &AdaVae, head: &Head, tokens: &[usize]) -> Result<usize> {
    predict_features(&model.store, head, &model.encode(tokens)?.0)
}

pub fn accuracy(model: &AdaVae, head: &Head, data: &[(Vec<usize>, usize)]) -> Result<f64> {
    if data.is_empty() {
        return Err(Error::contract("accuracy of an empty set"));
    }
    let mut hit = 0;
    for (t, l) in data {
        if predict(model, head, t)? == *l {
            hit += 1;
        }
    }
    Ok(hit as f64 / data.len() as f64)
}

/// Trains on `train` in `mode` and returns test accuracy plus the tuned model.
pub fn latent_classify(
    model: &AdaVae,
    train: &[(Vec<usize>, usize)],
    test: &[(Vec<usize>, usize)],
    mode: TrainMode,
    cfg: &ClassifierConfig,
) -> Result<(f64, AdaVae, Head)> {
    let tl: Vec<usize> = train.iter().map(|(_, l)| *l).collect();
    let el: Vec<usize> = test.iter().map(|(_, l)| *l).collect();
    check_labels(&tl, &el)?;
    let mut tuned = model.clone();
    let head = train_latent_classifier(&mut tuned, train, mode, cfg)?;
    Ok((accuracy(&tuned, &head, test)?, tuned, head))
}
