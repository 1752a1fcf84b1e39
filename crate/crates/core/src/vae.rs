//! The full encoder → latent → decoder model over one [`ParamStore`].

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::autograd::Var;
use crate::config::{InfusionMode, ModelConfig};
use crate::error::{Error, Result};
use crate::latent::{
    kl_to_standard_normal, latent_attention, pooled_summary, reparameterize, InfusionParams, LatentParams, LatentState,
};
use crate::objective::{free_bit_kl_var, LossBreakdown};
use crate::params::{ParamId, ParamStore, Session};
use crate::tensor::Tensor;
use crate::transformer::{stack_forward, ExtraKv, MaskKind, MaskMode, StackParams, PAD};

/// Parameter handles resolved once from the store.
#[derive(Clone, Debug)]
struct Handles {
    wte: ParamId,
    enc: StackParams,
    dec: StackParams,
    latent: LatentParams,
    infusion: Vec<InfusionParams>,
}

impl Handles {
    fn resolve(store: &ParamStore, cfg: &ModelConfig) -> Result<Self> {
        Ok(Self {
            wte: store.id("wte")?,
            enc: StackParams::lookup(store, cfg, "enc", cfg.enc_layers)?,
            dec: StackParams::lookup(store, cfg, "dec", cfg.dec_layers)?,
            latent: LatentParams::lookup(store, cfg)?,
            infusion: (0..cfg.dec_layers)
                .map(|l| InfusionParams::lookup(store, cfg, l))
                .collect::<Result<_>>()?,
        })
    }
}

#[derive(Clone, Debug)]
pub struct AdaVae {
    pub config: ModelConfig,
    pub store: ParamStore,
    handles: Handles,
}

/// Graph nodes of one batch objective.
#[derive(Clone, Copy, Debug)]
pub struct BatchLoss {
    pub total: Var,
    pub breakdown: LossBreakdown,
}

/// Strips trailing padding. Interior padding is left for the masks.
pub fn trim_pad(tokens: &[usize]) -> &[usize] {
    let end = tokens.iter().rposition(|&t| t != PAD).map_or(0, |i| i + 1);
    &tokens[..end]
}

/// Seeded standard-normal draws; the stream index keeps steps independent.
pub fn normal_noise(seed: u64, stream: u64, n: usize) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    (0..n).map(|_| StandardNormal.sample(&mut rng)).collect()
}

impl AdaVae {
    /// Fresh model with every parameter drawn from `seed`.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let store = ParamStore::from_layout(&config.param_layout(), config.init_std, &mut rng);
        Self::from_store(config, store)
    }

    /// Wraps an existing store (checkpoint or imported weights). Extra
    /// entries such as classifier heads are allowed; missing ones are not.
    pub fn from_store(config: ModelConfig, store: ParamStore) -> Result<Self> {
        config.validate()?;
        for spec in config.param_layout() {
            let id = store.id(&spec.name)?;
            if store.get(id).shape() != spec.shape.as_slice() {
                return Err(Error::CheckpointShape {
                    name: spec.name,
                    found: store.get(id).shape().to_vec(),
                    expected: spec.shape,
                });
            }
        }
        let handles = Handles::resolve(&store, &config)?;
        Ok(Self { config, store, handles })
    }

    pub fn wte(&self) -> ParamId {
        self.handles.wte
    }

    fn check_tokens(&self, tokens: &[usize]) -> Result<()> {
        if let Some(&t) = tokens.iter().find(|&&t| t >= self.config.vocab_size) {
            return Err(Error::Index {
                what: "token id",
                index: t,
                size: self.config.vocab_size,
            });
        }
        Ok(())
    }

    /// Bidirectional encoder states `L × d`.
    pub fn encoder_forward(&self, s: &mut Session, tokens: &[usize]) -> Result<Var> {
        self.check_tokens(tokens)?;
        let mask = MaskMode::from_tokens(MaskKind::Bidirectional, tokens);
        stack_forward(s, self.handles.wte, &self.handles.enc, &self.config, tokens, &mask, &[])
    }

    /// Posterior from encoder states; `eps = None` means `z = μ`.
    pub fn posterior(&self, s: &mut Session, h: Var, tokens: &[usize], eps: Option<&[f64]>) -> Result<LatentState> {
        let valid: Vec<bool> = tokens.iter().map(|&t| t != PAD).collect();
        let lp = &self.handles.latent;
        let v_z = match lp.key {
            Some(key) => latent_attention(s, h, key, &valid)?,
            None => pooled_summary(s, h, &valid)?,
        };
        let zeros = vec![0.0; self.config.latent_dim];
        let (mu, log_sigma, z) = reparameterize(s, v_z, lp, eps.unwrap_or(&zeros))?;
        let kl_per_dim = kl_to_standard_normal(s, mu, log_sigma)?;
        Ok(LatentState {
            h,
            v_z,
            mu,
            log_sigma,
            z,
            kl_per_dim,
        })
    }

    /// Causal decoder logits `L × V`, tied to the shared embedding table.
    pub fn decoder_forward(&self, s: &mut Session, tokens: &[usize], z: Option<Var>) -> Result<Var> {
        self.check_tokens(tokens)?;
        let extra: Vec<Vec<ExtraKv>> = match (self.config.infusion, z) {
            (InfusionMode::None, None) => Vec::new(),
            (InfusionMode::None, Some(_)) => {
                return Err(Error::contract("latent supplied but infusion is none"));
            }
            (_, None) => return Err(Error::contract("infusion requires a latent")),
            (_, Some(z)) => {
                let zv = s.value(z);
                if zv.len() != self.config.latent_dim {
                    return Err(Error::dim(
                        "decoder_forward latent",
                        zv.shape(),
                        &[self.config.latent_dim],
                    ));
                }
                let z = if zv.shape().len() == 2 {
                    z
                } else {
                    s.graph.reshape(z, &[1, self.config.latent_dim])?
                };
                self.handles
                    .infusion
                    .iter()
                    .map(|p| p.extra_kv(s, z))
                    .collect::<Result<_>>()?
            }
        };
        let mask = MaskMode::from_tokens(MaskKind::Causal, tokens);
        let h = stack_forward(
            s,
            self.handles.wte,
            &self.handles.dec,
            &self.config,
            tokens,
            &mask,
            &extra,
        )?;
        let wte = s.param(self.handles.wte);
        s.graph.matmul_t(h, wte)
    }

    /// Teacher-forced reconstruction NLL (nats) of `tokens[1..]` given
    /// `tokens[..L−1]` and an optional latent. Returns the loss and the
    /// number of scored tokens.
    pub fn reconstruction(&self, s: &mut Session, tokens: &[usize], z: Option<Var>) -> Result<(Var, usize)> {
        if tokens.len() < 2 {
            return Err(Error::contract("reconstruction needs at least two tokens"));
        }
        let logits = self.decoder_forward(s, &tokens[..tokens.len() - 1], z)?;
        s.graph.cross_entropy(logits, &tokens[1..], PAD)
    }

    fn latent_for_decoder(&self, st: &LatentState) -> Option<Var> {
        (self.config.infusion != InfusionMode::None).then_some(st.z)
    }

    /// Per-sentence pieces: reconstruction, KL vector and token count.
    pub fn sentence_terms(
        &self,
        s: &mut Session,
        tokens: &[usize],
        eps: Option<&[f64]>,
    ) -> Result<(Var, Var, usize, LatentState)> {
        let tokens = trim_pad(tokens);
        let h = self.encoder_forward(s, tokens)?;
        let st = self.posterior(s, h, tokens, eps)?;
        let (rec, n) = self.reconstruction(s, tokens, self.latent_for_decoder(&st))?;
        Ok((rec, st.kl_per_dim, n, st))
    }

    /// Batch objective `mean(rec) + β·max(λ, mean(Σ KL))`, with per-sentence
    /// noise drawn from `(seed, stream)`.
    pub fn batch_loss(
        &self,
        s: &mut Session,
        batch: &[Vec<usize>],
        beta: f64,
        lambda: f64,
        noise: Option<(u64, u64)>,
    ) -> Result<BatchLoss> {
        if batch.is_empty() {
            return Err(Error::contract("empty batch"));
        }
        let k = self.config.latent_dim;
        let eps_all = noise.map(|(seed, stream)| normal_noise(seed, stream, k * batch.len()));
        let mut rec_sum: Option<Var> = None;
        let mut kl_sum: Option<Var> = None;
        let mut tokens = 0;
        for (i, sent) in batch.iter().enumerate() {
            let eps = eps_all.as_ref().map(|e| &e[i * k..(i + 1) * k]);
            let (rec, kl, n, _) = self.sentence_terms(s, sent, eps)?;
            tokens += n;
            rec_sum = Some(match rec_sum {
                Some(a) => s.graph.add(a, rec)?,
                None => rec,
            });
            kl_sum = Some(match kl_sum {
                Some(a) => s.graph.add(a, kl)?,
                None => kl,
            });
        }
        let inv = 1.0 / batch.len() as f64;
        let rec = s.graph.scale(rec_sum.unwrap(), inv)?;
        let kl = s.graph.scale(kl_sum.unwrap(), inv)?;
        let kl_raw = s.value(kl).data().iter().sum::<f64>();
        let hinged = free_bit_kl_var(s, kl, lambda)?;
        let weighted = s.graph.scale(hinged, beta)?;
        let total = s.graph.add(rec, weighted)?;
        let breakdown = LossBreakdown {
            rec_nats: s.value(rec).item(),
            kl_raw,
            kl_hinged: s.value(hinged).item(),
            beta,
            total: s.value(total).item(),
            token_count: tokens,
        };
        Ok(BatchLoss { total, breakdown })
    }

    /// Posterior mean and log σ without recording gradients.
    pub fn encode(&self, tokens: &[usize]) -> Result<(Vec<f64>, Vec<f64>)> {
        let mut s = Session::new(&self.store, None);
        let tokens = trim_pad(tokens);
        let h = self.encoder_forward(&mut s, tokens)?;
        let st = self.posterior(&mut s, h, tokens, None)?;
        Ok((s.value(st.mu).data().to_vec(), s.value(st.log_sigma).data().to_vec()))
    }

    /// Next-token logits for every prefix of `tokens` given a fixed latent.
    pub fn logits_given(&self, tokens: &[usize], z: Option<&[f64]>) -> Result<Tensor> {
        let mut s = Session::new(&self.store, None);
        let zv = z.map(|z| s.graph.constant(Tensor::row(z.to_vec())));
        let l = self.decoder_forward(&mut s, tokens, zv)?;
        Ok(s.value(l).clone())
    }

    /// Fraction of target tokens whose argmax prediction is correct under
    /// teacher forcing with `z = μ(x)`.
    pub fn teacher_forced_accuracy(&self, sentences: &[Vec<usize>]) -> Result<f64> {
        let (mut hit, mut total) = (0usize, 0usize);
        for sent in sentences {
            let sent = trim_pad(sent);
            let z = self.encode(sent)?.0;
            let zr = (self.config.infusion != InfusionMode::None).then_some(z.as_slice());
            let logits = self.logits_given(&sent[..sent.len() - 1], zr)?;
            for (r, &t) in sent[1..].iter().enumerate() {
                if t == PAD {
                    continue;
                }
                total += 1;
                if argmax(logits.row_slice(r)) == t {
                    hit += 1;
                }
            }
        }
        Ok(if total == 0 { 0.0 } else { hit as f64 / total as f64 })
    }

    /// Teacher-forced NLL per token with `z = μ(x)`.
    pub fn teacher_forced_nll(&self, sentence: &[usize]) -> Result<f64> {
        let sent = trim_pad(sentence);
        let mut s = Session::new(&self.store, None);
        let h = self.encoder_forward(&mut s, sent)?;
        let st = self.posterior(&mut s, h, sent, None)?;
        let (rec, n) = self.reconstruction(&mut s, sent, self.latent_for_decoder(&st))?;
        Ok(s.value(rec).item() / n.max(1) as f64)
    }
}

pub fn argmax(xs: &[f64]) -> usize {
    let mut best = 0;
    for (i, x) in xs.iter().enumerate() {
        if *x > xs[best] {
            best = i;
        }
    }
    best
}
