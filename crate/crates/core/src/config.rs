//! Architecture hyperparameters and the parameter layout they imply.

use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum AdapterKind {
    /// Taps the state entering the FFN sublayer, adds after it.
    FfnParallel,
    /// Taps the state entering the attention sublayer, adds after it.
    AttnParallel,
    /// Taps the attention output.
    AttnSequential,
    /// Trainable key/value prefixes mixed into every attention layer.
    Prefix,
}

impl AdapterKind {
    pub const ALL: [AdapterKind; 4] = [
        AdapterKind::FfnParallel,
        AdapterKind::AttnParallel,
        AdapterKind::AttnSequential,
        AdapterKind::Prefix,
    ];

    pub fn is_adapter(self) -> bool {
        self != AdapterKind::Prefix
    }
}

impl fmt::Display for AdapterKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            AdapterKind::FfnParallel => "ffn_parallel",
            AdapterKind::AttnParallel => "attn_parallel",
            AdapterKind::AttnSequential => "attn_sequential",
            AdapterKind::Prefix => "prefix",
        })
    }
}

impl FromStr for AdapterKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "ffn_parallel" => AdapterKind::FfnParallel,
            "attn_parallel" => AdapterKind::AttnParallel,
            "attn_sequential" => AdapterKind::AttnSequential,
            "prefix" => AdapterKind::Prefix,
            other => return Err(Error::Config(format!("unknown adapter kind `{other}`"))),
        })
    }
}

/// One parameter-efficient component, expressed in the unified form
/// `h ← λ₁·h + λ₂·Δa`.
#[derive(Clone, Debug, PartialEq)]
pub struct AdapterSpec {
    pub kind: AdapterKind,
    /// Bottleneck width α of the adapter kinds.
    pub bottleneck: usize,
    /// Number of prefix positions (prefix kind only).
    pub prefix_len: usize,
    /// Pre-assigned λ₂ of the prefix kind; adapters ignore it.
    pub prefix_lambda: f64,
}

impl AdapterSpec {
    pub fn adapter(kind: AdapterKind, bottleneck: usize) -> Self {
        Self {
            kind,
            bottleneck,
            prefix_len: 0,
            prefix_lambda: 0.1,
        }
    }

    pub fn prefix(prefix_len: usize, lambda2: f64) -> Self {
        Self {
            kind: AdapterKind::Prefix,
            bottleneck: 0,
            prefix_len,
            prefix_lambda: lambda2,
        }
    }

    pub fn lambda1(&self) -> f64 {
        match self.kind {
            AdapterKind::Prefix => 1.0 - self.prefix_lambda,
            _ => 1.0,
        }
    }

    pub fn lambda2(&self) -> f64 {
        match self.kind {
            AdapterKind::Prefix => self.prefix_lambda,
            _ => 1.0,
        }
    }

    pub fn validate(&self, d_model: usize) -> Result<()> {
        match self.kind {
            AdapterKind::Prefix => {
                if !(self.prefix_lambda >= 0.0 && self.prefix_lambda < 1.0) {
                    return Err(Error::Config(format!(
                        "prefix lambda2 must lie in [0, 1), got {}",
                        self.prefix_lambda
                    )));
                }
            }
            _ => {
                if self.bottleneck < 1 || self.bottleneck >= d_model {
                    return Err(Error::Config(format!(
                        "adapter bottleneck must satisfy 1 <= α < d_model ({d_model}), got {}",
                        self.bottleneck
                    )));
                }
            }
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum InfusionMode {
    None,
    /// Add-to-memory: one shared projection gives identical key and value slots.
    Atm,
    /// Pseudo self-attention: separate key and value projections.
    Psa,
    /// Both, each contributing one latent position.
    AtmPsa,
}

impl InfusionMode {
    pub fn has_atm(self) -> bool {
        matches!(self, InfusionMode::Atm | InfusionMode::AtmPsa)
    }

    pub fn has_psa(self) -> bool {
        matches!(self, InfusionMode::Psa | InfusionMode::AtmPsa)
    }
}

impl fmt::Display for InfusionMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            InfusionMode::None => "none",
            InfusionMode::Atm => "atm",
            InfusionMode::Psa => "psa",
            InfusionMode::AtmPsa => "atm+psa",
        })
    }
}

impl FromStr for InfusionMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "none" => InfusionMode::None,
            "atm" => InfusionMode::Atm,
            "psa" => InfusionMode::Psa,
            "atm+psa" => InfusionMode::AtmPsa,
            other => return Err(Error::Config(format!("unknown infusion mode `{other}`"))),
        })
    }
}

/// How the encoder states are summarised before reparameterization.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum LatentConstruction {
    /// Identity-query attention pooling with a learned key map.
    Attention,
    /// Mean-pooled encoder state fed to the linear Gaussian maps ("LG").
    Pooled,
}

impl fmt::Display for LatentConstruction {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            LatentConstruction::Attention => "attention",
            LatentConstruction::Pooled => "pooled",
        })
    }
}

impl FromStr for LatentConstruction {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "attention" => LatentConstruction::Attention,
            "pooled" => LatentConstruction::Pooled,
            other => return Err(Error::Config(format!("unknown latent construction `{other}`"))),
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub enc_layers: usize,
    pub dec_layers: usize,
    pub d_model: usize,
    pub n_heads: usize,
    pub d_ff: usize,
    pub vocab_size: usize,
    pub max_seq_len: usize,
    pub latent_dim: usize,
    /// `None` means plain fine-tuning: no parameter-efficient components.
    pub pe: Option<AdapterSpec>,
    pub infusion: InfusionMode,
    pub latent: LatentConstruction,
    pub ln_eps: f64,
    pub init_std: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self::desk(256)
    }
}

impl ModelConfig {
    /// The default trainable configuration.
    pub fn desk(vocab_size: usize) -> Self {
        Self {
            enc_layers: 4,
            dec_layers: 6,
            d_model: 64,
            n_heads: 4,
            d_ff: 256,
            vocab_size,
            max_seq_len: 64,
            latent_dim: 16,
            pe: Some(AdapterSpec::adapter(AdapterKind::FfnParallel, 16)),
            infusion: InfusionMode::Psa,
            latent: LatentConstruction::Attention,
            ln_eps: 1e-5,
            init_std: 0.02,
        }
    }

    /// GPT-2-small shaped 8-layer encoder / 12-layer decoder. Only used
    /// for parameter accounting; never allocated.
    pub fn paper_shaped() -> Self {
        Self {
            enc_layers: 8,
            dec_layers: 12,
            d_model: 768,
            n_heads: 12,
            d_ff: 3072,
            vocab_size: 50257,
            max_seq_len: 1024,
            latent_dim: 32,
            pe: Some(AdapterSpec::adapter(AdapterKind::FfnParallel, 128)),
            infusion: InfusionMode::Psa,
            latent: LatentConstruction::Attention,
            ln_eps: 1e-5,
            init_std: 0.02,
        }
    }

    /// Small enough for exhaustive finite-difference checks.
    pub fn tiny(vocab_size: usize) -> Self {
        Self {
            enc_layers: 2,
            dec_layers: 2,
            d_model: 16,
            n_heads: 2,
            d_ff: 32,
            vocab_size,
            max_seq_len: 16,
            latent_dim: 4,
            pe: Some(AdapterSpec::adapter(AdapterKind::FfnParallel, 4)),
            infusion: InfusionMode::Psa,
            latent: LatentConstruction::Attention,
            ln_eps: 1e-5,
            init_std: 0.02,
        }
    }

    /// Encoder and decoder always share the token embedding table.
    pub fn shared_embedding(&self) -> bool {
        true
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.n_heads == 0 || !self.d_model.is_multiple_of(self.n_heads) {
            return bad(format!(
                "d_model {} not divisible by n_heads {}",
                self.d_model, self.n_heads
            ));
        }
        if self.enc_layers < 1 || self.dec_layers < 1 {
            return bad("encoder and decoder need at least one layer".into());
        }
        if self.vocab_size < 5 {
            return bad("vocabulary must hold the four reserved ids plus one token".into());
        }
        if self.latent_dim < 1 || self.d_ff < 1 || self.max_seq_len < 2 {
            return bad("latent_dim, d_ff >= 1 and max_seq_len >= 2 required".into());
        }
        if let Some(pe) = &self.pe {
            pe.validate(self.d_model)?;
        }
        Ok(())
    }

    /// Keys accepted by [`ModelConfig::set`], in serialization order.
    pub const KEYS: [&'static str; 16] = [
        "enc_layers",
        "dec_layers",
        "d_model",
        "n_heads",
        "d_ff",
        "vocab_size",
        "max_seq_len",
        "latent_dim",
        "pe",
        "bottleneck",
        "prefix_len",
        "prefix_lambda",
        "infusion",
        "latent",
        "ln_eps",
        "init_std",
    ];

    /// `key = value` pairs that [`ModelConfig::set`] reads back exactly.
    pub fn to_pairs(&self) -> Vec<(&'static str, String)> {
        let pe = self.pe.as_ref();
        let kind = pe.map_or("none".to_string(), |p| p.kind.to_string());
        vec![
            ("enc_layers", self.enc_layers.to_string()),
            ("dec_layers", self.dec_layers.to_string()),
            ("d_model", self.d_model.to_string()),
            ("n_heads", self.n_heads.to_string()),
            ("d_ff", self.d_ff.to_string()),
            ("vocab_size", self.vocab_size.to_string()),
            ("max_seq_len", self.max_seq_len.to_string()),
            ("latent_dim", self.latent_dim.to_string()),
            ("pe", kind),
            ("bottleneck", pe.map_or(0, |p| p.bottleneck).to_string()),
            ("prefix_len", pe.map_or(0, |p| p.prefix_len).to_string()),
            ("prefix_lambda", pe.map_or(0.1, |p| p.prefix_lambda).to_string()),
            ("infusion", self.infusion.to_string()),
            ("latent", self.latent.to_string()),
            ("ln_eps", self.ln_eps.to_string()),
            ("init_std", self.init_std.to_string()),
        ]
    }

    /// Sets one field from its textual form. Returns `Ok(false)` for keys
    /// this type does not own.
    pub fn set(&mut self, key: &str, value: &str) -> Result<bool> {
        fn num<T: FromStr>(key: &str, v: &str) -> Result<T> {
            v.parse()
                .map_err(|_| Error::Config(format!("bad value `{v}` for `{key}`")))
        }
        match key {
            "enc_layers" => self.enc_layers = num(key, value)?,
            "dec_layers" => self.dec_layers = num(key, value)?,
            "d_model" => self.d_model = num(key, value)?,
            "n_heads" => self.n_heads = num(key, value)?,
            "d_ff" => self.d_ff = num(key, value)?,
            "vocab_size" => self.vocab_size = num(key, value)?,
            "max_seq_len" => self.max_seq_len = num(key, value)?,
            "latent_dim" => self.latent_dim = num(key, value)?,
            "pe" => {
                if value == "none" {
                    self.pe = None;
                } else {
                    let kind: AdapterKind = value.parse()?;
                    let p = self
                        .pe
                        .get_or_insert_with(|| AdapterSpec::adapter(AdapterKind::FfnParallel, 16));
                    p.kind = kind;
                    // Switching kind must not leave the new kind with no parameters.
                    if kind.is_adapter() && p.bottleneck == 0 {
                        p.bottleneck = 16;
                    } else if !kind.is_adapter() && p.prefix_len == 0 {
                        p.prefix_len = 4;
                    }
                }
            }
            "bottleneck" => {
                let v = num(key, value)?;
                if let Some(p) = self.pe.as_mut() {
                    p.bottleneck = v;
                }
            }
            "prefix_len" => {
                let v = num(key, value)?;
                if let Some(p) = self.pe.as_mut() {
                    p.prefix_len = v;
                }
            }
            "prefix_lambda" => {
                let v = num(key, value)?;
                if let Some(p) = self.pe.as_mut() {
                    p.prefix_lambda = v;
                }
            }
            "infusion" => self.infusion = value.parse()?,
            "latent" => self.latent = value.parse()?,
            "ln_eps" => self.ln_eps = num(key, value)?,
            "init_std" => self.init_std = num(key, value)?,
            _ => return Ok(false),
        }
        Ok(true)
    }

    /// Rebuilds a config from [`ModelConfig::to_pairs`] output.
    pub fn from_pairs<'a>(pairs: impl IntoIterator<Item = (&'a str, &'a str)>) -> Result<Self> {
        let mut c = Self::desk(256);
        for (k, v) in pairs {
            if !c.set(k, v)? {
                return Err(Error::Config(format!("unknown model key `{k}`")));
            }
        }
        c.validate()?;
        Ok(c)
    }

    /// Every parameter the model owns, in allocation order.
    pub fn param_layout(&self) -> Vec<ParamSpec> {
        let d = self.d_model;
        let mut out = Vec::new();
        let mut push = |name: String, shape: Vec<usize>, group: ParamGroup, init: Init| {
            out.push(ParamSpec {
                name,
                shape,
                group,
                init,
            })
        };
        push(
            "wte".into(),
            vec![self.vocab_size, d],
            ParamGroup::Embedding,
            Init::Normal,
        );

        for (stack, prefix, layers) in [
            (Stack::Encoder, "enc", self.enc_layers),
            (Stack::Decoder, "dec", self.dec_layers),
        ] {
            let base = ParamGroup::Base(stack);
            push(format!("{prefix}.wpe"), vec![self.max_seq_len, d], base, Init::Normal);
            for l in 0..layers {
                let p = format!("{prefix}.h{l}");
                push(format!("{p}.ln1.g"), vec![d], base, Init::Ones);
                push(format!("{p}.ln1.b"), vec![d], base, Init::Zeros);
                for m in ["q", "k", "v", "o"] {
                    push(format!("{p}.attn.w{m}"), vec![d, d], base, Init::Normal);
                    push(format!("{p}.attn.b{m}"), vec![d], base, Init::Zeros);
                }
                push(format!("{p}.ln2.g"), vec![d], base, Init::Ones);
                push(format!("{p}.ln2.b"), vec![d], base, Init::Zeros);
                push(format!("{p}.mlp.w1"), vec![d, self.d_ff], base, Init::Normal);
                push(format!("{p}.mlp.b1"), vec![self.d_ff], base, Init::Zeros);
                push(format!("{p}.mlp.w2"), vec![self.d_ff, d], base, Init::Normal);
                push(format!("{p}.mlp.b2"), vec![d], base, Init::Zeros);

                let pe = ParamGroup::Pe(stack);
                match &self.pe {
                    Some(spec) if spec.kind.is_adapter() => {
                        let a = spec.bottleneck;
                        push(format!("{p}.adapter.down.w"), vec![d, a], pe, Init::Normal);
                        push(format!("{p}.adapter.down.b"), vec![a], pe, Init::Zeros);
                        push(format!("{p}.adapter.up.w"), vec![a, d], pe, Init::Zeros);
                        push(format!("{p}.adapter.up.b"), vec![d], pe, Init::Zeros);
                    }
                    Some(spec) if spec.prefix_len > 0 => {
                        push(format!("{p}.prefix.k"), vec![spec.prefix_len, d], pe, Init::Normal);
                        push(format!("{p}.prefix.v"), vec![spec.prefix_len, d], pe, Init::Normal);
                    }
                    _ => {}
                }

                if stack == Stack::Decoder {
                    let lat = self.latent_dim;
                    if self.infusion.has_atm() {
                        push(format!("{p}.atm.w"), vec![lat, d], ParamGroup::Infusion, Init::Normal);
                        push(format!("{p}.atm.b"), vec![d], ParamGroup::Infusion, Init::Zeros);
                    }
                    if self.infusion.has_psa() {
                        for kv in ["k", "v"] {
                            push(
                                format!("{p}.psa.{kv}.w"),
                                vec![lat, d],
                                ParamGroup::Infusion,
                                Init::Normal,
                            );
                            push(format!("{p}.psa.{kv}.b"), vec![d], ParamGroup::Infusion, Init::Zeros);
                        }
                    }
                }
            }
            push(format!("{prefix}.ln_f.g"), vec![d], base, Init::Ones);
            push(format!("{prefix}.ln_f.b"), vec![d], base, Init::Zeros);
        }

        if self.latent == LatentConstruction::Attention {
            push("latent.key.w".into(), vec![d, d], ParamGroup::Latent, Init::Normal);
            push("latent.key.b".into(), vec![d], ParamGroup::Latent, Init::Zeros);
        }
        push(
            "latent.mu.w".into(),
            vec![d, self.latent_dim],
            ParamGroup::Latent,
            Init::Normal,
        );
        push(
            "latent.mu.b".into(),
            vec![self.latent_dim],
            ParamGroup::Latent,
            Init::Zeros,
        );
        push(
            "latent.logsigma.w".into(),
            vec![d, self.latent_dim],
            ParamGroup::Latent,
            Init::Normal,
        );
        push(
            "latent.logsigma.b".into(),
            vec![self.latent_dim],
            ParamGroup::Latent,
            Init::Zeros,
        );
        out
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Stack {
    Encoder,
    Decoder,
}

/// Role of a parameter, which decides whether a training mode updates it.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum ParamGroup {
    Embedding,
    Base(Stack),
    Pe(Stack),
    Latent,
    Infusion,
    Head,
}

impl fmt::Display for ParamGroup {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ParamGroup::Embedding => "embedding",
            ParamGroup::Base(Stack::Encoder) => "encoder.base",
            ParamGroup::Base(Stack::Decoder) => "decoder.base",
            ParamGroup::Pe(Stack::Encoder) => "encoder.pe",
            ParamGroup::Pe(Stack::Decoder) => "decoder.pe",
            ParamGroup::Latent => "latent",
            ParamGroup::Infusion => "infusion",
            ParamGroup::Head => "head",
        })
    }
}

impl FromStr for ParamGroup {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "embedding" => ParamGroup::Embedding,
            "encoder.base" => ParamGroup::Base(Stack::Encoder),
            "decoder.base" => ParamGroup::Base(Stack::Decoder),
            "encoder.pe" => ParamGroup::Pe(Stack::Encoder),
            "decoder.pe" => ParamGroup::Pe(Stack::Decoder),
            "latent" => ParamGroup::Latent,
            "infusion" => ParamGroup::Infusion,
            "head" => ParamGroup::Head,
            other => return Err(Error::Config(format!("unknown parameter group `{other}`"))),
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Init {
    Normal,
    Zeros,
    Ones,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ParamSpec {
    pub name: String,
    pub shape: Vec<usize>,
    pub group: ParamGroup,
    pub init: Init,
}

impl ParamSpec {
    pub fn numel(&self) -> usize {
        self.shape.iter().product()
    }
}
