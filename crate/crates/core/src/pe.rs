//! Parameter-efficient components and freeze/accounting machinery.
//!
//! All components follow `h ← λ₁·h + λ₂·Δa`. Bottleneck adapters use
//! `λ₁ = λ₂ = 1` and differ only in where `Δa` is read from; the prefix
//! kind uses `λ₁ = 1 − λ₂` with a fixed λ₂.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use crate::autograd::Var;
use crate::config::{AdapterKind, ModelConfig, ParamGroup, ParamSpec, Stack};
use crate::error::{Error, Result};
use crate::params::{ParamId, ParamStore, Session};

#[derive(Clone, Debug)]
pub struct AdapterParams {
    pub kind: AdapterKind,
    pub down_w: ParamId,
    pub down_b: ParamId,
    pub up_w: ParamId,
    pub up_b: ParamId,
}

#[derive(Clone, Debug)]
pub enum PeParams {
    Adapter(AdapterParams),
    Prefix {
        keys: ParamId,
        values: ParamId,
        lambda2: f64,
    },
}

impl PeParams {
    pub fn lookup(store: &ParamStore, cfg: &ModelConfig, block: &str) -> Result<Option<Self>> {
        let Some(spec) = &cfg.pe else { return Ok(None) };
        let id = |m: &str| store.id(&format!("{block}.{m}"));
        Ok(match spec.kind {
            AdapterKind::Prefix if spec.prefix_len == 0 => None,
            AdapterKind::Prefix => Some(PeParams::Prefix {
                keys: id("prefix.k")?,
                values: id("prefix.v")?,
                lambda2: spec.prefix_lambda,
            }),
            kind => Some(PeParams::Adapter(AdapterParams {
                kind,
                down_w: id("adapter.down.w")?,
                down_b: id("adapter.down.b")?,
                up_w: id("adapter.up.w")?,
                up_b: id("adapter.up.b")?,
            })),
        })
    }
}

/// `Δa = up(GELU(down(h_in)))`. The caller adds it at the insertion point.
pub fn adapter_forward(s: &mut Session, h_in: Var, p: &AdapterParams) -> Result<Var> {
    let (dw, db, uw, ub) = (s.param(p.down_w), s.param(p.down_b), s.param(p.up_w), s.param(p.up_b));
    let down = s.graph.linear(h_in, dw, db)?;
    let act = s.graph.gelu(down)?;
    s.graph.linear(act, uw, ub)
}

/// Prefix keys/values for one layer, in key/value space (`prefix_len × d`).
#[derive(Clone, Copy, Debug)]
pub struct PrefixKv {
    pub keys: Var,
    pub values: Var,
    pub lambda2: f64,
}

pub fn prefix_extend(s: &mut Session, p: &PeParams) -> Result<PrefixKv> {
    match p {
        PeParams::Prefix { keys, values, lambda2 } => Ok(PrefixKv {
            keys: s.param(*keys),
            values: s.param(*values),
            lambda2: *lambda2,
        }),
        PeParams::Adapter(_) => Err(Error::contract("prefix_extend on an adapter component")),
    }
}

/// Which parameters a training run may update.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum TrainMode {
    /// Feature-based: task heads only.
    Fb,
    /// Parameter-efficient: PE components, latent-space parameters, heads.
    Pe,
    /// Full fine-tuning.
    Ft,
}

impl TrainMode {
    pub fn trains(self, group: ParamGroup) -> bool {
        match self {
            TrainMode::Ft => true,
            TrainMode::Fb => group == ParamGroup::Head,
            TrainMode::Pe => matches!(
                group,
                ParamGroup::Pe(_) | ParamGroup::Latent | ParamGroup::Infusion | ParamGroup::Head
            ),
        }
    }
}

impl fmt::Display for TrainMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            TrainMode::Fb => "fb",
            TrainMode::Pe => "pe",
            TrainMode::Ft => "ft",
        })
    }
}

impl FromStr for TrainMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "fb" => Ok(TrainMode::Fb),
            "pe" => Ok(TrainMode::Pe),
            "ft" => Ok(TrainMode::Ft),
            other => Err(Error::Config(format!("unknown training mode `{other}`"))),
        }
    }
}

/// Per-parameter trainable flags, aligned with a [`ParamStore`].
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TrainableMask {
    pub mode: TrainMode,
    flags: Vec<bool>,
    groups: Vec<ParamGroup>,
}

impl TrainableMask {
    pub fn flags(&self) -> &[bool] {
        &self.flags
    }

    pub fn is_trainable(&self, id: ParamId) -> bool {
        self.flags[id.index()]
    }

    pub fn len(&self) -> usize {
        self.flags.len()
    }

    pub fn is_empty(&self) -> bool {
        self.flags.is_empty()
    }

    pub fn groups(&self) -> &[ParamGroup] {
        &self.groups
    }

    /// Copy with every parameter of `group` frozen.
    pub fn without(&self, group: ParamGroup) -> Self {
        let mut m = self.clone();
        for (f, g) in m.flags.iter_mut().zip(&m.groups) {
            if *g == group {
                *f = false;
            }
        }
        m
    }
}

fn mask_for(groups: Vec<ParamGroup>, mode: TrainMode) -> TrainableMask {
    TrainableMask {
        mode,
        flags: groups.iter().map(|g| mode.trains(*g)).collect(),
        groups,
    }
}

pub fn apply_freeze(store: &ParamStore, mode: TrainMode) -> TrainableMask {
    mask_for(store.iter().map(|(_, p)| p.group).collect(), mode)
}

/// Mask over a layout that was never allocated (accounting only).
pub fn layout_mask(layout: &[ParamSpec], mode: TrainMode) -> TrainableMask {
    mask_for(layout.iter().map(|p| p.group).collect(), mode)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ParamCount {
    pub trainable: usize,
    pub total: usize,
}

impl ParamCount {
    /// Percentage of trainable parameters over everything the model holds
    /// (original transformer stacks plus every addition).
    pub fn fraction_pct(&self) -> f64 {
        if self.total == 0 {
            0.0
        } else {
            100.0 * self.trainable as f64 / self.total as f64
        }
    }
}

/// Exact counts for `config` under `mask` without allocating weights.
pub fn count_params(config: &ModelConfig, mask: &TrainableMask) -> ParamCount {
    let layout = config.param_layout();
    assert_eq!(layout.len(), mask.len(), "mask does not match the config layout");
    count_layout(&layout, mask.flags())
}

fn count_layout(layout: &[ParamSpec], flags: &[bool]) -> ParamCount {
    let total = layout.iter().map(ParamSpec::numel).sum();
    let trainable = layout
        .iter()
        .zip(flags)
        .filter(|(_, t)| **t)
        .map(|(p, _)| p.numel())
        .sum();
    ParamCount { trainable, total }
}

/// Per-component breakdown printed by `params-report`.
#[derive(Clone, Debug)]
pub struct ParamsReport {
    pub rows: Vec<(ParamGroup, ParamCount)>,
    pub overall: ParamCount,
}

impl ParamsReport {
    pub fn new(layout: &[ParamSpec], mask: &TrainableMask) -> Self {
        let mut by_group: BTreeMap<ParamGroup, ParamCount> = BTreeMap::new();
        for (p, &t) in layout.iter().zip(mask.flags()) {
            let e = by_group.entry(p.group).or_insert(ParamCount { trainable: 0, total: 0 });
            e.total += p.numel();
            if t {
                e.trainable += p.numel();
            }
        }
        Self {
            rows: by_group.into_iter().collect(),
            overall: count_layout(layout, mask.flags()),
        }
    }

    pub fn for_config(config: &ModelConfig, mode: TrainMode) -> Self {
        let layout = config.param_layout();
        let mask = layout_mask(&layout, mode);
        Self::new(&layout, &mask)
    }
}

impl fmt::Display for ParamsReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(
            f,
            "{:<14} {:>14} {:>14} {:>9}",
            "component", "trainable", "total", "fraction"
        )?;
        for (g, c) in &self.rows {
            writeln!(
                f,
                "{:<14} {:>14} {:>14} {:>8.2}%",
                g.to_string(),
                c.trainable,
                c.total,
                c.fraction_pct()
            )?;
        }
        write!(
            f,
            "{:<14} {:>14} {:>14} {:>8.2}%",
            "all",
            self.overall.trainable,
            self.overall.total,
            self.overall.fraction_pct()
        )
    }
}

/// Whether a decoder-side PE parameter is held back during the first stage.
pub fn is_decoder_pe(group: ParamGroup) -> bool {
    group == ParamGroup::Pe(Stack::Decoder)
}
