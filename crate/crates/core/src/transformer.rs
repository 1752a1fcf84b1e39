//! GPT-style pre-layer-norm blocks with a switchable attention mask.
//!
//! The encoder runs these blocks bidirectionally; the decoder runs them
//! causally and may prepend extra key/value positions (latent infusion)
//! which every query can see.

use std::sync::Arc;

use crate::autograd::Var;
use crate::config::{AdapterKind, ModelConfig};
use crate::error::{Error, Result};
use crate::params::{ParamId, ParamStore, Session};
use crate::pe::{adapter_forward, prefix_extend, PeParams, PrefixKv};

/// Reserved padding id; padded positions are masked and ignored by the loss.
pub const PAD: usize = 0;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum MaskKind {
    Bidirectional,
    Causal,
}

#[derive(Clone, Debug, PartialEq)]
pub struct MaskMode {
    pub kind: MaskKind,
    /// `true` for real tokens, `false` for padding.
    pub pad_mask: Vec<bool>,
}

impl MaskMode {
    pub fn new(kind: MaskKind, len: usize) -> Self {
        Self {
            kind,
            pad_mask: vec![true; len],
        }
    }

    pub fn from_tokens(kind: MaskKind, tokens: &[usize]) -> Self {
        Self {
            kind,
            pad_mask: tokens.iter().map(|&t| t != PAD).collect(),
        }
    }

    pub fn len(&self) -> usize {
        self.pad_mask.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pad_mask.is_empty()
    }

    /// Row-major `L × (n_extra + L)` visibility. The first `n_extra`
    /// columns are prepended memory positions and always visible.
    pub fn visibility(&self, n_extra: usize) -> Arc<[bool]> {
        let l = self.len();
        let w = n_extra + l;
        let mut vis = vec![false; l * w];
        for q in 0..l {
            for e in 0..n_extra {
                vis[q * w + e] = true;
            }
            for k in 0..l {
                let structural = match self.kind {
                    MaskKind::Bidirectional => true,
                    MaskKind::Causal => k <= q,
                };
                vis[q * w + n_extra + k] = structural && self.pad_mask[k];
            }
        }
        vis.into()
    }
}

#[derive(Clone, Debug)]
pub struct AttnParams {
    pub wq: ParamId,
    pub bq: ParamId,
    pub wk: ParamId,
    pub bk: ParamId,
    pub wv: ParamId,
    pub bv: ParamId,
    pub wo: ParamId,
    pub bo: ParamId,
}

impl AttnParams {
    pub fn lookup(store: &ParamStore, prefix: &str) -> Result<Self> {
        let id = |m: &str| store.id(&format!("{prefix}.attn.{m}"));
        Ok(Self {
            wq: id("wq")?,
            bq: id("bq")?,
            wk: id("wk")?,
            bk: id("bk")?,
            wv: id("wv")?,
            bv: id("bv")?,
            wo: id("wo")?,
            bo: id("bo")?,
        })
    }
}

/// Extra memory positions in key/value space (`M × d` each).
#[derive(Clone, Copy, Debug)]
pub struct ExtraKv {
    pub keys: Var,
    pub values: Var,
}

pub struct Attention {
    /// `L × d`, after the output projection.
    pub out: Var,
    /// Per-head `L × (M + L)` attention weights over `[extra; own]` positions.
    pub weights: Vec<Var>,
}

/// Scaled dot-product multi-head attention (no residual, no layer norm;
/// [`block_forward`] wraps it).
///
/// Masked positions get zero weight, as if scored −∞. `extra` positions are
/// prepended to each head's keys/values and visible from every query. A
/// `prefix` contributes a separate attention readout over its positions,
/// mixed as `(1 − λ₂)·own + λ₂·prefix`.
pub fn multi_head_attention(
    s: &mut Session,
    x: Var,
    p: &AttnParams,
    n_heads: usize,
    mask: &MaskMode,
    extra: &[ExtraKv],
    prefix: Option<&PrefixKv>,
) -> Result<Attention> {
    let xv = s.value(x);
    let (l, d) = (xv.rows(), xv.cols());
    if l != mask.len() {
        return Err(Error::dim("multi_head_attention", xv.shape(), &[mask.len()]));
    }
    if n_heads == 0 || d % n_heads != 0 {
        return Err(Error::dim("multi_head_attention heads", xv.shape(), &[n_heads]));
    }
    for e in extra {
        if s.value(e.keys).cols() != d || s.value(e.values).shape() != s.value(e.keys).shape() {
            return Err(Error::dim("extra_kv", s.value(e.keys).shape(), &[d]));
        }
    }
    let dh = d / n_heads;
    let scale = 1.0 / (dh as f64).sqrt();

    let (wq, bq, wk, bk) = (s.param(p.wq), s.param(p.bq), s.param(p.wk), s.param(p.bk));
    let (wv, bv, wo, bo) = (s.param(p.wv), s.param(p.bv), s.param(p.wo), s.param(p.bo));
    let g = &mut s.graph;
    let q = g.linear(x, wq, bq)?;
    let q = g.scale(q, scale)?;
    let k = g.linear(x, wk, bk)?;
    let v = g.linear(x, wv, bv)?;

    let n_extra: usize = extra.iter().map(|e| g.value(e.keys).rows()).sum();
    let vis = mask.visibility(n_extra);

    let mut heads = Vec::with_capacity(n_heads);
    let mut weights = Vec::with_capacity(n_heads);
    for h in 0..n_heads {
        let qh = g.col_slice(q, h * dh, dh)?;
        let mut kh = g.col_slice(k, h * dh, dh)?;
        let mut vh = g.col_slice(v, h * dh, dh)?;
        if !extra.is_empty() {
            let mut ks = Vec::with_capacity(extra.len() + 1);
            let mut vs = Vec::with_capacity(extra.len() + 1);
            for e in extra {
                ks.push(g.col_slice(e.keys, h * dh, dh)?);
                vs.push(g.col_slice(e.values, h * dh, dh)?);
            }
            ks.push(kh);
            vs.push(vh);
            kh = g.concat_rows(&ks)?;
            vh = g.concat_rows(&vs)?;
        }
        let scores = g.matmul_t(qh, kh)?;
        let w = g.masked_softmax(scores, 1, Arc::clone(&vis))?;
        let mut oh = g.matmul(w, vh)?;
        if let Some(pk) = prefix {
            let pkh = g.col_slice(pk.keys, h * dh, dh)?;
            let pvh = g.col_slice(pk.values, h * dh, dh)?;
            let ps = g.matmul_t(qh, pkh)?;
            let pw = g.softmax(ps, 1)?;
            let po = g.matmul(pw, pvh)?;
            let own = g.scale(oh, 1.0 - pk.lambda2)?;
            let mixed = g.scale(po, pk.lambda2)?;
            oh = g.add(own, mixed)?;
        }
        heads.push(oh);
        weights.push(w);
    }
    let cat = if heads.len() == 1 {
        heads[0]
    } else {
        g.concat_cols(&heads)?
    };
    let out = g.linear(cat, wo, bo)?;
    Ok(Attention { out, weights })
}

#[derive(Clone, Debug)]
pub struct BlockParams {
    pub ln1_g: ParamId,
    pub ln1_b: ParamId,
    pub attn: AttnParams,
    pub ln2_g: ParamId,
    pub ln2_b: ParamId,
    pub w1: ParamId,
    pub b1: ParamId,
    pub w2: ParamId,
    pub b2: ParamId,
    pub pe: Option<PeParams>,
}

impl BlockParams {
    pub fn lookup(store: &ParamStore, cfg: &ModelConfig, prefix: &str) -> Result<Self> {
        let id = |m: &str| store.id(&format!("{prefix}.{m}"));
        Ok(Self {
            ln1_g: id("ln1.g")?,
            ln1_b: id("ln1.b")?,
            attn: AttnParams::lookup(store, prefix)?,
            ln2_g: id("ln2.g")?,
            ln2_b: id("ln2.b")?,
            w1: id("mlp.w1")?,
            b1: id("mlp.b1")?,
            w2: id("mlp.w2")?,
            b2: id("mlp.b2")?,
            pe: PeParams::lookup(store, cfg, prefix)?,
        })
    }
}

/// One pre-LN block: `h + Attn(LN₁ h)`, then `h + FFN(LN₂ h)`, with the
/// configured parameter-efficient component spliced in at its insertion point.
pub fn block_forward(
    s: &mut Session,
    h: Var,
    bp: &BlockParams,
    cfg: &ModelConfig,
    mask: &MaskMode,
    extra: &[ExtraKv],
) -> Result<Var> {
    let prefix = match &bp.pe {
        Some(pe @ PeParams::Prefix { .. }) => Some(prefix_extend(s, pe)?),
        _ => None,
    };
    let adapter = match &bp.pe {
        Some(PeParams::Adapter(a)) => Some(a),
        _ => None,
    };

    let (g1, b1) = (s.param(bp.ln1_g), s.param(bp.ln1_b));
    let x = s.graph.layer_norm(h, g1, b1, cfg.ln_eps)?;
    let mut attn = multi_head_attention(s, x, &bp.attn, cfg.n_heads, mask, extra, prefix.as_ref())?.out;
    if let Some(a) = adapter.filter(|a| a.kind == AdapterKind::AttnSequential) {
        let delta = adapter_forward(s, attn, a)?;
        attn = s.graph.add(attn, delta)?;
    }
    let mut h1 = s.graph.add(h, attn)?;
    if let Some(a) = adapter.filter(|a| a.kind == AdapterKind::AttnParallel) {
        let delta = adapter_forward(s, h, a)?;
        h1 = s.graph.add(h1, delta)?;
    }

    let (g2, b2) = (s.param(bp.ln2_g), s.param(bp.ln2_b));
    let (w1, bb1, w2, bb2) = (s.param(bp.w1), s.param(bp.b1), s.param(bp.w2), s.param(bp.b2));
    let y = s.graph.layer_norm(h1, g2, b2, cfg.ln_eps)?;
    let u = s.graph.linear(y, w1, bb1)?;
    let u = s.graph.gelu(u)?;
    let mut m = s.graph.linear(u, w2, bb2)?;
    if let Some(a) = adapter.filter(|a| a.kind == AdapterKind::FfnParallel) {
        let delta = adapter_forward(s, h1, a)?;
        m = s.graph.add(m, delta)?;
    }
    s.graph.add(h1, m)
}

#[derive(Clone, Debug)]
pub struct StackParams {
    pub wpe: ParamId,
    pub blocks: Vec<BlockParams>,
    pub lnf_g: ParamId,
    pub lnf_b: ParamId,
}

impl StackParams {
    pub fn lookup(store: &ParamStore, cfg: &ModelConfig, prefix: &str, layers: usize) -> Result<Self> {
        Ok(Self {
            wpe: store.id(&format!("{prefix}.wpe"))?,
            blocks: (0..layers)
                .map(|l| BlockParams::lookup(store, cfg, &format!("{prefix}.h{l}")))
                .collect::<Result<_>>()?,
            lnf_g: store.id(&format!("{prefix}.ln_f.g"))?,
            lnf_b: store.id(&format!("{prefix}.ln_f.b"))?,
        })
    }
}

/// Embeds `tokens`, runs every block and the final layer norm.
/// `extra[l]` holds the prepended memory for layer `l` (may be empty).
pub fn stack_forward(
    s: &mut Session,
    wte: ParamId,
    sp: &StackParams,
    cfg: &ModelConfig,
    tokens: &[usize],
    mask: &MaskMode,
    extra: &[Vec<ExtraKv>],
) -> Result<Var> {
    if tokens.is_empty() {
        return Err(Error::contract("empty token sequence"));
    }
    if tokens.len() > cfg.max_seq_len {
        return Err(Error::contract(format!(
            "sequence length {} exceeds max_seq_len {}",
            tokens.len(),
            cfg.max_seq_len
        )));
    }
    let positions: Vec<usize> = (0..tokens.len()).collect();
    let (wte, wpe) = (s.param(wte), s.param(sp.wpe));
    let tok = s.graph.gather(wte, tokens)?;
    let pos = s.graph.gather(wpe, &positions)?;
    let mut h = s.graph.add(tok, pos)?;
    for (l, bp) in sp.blocks.iter().enumerate() {
        let e = extra.get(l).map_or(&[][..], Vec::as_slice);
        h = block_forward(s, h, bp, cfg, mask, e)?;
    }
    let (g, b) = (s.param(sp.lnf_g), s.param(sp.lnf_b));
    s.graph.layer_norm(h, g, b, cfg.ln_eps)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::ParamGroup;
    use crate::tensor::Tensor;

    fn attn_store(d: usize, wq: Tensor, wk: Tensor, wv: Tensor, wo: Tensor) -> (ParamStore, AttnParams) {
        let mut st = ParamStore::new();
        let g = ParamGroup::Base(crate::config::Stack::Encoder);
        let wq = st.add("wq", g, wq);
        let bq = st.add("bq", g, Tensor::zeros(&[d]));
        let wk = st.add("wk", g, wk);
        let bk = st.add("bk", g, Tensor::zeros(&[d]));
        let wv = st.add("wv", g, wv);
        let bv = st.add("bv", g, Tensor::zeros(&[d]));
        let wo = st.add("wo", g, wo);
        let bo = st.add("bo", g, Tensor::zeros(&[d]));
        (
            st,
            AttnParams {
                wq,
                bq,
                wk,
                bk,
                wv,
                bv,
                wo,
                bo,
            },
        )
    }

    #[test]
    fn visibility_layout() {
        let m = MaskMode {
            kind: MaskKind::Causal,
            pad_mask: vec![true, true, false],
        };
        let v = m.visibility(1);
        #[rustfmt::skip]
        let want = [
            true, true, false, false,
            true, true, true, false,
            true, true, true, false,
        ];
        assert_eq!(&*v, &want);
    }

    #[test]
    fn causal_first_query_sees_only_itself() {
        let d = 4;
        let w = |seed: f64| {
            let data = (0..d * d).map(|i| ((i as f64 + seed) * 0.37).sin()).collect();
            Tensor::new(vec![d, d], data).unwrap()
        };
        let (st, p) = attn_store(d, w(1.0), w(2.0), w(3.0), w(4.0));
        let mut s = Session::new(&st, None);
        let x = s
            .graph
            .constant(Tensor::new(vec![3, d], (0..12).map(|i| (i as f64).cos()).collect()).unwrap());
        let mask = MaskMode::new(MaskKind::Causal, 3);
        let a = multi_head_attention(&mut s, x, &p, 2, &mask, &[], None).unwrap();
        for w in &a.weights {
            let wv = s.value(*w);
            assert_eq!(wv.at(0, 0), 1.0);
            assert_eq!(wv.at(0, 1), 0.0);
            assert_eq!(wv.at(0, 2), 0.0);
            for r in 0..3 {
                let sum: f64 = wv.row_slice(r).iter().sum();
                assert!((sum - 1.0).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn identical_tokens_attend_uniformly() {
        let d = 4;
        let w = Tensor::new(vec![d, d], (0..16).map(|i| (i as f64 * 0.3).sin()).collect()).unwrap();
        let (st, p) = attn_store(d, w.clone(), w.clone(), w.clone(), w);
        let mut s = Session::new(&st, None);
        let row: Vec<f64> = vec![0.3, -0.2, 0.9, 0.1];
        let x = s
            .graph
            .constant(Tensor::from_rows(&[row.clone(), row.clone(), row.clone(), row]));
        let mask = MaskMode::new(MaskKind::Bidirectional, 4);
        let a = multi_head_attention(&mut s, x, &p, 2, &mask, &[], None).unwrap();
        for w in &a.weights {
            for v in s.value(*w).data() {
                assert!((v - 0.25).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn hand_computed_single_head() {
        // d = 2, one head, Wq = Wk = Wv = Wo = I, x = [[1,0],[0,1]].
        // scores = x·xᵀ/√2 = [[1/√2, 0],[0, 1/√2]]; softmax rows give
        // [a, 1−a] and [1−a, a] with a = e^{1/√2}/(e^{1/√2}+1).
        let (st, p) = attn_store(2, Tensor::eye(2), Tensor::eye(2), Tensor::eye(2), Tensor::eye(2));
        let mut s = Session::new(&st, None);
        let x = s.graph.constant(Tensor::eye(2));
        let mask = MaskMode::new(MaskKind::Bidirectional, 2);
        let a = multi_head_attention(&mut s, x, &p, 1, &mask, &[], None).unwrap();
        let e = (1.0 / 2f64.sqrt()).exp();
        let w = e / (e + 1.0);
        let want = Tensor::from_rows(&[vec![w, 1.0 - w], vec![1.0 - w, w]]);
        assert!(s.value(a.out).max_abs_diff(&want) < 1e-10);

        // Causal: row 0 sees only itself → output row 0 = v₀ = [1, 0].
        let mut s = Session::new(&st, None);
        let x = s.graph.constant(Tensor::eye(2));
        let mask = MaskMode::new(MaskKind::Causal, 2);
        let a = multi_head_attention(&mut s, x, &p, 1, &mask, &[], None).unwrap();
        let want = Tensor::from_rows(&[vec![1.0, 0.0], vec![1.0 - w, w]]);
        assert!(s.value(a.out).max_abs_diff(&want) < 1e-10);
    }

    #[test]
    fn extra_positions_visible_under_causal_mask() {
        let d = 2;
        let (st, p) = attn_store(d, Tensor::eye(2), Tensor::eye(2), Tensor::eye(2), Tensor::eye(2));
        let mut s = Session::new(&st, None);
        let x = s.graph.constant(Tensor::eye(2));
        let ek = s.graph.constant(Tensor::row(vec![0.5, 0.5]));
        let ev = s.graph.constant(Tensor::row(vec![3.0, -1.0]));
        let mask = MaskMode::new(MaskKind::Causal, 2);
        let a = multi_head_attention(&mut s, x, &p, 1, &mask, &[ExtraKv { keys: ek, values: ev }], None).unwrap();
        let w = s.value(a.weights[0]);
        assert_eq!(w.shape(), &[2, 3]);
        assert!(w.at(0, 0) > 0.0 && w.at(1, 0) > 0.0);
        assert_eq!(w.at(0, 2), 0.0);

        // Row 0 by hand: scores [0.5/√2, 1/√2] over [extra, own₀].
        let (s0, s1) = (0.5 / 2f64.sqrt(), 1.0 / 2f64.sqrt());
        let (e0, e1) = (s0.exp(), s1.exp());
        let (p0, p1) = (e0 / (e0 + e1), e1 / (e0 + e1));
        let want = [3.0 * p0 + p1, -p0];
        let got = s.value(a.out).row_slice(0);
        assert!((got[0] - want[0]).abs() < 1e-12 && (got[1] - want[1]).abs() < 1e-12);
    }

    #[test]
    fn mismatched_extra_width_is_dimension_error() {
        let (st, p) = attn_store(2, Tensor::eye(2), Tensor::eye(2), Tensor::eye(2), Tensor::eye(2));
        let mut s = Session::new(&st, None);
        let x = s.graph.constant(Tensor::eye(2));
        let ek = s.graph.constant(Tensor::row(vec![0.5, 0.5, 1.0]));
        let mask = MaskMode::new(MaskKind::Causal, 2);
        let r = multi_head_attention(&mut s, x, &p, 1, &mask, &[ExtraKv { keys: ek, values: ek }], None);
        assert!(matches!(r, Err(Error::Dimension { .. })));
    }
}
