//! Cross-modal decoder: embedding interaction unit followed by a top-down path.

use rand::Rng;

use crate::aggregation::{AggregatedFeatures, GN_EPS};
use crate::autodiff::Var;
use crate::error::{FssError, Result};
use crate::mask::Mask;
use crate::nn::{conv_params, linear_params, norm_params, pointwise, Bound, ParamId, ParamStore};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct DecoderConfig {
    pub heads: usize,
    /// Width of the fused embedding `f_vt`.
    pub embed_out: usize,
    /// Output widths of the four decoding levels (stage 4 down to stage 1).
    pub level_channels: [usize; 4],
    /// Widths of the transformed shallow features for stages 1 and 2.
    pub shallow_channels: [usize; 2],
    pub groups: usize,
}

impl Default for DecoderConfig {
    fn default() -> Self {
        Self { heads: 4, embed_out: 128, level_channels: [64, 48, 32, 32], shallow_channels: [16, 32], groups: 4 }
    }
}

type Affine = (ParamId, ParamId);

/// Embedding interaction unit parameters.
#[derive(Clone, Debug)]
pub struct Eiu {
    heads: usize,
    width: usize,
    query: Affine,
    key: Affine,
    value: Affine,
    attn_out: Affine,
    gate: Affine,
    reduce: Affine,
    out1: Affine,
    out2: Affine,
}

impl Eiu {
    pub fn new<T: Scalar>(store: &mut ParamStore<T>, embed_dim: usize, width: usize, heads: usize, rng: &mut impl Rng) -> Result<Self> {
        if heads == 0 || width % heads != 0 {
            return Err(FssError::Validation(format!("width {width} not divisible into {heads} heads")));
        }
        let mut lin = |name: &str, o, i| linear_params(store, &format!("decoder.eiu.{name}"), o, i, rng);
        Ok(Self {
            heads,
            width,
            query: lin("query", width, embed_dim),
            key: lin("key", width, embed_dim),
            value: lin("value", width, embed_dim),
            attn_out: lin("attn_out", width, width),
            gate: lin("gate", width, width),
            reduce: lin("reduce", width, embed_dim),
            out1: lin("out1", width, width),
            out2: lin("out2", width, width),
        })
    }

    fn apply<'g, T: Scalar>(p: &Bound<'g, T>, x: Var<'g, T>, a: Affine) -> Var<'g, T> {
        x.linear(p.var(a.0), Some(p.var(a.1)))
    }

    /// Element-wise gate `A_vt` as `[h*w, width]`.
    pub fn gate<'g, T: Scalar>(&self, p: &Bound<'g, T>, f_v: Var<'g, T>, f_t: Var<'g, T>) -> Result<Var<'g, T>> {
        let (seq, _) = self.check(&f_v, &f_t)?;
        let n = seq.shape()[0];
        let c = f_t.shape()[0];
        let dh = self.width / self.heads;
        let t = f_t.reshape(&[1, c]);
        let q = Self::apply(p, seq, self.query).reshape(&[n, self.heads, dh]).permute(&[1, 0, 2]);
        let k = Self::apply(p, t, self.key).reshape(&[1, self.heads, dh]).permute(&[1, 0, 2]);
        let v = Self::apply(p, t, self.value).reshape(&[1, self.heads, dh]).permute(&[1, 0, 2]);
        let scores = q.bmm(k, true).scale(T::one() / T::of(dh as f64).sqrt()).softmax_last();
        let attended = scores.bmm(v, false).permute(&[1, 0, 2]).reshape(&[n, self.width]);
        Ok(Self::apply(p, Self::apply(p, attended, self.attn_out), self.gate))
    }

    /// `[c_vt, h, w]` as a `[h*w, c_vt]` sequence plus its spatial dims.
    fn check<'g, T: Scalar>(&self, f_v: &Var<'g, T>, f_t: &Var<'g, T>) -> Result<(Var<'g, T>, (usize, usize))> {
        let s = f_v.shape();
        let t = f_t.shape();
        if s.len() != 3 || t.len() != 1 || s[0] != t[0] {
            return Err(FssError::Shape(format!("dense embedding {s:?} and guidance {t:?} disagree")));
        }
        Ok((f_v.reshape(&[s[0], s[1] * s[2]]).permute(&[1, 0]), (s[1], s[2])))
    }

    /// Fused embedding `[width, h, w]`. With `gate_override`, that `[h*w, width]`
    /// tensor replaces the attention-derived gate.
    pub fn forward_with_gate<'g, T: Scalar>(
        &self,
        p: &Bound<'g, T>,
        f_v: Var<'g, T>,
        f_t: Var<'g, T>,
        gate_override: Option<Var<'g, T>>,
    ) -> Result<Var<'g, T>> {
        let (seq, (h, w)) = self.check(&f_v, &f_t)?;
        let gate = match gate_override {
            Some(g) => g,
            None => self.gate(p, f_v, f_t)?,
        };
        let reduced = Self::apply(p, seq, self.reduce);
        let fused = Self::apply(p, Self::apply(p, reduced.mul(gate), self.out1), self.out2);
        Ok(fused.permute(&[1, 0]).reshape(&[self.width, h, w]))
    }

    pub fn forward<'g, T: Scalar>(&self, p: &Bound<'g, T>, f_v: Var<'g, T>, f_t: Var<'g, T>) -> Result<Var<'g, T>> {
        self.forward_with_gate(p, f_v, f_t, None)
    }
}

/// Two 3x3 convolutions, each followed by group norm and ReLU.
#[derive(Clone, Debug)]
struct ConvBlock {
    convs: [(ParamId, ParamId, ParamId, ParamId); 2],
}

impl ConvBlock {
    fn new<T: Scalar>(store: &mut ParamStore<T>, prefix: &str, in_ch: usize, out_ch: usize, rng: &mut impl Rng) -> Self {
        let mut make = |i: usize, cin: usize| {
            let (w, b) = conv_params(store, &format!("{prefix}.conv{i}"), out_ch, cin, 3, rng);
            let (g, bt) = norm_params(store, &format!("{prefix}.norm{i}"), out_ch);
            (w, b, g, bt)
        };
        let first = make(0, in_ch);
        let second = make(1, out_ch);
        Self { convs: [first, second] }
    }

    fn forward<'g, T: Scalar>(&self, p: &Bound<'g, T>, x: Var<'g, T>, groups: usize) -> Var<'g, T> {
        let mut v = x;
        for &(w, b, g, bt) in &self.convs {
            let s = v.shape();
            let y = v.reshape(&[1, s[0], s[1], s[2]]).conv2d(p.var(w), Some(p.var(b)), 1, 1);
            let ys = y.shape();
            v = y.reshape(&[ys[1], ys[2], ys[3]]).group_norm(groups, p.var(g), p.var(bt), T::of(GN_EPS)).relu();
        }
        v
    }
}

/// Decoder parameters.
#[derive(Clone, Debug)]
pub struct Decoder {
    config: DecoderConfig,
    pub eiu: Eiu,
    shallow1: Affine,
    shallow2: Affine,
    levels: Vec<ConvBlock>,
    head: Affine,
}

impl Decoder {
    /// `embed_dim`: width of `f_v`; `agg_channels`: width of aggregated maps;
    /// `stage_channels`: widths of query stage-1 and stage-2 features.
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        config: DecoderConfig,
        embed_dim: usize,
        agg_channels: usize,
        stage_channels: [usize; 2],
        rng: &mut impl Rng,
    ) -> Result<Self> {
        if config.level_channels.iter().any(|c| c % config.groups != 0) {
            return Err(FssError::Validation("decoder widths must be divisible by the group count".into()));
        }
        let eiu = Eiu::new(store, embed_dim, config.embed_out, config.heads, rng)?;
        let [s1, s2] = config.shallow_channels;
        let shallow1 = linear_params(store, "decoder.shallow1", s1, stage_channels[0], rng);
        let shallow2 = linear_params(store, "decoder.shallow2", s2, stage_channels[1], rng);
        let lc = config.level_channels;
        let inputs = [config.embed_out + agg_channels, lc[0] + agg_channels, lc[1] + agg_channels + s2, lc[2] + s1];
        let levels = (0..4).map(|i| ConvBlock::new(store, &format!("decoder.level{}", 4 - i), inputs[i], lc[i], rng)).collect();
        let head = linear_params(store, "decoder.head", 2, lc[3], rng);
        Ok(Self { config, eiu, shallow1, shallow2, levels, head })
    }

    pub fn config(&self) -> &DecoderConfig {
        &self.config
    }

    /// Logits `[2, out_h, out_w]` (channel 0 background, 1 foreground).
    #[allow(clippy::too_many_arguments)]
    pub fn decode<'g, T: Scalar>(
        &self,
        p: &Bound<'g, T>,
        f_vt: Var<'g, T>,
        agg: &AggregatedFeatures<'g, T>,
        f_q1: Var<'g, T>,
        f_q2: Var<'g, T>,
        out_dims: (usize, usize),
    ) -> Result<Var<'g, T>> {
        let dims = |v: &Var<'g, T>| {
            let s = v.shape();
            (s[1], s[2])
        };
        let (d4, d3, d2, d1) = (dims(&agg.stage4), dims(&agg.stage3), dims(&agg.stage2), dims(&f_q1));
        if dims(&f_vt) != d4 || dims(&f_q2) != d2 {
            return Err(FssError::Shape(format!(
                "inconsistent decoder inputs: f_vt {:?} vs stage 4 {d4:?}, f_q2 {:?} vs stage 2 {d2:?}",
                dims(&f_vt),
                dims(&f_q2)
            )));
        }
        if d1.0 < d2.0 || d1.1 < d2.1 || d2.0 < d3.0 || d2.1 < d3.1 || d3.0 < d4.0 || d3.1 < d4.1 {
            return Err(FssError::Shape(format!("stage dims {d1:?} {d2:?} {d3:?} {d4:?} are not a pyramid")));
        }
        let g = self.config.groups;
        let x = self.levels[0].forward(p, Var::concat(&[f_vt, agg.stage4], 0), g);
        let x = x.upsample_bilinear(d3.0, d3.1);
        let x = self.levels[1].forward(p, Var::concat(&[x, agg.stage3], 0), g);
        let x = x.upsample_bilinear(d2.0, d2.1);
        let t2 = pointwise(f_q2, p.var(self.shallow2.0), p.var(self.shallow2.1));
        let x = self.levels[2].forward(p, Var::concat(&[x, agg.stage2, t2], 0), g);
        let x = x.upsample_bilinear(d1.0, d1.1);
        let t1 = pointwise(f_q1, p.var(self.shallow1.0), p.var(self.shallow1.1));
        let x = self.levels[3].forward(p, Var::concat(&[x, t1], 0), g);
        let logits = pointwise(x, p.var(self.head.0), p.var(self.head.1));
        Ok(logits.upsample_bilinear(out_dims.0, out_dims.1))
    }
}

/// Per-pixel argmax of `[2, H, W]` logits; ties go to background.
pub fn predict_mask<T: Scalar>(logits: &Tensor<T>) -> Result<Mask> {
    let s = logits.shape();
    if s.len() != 3 || s[0] != 2 {
        return Err(FssError::Shape(format!("expected [2, H, W] logits, got {s:?}")));
    }
    let plane = s[1] * s[2];
    let (bg, fg) = logits.data().split_at(plane);
    let bytes: Vec<u8> = bg.iter().zip(fg).map(|(b, f)| u8::from(f > b)).collect();
    Mask::from_bytes(s[1], s[2], &bytes)
}
