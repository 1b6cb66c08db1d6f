//! Text-correlation injection and top-down center-pivot 4D aggregation.

use rand::Rng;

use crate::autodiff::{Graph, Var};
use crate::correlation::{Correlation4D, CorrelationVT};
use crate::error::{FssError, Result};
use crate::nn::{he_normal, linear_params, norm_params, Bound, ParamId, ParamStore};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub const GN_EPS: f64 = 1e-5;

/// Repeats the `[h, w]` map over every support position: `[1, h, w, h', w']`.
pub fn broadcast_vt<T: Scalar>(c_vt: &CorrelationVT<T>, support_dims: (usize, usize)) -> Correlation4D<T> {
    let (h, w) = (c_vt.map.shape()[0], c_vt.map.shape()[1]);
    let (hs, ws) = support_dims;
    let t = Tensor::from_fn(&[1, h, w, hs, ws], |i| c_vt.map.get(&[i[1], i[2]]));
    Correlation4D { tensor: t, stage: 4 }
}

/// Appends the broadcast text channel after the visual channels.
pub fn inject<T: Scalar>(visual: &Correlation4D<T>, text: &Correlation4D<T>) -> Result<Correlation4D<T>> {
    if visual.tensor.shape()[1..] != text.tensor.shape()[1..] {
        return Err(FssError::Shape(format!(
            "visual volume {:?} and text volume {:?} differ in geometry",
            visual.tensor.shape(),
            text.tensor.shape()
        )));
    }
    Correlation4D::new(Tensor::concat(&[&visual.tensor, &text.tensor], 0)?, visual.stage)
}

/// Two 2D kernels whose sum is a 4D kernel supported on the two center slices.
#[derive(Clone, Debug, PartialEq)]
pub struct CenterPivotKernel<T: Scalar> {
    /// `[out, in, k, k]` over the query axes.
    pub query_kernel: Tensor<T>,
    pub query_bias: Tensor<T>,
    /// `[out, in, k, k]` over the support axes.
    pub support_kernel: Tensor<T>,
    pub support_bias: Tensor<T>,
    pub query_stride: usize,
    pub support_stride: usize,
}

impl<T: Scalar> CenterPivotKernel<T> {
    pub fn kernel_size(&self) -> usize {
        self.query_kernel.shape()[2]
    }

    fn validate(&self) -> Result<()> {
        let (q, s) = (self.query_kernel.shape(), self.support_kernel.shape());
        if q.len() != 4 || q != s || q[2] != q[3] {
            return Err(FssError::Shape(format!("center-pivot kernels {q:?} / {s:?} must be equal square 4-d")));
        }
        if q[2] % 2 == 0 {
            return Err(FssError::Contract(format!("center-pivot kernel size must be odd, got {}", q[2])));
        }
        if self.query_stride == 0 || self.support_stride == 0 {
            return Err(FssError::Contract("strides must be positive".into()));
        }
        Ok(())
    }
}

/// Center-pivot 4D convolution on the tape, `x: [c_in, h, w, h', w']`.
///
/// The query branch convolves `(h, w)` at support positions `0, s', 2s', ...`;
/// the support branch convolves `(h', w')` at query positions `0, s, 2s, ...`.
/// Both use same-padding `k / 2`.
#[allow(clippy::too_many_arguments)]
pub fn center_pivot_conv4d_var<'g, T: Scalar>(
    x: Var<'g, T>,
    query_kernel: Var<'g, T>,
    query_bias: Var<'g, T>,
    support_kernel: Var<'g, T>,
    support_bias: Var<'g, T>,
    query_stride: usize,
    support_stride: usize,
) -> Var<'g, T> {
    let k = query_kernel.shape()[2];
    let pad = k / 2;
    let o = query_kernel.shape()[0];

    let pruned = x.subsample(3, support_stride).subsample(4, support_stride);
    let s = pruned.shape();
    let (c, hs, ws) = (s[0], s[3], s[4]);
    let q = pruned
        .permute(&[3, 4, 0, 1, 2])
        .reshape(&[hs * ws, c, s[1], s[2]])
        .conv2d(query_kernel, Some(query_bias), query_stride, pad);
    let qs = q.shape();
    let q = q.reshape(&[hs, ws, o, qs[2], qs[3]]).permute(&[2, 3, 4, 0, 1]);

    let pruned = x.subsample(1, query_stride).subsample(2, query_stride);
    let s = pruned.shape();
    let (hq, wq) = (s[1], s[2]);
    let sup = pruned
        .permute(&[1, 2, 0, 3, 4])
        .reshape(&[hq * wq, c, s[3], s[4]])
        .conv2d(support_kernel, Some(support_bias), support_stride, pad);
    let ss = sup.shape();
    let sup = sup.reshape(&[hq, wq, o, ss[2], ss[3]]).permute(&[2, 0, 1, 3, 4]);
    q.add(sup)
}

/// Forward-only center-pivot convolution.
pub fn center_pivot_conv4d<T: Scalar>(x: &Tensor<T>, kernel: &CenterPivotKernel<T>) -> Result<Tensor<T>> {
    kernel.validate()?;
    if x.ndim() != 5 || x.shape()[0] != kernel.query_kernel.shape()[1] {
        return Err(FssError::Shape(format!("input {:?} incompatible with kernel {:?}", x.shape(), kernel.query_kernel.shape())));
    }
    let g = Graph::new();
    let out = center_pivot_conv4d_var(
        g.constant(x.clone()),
        g.constant(kernel.query_kernel.clone()),
        g.constant(kernel.query_bias.clone()),
        g.constant(kernel.support_kernel.clone()),
        g.constant(kernel.support_bias.clone()),
        kernel.query_stride,
        kernel.support_stride,
    );
    let v = out.value();
    Ok(v.as_ref().clone())
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct AggregationConfig {
    pub kernel: usize,
    /// Width of intermediate blocks.
    pub hidden: usize,
    pub out_channels: usize,
    pub groups: usize,
    /// Minimum blocks per stage.
    pub min_blocks: usize,
    /// Target support size after strided reduction.
    pub support_target: usize,
}

impl Default for AggregationConfig {
    fn default() -> Self {
        Self { kernel: 3, hidden: 32, out_channels: 128, groups: 4, min_blocks: 2, support_target: 2 }
    }
}

/// Center-pivot conv, group norm, ReLU.
#[derive(Clone, Debug)]
struct CpBlock {
    qk: ParamId,
    qb: ParamId,
    sk: ParamId,
    sb: ParamId,
    gamma: ParamId,
    beta: ParamId,
    support_stride: usize,
}

impl CpBlock {
    fn forward<'g, T: Scalar>(&self, p: &Bound<'g, T>, x: Var<'g, T>, groups: usize) -> Var<'g, T> {
        center_pivot_conv4d_var(x, p.var(self.qk), p.var(self.qb), p.var(self.sk), p.var(self.sb), 1, self.support_stride)
            .group_norm(groups, p.var(self.gamma), p.var(self.beta), T::of(GN_EPS))
            .relu()
    }
}

/// Geometry of one stage's correlation volume.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct StageGeometry {
    pub channels: usize,
    pub query_dims: (usize, usize),
    pub support_dims: (usize, usize),
}

#[derive(Clone, Debug)]
struct StageEncoder {
    blocks: Vec<CpBlock>,
}

/// Multi-scale aggregator producing `[out, h_i, w_i]` maps for stages 2, 3, 4.
#[derive(Clone, Debug)]
pub struct Aggregator {
    config: AggregationConfig,
    geometry: [StageGeometry; 3],
    stages: Vec<StageEncoder>,
    /// Top-down merges into stages 3 and 2 (index 0: 4 -> 3, index 1: 3 -> 2).
    mixers: Vec<(ParamId, ParamId)>,
}

/// Number of stride-2 steps (ceil halving) to bring `d` down to `target`.
fn reduction_steps(mut d: usize, target: usize) -> usize {
    let mut n = 0;
    while d > target {
        d = d.div_ceil(2);
        n += 1;
    }
    n
}

/// Aggregated 2D maps for stages 2, 3, 4.
pub struct AggregatedFeatures<'g, T: Scalar> {
    pub stage2: Var<'g, T>,
    pub stage3: Var<'g, T>,
    pub stage4: Var<'g, T>,
}

impl Aggregator {
    /// `geometry` lists stages 2, 3, 4 (stage 4 already including the text channel).
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        config: AggregationConfig,
        geometry: [StageGeometry; 3],
        rng: &mut impl Rng,
    ) -> Result<Self> {
        if config.kernel % 2 == 0 {
            return Err(FssError::Contract(format!("center-pivot kernel size must be odd, got {}", config.kernel)));
        }
        if config.hidden % config.groups != 0 || config.out_channels % config.groups != 0 {
            return Err(FssError::Validation("block widths must be divisible by the group count".into()));
        }
        let k = config.kernel;
        let mut stages = Vec::new();
        for (si, geo) in geometry.iter().enumerate() {
            let stage = si + 2;
            let steps = reduction_steps(geo.support_dims.0.max(geo.support_dims.1), config.support_target);
            let n_blocks = steps.max(config.min_blocks);
            let mut blocks = Vec::new();
            let mut in_ch = geo.channels;
            for b in 0..n_blocks {
                let out_ch = if b + 1 == n_blocks { config.out_channels } else { config.hidden };
                let prefix = format!("aggregation.stage{stage}.block{b}");
                let fan_in = in_ch * k * k;
                let qk = store.add(format!("{prefix}.query.weight"), he_normal(&[out_ch, in_ch, k, k], 2 * fan_in, rng));
                let qb = store.add(format!("{prefix}.query.bias"), Tensor::zeros(&[out_ch]));
                let sk = store.add(format!("{prefix}.support.weight"), he_normal(&[out_ch, in_ch, k, k], 2 * fan_in, rng));
                let sb = store.add(format!("{prefix}.support.bias"), Tensor::zeros(&[out_ch]));
                let (gamma, beta) = norm_params(store, &format!("{prefix}.norm"), out_ch);
                blocks.push(CpBlock { qk, qb, sk, sb, gamma, beta, support_stride: if b < steps { 2 } else { 1 } });
                in_ch = out_ch;
            }
            stages.push(StageEncoder { blocks });
        }
        let c = config.out_channels;
        let mixers = (0..2)
            .map(|i| linear_params(store, &format!("aggregation.mix{}to{}", 4 - i, 3 - i), c, c, rng))
            .collect();
        Ok(Self { config, geometry, stages, mixers })
    }

    pub fn config(&self) -> &AggregationConfig {
        &self.config
    }

    /// Parameters of the first block of `stage` (for targeted gradient checks).
    pub fn first_block_params(&self, stage: usize) -> Vec<ParamId> {
        let b = &self.stages[stage - 2].blocks[0];
        vec![b.qk, b.qb, b.sk, b.sb, b.gamma, b.beta]
    }

    fn encode_stage<'g, T: Scalar>(&self, p: &Bound<'g, T>, stage: usize, x: Var<'g, T>) -> Result<Var<'g, T>> {
        let geo = self.geometry[stage - 2];
        let s = x.shape();
        if s.len() != 5 || s[0] != geo.channels || (s[1], s[2]) != geo.query_dims || (s[3], s[4]) != geo.support_dims {
            return Err(FssError::Shape(format!("stage {stage} volume {s:?} does not match configured geometry {geo:?}")));
        }
        let mut v = x;
        for b in &self.stages[stage - 2].blocks {
            v = b.forward(p, v, self.config.groups);
        }
        Ok(v)
    }

    /// Resizes the query axes of `v: [c, h, w, h', w']` and mixes channels with a linear map.
    fn top_down<'g, T: Scalar>(&self, p: &Bound<'g, T>, v: Var<'g, T>, to: (usize, usize), mixer: (ParamId, ParamId)) -> Var<'g, T> {
        let s = v.shape();
        let (c, hs, ws) = (s[0], s[3], s[4]);
        let up = v.permute(&[0, 3, 4, 1, 2]).upsample_bilinear(to.0, to.1);
        let n = to.0 * to.1 * hs * ws;
        up.permute(&[0, 3, 4, 1, 2])
            .reshape(&[c, n])
            .permute(&[1, 0])
            .linear(p.var(mixer.0), Some(p.var(mixer.1)))
            .permute(&[1, 0])
            .reshape(&[c, to.0, to.1, hs, ws])
    }

    /// Top-down aggregation of stage volumes 2, 3, 4; returns per-stage 2D maps.
    pub fn aggregate<'g, T: Scalar>(
        &self,
        p: &Bound<'g, T>,
        stage2: Var<'g, T>,
        stage3: Var<'g, T>,
        stage4: Var<'g, T>,
    ) -> Result<AggregatedFeatures<'g, T>> {
        let v4 = self.encode_stage(p, 4, stage4)?;
        let v3 = self.encode_stage(p, 3, stage3)?;
        let v3 = v3.add(self.merge_checked(p, v4, &v3, self.mixers[0])?);
        let v2 = self.encode_stage(p, 2, stage2)?;
        let v2 = v2.add(self.merge_checked(p, v3, &v2, self.mixers[1])?);
        Ok(AggregatedFeatures { stage2: v2.mean_trailing(2), stage3: v3.mean_trailing(2), stage4: v4.mean_trailing(2) })
    }

    fn merge_checked<'g, T: Scalar>(
        &self,
        p: &Bound<'g, T>,
        higher: Var<'g, T>,
        lower: &Var<'g, T>,
        mixer: (ParamId, ParamId),
    ) -> Result<Var<'g, T>> {
        let (hs, ls) = (higher.shape(), lower.shape());
        if hs[3..] != ls[3..] {
            return Err(FssError::Shape(format!("reduced support dims differ across stages: {hs:?} vs {ls:?}")));
        }
        Ok(self.top_down(p, higher, (ls[1], ls[2]), mixer))
    }
}

/// Forward-only aggregation of a full pyramid.
pub fn aggregate_pyramid<T: Scalar>(
    aggregator: &Aggregator,
    store: &ParamStore<T>,
    volumes: &[Option<&Correlation4D<T>>; 3],
) -> Result<[Tensor<T>; 3]> {
    let vols: Vec<&Correlation4D<T>> = volumes
        .iter()
        .enumerate()
        .map(|(i, v)| v.ok_or_else(|| FssError::Contract(format!("stage {} volume missing", i + 2))))
        .collect::<Result<_>>()?;
    let g = Graph::new();
    let p = store.bind(&g);
    let f = aggregator.aggregate(&p, g.constant(vols[0].tensor.clone()), g.constant(vols[1].tensor.clone()), g.constant(vols[2].tensor.clone()))?;
    Ok([f.stage2.value().as_ref().clone(), f.stage3.value().as_ref().clone(), f.stage4.value().as_ref().clone()])
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn broadcast_and_inject() {
        let map = Tensor::new(&[2, 2], vec![0.1, 0.2, 0.3, 0.4]).unwrap();
        let b = broadcast_vt(&CorrelationVT { map: map.clone() }, (2, 2));
        for ys in 0..2 {
            for xs in 0..2 {
                for y in 0..2 {
                    for x in 0..2 {
                        assert_eq!(b.tensor.get(&[0, y, x, ys, xs]), map.get(&[y, x]));
                    }
                }
            }
        }
        let half = broadcast_vt(&CorrelationVT { map: Tensor::<f64>::full(&[2, 2], 0.5) }, (2, 2));
        assert_eq!(half.tensor.len(), 16);
        assert!(half.tensor.data().iter().all(|&v| v == 0.5));

        let visual = Correlation4D::new(Tensor::from_fn(&[6, 2, 2, 2, 2], |i| i.iter().sum::<usize>() as f64), 4).unwrap();
        let joined = inject(&visual, &b).unwrap();
        assert_eq!(joined.channels(), 7);
        assert_eq!(joined.tensor.narrow(0, 0, 6).unwrap(), visual.tensor);
        assert_eq!(joined.tensor.narrow(0, 6, 1).unwrap(), b.tensor);
        let wrong = broadcast_vt(&CorrelationVT { map: Tensor::<f64>::zeros(&[2, 2]) }, (3, 2));
        assert!(inject(&visual, &wrong).is_err());
    }

    #[test]
    fn even_kernels_are_rejected() {
        let k = CenterPivotKernel {
            query_kernel: Tensor::<f64>::zeros(&[1, 1, 2, 2]),
            query_bias: Tensor::zeros(&[1]),
            support_kernel: Tensor::zeros(&[1, 1, 2, 2]),
            support_bias: Tensor::zeros(&[1]),
            query_stride: 1,
            support_stride: 1,
        };
        assert!(matches!(center_pivot_conv4d(&Tensor::zeros(&[1, 2, 2, 2, 2]), &k), Err(FssError::Contract(_))));
    }

    #[test]
    fn zero_support_kernel_gives_pointwise_query_conv() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = Tensor::<f64>::from_fn(&[2, 3, 3, 2, 2], |_| rng.gen_range(-1.0..1.0));
        let qk = Tensor::from_fn(&[1, 2, 3, 3], |_| rng.gen_range(-1.0..1.0));
        let k = CenterPivotKernel {
            query_kernel: qk.clone(),
            query_bias: Tensor::zeros(&[1]),
            support_kernel: Tensor::zeros(&[1, 2, 3, 3]),
            support_bias: Tensor::zeros(&[1]),
            query_stride: 1,
            support_stride: 1,
        };
        let y = center_pivot_conv4d(&x, &k).unwrap();
        // each support position is an independent 2D convolution of its query slice
        for ys in 0..2 {
            for xs in 0..2 {
                let slice = Tensor::from_fn(&[1, 2, 3, 3], |i| x.get(&[i[1], i[2], i[3], ys, xs]));
                let g = Graph::new();
                let expect = g.constant(slice).conv2d(g.constant(qk.clone()), None, 1, 1).value();
                for yy in 0..3 {
                    for xx in 0..3 {
                        assert!((y.get(&[0, yy, xx, ys, xs]) - expect.get(&[0, 0, yy, xx])).abs() < 1e-12);
                    }
                }
            }
        }
    }

    #[test]
    fn reduction_schedule() {
        assert_eq!(reduction_steps(2, 2), 0);
        assert_eq!(reduction_steps(8, 2), 2);
        assert_eq!(reduction_steps(13, 2), 3);
        assert_eq!(reduction_steps(25, 2), 4);
    }

    fn tiny_aggregator(store: &mut ParamStore<f64>) -> Aggregator {
        let geo = |c, d| StageGeometry { channels: c, query_dims: (d, d), support_dims: (d, d) };
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let cfg = AggregationConfig { hidden: 8, out_channels: 128, ..AggregationConfig::default() };
        Aggregator::new(store, cfg, [geo(4, 8), geo(6, 4), geo(5, 2)], &mut rng).unwrap()
    }

    #[test]
    fn aggregate_shapes_and_zero_input_stability() {
        let mut store = ParamStore::new();
        let agg = tiny_aggregator(&mut store);
        let c2 = Correlation4D::new(Tensor::zeros(&[4, 8, 8, 8, 8]), 2).unwrap();
        let c3 = Correlation4D::new(Tensor::zeros(&[6, 4, 4, 4, 4]), 3).unwrap();
        let c4 = Correlation4D::new(Tensor::zeros(&[5, 2, 2, 2, 2]), 4).unwrap();
        let [f2, f3, f4] = aggregate_pyramid(&agg, &store, &[Some(&c2), Some(&c3), Some(&c4)]).unwrap();
        assert_eq!(f2.shape(), &[128, 8, 8]);
        assert_eq!(f3.shape(), &[128, 4, 4]);
        assert_eq!(f4.shape(), &[128, 2, 2]);
        assert!(f2.is_finite() && f3.is_finite() && f4.is_finite());
        assert!(matches!(aggregate_pyramid(&agg, &store, &[Some(&c2), None, Some(&c4)]), Err(FssError::Contract(_))));
    }

    #[test]
    fn compress_is_a_mean_over_support() {
        let g = Graph::<f64>::new();
        let v = g.constant(Tensor::new(&[1, 1, 1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap());
        assert_eq!(v.mean_trailing(2).value().data(), &[2.5]);
    }
}
