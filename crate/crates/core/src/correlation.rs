//! Cosine correlation volumes between query, support and masked-object features.

use crate::encoder::FeaturePyramid;
use crate::error::{FssError, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Lower clamp on vector norms before division.
pub const NORM_FLOOR: f64 = 1e-8;

/// Stacked 4D cost volume `[L, h, w, h', w']`.
#[derive(Clone, Debug, PartialEq)]
pub struct Correlation4D<T: Scalar> {
    pub tensor: Tensor<T>,
    pub stage: usize,
}

impl<T: Scalar> Correlation4D<T> {
    pub fn new(tensor: Tensor<T>, stage: usize) -> Result<Self> {
        if tensor.ndim() != 5 {
            return Err(FssError::Shape(format!("correlation volume must be 5-d, got {:?}", tensor.shape())));
        }
        Ok(Self { tensor, stage })
    }

    pub fn channels(&self) -> usize {
        self.tensor.shape()[0]
    }

    pub fn query_dims(&self) -> (usize, usize) {
        (self.tensor.shape()[1], self.tensor.shape()[2])
    }

    pub fn support_dims(&self) -> (usize, usize) {
        (self.tensor.shape()[3], self.tensor.shape()[4])
    }
}

/// Query-vs-guidance correlation map `[h_4, w_4]`.
#[derive(Clone, Debug, PartialEq)]
pub struct CorrelationVT<T: Scalar> {
    pub map: Tensor<T>,
}

/// Column-normalizes `[c, n]` data; vectors with norm below the floor are
/// divided by the floor, so all-zero columns stay zero.
fn unit_columns<T: Scalar>(x: &[T], c: usize, n: usize) -> Vec<T> {
    let floor = T::of(NORM_FLOOR);
    let mut norms = vec![T::zero(); n];
    for ch in 0..c {
        for (acc, &v) in norms.iter_mut().zip(&x[ch * n..(ch + 1) * n]) {
            *acc += v * v;
        }
    }
    let inv: Vec<T> = norms.into_iter().map(|s| T::one() / s.sqrt().max(floor)).collect();
    let mut out = x.to_vec();
    for ch in 0..c {
        for (v, &s) in out[ch * n..(ch + 1) * n].iter_mut().zip(&inv) {
            *v *= s;
        }
    }
    out
}

/// `ReLU(cos)` between every column of `a: [c, n]` and every column of `b: [c, m]`, as `[n, m]`.
fn relu_cosine<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Vec<T>> {
    let (c, c2) = (a.shape()[0], b.shape()[0]);
    if c != c2 {
        return Err(FssError::Shape(format!("channel mismatch: {c} vs {c2}")));
    }
    let n = a.len() / c.max(1);
    let m = b.len() / c.max(1);
    let an = unit_columns(a.data(), c, n);
    let bn = unit_columns(b.data(), c, m);
    let mut out = vec![T::zero(); n * m];
    T::gemm(n, c, m, T::one(), &an, (1, n as isize), &bn, (m as isize, 1), T::zero(), &mut out, (m as isize, 1));
    for v in &mut out {
        // cosine of unit vectors can exceed 1 by rounding
        *v = v.max(T::zero()).min(T::one());
    }
    Ok(out)
}

/// Rectified cosine between the dense embedding `[c_vt, h, w]` and the guidance vector `[c_vt]`.
pub fn vt_correlation<T: Scalar>(f_v: &Tensor<T>, f_t: &Tensor<T>) -> Result<CorrelationVT<T>> {
    if f_v.ndim() != 3 || f_t.ndim() != 1 {
        return Err(FssError::Shape(format!("expected [c, h, w] and [c], got {:?} and {:?}", f_v.shape(), f_t.shape())));
    }
    if f_v.shape()[0] != f_t.shape()[0] {
        return Err(FssError::Shape(format!("channel mismatch: {} vs {}", f_v.shape()[0], f_t.shape()[0])));
    }
    let norm = f_t.data().iter().map(|&v| v * v).sum::<T>().sqrt();
    if !(norm > T::zero()) {
        return Err(FssError::Validation("guidance embedding has zero norm".into()));
    }
    let (h, w) = (f_v.shape()[1], f_v.shape()[2]);
    let t = f_t.reshape(&[f_t.len(), 1])?;
    let map = relu_cosine(f_v, &t)?;
    Ok(CorrelationVT { map: Tensor::new(&[h, w], map)? })
}

/// Two-channel layer correlation `[2, h, w, h', w']`: channel 0 against the
/// support features, channel 1 against the masked-object features.
pub fn vv_layer_correlation<T: Scalar>(fq: &Tensor<T>, fs: &Tensor<T>, fo: &Tensor<T>) -> Result<Tensor<T>> {
    for (name, t) in [("query", fq), ("support", fs), ("object", fo)] {
        if t.ndim() != 3 {
            return Err(FssError::Shape(format!("{name} feature must be [c, h, w], got {:?}", t.shape())));
        }
    }
    if fs.shape() != fo.shape() {
        return Err(FssError::Shape(format!("support {:?} and object {:?} features differ", fs.shape(), fo.shape())));
    }
    let (h, w) = (fq.shape()[1], fq.shape()[2]);
    let (hs, ws) = (fs.shape()[1], fs.shape()[2]);
    let mut data = relu_cosine(fq, fs)?;
    data.extend(relu_cosine(fq, fo)?);
    Tensor::new(&[2, h, w, hs, ws], data)
}

/// Correlation volumes for stages 2, 3, 4.
#[derive(Clone, Debug, PartialEq)]
pub struct CorrelationPyramid<T: Scalar> {
    volumes: Vec<Correlation4D<T>>,
}

impl<T: Scalar> CorrelationPyramid<T> {
    pub fn from_stages(stage2: Correlation4D<T>, stage3: Correlation4D<T>, stage4: Correlation4D<T>) -> Self {
        Self { volumes: vec![stage2, stage3, stage4] }
    }

    /// Stage `i` in 2..=4.
    pub fn stage(&self, i: usize) -> &Correlation4D<T> {
        &self.volumes[i - 2]
    }

    pub fn into_stages(self) -> (Correlation4D<T>, Correlation4D<T>, Correlation4D<T>) {
        let mut it = self.volumes.into_iter();
        (it.next().unwrap(), it.next().unwrap(), it.next().unwrap())
    }
}

/// Stacks the layer correlations of each stage; layer `l` occupies channels `2l` and `2l + 1`.
pub fn build_correlation_pyramid<T: Scalar>(
    query: &FeaturePyramid<T>,
    support: &FeaturePyramid<T>,
    object: &FeaturePyramid<T>,
) -> Result<CorrelationPyramid<T>> {
    let mut volumes = Vec::with_capacity(3);
    for stage in 2..=4 {
        let (lq, ls, lo) = (query.layers(stage), support.layers(stage), object.layers(stage));
        if lq.len() != ls.len() || lq.len() != lo.len() {
            return Err(FssError::Shape(format!(
                "stage {stage} layer counts differ: query {}, support {}, object {}",
                lq.len(),
                ls.len(),
                lo.len()
            )));
        }
        let per_layer = lq
            .iter()
            .zip(ls)
            .zip(lo)
            .map(|((q, s), o)| vv_layer_correlation(q, s, o))
            .collect::<Result<Vec<_>>>()?;
        let refs: Vec<&Tensor<T>> = per_layer.iter().collect();
        volumes.push(Correlation4D::new(Tensor::concat(&refs, 0)?, stage)?);
    }
    Ok(CorrelationPyramid { volumes })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encoder::{Encoder, EncoderConfig, ProjectionEncoder};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_t(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f64> {
        Tensor::from_fn(shape, |_| rng.gen_range(-1.0..1.0))
    }

    #[test]
    fn vt_trivial_cases() {
        let t = Tensor::<f64>::new(&[3], vec![0.6, 0.8, 0.0]).unwrap();
        let same = Tensor::from_fn(&[3, 2, 2], |i| t.data()[i[0]]);
        assert!(vt_correlation(&same, &t).unwrap().map.data().iter().all(|&v| (v - 1.0).abs() < 1e-12));
        let ortho = Tensor::from_fn(&[3, 2, 2], |i| if i[0] == 2 { 1.0 } else { 0.0 });
        assert!(vt_correlation(&ortho, &t).unwrap().map.data().iter().all(|&v| v == 0.0));
        let mut neg = same.clone();
        for c in 0..3 {
            neg.set(&[c, 1, 0], -t.data()[c]);
        }
        assert_eq!(vt_correlation(&neg, &t).unwrap().map.get(&[1, 0]), 0.0);
        assert!(vt_correlation(&same, &Tensor::zeros(&[3])).is_err());
        assert!(vt_correlation(&same, &Tensor::ones(&[4])).is_err());
    }

    #[test]
    fn vv_self_correlation_has_unit_diagonal() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let f = rand_t(&[4, 3, 3], &mut rng);
        let c = vv_layer_correlation(&f, &f, &Tensor::zeros(&[4, 3, 3])).unwrap();
        for y in 0..3 {
            for x in 0..3 {
                assert!((c.get(&[0, y, x, y, x]) - 1.0).abs() < 1e-12);
            }
        }
        assert!(c.narrow(0, 1, 1).unwrap().data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn pyramid_channel_counts() {
        let cfg = EncoderConfig { layers: [1, 1, 3], ..EncoderConfig::default() };
        let e = ProjectionEncoder::<f64>::stub(cfg).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let img = rand_t(&[3, 64, 64], &mut rng);
        let p = e.encode_image(&img).unwrap();
        let pyr = build_correlation_pyramid(&p, &p, &p).unwrap();
        assert_eq!(pyr.stage(2).channels(), 2);
        assert_eq!(pyr.stage(3).channels(), 2);
        assert_eq!(pyr.stage(4).channels(), 6);
        for stage in 2..=4 {
            let v = pyr.stage(stage);
            let (h, w) = v.query_dims();
            for y in 0..h {
                for x in 0..w {
                    assert!((v.tensor.get(&[0, y, x, y, x]) - 1.0).abs() < 1e-9);
                }
            }
        }
        let other = ProjectionEncoder::<f64>::stub(EncoderConfig::default()).unwrap().encode_image(&img).unwrap();
        assert!(build_correlation_pyramid(&p, &other, &p).is_err());
    }
}
