//! Spatial correction of deep correlation volumes.
//!
//! A volume `[L, h, w, h', w']` is read as a batch of `L` feature maps over the
//! query grid whose channels are the `h' * w'` support positions. It is refined
//! by a depth-wise local residual, then by a layer-normalized MLP residual that
//! mixes all support positions at each query position.

use rand::Rng;

use crate::autodiff::{Graph, Var};
use crate::correlation::Correlation4D;
use crate::error::{FssError, Result};
use crate::nn::{linear_params, norm_params, Bound, ParamId, ParamStore};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub const LN_EPS: f64 = 1e-5;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct HscuConfig {
    /// Depth-wise kernel size (odd).
    pub kernel: usize,
    /// MLP hidden width as a multiple of `h' * w'`.
    pub expansion: usize,
}

impl Default for HscuConfig {
    fn default() -> Self {
        Self { kernel: 3, expansion: 4 }
    }
}

/// `[L, h, w, h', w'] -> [L, h' * w', h, w]`; entry `(l, y, x, y', x')` lands at `(l, y' * w' + x', y, x)`.
pub fn reshape_to_pseudo_feature<T: Scalar>(c: &Correlation4D<T>) -> Tensor<T> {
    let s = c.tensor.shape();
    c.tensor.permute(&[0, 3, 4, 1, 2]).into_reshape(&[s[0], s[3] * s[4], s[1], s[2]]).unwrap()
}

/// Inverse of [`reshape_to_pseudo_feature`].
pub fn from_pseudo_feature<T: Scalar>(x: &Tensor<T>, support_dims: (usize, usize), stage: usize) -> Result<Correlation4D<T>> {
    let s = x.shape();
    if s.len() != 4 || s[1] != support_dims.0 * support_dims.1 {
        return Err(FssError::Shape(format!("pseudo-feature {s:?} does not match support dims {support_dims:?}")));
    }
    let t = x.reshape(&[s[0], support_dims.0, support_dims.1, s[2], s[3]])?.permute(&[0, 3, 4, 1, 2]);
    Correlation4D::new(t, stage)
}

/// Parameters of one correction unit (one per served stage).
#[derive(Clone, Debug)]
pub struct Hscu {
    stage: usize,
    support_dims: (usize, usize),
    kernel: usize,
    dw_weight: ParamId,
    dw_bias: ParamId,
    ln_gamma: ParamId,
    ln_beta: ParamId,
    fc1: (ParamId, ParamId),
    fc2: (ParamId, ParamId),
}

impl Hscu {
    /// Registers parameters under `hscu.stage{stage}`. The depth-wise kernel and
    /// the last MLP layer start at zero so the unit is initially the identity.
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        stage: usize,
        support_dims: (usize, usize),
        config: HscuConfig,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        if !(3..=4).contains(&stage) {
            return Err(FssError::Contract(format!("spatial correction serves stages 3 and 4, not {stage}")));
        }
        if config.kernel % 2 == 0 {
            return Err(FssError::Contract(format!("depth-wise kernel must be odd, got {}", config.kernel)));
        }
        let width = support_dims.0 * support_dims.1;
        let hidden = width * config.expansion;
        let p = format!("hscu.stage{stage}");
        let k = config.kernel;
        let dw_weight = store.add(format!("{p}.dwconv.weight"), Tensor::zeros(&[width, k, k]));
        let dw_bias = store.add(format!("{p}.dwconv.bias"), Tensor::zeros(&[width]));
        let (ln_gamma, ln_beta) = norm_params(store, &format!("{p}.norm"), width);
        let fc1 = linear_params(store, &format!("{p}.mlp.fc1"), hidden, width, rng);
        let fc2 = (
            store.add(format!("{p}.mlp.fc2.weight"), Tensor::zeros(&[width, hidden])),
            store.add(format!("{p}.mlp.fc2.bias"), Tensor::zeros(&[width])),
        );
        Ok(Self { stage, support_dims, kernel: k, dw_weight, dw_bias, ln_gamma, ln_beta, fc1, fc2 })
    }

    pub fn stage(&self) -> usize {
        self.stage
    }

    pub fn width(&self) -> usize {
        self.support_dims.0 * self.support_dims.1
    }

    /// Identifiers of every parameter of the unit.
    pub fn param_ids(&self) -> Vec<ParamId> {
        vec![self.dw_weight, self.dw_bias, self.ln_gamma, self.ln_beta, self.fc1.0, self.fc1.1, self.fc2.0, self.fc2.1]
    }

    fn check_width(&self, channels: usize) -> Result<()> {
        if channels != self.width() {
            return Err(FssError::Shape(format!("pseudo-feature has {channels} channels, unit expects {}", self.width())));
        }
        Ok(())
    }

    /// `x + DWConv(x)` on a pseudo-feature `[L, h'w', h, w]`.
    pub fn local_correct<'g, T: Scalar>(&self, p: &Bound<'g, T>, x: Var<'g, T>) -> Result<Var<'g, T>> {
        self.check_width(x.shape()[1])?;
        let pad = self.kernel / 2;
        Ok(x.add(x.depthwise_conv2d(p.var(self.dw_weight), Some(p.var(self.dw_bias)), pad)))
    }

    /// `x + MLP(LN(x))` along the support axis of a pseudo-feature `[L, h'w', h, w]`.
    pub fn global_correct<'g, T: Scalar>(&self, p: &Bound<'g, T>, x: Var<'g, T>) -> Result<Var<'g, T>> {
        let s = x.shape();
        self.check_width(s[1])?;
        let (l, c, h, w) = (s[0], s[1], s[2], s[3]);
        let rows = x.permute(&[0, 2, 3, 1]).reshape(&[l * h * w, c]);
        let y = rows
            .layer_norm(p.var(self.ln_gamma), p.var(self.ln_beta), T::of(LN_EPS))
            .linear(p.var(self.fc1.0), Some(p.var(self.fc1.1)))
            .gelu()
            .linear(p.var(self.fc2.0), Some(p.var(self.fc2.1)));
        Ok(x.add(y.reshape(&[l, h, w, c]).permute(&[0, 3, 1, 2])))
    }

    /// Refines a volume `[L, h, w, h', w']` on the tape.
    pub fn correct_var<'g, T: Scalar>(&self, p: &Bound<'g, T>, volume: Var<'g, T>) -> Result<Var<'g, T>> {
        let s = volume.shape();
        if s.len() != 5 || (s[3], s[4]) != self.support_dims {
            return Err(FssError::Shape(format!("volume {s:?} does not match support dims {:?}", self.support_dims)));
        }
        let (l, h, w, hs, ws) = (s[0], s[1], s[2], s[3], s[4]);
        let x = volume.permute(&[0, 3, 4, 1, 2]).reshape(&[l, hs * ws, h, w]);
        let x = self.local_correct(p, x)?;
        let x = self.global_correct(p, x)?;
        Ok(x.reshape(&[l, hs, ws, h, w]).permute(&[0, 3, 4, 1, 2]))
    }

    /// Forward-only refinement of a stage-3 or stage-4 volume.
    pub fn correct<T: Scalar>(&self, store: &ParamStore<T>, c: &Correlation4D<T>) -> Result<Correlation4D<T>> {
        if c.stage != self.stage {
            return Err(FssError::Contract(format!("unit for stage {} given a stage-{} volume", self.stage, c.stage)));
        }
        let g = Graph::new();
        let p = store.bind(&g);
        let out = self.correct_var(&p, g.constant(c.tensor.clone()))?;
        Correlation4D::new(out.value().as_ref().clone(), c.stage)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn volume(shape: &[usize], seed: u64) -> Tensor<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::from_fn(shape, |_| rng.gen_range(0.0..1.0))
    }

    #[test]
    fn pseudo_feature_index_law_and_round_trip() {
        let c = Correlation4D::new(volume(&[1, 2, 2, 2, 2], 1), 4).unwrap();
        let x = reshape_to_pseudo_feature(&c);
        assert_eq!(x.shape(), &[1, 4, 2, 2]);
        let r = Correlation4D::new(volume(&[3, 2, 3, 4, 5], 2), 4).unwrap();
        let xr = reshape_to_pseudo_feature(&r);
        for (l, y, xx, ys, xs) in [(0, 1, 2, 3, 4), (2, 0, 1, 1, 0), (1, 1, 0, 2, 3)] {
            assert_eq!(xr.get(&[l, ys * 5 + xs, y, xx]), r.tensor.get(&[l, y, xx, ys, xs]));
        }
        assert_eq!(from_pseudo_feature(&xr, (4, 5), 4).unwrap(), r);
    }

    #[test]
    fn rejects_stage_two_and_even_kernels() {
        let mut store = ParamStore::<f64>::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(matches!(Hscu::new(&mut store, 2, (4, 4), HscuConfig::default(), &mut rng), Err(FssError::Contract(_))));
        let even = HscuConfig { kernel: 2, expansion: 4 };
        assert!(matches!(Hscu::new(&mut store, 4, (2, 2), even, &mut rng), Err(FssError::Contract(_))));
        let unit = Hscu::new(&mut store, 4, (2, 2), HscuConfig::default(), &mut rng).unwrap();
        let c2 = Correlation4D::new(volume(&[2, 2, 2, 2, 2], 3), 2).unwrap();
        assert!(matches!(unit.correct(&store, &c2), Err(FssError::Contract(_))));
    }

    #[test]
    fn identity_at_initialization() {
        let mut store = ParamStore::<f64>::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let unit = Hscu::new(&mut store, 3, (3, 3), HscuConfig::default(), &mut rng).unwrap();
        let c = Correlation4D::new(volume(&[4, 4, 4, 3, 3], 5), 3).unwrap();
        let out = unit.correct(&store, &c).unwrap();
        assert!(out.tensor.max_abs_diff(&c.tensor) <= 1e-12);
    }

    #[test]
    fn identity_kernel_doubles_input() {
        let mut store = ParamStore::<f64>::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let unit = Hscu::new(&mut store, 4, (2, 2), HscuConfig::default(), &mut rng).unwrap();
        let w = store.get_mut(unit.dw_weight);
        for c in 0..4 {
            w.set(&[c, 1, 1], 1.0);
        }
        let g = Graph::new();
        let p = store.bind(&g);
        let x = volume(&[2, 4, 3, 3], 9);
        let y = unit.local_correct(&p, g.constant(x.clone())).unwrap().value();
        assert!(y.max_abs_diff(&x.scale(2.0)) < 1e-15);
        assert!(unit.local_correct(&p, g.constant(volume(&[2, 5, 3, 3], 1))).is_err());
    }

    #[test]
    fn constant_support_axis_gives_position_independent_update() {
        let mut store = ParamStore::<f64>::new();
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let unit = Hscu::new(&mut store, 4, (2, 2), HscuConfig::default(), &mut rng).unwrap();
        // non-trivial output layer and norm shift
        let fc2 = unit.fc2.0;
        *store.get_mut(fc2) = crate::nn::normal(&[4, 16], 0.5, &mut rng);
        *store.get_mut(unit.ln_beta) = Tensor::new(&[4], vec![0.1, -0.2, 0.3, 0.05]).unwrap();
        let g = Graph::new();
        let p = store.bind(&g);
        let x = Tensor::from_fn(&[2, 4, 3, 3], |i| (i[0] * 9 + i[2] * 3 + i[3]) as f64 * 0.1);
        let y = unit.global_correct(&p, g.constant(x.clone())).unwrap().value();
        let delta = y.zip_map(&x, |a, b| a - b);
        let first: Vec<f64> = (0..4).map(|c| delta.get(&[0, c, 0, 0])).collect();
        for l in 0..2 {
            for yy in 0..3 {
                for xx in 0..3 {
                    for c in 0..4 {
                        assert!((delta.get(&[l, c, yy, xx]) - first[c]).abs() < 1e-12);
                    }
                }
            }
        }
    }
}
