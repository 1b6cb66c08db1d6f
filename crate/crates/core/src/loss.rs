//! Cross-entropy plus soft Dice segmentation loss.

use crate::autodiff::Var;
use crate::error::{FssError, Result};
use crate::mask::Mask;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Dice smoothing constant.
pub const DICE_EPS: f64 = 1.0;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossTerms {
    pub cross_entropy: f64,
    pub dice: f64,
}

impl LossTerms {
    pub fn total(&self) -> f64 {
        self.cross_entropy + self.dice
    }
}

/// `ln(1 + e^x)` without overflow.
fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn check<T: Scalar>(logits: &Tensor<T>, gt: &Mask) -> Result<()> {
    let s = logits.shape();
    if s.len() != 3 || s[0] != 2 || (s[1], s[2]) != gt.dims() {
        return Err(FssError::Shape(format!("logits {s:?} vs ground truth {:?}", gt.dims())));
    }
    if logits.has_nan() {
        return Err(FssError::Validation("logits contain NaN".into()));
    }
    Ok(())
}

/// Foreground margins `l_fg - l_bg` per pixel.
fn margins<T: Scalar>(logits: &Tensor<T>) -> Vec<f64> {
    let plane = logits.len() / 2;
    let (bg, fg) = logits.data().split_at(plane);
    bg.iter().zip(fg).map(|(&b, &f)| f.as_f64() - b.as_f64()).collect()
}

/// Mean two-class cross-entropy and soft Dice on the foreground probability.
pub fn segmentation_loss<T: Scalar>(logits: &Tensor<T>, gt: &Mask) -> Result<LossTerms> {
    check(logits, gt)?;
    let d = margins(logits);
    let mut ce = 0.0;
    let (mut inter, mut sum_p, mut sum_g) = (0.0, 0.0, 0.0);
    for (i, (&m, &g)) in d.iter().zip(gt.as_bytes()).enumerate() {
        let g = g as f64;
        // -ln p(gt) = softplus(l_other - l_gt), folded into a running mean
        let term = if g > 0.5 { softplus(-m) } else { softplus(m) };
        ce += (term - ce) / (i + 1) as f64;
        let p = sigmoid(m);
        inter += p * g;
        sum_p += p;
        sum_g += g;
    }
    let dice = 1.0 - (2.0 * inter + DICE_EPS) / (sum_p + sum_g + DICE_EPS);
    Ok(LossTerms { cross_entropy: ce, dice })
}

/// [`segmentation_loss`] total as a scalar on the tape of `logits`.
pub fn segmentation_loss_var<'g, T: Scalar>(logits: Var<'g, T>, gt: &Mask) -> Result<Var<'g, T>> {
    let value = logits.value();
    let terms = segmentation_loss(&value, gt)?;
    let d = margins(&value);
    let n = d.len() as f64;
    let g: Vec<f64> = gt.as_bytes().iter().map(|&b| b as f64).collect();
    let p: Vec<f64> = d.iter().map(|&m| sigmoid(m)).collect();
    let inter: f64 = p.iter().zip(&g).map(|(a, b)| a * b).sum();
    let denom = p.iter().sum::<f64>() + g.iter().sum::<f64>() + DICE_EPS;
    let numer = 2.0 * inter + DICE_EPS;
    // dL/dm per pixel: cross-entropy (p - g)/n plus Dice through dp/dm = p(1-p)
    let dm: Vec<f64> = p
        .iter()
        .zip(&g)
        .map(|(&pi, &gi)| {
            let d_dice_dp = -(2.0 * gi * denom - numer) / (denom * denom);
            (pi - gi) / n + d_dice_dp * pi * (1.0 - pi)
        })
        .collect();
    let shape = value.shape().to_vec();
    let out = Tensor::scalar(T::of(terms.total()));
    Ok(logits.graph().custom(&[logits], out, move |up| {
        let u = up.data()[0].as_f64();
        let plane = dm.len();
        let mut grad = Tensor::zeros(&shape);
        let data = grad.data_mut();
        for (i, &v) in dm.iter().enumerate() {
            data[i] = T::of(-v * u);
            data[plane + i] = T::of(v * u);
        }
        vec![grad]
    }))
}
