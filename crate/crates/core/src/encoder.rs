//! Frozen image/text encoder contract and the projection encoder.
//!
//! The network never trains the encoder. Any backbone that yields the four-stage
//! pyramid, per-layer features for stages 2..=4, a dense embedding aligned with
//! its text embedding space, and a linear map from stage-4 features into that
//! space can implement [`Encoder`]. A pretrained vision-language backbone must
//! produce its dense embedding through the value path of the final attention
//! block (value projection followed by the output projection, both applied as
//! 1x1 convolutions), so that the dense map and the text vector are comparable.
//!
//! [`ProjectionEncoder`] is the in-tree implementation: seeded 1x1 projections,
//! `tanh`, and average pooling. Weights come from a seed or a tensor archive.

use std::collections::HashMap;
use std::path::Path;

use image::RgbImage;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::archive::Archive;
use crate::error::{FssError, Result};
use crate::mask::Mask;
use crate::nn::normal;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Per-channel normalization applied to RGB input.
pub const PIXEL_MEAN: [f64; 3] = [0.481, 0.458, 0.408];
pub const PIXEL_STD: [f64; 3] = [0.269, 0.261, 0.276];

/// Number of pyramid stages.
pub const STAGES: usize = 4;

/// Multi-stage features of one image.
#[derive(Clone, Debug, PartialEq)]
pub struct FeaturePyramid<T: Scalar> {
    /// Stages 1..=4 at index 0..=3, each `[c_i, h_i, w_i]`.
    pub stage_features: Vec<Tensor<T>>,
    /// Stages 2..=4 at index 0..=2; each holds `L_i >= 1` maps `[c_i, h_i, w_i]`.
    pub layer_features: Vec<Vec<Tensor<T>>>,
    /// `[c_vt, h_4, w_4]` in the shared vision-language space.
    pub dense_embedding: Tensor<T>,
}

impl<T: Scalar> FeaturePyramid<T> {
    /// Stage `i` in 1..=4.
    pub fn stage(&self, i: usize) -> &Tensor<T> {
        &self.stage_features[i - 1]
    }

    /// Layer features of stage `i` in 2..=4.
    pub fn layers(&self, i: usize) -> &[Tensor<T>] {
        &self.layer_features[i - 2]
    }

    /// Spatial dims of stage `i`.
    pub fn dims(&self, i: usize) -> (usize, usize) {
        let s = self.stage(i).shape();
        (s[1], s[2])
    }

    pub fn validate(&self) -> Result<()> {
        if self.stage_features.len() != STAGES || self.layer_features.len() != STAGES - 1 {
            return Err(FssError::Shape("pyramid needs 4 stages and 3 layer groups".into()));
        }
        for i in 1..STAGES {
            let (h, w) = self.dims(i);
            if self.dims(i + 1) != (h.div_ceil(2), w.div_ceil(2)) {
                return Err(FssError::Shape(format!("stage {} dims do not halve stage {i}", i + 1)));
            }
        }
        for i in 2..=STAGES {
            if self.layers(i).is_empty() {
                return Err(FssError::Shape(format!("stage {i} has no layer features")));
            }
            if self.layers(i).iter().any(|l| l.shape() != self.stage(i).shape()) {
                return Err(FssError::Shape(format!("stage {i} layer features disagree with stage shape")));
            }
        }
        let e = self.dense_embedding.shape();
        if (e[1], e[2]) != self.dims(4) {
            return Err(FssError::Shape("dense embedding dims differ from stage 4".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum EmbeddingSource {
    ClassText,
    MaskedPool,
    GlobalPool,
}

/// Guidance vector `f_t` in the shared space.
#[derive(Clone, Debug, PartialEq)]
pub struct TextEmbedding<T: Scalar> {
    pub vector: Tensor<T>,
    pub source: EmbeddingSource,
}

/// Frozen backbone seam.
pub trait Encoder<T: Scalar> {
    /// `image: [3, H, W]`, already normalized.
    fn encode_image(&self, image: &Tensor<T>) -> Result<FeaturePyramid<T>>;

    fn encode_text(&self, class_name: &str) -> Result<TextEmbedding<T>>;

    /// Width `c_vt` of the shared space.
    fn embed_dim(&self) -> usize;

    /// Maps a stage-4 feature vector into the shared space.
    fn project_embedding(&self, feature: &[T]) -> Result<Vec<T>>;
}

/// Converts an 8-bit RGB image into a normalized `[3, H, W]` tensor.
pub fn normalize_image<T: Scalar>(img: &RgbImage) -> Tensor<T> {
    let (w, h) = (img.width() as usize, img.height() as usize);
    Tensor::from_fn(&[3, h, w], |i| {
        let v = img.get_pixel(i[2] as u32, i[1] as u32).0[i[0]] as f64 / 255.0;
        T::of((v - PIXEL_MEAN[i[0]]) / PIXEL_STD[i[0]])
    })
}

/// Zeroes every pixel outside `mask` (the masked object image).
pub fn mask_image<T: Scalar>(image: &Tensor<T>, mask: &Mask) -> Result<Tensor<T>> {
    let s = image.shape();
    if s.len() != 3 || (s[1], s[2]) != mask.dims() {
        return Err(FssError::Shape(format!("image {s:?} vs mask {:?}", mask.dims())));
    }
    let plane = s[1] * s[2];
    let mut out = image.clone();
    for (i, v) in out.data_mut().iter_mut().enumerate() {
        if mask.as_bytes()[i % plane] == 0 {
            *v = T::zero();
        }
    }
    Ok(out)
}

/// Mean feature vector over the mask support (all positions when `mask` is `None`).
///
/// The mask is resized to the feature grid with nearest sampling first.
pub fn masked_average<T: Scalar>(feature: &Tensor<T>, mask: Option<&Mask>) -> Result<Vec<T>> {
    let s = feature.shape();
    if s.len() != 3 {
        return Err(FssError::Shape(format!("expected [c, h, w] feature, got {s:?}")));
    }
    let (c, h, w) = (s[0], s[1], s[2]);
    let small = match mask {
        Some(m) => m.resize_nearest(h, w),
        None => Mask::ones(h, w),
    };
    let count = small.area();
    if count == 0 {
        return Err(FssError::DegenerateMask { height: h, width: w });
    }
    let inv = T::one() / T::from_usize(count).unwrap();
    Ok((0..c)
        .map(|ch| {
            let plane = &feature.data()[ch * h * w..(ch + 1) * h * w];
            plane.iter().zip(small.as_bytes()).filter(|(_, &m)| m != 0).map(|(&v, _)| v).sum::<T>() * inv
        })
        .collect())
}

/// Prototype embedding from a deep feature map: masked (or global) average,
/// projected into the shared space.
pub fn pooled_embedding<T: Scalar>(
    encoder: &dyn Encoder<T>,
    deep_feature: &Tensor<T>,
    mask: Option<&Mask>,
) -> Result<TextEmbedding<T>> {
    let pooled = masked_average(deep_feature, mask)?;
    let source = match mask {
        Some(m) if !m.is_all_ones() => EmbeddingSource::MaskedPool,
        _ => EmbeddingSource::GlobalPool,
    };
    let v = encoder.project_embedding(&pooled)?;
    Ok(TextEmbedding { vector: Tensor::new(&[v.len()], v)?, source })
}

/// [`pooled_embedding`] that degrades to global pooling when the mask vanishes
/// on the feature grid.
pub fn pooled_embedding_or_global<T: Scalar>(
    encoder: &dyn Encoder<T>,
    deep_feature: &Tensor<T>,
    mask: Option<&Mask>,
) -> Result<TextEmbedding<T>> {
    match pooled_embedding(encoder, deep_feature, mask) {
        Err(FssError::DegenerateMask { height, width }) => {
            log::debug!("support mask empty on the {height}x{width} feature grid; using global pooling");
            pooled_embedding(encoder, deep_feature, None)
        }
        other => other,
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct EncoderConfig {
    pub seed: u64,
    /// Channel width per stage.
    pub channels: [usize; STAGES],
    /// Layer count for stages 2, 3, 4.
    pub layers: [usize; STAGES - 1],
    pub embed_dim: usize,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self { seed: 0x5EED, channels: [16, 32, 48, 64], layers: [2, 3, 2], embed_dim: 64 }
    }
}

/// Encoder built from 1x1 projections and average pooling.
#[derive(Clone, Debug)]
pub struct ProjectionEncoder<T: Scalar> {
    config: EncoderConfig,
    /// `[c_1, 6]`, applied to pooled pixels and squared pixels.
    stem: Tensor<T>,
    /// Stages 2..=4: `[c_i, c_{i-1}]`.
    stage_proj: Vec<Tensor<T>>,
    /// Stages 2..=4, per layer `[c_i, c_i]`.
    layer_proj: Vec<Vec<Tensor<T>>>,
    /// `[c_vt, c_4]`.
    embed_proj: Tensor<T>,
    text_table: HashMap<String, Vec<T>>,
}

const STEM_INPUTS: usize = 6;
const GAIN: f64 = 1.5;

impl<T: Scalar> ProjectionEncoder<T> {
    /// Seeded weights.
    pub fn stub(config: EncoderConfig) -> Result<Self> {
        if config.layers.contains(&0) || config.channels.contains(&0) || config.embed_dim == 0 {
            return Err(FssError::Validation("encoder widths and layer counts must be positive".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let c = config.channels;
        let stem = normal(&[c[0], STEM_INPUTS], GAIN / (STEM_INPUTS as f64).sqrt(), &mut rng);
        let stage_proj = (1..STAGES).map(|i| normal(&[c[i], c[i - 1]], GAIN / (c[i - 1] as f64).sqrt(), &mut rng)).collect();
        let layer_proj = (1..STAGES)
            .map(|i| (0..config.layers[i - 1]).map(|_| normal(&[c[i], c[i]], GAIN / (c[i] as f64).sqrt(), &mut rng)).collect())
            .collect();
        let embed_proj = normal(&[config.embed_dim, c[3]], 1.0 / (c[3] as f64).sqrt(), &mut rng);
        Ok(Self { config, stem, stage_proj, layer_proj, embed_proj, text_table: HashMap::new() })
    }

    pub fn config(&self) -> &EncoderConfig {
        &self.config
    }

    /// Registers a fixed text vector for `class_name` (normalized on use).
    pub fn set_text_embedding(&mut self, class_name: &str, vector: Vec<T>) -> Result<()> {
        if vector.len() != self.config.embed_dim {
            return Err(FssError::Shape(format!("text vector has {} dims, expected {}", vector.len(), self.config.embed_dim)));
        }
        self.text_table.insert(class_name.to_string(), vector);
        Ok(())
    }

    pub fn to_archive(&self) -> Archive {
        let mut a = Archive::new();
        a.set_meta("encoder.seed", self.config.seed);
        a.set_meta("encoder.layers", join(&self.config.layers));
        a.insert("encoder.stem", &self.stem);
        for (i, p) in self.stage_proj.iter().enumerate() {
            a.insert(&format!("encoder.stage{}.proj", i + 2), p);
        }
        for (i, layers) in self.layer_proj.iter().enumerate() {
            for (l, p) in layers.iter().enumerate() {
                a.insert(&format!("encoder.stage{}.layer{}", i + 2, l + 1), p);
            }
        }
        a.insert("encoder.embed", &self.embed_proj);
        let mut names: Vec<_> = self.text_table.keys().collect();
        names.sort();
        for name in names {
            let v = &self.text_table[name];
            a.insert(&format!("text.{name}"), &Tensor::new(&[v.len()], v.clone()).unwrap());
        }
        a
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.to_archive().save(path)
    }

    /// Loads weights written by [`Self::save`] or by an external exporter using
    /// the same tensor names.
    pub fn from_archive(archive: &Archive) -> Result<Self> {
        let layers_meta = archive.meta("encoder.layers").ok_or_else(|| FssError::Checkpoint("missing encoder.layers".into()))?;
        let layers: Vec<usize> = layers_meta
            .split(',')
            .map(|s| s.parse().map_err(|_| FssError::Checkpoint(format!("bad encoder.layers {layers_meta}"))))
            .collect::<Result<_>>()?;
        let layers: [usize; 3] = layers.try_into().map_err(|_| FssError::Checkpoint("encoder.layers needs 3 entries".into()))?;
        let seed = archive.meta("encoder.seed").and_then(|s| s.parse().ok()).unwrap_or(0);
        let stem: Tensor<T> = archive.get("encoder.stem")?;
        let mut stage_proj = Vec::new();
        let mut layer_proj = Vec::new();
        for i in 2..=STAGES {
            stage_proj.push(archive.get(&format!("encoder.stage{i}.proj"))?);
            layer_proj.push(
                (1..=layers[i - 2]).map(|l| archive.get(&format!("encoder.stage{i}.layer{l}"))).collect::<Result<Vec<_>>>()?,
            );
        }
        let embed_proj: Tensor<T> = archive.get("encoder.embed")?;
        let mut channels = [stem.shape()[0], 0, 0, 0];
        for (i, p) in stage_proj.iter().enumerate() {
            let s = p.shape();
            if s.len() != 2 || s[1] != channels[i] {
                return Err(FssError::Checkpoint(format!("stage {} projection has shape {s:?}", i + 2)));
            }
            channels[i + 1] = s[0];
        }
        if embed_proj.shape().len() != 2 || embed_proj.shape()[1] != channels[3] {
            return Err(FssError::Checkpoint("embedding projection does not match stage 4 width".into()));
        }
        let config = EncoderConfig { seed, channels, layers, embed_dim: embed_proj.shape()[0] };
        let mut text_table = HashMap::new();
        for name in archive.names() {
            if let Some(class) = name.strip_prefix("text.") {
                text_table.insert(class.to_string(), archive.get::<T>(name)?.into_data());
            }
        }
        Ok(Self { config, stem, stage_proj, layer_proj, embed_proj, text_table })
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_archive(&Archive::load(path)?)
    }

    /// All weight tensors, for integrity checks.
    pub fn weights(&self) -> Vec<&Tensor<T>> {
        let mut v = vec![&self.stem];
        v.extend(self.stage_proj.iter());
        v.extend(self.layer_proj.iter().flatten());
        v.push(&self.embed_proj);
        v
    }
}

fn join(xs: &[usize]) -> String {
    xs.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(",")
}

/// `[c, h, w]` average pooling with window and stride `f`; edge windows
/// average only the pixels they cover, giving `ceil(h / f) x ceil(w / f)`.
fn avg_pool<T: Scalar>(x: &Tensor<T>, f: usize) -> Tensor<T> {
    let (c, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let (ho, wo) = (h.div_ceil(f), w.div_ceil(f));
    let mut out = Tensor::zeros(&[c, ho, wo]);
    for ch in 0..c {
        for oy in 0..ho {
            for ox in 0..wo {
                let (y1, x1) = ((oy * f + f).min(h), (ox * f + f).min(w));
                let mut s = T::zero();
                for y in oy * f..y1 {
                    for xx in ox * f..x1 {
                        s += x.get(&[ch, y, xx]);
                    }
                }
                let n = T::from_usize((y1 - oy * f) * (x1 - ox * f)).unwrap();
                out.set(&[ch, oy, ox], s / n);
            }
        }
    }
    out
}

/// `weight @ x` over channels at every position; `weight: [o, c]`, `x: [c, h, w]`.
fn project<T: Scalar>(weight: &Tensor<T>, x: &Tensor<T>) -> Tensor<T> {
    let (o, c) = (weight.shape()[0], weight.shape()[1]);
    let (h, w) = (x.shape()[1], x.shape()[2]);
    let n = h * w;
    let mut out = Tensor::zeros(&[o, h, w]);
    T::gemm(o, c, n, T::one(), weight.data(), (c as isize, 1), x.data(), (n as isize, 1), T::zero(), out.data_mut(), (n as isize, 1));
    out
}

fn tanh_in_place<T: Scalar>(mut x: Tensor<T>) -> Tensor<T> {
    for v in x.data_mut() {
        *v = v.tanh();
    }
    x
}

/// FNV-1a.
fn hash_str(s: &str) -> u64 {
    s.bytes().fold(0xcbf2_9ce4_8422_2325u64, |h, b| (h ^ b as u64).wrapping_mul(0x0100_0000_01b3))
}

impl<T: Scalar> Encoder<T> for ProjectionEncoder<T> {
    fn encode_image(&self, image: &Tensor<T>) -> Result<FeaturePyramid<T>> {
        let s = image.shape();
        if s.len() != 3 || s[0] != 3 {
            return Err(FssError::Shape(format!("expected [3, H, W] image, got {s:?}")));
        }
        if s[1] == 0 || s[2] == 0 || s[1] % 16 != 0 || s[2] % 16 != 0 {
            return Err(FssError::Shape(format!("image dims {}x{} must be non-zero multiples of 16", s[1], s[2])));
        }
        if !image.is_finite() {
            return Err(FssError::Validation("image contains non-finite values".into()));
        }
        let squared = image.map(|v| v * v);
        let stem_in = Tensor::concat(&[image, &squared], 0)?;
        let mut stage = tanh_in_place(project(&self.stem, &avg_pool(&stem_in, 4)));
        let mut stage_features = vec![stage.clone()];
        let mut layer_features = Vec::new();
        for i in 0..STAGES - 1 {
            stage = tanh_in_place(project(&self.stage_proj[i], &avg_pool(&stage, 2)));
            layer_features.push(self.layer_proj[i].iter().map(|p| tanh_in_place(project(p, &stage))).collect());
            stage_features.push(stage.clone());
        }
        let dense_embedding = project(&self.embed_proj, &stage);
        Ok(FeaturePyramid { stage_features, layer_features, dense_embedding })
    }

    fn encode_text(&self, class_name: &str) -> Result<TextEmbedding<T>> {
        if class_name.is_empty() {
            return Err(FssError::Validation("class text must be non-empty".into()));
        }
        let raw: Vec<f64> = match self.text_table.get(class_name) {
            Some(v) => v.iter().map(|x| x.as_f64()).collect(),
            None => {
                let mut rng = ChaCha8Rng::seed_from_u64(hash_str(class_name) ^ self.config.seed.rotate_left(17));
                normal::<f64>(&[self.config.embed_dim], 1.0, &mut rng).into_data()
            }
        };
        let norm = raw.iter().map(|v| v * v).sum::<f64>().sqrt();
        if norm == 0.0 {
            return Err(FssError::Validation(format!("text vector for {class_name} has zero norm")));
        }
        let v: Vec<T> = raw.iter().map(|x| T::of(x / norm)).collect();
        Ok(TextEmbedding { vector: Tensor::new(&[v.len()], v)?, source: EmbeddingSource::ClassText })
    }

    fn embed_dim(&self) -> usize {
        self.config.embed_dim
    }

    fn project_embedding(&self, feature: &[T]) -> Result<Vec<T>> {
        let c4 = self.config.channels[3];
        if feature.len() != c4 {
            return Err(FssError::Shape(format!("expected {c4}-dim stage-4 feature, got {}", feature.len())));
        }
        let x = Tensor::new(&[c4, 1, 1], feature.to_vec())?;
        Ok(project(&self.embed_proj, &x).into_data())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn encoder() -> ProjectionEncoder<f64> {
        ProjectionEncoder::stub(EncoderConfig::default()).unwrap()
    }

    #[test]
    fn zeros_image_gives_expected_geometry() {
        let p = encoder().encode_image(&Tensor::zeros(&[3, 64, 64])).unwrap();
        p.validate().unwrap();
        let dims: Vec<_> = (1..=4).map(|i| p.dims(i)).collect();
        assert_eq!(dims, vec![(16, 16), (8, 8), (4, 4), (2, 2)]);
        assert!(p.stage_features.iter().all(Tensor::is_finite));
        assert_eq!(p.dense_embedding.shape(), &[64, 2, 2]);
    }

    #[test]
    fn rejects_bad_images() {
        let e = encoder();
        assert!(matches!(e.encode_image(&Tensor::zeros(&[3, 65, 64])), Err(FssError::Shape(_))));
        let mut img = Tensor::zeros(&[3, 64, 64]);
        img.set(&[0, 3, 3], f64::NAN);
        assert!(matches!(e.encode_image(&img), Err(FssError::Validation(_))));
    }

    #[test]
    fn ceil_geometry_for_400() {
        let p = encoder().encode_image(&Tensor::zeros(&[3, 400, 400])).unwrap();
        assert_eq!(p.dims(3), (25, 25));
        assert_eq!(p.dims(4), (13, 13));
        p.validate().unwrap();
    }

    #[test]
    fn deterministic_and_flip_equivariant() {
        let e = encoder();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..3 {
            let img = Tensor::from_fn(&[3, 64, 64], |_| rng.gen_range(-2.0..2.0));
            let a = e.encode_image(&img).unwrap();
            assert_eq!(a, e.encode_image(&img).unwrap());
            let flipped = Tensor::from_fn(&[3, 64, 64], |i| img.get(&[i[0], i[1], 63 - i[2]]));
            let b = e.encode_image(&flipped).unwrap();
            let s4 = a.stage(4);
            let w = s4.shape()[2];
            let expect = Tensor::from_fn(s4.shape(), |i| s4.get(&[i[0], i[1], w - 1 - i[2]]));
            assert!(b.stage(4).max_abs_diff(&expect) < 1e-12);
        }
    }

    #[test]
    fn text_embeddings() {
        let e = encoder();
        let cat = e.encode_text("cat").unwrap();
        assert_eq!(cat, e.encode_text("cat").unwrap());
        let dog = e.encode_text("dog").unwrap();
        let cos: f64 = cat.vector.data().iter().zip(dog.vector.data()).map(|(a, b)| a * b).sum();
        assert!(cos < 1.0);
        for v in [&cat, &dog] {
            let n: f64 = v.vector.data().iter().map(|x| x * x).sum::<f64>().sqrt();
            assert!((n - 1.0).abs() < 1e-6);
        }
        assert!(matches!(e.encode_text(""), Err(FssError::Validation(_))));
    }

    #[test]
    fn pooling_contracts() {
        let e = encoder();
        let constant = Tensor::<f64>::full(&[64, 4, 4], 0.3);
        let mask = Mask::from_fn(16, 16, |y, x| y < 5 && x > 8);
        assert!(masked_average(&constant, Some(&mask)).unwrap().iter().all(|&v| (v - 0.3).abs() < 1e-15));

        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let f = Tensor::from_fn(&[64, 4, 4], |_| rng.gen_range(-1.0..1.0));
        let all = Mask::ones(16, 16);
        assert_eq!(pooled_embedding(&e, &f, Some(&all)).unwrap(), pooled_embedding(&e, &f, None).unwrap());
        assert_eq!(pooled_embedding(&e, &f, None).unwrap().source, EmbeddingSource::GlobalPool);
        assert_eq!(pooled_embedding(&e, &f, Some(&mask)).unwrap().source, EmbeddingSource::MaskedPool);

        // 2x2 feature, one-pixel mask picks that pixel
        let g = Tensor::from_fn(&[3, 2, 2], |i| (i[0] * 4 + i[1] * 2 + i[2]) as f64);
        let one = Mask::from_fn(2, 2, |y, x| y == 1 && x == 0);
        let direct: Vec<f64> = (0..3).map(|c| g.get(&[c, 1, 0])).collect();
        assert_eq!(masked_average(&g, Some(&one)).unwrap(), direct);
    }

    #[test]
    fn empty_mask_falls_back_to_global() {
        let e = encoder();
        let f = Tensor::full(&[64, 2, 2], 1.0);
        let mut tiny = Mask::zeros(64, 64);
        tiny.set(5, 5, true); // vanishes under nearest sampling to 2x2
        assert!(matches!(pooled_embedding(&e, &f, Some(&tiny)), Err(FssError::DegenerateMask { .. })));
        let fb = pooled_embedding_or_global(&e, &f, Some(&tiny)).unwrap();
        assert_eq!(fb.source, EmbeddingSource::GlobalPool);
    }

    #[test]
    fn archive_round_trip_reproduces_features() {
        let mut e = encoder();
        e.set_text_embedding("zebra", vec![1.0; 64]).unwrap();
        let back = ProjectionEncoder::<f64>::from_archive(&Archive::from_bytes(&e.to_archive().to_bytes()).unwrap()).unwrap();
        let img = Tensor::from_fn(&[3, 32, 32], |i| (i[1] as f64 - i[2] as f64) / 32.0);
        assert_eq!(e.encode_image(&img).unwrap(), back.encode_image(&img).unwrap());
        assert_eq!(e.encode_text("zebra").unwrap(), back.encode_text("zebra").unwrap());
        assert_eq!(back.config(), e.config());
    }
}
