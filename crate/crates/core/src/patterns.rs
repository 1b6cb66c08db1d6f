//! Task patterns, guidance normalization and K-shot voting.

use std::fmt;
use std::str::FromStr;

use crate::encoder::{pooled_embedding_or_global, Encoder, TextEmbedding};
use crate::error::{FssError, Result};
use crate::mask::{BoundingBox, Mask};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum PatternTag {
    Image,
    Mask,
    Box,
    ClassImage,
    ClassMask,
    ClassBox,
    Text,
}

/// Raw support material a pattern consumes.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SupportField {
    Image,
    Mask,
    Box,
    ClassName,
}

impl SupportField {
    pub fn name(self) -> &'static str {
        match self {
            SupportField::Image => "image",
            SupportField::Mask => "mask",
            SupportField::Box => "box",
            SupportField::ClassName => "class_name",
        }
    }
}

impl PatternTag {
    pub const ALL: [PatternTag; 7] = [
        PatternTag::Image,
        PatternTag::Mask,
        PatternTag::Box,
        PatternTag::ClassImage,
        PatternTag::ClassMask,
        PatternTag::ClassBox,
        PatternTag::Text,
    ];

    pub fn name(self) -> &'static str {
        match self {
            PatternTag::Image => "image",
            PatternTag::Mask => "mask",
            PatternTag::Box => "box",
            PatternTag::ClassImage => "class_image",
            PatternTag::ClassMask => "class_mask",
            PatternTag::ClassBox => "class_box",
            PatternTag::Text => "text",
        }
    }

    pub fn is_class_aware(self) -> bool {
        matches!(self, PatternTag::ClassImage | PatternTag::ClassMask | PatternTag::ClassBox)
    }

    /// Whether the guidance vector comes from the class name.
    pub fn uses_text(self) -> bool {
        self.is_class_aware() || self == PatternTag::Text
    }

    pub fn required_fields(self) -> &'static [SupportField] {
        use SupportField::*;
        match self {
            PatternTag::Image => &[Image],
            PatternTag::Mask => &[Image, Mask],
            PatternTag::Box => &[Image, Box],
            PatternTag::ClassImage => &[Image, ClassName],
            PatternTag::ClassMask => &[Image, Mask, ClassName],
            PatternTag::ClassBox => &[Image, Box, ClassName],
            PatternTag::Text => &[ClassName],
        }
    }
}

impl fmt::Display for PatternTag {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for PatternTag {
    type Err = FssError;

    fn from_str(s: &str) -> Result<Self> {
        PatternTag::ALL
            .into_iter()
            .find(|p| p.name() == s)
            .ok_or_else(|| FssError::Validation(format!("unknown pattern `{s}`")))
    }
}

/// Patterns that share one set of trained parameters.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum PatternGroup {
    ImageOnly,
    MaskGroup,
    ClassAwareGroup,
}

impl PatternGroup {
    pub const ALL: [PatternGroup; 3] = [PatternGroup::ImageOnly, PatternGroup::MaskGroup, PatternGroup::ClassAwareGroup];

    pub fn name(self) -> &'static str {
        match self {
            PatternGroup::ImageOnly => "image-only",
            PatternGroup::MaskGroup => "mask-group",
            PatternGroup::ClassAwareGroup => "class-aware-group",
        }
    }

    /// The pattern training episodes use.
    pub fn train_pattern(self) -> PatternTag {
        match self {
            PatternGroup::ImageOnly => PatternTag::Image,
            PatternGroup::MaskGroup => PatternTag::Mask,
            PatternGroup::ClassAwareGroup => PatternTag::ClassMask,
        }
    }

    pub fn eval_patterns(self) -> &'static [PatternTag] {
        match self {
            PatternGroup::ImageOnly => &[PatternTag::Image],
            PatternGroup::MaskGroup => &[PatternTag::Mask, PatternTag::Box],
            PatternGroup::ClassAwareGroup => {
                &[PatternTag::ClassImage, PatternTag::ClassMask, PatternTag::ClassBox, PatternTag::Text]
            }
        }
    }

    pub fn of_pattern(pattern: PatternTag) -> Self {
        match pattern {
            PatternTag::Image => PatternGroup::ImageOnly,
            PatternTag::Mask | PatternTag::Box => PatternGroup::MaskGroup,
            _ => PatternGroup::ClassAwareGroup,
        }
    }
}

impl fmt::Display for PatternGroup {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for PatternGroup {
    type Err = FssError;

    fn from_str(s: &str) -> Result<Self> {
        PatternGroup::ALL
            .into_iter()
            .find(|g| g.name() == s)
            .ok_or_else(|| FssError::Validation(format!("unknown pattern group `{s}`")))
    }
}

/// Support material as supplied by a dataset or user; which fields must be
/// present depends on the pattern.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct RawSupport<T: Scalar> {
    /// Normalized `[3, H, W]`.
    pub image: Option<Tensor<T>>,
    pub mask: Option<Mask>,
    pub bbox: Option<BoundingBox>,
    pub class_name: Option<String>,
}

/// Internal support representation shared by every pattern.
#[derive(Clone, Debug, PartialEq)]
pub struct GuidanceSet<T: Scalar> {
    pub support_image: Tensor<T>,
    pub support_mask: Mask,
    pub guidance_embedding: TextEmbedding<T>,
    pub pattern: PatternTag,
    pub class_name: Option<String>,
}

/// Binary mask of the half-open rectangle `[y_min, y_max) x [x_min, x_max)`.
pub fn box_to_mask(bbox: BoundingBox, dims: (usize, usize)) -> Result<Mask> {
    let (h, w) = dims;
    let BoundingBox { x_min, y_min, x_max, y_max } = bbox;
    if x_min >= x_max || y_min >= y_max || x_max > w || y_max > h {
        return Err(FssError::Validation(format!("box {bbox:?} is inverted or outside {h}x{w}")));
    }
    Ok(Mask::from_fn(h, w, |y, x| (y_min..y_max).contains(&y) && (x_min..x_max).contains(&x)))
}

fn missing(pattern: PatternTag, field: SupportField) -> FssError {
    FssError::Validation(format!("pattern `{pattern}` requires a support {}", field.name()))
}

/// Support image, support mask and class name the pattern implies, before
/// any encoding.
pub fn resolve_support<T: Scalar>(
    pattern: PatternTag,
    raw: &RawSupport<T>,
    query_image: &Tensor<T>,
) -> Result<(Tensor<T>, Mask, Option<String>)> {
    for &field in pattern.required_fields() {
        let present = match field {
            SupportField::Image => raw.image.is_some(),
            SupportField::Mask => raw.mask.is_some(),
            SupportField::Box => raw.bbox.is_some(),
            SupportField::ClassName => raw.class_name.as_deref().is_some_and(|c| !c.is_empty()),
        };
        if !present {
            return Err(missing(pattern, field));
        }
    }
    let image = match pattern {
        PatternTag::Text => query_image.clone(),
        _ => raw.image.clone().ok_or_else(|| missing(pattern, SupportField::Image))?,
    };
    if image.ndim() != 3 || image.shape()[0] != 3 {
        return Err(FssError::Shape(format!("support image must be [3, H, W], got {:?}", image.shape())));
    }
    let dims = (image.shape()[1], image.shape()[2]);
    let mask = match pattern {
        PatternTag::Image | PatternTag::ClassImage | PatternTag::Text => Mask::ones(dims.0, dims.1),
        PatternTag::Mask | PatternTag::ClassMask => {
            let m = raw.mask.clone().ok_or_else(|| missing(pattern, SupportField::Mask))?;
            if m.dims() != dims {
                return Err(FssError::Shape(format!("support mask {:?} vs image {dims:?}", m.dims())));
            }
            m
        }
        PatternTag::Box | PatternTag::ClassBox => {
            box_to_mask(raw.bbox.ok_or_else(|| missing(pattern, SupportField::Box))?, dims)?
        }
    };
    let class_name = if pattern.uses_text() { raw.class_name.clone() } else { None };
    Ok((image, mask, class_name))
}

/// Guidance vector: the class text for text-bearing patterns, otherwise the
/// pooled stage-4 support feature under `mask` (only needed for the latter).
pub fn guidance_embedding<T: Scalar>(
    pattern: PatternTag,
    class_name: Option<&str>,
    support_stage4: Option<&Tensor<T>>,
    mask: &Mask,
    encoder: &dyn Encoder<T>,
) -> Result<TextEmbedding<T>> {
    if pattern.uses_text() {
        let name = class_name.ok_or_else(|| missing(pattern, SupportField::ClassName))?;
        return encoder.encode_text(name);
    }
    let feature = support_stage4
        .ok_or_else(|| FssError::Contract(format!("pattern `{pattern}` pools the support feature, none given")))?;
    let mask = if mask.is_all_ones() { None } else { Some(mask) };
    pooled_embedding_or_global(encoder, feature, mask)
}

/// Full normalization of raw support material into a [`GuidanceSet`].
pub fn normalize_guidance<T: Scalar>(
    pattern: PatternTag,
    raw: &RawSupport<T>,
    query_image: &Tensor<T>,
    encoder: &dyn Encoder<T>,
) -> Result<GuidanceSet<T>> {
    let (support_image, support_mask, class_name) = resolve_support(pattern, raw, query_image)?;
    let guidance_embedding = if pattern.uses_text() {
        guidance_embedding(pattern, class_name.as_deref(), None, &support_mask, encoder)?
    } else {
        let pyramid = encoder.encode_image(&support_image)?;
        guidance_embedding(pattern, None, Some(pyramid.stage(4)), &support_mask, encoder)?
    };
    Ok(GuidanceSet { support_image, support_mask, guidance_embedding, pattern, class_name })
}

/// Per-pixel vote over K one-shot predictions; a pixel is foreground when at
/// least half of the votes are foreground.
pub fn kshot_vote(predictions: &[Mask]) -> Result<Mask> {
    let first = predictions.first().ok_or_else(|| FssError::Validation("no predictions to vote over".into()))?;
    let dims = first.dims();
    if let Some(bad) = predictions.iter().find(|m| m.dims() != dims) {
        return Err(FssError::Shape(format!("prediction {:?} vs {dims:?}", bad.dims())));
    }
    let k = predictions.len();
    let mut votes = vec![0usize; dims.0 * dims.1];
    for m in predictions {
        for (v, &b) in votes.iter_mut().zip(m.as_bytes()) {
            *v += b as usize;
        }
    }
    let bytes: Vec<u8> = votes.iter().map(|&v| u8::from(2 * v >= k)).collect();
    Mask::from_bytes(dims.0, dims.1, &bytes)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encoder::{EmbeddingSource, EncoderConfig, ProjectionEncoder};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn setup() -> (ProjectionEncoder<f64>, Tensor<f64>, Tensor<f64>) {
        let e = ProjectionEncoder::stub(EncoderConfig::default()).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let q = Tensor::from_fn(&[3, 64, 64], |_| rng.gen_range(-1.0..1.0));
        let s = Tensor::from_fn(&[3, 64, 64], |_| rng.gen_range(-1.0..1.0));
        (e, q, s)
    }

    fn full_raw(s: &Tensor<f64>) -> RawSupport<f64> {
        RawSupport {
            image: Some(s.clone()),
            mask: Some(Mask::from_fn(64, 64, |y, x| (10..40).contains(&y) && (20..50).contains(&x))),
            bbox: Some(BoundingBox { x_min: 20, y_min: 10, x_max: 50, y_max: 40 }),
            class_name: Some("red circle".into()),
        }
    }

    #[test]
    fn names_round_trip() {
        for p in PatternTag::ALL {
            assert_eq!(p.name().parse::<PatternTag>().unwrap(), p);
            assert!(PatternGroup::of_pattern(p).eval_patterns().contains(&p));
        }
        for g in PatternGroup::ALL {
            assert_eq!(g.name().parse::<PatternGroup>().unwrap(), g);
        }
        assert!("scribble".parse::<PatternTag>().is_err());
    }

    #[test]
    fn box_masks() {
        assert!(box_to_mask(BoundingBox { x_min: 0, y_min: 0, x_max: 4, y_max: 3 }, (3, 4)).unwrap().is_all_ones());
        let one = box_to_mask(BoundingBox { x_min: 0, y_min: 0, x_max: 1, y_max: 1 }, (4, 4)).unwrap();
        assert_eq!(one.area(), 1);
        assert!(one.get(0, 0));
        assert!(box_to_mask(BoundingBox { x_min: 2, y_min: 0, x_max: 2, y_max: 1 }, (4, 4)).is_err());
        assert!(box_to_mask(BoundingBox { x_min: 0, y_min: 0, x_max: 5, y_max: 1 }, (4, 4)).is_err());
    }

    #[test]
    fn every_pattern_normalizes() {
        let (e, q, s) = setup();
        let raw = full_raw(&s);
        for p in PatternTag::ALL {
            let g = normalize_guidance(p, &raw, &q, &e).unwrap();
            assert_eq!(g.pattern, p);
            assert_eq!(g.guidance_embedding.source == EmbeddingSource::ClassText, p.uses_text());
            assert_eq!(g.guidance_embedding.vector.len(), 64);
            match p {
                PatternTag::Image | PatternTag::ClassImage | PatternTag::Text => assert!(g.support_mask.is_all_ones()),
                PatternTag::Mask | PatternTag::ClassMask => assert_eq!(&g.support_mask, raw.mask.as_ref().unwrap()),
                PatternTag::Box | PatternTag::ClassBox => {
                    assert_eq!(g.support_mask.tight_box(), raw.bbox);
                    assert_eq!(g.support_mask.area(), raw.bbox.unwrap().area());
                }
            }
        }
        let text = normalize_guidance(PatternTag::Text, &raw, &q, &e).unwrap();
        assert_eq!(text.support_image, q);
        let image = normalize_guidance(PatternTag::Image, &raw, &q, &e).unwrap();
        assert_eq!(image.guidance_embedding.source, EmbeddingSource::GlobalPool);
        let masked = normalize_guidance(PatternTag::Mask, &raw, &q, &e).unwrap();
        assert_eq!(masked.guidance_embedding.source, EmbeddingSource::MaskedPool);
    }

    #[test]
    fn missing_fields_rejected() {
        let (e, q, s) = setup();
        for p in PatternTag::ALL {
            for &field in p.required_fields() {
                let mut raw = full_raw(&s);
                match field {
                    SupportField::Image => raw.image = None,
                    SupportField::Mask => raw.mask = None,
                    SupportField::Box => raw.bbox = None,
                    SupportField::ClassName => raw.class_name = None,
                }
                assert!(matches!(normalize_guidance(p, &raw, &q, &e), Err(FssError::Validation(_))), "{p} {field:?}");
            }
        }
        let text_only = RawSupport { class_name: Some("dog".into()), ..RawSupport::default() };
        assert!(normalize_guidance(PatternTag::Text, &text_only, &q, &e).is_ok());
    }

    #[test]
    fn vote_rules() {
        let a = Mask::from_fn(1, 3, |_, x| x == 0 || x == 1);
        let b = Mask::from_fn(1, 3, |_, x| x == 0);
        let c = Mask::zeros(1, 3);
        assert_eq!(kshot_vote(std::slice::from_ref(&a)).unwrap(), a);
        let v = kshot_vote(&[a.clone(), b.clone(), c.clone()]).unwrap();
        assert_eq!(v.as_bytes(), &[1, 0, 0]);
        assert_eq!(kshot_vote(&[b.clone(), c.clone()]).unwrap().as_bytes(), &[1, 0, 0]);
        assert!(kshot_vote(&[]).is_err());
        assert!(kshot_vote(&[a, Mask::zeros(2, 2)]).is_err());
    }
}
