//! End-to-end network: correlation pyramid, spatial correction, text
//! injection, pyramid aggregation and cross-modal decoding.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::aggregation::{broadcast_vt, AggregationConfig, Aggregator, StageGeometry};
use crate::archive::Archive;
use crate::autodiff::{Graph, Var};
use crate::correlation::{build_correlation_pyramid, vt_correlation};
use crate::decoder::{predict_mask, Decoder, DecoderConfig};
use crate::encoder::{mask_image, Encoder, FeaturePyramid};
use crate::error::{FssError, Result};
use crate::hscu::{Hscu, HscuConfig};
use crate::mask::Mask;
use crate::nn::{Bound, ParamStore};
use crate::patterns::{guidance_embedding, kshot_vote, resolve_support, PatternTag, RawSupport};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Encoder-side shapes the trainable network is built for.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Geometry {
    pub image_dims: (usize, usize),
    /// Spatial dims of stages 1..=4.
    pub stage_dims: [(usize, usize); 4],
    /// Channel widths of stages 1..=4.
    pub channels: [usize; 4],
    /// Layer counts of stages 2..=4.
    pub layers: [usize; 3],
    pub embed_dim: usize,
}

impl Geometry {
    /// Reads the geometry off the pyramid of a blank image.
    pub fn probe<T: Scalar>(encoder: &dyn Encoder<T>, image_dims: (usize, usize)) -> Result<Self> {
        let p = encoder.encode_image(&Tensor::zeros(&[3, image_dims.0, image_dims.1]))?;
        p.validate()?;
        let mut stage_dims = [(0, 0); 4];
        let mut channels = [0; 4];
        for i in 1..=4 {
            stage_dims[i - 1] = p.dims(i);
            channels[i - 1] = p.stage(i).shape()[0];
        }
        let layers = [p.layers(2).len(), p.layers(3).len(), p.layers(4).len()];
        Ok(Self { image_dims, stage_dims, channels, layers, embed_dim: encoder.embed_dim() })
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ModelConfig {
    /// Seed for parameter initialization.
    pub seed: u64,
    pub hscu: HscuConfig,
    pub aggregation: AggregationConfig,
    pub decoder: DecoderConfig,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            hscu: HscuConfig::default(),
            aggregation: AggregationConfig::default(),
            decoder: DecoderConfig::default(),
        }
    }
}

/// Frozen-encoder outputs for a query image.
#[derive(Clone, Debug, PartialEq)]
pub struct QueryFeatures<T: Scalar> {
    pub pyramid: FeaturePyramid<T>,
}

impl<T: Scalar> QueryFeatures<T> {
    pub fn encode(encoder: &dyn Encoder<T>, image: &Tensor<T>) -> Result<Self> {
        Ok(Self { pyramid: encoder.encode_image(image)? })
    }

    pub fn image_dims(&self) -> (usize, usize) {
        let (h, w) = self.pyramid.dims(1);
        (h * 4, w * 4)
    }
}

/// Frozen-encoder outputs for one support shot against a given query.
#[derive(Clone, Debug, PartialEq)]
pub struct ShotFeatures<T: Scalar> {
    /// Raw correlation volumes for stages 2, 3, 4.
    pub volumes: [Tensor<T>; 3],
    /// Broadcast text correlation `[1, h_4, w_4, h'_4, w'_4]`.
    pub text_volume: Tensor<T>,
    /// Guidance vector `[c_vt]`.
    pub f_t: Tensor<T>,
}

impl<T: Scalar> ShotFeatures<T> {
    /// Normalizes the support under `pattern`, encodes support and masked
    /// object images, and builds every correlation the network consumes.
    pub fn prepare(
        encoder: &dyn Encoder<T>,
        query_image: &Tensor<T>,
        query: &QueryFeatures<T>,
        raw: &RawSupport<T>,
        pattern: PatternTag,
    ) -> Result<Self> {
        let (support_image, mask, class_name) = resolve_support(pattern, raw, query_image)?;
        let support = encoder.encode_image(&support_image)?;
        let object = if mask.is_all_ones() { support.clone() } else { encoder.encode_image(&mask_image(&support_image, &mask)?)? };
        let (c2, c3, c4) = build_correlation_pyramid(&query.pyramid, &support, &object)?.into_stages();
        let f_t = guidance_embedding(pattern, class_name.as_deref(), Some(support.stage(4)), &mask, encoder)?.vector;
        let vt = vt_correlation(&query.pyramid.dense_embedding, &f_t)?;
        let text_volume = broadcast_vt(&vt, c4.support_dims()).tensor;
        Ok(Self { volumes: [c2.tensor, c3.tensor, c4.tensor], text_volume, f_t })
    }
}

/// Trainable part of the network; the encoder stays outside and frozen.
#[derive(Clone, Debug)]
pub struct UniFss<T: Scalar> {
    config: ModelConfig,
    geometry: Geometry,
    store: ParamStore<T>,
    hscu3: Hscu,
    hscu4: Hscu,
    aggregator: Aggregator,
    decoder: Decoder,
}

impl<T: Scalar> UniFss<T> {
    pub fn new(config: ModelConfig, geometry: Geometry) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mut store = ParamStore::new();
        let [_, d2, d3, d4] = geometry.stage_dims;
        let hscu4 = Hscu::new(&mut store, 4, d4, config.hscu, &mut rng)?;
        let hscu3 = Hscu::new(&mut store, 3, d3, config.hscu, &mut rng)?;
        let geo = |stage: usize, dims: (usize, usize), extra: usize| StageGeometry {
            channels: 2 * geometry.layers[stage - 2] + extra,
            query_dims: dims,
            support_dims: dims,
        };
        let aggregator =
            Aggregator::new(&mut store, config.aggregation.clone(), [geo(2, d2, 0), geo(3, d3, 0), geo(4, d4, 1)], &mut rng)?;
        let decoder = Decoder::new(
            &mut store,
            config.decoder.clone(),
            geometry.embed_dim,
            config.aggregation.out_channels,
            [geometry.channels[0], geometry.channels[1]],
            &mut rng,
        )?;
        Ok(Self { config, geometry, store, hscu3, hscu4, aggregator, decoder })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn geometry(&self) -> &Geometry {
        &self.geometry
    }

    pub fn params(&self) -> &ParamStore<T> {
        &self.store
    }

    pub fn params_mut(&mut self) -> &mut ParamStore<T> {
        &mut self.store
    }

    pub fn decoder(&self) -> &Decoder {
        &self.decoder
    }

    pub fn aggregator(&self) -> &Aggregator {
        &self.aggregator
    }

    /// Logits `[2, H, W]` for one shot, recorded on the graph behind `p`.
    pub fn forward<'g>(&self, p: &Bound<'g, T>, query: &QueryFeatures<T>, shot: &ShotFeatures<T>) -> Result<Var<'g, T>> {
        let g = p.graph();
        let [v2, v3, v4] = &shot.volumes;
        let c4 = self.hscu4.correct_var(p, g.constant(v4.clone()))?;
        let c3 = self.hscu3.correct_var(p, g.constant(v3.clone()))?;
        let c4 = Var::concat(&[c4, g.constant(shot.text_volume.clone())], 0);
        let agg = self.aggregator.aggregate(p, g.constant(v2.clone()), c3, c4)?;
        let f_v = g.constant(query.pyramid.dense_embedding.clone());
        let f_vt = self.decoder.eiu.forward(p, f_v, g.constant(shot.f_t.clone()))?;
        let f_q1 = g.constant(query.pyramid.stage(1).clone());
        let f_q2 = g.constant(query.pyramid.stage(2).clone());
        self.decoder.decode(p, f_vt, &agg, f_q1, f_q2, query.image_dims())
    }

    /// Forward-only logits.
    pub fn logits(&self, query: &QueryFeatures<T>, shot: &ShotFeatures<T>) -> Result<Tensor<T>> {
        let g = Graph::new();
        let p = self.store.bind(&g);
        Ok(self.forward(&p, query, shot)?.value().as_ref().clone())
    }

    /// K-shot prediction: one mask per shot, combined by pixel voting.
    pub fn predict(&self, query: &QueryFeatures<T>, shots: &[ShotFeatures<T>]) -> Result<Mask> {
        let masks = shots.iter().map(|s| predict_mask(&self.logits(query, s)?)).collect::<Result<Vec<_>>>()?;
        kshot_vote(&masks)
    }

    /// Parameters plus the configuration needed to rebuild the network.
    pub fn write_to(&self, archive: &mut Archive) {
        let c = &self.config;
        let g = &self.geometry;
        let pairs = |xs: &[(usize, usize)]| xs.iter().map(|(a, b)| format!("{a}x{b}")).collect::<Vec<_>>().join(",");
        let list = |xs: &[usize]| xs.iter().map(usize::to_string).collect::<Vec<_>>().join(",");
        archive.set_meta("model.seed", c.seed);
        archive.set_meta("model.hscu.kernel", c.hscu.kernel);
        archive.set_meta("model.hscu.expansion", c.hscu.expansion);
        let a = &c.aggregation;
        archive.set_meta(
            "model.aggregation",
            list(&[a.kernel, a.hidden, a.out_channels, a.groups, a.min_blocks, a.support_target]),
        );
        let d = &c.decoder;
        archive.set_meta("model.decoder.heads", d.heads);
        archive.set_meta("model.decoder.embed_out", d.embed_out);
        archive.set_meta("model.decoder.levels", list(&d.level_channels));
        archive.set_meta("model.decoder.shallow", list(&d.shallow_channels));
        archive.set_meta("model.decoder.groups", d.groups);
        archive.set_meta("geometry.image", pairs(&[g.image_dims]));
        archive.set_meta("geometry.stages", pairs(&g.stage_dims));
        archive.set_meta("geometry.channels", list(&g.channels));
        archive.set_meta("geometry.layers", list(&g.layers));
        archive.set_meta("geometry.embed_dim", g.embed_dim);
        self.store.write_to(archive);
    }

    pub fn from_archive(archive: &Archive) -> Result<Self> {
        let meta = |k: &str| archive.meta(k).ok_or_else(|| FssError::Checkpoint(format!("missing metadata `{k}`")));
        let num = |k: &str| -> Result<usize> {
            meta(k)?.parse().map_err(|_| FssError::Checkpoint(format!("metadata `{k}` is not a number")))
        };
        let list = |k: &str| -> Result<Vec<usize>> {
            meta(k)?
                .split(',')
                .map(|s| s.parse().map_err(|_| FssError::Checkpoint(format!("metadata `{k}` is malformed"))))
                .collect()
        };
        let pairs = |k: &str| -> Result<Vec<(usize, usize)>> {
            meta(k)?
                .split(',')
                .map(|s| {
                    let (a, b) = s.split_once('x').ok_or_else(|| FssError::Checkpoint(format!("metadata `{k}` is malformed")))?;
                    Ok((
                        a.parse().map_err(|_| FssError::Checkpoint(format!("metadata `{k}` is malformed")))?,
                        b.parse().map_err(|_| FssError::Checkpoint(format!("metadata `{k}` is malformed")))?,
                    ))
                })
                .collect()
        };
        fn arr<const N: usize, X: Copy>(v: Vec<X>, k: &str) -> Result<[X; N]> {
            v.try_into().map_err(|_| FssError::Checkpoint(format!("metadata `{k}` needs {N} entries")))
        }
        let a = arr::<6, _>(list("model.aggregation")?, "model.aggregation")?;
        let config = ModelConfig {
            seed: meta("model.seed")?.parse().map_err(|_| FssError::Checkpoint("bad model.seed".into()))?,
            hscu: HscuConfig { kernel: num("model.hscu.kernel")?, expansion: num("model.hscu.expansion")? },
            aggregation: AggregationConfig {
                kernel: a[0],
                hidden: a[1],
                out_channels: a[2],
                groups: a[3],
                min_blocks: a[4],
                support_target: a[5],
            },
            decoder: DecoderConfig {
                heads: num("model.decoder.heads")?,
                embed_out: num("model.decoder.embed_out")?,
                level_channels: arr(list("model.decoder.levels")?, "model.decoder.levels")?,
                shallow_channels: arr(list("model.decoder.shallow")?, "model.decoder.shallow")?,
                groups: num("model.decoder.groups")?,
            },
        };
        let geometry = Geometry {
            image_dims: arr::<1, _>(pairs("geometry.image")?, "geometry.image")?[0],
            stage_dims: arr(pairs("geometry.stages")?, "geometry.stages")?,
            channels: arr(list("geometry.channels")?, "geometry.channels")?,
            layers: arr(list("geometry.layers")?, "geometry.layers")?,
            embed_dim: num("geometry.embed_dim")?,
        };
        let mut model = Self::new(config, geometry)?;
        model.store.read_from(archive)?;
        Ok(model)
    }
}
