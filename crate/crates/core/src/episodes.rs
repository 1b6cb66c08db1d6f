//! Dataset manifests, fold splits and episodic sampling.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use image::imageops::FilterType;
use image::{GrayImage, RgbImage};
use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{FssError, Result};
use crate::mask::{BoundingBox, Mask};
use crate::patterns::PatternTag;

/// One manifest line; paths are relative to the manifest's directory.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ManifestRecord {
    pub image_path: PathBuf,
    pub mask_path: PathBuf,
    pub class_id: u32,
    pub class_name: String,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct DatasetManifest {
    pub name: String,
    /// Directory relative paths resolve against.
    pub root: PathBuf,
    pub records: Vec<ManifestRecord>,
}

impl DatasetManifest {
    /// Parses tab-separated `image_path, mask_path, class_id, class_name` lines.
    /// Blank lines and lines starting with `#` are skipped.
    pub fn parse(text: &str, name: &str, root: &Path) -> Result<Self> {
        let mut records = Vec::new();
        let mut names: BTreeMap<u32, String> = BTreeMap::new();
        for (i, line) in text.lines().enumerate() {
            let line_no = i + 1;
            if line.trim().is_empty() || line.starts_with('#') {
                continue;
            }
            let fields: Vec<&str> = line.split('\t').collect();
            if fields.len() != 4 {
                return Err(FssError::Manifest { line: line_no, reason: format!("expected 4 fields, got {}", fields.len()) });
            }
            let class_id: u32 = fields[2]
                .parse()
                .map_err(|_| FssError::Manifest { line: line_no, reason: format!("bad class id `{}`", fields[2]) })?;
            let class_name = fields[3].to_string();
            if fields[0].is_empty() || fields[1].is_empty() || class_name.is_empty() {
                return Err(FssError::Manifest { line: line_no, reason: "empty field".into() });
            }
            if let Some(prev) = names.insert(class_id, class_name.clone()) {
                if prev != class_name {
                    return Err(FssError::Manifest {
                        line: line_no,
                        reason: format!("class {class_id} named both `{prev}` and `{class_name}`"),
                    });
                }
            }
            records.push(ManifestRecord {
                image_path: PathBuf::from(fields[0]),
                mask_path: PathBuf::from(fields[1]),
                class_id,
                class_name,
            });
        }
        Ok(Self { name: name.to_string(), root: root.to_path_buf(), records })
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)?;
        let root = path.parent().map(Path::to_path_buf).unwrap_or_default();
        let name = root.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_else(|| "dataset".into());
        Self::parse(&text, &name, &root)
    }

    pub fn to_tsv(&self) -> String {
        let mut out = String::new();
        for r in &self.records {
            out.push_str(&format!(
                "{}\t{}\t{}\t{}\n",
                r.image_path.display(),
                r.mask_path.display(),
                r.class_id,
                r.class_name
            ));
        }
        out
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_tsv())?;
        Ok(())
    }

    /// Class id to name, ordered by id.
    pub fn classes(&self) -> BTreeMap<u32, String> {
        self.records.iter().map(|r| (r.class_id, r.class_name.clone())).collect()
    }
}

/// One loaded image with its single-class mask and derived tight box.
#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub image: RgbImage,
    pub mask: Mask,
    pub bbox: BoundingBox,
    pub class_id: u32,
    pub class_name: String,
}

impl Sample {
    /// Derives the box from the mask; an empty mask is rejected.
    pub fn new(image: RgbImage, mask: Mask, class_id: u32, class_name: String) -> Result<Self> {
        if mask.dims() != (image.height() as usize, image.width() as usize) {
            return Err(FssError::Shape(format!(
                "mask {:?} vs image {}x{}",
                mask.dims(),
                image.height(),
                image.width()
            )));
        }
        let bbox = mask.tight_box().ok_or(FssError::DegenerateMask { height: mask.height(), width: mask.width() })?;
        Ok(Self { image, mask, bbox, class_id, class_name })
    }
}

/// In-memory dataset indexed by class.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub name: String,
    samples: Vec<Sample>,
    by_class: BTreeMap<u32, Vec<usize>>,
}

impl Dataset {
    pub fn from_samples(name: &str, samples: Vec<Sample>) -> Self {
        let mut by_class: BTreeMap<u32, Vec<usize>> = BTreeMap::new();
        for (i, s) in samples.iter().enumerate() {
            by_class.entry(s.class_id).or_default().push(i);
        }
        Self { name: name.to_string(), samples, by_class }
    }

    /// Reads every record; with `image_size`, images are resized bilinearly and
    /// masks with nearest sampling to a square of that side.
    pub fn load(manifest: &DatasetManifest, image_size: Option<usize>) -> Result<Self> {
        let mut samples = Vec::with_capacity(manifest.records.len());
        for (i, r) in manifest.records.iter().enumerate() {
            let wrap = |e: FssError| FssError::Manifest { line: i + 1, reason: e.to_string() };
            let mut img = image::open(manifest.root.join(&r.image_path)).map_err(|e| wrap(e.into()))?.to_rgb8();
            let gray: GrayImage = image::open(manifest.root.join(&r.mask_path)).map_err(|e| wrap(e.into()))?.to_luma8();
            let mut mask = Mask::from_bytes(
                gray.height() as usize,
                gray.width() as usize,
                &gray.as_raw().iter().map(|&v| u8::from(v >= 128)).collect::<Vec<_>>(),
            )
            .map_err(wrap)?;
            if let Some(s) = image_size {
                if img.dimensions() != (s as u32, s as u32) {
                    img = image::imageops::resize(&img, s as u32, s as u32, FilterType::Triangle);
                    mask = mask.resize_nearest(s, s);
                }
            }
            samples.push(Sample::new(img, mask, r.class_id, r.class_name.clone()).map_err(wrap)?);
        }
        Ok(Self::from_samples(&manifest.name, samples))
    }

    /// Writes `manifest.tsv`, `images/*.png` and `masks/*.png` (0/255) under `dir`.
    pub fn write_to(&self, dir: &Path) -> Result<DatasetManifest> {
        fs::create_dir_all(dir.join("images"))?;
        fs::create_dir_all(dir.join("masks"))?;
        let mut records = Vec::with_capacity(self.samples.len());
        for (i, s) in self.samples.iter().enumerate() {
            let image_path = PathBuf::from(format!("images/{i:05}.png"));
            let mask_path = PathBuf::from(format!("masks/{i:05}.png"));
            s.image.save(dir.join(&image_path))?;
            let raster = GrayImage::from_raw(s.mask.width() as u32, s.mask.height() as u32, s.mask.to_raster())
                .expect("raster size matches mask");
            raster.save(dir.join(&mask_path))?;
            records.push(ManifestRecord { image_path, mask_path, class_id: s.class_id, class_name: s.class_name.clone() });
        }
        let manifest = DatasetManifest { name: self.name.clone(), root: dir.to_path_buf(), records };
        manifest.write(&dir.join("manifest.tsv"))?;
        Ok(manifest)
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn sample(&self, i: usize) -> &Sample {
        &self.samples[i]
    }

    pub fn samples(&self) -> &[Sample] {
        &self.samples
    }

    pub fn class_ids(&self) -> Vec<u32> {
        self.by_class.keys().copied().collect()
    }

    pub fn records_of(&self, class_id: u32) -> &[usize] {
        self.by_class.get(&class_id).map(Vec::as_slice).unwrap_or(&[])
    }

    pub fn class_name(&self, class_id: u32) -> Option<&str> {
        self.records_of(class_id).first().map(|&i| self.samples[i].class_name.as_str())
    }
}

/// Splits `class_ids` into `(base, novel)`; fold `f` holds out the contiguous
/// block `[f*m, (f+1)*m)` with `m = len / n_folds`.
pub fn split_folds(class_ids: &[u32], fold: usize, n_folds: usize) -> Result<(Vec<u32>, Vec<u32>)> {
    if n_folds == 0 || class_ids.len() % n_folds != 0 || class_ids.is_empty() {
        return Err(FssError::Validation(format!("{} classes cannot be split evenly into {n_folds} folds", class_ids.len())));
    }
    if fold >= n_folds {
        return Err(FssError::Validation(format!("fold {fold} out of range for {n_folds} folds")));
    }
    let m = class_ids.len() / n_folds;
    let novel = class_ids[fold * m..(fold + 1) * m].to_vec();
    let base = class_ids[..fold * m].iter().chain(&class_ids[(fold + 1) * m..]).copied().collect();
    Ok((base, novel))
}

/// Query and support record indices sharing one class.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct Episode {
    pub query: usize,
    pub supports: Vec<usize>,
    pub class_id: u32,
    pub pattern: PatternTag,
    pub fold: usize,
}

impl Episode {
    pub fn k(&self) -> usize {
        self.supports.len()
    }

    pub fn records(&self) -> impl Iterator<Item = usize> + '_ {
        std::iter::once(self.query).chain(self.supports.iter().copied())
    }
}

/// Draws episodes from a fixed class pool with its own seeded stream.
#[derive(Clone, Debug)]
pub struct EpisodeSampler {
    rng: ChaCha8Rng,
    classes: Vec<u32>,
    k: usize,
    pattern: PatternTag,
    fold: usize,
}

impl EpisodeSampler {
    /// Fails when a class in the pool has fewer than `k + 1` records.
    pub fn new(dataset: &Dataset, classes: &[u32], k: usize, seed: u64, pattern: PatternTag, fold: usize) -> Result<Self> {
        if k == 0 {
            return Err(FssError::Validation("K must be at least 1".into()));
        }
        if classes.is_empty() {
            return Err(FssError::Validation("empty class pool".into()));
        }
        for &c in classes {
            let available = dataset.records_of(c).len();
            if available < k + 1 {
                return Err(FssError::Sampling { class_id: c, available, required: k + 1 });
            }
        }
        Ok(Self { rng: ChaCha8Rng::seed_from_u64(seed), classes: classes.to_vec(), k, pattern, fold })
    }

    pub fn next_episode(&mut self, dataset: &Dataset) -> Episode {
        let class_id = self.classes[self.rng.gen_range(0..self.classes.len())];
        let pool = dataset.records_of(class_id);
        let picks = index::sample(&mut self.rng, pool.len(), self.k + 1);
        let mut it = picks.iter().map(|i| pool[i]);
        let query = it.next().expect("k + 1 >= 2 picks");
        Episode { query, supports: it.collect(), class_id, pattern: self.pattern, fold: self.fold }
    }

    pub fn take(&mut self, dataset: &Dataset, n: usize) -> Vec<Episode> {
        (0..n).map(|_| self.next_episode(dataset)).collect()
    }
}

/// A single episode drawn from a fresh stream seeded with `seed`.
pub fn sample_episode(
    dataset: &Dataset,
    classes: &[u32],
    k: usize,
    seed: u64,
    pattern: PatternTag,
    fold: usize,
) -> Result<Episode> {
    Ok(EpisodeSampler::new(dataset, classes, k, seed, pattern, fold)?.next_episode(dataset))
}
