mod config;

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, bail, Context, Result};
use clap::{Parser, Subcommand};
use image::{GrayImage, Rgb, RgbImage};

use config::{EncoderKind, PatternChoice, PredictorKind, RunConfig};
use fss::encoder::{normalize_image, EncoderConfig, ProjectionEncoder};
use fss::episodes::{Dataset, DatasetManifest};
use fss::mask::Mask;
use fss::model::{Geometry, ModelConfig, QueryFeatures, ShotFeatures};
use fss::patterns::{PatternGroup, PatternTag, RawSupport};
use fss::synth::synth_generate;
use fss::training::{evaluate, load_checkpoint, write_report, ModelPredictor, OraclePredictor, Predictor, Trainer};
use fss::{Model32, StubEncoder32};

#[derive(Parser, Debug)]
#[command(name = "fss", version, about = "Few-shot segmentation with image, mask, box and text guidance")]
struct Cli {
    #[command(subcommand)]
    command: Command,
    /// key=value configuration file.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[arg(long, global = true)]
    fold: Option<usize>,
    /// Pattern name, or `all` for every pattern of the checkpoint's group.
    #[arg(long, global = true)]
    pattern: Option<String>,
    #[arg(long, global = true)]
    k: Option<usize>,
    #[arg(long, global = true)]
    output: Option<PathBuf>,
    /// Allow replacing an existing output.
    #[arg(long, global = true)]
    force: bool,
    /// `stub` or `adapter:<path>`.
    #[arg(long, global = true)]
    encoder: Option<String>,
    /// Dataset manifest.
    #[arg(long, global = true)]
    dataset: Option<PathBuf>,
    #[arg(long, global = true)]
    checkpoint: Option<PathBuf>,
    /// Extra `key=value` overrides, applied after all other flags.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Write a synthetic-shapes dataset (manifest, images, masks).
    Synth,
    /// Train one pattern group on the base classes of a fold.
    Train,
    /// Evaluate on novel-class episodes and write the metrics table.
    Eval,
    /// Segment one query image from one support and write the mask.
    Predict {
        #[arg(long)]
        query: Option<PathBuf>,
        #[arg(long)]
        support_image: Option<PathBuf>,
        #[arg(long)]
        support_mask: Option<PathBuf>,
        /// x_min,y_min,x_max,y_max (half-open).
        #[arg(long = "box")]
        support_box: Option<String>,
        #[arg(long)]
        class_name: Option<String>,
        /// Also write the query with the mask tinted red.
        #[arg(long)]
        overlay: Option<PathBuf>,
    },
    /// List the task patterns and the support fields each requires.
    Patterns,
}

fn resolve(cli: &Cli) -> Result<RunConfig> {
    let mut c = RunConfig::default();
    if let Some(path) = &cli.config {
        c.apply_file(path)?;
    }
    let mut flags: Vec<(&str, String)> = Vec::new();
    let path = |p: &Path| p.display().to_string();
    if let Some(v) = cli.seed {
        flags.push(("seed", v.to_string()));
    }
    if let Some(v) = cli.fold {
        flags.push(("fold", v.to_string()));
    }
    if let Some(v) = &cli.pattern {
        flags.push(("pattern", v.clone()));
    }
    if let Some(v) = cli.k {
        flags.push(("k", v.to_string()));
    }
    if let Some(v) = &cli.output {
        flags.push(("output", path(v)));
    }
    if let Some(v) = &cli.encoder {
        flags.push(("encoder", v.clone()));
    }
    if let Some(v) = &cli.dataset {
        flags.push(("dataset", path(v)));
    }
    if let Some(v) = &cli.checkpoint {
        flags.push(("checkpoint", path(v)));
    }
    if let Command::Predict { query, support_image, support_mask, support_box, class_name, overlay } = &cli.command {
        for (k, v) in [("query", query), ("support_image", support_image), ("support_mask", support_mask), ("overlay", overlay)] {
            if let Some(p) = v {
                flags.push((k, path(p)));
            }
        }
        if let Some(b) = support_box {
            flags.push(("support_box", b.clone()));
        }
        if let Some(n) = class_name {
            flags.push(("class_name", n.clone()));
        }
    }
    for (k, v) in flags {
        c.set(k, &v)?;
    }
    for o in &cli.overrides {
        let (k, v) = o.split_once('=').ok_or_else(|| anyhow!("--set expects KEY=VALUE, got `{o}`"))?;
        c.set(k.trim(), v)?;
    }
    c.validate()?;
    Ok(c)
}

/// Refuses to replace an existing, non-empty output unless `force`.
fn claim_output(path: &Path, force: bool, is_dir: bool) -> Result<()> {
    let occupied = if path.is_dir() { fs::read_dir(path)?.next().is_some() } else { path.exists() };
    if occupied {
        if !force {
            bail!("output {} already exists (pass --force to replace it)", path.display());
        }
        if path.is_dir() {
            fs::remove_dir_all(path)?;
        } else {
            fs::remove_file(path)?;
        }
    }
    if is_dir {
        fs::create_dir_all(path)?;
    } else if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent)?;
    }
    Ok(())
}

fn required<'a>(v: &'a Option<PathBuf>, what: &str) -> Result<&'a PathBuf> {
    v.as_ref().ok_or_else(|| anyhow!("missing {what}"))
}

fn build_encoder(c: &RunConfig) -> Result<StubEncoder32> {
    Ok(match &c.encoder {
        EncoderKind::Stub => ProjectionEncoder::stub(EncoderConfig { seed: c.encoder_seed, ..EncoderConfig::default() })?,
        EncoderKind::Adapter(p) => {
            ProjectionEncoder::load(p).with_context(|| format!("loading encoder weights from {}", p.display()))?
        }
    })
}

/// Loads a checkpoint and checks it was trained on this encoder's geometry.
fn load_model(c: &RunConfig, encoder: &StubEncoder32) -> Result<(Model32, fss::training::TrainConfig)> {
    let path = required(&c.checkpoint, "checkpoint (--checkpoint)")?;
    let (model, train, _) = load_checkpoint::<f32>(path).with_context(|| format!("loading {}", path.display()))?;
    let geo = Geometry::probe(encoder, model.geometry().image_dims)?;
    if &geo != model.geometry() {
        bail!("checkpoint was trained with a different encoder geometry");
    }
    Ok((model, train))
}

fn load_dataset(c: &RunConfig, image_size: usize) -> Result<Dataset> {
    let path = required(&c.dataset, "dataset manifest (--dataset)")?;
    let manifest = DatasetManifest::read(path).with_context(|| format!("reading {}", path.display()))?;
    Ok(Dataset::load(&manifest, Some(image_size))?)
}

fn cmd_synth(c: &RunConfig, force: bool) -> Result<()> {
    let out = required(&c.output, "output directory (--output)")?;
    claim_output(out, force, true)?;
    let ds = synth_generate(c.train.rng_seed, c.synth_classes, c.synth_per_class, c.train.image_size)?;
    let manifest = ds.write_to(out)?;
    println!("wrote {} records in {} classes to {}", manifest.records.len(), c.synth_classes, out.display());
    Ok(())
}

fn cmd_train(c: &RunConfig, force: bool) -> Result<()> {
    let out = required(&c.output, "output directory (--output)")?;
    let dataset = load_dataset(c, c.train.image_size)?;
    let encoder = build_encoder(c)?;
    claim_output(out, force, true)?;
    fs::write(out.join("config.txt"), c.to_text())?;
    let s = c.train.image_size;
    let geometry = Geometry::probe(&encoder, (s, s))?;
    let model = Model32::new(ModelConfig { seed: c.train.rng_seed, ..ModelConfig::default() }, geometry)?;
    let mut trainer = Trainer::new(c.train.clone(), model)?;
    trainer.run(&encoder, &dataset, c.fold, Some(out))?;
    let last = trainer.losses.last().copied().unwrap_or(f64::NAN);
    println!("trained {} steps, final loss {last:.4}, checkpoints in {}", trainer.step, out.display());
    Ok(())
}

fn cmd_eval(c: &RunConfig, force: bool) -> Result<()> {
    let encoder = build_encoder(c)?;
    let (model, image_size, patterns): (Option<Model32>, usize, Vec<PatternTag>) = match c.predictor {
        PredictorKind::Oracle => {
            let patterns = match c.pattern {
                PatternChoice::One(p) => vec![p],
                PatternChoice::Group => PatternTag::ALL.to_vec(),
            };
            (None, c.train.image_size, patterns)
        }
        PredictorKind::Model => {
            let (model, train) = load_model(c, &encoder)?;
            let patterns = match c.pattern {
                PatternChoice::One(p) => vec![p],
                PatternChoice::Group => train.pattern_group.eval_patterns().to_vec(),
            };
            if let PatternChoice::One(p) = c.pattern {
                if PatternGroup::of_pattern(p) != train.pattern_group {
                    log::warn!("pattern {p} is not served by the checkpoint's group {}", train.pattern_group);
                }
            }
            (Some(model), train.image_size, patterns)
        }
    };
    let dataset = load_dataset(c, image_size)?;
    let predictor: Box<dyn Predictor + '_> = match &model {
        Some(m) => Box::new(ModelPredictor { model: m, encoder: &encoder }),
        None => Box::new(OraclePredictor),
    };
    let mut reports = Vec::new();
    for p in patterns {
        let r = evaluate(predictor.as_ref(), &dataset, c.fold, c.train.n_folds, p, c.k, c.train.eval_episodes, c.train.rng_seed)?;
        println!("fold {} pattern {p} K={}: mIoU {:.4} FB-IoU {:.4}", c.fold, c.k, r.metrics.miou(), r.metrics.fbiou());
        reports.push(r);
    }
    if let Some(out) = &c.output {
        claim_output(out, force, false)?;
        write_report(out, &reports)?;
    }
    Ok(())
}

fn read_mask(path: &Path) -> Result<Mask> {
    let g = image::open(path).with_context(|| format!("reading {}", path.display()))?.to_luma8();
    Ok(Mask::from_bytes(g.height() as usize, g.width() as usize, &g.as_raw().iter().map(|&v| u8::from(v >= 128)).collect::<Vec<_>>())?)
}

fn read_rgb(path: &Path, size: usize) -> Result<RgbImage> {
    let img = image::open(path).with_context(|| format!("reading {}", path.display()))?.to_rgb8();
    Ok(if img.dimensions() == (size as u32, size as u32) {
        img
    } else {
        image::imageops::resize(&img, size as u32, size as u32, image::imageops::FilterType::Triangle)
    })
}

fn cmd_predict(c: &RunConfig, force: bool) -> Result<()> {
    let PatternChoice::One(pattern) = c.pattern else { bail!("predict needs a single --pattern") };
    let out = required(&c.output, "output mask path (--output)")?;
    let encoder = build_encoder(c)?;
    let (model, train) = load_model(c, &encoder)?;
    let size = train.image_size;
    let query_rgb = read_rgb(required(&c.query, "query image (--query)")?, size)?;
    let query_image = normalize_image::<f32>(&query_rgb);
    let mut raw = RawSupport::<f32>::default();
    let mut support_dims = None;
    if let Some(p) = &c.support_image {
        let img = image::open(p).with_context(|| format!("reading {}", p.display()))?.to_rgb8();
        support_dims = Some((img.height() as usize, img.width() as usize));
        raw.image = Some(normalize_image(&read_rgb(p, size)?));
    }
    if let Some(p) = &c.support_mask {
        raw.mask = Some(read_mask(p)?.resize_nearest(size, size));
    }
    if let Some(b) = c.support_box {
        // box coordinates refer to the original support image
        let (h, w) = support_dims.unwrap_or((size, size));
        let sy = |v: usize| (v * size).div_ceil(h).min(size);
        let sx = |v: usize| (v * size).div_ceil(w).min(size);
        raw.bbox = Some(fss::mask::BoundingBox {
            x_min: b.x_min * size / w,
            y_min: b.y_min * size / h,
            x_max: sx(b.x_max),
            y_max: sy(b.y_max),
        });
    }
    raw.class_name = c.class_name.clone();
    let query = QueryFeatures::encode(&encoder, &query_image)?;
    let shot = ShotFeatures::prepare(&encoder, &query_image, &query, &raw, pattern)?;
    let mask = model.predict(&query, std::slice::from_ref(&shot))?;
    claim_output(out, force, false)?;
    GrayImage::from_raw(size as u32, size as u32, mask.to_raster()).expect("mask raster size").save(out)?;
    if let Some(path) = &c.overlay {
        claim_output(path, force, false)?;
        let mut o = query_rgb.clone();
        for (x, y, px) in o.enumerate_pixels_mut() {
            if mask.get(y as usize, x as usize) {
                let Rgb([r, g, b]) = *px;
                *px = Rgb([((r as u16 + 255) / 2) as u8, g / 2, b / 2]);
            }
        }
        o.save(path)?;
    }
    println!("wrote {}x{} mask with {} foreground pixels to {}", size, size, mask.area(), out.display());
    Ok(())
}

fn cmd_patterns() {
    for p in PatternTag::ALL {
        let fields: Vec<&str> = p.required_fields().iter().map(|f| f.name()).collect();
        println!("{}\t{}\t{}", p.name(), PatternGroup::of_pattern(p), fields.join(","));
    }
}

fn run(cli: &Cli) -> Result<()> {
    if let Command::Patterns = cli.command {
        cmd_patterns();
        return Ok(());
    }
    let c = resolve(cli)?;
    match cli.command {
        Command::Synth => cmd_synth(&c, cli.force),
        Command::Train => cmd_train(&c, cli.force),
        Command::Eval => cmd_eval(&c, cli.force),
        Command::Predict { .. } => cmd_predict(&c, cli.force),
        Command::Patterns => unreachable!(),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let reason: Vec<String> = e.chain().map(|c| c.to_string()).collect();
            eprintln!("error: {}", reason.join(": "));
            ExitCode::from(1)
        }
    }
}
