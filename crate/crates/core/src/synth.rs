//! Seeded synthetic-shapes dataset: one textured, colored shape per image on
//! a noisy low-saturation background.

use image::{Rgb, RgbImage};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::episodes::{Dataset, Sample};
use crate::error::{FssError, Result};
use crate::mask::Mask;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Shape {
    Circle,
    Square,
    Triangle,
    Diamond,
    Cross,
    Ring,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Texture {
    Solid,
    Stripes,
    Checker,
}

const SHAPES: [Shape; 6] = [Shape::Circle, Shape::Square, Shape::Triangle, Shape::Diamond, Shape::Cross, Shape::Ring];
const TEXTURES: [Texture; 3] = [Texture::Solid, Texture::Stripes, Texture::Checker];
/// Hue band centers in degrees with their names.
const HUES: [(f64, &str); 6] = [(0.0, "red"), (45.0, "amber"), (120.0, "green"), (180.0, "cyan"), (235.0, "blue"), (300.0, "magenta")];

pub const MAX_CLASSES: usize = SHAPES.len() * TEXTURES.len() * HUES.len();

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ClassSpec {
    pub shape: Shape,
    pub hue_band: usize,
    pub texture: Texture,
}

impl ClassSpec {
    /// Bijection on `0..MAX_CLASSES` under which consecutive ids differ in every attribute.
    pub fn of(class_id: usize) -> Self {
        let c = class_id % MAX_CLASSES;
        let (a, b, d) = (c % 6, (c / 6) % 6, c / 36);
        Self { shape: SHAPES[a], hue_band: (a + b) % 6, texture: TEXTURES[(a + d) % 3] }
    }

    pub fn name(&self) -> String {
        let texture = match self.texture {
            Texture::Solid => "solid",
            Texture::Stripes => "striped",
            Texture::Checker => "checkered",
        };
        let shape = format!("{:?}", self.shape).to_lowercase();
        format!("{} {texture} {shape}", HUES[self.hue_band].1)
    }
}

fn hsv_to_rgb(h: f64, s: f64, v: f64) -> [f64; 3] {
    let h = h.rem_euclid(360.0) / 60.0;
    let c = v * s;
    let x = c * (1.0 - (h % 2.0 - 1.0).abs());
    let (r, g, b) = match h as u32 {
        0 => (c, x, 0.0),
        1 => (x, c, 0.0),
        2 => (0.0, c, x),
        3 => (0.0, x, c),
        4 => (x, 0.0, c),
        _ => (c, 0.0, x),
    };
    let m = v - c;
    [r + m, g + m, b + m]
}

fn to_u8(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Whether the pixel center `(px, py)` lies inside the shape of radius `r`
/// centered at `(cx, cy)` and rotated by `angle`.
fn inside(shape: Shape, px: f64, py: f64, cx: f64, cy: f64, r: f64, angle: f64) -> bool {
    let (dx, dy) = (px - cx, py - cy);
    let (s, c) = angle.sin_cos();
    let (u, v) = (c * dx + s * dy, -s * dx + c * dy);
    match shape {
        Shape::Circle => u * u + v * v <= r * r,
        Shape::Square => u.abs() <= r * 0.8 && v.abs() <= r * 0.8,
        Shape::Diamond => u.abs() + v.abs() <= r,
        Shape::Cross => (u.abs() <= r * 0.3 && v.abs() <= r) || (v.abs() <= r * 0.3 && u.abs() <= r),
        Shape::Ring => {
            let d2 = u * u + v * v;
            d2 <= r * r && d2 >= (0.55 * r) * (0.55 * r)
        }
        Shape::Triangle => {
            // equilateral, circumradius r, apex up in the rotated frame
            let h = r * 1.5;
            let top = -r;
            let t = (v - top) / h;
            (0.0..=1.0).contains(&t) && u.abs() <= t * r * 3f64.sqrt() / 2.0
        }
    }
}

fn render(spec: ClassSpec, size: usize, rng: &mut ChaCha8Rng) -> (RgbImage, Mask) {
    let s = size as f64;
    let radius = rng.gen_range(0.22..0.32) * s;
    let margin = radius.min(s / 2.0 - 1.0);
    let cx = rng.gen_range(margin..=s - margin);
    let cy = rng.gen_range(margin..=s - margin);
    let angle = match spec.shape {
        Shape::Circle | Shape::Ring => 0.0,
        _ => rng.gen_range(-0.35..0.35),
    };
    let hue = HUES[spec.hue_band].0 + rng.gen_range(-12.0..12.0);
    let fg = hsv_to_rgb(hue, rng.gen_range(0.7..0.95), rng.gen_range(0.65..0.95));
    let dark = fg.map(|c| c * 0.45);
    let period = rng.gen_range(5..9) as f64;
    let stripe_angle: f64 = rng.gen_range(0.0..std::f64::consts::PI);
    let (ss, sc) = stripe_angle.sin_cos();

    let base = rng.gen_range(0.25..0.75);
    let tint = hsv_to_rgb(rng.gen_range(0.0..360.0), rng.gen_range(0.0..0.15), 1.0);
    let mask = Mask::from_fn(size, size, |y, x| inside(spec.shape, x as f64 + 0.5, y as f64 + 0.5, cx, cy, radius, angle));
    let mut img = RgbImage::new(size as u32, size as u32);
    for y in 0..size {
        for x in 0..size {
            let px = if mask.get(y, x) {
                let (fx, fy) = (x as f64, y as f64);
                let on = match spec.texture {
                    Texture::Solid => true,
                    Texture::Stripes => ((sc * fx + ss * fy) / period).floor() as i64 % 2 == 0,
                    Texture::Checker => ((fx / period).floor() as i64 + (fy / period).floor() as i64) % 2 == 0,
                };
                let c = if on { fg } else { dark };
                c.map(|v| v + rng.gen_range(-0.03..0.03))
            } else {
                let n = rng.gen_range(-0.12..0.12);
                tint.map(|t| base * t + n)
            };
            img.put_pixel(x as u32, y as u32, Rgb(px.map(to_u8)));
        }
    }
    (img, mask)
}

/// Generates `n_classes * n_per_class` samples; fully determined by the arguments.
pub fn synth_generate(seed: u64, n_classes: usize, n_per_class: usize, image_size: usize) -> Result<Dataset> {
    if image_size == 0 || image_size % 16 != 0 {
        return Err(FssError::Validation(format!("image size {image_size} must be a positive multiple of 16")));
    }
    if n_classes == 0 || n_classes > MAX_CLASSES {
        return Err(FssError::Validation(format!("class count must be in 1..={MAX_CLASSES}")));
    }
    let mut samples = Vec::with_capacity(n_classes * n_per_class);
    for class_id in 0..n_classes {
        let spec = ClassSpec::of(class_id);
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ (class_id as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15));
        for _ in 0..n_per_class {
            let (image, mask) = render(spec, image_size, &mut rng);
            samples.push(Sample::new(image, mask, class_id as u32, spec.name())?);
        }
    }
    Ok(Dataset::from_samples("synthetic-shapes", samples))
}
