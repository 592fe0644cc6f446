//! Procedural top-down canopy images with exact pixel-level ground truth.
//!
//! Every pixel belongs to one class: soil (brown), grass (striped green),
//! clover (white elliptical blobs) or weeds (dark-red blobs). Composition
//! fractions are the class pixel counts divided by the vegetation pixel
//! count, so they sum to one by construction.

use std::path::Path;

use super::{write_manifest, write_unlabeled, CaptureSource, Manifest, SampleRecord, Schema, Split};
use crate::error::{Error, Result};
use crate::tensor::{SeededRng, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PixelClass {
    Soil,
    Grass,
    Clover,
    Weed,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SceneParams {
    /// Target share of non-soil pixels.
    pub vegetation: f32,
    /// Target clover share of the vegetation.
    pub clover: f32,
    /// Target weed share of the vegetation.
    pub weeds: f32,
    /// Global brightness multiplier.
    pub illumination: f32,
}

impl SceneParams {
    fn draw(rng: &mut SeededRng) -> Self {
        Self {
            vegetation: rng.uniform_range(0.55, 1.0),
            clover: rng.uniform_range(0.0, 0.45),
            weeds: rng.uniform_range(0.0, 0.25),
            illumination: rng.uniform_range(0.8, 1.2),
        }
    }
}

#[derive(Debug, Clone)]
pub struct Scene {
    pub image: Tensor,
    pub classes: Vec<PixelClass>,
    /// (grass, clover, weeds) shares of the vegetation pixels.
    pub fractions: [f64; 3],
    /// Vegetation pixels over all pixels.
    pub density: f64,
}

fn paint_blobs(
    classes: &mut [PixelClass],
    size: usize,
    rng: &mut SeededRng,
    paint: PixelClass,
    over: &[PixelClass],
    target: usize,
    radius: (f32, f32),
) {
    let count = |c: &[PixelClass]| c.iter().filter(|&&p| p == paint).count();
    let mut painted = count(classes);
    let mut attempts = 0;
    while painted < target && attempts < 10_000 {
        attempts += 1;
        let cy = rng.uniform() * size as f32;
        let cx = rng.uniform() * size as f32;
        let ry = rng.uniform_range(radius.0, radius.1).max(0.75);
        let rx = rng.uniform_range(radius.0, radius.1).max(0.75);
        let y_lo = (cy - ry).floor().max(0.0) as usize;
        let y_hi = ((cy + ry).ceil() as usize).min(size);
        let x_lo = (cx - rx).floor().max(0.0) as usize;
        let x_hi = ((cx + rx).ceil() as usize).min(size);
        for y in y_lo..y_hi {
            for x in x_lo..x_hi {
                if painted >= target {
                    return;
                }
                let dy = (y as f32 + 0.5 - cy) / ry;
                let dx = (x as f32 + 0.5 - cx) / rx;
                let cell = &mut classes[y * size + x];
                if dy * dy + dx * dx <= 1.0 && over.contains(cell) {
                    *cell = paint;
                    painted += 1;
                }
            }
        }
    }
}

/// Renders one scene. The class map is painted first (soil, then clover and
/// weeds over grass); colours are derived from it afterwards.
pub fn render_scene(size: usize, params: &SceneParams, rng: &mut SeededRng) -> Result<Scene> {
    if size < 16 {
        return Err(Error::Config(format!("synthetic images need size ≥ 16, got {size}")));
    }
    let total = size * size;
    let s = size as f32;
    let mut classes = vec![PixelClass::Grass; total];

    let soil_target = ((1.0 - params.vegetation.clamp(0.0, 1.0)) * total as f32).round() as usize;
    let soil_target = soil_target.min(total - 1);
    paint_blobs(&mut classes, size, rng, PixelClass::Soil, &[PixelClass::Grass], soil_target, (s / 16.0, s / 6.0));

    let veg = total - classes.iter().filter(|&&c| c == PixelClass::Soil).count();
    let clover_target = (params.clover.clamp(0.0, 1.0) * veg as f32).round() as usize;
    paint_blobs(&mut classes, size, rng, PixelClass::Clover, &[PixelClass::Grass], clover_target, (s / 20.0, s / 9.0));
    let weed_target = (params.weeds.clamp(0.0, 1.0) * veg as f32).round() as usize;
    paint_blobs(&mut classes, size, rng, PixelClass::Weed, &[PixelClass::Grass], weed_target, (s / 24.0, s / 10.0));

    let mut counts = [0usize; 4];
    for c in &classes {
        counts[*c as usize] += 1;
    }
    let veg = counts[1] + counts[2] + counts[3];
    let fractions = [
        counts[1] as f64 / veg as f64,
        counts[2] as f64 / veg as f64,
        counts[3] as f64 / veg as f64,
    ];

    let phase = rng.uniform() * std::f32::consts::TAU;
    let slope = rng.uniform_range(0.2, 0.8);
    let mut data = vec![0.0f32; 3 * total];
    for (i, class) in classes.iter().enumerate() {
        let (y, x) = ((i / size) as f32, (i % size) as f32);
        let mut jitter = || rng.normal() * 0.035;
        let rgb = match class {
            PixelClass::Soil => [0.42 + jitter(), 0.30 + jitter(), 0.18 + jitter()],
            PixelClass::Grass => {
                let stripe = 0.12 * (1.3 * x + slope * y + phase).sin();
                [0.18 + jitter(), 0.52 + stripe + jitter(), 0.14 + jitter()]
            }
            PixelClass::Clover => [0.84 + jitter(), 0.90 + jitter(), 0.80 + jitter()],
            PixelClass::Weed => [0.44 + jitter(), 0.08 + jitter(), 0.13 + jitter()],
        };
        for (c, v) in rgb.iter().enumerate() {
            data[c * total + i] = (v * params.illumination).clamp(0.0, 1.0);
        }
    }
    // Round through 8 bits so the in-memory image equals the file on disk.
    data.iter_mut().for_each(|v| *v = (*v * 255.0).round() / 255.0);

    Ok(Scene {
        image: Tensor::new(vec![3, size, size], data)?,
        classes,
        fractions,
        density: veg as f64 / total as f64,
    })
}

/// Relative weights of train/val/test; counts are assigned by largest
/// remainder.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SplitPlan {
    pub train: usize,
    pub val: usize,
    pub test: usize,
}

impl Default for SplitPlan {
    /// Proportions of the Irish dataset: 52 train, 104 val, 372 test.
    fn default() -> Self {
        Self {
            train: 52,
            val: 104,
            test: 372,
        }
    }
}

impl SplitPlan {
    pub fn counts(&self, n: usize) -> [usize; 3] {
        let weights = [self.train, self.val, self.test];
        let total: usize = weights.iter().sum();
        if total == 0 {
            return [n, 0, 0];
        }
        let mut counts = weights.map(|w| n * w / total);
        let mut order = [0usize, 1, 2];
        order.sort_by_key(|&i| std::cmp::Reverse((n * weights[i]) % total));
        let mut left = n - counts.iter().sum::<usize>();
        for i in order {
            if left == 0 {
                break;
            }
            counts[i] += 1;
            left -= 1;
        }
        counts
    }
}

impl std::str::FromStr for SplitPlan {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        let parts: Vec<usize> = s
            .split(':')
            .map(|p| p.trim().parse::<usize>())
            .collect::<std::result::Result<_, _>>()
            .map_err(|_| Error::Config(format!("split plan `{s}` must be TRAIN:VAL:TEST")))?;
        match parts.as_slice() {
            [train, val, test] => Ok(Self {
                train: *train,
                val: *val,
                test: *test,
            }),
            _ => Err(Error::Config(format!("split plan `{s}` must be TRAIN:VAL:TEST"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthConfig {
    pub n_labeled: usize,
    pub n_unlabeled: usize,
    pub size: usize,
    pub seed: u64,
    pub split: SplitPlan,
}

const LABELED: u64 = 0;
const UNLABELED: u64 = 1;

fn herbage(scene: &Scene, rng: &mut SeededRng) -> (f64, f64) {
    let mass = (3000.0 * scene.density * (1.0 + 0.05 * rng.normal() as f64)).max(0.0);
    let height = (2.0 + 10.0 * scene.density * (1.0 + 0.05 * rng.normal() as f64)).max(0.0);
    (mass, height)
}

/// Writes `labeled/*.ppm`, `unlabeled/*.ppm`, `manifest.csv` (irish3 schema)
/// and `unlabeled.csv` under `out_dir`. Image `i` depends only on
/// `(seed, i)`.
pub fn synth_dataset(out_dir: impl AsRef<Path>, config: &SynthConfig) -> Result<Manifest> {
    let out = out_dir.as_ref();
    if config.size < 16 {
        return Err(Error::Config(format!("synthetic images need size ≥ 16, got {}", config.size)));
    }
    for sub in ["labeled", "unlabeled"] {
        let dir = out.join(sub);
        std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    }

    let [n_train, n_val, _] = config.split.counts(config.n_labeled);
    let mut records = Vec::with_capacity(config.n_labeled);
    for i in 0..config.n_labeled {
        let mut rng = SeededRng::derive(config.seed, &[LABELED, i as u64]);
        let params = SceneParams::draw(&mut rng);
        let scene = render_scene(config.size, &params, &mut rng)?;
        let (mass, height) = herbage(&scene, &mut rng);
        let rel = format!("labeled/{i:05}.ppm");
        super::write_ppm(out.join(&rel), &scene.image)?;
        let split = if i < n_train {
            Split::Train
        } else if i < n_train + n_val {
            Split::Val
        } else {
            Split::Test
        };
        records.push(SampleRecord {
            path: rel,
            fractions: scene.fractions.to_vec(),
            mass: Some(mass),
            height: Some(height),
            split,
            source: CaptureSource::Synthetic,
        });
    }

    let mut unlabeled = Vec::with_capacity(config.n_unlabeled);
    for i in 0..config.n_unlabeled {
        let mut rng = SeededRng::derive(config.seed, &[UNLABELED, i as u64]);
        let params = SceneParams::draw(&mut rng);
        let scene = render_scene(config.size, &params, &mut rng)?;
        let rel = format!("unlabeled/{i:05}.ppm");
        super::write_ppm(out.join(&rel), &scene.image)?;
        unlabeled.push(rel);
    }

    write_manifest(out.join("manifest.csv"), Schema::Irish3, &records)?;
    write_unlabeled(out.join("unlabeled.csv"), &unlabeled)?;
    Ok(Manifest {
        schema: Schema::Irish3,
        root: out.to_path_buf(),
        records,
        unlabeled_paths: unlabeled,
    })
}
