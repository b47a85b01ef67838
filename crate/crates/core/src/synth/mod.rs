//! Deterministic synthetic scenes under parameterized domain shifts.

mod dataset;

pub use dataset::{
    build_dataset, load_dataset, save_dataset, DataConfig, Dataset, Split, DATASET_FORMAT_VERSION,
};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Shape, Tensor};

pub const DEFAULT_SIZE: usize = 64;

/// Photometric transform standing in for one latent domain.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DomainSpec {
    pub name: String,
    pub brightness_gain: f64,
    pub contrast: f64,
    pub noise_std: f64,
    pub channel_tint: [f64; 3],
}

impl DomainSpec {
    pub fn identity(name: &str) -> Self {
        DomainSpec {
            name: name.into(),
            brightness_gain: 1.0,
            contrast: 1.0,
            noise_std: 0.0,
            channel_tint: [0.0; 3],
        }
    }

    pub fn validate(&self) -> Result<()> {
        let finite = [self.brightness_gain, self.contrast, self.noise_std]
            .iter()
            .chain(&self.channel_tint)
            .all(|v| v.is_finite());
        if self.name.is_empty() {
            return Err(Error::InvalidConfig("domain name is empty".into()));
        }
        if !finite {
            return Err(Error::InvalidConfig(format!("domain '{}' has non-finite fields", self.name)));
        }
        if self.noise_std < 0.0 {
            return Err(Error::InvalidConfig(format!(
                "domain '{}': noise_std must be >= 0",
                self.name
            )));
        }
        Ok(())
    }

    pub fn source() -> Self {
        DomainSpec::identity("source")
    }

    /// Day, night and rain stand-ins.
    pub fn defaults() -> Vec<DomainSpec> {
        vec![
            DomainSpec {
                name: "day-like".into(),
                brightness_gain: 1.2,
                contrast: 1.15,
                noise_std: 0.02,
                channel_tint: [0.1, 0.05, -0.06],
            },
            DomainSpec {
                name: "night-like".into(),
                brightness_gain: 0.65,
                contrast: 0.9,
                noise_std: 0.04,
                channel_tint: [-0.04, -0.01, 0.1],
            },
            DomainSpec {
                name: "noisy-rain-like".into(),
                brightness_gain: 1.05,
                contrast: 1.0,
                noise_std: 0.08,
                channel_tint: [0.0, -0.08, 0.12],
            },
        ]
    }
}

/// One image with its evaluation-only annotations.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledSample {
    /// Shape (1, 3, h, w), values in [0, 1].
    pub image: Tensor<f32>,
    /// Row-major class index per pixel.
    pub label: Vec<u8>,
    /// Index into the declared domain list; `None` for the canonical domain.
    pub true_domain: Option<usize>,
}

fn class_color(class: usize, classes: usize) -> [f64; 3] {
    if class == 0 {
        return [0.42, 0.45, 0.40];
    }
    let hue = (class - 1) as f64 / (classes - 1) as f64 * 6.0;
    let (s, v) = (0.75, 0.9);
    let c = v * s;
    let x = c * (1.0 - ((hue % 2.0) - 1.0).abs());
    let (r, g, b) = match hue as usize {
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

/// A background plus one rectangle, ellipse or stripe per foreground class,
/// drawn in random order with jittered class colors, a global illumination
/// factor and mild texture.
pub fn generate_scene(seed: u64, height: usize, width: usize, classes: usize) -> Result<LabeledSample> {
    if height < 32 || width < 32 || !(2..=255).contains(&classes) {
        return Err(Error::InvalidConfig(format!(
            "scene needs h, w >= 32 and 2 <= C <= 255, got {height}x{width}, C={classes}"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut label = vec![0u8; height * width];
    let (h, w) = (height as f64, width as f64);
    let mut order: Vec<usize> = (1..classes).collect();
    order.shuffle(&mut rng);
    for class in order {
        let kind = rng.random_range(0..3u8);
        let inside: Box<dyn Fn(f64, f64) -> bool> = match kind {
            0 => {
                let (rh, rw) = (rng.random_range(0.22..0.42) * h, rng.random_range(0.22..0.42) * w);
                let (y0, x0) = (rng.random_range(0.0..h - rh), rng.random_range(0.0..w - rw));
                Box::new(move |y, x| y >= y0 && y < y0 + rh && x >= x0 && x < x0 + rw)
            }
            1 => {
                let (ry, rx) = (rng.random_range(0.12..0.22) * h, rng.random_range(0.12..0.22) * w);
                let (cy, cx) = (rng.random_range(ry..h - ry), rng.random_range(rx..w - rx));
                Box::new(move |y, x| ((y - cy) / ry).powi(2) + ((x - cx) / rx).powi(2) <= 1.0)
            }
            _ => {
                let vertical = rng.random_bool(0.5);
                let extent = if vertical { w } else { h };
                let thick = rng.random_range(0.08..0.14) * extent;
                let start = rng.random_range(0.0..extent - thick);
                Box::new(move |y, x| {
                    let t = if vertical { x } else { y };
                    t >= start && t < start + thick
                })
            }
        };
        for y in 0..height {
            for x in 0..width {
                if inside(y as f64 + 0.5, x as f64 + 0.5) {
                    label[y * width + x] = class as u8;
                }
            }
        }
    }
    let illumination = rng.random_range(0.85..1.15);
    let palette: Vec<[f64; 3]> = (0..classes)
        .map(|c| class_color(c, classes).map(|v| (v + rng.random_range(-0.08..0.08)) * illumination))
        .collect();
    let texture = Normal::new(0.0, 0.03).expect("valid std");
    let plane = height * width;
    let mut data = vec![0f32; 3 * plane];
    for (i, &l) in label.iter().enumerate() {
        for ch in 0..3 {
            let v = palette[l as usize][ch] + texture.sample(&mut rng);
            data[ch * plane + i] = v.clamp(0.0, 1.0) as f32;
        }
    }
    Ok(LabeledSample {
        image: Tensor::from_vec(Shape::new(1, 3, height, width), data)?,
        label,
        true_domain: None,
    })
}

/// `clamp(clamp(contrast·(x−0.5)+0.5)·gain + tint + noise)`, per pixel.
pub fn apply_domain(sample: &LabeledSample, spec: &DomainSpec, domain: Option<usize>, seed: u64) -> Result<LabeledSample> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let noise = Normal::new(0.0, spec.noise_std).map_err(|e| Error::InvalidConfig(e.to_string()))?;
    let shape = sample.image.shape();
    let plane = shape.plane();
    let mut image = sample.image.clone();
    for (i, v) in image.data_mut().iter_mut().enumerate() {
        let ch = (i / plane) % 3;
        let x = *v as f64;
        let mut y = (spec.contrast * (x - 0.5) + 0.5).clamp(0.0, 1.0) * spec.brightness_gain
            + spec.channel_tint[ch];
        if spec.noise_std > 0.0 {
            y += noise.sample(&mut rng);
        }
        *v = y.clamp(0.0, 1.0) as f32;
    }
    Ok(LabeledSample {
        image,
        label: sample.label.clone(),
        true_domain: domain,
    })
}

/// A stretch of consecutive stream samples from one domain.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ScheduleEntry {
    pub domain: String,
    pub length: usize,
}

impl ScheduleEntry {
    pub fn new(domain: &str, length: usize) -> Self {
        ScheduleEntry {
            domain: domain.into(),
            length,
        }
    }
}

/// `cycles` repetitions of every domain in order, `segment` samples each.
pub fn cyclic_schedule(domains: &[DomainSpec], segment: usize, cycles: usize) -> Vec<ScheduleEntry> {
    (0..cycles)
        .flat_map(|_| domains.iter().map(|d| ScheduleEntry::new(&d.name, segment)))
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub index: usize,
    pub true_domain: Option<usize>,
    pub seed: u64,
}

/// Images visible to adaptation; no labels, no domains.
#[derive(Debug, Clone, PartialEq)]
pub struct StreamImages {
    pub images: Vec<Tensor<f32>>,
}

/// Ground truth held back for evaluation and analysis.
#[derive(Debug, Clone, PartialEq)]
pub struct EvalChannel {
    pub labels: Vec<Vec<u8>>,
    pub domains: Vec<Option<usize>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Stream {
    pub images: StreamImages,
    pub eval: EvalChannel,
    pub manifest: Vec<ManifestEntry>,
}

impl Stream {
    pub fn len(&self) -> usize {
        self.manifest.len()
    }

    pub fn is_empty(&self) -> bool {
        self.manifest.is_empty()
    }

    pub fn from_samples(samples: Vec<LabeledSample>, seeds: Vec<u64>) -> Self {
        let manifest = samples
            .iter()
            .zip(&seeds)
            .enumerate()
            .map(|(index, (s, &seed))| ManifestEntry {
                index,
                true_domain: s.true_domain,
                seed,
            })
            .collect();
        let mut images = Vec::with_capacity(samples.len());
        let mut labels = Vec::with_capacity(samples.len());
        let mut domains = Vec::with_capacity(samples.len());
        for s in samples {
            images.push(s.image);
            labels.push(s.label);
            domains.push(s.true_domain);
        }
        Stream {
            images: StreamImages { images },
            eval: EvalChannel { labels, domains },
            manifest,
        }
    }

    pub fn sample(&self, i: usize) -> LabeledSample {
        LabeledSample {
            image: self.images.images[i].clone(),
            label: self.eval.labels[i].clone(),
            true_domain: self.eval.domains[i],
        }
    }
}

/// Scene shape parameters shared by every generated sample.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SceneSize {
    pub height: usize,
    pub width: usize,
    pub classes: usize,
}

impl Default for SceneSize {
    fn default() -> Self {
        SceneSize {
            height: DEFAULT_SIZE,
            width: DEFAULT_SIZE,
            classes: crate::network::DEFAULT_CLASSES,
        }
    }
}

/// Renders one sample; the scene and the domain noise draw from independent
/// generators derived from `seed`.
pub fn render(seed: u64, size: SceneSize, spec: &DomainSpec, domain: Option<usize>) -> Result<LabeledSample> {
    let scene = generate_scene(seed, size.height, size.width, size.classes)?;
    let mut noise_seed = ChaCha8Rng::seed_from_u64(seed);
    noise_seed.set_stream(1);
    apply_domain(&scene, spec, domain, noise_seed.random())
}

/// Per-sample seeds drawn from one generator on the given stream.
pub(crate) fn derive_seeds(seed: u64, stream: u64, count: usize) -> Vec<u64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    (0..count).map(|_| rng.random()).collect()
}

fn resolve(specs: &[DomainSpec], name: &str) -> Result<usize> {
    specs
        .iter()
        .position(|s| s.name == name)
        .ok_or_else(|| Error::InvalidConfig(format!("schedule references undeclared domain '{name}'")))
}

/// Samples for every schedule entry in order.
pub fn build_stream(specs: &[DomainSpec], schedule: &[ScheduleEntry], size: SceneSize, seed: u64) -> Result<Stream> {
    for s in specs {
        s.validate()?;
    }
    let mut domains = Vec::new();
    for entry in schedule {
        let d = resolve(specs, &entry.domain)?;
        domains.extend(std::iter::repeat_n(d, entry.length));
    }
    let seeds = derive_seeds(seed, 0, domains.len());
    let samples = crate::par::map_range(domains.len(), |i| render(seeds[i], size, &specs[domains[i]], Some(domains[i])))
        .into_iter()
        .collect::<Result<Vec<_>>>()?;
    Ok(Stream::from_samples(samples, seeds))
}

/// `per_domain` samples of each declared domain, grouped by domain.
pub fn build_eval_split(specs: &[DomainSpec], per_domain: usize, size: SceneSize, seed: u64) -> Result<Stream> {
    let schedule: Vec<ScheduleEntry> = specs.iter().map(|s| ScheduleEntry::new(&s.name, per_domain)).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(2);
    build_stream(specs, &schedule, size, rng.random())
}

/// Canonical-domain samples (no domain shift).
pub fn build_source(count: usize, size: SceneSize, seed: u64, stream: u64) -> Result<Stream> {
    let seeds = derive_seeds(seed, stream, count);
    let source = DomainSpec::source();
    let samples = crate::par::map_range(count, |i| render(seeds[i], size, &source, None))
        .into_iter()
        .collect::<Result<Vec<_>>>()?;
    Ok(Stream::from_samples(samples, seeds))
}
