use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::SegSample;
use crate::error::{Error, Result};

/// Parameters of the synthetic shapes task.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SyntheticTaskConfig {
    pub height: usize,
    pub width: usize,
    pub num_classes: usize,
    pub min_shapes: usize,
    pub max_shapes: usize,
    /// Standard deviation of additive per-pixel Gaussian noise.
    pub noise_std: f64,
    pub palette_seed: u64,
    /// Probability that a shape is drawn small (a few pixels across).
    pub small_fraction: f64,
}

impl Default for SyntheticTaskConfig {
    fn default() -> Self {
        Self {
            height: 64,
            width: 64,
            num_classes: 5,
            min_shapes: 1,
            max_shapes: 4,
            noise_std: 0.1,
            palette_seed: 7,
            small_fraction: 0.3,
        }
    }
}

impl SyntheticTaskConfig {
    pub fn validate(&self) -> Result<()> {
        if self.num_classes < 2 || self.num_classes > 255 {
            return Err(Error::config(format!("num_classes {} outside [2, 255]", self.num_classes)));
        }
        if self.height == 0 || self.width == 0 {
            return Err(Error::config("image size must be positive"));
        }
        if self.min_shapes > self.max_shapes {
            return Err(Error::config("min_shapes exceeds max_shapes"));
        }
        if !(self.noise_std >= 0.0 && self.noise_std.is_finite()) {
            return Err(Error::config("noise_std must be finite and non-negative"));
        }
        if !(0.0..=1.0).contains(&self.small_fraction) {
            return Err(Error::config("small_fraction outside [0, 1]"));
        }
        Ok(())
    }

    /// Class colors in `[0.1, 0.9]³`, kept at least 0.25 apart where possible.
    pub fn palette(&self) -> Vec<[f32; 3]> {
        let mut rng = ChaCha8Rng::seed_from_u64(self.palette_seed);
        let mut colors: Vec<[f32; 3]> = Vec::with_capacity(self.num_classes);
        while colors.len() < self.num_classes {
            let mut candidate = [0f32; 3];
            for attempt in 0..256 {
                candidate = [0; 3].map(|_: i32| rng.random_range(0.1f32..0.9));
                let far = colors.iter().all(|c| {
                    c.iter().zip(&candidate).map(|(a, b)| (a - b).powi(2)).sum::<f32>() >= 0.0625
                });
                if far || attempt == 255 {
                    break;
                }
            }
            colors.push(candidate);
        }
        colors
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum ShapeKind {
    /// Pixels with `y0 ≤ y < y1`, `x0 ≤ x < x1`.
    Rect { y0: usize, x0: usize, y1: usize, x1: usize },
    /// Pixels whose centers fall inside the axis-aligned ellipse.
    Ellipse { cy: f64, cx: f64, ry: f64, rx: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Shape {
    pub class: u8,
    pub kind: ShapeKind,
}

impl Shape {
    pub fn contains(&self, y: usize, x: usize) -> bool {
        match self.kind {
            ShapeKind::Rect { y0, x0, y1, x1 } => (y0..y1).contains(&y) && (x0..x1).contains(&x),
            ShapeKind::Ellipse { cy, cx, ry, rx } => {
                let dy = (y as f64 + 0.5 - cy) / ry;
                let dx = (x as f64 + 0.5 - cx) / rx;
                dy * dy + dx * dx <= 1.0
            }
        }
    }

    /// Pixel bounding box `(y0, x0, y1, x1)`, clipped to the image.
    fn bounds(&self, h: usize, w: usize) -> (usize, usize, usize, usize) {
        match self.kind {
            ShapeKind::Rect { y0, x0, y1, x1 } => (y0.min(h), x0.min(w), y1.min(h), x1.min(w)),
            ShapeKind::Ellipse { cy, cx, ry, rx } => {
                let lo = |c: f64, r: f64| (c - r - 1.0).floor().max(0.0) as usize;
                let hi = |c: f64, r: f64, n: usize| ((c + r + 1.0).ceil().max(0.0) as usize).min(n);
                (lo(cy, ry), lo(cx, rx), hi(cy, ry, h), hi(cx, rx, w))
            }
        }
    }
}

/// Background class plus shapes in drawing order (later shapes on top).
#[derive(Debug, Clone, PartialEq)]
pub struct Scene {
    pub background: u8,
    pub shapes: Vec<Shape>,
}

impl Scene {
    /// Label map by painting shapes in order over their bounding boxes.
    pub fn rasterize(&self, height: usize, width: usize) -> Vec<u8> {
        let mut labels = vec![self.background; height * width];
        for shape in &self.shapes {
            let (y0, x0, y1, x1) = shape.bounds(height, width);
            for y in y0..y1 {
                for x in x0..x1 {
                    if shape.contains(y, x) {
                        labels[y * width + x] = shape.class;
                    }
                }
            }
        }
        labels
    }
}

pub fn generate_scene(rng: &mut impl Rng, task: &SyntheticTaskConfig) -> Scene {
    let (h, w, k) = (task.height, task.width, task.num_classes);
    let background = rng.random_range(0..k) as u8;
    let count = rng.random_range(task.min_shapes..=task.max_shapes);
    let shapes = (0..count)
        .map(|_| {
            // any class but the background
            let mut class = rng.random_range(0..k - 1) as u8;
            if class >= background {
                class += 1;
            }
            let small = rng.random_bool(task.small_fraction);
            let extent = |rng: &mut _, n: usize| {
                let (lo, hi) = if small {
                    (2.max(n / 32), 3.max(n / 8))
                } else {
                    (2.max(n / 6), 3.max(n / 2))
                };
                Rng::random_range(rng, lo..=hi).min(n)
            };
            let (sh, sw) = (extent(rng, h), extent(rng, w));
            let y0 = rng.random_range(0..=h - sh);
            let x0 = rng.random_range(0..=w - sw);
            let kind = if rng.random_bool(0.5) {
                ShapeKind::Rect {
                    y0,
                    x0,
                    y1: y0 + sh,
                    x1: x0 + sw,
                }
            } else {
                ShapeKind::Ellipse {
                    cy: y0 as f64 + sh as f64 / 2.0,
                    cx: x0 as f64 + sw as f64 / 2.0,
                    ry: sh as f64 / 2.0,
                    rx: sw as f64 / 2.0,
                }
            };
            Shape { class, kind }
        })
        .collect();
    Scene { background, shapes }
}

/// Colors a label map with the class palette plus clamped Gaussian noise.
pub fn render(rng: &mut impl Rng, labels: &[u8], palette: &[[f32; 3]], noise_std: f64) -> Vec<f32> {
    let noise = (noise_std > 0.0).then(|| Normal::new(0.0, noise_std).expect("finite std"));
    let mut image = Vec::with_capacity(labels.len() * 3);
    for &label in labels {
        for &c in &palette[label as usize] {
            let n = noise.as_ref().map_or(0.0, |d| d.sample(rng));
            image.push((c as f64 + n).clamp(0.0, 1.0) as f32);
        }
    }
    image
}

/// One synthetic image with its exact label map.
pub fn generate_sample(rng: &mut impl Rng, task: &SyntheticTaskConfig) -> SegSample {
    generate_with_scene(rng, task, &task.palette()).0
}

pub(crate) fn generate_with_scene(
    rng: &mut impl Rng,
    task: &SyntheticTaskConfig,
    palette: &[[f32; 3]],
) -> (SegSample, Scene) {
    let scene = generate_scene(rng, task);
    let labels = scene.rasterize(task.height, task.width);
    let image = render(rng, &labels, palette, task.noise_std);
    let sample = SegSample {
        height: task.height,
        width: task.width,
        image,
        labels,
    };
    (sample, scene)
}

/// `count` samples from `seed`; sample `i` depends only on `(seed, i)`.
pub fn generate_samples(task: &SyntheticTaskConfig, seed: u64, start: u64, count: usize) -> Vec<SegSample> {
    let palette = task.palette();
    (0..count as u64)
        .map(|i| generate_with_scene(&mut sample_rng(seed, start + i), task, &palette).0)
        .collect()
}

/// Independent random stream for sample `index` under `seed`.
pub fn sample_rng(seed: u64, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index);
    rng
}
