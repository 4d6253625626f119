//! Synthetic segmentation data: coloured disks, squares and triangles on a
//! noisy background.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use netshrink::Tensor;

use crate::error::{Result, TrainError};
use crate::ops::IGNORE_LABEL;

pub const IMAGE_CHANNELS: usize = 3;
pub const MAX_CLASSES: usize = 4;

/// Mean colour per shape class (class 0 is background at 0).
const CLASS_COLOURS: [[f32; 3]; 3] = [[1.0, -0.6, -0.4], [-0.5, 1.0, -0.5], [-0.4, -0.6, 1.0]];
const COLOUR_JITTER: f32 = 0.25;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SyntheticDatasetSpec {
    pub height: usize,
    pub width: usize,
    /// Background plus up to three shape classes.
    pub n_classes: usize,
    pub train_samples: usize,
    pub val_samples: usize,
    /// Standard deviation of per-pixel Gaussian noise.
    pub noise: f64,
    pub seed: u64,
}

impl Default for SyntheticDatasetSpec {
    fn default() -> Self {
        Self {
            height: 64,
            width: 64,
            n_classes: 4,
            train_samples: 64,
            val_samples: 16,
            noise: 0.3,
            seed: 0,
        }
    }
}

impl SyntheticDatasetSpec {
    /// Small images for test-suite runs.
    pub fn small() -> Self {
        Self {
            height: 16,
            width: 16,
            train_samples: 32,
            val_samples: 16,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(2..=MAX_CLASSES).contains(&self.n_classes) {
            return Err(TrainError::config("dataset.n_classes", format!("must be in 2..=4, got {}", self.n_classes)));
        }
        if self.height < 8 || self.width < 8 || !self.height.is_multiple_of(2) || !self.width.is_multiple_of(2) {
            return Err(TrainError::config(
                "dataset.height/width",
                format!("must be even and at least 8, got {}x{}", self.height, self.width),
            ));
        }
        if self.train_samples == 0 || self.val_samples == 0 {
            return Err(TrainError::config("dataset.train_samples/val_samples", "must be positive"));
        }
        if !(self.noise >= 0.0 && self.noise.is_finite()) {
            return Err(TrainError::config("dataset.noise", format!("must be finite and >= 0, got {}", self.noise)));
        }
        Ok(())
    }
}

/// Images `[n, 3, h, w]` and labels `[n, h, w]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Split {
    pub height: usize,
    pub width: usize,
    pub images: Vec<f32>,
    pub labels: Vec<u8>,
}

impl Split {
    pub fn len(&self) -> usize {
        self.labels.len() / (self.height * self.width)
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    fn pixels(&self) -> usize {
        self.height * self.width
    }

    pub fn image(&self, i: usize) -> &[f32] {
        let n = IMAGE_CHANNELS * self.pixels();
        &self.images[i * n..(i + 1) * n]
    }

    pub fn label(&self, i: usize) -> &[u8] {
        &self.labels[i * self.pixels()..(i + 1) * self.pixels()]
    }

    /// Stack samples into a batch tensor and flat labels.
    pub fn batch(&self, indices: &[usize]) -> (Tensor<f64>, Vec<u8>) {
        let mut x = Vec::with_capacity(indices.len() * IMAGE_CHANNELS * self.pixels());
        let mut y = Vec::with_capacity(indices.len() * self.pixels());
        for &i in indices {
            x.extend(self.image(i).iter().map(|&v| v as f64));
            y.extend_from_slice(self.label(i));
        }
        let shape = [indices.len(), IMAGE_CHANNELS, self.height, self.width];
        (Tensor::from_vec(&shape, x).expect("batch shape"), y)
    }

    /// Pixel count per class.
    pub fn histogram(&self, n_classes: usize) -> Vec<u64> {
        let mut h = vec![0u64; n_classes];
        for &l in &self.labels {
            if l != IGNORE_LABEL {
                h[l as usize] += 1;
            }
        }
        h
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub n_classes: usize,
    pub train: Split,
    pub val: Split,
}

#[derive(Clone, Copy)]
enum Shape {
    Disk,
    Square,
    Triangle,
}

fn inside(shape: Shape, dy: f64, dx: f64, r: f64) -> bool {
    match shape {
        Shape::Disk => dx * dx + dy * dy <= r * r,
        Shape::Square => dx.abs() <= r * 0.85 && dy.abs() <= r * 0.85,
        // Upright isosceles triangle with apex at -r and base at +r.
        Shape::Triangle => (-r..=r).contains(&dy) && dx.abs() <= (dy + r) * 0.5,
    }
}

fn draw_sample(spec: &SyntheticDatasetSpec, rng: &mut ChaCha8Rng, image: &mut [f32], label: &mut [u8]) {
    let (h, w) = (spec.height, spec.width);
    let noise = Normal::new(0.0, spec.noise).expect("validated noise");
    for v in image.iter_mut() {
        *v = noise.sample(rng) as f32;
    }
    label.fill(0);
    // One shape per class, each in its own cell of a 2×2 grid.
    let mut cells = [0usize, 1, 2, 3];
    for i in (1..cells.len()).rev() {
        cells.swap(i, rng.random_range(0..=i));
    }
    let (ch, cw) = (h as f64 / 2.0, w as f64 / 2.0);
    for class in 1..spec.n_classes {
        let shape = [Shape::Disk, Shape::Square, Shape::Triangle][class - 1];
        let cell = cells[class - 1];
        let r = rng.random_range(0.25..0.45) * ch.min(cw);
        let cy = (cell / 2) as f64 * ch + ch / 2.0 + rng.random_range(-0.5..0.5) * (ch / 2.0 - r).max(0.0);
        let cx = (cell % 2) as f64 * cw + cw / 2.0 + rng.random_range(-0.5..0.5) * (cw / 2.0 - r).max(0.0);
        let colour: Vec<f32> = CLASS_COLOURS[class - 1]
            .iter()
            .map(|c| c + rng.random_range(-COLOUR_JITTER..COLOUR_JITTER))
            .collect();
        for y in 0..h {
            for x in 0..w {
                if inside(shape, y as f64 + 0.5 - cy, x as f64 + 0.5 - cx, r) {
                    label[y * w + x] = class as u8;
                    for (c, col) in colour.iter().enumerate() {
                        image[(c * h + y) * w + x] += col;
                    }
                }
            }
        }
    }
}

fn split(spec: &SyntheticDatasetSpec, n: usize, rng: &mut ChaCha8Rng) -> Split {
    let px = spec.height * spec.width;
    let mut images = vec![0.0f32; n * IMAGE_CHANNELS * px];
    let mut labels = vec![0u8; n * px];
    for i in 0..n {
        draw_sample(
            spec,
            rng,
            &mut images[i * IMAGE_CHANNELS * px..(i + 1) * IMAGE_CHANNELS * px],
            &mut labels[i * px..(i + 1) * px],
        );
    }
    Split {
        height: spec.height,
        width: spec.width,
        images,
        labels,
    }
}

/// Deterministic train and validation splits. Every sample contains every
/// class, so every split does too.
pub fn generate_dataset(spec: &SyntheticDatasetSpec) -> Result<Dataset> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let train = split(spec, spec.train_samples, &mut rng);
    let val = split(spec, spec.val_samples, &mut rng);
    Ok(Dataset {
        n_classes: spec.n_classes,
        train,
        val,
    })
}

/// Random horizontal flip, then a random crop-and-resize back to the input
/// size with zoom factor in `[0.5, 2]`. Zooming out pads the image with zeros
/// and the labels with [`IGNORE_LABEL`].
pub fn augment(image: &[f32], label: &[u8], h: usize, w: usize, rng: &mut ChaCha8Rng) -> (Vec<f32>, Vec<u8>) {
    let flip = rng.random_bool(0.5);
    let scale: f64 = rng.random_range(0.5..=2.0);
    let (win_h, win_w) = (h as f64 / scale, w as f64 / scale);
    let pick = |rng: &mut ChaCha8Rng, win: f64, len: usize| {
        let slack = len as f64 - win;
        if slack >= 0.0 {
            rng.random_range(0.0..=slack)
        } else {
            rng.random_range(slack..=0.0)
        }
    };
    let y0 = pick(rng, win_h, h);
    let x0 = pick(rng, win_w, w);
    let src = |o: usize, origin: f64, win: f64, len: usize| origin + (o as f64 + 0.5) * win / len as f64 - 0.5;
    let read = |c: usize, y: isize, x: isize| -> f32 {
        if y < 0 || x < 0 || y >= h as isize || x >= w as isize {
            return 0.0;
        }
        let x = if flip { w - 1 - x as usize } else { x as usize };
        image[(c * h + y as usize) * w + x]
    };
    let mut out_img = vec![0.0f32; IMAGE_CHANNELS * h * w];
    let mut out_lab = vec![IGNORE_LABEL; h * w];
    for oy in 0..h {
        let sy = src(oy, y0, win_h, h);
        for ox in 0..w {
            let sx = src(ox, x0, win_w, w);
            let (fy, fx) = (sy.floor(), sx.floor());
            let (ty, tx) = ((sy - fy) as f32, (sx - fx) as f32);
            let (iy, ix) = (fy as isize, fx as isize);
            for c in 0..IMAGE_CHANNELS {
                let top = read(c, iy, ix) * (1.0 - tx) + read(c, iy, ix + 1) * tx;
                let bot = read(c, iy + 1, ix) * (1.0 - tx) + read(c, iy + 1, ix + 1) * tx;
                out_img[(c * h + oy) * w + ox] = top * (1.0 - ty) + bot * ty;
            }
            let (ny, nx) = (sy.round() as isize, sx.round() as isize);
            if ny >= 0 && nx >= 0 && ny < h as isize && nx < w as isize {
                let nx = if flip { w - 1 - nx as usize } else { nx as usize };
                out_lab[oy * w + ox] = label[ny as usize * w + nx];
            }
        }
    }
    (out_img, out_lab)
}
