//! Seeded synthetic segmentation domains and the `.prds` dataset file.
//!
//! Each image holds up to three non-overlapping shapes on a noisy
//! background: circle (class 1), square (class 2), triangle (class 3).
//! Domains A and B differ only in shape intensities, noise level and size
//! range. Domain C additionally inverts the contrast and uses a much finer
//! foreground texture.

use std::fmt;
use std::io::{Read, Write};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::par::Exec;
use crate::rng::Rng;
use crate::tensor::Tensor;

pub const IMAGE_SIZE: usize = 32;
pub const NUM_CLASSES: usize = 4;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Domain {
    A,
    B,
    C,
}

impl fmt::Display for Domain {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{self:?}")
    }
}

impl FromStr for Domain {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "A" | "a" => Ok(Domain::A),
            "B" | "b" => Ok(Domain::B),
            "C" | "c" => Ok(Domain::C),
            _ => Err(Error::Format(format!("unknown domain {s:?}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DomainSpec {
    pub name: Domain,
    /// Shape half-extent range in pixels.
    pub size_range: (f32, f32),
    /// Mean intensity of classes 1, 2, 3.
    pub class_means: [f32; 3],
    pub background: f32,
    pub noise_sigma: f32,
    /// Foreground texture, in cycles per image width.
    pub texture_freq: f32,
    pub texture_amp: f32,
}

impl DomainSpec {
    pub fn of(domain: Domain) -> Self {
        match domain {
            Domain::A => DomainSpec {
                name: Domain::A,
                size_range: (4.0, 8.0),
                class_means: [0.55, 0.70, 0.85],
                background: 0.15,
                noise_sigma: 0.08,
                texture_freq: 2.0,
                texture_amp: 0.04,
            },
            Domain::B => DomainSpec {
                name: Domain::B,
                size_range: (5.0, 9.0),
                class_means: [0.50, 0.65, 0.80],
                background: 0.15,
                noise_sigma: 0.10,
                texture_freq: 2.0,
                texture_amp: 0.04,
            },
            Domain::C => DomainSpec {
                name: Domain::C,
                size_range: (4.0, 8.0),
                class_means: [0.45, 0.30, 0.15],
                background: 0.85,
                noise_sigma: 0.10,
                texture_freq: 9.0,
                texture_amp: 0.12,
            },
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum ShapeKind {
    Circle,
    Square,
    Triangle,
}

impl ShapeKind {
    pub fn class_id(self) -> u8 {
        match self {
            ShapeKind::Circle => 1,
            ShapeKind::Square => 2,
            ShapeKind::Triangle => 3,
        }
    }
}

/// An analytic shape centred at `(cx, cy)` with half-extent `r`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Shape {
    pub kind: ShapeKind,
    pub cx: f32,
    pub cy: f32,
    pub r: f32,
}

impl Shape {
    /// Whether the point `(x, y)` lies inside; pixels are sampled at their centres.
    pub fn contains(&self, x: f32, y: f32) -> bool {
        let (dx, dy) = (x - self.cx, y - self.cy);
        match self.kind {
            ShapeKind::Circle => dx * dx + dy * dy <= self.r * self.r,
            ShapeKind::Square => dx.abs() <= self.r && dy.abs() <= self.r,
            // Apex at (cx, cy - r), base from (cx - r, cy + r) to (cx + r, cy + r).
            ShapeKind::Triangle => dy <= self.r && 2.0 * dx.abs() <= dy + self.r,
        }
    }

    fn overlaps(&self, other: &Shape) -> bool {
        let gap = 1.0;
        (self.cx - other.cx).abs() < self.r + other.r + gap && (self.cy - other.cy).abs() < self.r + other.r + gap
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    /// `(1, H, W)` intensities in `[0, 1]`.
    pub image: Vec<f32>,
    /// `(H, W)` class ids.
    pub mask: Vec<u8>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub height: usize,
    pub width: usize,
    pub samples: Vec<Sample>,
}

const PLACEMENT_TRIES: usize = 50;
const INCLUDE_PROB: f64 = 0.75;

fn generate_one(spec: &DomainSpec, rng: &mut Rng) -> (Sample, Vec<Shape>) {
    let size = IMAGE_SIZE as f32;
    let mut shapes: Vec<Shape> = Vec::with_capacity(3);
    for kind in [ShapeKind::Circle, ShapeKind::Square, ShapeKind::Triangle] {
        if !rng.bernoulli(INCLUDE_PROB) {
            continue;
        }
        let r = rng.uniform(spec.size_range.0 as f64, spec.size_range.1 as f64) as f32;
        for _ in 0..PLACEMENT_TRIES {
            let lo = r + 1.0;
            let hi = size - r - 1.0;
            let cand = Shape {
                kind,
                cx: rng.uniform(lo as f64, hi as f64) as f32,
                cy: rng.uniform(lo as f64, hi as f64) as f32,
                r,
            };
            if shapes.iter().all(|s| !s.overlaps(&cand)) {
                shapes.push(cand);
                break;
            }
        }
    }
    let phase = rng.uniform(0.0, std::f64::consts::TAU) as f32;
    let angle = rng.uniform(0.0, std::f64::consts::PI) as f32;
    let (ca, sa) = (angle.cos(), angle.sin());
    let k = std::f32::consts::TAU * spec.texture_freq / size;
    let mut image = vec![0.0f32; IMAGE_SIZE * IMAGE_SIZE];
    let mut mask = vec![0u8; IMAGE_SIZE * IMAGE_SIZE];
    for y in 0..IMAGE_SIZE {
        for x in 0..IMAGE_SIZE {
            let (px, py) = (x as f32 + 0.5, y as f32 + 0.5);
            let i = y * IMAGE_SIZE + x;
            let mut v = spec.background;
            if let Some(s) = shapes.iter().find(|s| s.contains(px, py)) {
                let c = s.kind.class_id();
                mask[i] = c;
                v = spec.class_means[c as usize - 1] + spec.texture_amp * (k * (px * ca + py * sa) + phase).sin();
            }
            v += spec.noise_sigma * rng.normal() as f32;
            image[i] = v.clamp(0.0, 1.0);
        }
    }
    (Sample { image, mask }, shapes)
}

/// Samples together with the shapes that produced their masks.
pub fn generate_annotated(spec: &DomainSpec, n: usize, seed: u64) -> Vec<(Sample, Vec<Shape>)> {
    Exec::default().map(n, |i| generate_one(spec, &mut Rng::derive(seed, i as u64)))
}

/// `n` samples, deterministic in `(spec, n, seed)`; sample `i` depends only
/// on `(spec, seed, i)`.
pub fn generate(spec: &DomainSpec, n: usize, seed: u64) -> Dataset {
    let samples = generate_annotated(spec, n, seed).into_iter().map(|(s, _)| s).collect();
    Dataset { height: IMAGE_SIZE, width: IMAGE_SIZE, samples }
}

/// Auto-encoder label: the image replicated into four channels.
pub fn autoencoder_target(s: &Sample) -> Tensor {
    let plane = s.image.len();
    let mut data = Vec::with_capacity(NUM_CLASSES * plane);
    for _ in 0..NUM_CLASSES {
        data.extend_from_slice(&s.image);
    }
    let side = (plane as f64).sqrt() as usize;
    let (h, w) = if side * side == plane { (side, side) } else { (1, plane) };
    Tensor::new(&[NUM_CLASSES, h, w], data).expect("consistent shape")
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn plane(&self) -> usize {
        self.height * self.width
    }

    pub fn subset(&self, n: usize) -> Dataset {
        Dataset { height: self.height, width: self.width, samples: self.samples[..n.min(self.len())].to_vec() }
    }

    /// Stacks the chosen samples into an `(N, 1, H, W)` batch and `(N, H, W)` labels.
    pub fn batch(&self, indices: &[usize]) -> (Tensor, Vec<u8>) {
        let plane = self.plane();
        let mut x = Vec::with_capacity(indices.len() * plane);
        let mut y = Vec::with_capacity(indices.len() * plane);
        for &i in indices {
            x.extend_from_slice(&self.samples[i].image);
            y.extend_from_slice(&self.samples[i].mask);
        }
        let t = Tensor::new(&[indices.len(), 1, self.height, self.width], x).expect("consistent batch");
        (t, y)
    }

    /// `(N, 4, H, W)` auto-encoder targets for the chosen samples.
    pub fn autoencoder_batch(&self, indices: &[usize]) -> Tensor {
        let plane = self.plane();
        let mut data = Vec::with_capacity(indices.len() * NUM_CLASSES * plane);
        for &i in indices {
            for _ in 0..NUM_CLASSES {
                data.extend_from_slice(&self.samples[i].image);
            }
        }
        Tensor::new(&[indices.len(), NUM_CLASSES, self.height, self.width], data).expect("consistent batch")
    }

    /// Mean normalized intensity histogram over all pixels, `bins` buckets on `[0, 1]`.
    pub fn intensity_histogram(&self, bins: usize) -> Vec<f64> {
        let mut h = vec![0.0; bins];
        let mut total = 0.0f64;
        for s in &self.samples {
            for &v in &s.image {
                let b = ((v * bins as f32) as usize).min(bins - 1);
                h[b] += 1.0;
                total += 1.0;
            }
        }
        h.iter_mut().for_each(|v| *v /= total.max(1.0));
        h
    }

    /// Serializes as `.prds`: magic `PRDS`, `u32` version 1, `u32` count,
    /// `u16` H, `u16` W, `u8` channels, `u8` classes, then per sample the
    /// image as `C*H*W` little-endian `f32` and the mask as `H*W` bytes.
    pub fn to_bytes(&self) -> Vec<u8> {
        let plane = self.plane();
        let mut out = Vec::with_capacity(18 + self.len() * plane * 5);
        out.extend_from_slice(b"PRDS");
        out.extend_from_slice(&1u32.to_le_bytes());
        out.extend_from_slice(&(self.len() as u32).to_le_bytes());
        out.extend_from_slice(&(self.height as u16).to_le_bytes());
        out.extend_from_slice(&(self.width as u16).to_le_bytes());
        out.push(1);
        out.push(NUM_CLASSES as u8);
        for s in &self.samples {
            for v in &s.image {
                out.extend_from_slice(&v.to_le_bytes());
            }
            out.extend_from_slice(&s.mask);
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Dataset> {
        let bad = |m: &str| Error::Format(format!("dataset: {m}"));
        if bytes.len() < 18 {
            return Err(bad("truncated header"));
        }
        if &bytes[..4] != b"PRDS" {
            return Err(bad("bad magic"));
        }
        let u32_at = |o: usize| u32::from_le_bytes(bytes[o..o + 4].try_into().unwrap());
        let u16_at = |o: usize| u16::from_le_bytes(bytes[o..o + 2].try_into().unwrap());
        let version = u32_at(4);
        if version != 1 {
            return Err(bad(&format!("unsupported version {version}")));
        }
        let count = u32_at(8) as usize;
        let (h, w) = (u16_at(12) as usize, u16_at(14) as usize);
        let (channels, classes) = (bytes[16], bytes[17]);
        if channels != 1 || classes as usize != NUM_CLASSES {
            return Err(bad(&format!("expected 1 channel and {NUM_CLASSES} classes, got {channels} and {classes}")));
        }
        let plane = h * w;
        let per = plane * 4 + plane;
        if bytes.len() != 18 + count * per {
            return Err(bad(&format!("expected {} bytes, found {}", 18 + count * per, bytes.len())));
        }
        let mut samples = Vec::with_capacity(count);
        for s in 0..count {
            let base = 18 + s * per;
            let image: Vec<f32> = bytes[base..base + 4 * plane]
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
                .collect();
            let mask = bytes[base + 4 * plane..base + per].to_vec();
            if image.iter().any(|v| !v.is_finite()) {
                return Err(bad("non-finite pixel"));
            }
            if mask.iter().any(|&c| c as usize >= NUM_CLASSES) {
                return Err(bad("class id out of range"));
            }
            samples.push(Sample { image, mask });
        }
        Ok(Dataset { height: h, width: w, samples })
    }

    pub fn write_to(&self, mut w: impl Write) -> Result<()> {
        w.write_all(&self.to_bytes())?;
        Ok(())
    }

    pub fn read_from(mut r: impl Read) -> Result<Dataset> {
        let mut buf = Vec::new();
        r.read_to_end(&mut buf)?;
        Dataset::from_bytes(&buf)
    }
}
