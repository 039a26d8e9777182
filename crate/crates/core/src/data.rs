//! Synthetic ellipse phantoms, Poisson low-dose measurement simulation, and
//! the binary dataset container.
//!
//! Dataset file layout (all integers little-endian):
//!
//! ```text
//! b"GLRD" | version: u16 | header_len: u32 | header: UTF-8 JSON
//! per sample: ground truth (n*n f64) | noisy sinogram (angles*bins f64) | crc32: u32
//! ```
//!
//! The CRC of each sample covers that sample's two float payloads.

use std::f64::consts::PI;
use std::fs;
use std::io;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Poisson};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::image::Image;
use crate::projector::{Geometry, Projector, ProjectorError, Sinogram};

pub const DATASET_MAGIC: &[u8; 4] = b"GLRD";
pub const DATASET_VERSION: u16 = 1;

/// Photons per detector bin used for the low-dose benchmark.
pub const DEFAULT_N0: f64 = 4096.0;

/// Attenuation scale (1/cm) mapping normalized phantom values to physical
/// line integrals; puts the thickest default-phantom rays near 5.
pub const DEFAULT_MU_MAX: f64 = 0.37;

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error("io error: {0}")]
    Io(#[from] io::Error),
    #[error("not a dataset file (bad magic bytes)")]
    Magic,
    #[error("unsupported dataset version {found} (expected {DATASET_VERSION})")]
    Version { found: u16 },
    #[error("dataset file truncated: {0}")]
    Truncated(String),
    #[error("checksum mismatch in sample {sample}")]
    Checksum { sample: usize },
    #[error("malformed header: {0}")]
    Header(String),
    #[error("empty dataset")]
    Empty,
    #[error(transparent)]
    Projector(#[from] ProjectorError),
}

/// Parameters of the random ellipse phantom family.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PhantomSpec {
    pub num_ellipses: usize,
    pub intensity_range: [f64; 2],
    pub rng_seed: u64,
}

impl Default for PhantomSpec {
    fn default() -> Self {
        Self {
            num_ellipses: 6,
            intensity_range: [0.1, 0.45],
            rng_seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct NoiseConfig {
    pub n0: f64,
    pub mu_max: f64,
    pub rng_seed: u64,
}

impl Default for NoiseConfig {
    fn default() -> Self {
        Self {
            n0: DEFAULT_N0,
            mu_max: DEFAULT_MU_MAX,
            rng_seed: 1,
        }
    }
}

impl NoiseConfig {
    pub fn validate(&self) -> Result<(), String> {
        if !(self.n0 > 0.0 && self.n0.is_finite()) {
            return Err(format!("n0 must be positive and finite, got {}", self.n0));
        }
        if !(self.mu_max > 0.0 && self.mu_max.is_finite()) {
            return Err(format!("mu_max must be positive and finite, got {}", self.mu_max));
        }
        Ok(())
    }
}

impl PhantomSpec {
    pub fn validate(&self) -> Result<(), String> {
        let [lo, hi] = self.intensity_range;
        if !(0.0..=1.0).contains(&lo) || !(0.0..=1.0).contains(&hi) || lo > hi {
            return Err(format!(
                "intensity_range must satisfy 0 <= lo <= hi <= 1, got [{lo}, {hi}]"
            ));
        }
        Ok(())
    }
}

struct Ellipse {
    cx: f64,
    cy: f64,
    a: f64,
    b: f64,
    cos: f64,
    sin: f64,
    value: f64,
}

impl Ellipse {
    #[inline]
    fn contains(&self, x: f64, y: f64) -> bool {
        let dx = x - self.cx;
        let dy = y - self.cy;
        let u = dx * self.cos + dy * self.sin;
        let v = -dx * self.sin + dy * self.cos;
        (u / self.a).powi(2) + (v / self.b).powi(2) <= 1.0
    }
}

/// Sum of random rotated ellipses, supersampled 2x2 per pixel and clipped to
/// `[0, 1]`.
///
/// The first ellipse is a large "body"; the rest are smaller inserts. Every
/// ellipse lies strictly inside the inscribed reconstruction circle, so the
/// outermost pixel ring is always zero.
pub fn generate_phantom(spec: &PhantomSpec, geom: &Geometry) -> Image {
    let n = geom.image_size;
    let r = geom.domain_half_width;
    let pix = geom.pixel_size();
    let limit = (0.88 * r).min(r - pix);
    let mut rng = ChaCha8Rng::seed_from_u64(spec.rng_seed);
    let [lo, hi] = spec.intensity_range;

    let mut ellipses = Vec::with_capacity(spec.num_ellipses);
    for k in 0..spec.num_ellipses {
        let (center_radius, axis_lo, axis_hi) = if k == 0 {
            (0.05, 0.55, 0.8)
        } else {
            (0.5, 0.06, 0.3)
        };
        let rho = center_radius * r * rng.gen::<f64>().sqrt();
        let phi = rng.gen_range(0.0..2.0 * PI);
        let (cx, cy) = (rho * phi.cos(), rho * phi.sin());
        let mut a = rng.gen_range(axis_lo..axis_hi) * r;
        let mut b = rng.gen_range(axis_lo..axis_hi) * r;
        let theta = rng.gen_range(0.0..PI);
        let value = if hi > lo { rng.gen_range(lo..hi) } else { lo };
        let room = limit - rho;
        if room <= 0.0 {
            continue;
        }
        let longest = a.max(b);
        if longest > room {
            a *= room / longest;
            b *= room / longest;
        }
        ellipses.push(Ellipse {
            cx,
            cy,
            a,
            b,
            cos: theta.cos(),
            sin: theta.sin(),
            value,
        });
    }

    let offsets = [-0.25 * pix, 0.25 * pix];
    Image::from_fn(n, n, |row, col| {
        if ellipses.is_empty() {
            return 0.0;
        }
        let (x, y) = geom.pixel_center(row, col);
        let mut acc = 0.0;
        for ox in offsets {
            for oy in offsets {
                let v: f64 = ellipses
                    .iter()
                    .filter(|e| e.contains(x + ox, y + oy))
                    .map(|e| e.value)
                    .sum();
                acc += v.clamp(0.0, 1.0);
            }
        }
        (acc / 4.0).clamp(0.0, 1.0)
    })
}

/// Poisson photon counts `k ~ Poisson(n0 exp(-mu_max y))` converted back to
/// line integrals `-ln(max(k, 1) / n0) / mu_max`.
pub fn simulate_lowdose(clean: &Sinogram, cfg: &NoiseConfig) -> Sinogram {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.rng_seed);
    let data = clean
        .data()
        .iter()
        .map(|&y| {
            let k = sample_counts(&mut rng, cfg.n0 * (-cfg.mu_max * y.max(0.0)).exp());
            -(k.max(1.0) / cfg.n0).ln() / cfg.mu_max
        })
        .collect();
    Sinogram::new(clean.num_angles(), clean.num_bins(), data).expect("same shape")
}

/// Draws one Poisson photon count with mean `lambda`.
pub fn sample_counts<R: Rng>(rng: &mut R, lambda: f64) -> f64 {
    if lambda <= 0.0 {
        return 0.0;
    }
    Poisson::new(lambda)
        .map(|d| d.sample(rng))
        .unwrap_or(lambda.round())
}

#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub ground_truth: Image,
    pub noisy: Sinogram,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub geometry: Geometry,
    pub phantom: PhantomSpec,
    pub noise: NoiseConfig,
    pub samples: Vec<Sample>,
    /// Free-form tag stored in the header, e.g. a hash of the generating config.
    pub provenance: Option<String>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    geometry: Geometry,
    phantom: PhantomSpec,
    noise: NoiseConfig,
    count: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    provenance: Option<String>,
}

/// Generates `count` samples; sample `i` uses phantom seed `phantom.rng_seed + i`
/// and noise seed `noise.rng_seed + i`.
pub fn generate_dataset(
    geometry: &Geometry,
    phantom: &PhantomSpec,
    noise: &NoiseConfig,
    count: usize,
) -> Result<Dataset, DatasetError> {
    if count == 0 {
        return Err(DatasetError::Empty);
    }
    phantom.validate().map_err(DatasetError::Header)?;
    noise.validate().map_err(DatasetError::Header)?;
    let projector = Projector::new(*geometry)?;
    let samples = (0..count as u64)
        .map(|i| {
            let spec = PhantomSpec {
                rng_seed: phantom.rng_seed.wrapping_add(i),
                ..phantom.clone()
            };
            let gt = generate_phantom(&spec, geometry);
            let clean = projector.forward(&gt)?;
            let ncfg = NoiseConfig {
                rng_seed: noise.rng_seed.wrapping_add(i),
                ..noise.clone()
            };
            Ok(Sample {
                ground_truth: gt,
                noisy: simulate_lowdose(&clean, &ncfg),
            })
        })
        .collect::<Result<Vec<_>, DatasetError>>()?;
    Ok(Dataset {
        geometry: *geometry,
        phantom: phantom.clone(),
        noise: noise.clone(),
        samples,
        provenance: None,
    })
}

fn put_floats(out: &mut Vec<u8>, values: &[f64]) {
    for v in values {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>, DatasetError> {
        if self.samples.is_empty() {
            return Err(DatasetError::Empty);
        }
        let header = serde_json::to_vec(&Header {
            geometry: self.geometry,
            phantom: self.phantom.clone(),
            noise: self.noise.clone(),
            count: self.samples.len(),
            provenance: self.provenance.clone(),
        })
        .map_err(|e| DatasetError::Header(e.to_string()))?;
        let per_sample = 8 * (self.geometry.num_pixels() + self.geometry.num_measurements()) + 4;
        let mut out = Vec::with_capacity(10 + header.len() + per_sample * self.samples.len());
        out.extend_from_slice(DATASET_MAGIC);
        out.extend_from_slice(&DATASET_VERSION.to_le_bytes());
        out.extend_from_slice(&(header.len() as u32).to_le_bytes());
        out.extend_from_slice(&header);
        for s in &self.samples {
            let start = out.len();
            put_floats(&mut out, s.ground_truth.data());
            put_floats(&mut out, s.noisy.data());
            let crc = crc32fast::hash(&out[start..]);
            out.extend_from_slice(&crc.to_le_bytes());
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, DatasetError> {
        let mut r = Reader::new(bytes);
        let mut r = TruncReader(&mut r);
        if r.take(4, "magic")? != DATASET_MAGIC {
            return Err(DatasetError::Magic);
        }
        let version = u16::from_le_bytes(r.take(2, "version")?.try_into().unwrap());
        if version != DATASET_VERSION {
            return Err(DatasetError::Version { found: version });
        }
        let hlen = u32::from_le_bytes(r.take(4, "header length")?.try_into().unwrap()) as usize;
        let header: Header = serde_json::from_slice(r.take(hlen, "header")?)
            .map_err(|e| DatasetError::Header(e.to_string()))?;
        header
            .geometry
            .validate()
            .map_err(|e| DatasetError::Header(e.to_string()))?;
        if header.count == 0 {
            return Err(DatasetError::Empty);
        }
        let g = header.geometry;
        let mut samples = Vec::with_capacity(header.count);
        for i in 0..header.count {
            let body = r.take(8 * (g.num_pixels() + g.num_measurements()), "sample payload")?;
            let crc = u32::from_le_bytes(r.take(4, "sample checksum")?.try_into().unwrap());
            if crc32fast::hash(body) != crc {
                return Err(DatasetError::Checksum { sample: i });
            }
            let floats: Vec<f64> = body
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                .collect();
            let (gt, sino) = floats.split_at(g.num_pixels());
            samples.push(Sample {
                ground_truth: Image::new(g.image_size, g.image_size, gt.to_vec())
                    .expect("sized by geometry"),
                noisy: Sinogram::new(g.num_angles, g.num_bins, sino.to_vec())?,
            });
        }
        if !r.is_done() {
            return Err(DatasetError::Header(format!(
                "{} trailing bytes after last sample",
                r.remaining()
            )));
        }
        Ok(Dataset {
            geometry: g,
            phantom: header.phantom,
            noise: header.noise,
            samples,
            provenance: header.provenance,
        })
    }
}

pub fn save_dataset(ds: &Dataset, path: impl AsRef<Path>) -> Result<(), DatasetError> {
    fs::write(path, ds.to_bytes()?)?;
    Ok(())
}

pub fn load_dataset(path: impl AsRef<Path>) -> Result<Dataset, DatasetError> {
    Dataset::from_bytes(&fs::read(path)?)
}

struct TruncReader<'r, 'a>(&'r mut Reader<'a>);

impl<'a> TruncReader<'_, 'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8], DatasetError> {
        self.0.take(n, what).map_err(DatasetError::Truncated)
    }

    fn is_done(&self) -> bool {
        self.0.is_done()
    }

    fn remaining(&self) -> usize {
        self.0.remaining()
    }
}

/// Sequential byte reader that reports truncation by section name.
pub(crate) struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    pub(crate) fn new(bytes: &'a [u8]) -> Self {
        Self { bytes, pos: 0 }
    }

    /// Next `n` bytes, or a description of the shortfall.
    pub(crate) fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8], String> {
        if self.bytes.len() - self.pos < n {
            return Err(format!(
                "{what}: need {n} bytes, {} left",
                self.bytes.len() - self.pos
            ));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    pub(crate) fn remaining(&self) -> usize {
        self.bytes.len() - self.pos
    }

    pub(crate) fn is_done(&self) -> bool {
        self.remaining() == 0
    }
}
