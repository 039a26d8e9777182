//! Discrete parallel-beam ray transform, its exact adjoint, and filtered
//! backprojection.
//!
//! Rays are traced by sampling the image with bilinear interpolation between
//! pixel centres every half pixel. The adjoint visits the same samples with the
//! same weights and scatters instead of gathering, so it is the algebraic
//! transpose of the forward operator up to floating-point summation order.

use std::f64::consts::PI;
use std::sync::Arc;

use rustfft::num_complex::Complex;
use rustfft::FftPlanner;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::image::Image;
use crate::numerics::{CustomOp, NumericsError, Tensor};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ProjectorError {
    #[error("invalid geometry: {0}")]
    Geometry(String),
    #[error("{what} size mismatch: expected {expected:?}, found {found:?}")]
    SizeMismatch {
        what: &'static str,
        expected: (usize, usize),
        found: (usize, usize),
    },
    #[error("frequency scaling must lie in (0, 1], got {0}")]
    FreqScaling(f64),
}

/// Parallel-beam acquisition geometry over the square `[-h, h]^2` (cm).
///
/// The detector spans the domain diagonal exactly, so the bin spacing is
/// derived from the bin count.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Geometry {
    pub image_size: usize,
    pub domain_half_width: f64,
    pub num_angles: usize,
    pub num_bins: usize,
}

impl Default for Geometry {
    fn default() -> Self {
        Self::desk()
    }
}

impl Geometry {
    pub fn new(
        image_size: usize,
        domain_half_width: f64,
        num_angles: usize,
        num_bins: usize,
    ) -> Result<Self, ProjectorError> {
        let g = Self {
            image_size,
            domain_half_width,
            num_angles,
            num_bins,
        };
        g.validate()?;
        Ok(g)
    }

    /// 128 x 128 pixels, 180 angles, 183 bins on the 26 cm domain.
    pub fn desk() -> Self {
        Self {
            image_size: 128,
            domain_half_width: 13.0,
            num_angles: 180,
            num_bins: 183,
        }
    }

    /// 362 x 362 pixels, 1000 angles, 513 bins.
    pub fn full() -> Self {
        Self {
            image_size: 362,
            domain_half_width: 13.0,
            num_angles: 1000,
            num_bins: 513,
        }
    }

    pub fn validate(&self) -> Result<(), ProjectorError> {
        if self.image_size < 2 {
            return Err(ProjectorError::Geometry(format!(
                "image_size must be at least 2, got {}",
                self.image_size
            )));
        }
        if self.num_angles < 1 || self.num_bins < 1 {
            return Err(ProjectorError::Geometry(
                "num_angles and num_bins must be positive".into(),
            ));
        }
        if !(self.domain_half_width > 0.0 && self.domain_half_width.is_finite()) {
            return Err(ProjectorError::Geometry(format!(
                "domain_half_width must be positive, got {}",
                self.domain_half_width
            )));
        }
        Ok(())
    }

    pub fn pixel_size(&self) -> f64 {
        2.0 * self.domain_half_width / self.image_size as f64
    }

    pub fn bin_spacing(&self) -> f64 {
        2.0 * std::f64::consts::SQRT_2 * self.domain_half_width / self.num_bins as f64
    }

    pub fn angle(&self, i: usize) -> f64 {
        i as f64 * PI / self.num_angles as f64
    }

    /// Signed detector coordinate of bin `j`'s centre.
    pub fn bin_center(&self, j: usize) -> f64 {
        (j as f64 - (self.num_bins as f64 - 1.0) / 2.0) * self.bin_spacing()
    }

    /// Physical `(x, y)` of pixel `(row, col)`'s centre.
    pub fn pixel_center(&self, row: usize, col: usize) -> (f64, f64) {
        let p = self.pixel_size();
        let h = self.domain_half_width;
        (-h + (col as f64 + 0.5) * p, h - (row as f64 + 0.5) * p)
    }

    pub fn num_pixels(&self) -> usize {
        self.image_size * self.image_size
    }

    pub fn num_measurements(&self) -> usize {
        self.num_angles * self.num_bins
    }
}

/// Line-integral measurements indexed `(angle, bin)`, row-major.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Sinogram {
    num_angles: usize,
    num_bins: usize,
    data: Vec<f64>,
}

impl Sinogram {
    pub fn new(num_angles: usize, num_bins: usize, data: Vec<f64>) -> Result<Self, ProjectorError> {
        if data.len() != num_angles * num_bins {
            return Err(ProjectorError::SizeMismatch {
                what: "sinogram data",
                expected: (num_angles, num_bins),
                found: (data.len(), 1),
            });
        }
        Ok(Self {
            num_angles,
            num_bins,
            data,
        })
    }

    pub fn zeros(geom: &Geometry) -> Self {
        Self {
            num_angles: geom.num_angles,
            num_bins: geom.num_bins,
            data: vec![0.0; geom.num_measurements()],
        }
    }

    pub fn num_angles(&self) -> usize {
        self.num_angles
    }

    pub fn num_bins(&self) -> usize {
        self.num_bins
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn row(&self, angle: usize) -> &[f64] {
        &self.data[angle * self.num_bins..(angle + 1) * self.num_bins]
    }

    pub fn dot(&self, other: &Sinogram) -> f64 {
        self.data.iter().zip(&other.data).map(|(a, b)| a * b).sum()
    }

    pub fn scaled(&self, s: f64) -> Sinogram {
        Sinogram {
            num_angles: self.num_angles,
            num_bins: self.num_bins,
            data: self.data.iter().map(|v| v * s).collect(),
        }
    }

    pub fn to_tensor(&self) -> Tensor {
        Tensor::new(vec![self.num_angles, self.num_bins], self.data.clone()).expect("consistent")
    }

    pub fn from_tensor(t: &Tensor) -> Result<Self, ProjectorError> {
        match *t.shape() {
            [a, b] => Self::new(a, b, t.data().to_vec()),
            _ => Err(ProjectorError::SizeMismatch {
                what: "sinogram tensor",
                expected: (0, 0),
                found: (t.len(), 1),
            }),
        }
    }

    pub fn check(&self, geom: &Geometry) -> Result<(), ProjectorError> {
        if (self.num_angles, self.num_bins) != (geom.num_angles, geom.num_bins) {
            return Err(ProjectorError::SizeMismatch {
                what: "sinogram",
                expected: (geom.num_angles, geom.num_bins),
                found: (self.num_angles, self.num_bins),
            });
        }
        Ok(())
    }
}

fn check_image(image_h: usize, image_w: usize, geom: &Geometry) -> Result<(), ProjectorError> {
    if (image_h, image_w) != (geom.image_size, geom.image_size) {
        return Err(ProjectorError::SizeMismatch {
            what: "image",
            expected: (geom.image_size, geom.image_size),
            found: (image_h, image_w),
        });
    }
    Ok(())
}

/// Upper bound on cached system-matrix entries (about 100 MB).
const MAX_CACHED_ENTRIES: usize = 8_000_000;

/// Ray-by-ray sparse system matrix in compressed-row form.
#[derive(Debug)]
struct SystemMatrix {
    row_ptr: Vec<usize>,
    cols: Vec<u32>,
    vals: Vec<f64>,
}

/// Precomputed trigonometry, plus the explicit sparse matrix for geometries
/// small enough to cache it.
#[derive(Clone, Debug)]
pub struct Projector {
    geom: Geometry,
    cos: Vec<f64>,
    sin: Vec<f64>,
    matrix: Option<Arc<SystemMatrix>>,
}

impl Projector {
    pub fn new(geom: Geometry) -> Result<Self, ProjectorError> {
        geom.validate()?;
        let (cos, sin) = (0..geom.num_angles)
            .map(|i| {
                let t = geom.angle(i);
                (t.cos(), t.sin())
            })
            .unzip();
        let mut p = Self {
            geom,
            cos,
            sin,
            matrix: None,
        };
        // Roughly three merged entries per pixel crossed along each ray.
        let estimate = geom.num_measurements() * 4 * geom.image_size;
        if estimate <= MAX_CACHED_ENTRIES && geom.num_pixels() < u32::MAX as usize {
            p.matrix = Some(Arc::new(p.build_matrix()));
        }
        Ok(p)
    }

    fn build_matrix(&self) -> SystemMatrix {
        let mut row_ptr = Vec::with_capacity(self.geom.num_measurements() + 1);
        let mut cols = Vec::new();
        let mut vals = Vec::new();
        let mut entries: Vec<(usize, f64)> = Vec::new();
        row_ptr.push(0);
        for a in 0..self.geom.num_angles {
            for b in 0..self.geom.num_bins {
                entries.clear();
                self.trace(a, b, |p, w| entries.push((p, w)));
                entries.sort_by_key(|e| e.0);
                let mut i = 0;
                while i < entries.len() {
                    let p = entries[i].0;
                    let mut w = 0.0;
                    while i < entries.len() && entries[i].0 == p {
                        w += entries[i].1;
                        i += 1;
                    }
                    cols.push(p as u32);
                    vals.push(w);
                }
                row_ptr.push(cols.len());
            }
        }
        SystemMatrix {
            row_ptr,
            cols,
            vals,
        }
    }

    pub fn geometry(&self) -> &Geometry {
        &self.geom
    }

    /// Visits every `(pixel index, weight)` pair of ray `(angle, bin)`.
    ///
    /// Weights already include the integration step, so the forward value of
    /// the ray is `sum(weight * image[pixel])`.
    #[inline]
    fn trace(&self, angle: usize, bin: usize, mut visit: impl FnMut(usize, f64)) {
        let g = &self.geom;
        let n = g.image_size;
        let pix = g.pixel_size();
        let h = g.domain_half_width;
        let (c, s) = (self.cos[angle], self.sin[angle]);
        let offset = g.bin_center(bin);
        // Ray: p(t) = offset * (c, s) + t * (-s, c).
        let (ox, oy) = (offset * c, offset * s);
        let (dx, dy) = (-s, c);
        let half_diag = h * std::f64::consts::SQRT_2;
        let dt = 0.5 * pix;
        let num_samples = (2.0 * half_diag / dt).ceil() as usize;

        // Samples further than half a pixel outside the square touch no pixel.
        let reach = h + 0.5 * pix;
        let mut t_lo = -half_diag;
        let mut t_hi = half_diag;
        for (o, d) in [(ox, dx), (oy, dy)] {
            if d.abs() < 1e-12 {
                if o.abs() > reach {
                    return;
                }
            } else {
                let a = (-reach - o) / d;
                let b = (reach - o) / d;
                t_lo = t_lo.max(a.min(b));
                t_hi = t_hi.min(a.max(b));
            }
        }
        if t_lo > t_hi {
            return;
        }
        let m_lo = (((t_lo + half_diag) / dt - 0.5).ceil().max(0.0)) as usize;
        let m_hi = ((t_hi + half_diag) / dt - 0.5).floor();
        if m_hi < 0.0 {
            return;
        }
        let m_hi = (m_hi as usize).min(num_samples - 1);

        let nf = n as isize;
        for m in m_lo..=m_hi {
            let t = -half_diag + (m as f64 + 0.5) * dt;
            let px = ox + t * dx;
            let py = oy + t * dy;
            let u = (px + h) / pix - 0.5;
            let v = (h - py) / pix - 0.5;
            let u0 = u.floor();
            let v0 = v.floor();
            let fu = u - u0;
            let fv = v - v0;
            let (c0, r0) = (u0 as isize, v0 as isize);
            for (r, wr) in [(r0, 1.0 - fv), (r0 + 1, fv)] {
                if r < 0 || r >= nf || wr == 0.0 {
                    continue;
                }
                for (col, wc) in [(c0, 1.0 - fu), (c0 + 1, fu)] {
                    if col < 0 || col >= nf || wc == 0.0 {
                        continue;
                    }
                    visit(r as usize * n + col as usize, wr * wc * dt);
                }
            }
        }
    }

    pub(crate) fn forward_into(&self, image: &[f64], out: &mut [f64]) {
        if let Some(m) = &self.matrix {
            for (r, o) in out.iter_mut().enumerate() {
                let span = m.row_ptr[r]..m.row_ptr[r + 1];
                *o = m.cols[span.clone()]
                    .iter()
                    .zip(&m.vals[span])
                    .map(|(&c, &w)| w * image[c as usize])
                    .sum();
            }
            return;
        }
        let nb = self.geom.num_bins;
        for a in 0..self.geom.num_angles {
            for b in 0..nb {
                let mut acc = 0.0;
                self.trace(a, b, |p, w| acc += w * image[p]);
                out[a * nb + b] = acc;
            }
        }
    }

    pub(crate) fn adjoint_into(&self, sino: &[f64], out: &mut [f64]) {
        out.fill(0.0);
        if let Some(m) = &self.matrix {
            for (r, &y) in sino.iter().enumerate() {
                if y == 0.0 {
                    continue;
                }
                let span = m.row_ptr[r]..m.row_ptr[r + 1];
                for (&c, &w) in m.cols[span.clone()].iter().zip(&m.vals[span]) {
                    out[c as usize] += w * y;
                }
            }
            return;
        }
        let nb = self.geom.num_bins;
        for a in 0..self.geom.num_angles {
            for b in 0..nb {
                let y = sino[a * nb + b];
                if y == 0.0 {
                    continue;
                }
                self.trace(a, b, |p, w| out[p] += w * y);
            }
        }
    }

    pub fn forward(&self, image: &Image) -> Result<Sinogram, ProjectorError> {
        check_image(image.height(), image.width(), &self.geom)?;
        let mut out = vec![0.0; self.geom.num_measurements()];
        self.forward_into(image.data(), &mut out);
        Sinogram::new(self.geom.num_angles, self.geom.num_bins, out)
    }

    pub fn adjoint(&self, sino: &Sinogram) -> Result<Image, ProjectorError> {
        sino.check(&self.geom)?;
        let n = self.geom.image_size;
        let mut out = vec![0.0; n * n];
        self.adjoint_into(sino.data(), &mut out);
        Ok(Image::new(n, n, out).expect("consistent"))
    }

    /// Largest singular value of the forward operator by power iteration on
    /// `A^T A`, started from the all-ones image.
    pub fn operator_norm(&self, iterations: usize) -> f64 {
        let np = self.geom.num_pixels();
        let mut x = vec![1.0 / (np as f64).sqrt(); np];
        let mut y = vec![0.0; self.geom.num_measurements()];
        let mut z = vec![0.0; np];
        let mut lambda = 0.0;
        for _ in 0..iterations.max(1) {
            self.forward_into(&x, &mut y);
            self.adjoint_into(&y, &mut z);
            lambda = z.iter().map(|v| v * v).sum::<f64>().sqrt();
            if lambda == 0.0 {
                return 0.0;
            }
            for (xi, zi) in x.iter_mut().zip(&z) {
                *xi = zi / lambda;
            }
        }
        lambda.sqrt()
    }

    /// Ramp filter with a Hann window applied row by row, in the frequency
    /// domain over zero-padded detector rows.
    pub fn filter_sinogram(
        &self,
        sino: &Sinogram,
        freq_scaling: f64,
    ) -> Result<Sinogram, ProjectorError> {
        sino.check(&self.geom)?;
        if !(freq_scaling > 0.0 && freq_scaling <= 1.0) {
            return Err(ProjectorError::FreqScaling(freq_scaling));
        }
        let nb = self.geom.num_bins;
        let d = self.geom.bin_spacing();
        let len = (2 * nb).next_power_of_two().max(64);
        let response = ramp_response(len, d, freq_scaling);

        let mut planner = FftPlanner::<f64>::new();
        let fft = planner.plan_fft_forward(len);
        let ifft = planner.plan_fft_inverse(len);
        let mut buf = vec![Complex::new(0.0, 0.0); len];
        let mut out = vec![0.0; sino.data().len()];
        for a in 0..self.geom.num_angles {
            buf.fill(Complex::new(0.0, 0.0));
            for (b, v) in sino.row(a).iter().enumerate() {
                buf[b].re = *v;
            }
            fft.process(&mut buf);
            for (z, r) in buf.iter_mut().zip(&response) {
                *z *= r;
            }
            ifft.process(&mut buf);
            for b in 0..nb {
                out[a * nb + b] = buf[b].re / len as f64;
            }
        }
        Sinogram::new(self.geom.num_angles, nb, out)
    }

    /// Pixel-driven backprojection with linear interpolation along the
    /// detector, scaled by `pi / num_angles`.
    pub fn backproject_filtered(&self, filtered: &Sinogram) -> Result<Image, ProjectorError> {
        filtered.check(&self.geom)?;
        let g = &self.geom;
        let n = g.image_size;
        let nb = g.num_bins;
        let d = g.bin_spacing();
        let center = (nb as f64 - 1.0) / 2.0;
        let mut out = vec![0.0; n * n];
        for a in 0..g.num_angles {
            let row = filtered.row(a);
            let (c, s) = (self.cos[a], self.sin[a]);
            for r in 0..n {
                for col in 0..n {
                    let (x, y) = g.pixel_center(r, col);
                    let t = (x * c + y * s) / d + center;
                    let j0 = t.floor();
                    let f = t - j0;
                    let j0 = j0 as isize;
                    let mut v = 0.0;
                    if j0 >= 0 && (j0 as usize) < nb {
                        v += (1.0 - f) * row[j0 as usize];
                    }
                    if j0 + 1 >= 0 && ((j0 + 1) as usize) < nb {
                        v += f * row[(j0 + 1) as usize];
                    }
                    out[r * n + col] += v;
                }
            }
        }
        let scale = PI / g.num_angles as f64;
        out.iter_mut().for_each(|v| *v *= scale);
        Ok(Image::new(n, n, out).expect("consistent"))
    }

    pub fn fbp(&self, sino: &Sinogram, freq_scaling: f64) -> Result<Image, ProjectorError> {
        let filtered = self.filter_sinogram(sino, freq_scaling)?;
        self.backproject_filtered(&filtered)
    }
}

/// Frequency response of the band-limited discrete ramp kernel
/// (`h[0] = 1/(4d^2)`, `h[odd n] = -1/(pi n d)^2`), times the detector spacing
/// and a Hann window cut off at `freq_scaling` times Nyquist.
fn ramp_response(len: usize, d: f64, freq_scaling: f64) -> Vec<f64> {
    let mut kernel = vec![Complex::new(0.0, 0.0); len];
    kernel[0].re = 1.0 / (4.0 * d * d);
    for i in 1..len / 2 {
        if i % 2 == 1 {
            let v = -1.0 / (PI * i as f64 * d).powi(2);
            kernel[i].re = v;
            kernel[len - i].re = v;
        }
    }
    if (len / 2) % 2 == 1 {
        kernel[len / 2].re = -1.0 / (PI * (len / 2) as f64 * d).powi(2);
    }
    let mut planner = FftPlanner::<f64>::new();
    planner.plan_fft_forward(len).process(&mut kernel);
    kernel
        .iter()
        .enumerate()
        .map(|(k, z)| {
            // normalized frequency, 1.0 at Nyquist
            let nu = k.min(len - k) as f64 / (len as f64 / 2.0);
            let window = if nu <= freq_scaling {
                let c = (PI * nu / (2.0 * freq_scaling)).cos();
                c * c
            } else {
                0.0
            };
            z.re * d * window
        })
        .collect()
}

pub fn radon_forward(image: &Image, geom: &Geometry) -> Result<Sinogram, ProjectorError> {
    Projector::new(*geom)?.forward(image)
}

pub fn radon_adjoint(sino: &Sinogram, geom: &Geometry) -> Result<Image, ProjectorError> {
    Projector::new(*geom)?.adjoint(sino)
}

pub fn fbp(sino: &Sinogram, geom: &Geometry, freq_scaling: f64) -> Result<Image, ProjectorError> {
    Projector::new(*geom)?.fbp(sino, freq_scaling)
}

/// Tape primitive `x [1, n, n] -> scale * A x` as an `[angles, bins]` tensor.
pub struct RayTransformOp {
    pub projector: Arc<Projector>,
    pub scale: f64,
}

/// Tape primitive `y [angles, bins] -> scale * A^T y` as a `[1, n, n]` tensor.
pub struct RayAdjointOp {
    pub projector: Arc<Projector>,
    pub scale: f64,
}

fn op_shape_err(op: &'static str, expected: Vec<usize>, found: &Tensor) -> NumericsError {
    NumericsError::ShapeMismatch {
        op,
        expected,
        found: found.shape().to_vec(),
    }
}

impl RayTransformOp {
    fn apply(&self, x: &Tensor) -> Result<Tensor, NumericsError> {
        let g = self.projector.geometry();
        if x.len() != g.num_pixels() {
            return Err(op_shape_err(
                "ray transform",
                vec![1, g.image_size, g.image_size],
                x,
            ));
        }
        let mut out = vec![0.0; g.num_measurements()];
        self.projector.forward_into(x.data(), &mut out);
        if self.scale != 1.0 {
            out.iter_mut().for_each(|v| *v *= self.scale);
        }
        Tensor::new(vec![g.num_angles, g.num_bins], out)
    }
}

impl RayAdjointOp {
    fn apply(&self, y: &Tensor) -> Result<Tensor, NumericsError> {
        let g = self.projector.geometry();
        if y.len() != g.num_measurements() {
            return Err(op_shape_err(
                "ray adjoint",
                vec![g.num_angles, g.num_bins],
                y,
            ));
        }
        let mut out = vec![0.0; g.num_pixels()];
        self.projector.adjoint_into(y.data(), &mut out);
        if self.scale != 1.0 {
            out.iter_mut().for_each(|v| *v *= self.scale);
        }
        Tensor::new(vec![1, g.image_size, g.image_size], out)
    }
}

impl CustomOp for RayTransformOp {
    fn name(&self) -> &'static str {
        "ray_transform"
    }

    fn forward(&self, inputs: &[&Tensor]) -> Result<Tensor, NumericsError> {
        self.apply(inputs[0])
    }

    fn backward(&self, inputs: &[&Tensor], _output: &Tensor, grad: &Tensor) -> Vec<Option<Tensor>> {
        let adj = RayAdjointOp {
            projector: Arc::clone(&self.projector),
            scale: self.scale,
        };
        let g = adj.apply(grad).expect("shape checked in forward");
        vec![Some(g.reshaped(inputs[0].shape()).expect("same size"))]
    }
}

impl CustomOp for RayAdjointOp {
    fn name(&self) -> &'static str {
        "ray_adjoint"
    }

    fn forward(&self, inputs: &[&Tensor]) -> Result<Tensor, NumericsError> {
        self.apply(inputs[0])
    }

    fn backward(&self, inputs: &[&Tensor], _output: &Tensor, grad: &Tensor) -> Vec<Option<Tensor>> {
        let fwd = RayTransformOp {
            projector: Arc::clone(&self.projector),
            scale: self.scale,
        };
        let g = fwd.apply(grad).expect("shape checked in forward");
        vec![Some(g.reshaped(inputs[0].shape()).expect("same size"))]
    }
}
