//! Helpers shared by the integration tests and the acceptance harness.

#![allow(dead_code)]

pub mod primitives;

use deep_glr::numerics::{NumericsError, Tape, Tensor, Var};
use deep_glr::projector::{Geometry, Sinogram};
use deep_glr::Image;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const FD_STEP: f64 = 1e-5;
pub const FD_REL: f64 = 1e-5;
pub const FD_ABS: f64 = 1e-7;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn uniform(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
    Tensor::from_fn(shape, |_| rng.gen_range(-1.0..1.0))
}

/// Uniform in `[-1, 1]` but at least `gap` away from zero, so kinks stay out
/// of reach of the finite-difference stencil.
pub fn uniform_away_from_zero(shape: &[usize], gap: f64, rng: &mut ChaCha8Rng) -> Tensor {
    Tensor::from_fn(shape, |_| {
        let m = rng.gen_range(gap..1.0);
        if rng.gen_bool(0.5) {
            m
        } else {
            -m
        }
    })
}

pub fn random_image(n: usize, rng: &mut ChaCha8Rng) -> Image {
    Image::from_fn(n, n, |_, _| rng.gen_range(-1.0..1.0))
}

pub fn random_sinogram(g: &Geometry, rng: &mut ChaCha8Rng) -> Sinogram {
    let data = (0..g.num_measurements()).map(|_| rng.gen_range(-1.0..1.0)).collect();
    Sinogram::new(g.num_angles, g.num_bins, data).unwrap()
}

#[derive(Debug, Clone, Copy)]
pub struct FdReport {
    pub checked: usize,
    pub worst_rel: f64,
    pub failures: usize,
}

impl FdReport {
    pub fn passed(&self) -> bool {
        self.failures == 0 && self.checked > 0
    }
}

/// Does `analytic` agree with `numeric` to `FD_REL` relative error, or to
/// `FD_ABS` absolute error when both are tiny?
pub fn fd_agrees(analytic: f64, numeric: f64) -> bool {
    let diff = (analytic - numeric).abs();
    diff <= FD_ABS || diff <= FD_REL * analytic.abs().max(numeric.abs())
}

/// Central-difference check of every entry of every input.
///
/// `f` records a computation on fresh leaves and returns a scalar. Non-scalar
/// outputs are reduced by the caller (e.g. by a dot with fixed random
/// weights) so that every output entry contributes.
pub fn fd_check<F>(inputs: &[Tensor], f: F) -> FdReport
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var, NumericsError>,
{
    let eval = |vals: &[Tensor]| -> f64 {
        let mut tape = Tape::new();
        let vars: Vec<Var> = vals.iter().map(|t| tape.leaf(t.clone())).collect();
        let out = f(&mut tape, &vars).expect("forward");
        tape.value(out).item()
    };
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone())).collect();
    let out = f(&mut tape, &vars).expect("forward");
    let grads = tape.backward(out).expect("backward");
    let mut report = FdReport {
        checked: 0,
        worst_rel: 0.0,
        failures: 0,
    };
    let mut work = inputs.to_vec();
    for (k, &v) in vars.iter().enumerate() {
        let g = grads.wrt(v);
        for i in 0..inputs[k].len() {
            let orig = inputs[k].data()[i];
            work[k].data_mut()[i] = orig + FD_STEP;
            let up = eval(&work);
            work[k].data_mut()[i] = orig - FD_STEP;
            let down = eval(&work);
            work[k].data_mut()[i] = orig;
            let numeric = (up - down) / (2.0 * FD_STEP);
            let analytic = g.data()[i];
            let scale = analytic.abs().max(numeric.abs());
            if scale > 0.0 {
                report.worst_rel = report.worst_rel.max((analytic - numeric).abs() / scale);
            }
            if !fd_agrees(analytic, numeric) {
                report.failures += 1;
            }
            report.checked += 1;
        }
    }
    report
}

/// `sum_i w_i * out_i` with fixed pseudo-random weights, turning any output
/// into a scalar whose gradient exercises every output entry.
pub fn project_to_scalar(tape: &mut Tape, out: Var, seed: u64) -> Result<Var, NumericsError> {
    let mut r = rng(seed);
    let shape = tape.value(out).shape().to_vec();
    let w = tape.constant(uniform(&shape, &mut r));
    tape.dot(out, w)
}

/// Dense row-major matrix of the discrete ray transform, built by probing the
/// projector with unit images. Only for small geometries.
pub struct DenseOperator {
    pub rows: usize,
    pub cols: usize,
    pub a: Vec<f64>,
}

impl DenseOperator {
    pub fn probe(p: &deep_glr::Projector) -> Self {
        let g = *p.geometry();
        let (rows, cols) = (g.num_measurements(), g.num_pixels());
        let mut a = vec![0.0; rows * cols];
        for j in 0..cols {
            let mut e = vec![0.0; cols];
            e[j] = 1.0;
            let img = Image::new(g.image_size, g.image_size, e).unwrap();
            let s = p.forward(&img).unwrap();
            for (i, v) in s.data().iter().enumerate() {
                a[i * cols + j] = *v;
            }
        }
        Self { rows, cols, a }
    }

    pub fn apply(&self, x: &[f64]) -> Vec<f64> {
        (0..self.rows)
            .map(|i| {
                let row = &self.a[i * self.cols..(i + 1) * self.cols];
                row.iter().zip(x).map(|(a, b)| a * b).sum()
            })
            .collect()
    }

    pub fn apply_t(&self, y: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.cols];
        for i in 0..self.rows {
            for j in 0..self.cols {
                out[j] += self.a[i * self.cols + j] * y[i];
            }
        }
        out
    }
}

/// 8-neighbour offsets in row-major scan order, independent of the library.
const NEIGHBOURS: [(isize, isize); 8] = [
    (-1, -1),
    (-1, 0),
    (-1, 1),
    (0, -1),
    (0, 1),
    (1, -1),
    (1, 0),
    (1, 1),
];

/// `w_ij` for every ordered neighbour pair, computed straight from features.
pub fn oracle_weight(f: &[f64], h: usize, w: usize, i: usize, j: usize, eps: f64) -> f64 {
    let hw = h * w;
    let d2: f64 = (0..3).map(|k| (f[k * hw + i] - f[k * hw + j]).powi(2)).sum();
    (-d2 / (2.0 * eps * eps)).exp()
}

/// `L x` from explicit neighbour loops and weights recomputed from features.
pub fn oracle_laplacian(features: &[f64], eps: f64, n: usize, x: &[f64]) -> Vec<f64> {
    let mut lx = vec![0.0; n * n];
    for row in 0..n {
        for col in 0..n {
            let i = row * n + col;
            for (dr, dc) in NEIGHBOURS {
                let (rr, cc) = (row as isize + dr, col as isize + dc);
                if rr < 0 || cc < 0 || rr >= n as isize || cc >= n as isize {
                    continue;
                }
                let j = rr as usize * n + cc as usize;
                lx[i] += oracle_weight(features, n, n, i, j, eps) * (x[i] - x[j]);
            }
        }
    }
    lx
}

/// Inputs to [`oracle_step`] that stay fixed across an iteration.
pub struct OracleProblem<'a> {
    pub a: &'a DenseOperator,
    /// Divisor applied to both `A` and `y`.
    pub scale: f64,
    pub y: &'a [f64],
    pub features: &'a [f64],
    pub eps: f64,
    pub n: usize,
    pub mu: f64,
    pub alpha: f64,
    pub residual_coeff: f64,
    pub convex: bool,
    pub two_half_steps: bool,
}

/// One PFBS iteration written out longhand: dense `A`, explicit neighbour
/// loops for `L`, no library code beyond the probed matrix.
pub fn oracle_step(p: &OracleProblem, x: &[f64]) -> Vec<f64> {
    let s = p.scale;
    let ax = p.a.apply(x);
    let r: Vec<f64> = ax.iter().zip(p.y).map(|(u, v)| u / s - v / s).collect();
    let atr = p.a.apply_t(&r);
    let data_grad: Vec<f64> = atr.iter().map(|v| 2.0 * v / s).collect();
    let temp: Vec<f64> = if p.two_half_steps {
        let half: Vec<f64> = x.iter().zip(&data_grad).map(|(xi, g)| xi - p.alpha * g).collect();
        let lh = oracle_laplacian(p.features, p.eps, p.n, &half);
        half.iter().zip(&lh).map(|(h, l)| h - p.alpha * p.mu * 2.0 * l).collect()
    } else {
        let lx = oracle_laplacian(p.features, p.eps, p.n, x);
        (0..x.len())
            .map(|i| x[i] - p.alpha * (data_grad[i] + p.mu * 2.0 * lx[i]))
            .collect()
    };
    let c = p.residual_coeff;
    temp.iter()
        .zip(x)
        .map(|(t, xi)| if p.convex { (1.0 - c) * t + c * xi } else { t + c * xi })
        .collect()
}

/// A narrow network so that property tests stay fast.
pub fn small_net() -> deep_glr::networks::NetworkConfig {
    deep_glr::networks::NetworkConfig {
        prefilter_channels: vec![1, 4, 1],
        feature_channels: vec![1, 4, 3],
        feature_kernel: 3,
        mu_channels: vec![1, 4, 4],
        post_channels: vec![1, 4, 1],
        ..deep_glr::networks::NetworkConfig::default()
    }
}

/// Seeded init with every tensor jittered, so biases and norm affines are
/// generic too.
pub fn jittered(cfg: deep_glr::networks::NetworkConfig, seed: u64) -> deep_glr::networks::ModelParams {
    let mut p = deep_glr::networks::ModelParams::init(cfg, seed).unwrap();
    let mut r = rng(seed ^ 0x5eed);
    for t in p.tensors_mut() {
        for v in t.data_mut() {
            *v += r.gen_range(-0.1..0.1);
        }
    }
    p
}

pub fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(u, v)| (u - v).abs()).fold(0.0, f64::max)
}

/// Dense `D - W` for an `h x w` grid, assembled from a symmetric edge
/// function by scanning every pixel pair.
pub fn dense_laplacian(h: usize, w: usize, f: impl Fn(usize, usize) -> f64) -> Vec<Vec<f64>> {
    let n = h * w;
    let mut l = vec![vec![0.0; n]; n];
    for i in 0..n {
        for j in 0..n {
            let (dr, dc) = ((i / w).abs_diff(j / w), (i % w).abs_diff(j % w));
            if i == j || dr > 1 || dc > 1 {
                continue;
            }
            let wij = f(i.min(j), i.max(j));
            l[i][j] -= wij;
            l[i][i] += wij;
        }
    }
    l
}

/// Undirected 8-connected edges of an `h x w` grid, by enumeration.
pub fn enumerate_edges(h: usize, w: usize) -> usize {
    let n = h * w;
    let mut count = 0;
    for i in 0..n {
        for j in i + 1..n {
            let (dr, dc) = ((i / w).abs_diff(j / w), (i % w).abs_diff(j % w));
            if dr <= 1 && dc <= 1 {
                count += 1;
            }
        }
    }
    count
}
