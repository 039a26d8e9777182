//! 8-connected pixel graphs with feature-driven Gaussian edge weights, and the
//! matrix-free Laplacian `L = D - W` acting on images.
//!
//! Each pixel stores the weights of its 8 outgoing edges in the order
//! N, NE, E, SE, S, SW, W, NW. Out-of-bounds edges carry weight 0. The edge
//! from `i` to `j` and the edge from `j` to `i` always hold the same value.

use thiserror::Error;

use crate::image::Image;
use crate::numerics::{CustomOp, NumericsError, Tensor};

/// Feature channels per pixel.
pub const FEATURE_DIM: usize = 3;

/// `(row, col)` offsets for N, NE, E, SE, S, SW, W, NW.
pub const NEIGHBOR_OFFSETS: [(isize, isize); 8] = [
    (-1, 0),
    (-1, 1),
    (0, 1),
    (1, 1),
    (1, 0),
    (1, -1),
    (0, -1),
    (-1, -1),
];

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GraphError {
    #[error("bandwidth must be positive, got {0}")]
    Bandwidth(f64),
    #[error("shape mismatch: weights are {weights:?}, image is {image:?}")]
    Shape {
        weights: (usize, usize),
        image: (usize, usize),
    },
    #[error("feature map must be [{FEATURE_DIM}, h, w], got {0:?}")]
    Features(Vec<usize>),
}

/// Index of the reverse direction (N <-> S, NE <-> SW, ...).
#[inline]
pub fn opposite(d: usize) -> usize {
    (d + 4) % 8
}

#[inline]
fn neighbor(h: usize, w: usize, r: usize, c: usize, d: usize) -> Option<usize> {
    let (dr, dc) = NEIGHBOR_OFFSETS[d];
    let nr = r as isize + dr;
    let nc = c as isize + dc;
    if nr < 0 || nc < 0 || nr >= h as isize || nc >= w as isize {
        None
    } else {
        Some(nr as usize * w + nc as usize)
    }
}

/// Directed 8-neighbour edge weights, `[8, h, w]` row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct GraphWeights {
    height: usize,
    width: usize,
    data: Vec<f64>,
}

impl GraphWeights {
    /// Builds weights from an explicit per-edge function, evaluated once per
    /// undirected edge and mirrored, so symmetry holds by construction.
    pub fn from_edge_fn(height: usize, width: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let hw = height * width;
        let mut data = vec![0.0; 8 * hw];
        for r in 0..height {
            for c in 0..width {
                let i = r * width + c;
                // N, NE, E, SE own the edge; the mirrored slot is filled here.
                for d in 0..4 {
                    if let Some(j) = neighbor(height, width, r, c, d) {
                        let v = f(i, j);
                        data[d * hw + i] = v;
                        data[opposite(d) * hw + j] = v;
                    }
                }
            }
        }
        Self {
            height,
            width,
            data,
        }
    }

    pub fn from_tensor(t: &Tensor) -> Result<Self, GraphError> {
        match *t.shape() {
            [8, h, w] => Ok(Self {
                height: h,
                width: w,
                data: t.data().to_vec(),
            }),
            _ => Err(GraphError::Features(t.shape().to_vec())),
        }
    }

    pub fn to_tensor(&self) -> Tensor {
        Tensor::new(vec![8, self.height, self.width], self.data.clone()).expect("consistent")
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    /// Weight of the edge leaving pixel `(r, c)` in direction `d`.
    pub fn get(&self, d: usize, r: usize, c: usize) -> f64 {
        self.data[(d * self.height + r) * self.width + c]
    }

    /// Number of undirected in-bounds edges, read from the stencil mask.
    pub fn edge_count(&self) -> usize {
        let (h, w) = (self.height, self.width);
        let mut directed = 0;
        for r in 0..h {
            for c in 0..w {
                directed += (0..8).filter(|&d| neighbor(h, w, r, c, d).is_some()).count();
            }
        }
        directed / 2
    }

    fn check(&self, x: &Image) -> Result<(), GraphError> {
        if (self.height, self.width) != (x.height(), x.width()) {
            return Err(GraphError::Shape {
                weights: (self.height, self.width),
                image: (x.height(), x.width()),
            });
        }
        Ok(())
    }
}

/// `4hw - 3h - 3w + 2`, the number of undirected 8-connected edges.
pub fn expected_edge_count(h: usize, w: usize) -> usize {
    4 * h * w + 2 - 3 * h - 3 * w
}

fn edge_weights_raw(f: &[f64], h: usize, w: usize, epsilon: f64) -> Vec<f64> {
    let hw = h * w;
    let inv = 1.0 / (2.0 * epsilon * epsilon);
    GraphWeights::from_edge_fn(h, w, |i, j| {
        let d2: f64 = (0..FEATURE_DIM)
            .map(|k| {
                let diff = f[k * hw + i] - f[k * hw + j];
                diff * diff
            })
            .sum();
        (-d2 * inv).exp()
    })
    .data
}

fn feature_dims(f: &Tensor) -> Result<(usize, usize), GraphError> {
    match *f.shape() {
        [FEATURE_DIM, h, w] => Ok((h, w)),
        _ => Err(GraphError::Features(f.shape().to_vec())),
    }
}

/// `w_ij = exp(-|f_i - f_j|^2 / (2 eps^2))` on every 8-connected edge.
pub fn edge_weights(features: &Tensor, epsilon: f64) -> Result<GraphWeights, GraphError> {
    if !(epsilon > 0.0) {
        return Err(GraphError::Bandwidth(epsilon));
    }
    let (h, w) = feature_dims(features)?;
    Ok(GraphWeights {
        height: h,
        width: w,
        data: edge_weights_raw(features.data(), h, w, epsilon),
    })
}

fn laplacian_raw(wt: &[f64], x: &[f64], h: usize, w: usize) -> Vec<f64> {
    let hw = h * w;
    let mut out = vec![0.0; hw];
    for r in 0..h {
        for c in 0..w {
            let i = r * w + c;
            let xi = x[i];
            let mut acc = 0.0;
            for d in 0..8 {
                if let Some(j) = neighbor(h, w, r, c, d) {
                    acc += wt[d * hw + i] * (xi - x[j]);
                }
            }
            out[i] = acc;
        }
    }
    out
}

/// `(Lx)_i = sum_j w_ij (x_i - x_j)` over the 8 neighbours of `i`.
pub fn laplacian_apply(weights: &GraphWeights, x: &Image) -> Result<Image, GraphError> {
    weights.check(x)?;
    let out = laplacian_raw(&weights.data, x.data(), x.height(), x.width());
    Ok(Image::new(x.height(), x.width(), out).expect("consistent"))
}

fn glr_raw(wt: &[f64], x: &[f64], h: usize, w: usize) -> f64 {
    let hw = h * w;
    let mut total = 0.0;
    for r in 0..h {
        for c in 0..w {
            let i = r * w + c;
            for d in 0..8 {
                if let Some(j) = neighbor(h, w, r, c, d) {
                    let diff = x[i] - x[j];
                    total += wt[d * hw + i] * diff * diff;
                }
            }
        }
    }
    0.5 * total
}

/// `x^T L x = sum over undirected edges of w_ij (x_i - x_j)^2`.
pub fn glr_value(weights: &GraphWeights, x: &Image) -> Result<f64, GraphError> {
    weights.check(x)?;
    Ok(glr_raw(&weights.data, x.data(), x.height(), x.width()))
}

/// `2 L x`.
pub fn glr_gradient(weights: &GraphWeights, x: &Image) -> Result<Image, GraphError> {
    Ok(laplacian_apply(weights, x)?.scaled(2.0))
}

fn numerics_shape(op: &'static str, expected: Vec<usize>, t: &Tensor) -> NumericsError {
    NumericsError::ShapeMismatch {
        op,
        expected,
        found: t.shape().to_vec(),
    }
}

/// Tape primitive: `(features [3, h, w], epsilon [1]) -> weights [8, h, w]`.
pub struct EdgeWeightsOp;

impl CustomOp for EdgeWeightsOp {
    fn name(&self) -> &'static str {
        "edge_weights"
    }

    fn forward(&self, inputs: &[&Tensor]) -> Result<Tensor, NumericsError> {
        let (f, eps) = (inputs[0], inputs[1]);
        let (h, w) = feature_dims(f)
            .map_err(|_| numerics_shape("edge_weights features", vec![FEATURE_DIM, 0, 0], f))?;
        if !eps.is_scalar() {
            return Err(numerics_shape("edge_weights epsilon", vec![1], eps));
        }
        Tensor::new(vec![8, h, w], edge_weights_raw(f.data(), h, w, eps.item()))
    }

    fn backward(&self, inputs: &[&Tensor], output: &Tensor, grad: &Tensor) -> Vec<Option<Tensor>> {
        let (f, eps) = (inputs[0], inputs[1].item());
        let (h, w) = (f.shape()[1], f.shape()[2]);
        let hw = h * w;
        let fd = f.data();
        let wt = output.data();
        let g = grad.data();
        let mut df = vec![0.0; FEATURE_DIM * hw];
        let mut deps = 0.0;
        let inv_e2 = 1.0 / (eps * eps);
        for r in 0..h {
            for c in 0..w {
                let i = r * w + c;
                for d in 0..8 {
                    let Some(j) = neighbor(h, w, r, c, d) else {
                        continue;
                    };
                    let slot = d * hw + i;
                    let gw = g[slot] * wt[slot];
                    if gw == 0.0 {
                        continue;
                    }
                    let mut d2 = 0.0;
                    for k in 0..FEATURE_DIM {
                        let diff = fd[k * hw + i] - fd[k * hw + j];
                        d2 += diff * diff;
                        // dw/df_i = -w (f_i - f_j) / eps^2
                        let t = gw * diff * inv_e2;
                        df[k * hw + i] -= t;
                        df[k * hw + j] += t;
                    }
                    // dw/deps = w |f_i - f_j|^2 / eps^3
                    deps += gw * d2 * inv_e2 / eps;
                }
            }
        }
        vec![
            Some(Tensor::new(f.shape().to_vec(), df).expect("shape")),
            Some(Tensor::scalar(deps)),
        ]
    }
}

fn weights_image_dims(wt: &Tensor, x: &Tensor) -> Result<(usize, usize), NumericsError> {
    let (h, w) = match *wt.shape() {
        [8, h, w] => (h, w),
        _ => return Err(numerics_shape("laplacian weights", vec![8, 0, 0], wt)),
    };
    if x.len() != h * w {
        return Err(numerics_shape("laplacian image", vec![1, h, w], x));
    }
    Ok((h, w))
}

/// Tape primitive: `(weights [8, h, w], x [1, h, w]) -> L x [1, h, w]`.
pub struct LaplacianOp;

impl CustomOp for LaplacianOp {
    fn name(&self) -> &'static str {
        "laplacian"
    }

    fn forward(&self, inputs: &[&Tensor]) -> Result<Tensor, NumericsError> {
        let (h, w) = weights_image_dims(inputs[0], inputs[1])?;
        Tensor::new(
            inputs[1].shape().to_vec(),
            laplacian_raw(inputs[0].data(), inputs[1].data(), h, w),
        )
    }

    fn backward(&self, inputs: &[&Tensor], _output: &Tensor, grad: &Tensor) -> Vec<Option<Tensor>> {
        let (wt, x) = (inputs[0], inputs[1]);
        let (h, w) = (wt.shape()[1], wt.shape()[2]);
        let hw = h * w;
        let (wd, xd, g) = (wt.data(), x.data(), grad.data());
        let mut dw = vec![0.0; 8 * hw];
        let mut dx = vec![0.0; hw];
        for r in 0..h {
            for c in 0..w {
                let i = r * w + c;
                for d in 0..8 {
                    if let Some(j) = neighbor(h, w, r, c, d) {
                        let slot = d * hw + i;
                        dw[slot] = g[i] * (xd[i] - xd[j]);
                        dx[i] += wd[slot] * g[i];
                        dx[j] -= wd[slot] * g[i];
                    }
                }
            }
        }
        vec![
            Some(Tensor::new(wt.shape().to_vec(), dw).expect("shape")),
            Some(Tensor::new(x.shape().to_vec(), dx).expect("shape")),
        ]
    }
}

/// Tape primitive: `(weights [8, h, w], x [1, h, w]) -> x^T L x [1]`.
pub struct GlrOp;

impl CustomOp for GlrOp {
    fn name(&self) -> &'static str {
        "glr"
    }

    fn forward(&self, inputs: &[&Tensor]) -> Result<Tensor, NumericsError> {
        let (h, w) = weights_image_dims(inputs[0], inputs[1])?;
        Ok(Tensor::scalar(glr_raw(
            inputs[0].data(),
            inputs[1].data(),
            h,
            w,
        )))
    }

    fn backward(&self, inputs: &[&Tensor], _output: &Tensor, grad: &Tensor) -> Vec<Option<Tensor>> {
        let (wt, x) = (inputs[0], inputs[1]);
        let (h, w) = (wt.shape()[1], wt.shape()[2]);
        let hw = h * w;
        let g = grad.item();
        let (wd, xd) = (wt.data(), x.data());
        let mut dw = vec![0.0; 8 * hw];
        let mut dx = vec![0.0; hw];
        for r in 0..h {
            for c in 0..w {
                let i = r * w + c;
                for d in 0..8 {
                    if let Some(j) = neighbor(h, w, r, c, d) {
                        let slot = d * hw + i;
                        let diff = xd[i] - xd[j];
                        dw[slot] = 0.5 * g * diff * diff;
                        let t = g * wd[slot] * diff;
                        dx[i] += t;
                        dx[j] -= t;
                    }
                }
            }
        }
        vec![
            Some(Tensor::new(wt.shape().to_vec(), dw).expect("shape")),
            Some(Tensor::new(x.shape().to_vec(), dx).expect("shape")),
        ]
    }
}
