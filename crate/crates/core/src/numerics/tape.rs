//! Reverse-mode differentiation over an append-only tape.
//!
//! Every primitive appends one node holding its forward value and the operand
//! handles needed by its adjoint. Operands always precede the node that uses
//! them, so a single reverse sweep over the node list is a valid topological
//! order.

use super::kernels::{bounded_sigmoid, col2im, gemm, im2col, sigmoid};
use super::{NumericsError, Tensor};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// A differentiable primitive implemented outside this module.
///
/// `backward` returns one optional gradient per input, each shaped like that
/// input. `None` means the input receives no contribution.
pub trait CustomOp: Send + Sync {
    fn name(&self) -> &'static str;

    fn forward(&self, inputs: &[&Tensor]) -> Result<Tensor, NumericsError>;

    fn backward(&self, inputs: &[&Tensor], output: &Tensor, grad: &Tensor) -> Vec<Option<Tensor>>;
}

enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Offset(Var),
    MulScalar(Var, Var),
    Relu(Var),
    Sigmoid(Var),
    BoundedSigmoid(Var, f64, f64),
    Exp(Var),
    Square(Var),
    Sum(Var),
    Mean(Var),
    Dot(Var, Var),
    Reshape(Var),
    Conv2d {
        input: Var,
        kernel: Var,
        bias: Var,
    },
    SpatialNorm {
        input: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
    },
    GlobalAvgPool(Var),
    Affine {
        input: Var,
        weight: Var,
    },
    Custom {
        op: Box<dyn CustomOp>,
        inputs: Vec<Var>,
    },
}

struct Node {
    value: Tensor,
    op: Op,
}

/// Append-only record of a forward computation.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Result of a reverse sweep: one accumulated gradient per tape node.
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
    shapes: Vec<Vec<usize>>,
}

impl Gradients {
    /// Gradient with respect to `var`; zeros when `var` did not influence the seed.
    pub fn wrt(&self, var: Var) -> Tensor {
        match &self.grads[var.0] {
            Some(g) => g.clone(),
            None => Tensor::zeros(&self.shapes[var.0]),
        }
    }

    pub fn get(&self, var: Var) -> Option<&Tensor> {
        self.grads[var.0].as_ref()
    }

    pub fn take(&mut self, var: Var) -> Tensor {
        self.grads[var.0]
            .take()
            .unwrap_or_else(|| Tensor::zeros(&self.shapes[var.0]))
    }
}

fn check_same(op: &'static str, a: &Tensor, b: &Tensor) -> Result<(), NumericsError> {
    if a.shape() != b.shape() {
        return Err(NumericsError::ShapeMismatch {
            op,
            expected: a.shape().to_vec(),
            found: b.shape().to_vec(),
        });
    }
    Ok(())
}

fn check_scalar(op: &'static str, t: &Tensor) -> Result<(), NumericsError> {
    if !t.is_scalar() {
        return Err(NumericsError::ShapeMismatch {
            op,
            expected: vec![1],
            found: t.shape().to_vec(),
        });
    }
    Ok(())
}

fn zip_map(a: &Tensor, b: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
    let data = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
    Tensor::new(a.shape().to_vec(), data).expect("shape preserved")
}

fn chw(op: &'static str, t: &Tensor) -> Result<(usize, usize, usize), NumericsError> {
    match *t.shape() {
        [c, h, w] => Ok((c, h, w)),
        _ => Err(NumericsError::Rank {
            op,
            expected: 3,
            found: t.shape().to_vec(),
        }),
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    fn push(&mut self, value: Tensor, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf)
    }

    /// A leaf that is not meant to be differentiated (data, measurements).
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, NumericsError> {
        check_same("add", self.value(a), self.value(b))?;
        let v = zip_map(self.value(a), self.value(b), |x, y| x + y);
        Ok(self.push(v, Op::Add(a, b)))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var, NumericsError> {
        check_same("sub", self.value(a), self.value(b))?;
        let v = zip_map(self.value(a), self.value(b), |x, y| x - y);
        Ok(self.push(v, Op::Sub(a, b)))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, NumericsError> {
        check_same("mul", self.value(a), self.value(b))?;
        let v = zip_map(self.value(a), self.value(b), |x, y| x * y);
        Ok(self.push(v, Op::Mul(a, b)))
    }

    /// Multiplication by a fixed constant.
    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let v = self.value(a).map(|x| x * s);
        self.push(v, Op::Scale(a, s))
    }

    /// Addition of a fixed constant.
    pub fn offset(&mut self, a: Var, c: f64) -> Var {
        let v = self.value(a).map(|x| x + c);
        self.push(v, Op::Offset(a))
    }

    /// Tensor times a recorded one-element scalar.
    pub fn mul_scalar(&mut self, a: Var, s: Var) -> Result<Var, NumericsError> {
        check_scalar("mul_scalar", self.value(s))?;
        let sv = self.value(s).item();
        let v = self.value(a).map(|x| x * sv);
        Ok(self.push(v, Op::MulScalar(a, s)))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let v = self.value(a).map(|x| x.max(0.0));
        self.push(v, Op::Relu(a))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let v = self.value(a).map(sigmoid);
        self.push(v, Op::Sigmoid(a))
    }

    /// `lo + (hi - lo) * sigmoid(a)`, strictly inside the open interval
    /// `(lo, hi)` for every finite input.
    pub fn bounded_sigmoid(&mut self, a: Var, lo: f64, hi: f64) -> Var {
        let v = self.value(a).map(|x| bounded_sigmoid(x, lo, hi));
        self.push(v, Op::BoundedSigmoid(a, lo, hi))
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let v = self.value(a).map(f64::exp);
        self.push(v, Op::Exp(a))
    }

    pub fn square(&mut self, a: Var) -> Var {
        let v = self.value(a).map(|x| x * x);
        self.push(v, Op::Square(a))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let v = Tensor::scalar(self.value(a).sum());
        self.push(v, Op::Sum(a))
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let t = self.value(a);
        let v = Tensor::scalar(t.sum() / t.len() as f64);
        self.push(v, Op::Mean(a))
    }

    pub fn dot(&mut self, a: Var, b: Var) -> Result<Var, NumericsError> {
        check_same("dot", self.value(a), self.value(b))?;
        let v = Tensor::scalar(self.value(a).dot(self.value(b)));
        Ok(self.push(v, Op::Dot(a, b)))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var, NumericsError> {
        let v = self.value(a).clone().reshaped(shape)?;
        Ok(self.push(v, Op::Reshape(a)))
    }

    /// "Same" zero-padded 2D cross-correlation.
    ///
    /// `input` is `[c_in, h, w]`, `kernel` is `[c_out, c_in, k, k]` with odd
    /// `k`, `bias` is `[c_out]`.
    pub fn conv2d(&mut self, input: Var, kernel: Var, bias: Var) -> Result<Var, NumericsError> {
        let (c_in, h, w) = chw("conv2d", self.value(input))?;
        let ks = self.value(kernel).shape().to_vec();
        let [c_out, kc_in, k, k2] = ks[..] else {
            return Err(NumericsError::Rank {
                op: "conv2d kernel",
                expected: 4,
                found: ks,
            });
        };
        if k != k2 || k % 2 == 0 {
            return Err(NumericsError::Kernel { k: k.max(k2) });
        }
        if kc_in != c_in {
            return Err(NumericsError::ShapeMismatch {
                op: "conv2d input channels",
                expected: vec![kc_in],
                found: vec![c_in],
            });
        }
        if self.value(bias).shape() != [c_out] {
            return Err(NumericsError::ShapeMismatch {
                op: "conv2d bias",
                expected: vec![c_out],
                found: self.value(bias).shape().to_vec(),
            });
        }
        let hw = h * w;
        let col = im2col(self.value(input).data(), c_in, h, w, k);
        let mut out = vec![0.0; c_out * hw];
        for (co, &b) in self.value(bias).data().iter().enumerate() {
            out[co * hw..(co + 1) * hw].fill(b);
        }
        gemm(
            c_out,
            c_in * k * k,
            hw,
            self.value(kernel).data(),
            false,
            &col,
            false,
            1.0,
            &mut out,
        );
        let v = Tensor::new(vec![c_out, h, w], out)?;
        Ok(self.push(v, Op::Conv2d { input, kernel, bias }))
    }

    /// Per-channel normalization over the spatial dimensions followed by a
    /// per-channel affine map `gamma * xhat + beta`.
    pub fn spatial_norm(
        &mut self,
        input: Var,
        gamma: Var,
        beta: Var,
        eps_norm: f64,
    ) -> Result<Var, NumericsError> {
        let (c, h, w) = chw("spatial_norm", self.value(input))?;
        let hw = h * w;
        if hw < 2 {
            return Err(NumericsError::TooSmall {
                op: "spatial_norm",
                need: 2,
                found: hw,
            });
        }
        for (name, p) in [("spatial_norm gamma", gamma), ("spatial_norm beta", beta)] {
            if self.value(p).shape() != [c] {
                return Err(NumericsError::ShapeMismatch {
                    op: name,
                    expected: vec![c],
                    found: self.value(p).shape().to_vec(),
                });
            }
        }
        let x = self.value(input).data();
        let g = self.value(gamma).data();
        let b = self.value(beta).data();
        let mut xhat = vec![0.0; c * hw];
        let mut inv_std = vec![0.0; c];
        let mut out = vec![0.0; c * hw];
        for ch in 0..c {
            let plane = &x[ch * hw..(ch + 1) * hw];
            let mean = plane.iter().sum::<f64>() / hw as f64;
            let var = plane.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / hw as f64;
            let is = 1.0 / (var + eps_norm).sqrt();
            inv_std[ch] = is;
            for i in 0..hw {
                let xh = (plane[i] - mean) * is;
                xhat[ch * hw + i] = xh;
                out[ch * hw + i] = g[ch] * xh + b[ch];
            }
        }
        let v = Tensor::new(vec![c, h, w], out)?;
        Ok(self.push(
            v,
            Op::SpatialNorm {
                input,
                gamma,
                beta,
                xhat,
                inv_std,
            },
        ))
    }

    /// `[c, h, w] -> [c]` spatial mean.
    pub fn global_avg_pool(&mut self, a: Var) -> Result<Var, NumericsError> {
        let (c, h, w) = chw("global_avg_pool", self.value(a))?;
        let hw = h * w;
        let d = self.value(a).data();
        let v: Vec<f64> = (0..c)
            .map(|ch| d[ch * hw..(ch + 1) * hw].iter().sum::<f64>() / hw as f64)
            .collect();
        let v = Tensor::new(vec![c], v)?;
        Ok(self.push(v, Op::GlobalAvgPool(a)))
    }

    /// `weight [m, n] * input [n] + bias [m]`.
    pub fn affine(&mut self, input: Var, weight: Var, bias: Var) -> Result<Var, NumericsError> {
        let n = self.value(input).len();
        let ws = self.value(weight).shape().to_vec();
        let [m, wn] = ws[..] else {
            return Err(NumericsError::Rank {
                op: "affine weight",
                expected: 2,
                found: ws,
            });
        };
        if wn != n {
            return Err(NumericsError::ShapeMismatch {
                op: "affine input",
                expected: vec![wn],
                found: vec![n],
            });
        }
        if self.value(bias).shape() != [m] {
            return Err(NumericsError::ShapeMismatch {
                op: "affine bias",
                expected: vec![m],
                found: self.value(bias).shape().to_vec(),
            });
        }
        let x = self.value(input).data();
        let wt = self.value(weight).data();
        let out: Vec<f64> = (0..m)
            .map(|i| {
                wt[i * n..(i + 1) * n]
                    .iter()
                    .zip(x)
                    .map(|(a, b)| a * b)
                    .sum::<f64>()
            })
            .collect();
        let lin = self.push(Tensor::new(vec![m], out)?, Op::Affine { input, weight });
        self.add(lin, bias)
    }

    pub fn custom(&mut self, op: Box<dyn CustomOp>, inputs: &[Var]) -> Result<Var, NumericsError> {
        let vals: Vec<&Tensor> = inputs.iter().map(|&v| self.value(v)).collect();
        let out = op.forward(&vals)?;
        Ok(self.push(
            out,
            Op::Custom {
                op,
                inputs: inputs.to_vec(),
            },
        ))
    }

    /// Reverse sweep from a scalar loss.
    pub fn backward(&self, loss: Var) -> Result<Gradients, NumericsError> {
        let value = self.value(loss);
        if !value.is_scalar() {
            return Err(NumericsError::NotScalar {
                shape: value.shape().to_vec(),
            });
        }
        self.backward_seeded(&[(loss, Tensor::filled(value.shape(), 1.0))])
    }

    /// Reverse sweep from arbitrary output seeds (vector-Jacobian product).
    ///
    /// Several seeds may be supplied; their contributions add.
    pub fn backward_seeded(&self, seeds: &[(Var, Tensor)]) -> Result<Gradients, NumericsError> {
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        for (v, g) in seeds {
            check_same("backward seed", self.value(*v), g)?;
            accumulate(&mut grads, *v, g.clone());
        }
        let start = seeds.iter().map(|(v, _)| v.0).max().unwrap_or(0);
        for i in (0..=start.min(self.nodes.len().saturating_sub(1))).rev() {
            if matches!(self.nodes[i].op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.propagate(i, &g, &mut grads);
        }
        Ok(Gradients {
            grads,
            shapes: self.nodes.iter().map(|n| n.value.shape().to_vec()).collect(),
        })
    }

    fn propagate(&self, i: usize, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let node = &self.nodes[i];
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                accumulate(grads, *a, g.clone());
                accumulate(grads, *b, g.clone());
            }
            Op::Sub(a, b) => {
                accumulate(grads, *a, g.clone());
                accumulate(grads, *b, g.map(|x| -x));
            }
            Op::Mul(a, b) => {
                accumulate(grads, *a, zip_map(g, self.value(*b), |x, y| x * y));
                accumulate(grads, *b, zip_map(g, self.value(*a), |x, y| x * y));
            }
            Op::Scale(a, s) => accumulate(grads, *a, g.map(|x| x * s)),
            Op::Offset(a) | Op::Reshape(a) => {
                let shaped = Tensor::new(self.value(*a).shape().to_vec(), g.data().to_vec())
                    .expect("same length");
                accumulate(grads, *a, shaped);
            }
            Op::MulScalar(a, s) => {
                let sv = self.value(*s).item();
                accumulate(grads, *a, g.map(|x| x * sv));
                accumulate(grads, *s, Tensor::scalar(g.dot(self.value(*a))));
            }
            Op::Relu(a) => {
                accumulate(
                    grads,
                    *a,
                    zip_map(g, self.value(*a), |x, y| if y > 0.0 { x } else { 0.0 }),
                );
            }
            Op::Sigmoid(a) => {
                accumulate(grads, *a, zip_map(g, &node.value, |x, s| x * s * (1.0 - s)));
            }
            Op::BoundedSigmoid(a, lo, hi) => {
                let span = hi - lo;
                accumulate(
                    grads,
                    *a,
                    zip_map(g, self.value(*a), |x, v| {
                        let s = sigmoid(v);
                        x * span * s * (1.0 - s)
                    }),
                );
            }
            Op::Exp(a) => accumulate(grads, *a, zip_map(g, &node.value, |x, e| x * e)),
            Op::Square(a) => {
                accumulate(grads, *a, zip_map(g, self.value(*a), |x, y| 2.0 * x * y));
            }
            Op::Sum(a) => {
                let gv = g.item();
                accumulate(grads, *a, Tensor::filled(self.value(*a).shape(), gv));
            }
            Op::Mean(a) => {
                let t = self.value(*a);
                let gv = g.item() / t.len() as f64;
                accumulate(grads, *a, Tensor::filled(t.shape(), gv));
            }
            Op::Dot(a, b) => {
                let gv = g.item();
                accumulate(grads, *a, self.value(*b).map(|y| y * gv));
                accumulate(grads, *b, self.value(*a).map(|y| y * gv));
            }
            Op::Conv2d {
                input,
                kernel,
                bias,
            } => self.conv2d_backward(*input, *kernel, *bias, g, grads),
            Op::SpatialNorm {
                input,
                gamma,
                beta,
                xhat,
                inv_std,
            } => {
                let (c, h, w) = chw("spatial_norm", self.value(*input)).expect("checked");
                let hw = h * w;
                let n = hw as f64;
                let gam = self.value(*gamma).data();
                let gd = g.data();
                let mut dx = vec![0.0; c * hw];
                let mut dgamma = vec![0.0; c];
                let mut dbeta = vec![0.0; c];
                for ch in 0..c {
                    let gs = &gd[ch * hw..(ch + 1) * hw];
                    let xs = &xhat[ch * hw..(ch + 1) * hw];
                    let sum_g: f64 = gs.iter().sum();
                    let sum_gx: f64 = gs.iter().zip(xs).map(|(a, b)| a * b).sum();
                    dgamma[ch] = sum_gx;
                    dbeta[ch] = sum_g;
                    let k = gam[ch] * inv_std[ch] / n;
                    for j in 0..hw {
                        dx[ch * hw + j] = k * (n * gs[j] - sum_g - xs[j] * sum_gx);
                    }
                }
                accumulate(grads, *input, Tensor::new(vec![c, h, w], dx).expect("shape"));
                accumulate(grads, *gamma, Tensor::new(vec![c], dgamma).expect("shape"));
                accumulate(grads, *beta, Tensor::new(vec![c], dbeta).expect("shape"));
            }
            Op::GlobalAvgPool(a) => {
                let (c, h, w) = chw("global_avg_pool", self.value(*a)).expect("checked");
                let hw = h * w;
                let mut d = vec![0.0; c * hw];
                for ch in 0..c {
                    d[ch * hw..(ch + 1) * hw].fill(g.data()[ch] / hw as f64);
                }
                accumulate(grads, *a, Tensor::new(vec![c, h, w], d).expect("shape"));
            }
            Op::Affine { input, weight } => {
                let x = self.value(*input);
                let wt = self.value(*weight);
                let (m, n) = (wt.shape()[0], wt.shape()[1]);
                let mut dw = vec![0.0; m * n];
                let mut dx = vec![0.0; n];
                for r in 0..m {
                    let gr = g.data()[r];
                    for c in 0..n {
                        dw[r * n + c] = gr * x.data()[c];
                        dx[c] += gr * wt.data()[r * n + c];
                    }
                }
                accumulate(grads, *weight, Tensor::new(vec![m, n], dw).expect("shape"));
                accumulate(
                    grads,
                    *input,
                    Tensor::new(x.shape().to_vec(), dx).expect("shape"),
                );
            }
            Op::Custom { op, inputs } => {
                let vals: Vec<&Tensor> = inputs.iter().map(|&v| self.value(v)).collect();
                let gs = op.backward(&vals, &node.value, g);
                for (v, gi) in inputs.iter().zip(gs) {
                    if let Some(gi) = gi {
                        accumulate(grads, *v, gi);
                    }
                }
            }
        }
    }

    fn conv2d_backward(
        &self,
        input: Var,
        kernel: Var,
        bias: Var,
        g: &Tensor,
        grads: &mut [Option<Tensor>],
    ) {
        let x = self.value(input);
        let kt = self.value(kernel);
        let (c_in, h, w) = chw("conv2d", x).expect("checked");
        let c_out = kt.shape()[0];
        let k = kt.shape()[2];
        let hw = h * w;
        let rows = c_in * k * k;
        let gd = g.data();

        let db: Vec<f64> = (0..c_out)
            .map(|co| gd[co * hw..(co + 1) * hw].iter().sum())
            .collect();
        accumulate(grads, bias, Tensor::new(vec![c_out], db).expect("shape"));

        let col = im2col(x.data(), c_in, h, w, k);
        let mut dk = vec![0.0; c_out * rows];
        gemm(c_out, hw, rows, gd, false, &col, true, 0.0, &mut dk);
        accumulate(
            grads,
            kernel,
            Tensor::new(kt.shape().to_vec(), dk).expect("shape"),
        );

        let mut dcol = col;
        gemm(rows, c_out, hw, kt.data(), true, gd, false, 0.0, &mut dcol);
        let dx = col2im(&dcol, c_in, h, w, k);
        accumulate(grads, input, Tensor::new(vec![c_in, h, w], dx).expect("shape"));
    }
}

fn accumulate(grads: &mut [Option<Tensor>], v: Var, g: Tensor) {
    match &mut grads[v.0] {
        Some(existing) => existing.axpy(1.0, &g),
        slot @ None => *slot = Some(g),
    }
}
