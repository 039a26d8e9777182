//! The unrolled reconstruction loop: 4 layers of 10 shared-weight PFBS blocks
//! started from FBP and finished by the post-processing network.
//!
//! Each iteration runs
//!
//! ```text
//! x~     = cnn_yb(x)
//! f, mu  = cnn_f(x~), cnn_mu(x~)
//! W      = weights(f, eps)
//! x_temp = x - alpha * (2 A^T (A x - y) + mu * 2 L x)
//! x'     = (1 - c) x_temp + c x        (convex)   or   x_temp + c x   (literal)
//! ```
//!
//! With [`CnnRefresh::PerLayer`] the CNN outputs are computed once per layer
//! and reused by its blocks. The data term uses `A / s` and `y / s`, where `s`
//! is the spectral norm of `A` by default, so that step sizes in `(0, 0.1)`
//! are stable for any geometry.
//!
//! Gradients are computed segment by segment: a segment is the group of
//! iterations that share one CNN evaluation. Only segment input images are
//! kept from the forward pass; each segment is rebuilt on a fresh tape during
//! the backward sweep.

use std::io::Write;
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::graph::{EdgeWeightsOp, GraphWeights, LaplacianOp};
use crate::image::Image;
use crate::networks::{BoundParams, ModelParams, NetworkError};
use crate::numerics::{NumericsError, Tape, Tensor, Var};
use crate::projector::{Geometry, Projector, ProjectorError, RayAdjointOp, RayTransformOp, Sinogram};

pub const DEFAULT_FBP_FREQ_SCALING: f64 = 0.641;
const POWER_ITERATIONS: usize = 100;

#[derive(Debug, Error)]
pub enum PfbsError {
    #[error(transparent)]
    Projector(#[from] ProjectorError),
    #[error(transparent)]
    Numerics(#[from] NumericsError),
    #[error(transparent)]
    Network(#[from] NetworkError),
    #[error("non-finite {quantity} at iteration {iteration}")]
    NonFinite { iteration: usize, quantity: &'static str },
    #[error("invalid reconstruction config: {0}")]
    Config(String),
}

impl From<crate::graph::GraphError> for PfbsError {
    fn from(e: crate::graph::GraphError) -> Self {
        PfbsError::Config(e.to_string())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ResidualMode {
    /// `x' = (1 - c) x_temp + c x`.
    Convex,
    /// `x' = x_temp + c x`.
    Literal,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CnnRefresh {
    PerIteration,
    PerLayer,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum UpdateScheme {
    /// One step on the sum of both gradients.
    Combined,
    /// A data step followed by a GLR step evaluated at the intermediate image.
    TwoHalfSteps,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OperatorScaling {
    /// Divide `A` and `y` by the spectral norm of `A`.
    SpectralNorm,
    /// Use `A` and `y` as they are.
    Unit,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PfbsConfig {
    pub num_layers: usize,
    pub blocks_per_layer: usize,
    pub residual_coeff: f64,
    pub residual_mode: ResidualMode,
    pub cnn_refresh: CnnRefresh,
    pub update_scheme: UpdateScheme,
    pub operator_scaling: OperatorScaling,
    pub fbp_freq_scaling: f64,
    /// Stops the loop early; `None` runs all `num_layers * blocks_per_layer`.
    pub max_iterations: Option<usize>,
    /// Keep every segment's tape from the forward pass for the backward sweep
    /// instead of recomputing it. Trades memory for roughly a quarter of the
    /// gradient cost; sensible with per-layer refresh at small image sizes.
    pub retain_activations: bool,
}

impl Default for PfbsConfig {
    fn default() -> Self {
        Self {
            num_layers: 4,
            blocks_per_layer: 10,
            residual_coeff: 0.1,
            residual_mode: ResidualMode::Convex,
            cnn_refresh: CnnRefresh::PerIteration,
            update_scheme: UpdateScheme::Combined,
            operator_scaling: OperatorScaling::SpectralNorm,
            fbp_freq_scaling: DEFAULT_FBP_FREQ_SCALING,
            max_iterations: None,
            retain_activations: false,
        }
    }
}

impl PfbsConfig {
    pub fn validate(&self) -> Result<(), PfbsError> {
        if self.blocks_per_layer == 0 {
            return Err(PfbsError::Config("blocks_per_layer must be at least 1".into()));
        }
        if !(0.0..1.0).contains(&self.residual_coeff) {
            return Err(PfbsError::Config(format!(
                "residual_coeff must lie in [0, 1), got {}",
                self.residual_coeff
            )));
        }
        if !(self.fbp_freq_scaling > 0.0 && self.fbp_freq_scaling <= 1.0) {
            return Err(PfbsError::Config(format!(
                "fbp_freq_scaling must lie in (0, 1], got {}",
                self.fbp_freq_scaling
            )));
        }
        Ok(())
    }

    pub fn iterations(&self) -> usize {
        let full = self.num_layers * self.blocks_per_layer;
        self.max_iterations.map_or(full, |m| m.min(full))
    }

    /// Iteration counts of the groups that share one CNN evaluation.
    pub fn segments(&self) -> Vec<usize> {
        let total = self.iterations();
        let size = match self.cnn_refresh {
            CnnRefresh::PerIteration => 1,
            CnnRefresh::PerLayer => self.blocks_per_layer,
        };
        let mut out = vec![size; total / size];
        if total % size != 0 {
            out.push(total % size);
        }
        out
    }
}

/// Values produced by the CNNs for one image.
#[derive(Clone, Debug)]
pub struct CnnOutputs {
    pub weights: GraphWeights,
    pub mu: f64,
    pub epsilon: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IterationRecord {
    pub iteration: usize,
    pub mu: f64,
    pub alpha: f64,
    pub epsilon: f64,
    /// `|A x - y|^2` at the iterate entering this iteration, in sinogram units.
    pub data_term: f64,
    /// `x^T L x` at the same iterate.
    pub glr_term: f64,
}

impl IterationRecord {
    /// Value of the objective actually minimized: normalized data term plus
    /// `mu` times the GLR term.
    pub fn objective(&self, operator_scale: f64) -> f64 {
        self.data_term / (operator_scale * operator_scale) + self.mu * self.glr_term
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ReconstructionTrace {
    pub operator_scale: f64,
    pub records: Vec<IterationRecord>,
}

impl ReconstructionTrace {
    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn mean_mu(&self) -> Option<f64> {
        (!self.records.is_empty())
            .then(|| self.records.iter().map(|r| r.mu).sum::<f64>() / self.records.len() as f64)
    }

    pub fn write_csv<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        writeln!(w, "iteration,mu,alpha,epsilon,data_term,glr_term")?;
        for r in &self.records {
            writeln!(
                w,
                "{},{:e},{:e},{:e},{:e},{:e}",
                r.iteration, r.mu, r.alpha, r.epsilon, r.data_term, r.glr_term
            )?;
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct Reconstruction {
    pub image: Image,
    /// The FBP (or overridden) starting image.
    pub initial: Image,
    /// The last iterate, before post-processing.
    pub final_iterate: Image,
    pub trace: ReconstructionTrace,
}

/// Hooks for tests and diagnostics.
#[derive(Clone, Debug, Default)]
pub struct Overrides {
    /// Start from this image instead of FBP.
    pub initial: Option<Image>,
    /// Use this regularization weight instead of the mu network's output.
    pub mu: Option<f64>,
}

/// Output of [`Reconstructor::value_and_gradient`].
pub struct LossGradient {
    pub loss: f64,
    /// One tensor per parameter, in layout order.
    pub gradients: Vec<Tensor>,
    pub reconstruction: Reconstruction,
}

/// Inputs handed to a loss head: the reconstructed image and the mean `mu`
/// over all iterations, both as tape variables.
pub struct HeadInputs {
    pub output: Var,
    pub mu_mean: Var,
}

/// The unrolled solver for one geometry.
pub struct Reconstructor {
    projector: Arc<Projector>,
    cfg: PfbsConfig,
    scale: f64,
}

struct Segment {
    x_out: Var,
    mu: Var,
    records: Vec<IterationRecord>,
}

/// A segment tape kept from the forward pass.
struct Retained {
    tape: Tape,
    params: Vec<Var>,
    x_in: Var,
    x_out: Var,
    mu: Var,
}

struct ForwardPass {
    rec: Reconstruction,
    checkpoints: Vec<Image>,
    mus: Vec<f64>,
    retained: Vec<Retained>,
}

impl Reconstructor {
    pub fn new(geometry: Geometry, cfg: PfbsConfig) -> Result<Self, PfbsError> {
        Self::with_projector(Arc::new(Projector::new(geometry)?), cfg)
    }

    pub fn with_projector(projector: Arc<Projector>, cfg: PfbsConfig) -> Result<Self, PfbsError> {
        cfg.validate()?;
        let scale = match cfg.operator_scaling {
            OperatorScaling::SpectralNorm => projector.operator_norm(POWER_ITERATIONS),
            OperatorScaling::Unit => 1.0,
        };
        if !(scale > 0.0 && scale.is_finite()) {
            return Err(PfbsError::Config(format!("degenerate operator norm {scale}")));
        }
        Ok(Self {
            projector,
            cfg,
            scale,
        })
    }

    pub fn config(&self) -> &PfbsConfig {
        &self.cfg
    }

    pub fn projector(&self) -> &Arc<Projector> {
        &self.projector
    }

    pub fn geometry(&self) -> &Geometry {
        self.projector.geometry()
    }

    /// The divisor `s` applied to `A` and `y` in the data term.
    pub fn operator_scale(&self) -> f64 {
        self.scale
    }

    pub fn fbp(&self, y: &Sinogram) -> Result<Image, PfbsError> {
        Ok(self.projector.fbp(y, self.cfg.fbp_freq_scaling)?)
    }

    /// Graph weights, `mu` and `epsilon` computed from `x`.
    pub fn cnn_outputs(&self, params: &ModelParams, x: &Image) -> Result<CnnOutputs, PfbsError> {
        let mut tape = Tape::new();
        let b = params.bind(&mut tape);
        let xv = tape.constant(x.to_tensor());
        let eps = b.epsilon(&mut tape);
        let (w, mu) = self.cnn_vars(&mut tape, &b, xv, eps, None)?;
        Ok(CnnOutputs {
            weights: GraphWeights::from_tensor(tape.value(w))?,
            mu: tape.value(mu).item(),
            epsilon: tape.value(eps).item(),
        })
    }

    /// One PFBS update with precomputed CNN outputs.
    pub fn pfbs_step(
        &self,
        x: &Image,
        y: &Sinogram,
        params: &ModelParams,
        cached: &CnnOutputs,
    ) -> Result<Image, PfbsError> {
        y.check(self.geometry())?;
        let mut tape = Tape::new();
        let xv = tape.constant(x.to_tensor());
        let yv = tape.constant(self.scaled_sinogram(y));
        let w = tape.constant(cached.weights.to_tensor());
        let mu = tape.constant(Tensor::scalar(cached.mu));
        let alpha = tape.constant(Tensor::scalar(params.alpha()));
        let (next, _, _) = self.block(&mut tape, xv, yv, w, mu, alpha)?;
        Ok(Image::from_tensor(tape.value(next))?)
    }

    pub fn reconstruct(&self, y: &Sinogram, params: &ModelParams) -> Result<Reconstruction, PfbsError> {
        self.reconstruct_with(y, params, &Overrides::default())
    }

    pub fn reconstruct_with(
        &self,
        y: &Sinogram,
        params: &ModelParams,
        overrides: &Overrides,
    ) -> Result<Reconstruction, PfbsError> {
        Ok(self.forward_pass(y, params, overrides, false)?.rec)
    }

    /// Runs the loop and returns the reconstruction plus the input image of
    /// every segment (the checkpoints used by the backward sweep).
    fn forward_pass(
        &self,
        y: &Sinogram,
        params: &ModelParams,
        overrides: &Overrides,
        retain: bool,
    ) -> Result<ForwardPass, PfbsError> {
        y.check(self.geometry())?;
        let initial = match &overrides.initial {
            Some(x) => {
                let n = self.geometry().image_size;
                if (x.height(), x.width()) != (n, n) {
                    return Err(PfbsError::Config(format!(
                        "initial image is {}x{}, geometry needs {n}x{n}",
                        x.height(),
                        x.width()
                    )));
                }
                x.clone()
            }
            None => self.fbp(y)?,
        };
        let y_hat = self.scaled_sinogram(y);
        let mut x = initial.clone();
        let mut checkpoints = Vec::new();
        let mut mus = Vec::new();
        let mut records = Vec::new();
        let mut retained = Vec::new();
        for &len in &self.cfg.segments() {
            checkpoints.push(x.clone());
            let mut tape = Tape::new();
            let b = params.bind(&mut tape);
            let xv = tape.leaf(x.to_tensor());
            let seg = self.segment(&mut tape, &b, xv, &y_hat, records.len(), len, overrides.mu)?;
            mus.push(tape.value(seg.mu).item());
            records.extend(seg.records);
            x = Image::from_tensor(tape.value(seg.x_out))?;
            if retain {
                let params = b.vars().to_vec();
                retained.push(Retained {
                    tape,
                    params,
                    x_in: xv,
                    x_out: seg.x_out,
                    mu: seg.mu,
                });
            }
        }
        let final_iterate = x;
        let image = params.postprocess(&final_iterate)?;
        if !image.data().iter().all(|v| v.is_finite()) {
            return Err(PfbsError::NonFinite {
                iteration: records.len(),
                quantity: "post-processed image",
            });
        }
        let rec = Reconstruction {
            image,
            initial,
            final_iterate,
            trace: ReconstructionTrace {
                operator_scale: self.scale,
                records,
            },
        };
        Ok(ForwardPass {
            rec,
            checkpoints,
            mus,
            retained,
        })
    }

    /// Runs the loop, evaluates `head` on the output, and backpropagates the
    /// resulting scalar through every iteration to all parameters.
    pub fn value_and_gradient<F>(
        &self,
        y: &Sinogram,
        params: &ModelParams,
        head: F,
    ) -> Result<LossGradient, PfbsError>
    where
        F: FnOnce(&mut Tape, &BoundParams, HeadInputs) -> Result<Var, NumericsError>,
    {
        let ForwardPass {
            rec,
            checkpoints,
            mus,
            mut retained,
        } = self.forward_pass(y, params, &Overrides::default(), self.cfg.retain_activations)?;
        let segments = self.cfg.segments();
        let total: usize = segments.iter().sum();
        let mu_mean = if total == 0 {
            0.0
        } else {
            segments.iter().zip(&mus).map(|(&n, m)| n as f64 * m).sum::<f64>() / total as f64
        };

        // Head: post-processing and loss.
        let mut tape = Tape::new();
        let b = params.bind(&mut tape);
        let x_last = tape.leaf(rec.final_iterate.to_tensor());
        let out = b.postprocess(&mut tape, x_last)?;
        let mu_var = tape.leaf(Tensor::scalar(mu_mean));
        let loss = head(&mut tape, &b, HeadInputs { output: out, mu_mean: mu_var })?;
        let loss_value = tape.value(loss).item();
        if !loss_value.is_finite() {
            return Err(PfbsError::NonFinite {
                iteration: total,
                quantity: "loss",
            });
        }
        let grads = tape.backward(loss)?;
        let mut param_grads = b.collect_gradients(&grads);
        let mut g_x = grads.wrt(x_last);
        let d_mu_mean = grads.wrt(mu_var).item();

        let y_hat = self.scaled_sinogram(y);
        let mut first_iter = total;
        for (s, &len) in segments.iter().enumerate().rev() {
            first_iter -= len;
            let seg = match retained.pop() {
                Some(r) => r,
                None => {
                    let mut tape = Tape::new();
                    let b = params.bind(&mut tape);
                    let params = b.vars().to_vec();
                    let x_in = tape.leaf(checkpoints[s].to_tensor());
                    let seg = self.segment(&mut tape, &b, x_in, &y_hat, first_iter, len, None)?;
                    Retained {
                        tape,
                        params,
                        x_in,
                        x_out: seg.x_out,
                        mu: seg.mu,
                    }
                }
            };
            let d_mu = d_mu_mean * len as f64 / total as f64;
            let grads = seg.tape.backward_seeded(&[
                (seg.x_out, g_x),
                (seg.mu, Tensor::scalar(d_mu)),
            ])?;
            for (acc, &v) in param_grads.iter_mut().zip(&seg.params) {
                if let Some(g) = grads.get(v) {
                    acc.axpy(1.0, g);
                }
            }
            g_x = grads.wrt(seg.x_in);
            if !g_x.all_finite() {
                return Err(PfbsError::NonFinite {
                    iteration: first_iter,
                    quantity: "image gradient",
                });
            }
        }
        if let Some(i) = param_grads.iter().position(|g| !g.all_finite()) {
            return Err(PfbsError::NonFinite {
                iteration: 0,
                quantity: if i == params.layout().rho_alpha || i == params.layout().rho_eps {
                    "scalar parameter gradient"
                } else {
                    "network parameter gradient"
                },
            });
        }
        Ok(LossGradient {
            loss: loss_value,
            gradients: param_grads,
            reconstruction: rec,
        })
    }

    fn scaled_sinogram(&self, y: &Sinogram) -> Tensor {
        y.to_tensor().map(|v| v / self.scale)
    }

    fn cnn_vars(
        &self,
        tape: &mut Tape,
        b: &BoundParams,
        x: Var,
        eps: Var,
        mu_override: Option<f64>,
    ) -> Result<(Var, Var), PfbsError> {
        let xt = b.cnn_yb(tape, x)?;
        let f = b.cnn_f(tape, xt)?;
        let w = tape.custom(Box::new(EdgeWeightsOp), &[f, eps])?;
        let mu = match mu_override {
            Some(m) => tape.constant(Tensor::scalar(m)),
            None => b.cnn_mu(tape, xt)?,
        };
        Ok((w, mu))
    }

    /// Builds `len` iterations sharing one CNN evaluation on `tape`.
    #[allow(clippy::too_many_arguments)]
    fn segment(
        &self,
        tape: &mut Tape,
        b: &BoundParams,
        x_in: Var,
        y_hat: &Tensor,
        first_iter: usize,
        len: usize,
        mu_override: Option<f64>,
    ) -> Result<Segment, PfbsError> {
        let eps = b.epsilon(tape);
        let alpha = b.alpha(tape);
        let (w, mu) = self.cnn_vars(tape, b, x_in, eps, mu_override)?;
        let (eps_v, alpha_v, mu_v) = (
            tape.value(eps).item(),
            tape.value(alpha).item(),
            tape.value(mu).item(),
        );
        if !mu_v.is_finite() {
            return Err(PfbsError::NonFinite {
                iteration: first_iter,
                quantity: "mu",
            });
        }
        if !tape.value(w).all_finite() {
            return Err(PfbsError::NonFinite {
                iteration: first_iter,
                quantity: "graph weights",
            });
        }
        let yv = tape.constant(y_hat.clone());
        let mut x = x_in;
        let mut records = Vec::with_capacity(len);
        for k in 0..len {
            let (next, residual, lx) = self.block(tape, x, yv, w, mu, alpha)?;
            let iteration = first_iter + k;
            if !tape.value(next).all_finite() {
                return Err(PfbsError::NonFinite {
                    iteration,
                    quantity: "iterate",
                });
            }
            let s2 = self.scale * self.scale;
            let r = tape.value(residual);
            records.push(IterationRecord {
                iteration,
                mu: mu_v,
                alpha: alpha_v,
                epsilon: eps_v,
                data_term: r.dot(r) * s2,
                glr_term: tape.value(x).dot(tape.value(lx)),
            });
            x = next;
        }
        Ok(Segment {
            x_out: x,
            mu,
            records,
        })
    }

    /// One update; returns the next iterate, the data residual `A x - y` and
    /// `L x`, both at the incoming iterate.
    fn block(
        &self,
        tape: &mut Tape,
        x: Var,
        y_hat: Var,
        w: Var,
        mu: Var,
        alpha: Var,
    ) -> Result<(Var, Var, Var), PfbsError> {
        let data_grad = |tape: &mut Tape, x: Var| -> Result<(Var, Var), PfbsError> {
            let ax = tape.custom(Box::new(self.forward_op()), &[x])?;
            let r = tape.sub(ax, y_hat)?;
            let atr = tape.custom(Box::new(self.adjoint_op()), &[r])?;
            Ok((tape.scale(atr, 2.0), r))
        };
        let glr_grad = |tape: &mut Tape, x: Var| -> Result<(Var, Var), PfbsError> {
            let lx = tape.custom(Box::new(LaplacianOp), &[w, x])?;
            let g = tape.scale(lx, 2.0);
            Ok((tape.mul_scalar(g, mu)?, lx))
        };
        let (x_temp, residual, lx) = match self.cfg.update_scheme {
            UpdateScheme::Combined => {
                let (gd, r) = data_grad(tape, x)?;
                let (gr, lx) = glr_grad(tape, x)?;
                let g = tape.add(gd, gr)?;
                let step = tape.mul_scalar(g, alpha)?;
                (tape.sub(x, step)?, r, lx)
            }
            UpdateScheme::TwoHalfSteps => {
                let (gd, r) = data_grad(tape, x)?;
                let step = tape.mul_scalar(gd, alpha)?;
                let half = tape.sub(x, step)?;
                let (gr, _) = glr_grad(tape, half)?;
                let step = tape.mul_scalar(gr, alpha)?;
                // The trace reports L x at the incoming iterate.
                let lx = tape.custom(Box::new(LaplacianOp), &[w, x])?;
                (tape.sub(half, step)?, r, lx)
            }
        };
        let c = self.cfg.residual_coeff;
        let skip = tape.scale(x, c);
        let next = match self.cfg.residual_mode {
            ResidualMode::Convex => {
                let main = tape.scale(x_temp, 1.0 - c);
                tape.add(main, skip)?
            }
            ResidualMode::Literal => tape.add(x_temp, skip)?,
        };
        Ok((next, residual, lx))
    }

    fn forward_op(&self) -> RayTransformOp {
        RayTransformOp {
            projector: Arc::clone(&self.projector),
            scale: 1.0 / self.scale,
        }
    }

    fn adjoint_op(&self) -> RayAdjointOp {
        RayAdjointOp {
            projector: Arc::clone(&self.projector),
            scale: 1.0 / self.scale,
        }
    }
}
