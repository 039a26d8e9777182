//! The four lightweight CNNs and the constrained scalars `alpha` and `epsilon`.
//!
//! All learnable state lives in one flat list of tensors ([`ModelParams`]); a
//! [`Layout`] derived from the [`NetworkConfig`] says which slot is which. To
//! run a network on a tape, bind the parameters once with
//! [`ModelParams::bind`] and pass the resulting [`BoundParams`] around, so all
//! unrolled iterations share the same leaves.

use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::Reader;
use crate::graph::FEATURE_DIM;
use crate::image::Image;
use crate::numerics::{bounded_sigmoid, Gradients, NumericsError, Tape, Tensor, Var, DEFAULT_EPS_NORM};

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"GLRC";
pub const CHECKPOINT_VERSION: u16 = 1;

/// Upper bound of the step size `alpha = ALPHA_MAX * sigmoid(rho_alpha)`.
pub const ALPHA_MAX: f64 = 0.1;
/// `epsilon = EPS_MIN + EPS_SPAN * sigmoid(rho_eps)`.
pub const EPS_MIN: f64 = 1.0;
pub const EPS_SPAN: f64 = 0.5;
/// Upper bound of the regularization weight predicted by the mu network.
pub const MU_MAX: f64 = 0.1;

/// Learnable count reported for the reference model.
pub const REFERENCE_PARAMETER_COUNT: usize = 91_848;

#[derive(Debug, Error)]
pub enum NetworkError {
    #[error(transparent)]
    Numerics(#[from] NumericsError),
    #[error("invalid network config: {0}")]
    Config(String),
}

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("not a checkpoint file (bad magic bytes)")]
    Magic,
    #[error("unsupported checkpoint version {found} (expected {CHECKPOINT_VERSION})")]
    Version { found: u16 },
    #[error("checkpoint truncated: {0}")]
    Truncated(String),
    #[error("checkpoint CRC mismatch (stored {stored:08x}, computed {computed:08x})")]
    Checksum { stored: u32, computed: u32 },
    #[error("malformed checkpoint header: {0}")]
    Header(String),
    #[error("checkpoint architecture does not match the configuration")]
    Architecture,
}

/// Channel widths and kernel sizes of the four networks.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct NetworkConfig {
    pub prefilter_channels: Vec<usize>,
    pub prefilter_kernel: usize,
    pub feature_channels: Vec<usize>,
    pub feature_kernel: usize,
    pub mu_channels: Vec<usize>,
    pub mu_kernel: usize,
    pub post_channels: Vec<usize>,
    pub post_kernel: usize,
    pub eps_norm: f64,
}

impl Default for NetworkConfig {
    fn default() -> Self {
        Self {
            prefilter_channels: vec![1, 32, 32, 32, 1],
            prefilter_kernel: 3,
            feature_channels: vec![1, 16, 32, 32, 16, FEATURE_DIM],
            feature_kernel: 5,
            mu_channels: vec![1, 16, 16],
            mu_kernel: 3,
            post_channels: vec![1, 32, 32, 32, 1],
            post_kernel: 3,
            eps_norm: DEFAULT_EPS_NORM,
        }
    }
}

impl NetworkConfig {
    pub fn validate(&self) -> Result<(), NetworkError> {
        let err = |m: String| Err(NetworkError::Config(m));
        for (name, ch, k) in [
            ("prefilter", &self.prefilter_channels, self.prefilter_kernel),
            ("feature", &self.feature_channels, self.feature_kernel),
            ("mu", &self.mu_channels, self.mu_kernel),
            ("post", &self.post_channels, self.post_kernel),
        ] {
            if ch.len() < 2 || ch.contains(&0) {
                return err(format!("{name}: need at least two positive channel widths"));
            }
            if ch[0] != 1 {
                return err(format!("{name}: input must have one channel"));
            }
            if k % 2 == 0 {
                return err(format!("{name}: kernel size must be odd, got {k}"));
            }
        }
        for (name, ch) in [
            ("prefilter", &self.prefilter_channels),
            ("post", &self.post_channels),
        ] {
            if *ch.last().unwrap() != 1 {
                return err(format!("{name}: residual network must output one channel"));
            }
        }
        if *self.feature_channels.last().unwrap() != FEATURE_DIM {
            return err(format!("feature: must output {FEATURE_DIM} channels"));
        }
        if !(self.eps_norm > 0.0) {
            return err("eps_norm must be positive".into());
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum ParamKind {
    Kernel { fan_in: usize },
    Bias,
    Gamma,
    Beta,
    AffineWeight { fan_in: usize },
    Scalar,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParamSpec {
    pub name: String,
    pub shape: Vec<usize>,
    pub kind: ParamKind,
}

#[derive(Clone, Debug)]
pub struct ConvSlots {
    pub kernel: usize,
    pub bias: usize,
    pub norm: Option<(usize, usize)>,
}

/// Slot indices for every parameter group.
#[derive(Clone, Debug)]
pub struct Layout {
    pub prefilter: Vec<ConvSlots>,
    pub feature: Vec<ConvSlots>,
    pub mu_convs: Vec<ConvSlots>,
    pub mu_affine: (usize, usize),
    pub post: Vec<ConvSlots>,
    pub rho_alpha: usize,
    pub rho_eps: usize,
    pub specs: Vec<ParamSpec>,
}

impl Layout {
    pub fn new(cfg: &NetworkConfig) -> Self {
        let mut specs = Vec::new();
        let mut add = |name: String, shape: Vec<usize>, kind: ParamKind| {
            specs.push(ParamSpec { name, shape, kind });
            specs.len() - 1
        };
        let stack = |prefix: &str, ch: &[usize], k: usize, hidden_norm: bool, add: &mut dyn FnMut(String, Vec<usize>, ParamKind) -> usize| {
            let last = ch.len() - 2;
            (0..=last)
                .map(|l| {
                    let (ci, co) = (ch[l], ch[l + 1]);
                    let kernel = add(
                        format!("{prefix}.conv{l}.kernel"),
                        vec![co, ci, k, k],
                        ParamKind::Kernel { fan_in: ci * k * k },
                    );
                    let bias = add(format!("{prefix}.conv{l}.bias"), vec![co], ParamKind::Bias);
                    let norm = (hidden_norm && l < last).then(|| {
                        (
                            add(format!("{prefix}.norm{l}.gamma"), vec![co], ParamKind::Gamma),
                            add(format!("{prefix}.norm{l}.beta"), vec![co], ParamKind::Beta),
                        )
                    });
                    ConvSlots { kernel, bias, norm }
                })
                .collect::<Vec<_>>()
        };
        let prefilter = stack("prefilter", &cfg.prefilter_channels, cfg.prefilter_kernel, true, &mut add);
        let feature = stack("feature", &cfg.feature_channels, cfg.feature_kernel, true, &mut add);
        // The mu network has no output conv: every conv is followed by ReLU.
        let mu_ch = &cfg.mu_channels;
        let width = *mu_ch.last().unwrap();
        let mu_convs: Vec<ConvSlots> = (0..mu_ch.len() - 1)
            .map(|l| {
                let (ci, co) = (mu_ch[l], mu_ch[l + 1]);
                let k = cfg.mu_kernel;
                ConvSlots {
                    kernel: add(
                        format!("mu.conv{l}.kernel"),
                        vec![co, ci, k, k],
                        ParamKind::Kernel { fan_in: ci * k * k },
                    ),
                    bias: add(format!("mu.conv{l}.bias"), vec![co], ParamKind::Bias),
                    norm: None,
                }
            })
            .collect();
        let mu_affine = (
            add(
                "mu.fc.weight".into(),
                vec![1, width],
                ParamKind::AffineWeight { fan_in: width },
            ),
            add("mu.fc.bias".into(), vec![1], ParamKind::Bias),
        );
        let post = stack("post", &cfg.post_channels, cfg.post_kernel, true, &mut add);
        let rho_alpha = add("rho_alpha".into(), vec![1], ParamKind::Scalar);
        let rho_eps = add("rho_eps".into(), vec![1], ParamKind::Scalar);
        Self {
            prefilter,
            feature,
            mu_convs,
            mu_affine,
            post,
            rho_alpha,
            rho_eps,
            specs,
        }
    }

    fn count(&self, prefix: &str) -> usize {
        self.specs
            .iter()
            .filter(|s| s.name.starts_with(prefix))
            .map(|s| s.shape.iter().product::<usize>())
            .sum()
    }
}

/// Learnable counts per component.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParameterBreakdown {
    pub prefilter: usize,
    pub feature: usize,
    pub mu: usize,
    pub post: usize,
    pub scalars: usize,
    pub total: usize,
}

impl std::fmt::Display for ParameterBreakdown {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        writeln!(f, "  pre-filter CNN      {:>7}", self.prefilter)?;
        writeln!(f, "  feature CNN         {:>7}", self.feature)?;
        writeln!(f, "  mu CNN              {:>7}", self.mu)?;
        writeln!(f, "  post-processing CNN {:>7}", self.post)?;
        writeln!(f, "  alpha, epsilon      {:>7}", self.scalars)?;
        write!(
            f,
            "  total               {:>7}  (reference model: {REFERENCE_PARAMETER_COUNT})",
            self.total
        )
    }
}

/// All learnable state of the reconstruction model.
#[derive(Clone, Debug)]
pub struct ModelParams {
    config: NetworkConfig,
    layout: Layout,
    tensors: Vec<Tensor>,
}

impl PartialEq for ModelParams {
    fn eq(&self, other: &Self) -> bool {
        self.config == other.config && self.tensors == other.tensors
    }
}

/// Uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)) kernels, zero biases, unit gammas,
/// zero betas, and `rho_alpha = rho_eps = 0` (alpha 0.05, epsilon 1.25).
fn init_tensor(spec: &ParamSpec, rng: &mut ChaCha8Rng) -> Tensor {
    match spec.kind {
        ParamKind::Kernel { fan_in } | ParamKind::AffineWeight { fan_in } => {
            let bound = 1.0 / (fan_in as f64).sqrt();
            Tensor::from_fn(&spec.shape, |_| rng.gen_range(-bound..bound))
        }
        ParamKind::Gamma => Tensor::filled(&spec.shape, 1.0),
        ParamKind::Bias | ParamKind::Beta | ParamKind::Scalar => Tensor::zeros(&spec.shape),
    }
}

impl ModelParams {
    pub fn init(config: NetworkConfig, seed: u64) -> Result<Self, NetworkError> {
        config.validate()?;
        let layout = Layout::new(&config);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let tensors = layout.specs.iter().map(|s| init_tensor(s, &mut rng)).collect();
        Ok(Self {
            config,
            layout,
            tensors,
        })
    }

    pub fn from_tensors(config: NetworkConfig, tensors: Vec<Tensor>) -> Result<Self, NetworkError> {
        config.validate()?;
        let layout = Layout::new(&config);
        if tensors.len() != layout.specs.len()
            || tensors
                .iter()
                .zip(&layout.specs)
                .any(|(t, s)| t.shape() != s.shape.as_slice())
        {
            return Err(NetworkError::Config(
                "tensor list does not match the layout".into(),
            ));
        }
        Ok(Self {
            config,
            layout,
            tensors,
        })
    }

    pub fn config(&self) -> &NetworkConfig {
        &self.config
    }

    pub fn layout(&self) -> &Layout {
        &self.layout
    }

    pub fn tensors(&self) -> &[Tensor] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor] {
        &mut self.tensors
    }

    pub fn parameter_count(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }

    pub fn breakdown(&self) -> ParameterBreakdown {
        let l = &self.layout;
        ParameterBreakdown {
            prefilter: l.count("prefilter."),
            feature: l.count("feature."),
            mu: l.count("mu."),
            post: l.count("post."),
            scalars: l.count("rho_"),
            total: self.parameter_count(),
        }
    }

    pub fn rho_alpha(&self) -> f64 {
        self.tensors[self.layout.rho_alpha].item()
    }

    pub fn rho_eps(&self) -> f64 {
        self.tensors[self.layout.rho_eps].item()
    }

    pub fn set_rho_alpha(&mut self, v: f64) {
        self.tensors[self.layout.rho_alpha] = Tensor::scalar(v);
    }

    pub fn set_rho_eps(&mut self, v: f64) {
        self.tensors[self.layout.rho_eps] = Tensor::scalar(v);
    }

    pub fn alpha(&self) -> f64 {
        bounded_sigmoid(self.rho_alpha(), 0.0, ALPHA_MAX)
    }

    pub fn epsilon(&self) -> f64 {
        bounded_sigmoid(self.rho_eps(), EPS_MIN, EPS_MIN + EPS_SPAN)
    }

    /// Zeroes the last convolution (kernel and bias) of both residual
    /// networks, turning them into the identity map.
    pub fn zero_residual_bodies(&mut self) {
        for slots in [&self.layout.prefilter, &self.layout.post] {
            let last = slots.last().expect("at least one conv");
            for idx in [last.kernel, last.bias] {
                let shape = self.tensors[idx].shape().to_vec();
                self.tensors[idx] = Tensor::zeros(&shape);
            }
        }
    }

    /// Registers every tensor as a leaf on `tape`.
    pub fn bind<'p>(&'p self, tape: &mut Tape) -> BoundParams<'p> {
        let vars = self.tensors.iter().map(|t| tape.leaf(t.clone())).collect();
        BoundParams {
            params: self,
            vars,
        }
    }

    pub fn cnn_yb(&self, x: &Image) -> Result<Image, NetworkError> {
        self.eval_image(x, |b, t, v| b.cnn_yb(t, v))
    }

    pub fn postprocess(&self, x: &Image) -> Result<Image, NetworkError> {
        self.eval_image(x, |b, t, v| b.postprocess(t, v))
    }

    /// `[3, h, w]` feature map.
    pub fn cnn_f(&self, x: &Image) -> Result<Tensor, NetworkError> {
        let mut tape = Tape::new();
        let b = self.bind(&mut tape);
        let xv = tape.constant(x.to_tensor());
        let out = b.cnn_f(&mut tape, xv)?;
        Ok(tape.value(out).clone())
    }

    pub fn cnn_mu(&self, x: &Image) -> Result<f64, NetworkError> {
        let mut tape = Tape::new();
        let b = self.bind(&mut tape);
        let xv = tape.constant(x.to_tensor());
        let out = b.cnn_mu(&mut tape, xv)?;
        Ok(tape.value(out).item())
    }

    fn eval_image(
        &self,
        x: &Image,
        f: impl for<'b> Fn(&BoundParams<'b>, &mut Tape, Var) -> Result<Var, NumericsError>,
    ) -> Result<Image, NetworkError> {
        let mut tape = Tape::new();
        let b = self.bind(&mut tape);
        let xv = tape.constant(x.to_tensor());
        let out = f(&b, &mut tape, xv)?;
        Ok(Image::from_tensor(tape.value(out))?)
    }

    pub fn to_bytes(&self, info: &CheckpointInfo) -> Vec<u8> {
        let header = serde_json::to_vec(&CheckpointHeader {
            config: self.config.clone(),
            parameter_count: self.parameter_count(),
            tensor_count: self.tensors.len(),
            info: info.clone(),
        })
        .expect("header serializes");
        let mut out = Vec::with_capacity(14 + header.len() + 8 * self.parameter_count());
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        out.extend_from_slice(&(header.len() as u32).to_le_bytes());
        out.extend_from_slice(&header);
        for t in &self.tensors {
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        let crc = crc32fast::hash(&out[4..]);
        out.extend_from_slice(&crc.to_le_bytes());
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<(Self, CheckpointInfo), CheckpointError> {
        let mut r = Reader::new(bytes);
        let t = CheckpointError::Truncated;
        if r.take(4, "magic").map_err(t)? != CHECKPOINT_MAGIC {
            return Err(CheckpointError::Magic);
        }
        let version = u16::from_le_bytes(r.take(2, "version").map_err(t)?.try_into().unwrap());
        if version != CHECKPOINT_VERSION {
            return Err(CheckpointError::Version { found: version });
        }
        if bytes.len() < 14 {
            return Err(CheckpointError::Truncated("header length".into()));
        }
        let stored = u32::from_le_bytes(bytes[bytes.len() - 4..].try_into().unwrap());
        let computed = crc32fast::hash(&bytes[4..bytes.len() - 4]);
        let hlen = u32::from_le_bytes(r.take(4, "header length").map_err(t)?.try_into().unwrap());
        let header_bytes = r.take(hlen as usize, "header").map_err(t)?;
        if stored != computed {
            return Err(CheckpointError::Checksum { stored, computed });
        }
        let header: CheckpointHeader = serde_json::from_slice(header_bytes)
            .map_err(|e| CheckpointError::Header(e.to_string()))?;
        let layout = Layout::new(&header.config);
        if layout.specs.len() != header.tensor_count {
            return Err(CheckpointError::Architecture);
        }
        let mut tensors = Vec::with_capacity(layout.specs.len());
        for spec in &layout.specs {
            let n: usize = spec.shape.iter().product();
            let raw = r.take(8 * n, &spec.name).map_err(t)?;
            let data = raw
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                .collect();
            tensors.push(Tensor::new(spec.shape.clone(), data).expect("sized by spec"));
        }
        if r.remaining() != 4 {
            return Err(CheckpointError::Header(format!(
                "{} unexpected trailing bytes",
                r.remaining().saturating_sub(4)
            )));
        }
        let params = ModelParams::from_tensors(header.config, tensors)
            .map_err(|e| CheckpointError::Header(e.to_string()))?;
        if params.parameter_count() != header.parameter_count {
            return Err(CheckpointError::Architecture);
        }
        Ok((params, header.info))
    }

    pub fn save(&self, path: impl AsRef<Path>, info: &CheckpointInfo) -> Result<(), CheckpointError> {
        fs::write(path, self.to_bytes(info))?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<(Self, CheckpointInfo), CheckpointError> {
        Self::from_bytes(&fs::read(path)?)
    }
}

/// Training provenance stored alongside the weights.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CheckpointInfo {
    pub epochs_completed: usize,
    pub best_val_psnr: Option<f64>,
    pub config_hash: Option<String>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct CheckpointHeader {
    config: NetworkConfig,
    parameter_count: usize,
    tensor_count: usize,
    info: CheckpointInfo,
}

/// Parameters registered on one tape.
pub struct BoundParams<'p> {
    params: &'p ModelParams,
    vars: Vec<Var>,
}

impl BoundParams<'_> {
    pub fn vars(&self) -> &[Var] {
        &self.vars
    }

    /// Gradients for every parameter tensor, in layout order.
    pub fn collect_gradients(&self, grads: &Gradients) -> Vec<Tensor> {
        self.vars.iter().map(|&v| grads.wrt(v)).collect()
    }

    fn var(&self, idx: usize) -> Var {
        self.vars[idx]
    }

    fn conv_stack(
        &self,
        tape: &mut Tape,
        mut x: Var,
        convs: &[ConvSlots],
    ) -> Result<Var, NumericsError> {
        let last = convs.len() - 1;
        for (l, s) in convs.iter().enumerate() {
            x = tape.conv2d(x, self.var(s.kernel), self.var(s.bias))?;
            if l < last {
                if let Some((g, b)) = s.norm {
                    x = tape.spatial_norm(x, self.var(g), self.var(b), self.params.config.eps_norm)?;
                }
                x = tape.relu(x);
            }
        }
        Ok(x)
    }

    /// Residual pre-filter: `x + body(x)`.
    pub fn cnn_yb(&self, tape: &mut Tape, x: Var) -> Result<Var, NumericsError> {
        let body = self.conv_stack(tape, x, &self.params.layout.prefilter)?;
        tape.add(x, body)
    }

    /// Feature extractor, `[1, h, w] -> [3, h, w]`.
    pub fn cnn_f(&self, tape: &mut Tape, x: Var) -> Result<Var, NumericsError> {
        self.conv_stack(tape, x, &self.params.layout.feature)
    }

    /// Per-image regularization weight in `(0, MU_MAX)`, as a `[1]` tensor.
    pub fn cnn_mu(&self, tape: &mut Tape, x: Var) -> Result<Var, NumericsError> {
        let layout = &self.params.layout;
        let mut h = x;
        for s in &layout.mu_convs {
            h = tape.conv2d(h, self.var(s.kernel), self.var(s.bias))?;
            h = tape.relu(h);
        }
        let pooled = tape.global_avg_pool(h)?;
        let (w, b) = layout.mu_affine;
        let logit = tape.affine(pooled, self.var(w), self.var(b))?;
        Ok(tape.bounded_sigmoid(logit, 0.0, MU_MAX))
    }

    /// Residual refinement network: `x + body(x)`.
    pub fn postprocess(&self, tape: &mut Tape, x: Var) -> Result<Var, NumericsError> {
        let body = self.conv_stack(tape, x, &self.params.layout.post)?;
        tape.add(x, body)
    }

    pub fn alpha(&self, tape: &mut Tape) -> Var {
        tape.bounded_sigmoid(self.var(self.params.layout.rho_alpha), 0.0, ALPHA_MAX)
    }

    pub fn epsilon(&self, tape: &mut Tape) -> Var {
        tape.bounded_sigmoid(self.var(self.params.layout.rho_eps), EPS_MIN, EPS_MIN + EPS_SPAN)
    }
}
