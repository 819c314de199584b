//! Small reverse-mode differentiable MLPs for the plane boundary function
//! `f_boundary(theta) -> r` and the plane color function
//! `f_color(theta, r) -> RGB`.
//!
//! Angles are fed to the network as `(sin theta, cos theta)` so both
//! functions are 2*pi-periodic by construction; the boundary head is a
//! softplus (output strictly positive), the color head a per-channel
//! sigmoid (output in `[0, 1]`). Parameters live in one flat `f64` buffer so
//! optimizers, finite-difference checks, and serialization all address them
//! uniformly.

use std::f64::consts::TAU;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::geometry::PolarPoint;

#[derive(Debug, Error)]
pub enum MlpError {
    #[error("input has dimension {got}, expected {expected}")]
    ShapeMismatch { expected: usize, got: usize },
    #[error("backward called without a recorded forward pass")]
    NotRecorded,
    #[error("tape gradient buffer does not match this network")]
    TapeMismatch,
    #[error("boundary initialization failed: {0}")]
    Init(String),
    #[error("non-finite parameter or input")]
    NonFinite,
    #[error("malformed serialized network: {0}")]
    Parse(String),
}

/// Hidden-layer activation.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Activation {
    Tanh,
}

/// Output-layer squashing.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Head {
    /// `ln(1 + e^z)`, strictly positive (boundary radius).
    Softplus,
    /// Per-channel logistic, in `(0, 1)` (color).
    Sigmoid,
    /// No squashing; used by plain function-approximation tests.
    Identity,
}

/// How raw inputs map onto the first layer.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Encoding {
    /// `[theta] -> [sin theta, cos theta]`
    Angle,
    /// `[theta, r] -> [sin theta, cos theta, r]`
    AngleRadius,
    /// Identity.
    Raw,
}

fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

fn softplus(z: f64) -> f64 {
    z.max(0.0) + (-z.abs()).exp().ln_1p()
}

/// Fully-connected network with a flat parameter buffer.
///
/// `sizes` are the encoded layer widths, e.g. `[2, 32, 32, 1]` for the
/// boundary network (raw input `theta` encodes to 2 values).
#[derive(Clone, Debug)]
pub struct MlpFunction {
    sizes: Vec<usize>,
    activations: Vec<Activation>,
    head: Head,
    encoding: Encoding,
    params: Vec<f64>,
}

impl MlpFunction {
    /// Boundary network: theta -> radius, `[2, 32, 32, 1]`, softplus head.
    pub fn boundary(seed: u64) -> Self {
        Self::with_layers(vec![2, 32, 32, 1], Head::Softplus, Encoding::Angle, seed)
    }

    /// Color network: (theta, r) -> RGB, `[3, 64, 64, 3]`, sigmoid head.
    pub fn color(seed: u64) -> Self {
        Self::with_layers(vec![3, 64, 64, 3], Head::Sigmoid, Encoding::AngleRadius, seed)
    }

    /// General constructor; weights and biases drawn uniformly from
    /// `[-1/sqrt(fan_in), 1/sqrt(fan_in)]` with a seeded generator.
    pub fn with_layers(sizes: Vec<usize>, head: Head, encoding: Encoding, seed: u64) -> Self {
        assert!(sizes.len() >= 2, "need at least input and output layers");
        assert!(sizes.iter().all(|&s| s > 0), "layer sizes must be positive");
        match encoding {
            Encoding::Angle => assert_eq!(sizes[0], 2),
            Encoding::AngleRadius => assert_eq!(sizes[0], 3),
            Encoding::Raw => {}
        }
        let activations = vec![Activation::Tanh; sizes.len() - 2];
        let n_params: usize = (0..sizes.len() - 1)
            .map(|l| sizes[l + 1] * sizes[l] + sizes[l + 1])
            .sum();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = vec![0.0; n_params];
        let mut off = 0;
        for l in 0..sizes.len() - 1 {
            let bound = 1.0 / (sizes[l] as f64).sqrt();
            let count = sizes[l + 1] * sizes[l] + sizes[l + 1];
            for p in &mut params[off..off + count] {
                *p = rng.random_range(-bound..bound);
            }
            off += count;
        }
        MlpFunction { sizes, activations, head, encoding, params }
    }

    pub fn sizes(&self) -> &[usize] {
        &self.sizes
    }

    pub fn head(&self) -> Head {
        self.head
    }

    pub fn encoding(&self) -> Encoding {
        self.encoding
    }

    pub fn output_dim(&self) -> usize {
        *self.sizes.last().unwrap()
    }

    /// Dimension of the raw (pre-encoding) input.
    pub fn raw_input_dim(&self) -> usize {
        match self.encoding {
            Encoding::Angle => 1,
            Encoding::AngleRadius => 2,
            Encoding::Raw => self.sizes[0],
        }
    }

    pub fn param_count(&self) -> usize {
        self.params.len()
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    pub fn set_params(&mut self, values: &[f64]) {
        assert_eq!(values.len(), self.params.len());
        self.params.copy_from_slice(values);
    }

    fn encode(&self, raw: &[f64]) -> Vec<f64> {
        match self.encoding {
            Encoding::Angle => vec![raw[0].sin(), raw[0].cos()],
            Encoding::AngleRadius => vec![raw[0].sin(), raw[0].cos(), raw[1]],
            Encoding::Raw => raw.to_vec(),
        }
    }

    /// Offset of layer `l`'s weight block; biases follow the weights.
    fn layer_offset(&self, l: usize) -> usize {
        (0..l).map(|k| self.sizes[k + 1] * self.sizes[k] + self.sizes[k + 1]).sum()
    }

    fn check_input(&self, raw: &[f64]) -> Result<(), MlpError> {
        if raw.len() != self.raw_input_dim() {
            return Err(MlpError::ShapeMismatch { expected: self.raw_input_dim(), got: raw.len() });
        }
        if raw.iter().any(|v| !v.is_finite()) {
            return Err(MlpError::NonFinite);
        }
        Ok(())
    }

    /// Deterministic forward evaluation.
    pub fn forward(&self, raw: &[f64]) -> Result<Vec<f64>, MlpError> {
        self.check_input(raw)?;
        let mut a = self.encode(raw);
        for l in 0..self.sizes.len() - 1 {
            a = self.layer_forward(l, &a).0;
        }
        Ok(a)
    }

    fn layer_forward(&self, l: usize, a_in: &[f64]) -> (Vec<f64>, Vec<f64>) {
        let (n_in, n_out) = (self.sizes[l], self.sizes[l + 1]);
        let off = self.layer_offset(l);
        let weights = &self.params[off..off + n_out * n_in];
        let biases = &self.params[off + n_out * n_in..off + n_out * n_in + n_out];
        let mut z = vec![0.0; n_out];
        for i in 0..n_out {
            let mut acc = biases[i];
            let row = &weights[i * n_in..(i + 1) * n_in];
            for (w, x) in row.iter().zip(a_in) {
                acc += w * x;
            }
            z[i] = acc;
        }
        let out = if l + 1 == self.sizes.len() - 1 {
            match self.head {
                Head::Softplus => z.iter().map(|&v| softplus(v)).collect(),
                Head::Sigmoid => z.iter().map(|&v| sigmoid(v)).collect(),
                Head::Identity => z.clone(),
            }
        } else {
            match self.activations[l] {
                Activation::Tanh => z.iter().map(|v| v.tanh()).collect(),
            }
        };
        (out, z)
    }

    /// Forward pass that records everything [`Self::backward`] needs.
    /// Tape buffers are reused across calls, so per-pixel recording does
    /// not allocate after the first pass.
    pub fn forward_recorded(
        &self,
        raw: &[f64],
        tape: &mut GradientTape,
    ) -> Result<Vec<f64>, MlpError> {
        self.check_input(raw)?;
        tape.raw_inputs.clear();
        tape.raw_inputs.extend_from_slice(raw);
        let layers = self.sizes.len() - 1;
        tape.layer_inputs.resize(layers, Vec::new());
        tape.pre_activations.resize(layers, Vec::new());
        let mut a = self.encode(raw);
        for l in 0..layers {
            let buf = &mut tape.layer_inputs[l];
            buf.clear();
            buf.extend_from_slice(&a);
            let (out, z) = self.layer_forward(l, &a);
            let zbuf = &mut tape.pre_activations[l];
            zbuf.clear();
            zbuf.extend_from_slice(&z);
            a = out;
        }
        tape.output.clear();
        tape.output.extend_from_slice(&a);
        tape.recorded = true;
        Ok(a)
    }

    /// Reverse pass for the last recorded forward: accumulates parameter
    /// gradients of `output . upstream` into the tape and returns the
    /// gradient with respect to the raw inputs.
    pub fn backward(&self, tape: &mut GradientTape, upstream: &[f64]) -> Result<Vec<f64>, MlpError> {
        if !tape.recorded {
            return Err(MlpError::NotRecorded);
        }
        if tape.layer_inputs.len() != self.sizes.len() - 1
            || tape.layer_inputs[0].len() != self.sizes[0]
        {
            return Err(MlpError::TapeMismatch);
        }
        if upstream.len() != self.output_dim() {
            return Err(MlpError::ShapeMismatch { expected: self.output_dim(), got: upstream.len() });
        }
        if tape.grads.is_empty() {
            tape.grads = vec![0.0; self.params.len()];
        } else if tape.grads.len() != self.params.len() {
            return Err(MlpError::TapeMismatch);
        }

        let last = self.sizes.len() - 2;
        // Head backward: d z_L from d output.
        let mut dz: Vec<f64> = match self.head {
            Head::Softplus => tape.pre_activations[last]
                .iter()
                .zip(upstream)
                .map(|(&z, &u)| u * sigmoid(z))
                .collect(),
            Head::Sigmoid => tape.output.iter().zip(upstream).map(|(&y, &u)| u * y * (1.0 - y)).collect(),
            Head::Identity => upstream.to_vec(),
        };

        let mut da: Vec<f64> = Vec::new();
        for l in (0..=last).rev() {
            let (n_in, n_out) = (self.sizes[l], self.sizes[l + 1]);
            let off = self.layer_offset(l);
            let a_in = &tape.layer_inputs[l];
            // Parameter gradients: weight rows then biases.
            let (wgrads, bgrads) =
                tape.grads[off..off + n_out * n_in + n_out].split_at_mut(n_out * n_in);
            for (row, &dzi) in wgrads.chunks_exact_mut(n_in).zip(&dz) {
                for (g, &a) in row.iter_mut().zip(a_in) {
                    *g += dzi * a;
                }
            }
            for (g, &dzi) in bgrads.iter_mut().zip(&dz) {
                *g += dzi;
            }
            // Input gradient of this layer.
            da.clear();
            da.resize(n_in, 0.0);
            let weights = &self.params[off..off + n_out * n_in];
            for (row, &dzi) in weights.chunks_exact(n_in).zip(&dz) {
                for (d, &w) in da.iter_mut().zip(row) {
                    *d += w * dzi;
                }
            }
            if l > 0 {
                // Through the previous hidden activation (stored activated).
                match self.activations[l - 1] {
                    Activation::Tanh => {
                        dz.clear();
                        dz.extend(da.iter().zip(a_in).map(|(&g, &a)| g * (1.0 - a * a)));
                    }
                }
            } else {
                // Through the input encoding.
                return Ok(match self.encoding {
                    Encoding::Raw => da,
                    Encoding::Angle => {
                        let t = tape.raw_inputs[0];
                        vec![da[0] * t.cos() - da[1] * t.sin()]
                    }
                    Encoding::AngleRadius => {
                        let t = tape.raw_inputs[0];
                        vec![da[0] * t.cos() - da[1] * t.sin(), da[2]]
                    }
                });
            }
        }
        unreachable!("loop returns at l == 0");
    }

    /// Serialize: layer count, layer sizes, head and encoding tags, then the
    /// flat parameter array as little-endian f64.
    pub fn write_into(&self, out: &mut Vec<u8>) {
        out.extend_from_slice(&(self.sizes.len() as u32).to_le_bytes());
        for s in &self.sizes {
            out.extend_from_slice(&(*s as u32).to_le_bytes());
        }
        out.push(match self.head {
            Head::Softplus => 0,
            Head::Sigmoid => 1,
            Head::Identity => 2,
        });
        out.push(match self.encoding {
            Encoding::Angle => 0,
            Encoding::AngleRadius => 1,
            Encoding::Raw => 2,
        });
        out.extend_from_slice(&(self.params.len() as u64).to_le_bytes());
        for p in &self.params {
            out.extend_from_slice(&p.to_le_bytes());
        }
    }

    /// Inverse of [`Self::write_into`]; advances `pos`.
    pub fn read_from(data: &[u8], pos: &mut usize) -> Result<Self, MlpError> {
        let take = |pos: &mut usize, n: usize| -> Result<&[u8], MlpError> {
            let s = data
                .get(*pos..*pos + n)
                .ok_or_else(|| MlpError::Parse("unexpected end of data".into()))?;
            *pos += n;
            Ok(s)
        };
        let n_sizes = u32::from_le_bytes(take(pos, 4)?.try_into().unwrap()) as usize;
        if !(2..=16).contains(&n_sizes) {
            return Err(MlpError::Parse(format!("implausible layer count {n_sizes}")));
        }
        let mut sizes = Vec::with_capacity(n_sizes);
        for _ in 0..n_sizes {
            sizes.push(u32::from_le_bytes(take(pos, 4)?.try_into().unwrap()) as usize);
        }
        if sizes.iter().any(|&s| s == 0 || s > 1 << 16) {
            return Err(MlpError::Parse("implausible layer size".into()));
        }
        let head = match take(pos, 1)?[0] {
            0 => Head::Softplus,
            1 => Head::Sigmoid,
            2 => Head::Identity,
            t => return Err(MlpError::Parse(format!("unknown head tag {t}"))),
        };
        let encoding = match take(pos, 1)?[0] {
            0 => Encoding::Angle,
            1 => Encoding::AngleRadius,
            2 => Encoding::Raw,
            t => return Err(MlpError::Parse(format!("unknown encoding tag {t}"))),
        };
        let n_params = u64::from_le_bytes(take(pos, 8)?.try_into().unwrap()) as usize;
        let expected: usize = (0..sizes.len() - 1)
            .map(|l| sizes[l + 1] * sizes[l] + sizes[l + 1])
            .sum();
        if n_params != expected {
            return Err(MlpError::Parse(format!(
                "parameter count {n_params} does not match sizes (expected {expected})"
            )));
        }
        let mut params = Vec::with_capacity(n_params);
        for _ in 0..n_params {
            params.push(f64::from_le_bytes(take(pos, 8)?.try_into().unwrap()));
        }
        if params.iter().any(|p| !p.is_finite()) {
            return Err(MlpError::NonFinite);
        }
        let activations = vec![Activation::Tanh; sizes.len() - 2];
        Ok(MlpFunction { sizes, activations, head, encoding, params })
    }
}

/// Records one forward pass and accumulates parameter gradients across
/// backward calls. Accumulation is single-writer; parallel callers keep one
/// tape each and merge `grads` in a fixed order.
#[derive(Clone, Debug, Default)]
pub struct GradientTape {
    layer_inputs: Vec<Vec<f64>>,
    pre_activations: Vec<Vec<f64>>,
    raw_inputs: Vec<f64>,
    output: Vec<f64>,
    recorded: bool,
    /// Flat parameter-gradient accumulator, same layout as
    /// [`MlpFunction::params`]. Empty until the first backward call.
    pub grads: Vec<f64>,
}

impl GradientTape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn zero_grads(&mut self) {
        for g in &mut self.grads {
            *g = 0.0;
        }
    }
}

/// Full-batch Adam settings for the fitting helpers.
#[derive(Clone, Copy, Debug)]
pub struct FitConfig {
    pub iterations: usize,
    pub learning_rate: f64,
}

impl Default for FitConfig {
    fn default() -> Self {
        FitConfig { iterations: 2000, learning_rate: 2e-2 }
    }
}

/// Fit `f` to `(input, target)` pairs by full-batch Adam on the MSE.
/// Returns the mean absolute error after the final iteration.
pub fn fit_mlp(
    f: &mut MlpFunction,
    inputs: &[Vec<f64>],
    targets: &[Vec<f64>],
    cfg: &FitConfig,
) -> Result<f64, MlpError> {
    assert_eq!(inputs.len(), targets.len());
    assert!(!inputs.is_empty());
    let n = inputs.len() as f64;
    let dim_out = f.output_dim();
    let mut m = vec![0.0; f.param_count()];
    let mut v = vec![0.0; f.param_count()];
    let (b1, b2, eps) = (0.9, 0.999, 1e-8);
    let mut tape = GradientTape::new();
    for step in 1..=cfg.iterations {
        tape.grads.clear();
        for (x, y) in inputs.iter().zip(targets) {
            let out = f.forward_recorded(x, &mut tape)?;
            let upstream: Vec<f64> = out
                .iter()
                .zip(y)
                .map(|(&o, &t)| 2.0 * (o - t) / (n * dim_out as f64))
                .collect();
            f.backward(&mut tape, &upstream)?;
        }
        let lr = cfg.learning_rate;
        for (i, p) in f.params_mut().iter_mut().enumerate() {
            let g = tape.grads[i];
            m[i] = b1 * m[i] + (1.0 - b1) * g;
            v[i] = b2 * v[i] + (1.0 - b2) * g * g;
            let mh = m[i] / (1.0 - b1.powi(step as i32));
            let vh = v[i] / (1.0 - b2.powi(step as i32));
            *p -= lr * mh / (vh.sqrt() + eps);
        }
    }
    let mut abs_err = 0.0;
    for (x, y) in inputs.iter().zip(targets) {
        let out = f.forward(x)?;
        for (o, t) in out.iter().zip(y) {
            abs_err += (o - t).abs();
        }
    }
    Ok(abs_err / (inputs.len() * dim_out) as f64)
}

/// Number of angular bins used when initializing a boundary network from
/// voxel samples.
pub const INIT_BINS: usize = 32;

/// Per-bin maximum radius of polar samples; empty bins are filled by
/// circular linear interpolation between their non-empty neighbors.
/// Requires samples in at least 3 distinct bins.
pub fn bin_max_radii(samples: &[PolarPoint], bins: usize) -> Result<Vec<f64>, MlpError> {
    let mut maxima = vec![f64::NEG_INFINITY; bins];
    for s in samples {
        let b = ((s.theta / TAU * bins as f64).floor() as usize).min(bins - 1);
        maxima[b] = maxima[b].max(s.r);
    }
    let occupied = maxima.iter().filter(|m| m.is_finite()).count();
    if samples.len() < 3 || occupied < 3 {
        return Err(MlpError::Init(format!(
            "need >= 3 samples spanning >= 3 angular bins, got {} samples in {} bins",
            samples.len(),
            occupied
        )));
    }
    // Circular interpolation across empty bins.
    let filled: Vec<f64> = (0..bins)
        .map(|b| {
            if maxima[b].is_finite() {
                return maxima[b];
            }
            let mut prev = b;
            let mut dp = 0;
            while !maxima[prev].is_finite() {
                prev = (prev + bins - 1) % bins;
                dp += 1;
            }
            let mut next = b;
            let mut dn = 0;
            while !maxima[next].is_finite() {
                next = (next + 1) % bins;
                dn += 1;
            }
            let w = dn as f64 / (dp + dn) as f64;
            maxima[prev] * w + maxima[next] * (1.0 - w)
        })
        .collect();
    Ok(filled)
}

/// Initialize a boundary network so `f(theta)` approximates the per-bin
/// maximum radius of the given on-plane samples (least squares, fixed
/// iteration budget). Returns the network and its mean absolute fit error
/// over the bin targets.
pub fn init_boundary_from_voxels(
    samples: &[PolarPoint],
    seed: u64,
) -> Result<(MlpFunction, f64), MlpError> {
    let targets = bin_max_radii(samples, INIT_BINS)?;
    let mut f = MlpFunction::boundary(seed);
    let inputs: Vec<Vec<f64>> = (0..INIT_BINS)
        .map(|b| vec![(b as f64 + 0.5) / INIT_BINS as f64 * TAU])
        .collect();
    let target_vecs: Vec<Vec<f64>> = targets.iter().map(|&t| vec![t]).collect();
    let err = fit_mlp(&mut f, &inputs, &target_vecs, &FitConfig::default())?;
    Ok((f, err))
}
