//! A small dense feed-forward network with exact reverse-mode gradients.
//!
//! Hidden layers use the rectifier, the output layer is linear. Weights are
//! stored row-major as `[out][in]` so a forward pass is a sequence of
//! contiguous dot products.

use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

const SNAPSHOT_MAGIC: &[u8; 4] = b"TWNN";
const SNAPSHOT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct Layer {
    pub inputs: usize,
    pub outputs: usize,
    pub weights: Vec<f64>,
    pub biases: Vec<f64>,
}

impl Layer {
    fn zeros(inputs: usize, outputs: usize) -> Self {
        Self {
            inputs,
            outputs,
            weights: vec![0.0; inputs * outputs],
            biases: vec![0.0; outputs],
        }
    }

    fn affine(&self, input: &[f64], out: &mut Vec<f64>) {
        out.clear();
        out.extend(
            self.weights
                .chunks_exact(self.inputs)
                .zip(&self.biases)
                .map(|(row, b)| dot(row, input) + b),
        );
    }
}

#[inline]
fn dot(a: &[f64], b: &[f64]) -> f64 {
    // Four independent accumulators let the compiler vectorize the loop.
    let mut acc = [0.0f64; 4];
    let chunks = a.len() / 4;
    for c in 0..chunks {
        let i = c * 4;
        acc[0] += a[i] * b[i];
        acc[1] += a[i + 1] * b[i + 1];
        acc[2] += a[i + 2] * b[i + 2];
        acc[3] += a[i + 3] * b[i + 3];
    }
    let mut s = (acc[0] + acc[1]) + (acc[2] + acc[3]);
    for i in chunks * 4..a.len() {
        s += a[i] * b[i];
    }
    s
}

/// Dense network: rectifier hidden layers, identity output layer.
#[derive(Debug, Clone, PartialEq)]
pub struct Network {
    layers: Vec<Layer>,
}

/// Gradients of some scalar with respect to every parameter of a [`Network`].
#[derive(Debug, Clone, PartialEq)]
pub struct GradientSet {
    layers: Vec<Layer>,
}

/// Which way [`Network::param_step`] moves the parameters.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StepDirection {
    Ascend,
    Descend,
}

/// Per-layer activations recorded by [`Network::forward_trace`].
///
/// `activations[0]` is the input, `activations[l + 1]` the output of layer `l`
/// (after its activation function).
#[derive(Debug, Clone, Default)]
pub struct Trace {
    pub activations: Vec<Vec<f64>>,
}

impl Trace {
    pub fn output(&self) -> &[f64] {
        self.activations.last().map(Vec::as_slice).unwrap_or(&[])
    }
}

/// Activations of a whole batch; every matrix is row-major `[batch][width]`.
#[derive(Debug, Clone, Default)]
pub struct BatchTrace {
    pub batch: usize,
    pub activations: Vec<Vec<f64>>,
}

impl BatchTrace {
    pub fn output(&self) -> &[f64] {
        self.activations.last().map(Vec::as_slice).unwrap_or(&[])
    }
}

/// `c = a · b + beta · c` for row-major operands, where `b` may be read
/// transposed by passing its strides.
#[allow(clippy::too_many_arguments)]
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    (rsa, csa): (usize, usize),
    b: &[f64],
    (rsb, csb): (usize, usize),
    beta: f64,
    c: &mut [f64],
) {
    debug_assert!(m == 0 || k == 0 || a.len() > (m - 1) * rsa + (k - 1) * csa);
    debug_assert!(k == 0 || n == 0 || b.len() > (k - 1) * rsb + (n - 1) * csb);
    debug_assert!(c.len() >= m * n);
    // SAFETY: the asserts above bound every index the kernel touches; the
    // output slice is exclusively borrowed and disjoint from the inputs.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa as isize,
            csa as isize,
            b.as_ptr(),
            rsb as isize,
            csb as isize,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

impl Network {
    /// Builds a network with uniform `±sqrt(6 / (fan_in + fan_out))` weights
    /// and zero biases, deterministically from `seed`.
    pub fn new(layer_dims: &[usize], seed: u64) -> Result<Self> {
        if layer_dims.len() < 2 {
            return Err(Error::domain("a network needs at least two layer dimensions"));
        }
        if layer_dims.contains(&0) {
            return Err(Error::domain("layer dimensions must be >= 1"));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let layers = layer_dims
            .windows(2)
            .map(|w| {
                let (fan_in, fan_out) = (w[0], w[1]);
                let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
                let mut layer = Layer::zeros(fan_in, fan_out);
                for v in &mut layer.weights {
                    *v = rng.random_range(-bound..bound);
                }
                layer
            })
            .collect();
        Ok(Self { layers })
    }

    /// Builds a network from explicit layers, checking dimension consistency.
    pub fn from_layers(layers: Vec<Layer>) -> Result<Self> {
        if layers.is_empty() {
            return Err(Error::domain("a network needs at least one layer"));
        }
        for (l, layer) in layers.iter().enumerate() {
            if layer.inputs == 0 || layer.outputs == 0 {
                return Err(Error::domain(format!("layer {l} has a zero dimension")));
            }
            if layer.weights.len() != layer.inputs * layer.outputs || layer.biases.len() != layer.outputs {
                return Err(Error::domain(format!("layer {l} parameter arrays do not match its shape")));
            }
            if l > 0 && layers[l - 1].outputs != layer.inputs {
                return Err(Error::domain(format!("layer {l} input does not match previous output")));
            }
        }
        let net = Self { layers };
        if !net.is_finite() {
            return Err(Error::numeric("network parameters must be finite"));
        }
        Ok(net)
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [Layer] {
        &mut self.layers
    }

    pub fn layer_dims(&self) -> Vec<usize> {
        std::iter::once(self.layers[0].inputs)
            .chain(self.layers.iter().map(|l| l.outputs))
            .collect()
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].inputs
    }

    pub fn output_dim(&self) -> usize {
        self.layers[self.layers.len() - 1].outputs
    }

    pub fn param_count(&self) -> usize {
        self.layers.iter().map(|l| l.weights.len() + l.biases.len()).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.layers
            .iter()
            .all(|l| l.weights.iter().chain(&l.biases).all(|v| v.is_finite()))
    }

    fn check_input(&self, input: &[f64]) -> Result<()> {
        if input.len() != self.input_dim() {
            return Err(Error::domain(format!(
                "input length {} does not match network input dimension {}",
                input.len(),
                self.input_dim()
            )));
        }
        Ok(())
    }

    pub fn forward(&self, input: &[f64]) -> Result<Vec<f64>> {
        self.check_input(input)?;
        let mut cur = input.to_vec();
        let mut next = Vec::new();
        let last = self.layers.len() - 1;
        for (l, layer) in self.layers.iter().enumerate() {
            layer.affine(&cur, &mut next);
            if l < last {
                relu_in_place(&mut next);
            }
            std::mem::swap(&mut cur, &mut next);
        }
        Ok(cur)
    }

    /// Forward pass that keeps every layer's activations for a later
    /// [`Network::accumulate_gradients`].
    pub fn forward_trace(&self, input: &[f64]) -> Result<Trace> {
        self.check_input(input)?;
        let mut activations = Vec::with_capacity(self.layers.len() + 1);
        activations.push(input.to_vec());
        let last = self.layers.len() - 1;
        for (l, layer) in self.layers.iter().enumerate() {
            let mut out = Vec::with_capacity(layer.outputs);
            layer.affine(&activations[l], &mut out);
            if l < last {
                relu_in_place(&mut out);
            }
            activations.push(out);
        }
        Ok(Trace { activations })
    }

    /// Forward pass over `batch` inputs stored row-major in `inputs`.
    pub fn forward_batch(&self, inputs: &[f64], batch: usize) -> Result<BatchTrace> {
        if inputs.len() != batch * self.input_dim() {
            return Err(Error::domain(format!(
                "batch input holds {} values, expected {batch} x {}",
                inputs.len(),
                self.input_dim()
            )));
        }
        let mut activations = Vec::with_capacity(self.layers.len() + 1);
        activations.push(inputs.to_vec());
        let last = self.layers.len() - 1;
        for (l, layer) in self.layers.iter().enumerate() {
            let mut out = vec![0.0; batch * layer.outputs];
            gemm(
                batch,
                layer.inputs,
                layer.outputs,
                &activations[l],
                (layer.inputs, 1),
                &layer.weights,
                (1, layer.inputs),
                0.0,
                &mut out,
            );
            for row in out.chunks_exact_mut(layer.outputs) {
                for (v, b) in row.iter_mut().zip(&layer.biases) {
                    *v += b;
                }
                if l < last {
                    relu_in_place(row);
                }
            }
            activations.push(out);
        }
        Ok(BatchTrace { batch, activations })
    }

    /// Adds the gradients of `Σ_b output_b · output_grads_b` into `grads`.
    /// `output_grads` is row-major `[batch][output_dim]`.
    pub fn accumulate_gradients_batch(
        &self,
        trace: &BatchTrace,
        output_grads: &[f64],
        grads: &mut GradientSet,
    ) -> Result<()> {
        let batch = trace.batch;
        if output_grads.len() != batch * self.output_dim() {
            return Err(Error::domain("batch output gradient does not match the network output"));
        }
        if trace.activations.len() != self.layers.len() + 1 || !grads.congruent_with(self) {
            return Err(Error::domain("trace or gradient set does not match the network"));
        }
        let mut delta = output_grads.to_vec();
        for l in (0..self.layers.len()).rev() {
            let layer = &self.layers[l];
            let input = &trace.activations[l];
            let g = &mut grads.layers[l];
            for row in delta.chunks_exact(layer.outputs) {
                for (gb, d) in g.biases.iter_mut().zip(row) {
                    *gb += d;
                }
            }
            // dW += deltaᵀ · X
            gemm(
                layer.outputs,
                batch,
                layer.inputs,
                &delta,
                (1, layer.outputs),
                input,
                (layer.inputs, 1),
                1.0,
                &mut g.weights,
            );
            if l > 0 {
                let mut prev = vec![0.0; batch * layer.inputs];
                gemm(
                    batch,
                    layer.outputs,
                    layer.inputs,
                    &delta,
                    (layer.outputs, 1),
                    &layer.weights,
                    (layer.inputs, 1),
                    0.0,
                    &mut prev,
                );
                for (p, a) in prev.iter_mut().zip(input) {
                    if *a <= 0.0 {
                        *p = 0.0;
                    }
                }
                delta = prev;
            }
        }
        Ok(())
    }

    /// Gradients of `output · output_grad` with respect to every parameter.
    pub fn backward(&self, input: &[f64], output_grad: &[f64]) -> Result<GradientSet> {
        let trace = self.forward_trace(input)?;
        let mut grads = GradientSet::zeros_like(self);
        self.accumulate_gradients(&trace, output_grad, &mut grads)?;
        Ok(grads)
    }

    /// Adds the gradients of `output · output_grad` into `grads`, reusing the
    /// activations recorded in `trace`.
    pub fn accumulate_gradients(
        &self,
        trace: &Trace,
        output_grad: &[f64],
        grads: &mut GradientSet,
    ) -> Result<()> {
        if output_grad.len() != self.output_dim() {
            return Err(Error::domain(format!(
                "output gradient length {} does not match network output dimension {}",
                output_grad.len(),
                self.output_dim()
            )));
        }
        if trace.activations.len() != self.layers.len() + 1 || !grads.congruent_with(self) {
            return Err(Error::domain("trace or gradient set does not match the network"));
        }
        let mut delta = output_grad.to_vec();
        for l in (0..self.layers.len()).rev() {
            let layer = &self.layers[l];
            let input = &trace.activations[l];
            let g = &mut grads.layers[l];
            let mut prev = if l > 0 { vec![0.0; layer.inputs] } else { Vec::new() };
            for (o, &d) in delta.iter().enumerate() {
                if d == 0.0 {
                    continue;
                }
                g.biases[o] += d;
                let row = o * layer.inputs;
                let grow = &mut g.weights[row..row + layer.inputs];
                for (gw, x) in grow.iter_mut().zip(input) {
                    *gw += d * x;
                }
                if l > 0 {
                    let wrow = &layer.weights[row..row + layer.inputs];
                    for (p, w) in prev.iter_mut().zip(wrow) {
                        *p += d * w;
                    }
                }
            }
            if l > 0 {
                // Rectifier derivative, taken as 0 at the kink.
                for (p, a) in prev.iter_mut().zip(input) {
                    if *a <= 0.0 {
                        *p = 0.0;
                    }
                }
                delta = prev;
            }
        }
        Ok(())
    }

    /// `θ ← θ ± lr · grad`. Refuses the step if any gradient entry is not finite.
    pub fn param_step(&mut self, grads: &GradientSet, lr: f64, direction: StepDirection) -> Result<()> {
        if !grads.congruent_with(self) {
            return Err(Error::domain("gradient set is not shape-congruent with the network"));
        }
        if !grads.is_finite() {
            return Err(Error::numeric("non-finite gradient entry, step refused"));
        }
        let scale = match direction {
            StepDirection::Ascend => lr,
            StepDirection::Descend => -lr,
        };
        for (layer, g) in self.layers.iter_mut().zip(&grads.layers) {
            for (w, gw) in layer.weights.iter_mut().zip(&g.weights) {
                *w += scale * gw;
            }
            for (b, gb) in layer.biases.iter_mut().zip(&g.biases) {
                *b += scale * gb;
            }
        }
        Ok(())
    }

    pub fn same_topology(&self, other: &Network) -> bool {
        self.layer_dims() == other.layer_dims()
    }

    /// Overwrites every parameter with `other`'s.
    pub fn copy_params_from(&mut self, other: &Network) -> Result<()> {
        if !self.same_topology(other) {
            return Err(Error::domain(format!(
                "topology mismatch: {:?} vs {:?}",
                self.layer_dims(),
                other.layer_dims()
            )));
        }
        for (dst, src) in self.layers.iter_mut().zip(&other.layers) {
            dst.weights.copy_from_slice(&src.weights);
            dst.biases.copy_from_slice(&src.biases);
        }
        Ok(())
    }

    fn param_mut(&mut self, index: usize) -> &mut f64 {
        let mut idx = index;
        for layer in &mut self.layers {
            if idx < layer.weights.len() {
                return &mut layer.weights[idx];
            }
            idx -= layer.weights.len();
            if idx < layer.biases.len() {
                return &mut layer.biases[idx];
            }
            idx -= layer.biases.len();
        }
        panic!("parameter index {index} out of range");
    }

    /// Serializes the network into the versioned little-endian snapshot format:
    /// magic `TWNN`, `u32` version, `u32` layer-dimension count, the `u32`
    /// dimensions, then for each layer its row-major weights and its biases as
    /// `f64`.
    pub fn to_bytes(&self) -> Vec<u8> {
        let dims = self.layer_dims();
        let mut out = Vec::with_capacity(12 + 4 * dims.len() + 8 * self.param_count());
        out.extend_from_slice(SNAPSHOT_MAGIC);
        out.extend_from_slice(&SNAPSHOT_VERSION.to_le_bytes());
        out.extend_from_slice(&(dims.len() as u32).to_le_bytes());
        for d in &dims {
            out.extend_from_slice(&(*d as u32).to_le_bytes());
        }
        for layer in &self.layers {
            for v in layer.weights.iter().chain(&layer.biases) {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut cursor = SnapshotReader { bytes, pos: 0 };
        if cursor.take(4)? != SNAPSHOT_MAGIC {
            return Err(Error::domain("not a network snapshot (bad magic)"));
        }
        let version = cursor.u32()?;
        if version != SNAPSHOT_VERSION {
            return Err(Error::domain(format!("unsupported snapshot version {version}")));
        }
        let n = cursor.u32()? as usize;
        if n < 2 {
            return Err(Error::domain("snapshot holds fewer than two layer dimensions"));
        }
        let dims = (0..n)
            .map(|_| cursor.u32().map(|d| d as usize))
            .collect::<Result<Vec<_>>>()?;
        let mut layers = Vec::with_capacity(n - 1);
        for w in dims.windows(2) {
            let mut layer = Layer::zeros(w[0], w[1]);
            for v in layer.weights.iter_mut().chain(layer.biases.iter_mut()) {
                *v = cursor.f64()?;
            }
            layers.push(layer);
        }
        if cursor.pos != bytes.len() {
            return Err(Error::domain("trailing bytes after network snapshot"));
        }
        Self::from_layers(layers)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}

struct SnapshotReader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> SnapshotReader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos + n;
        let slice = self
            .bytes
            .get(self.pos..end)
            .ok_or_else(|| Error::domain("truncated network snapshot"))?;
        self.pos = end;
        Ok(slice)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

fn relu_in_place(v: &mut [f64]) {
    for x in v {
        if *x < 0.0 {
            *x = 0.0;
        }
    }
}

impl GradientSet {
    pub fn zeros_like(net: &Network) -> Self {
        Self {
            layers: net
                .layers
                .iter()
                .map(|l| Layer::zeros(l.inputs, l.outputs))
                .collect(),
        }
    }

    pub fn congruent_with(&self, net: &Network) -> bool {
        self.layers.len() == net.layers.len()
            && self
                .layers
                .iter()
                .zip(&net.layers)
                .all(|(g, l)| g.inputs == l.inputs && g.outputs == l.outputs)
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [Layer] {
        &mut self.layers
    }

    pub fn is_finite(&self) -> bool {
        self.layers
            .iter()
            .all(|l| l.weights.iter().chain(&l.biases).all(|v| v.is_finite()))
    }

    pub fn scale(&mut self, factor: f64) {
        for l in &mut self.layers {
            for v in l.weights.iter_mut().chain(l.biases.iter_mut()) {
                *v *= factor;
            }
        }
    }

    /// `self ← mu · self + other`.
    pub fn mul_add(&mut self, mu: f64, other: &GradientSet) {
        for (a, b) in self.layers.iter_mut().zip(&other.layers) {
            for (x, y) in a.weights.iter_mut().zip(&b.weights) {
                *x = mu * *x + y;
            }
            for (x, y) in a.biases.iter_mut().zip(&b.biases) {
                *x = mu * *x + y;
            }
        }
    }

    pub fn reset(&mut self) {
        self.scale(0.0);
    }

    /// All entries flattened in the same order as the network parameters.
    pub fn flatten(&self) -> Vec<f64> {
        self.layers
            .iter()
            .flat_map(|l| l.weights.iter().chain(&l.biases).copied())
            .collect()
    }

    pub fn max_abs(&self) -> f64 {
        self.layers
            .iter()
            .flat_map(|l| l.weights.iter().chain(&l.biases))
            .fold(0.0f64, |m, v| m.max(v.abs()))
    }
}

/// A scalar loss of the network output, returning its value and its gradient
/// with respect to the output.
pub trait OutputLoss {
    fn eval(&self, output: &[f64]) -> (f64, Vec<f64>);
}

impl<F> OutputLoss for F
where
    F: Fn(&[f64]) -> (f64, Vec<f64>),
{
    fn eval(&self, output: &[f64]) -> (f64, Vec<f64>) {
        self(output)
    }
}

/// Finite-difference step used by [`grad_check`].
pub const GRAD_CHECK_STEP: f64 = 1e-5;
/// Gradients smaller than this are compared in absolute rather than relative terms.
const GRAD_CHECK_FLOOR: f64 = 1e-7;
/// Upper bound on the number of parameters probed by [`grad_check`].
const GRAD_CHECK_MAX_PARAMS: usize = 2_000;

/// Worst relative error between the analytic gradient from
/// [`Network::backward`] and central finite differences of `loss`.
pub fn grad_check(net: &Network, input: &[f64], loss: &impl OutputLoss) -> Result<f64> {
    let (_, dloss) = loss.eval(&net.forward(input)?);
    let grads = net.backward(input, &dloss)?;
    grad_check_against(net, input, loss, &grads)
}

/// Like [`grad_check`] but compares a caller-supplied gradient set.
pub fn grad_check_against(
    net: &Network,
    input: &[f64],
    loss: &impl OutputLoss,
    grads: &GradientSet,
) -> Result<f64> {
    if !grads.congruent_with(net) {
        return Err(Error::domain("gradient set is not shape-congruent with the network"));
    }
    let analytic = grads.flatten();
    let total = analytic.len();
    let stride = total.div_ceil(GRAD_CHECK_MAX_PARAMS).max(1);
    let mut probe = net.clone();
    let mut worst = 0.0f64;
    for idx in (0..total).step_by(stride) {
        let orig = *probe.param_mut(idx);
        *probe.param_mut(idx) = orig + GRAD_CHECK_STEP;
        let plus = loss.eval(&probe.forward(input)?).0;
        *probe.param_mut(idx) = orig - GRAD_CHECK_STEP;
        let minus = loss.eval(&probe.forward(input)?).0;
        *probe.param_mut(idx) = orig;
        let numeric = (plus - minus) / (2.0 * GRAD_CHECK_STEP);
        let denom = analytic[idx].abs().max(numeric.abs()).max(GRAD_CHECK_FLOOR);
        worst = worst.max((analytic[idx] - numeric).abs() / denom);
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use approx::assert_relative_eq;
    use proptest::prelude::*;

    use super::*;

    fn quadratic(target: Vec<f64>) -> impl Fn(&[f64]) -> (f64, Vec<f64>) {
        move |out: &[f64]| {
            let diff: Vec<f64> = out.iter().zip(&target).map(|(o, t)| o - t).collect();
            (0.5 * diff.iter().map(|d| d * d).sum::<f64>(), diff)
        }
    }

    fn param_count_oracle(dims: &[usize]) -> usize {
        let mut count = 0;
        for l in 0..dims.len() - 1 {
            for _out in 0..dims[l + 1] {
                count += dims[l] + 1;
            }
        }
        count
    }

    #[test]
    fn init_is_deterministic_with_zero_biases() {
        let a = Network::new(&[2, 1], 42).unwrap();
        let b = Network::new(&[2, 1], 42).unwrap();
        assert_eq!(a, b);
        let c = Network::new(&[5, 7, 3], 1).unwrap();
        assert!(c.layers().iter().all(|l| l.biases.iter().all(|b| *b == 0.0)));
        for l in c.layers() {
            let bound = (6.0 / (l.inputs + l.outputs) as f64).sqrt();
            assert!(l.weights.iter().all(|w| w.abs() <= bound));
        }
    }

    #[test]
    fn param_count_matches_counting_oracle() {
        let dims = [208, 256, 256, 256];
        let net = Network::new(&dims, 0).unwrap();
        assert_eq!(net.param_count(), param_count_oracle(&dims));
        assert_eq!(net.param_count(), 185_088);
    }

    #[test]
    fn invalid_dims_rejected() {
        assert!(Network::new(&[], 0).is_err());
        assert!(Network::new(&[3], 0).is_err());
        assert!(Network::new(&[3, 0, 2], 0).is_err());
    }

    #[test]
    fn forward_examples() {
        let mut net = Network::new(&[3, 4, 2], 9).unwrap();
        for l in net.layers_mut() {
            l.weights.fill(0.0);
        }
        assert_eq!(net.forward(&[1.0, -2.0, 3.0]).unwrap(), vec![0.0, 0.0]);

        let ident = Network::from_layers(vec![Layer {
            inputs: 1,
            outputs: 1,
            weights: vec![1.0],
            biases: vec![0.0],
        }])
        .unwrap();
        assert_eq!(ident.forward(&[2.0]).unwrap(), vec![2.0]);

        let net = Network::new(&[4, 8, 3], 5).unwrap();
        let x = [0.3, -0.1, 0.9, 0.4];
        assert_eq!(net.forward(&x).unwrap(), net.forward(&x).unwrap());
        assert!(net.forward(&[1.0]).is_err());
    }

    #[test]
    fn backward_examples() {
        let net = Network::new(&[3, 5, 2], 3).unwrap();
        let g = net.backward(&[0.1, 0.2, 0.3], &[0.0, 0.0]).unwrap();
        assert_eq!(g.max_abs(), 0.0);

        let linear = Network::new(&[3, 2], 4).unwrap();
        let x = [0.5, -1.0, 2.0];
        let og = [1.5, -0.5];
        let g = linear.backward(&x, &og).unwrap();
        for o in 0..2 {
            for i in 0..3 {
                assert_eq!(g.layers()[0].weights[o * 3 + i], og[o] * x[i]);
            }
            assert_eq!(g.layers()[0].biases[o], og[o]);
        }
        assert!(net.backward(&x, &[1.0]).is_err());
    }

    #[test]
    fn grad_check_linear_quadratic_is_exact() {
        let net = Network::new(&[4, 3], 8).unwrap();
        let err = grad_check(&net, &[0.2, -0.4, 1.1, 0.7], &quadratic(vec![1.0, 0.0, -1.0])).unwrap();
        assert!(err < 1e-8, "{err}");
    }

    #[test]
    fn grad_check_rectifier_net() {
        let net = Network::new(&[6, 16, 16, 4], 21).unwrap();
        let x = [0.9, -0.3, 0.5, 0.1, -0.8, 0.4];
        let err = grad_check(&net, &x, &quadratic(vec![0.5, -0.2, 0.1, 1.0])).unwrap();
        assert!(err < 1e-4, "{err}");
    }

    #[test]
    fn grad_check_detects_corruption() {
        let net = Network::new(&[4, 6, 2], 2).unwrap();
        let x = [0.3, 0.6, -0.2, 0.8];
        let loss = quadratic(vec![1.0, -1.0]);
        let (_, dl) = loss(&net.forward(&x).unwrap());
        let mut grads = net.backward(&x, &dl).unwrap();
        grads.layers_mut()[1].weights[0] += 0.5;
        assert!(grad_check_against(&net, &x, &loss, &grads).unwrap() > 1e-2);
    }

    #[test]
    fn param_step_examples() {
        let mut net = Network::from_layers(vec![Layer {
            inputs: 1,
            outputs: 1,
            weights: vec![1.0],
            biases: vec![0.0],
        }])
        .unwrap();
        let mut g = GradientSet::zeros_like(&net);
        g.layers_mut()[0].weights[0] = 2.0;
        net.param_step(&g, 0.1, StepDirection::Descend).unwrap();
        assert_relative_eq!(net.layers()[0].weights[0], 0.8);

        let mut net = Network::new(&[3, 4, 2], 6).unwrap();
        let orig = net.clone();
        let g = net.backward(&[0.1, 0.2, 0.3], &[1.0, -1.0]).unwrap();
        net.param_step(&g, 0.0, StepDirection::Descend).unwrap();
        assert_eq!(net, orig);
        net.param_step(&g, 0.25, StepDirection::Ascend).unwrap();
        net.param_step(&g, 0.25, StepDirection::Descend).unwrap();
        for (a, b) in net.layers().iter().zip(orig.layers()) {
            for (x, y) in a.weights.iter().zip(&b.weights) {
                assert_relative_eq!(x, y, epsilon = 1e-15);
            }
        }
        assert_eq!(net.layer_dims(), orig.layer_dims());
    }

    #[test]
    fn param_step_refuses_non_finite() {
        let mut net = Network::new(&[2, 2], 0).unwrap();
        let orig = net.clone();
        let mut g = GradientSet::zeros_like(&net);
        g.layers_mut()[0].biases[1] = f64::NAN;
        assert!(matches!(
            net.param_step(&g, 0.1, StepDirection::Descend),
            Err(Error::Numeric(_))
        ));
        assert_eq!(net, orig);
    }

    #[test]
    fn snapshot_rejects_garbage() {
        let net = Network::new(&[3, 2], 0).unwrap();
        let mut bytes = net.to_bytes();
        assert_eq!(&bytes[..4], b"TWNN");
        bytes.pop();
        assert!(Network::from_bytes(&bytes).is_err());
        assert!(Network::from_bytes(b"XXXX").is_err());
    }

    #[test]
    fn batch_paths_match_single_sample_paths() {
        let net = Network::new(&[5, 9, 7, 3], 17).unwrap();
        let xs = [
            [0.1, -0.5, 0.9, 0.3, 0.2],
            [0.7, 0.4, -0.2, -0.9, 0.5],
            [0.0, 0.3, 0.6, 0.1, -0.4],
        ];
        let og = [[0.5, -1.0, 0.2], [0.0, 0.3, -0.7], [1.1, 0.0, 0.0]];
        let flat: Vec<f64> = xs.iter().flatten().copied().collect();
        let trace = net.forward_batch(&flat, 3).unwrap();
        let mut batch_grads = GradientSet::zeros_like(&net);
        net.accumulate_gradients_batch(&trace, &og.concat(), &mut batch_grads).unwrap();
        let mut single = GradientSet::zeros_like(&net);
        for (b, x) in xs.iter().enumerate() {
            let out = net.forward(x).unwrap();
            for (o, v) in out.iter().enumerate() {
                assert_relative_eq!(trace.output()[b * 3 + o], v, epsilon = 1e-12);
            }
            let t = net.forward_trace(x).unwrap();
            net.accumulate_gradients(&t, &og[b], &mut single).unwrap();
        }
        for (a, b) in batch_grads.flatten().iter().zip(single.flatten()) {
            assert_relative_eq!(*a, b, epsilon = 1e-12);
        }
        assert!(net.forward_batch(&flat, 2).is_err());
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]

        #[test]
        fn backward_matches_finite_differences(
            seed in 0u64..10_000,
            x in prop::collection::vec(-1.0..1.0f64, 5),
            bias in prop::collection::vec(-0.5..0.5f64, 16),
        ) {
            let mut net = Network::new(&[5, 7, 6, 3], seed).unwrap();
            for (b, v) in net.layers_mut().iter_mut().flat_map(|l| l.biases.iter_mut()).zip(&bias) {
                *b = *v;
            }
            // Stay away from rectifier kinks, where the derivative is undefined.
            let trace = net.forward_trace(&x).unwrap();
            for (l, layer) in net.layers().iter().enumerate().take(net.layers().len() - 1) {
                let mut pre = Vec::new();
                layer.affine(&trace.activations[l], &mut pre);
                prop_assume!(pre.iter().all(|p| p.abs() > 1e-3));
            }
            let err = grad_check(&net, &x, &quadratic(vec![0.3, -0.7, 0.2])).unwrap();
            prop_assert!(err < 1e-4, "relative error {}", err);
        }

        #[test]
        fn snapshot_round_trip(seed in 0u64..1_000, hidden in 1usize..9) {
            let net = Network::new(&[3, hidden, 2], seed).unwrap();
            let back = Network::from_bytes(&net.to_bytes()).unwrap();
            prop_assert_eq!(back, net);
        }
    }
}
