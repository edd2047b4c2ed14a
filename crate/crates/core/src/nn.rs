//! Dense feed-forward networks with hand-written backpropagation and Adam.
//!
//! Every learned component in the crate (flow, retrieval, reward, actor and
//! critic networks) is a [`DenseNet`]: ReLU hidden layers followed by an
//! output transform. Inputs are processed in row-major batches, one sample
//! per row, so a forward pass is a chain of matrix products.
//!
//! Backpropagation returns gradients of whatever scalar the caller derived
//! the upstream gradient from. Callers that want minibatch means scale the
//! upstream gradient by `1 / batch`.

use std::fs;
use std::path::Path;

use ndarray::{Array1, Array2, ArrayView2, Axis};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum NnError {
    #[error("invalid network configuration: {0}")]
    InvalidConfig(String),
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("backward pass requires activations cached by a forward pass of this network")]
    MissingActivations,
    #[error("checkpoint parse error: {0}")]
    Parse(String),
    #[error("checkpoint corrupt: {0}")]
    Corrupt(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, NnError>;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OutputTransform {
    Identity,
    Softplus,
    Sigmoid,
}

impl OutputTransform {
    pub fn apply(self, z: f64) -> f64 {
        match self {
            OutputTransform::Identity => z,
            OutputTransform::Softplus => softplus(z),
            OutputTransform::Sigmoid => sigmoid(z),
        }
    }

    /// Derivative with respect to the raw output `z`, given `y = apply(z)`.
    fn derivative(self, z: f64, y: f64) -> f64 {
        match self {
            OutputTransform::Identity => 1.0,
            OutputTransform::Softplus => sigmoid(z),
            OutputTransform::Sigmoid => y * (1.0 - y),
        }
    }
}

pub fn softplus(z: f64) -> f64 {
    if z > 30.0 {
        z + (-z).exp()
    } else {
        z.max(0.0) + (-z.abs()).exp().ln_1p()
    }
}

pub fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DenseNet {
    layer_sizes: Vec<usize>,
    /// Layer `l` maps `layer_sizes[l]` inputs to `layer_sizes[l + 1]` outputs; stored `(in, out)`.
    weights: Vec<Array2<f64>>,
    biases: Vec<Array1<f64>>,
    output_transform: OutputTransform,
}

/// Intermediate values of one batched forward pass, consumed by [`DenseNet::backward`].
#[derive(Clone, Debug)]
pub struct Activations {
    /// Input to each layer; entry 0 is the network input, later entries are post-ReLU.
    layer_inputs: Vec<Array2<f64>>,
    raw_output: Array2<f64>,
    output: Array2<f64>,
}

impl Activations {
    pub fn output(&self) -> &Array2<f64> {
        &self.output
    }

    pub fn batch_size(&self) -> usize {
        self.output.nrows()
    }
}

/// Parameter-shaped container used for gradients and optimizer moments.
#[derive(Clone, Debug, PartialEq)]
pub struct Gradients {
    pub weights: Vec<Array2<f64>>,
    pub biases: Vec<Array1<f64>>,
}

impl Gradients {
    pub fn zeros_like(net: &DenseNet) -> Self {
        Gradients {
            weights: net.weights.iter().map(|w| Array2::zeros(w.raw_dim())).collect(),
            biases: net.biases.iter().map(|b| Array1::zeros(b.raw_dim())).collect(),
        }
    }

    pub fn add_assign(&mut self, other: &Gradients) {
        for (a, b) in self.weights.iter_mut().zip(&other.weights) {
            *a += b;
        }
        for (a, b) in self.biases.iter_mut().zip(&other.biases) {
            *a += b;
        }
    }

    pub fn scale(&mut self, factor: f64) {
        for w in &mut self.weights {
            w.mapv_inplace(|v| v * factor);
        }
        for b in &mut self.biases {
            b.mapv_inplace(|v| v * factor);
        }
    }

    pub fn max_abs(&self) -> f64 {
        self.weights
            .iter()
            .flat_map(|w| w.iter())
            .chain(self.biases.iter().flat_map(|b| b.iter()))
            .fold(0.0_f64, |m, v| m.max(v.abs()))
    }

    fn shapes_match(&self, net: &DenseNet) -> bool {
        self.weights.len() == net.weights.len()
            && self.biases.len() == net.biases.len()
            && self.weights.iter().zip(&net.weights).all(|(g, w)| g.dim() == w.dim())
            && self.biases.iter().zip(&net.biases).all(|(g, b)| g.len() == b.len())
    }
}

fn validate_sizes(layer_sizes: &[usize]) -> Result<()> {
    if layer_sizes.len() < 2 {
        return Err(NnError::InvalidConfig(format!(
            "need at least an input and an output layer, got {layer_sizes:?}"
        )));
    }
    if layer_sizes.contains(&0) {
        return Err(NnError::InvalidConfig(format!(
            "layer sizes must be positive, got {layer_sizes:?}"
        )));
    }
    Ok(())
}

impl DenseNet {
    /// Random initialization: He-scaled normal weights for layers feeding a ReLU,
    /// fan-in scaled (variance `1 / fan_in`) for the output layer, zero biases.
    pub fn new(layer_sizes: &[usize], output_transform: OutputTransform, seed: u64) -> Result<Self> {
        validate_sizes(layer_sizes)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n_layers = layer_sizes.len() - 1;
        let mut weights = Vec::with_capacity(n_layers);
        for l in 0..n_layers {
            let (fan_in, fan_out) = (layer_sizes[l], layer_sizes[l + 1]);
            let gain = if l + 1 < n_layers { 2.0 } else { 1.0 };
            let std = (gain / fan_in as f64).sqrt();
            let w = Array2::from_shape_fn((fan_in, fan_out), |_| {
                let z: f64 = StandardNormal.sample(&mut rng);
                z * std
            });
            weights.push(w);
        }
        let biases = layer_sizes[1..].iter().map(|&n| Array1::zeros(n)).collect();
        Ok(DenseNet {
            layer_sizes: layer_sizes.to_vec(),
            weights,
            biases,
            output_transform,
        })
    }

    /// All-zero parameters; mostly useful in tests.
    pub fn zeros(layer_sizes: &[usize], output_transform: OutputTransform) -> Result<Self> {
        validate_sizes(layer_sizes)?;
        Ok(DenseNet {
            layer_sizes: layer_sizes.to_vec(),
            weights: layer_sizes
                .windows(2)
                .map(|w| Array2::zeros((w[0], w[1])))
                .collect(),
            biases: layer_sizes[1..].iter().map(|&n| Array1::zeros(n)).collect(),
            output_transform,
        })
    }

    /// Builds a net from explicit `(in, out)` weight matrices and bias vectors.
    pub fn from_parts(
        weights: Vec<Array2<f64>>,
        biases: Vec<Array1<f64>>,
        output_transform: OutputTransform,
    ) -> Result<Self> {
        if weights.is_empty() || weights.len() != biases.len() {
            return Err(NnError::InvalidConfig(
                "need one bias vector per weight matrix".into(),
            ));
        }
        let mut layer_sizes = vec![weights[0].nrows()];
        for (l, (w, b)) in weights.iter().zip(&biases).enumerate() {
            if w.nrows() != *layer_sizes.last().unwrap() || w.ncols() != b.len() {
                return Err(NnError::InvalidConfig(format!("layer {l} does not chain")));
            }
            layer_sizes.push(w.ncols());
        }
        validate_sizes(&layer_sizes)?;
        Ok(DenseNet {
            layer_sizes,
            weights,
            biases,
            output_transform,
        })
    }

    pub fn layer_sizes(&self) -> &[usize] {
        &self.layer_sizes
    }

    pub fn input_dim(&self) -> usize {
        self.layer_sizes[0]
    }

    pub fn output_dim(&self) -> usize {
        *self.layer_sizes.last().unwrap()
    }

    pub fn output_transform(&self) -> OutputTransform {
        self.output_transform
    }

    pub fn weights(&self) -> &[Array2<f64>] {
        &self.weights
    }

    pub fn biases(&self) -> &[Array1<f64>] {
        &self.biases
    }

    pub fn weights_mut(&mut self) -> &mut [Array2<f64>] {
        &mut self.weights
    }

    pub fn biases_mut(&mut self) -> &mut [Array1<f64>] {
        &mut self.biases
    }

    pub fn num_params(&self) -> usize {
        self.weights.iter().map(|w| w.len()).sum::<usize>()
            + self.biases.iter().map(|b| b.len()).sum::<usize>()
    }

    fn check_input(&self, cols: usize) -> Result<()> {
        if cols != self.input_dim() {
            return Err(NnError::Shape(format!(
                "input has {cols} features, network expects {}",
                self.input_dim()
            )));
        }
        Ok(())
    }

    pub fn forward(&self, input: &[f64]) -> Result<Vec<f64>> {
        self.check_input(input.len())?;
        let x = ArrayView2::from_shape((1, input.len()), input)
            .map_err(|e| NnError::Shape(e.to_string()))?;
        Ok(self.forward_batch_view(x)?.into_raw_vec_and_offset().0)
    }

    pub fn forward_batch(&self, input: &Array2<f64>) -> Result<Array2<f64>> {
        self.forward_batch_view(input.view())
    }

    pub fn forward_batch_view(&self, input: ArrayView2<f64>) -> Result<Array2<f64>> {
        self.check_input(input.ncols())?;
        let last = self.weights.len() - 1;
        let mut h = input.dot(&self.weights[0]) + &self.biases[0];
        for l in 1..=last {
            h.mapv_inplace(|v| v.max(0.0));
            h = h.dot(&self.weights[l]) + &self.biases[l];
        }
        let t = self.output_transform;
        if t != OutputTransform::Identity {
            h.mapv_inplace(|z| t.apply(z));
        }
        Ok(h)
    }

    /// Forward pass that keeps what [`DenseNet::backward`] needs.
    pub fn forward_cached(&self, input: Array2<f64>) -> Result<Activations> {
        self.check_input(input.ncols())?;
        let n_layers = self.weights.len();
        let mut layer_inputs = Vec::with_capacity(n_layers);
        let mut h = input;
        for l in 0..n_layers - 1 {
            let mut z = h.dot(&self.weights[l]) + &self.biases[l];
            z.mapv_inplace(|v| v.max(0.0));
            layer_inputs.push(h);
            h = z;
        }
        let raw_output = h.dot(&self.weights[n_layers - 1]) + &self.biases[n_layers - 1];
        layer_inputs.push(h);
        let t = self.output_transform;
        let output = raw_output.mapv(|z| t.apply(z));
        Ok(Activations {
            layer_inputs,
            raw_output,
            output,
        })
    }

    /// Gradients of the scalar loss whose derivative with respect to the
    /// network output is `upstream`. Also returns the gradient with respect
    /// to the network input.
    pub fn backward(
        &self,
        acts: &Activations,
        upstream: &Array2<f64>,
    ) -> Result<(Gradients, Array2<f64>)> {
        let n_layers = self.weights.len();
        if acts.layer_inputs.len() != n_layers
            || acts
                .layer_inputs
                .iter()
                .zip(&self.layer_sizes)
                .any(|(a, &n)| a.ncols() != n)
        {
            return Err(NnError::MissingActivations);
        }
        if upstream.dim() != acts.output.dim() {
            return Err(NnError::Shape(format!(
                "upstream gradient {:?} does not match output {:?}",
                upstream.dim(),
                acts.output.dim()
            )));
        }
        let t = self.output_transform;
        let mut delta = upstream.clone();
        if t != OutputTransform::Identity {
            ndarray::Zip::from(&mut delta)
                .and(&acts.raw_output)
                .and(&acts.output)
                .for_each(|d, &z, &y| *d *= t.derivative(z, y));
        }
        let mut gw = Vec::with_capacity(n_layers);
        let mut gb = Vec::with_capacity(n_layers);
        for l in (0..n_layers).rev() {
            let x = &acts.layer_inputs[l];
            gw.push(x.t().dot(&delta));
            gb.push(delta.sum_axis(Axis(0)));
            let mut prev = delta.dot(&self.weights[l].t());
            if l > 0 {
                // layer_inputs[l] is the ReLU output of layer l - 1
                prev.zip_mut_with(x, |d, &a| {
                    if a <= 0.0 {
                        *d = 0.0;
                    }
                });
            }
            delta = prev;
        }
        gw.reverse();
        gb.reverse();
        Ok((
            Gradients {
                weights: gw,
                biases: gb,
            },
            delta,
        ))
    }

    /// `self <- (1 - tau) * self + tau * online`.
    pub fn polyak_update(&mut self, online: &DenseNet, tau: f64) -> Result<()> {
        if online.layer_sizes != self.layer_sizes {
            return Err(NnError::Shape("polyak update between different architectures".into()));
        }
        for (t, o) in self.weights.iter_mut().zip(&online.weights) {
            t.zip_mut_with(o, |t, &o| *t = (1.0 - tau) * *t + tau * o);
        }
        for (t, o) in self.biases.iter_mut().zip(&online.biases) {
            t.zip_mut_with(o, |t, &o| *t = (1.0 - tau) * *t + tau * o);
        }
        Ok(())
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        Checkpoint {
            version: CHECKPOINT_VERSION,
            layer_sizes: self.layer_sizes.clone(),
            output_transform: self.output_transform,
            weights: self
                .weights
                .iter()
                .map(|w| w.iter().copied().collect())
                .collect(),
            biases: self.biases.iter().map(|b| b.to_vec()).collect(),
        }
    }

    pub fn from_checkpoint(ckpt: Checkpoint) -> Result<Self> {
        if ckpt.version != CHECKPOINT_VERSION {
            return Err(NnError::Corrupt(format!(
                "unsupported checkpoint version {}",
                ckpt.version
            )));
        }
        validate_sizes(&ckpt.layer_sizes).map_err(|e| NnError::Corrupt(e.to_string()))?;
        let n_layers = ckpt.layer_sizes.len() - 1;
        if ckpt.weights.len() != n_layers || ckpt.biases.len() != n_layers {
            return Err(NnError::Corrupt(format!(
                "header declares {n_layers} layers, found {} weight and {} bias arrays",
                ckpt.weights.len(),
                ckpt.biases.len()
            )));
        }
        let mut weights = Vec::with_capacity(n_layers);
        let mut biases = Vec::with_capacity(n_layers);
        for (l, (w, b)) in ckpt.weights.into_iter().zip(ckpt.biases).enumerate() {
            let (fan_in, fan_out) = (ckpt.layer_sizes[l], ckpt.layer_sizes[l + 1]);
            if w.len() != fan_in * fan_out || b.len() != fan_out {
                return Err(NnError::Corrupt(format!(
                    "layer {l}: expected {}x{} weights and {fan_out} biases, found {} and {}",
                    fan_in,
                    fan_out,
                    w.len(),
                    b.len()
                )));
            }
            weights.push(
                Array2::from_shape_vec((fan_in, fan_out), w)
                    .map_err(|e| NnError::Corrupt(e.to_string()))?,
            );
            biases.push(Array1::from_vec(b));
        }
        Ok(DenseNet {
            layer_sizes: ckpt.layer_sizes,
            weights,
            biases,
            output_transform: ckpt.output_transform,
        })
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(&self.to_checkpoint()).expect("checkpoint serializes")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let ckpt: Checkpoint = serde_json::from_str(text).map_err(|e| {
            if e.is_eof() {
                NnError::Corrupt(format!("truncated checkpoint: {e}"))
            } else {
                NnError::Parse(e.to_string())
            }
        })?;
        Self::from_checkpoint(ckpt)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        fs::write(path, self.to_json())?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_json(&fs::read_to_string(path)?)
    }
}

/// On-disk form of a [`DenseNet`]; weights are flattened row-major `(in, out)`.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Checkpoint {
    pub version: u32,
    pub layer_sizes: Vec<usize>,
    pub output_transform: OutputTransform,
    pub weights: Vec<Vec<f64>>,
    pub biases: Vec<Vec<f64>>,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            learning_rate: 3e-4,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

impl AdamConfig {
    pub fn with_learning_rate(learning_rate: f64) -> Self {
        AdamConfig {
            learning_rate,
            ..Default::default()
        }
    }
}

/// Adam moments over a flat parameter vector.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub config: AdamConfig,
    first_moment: Vec<f64>,
    second_moment: Vec<f64>,
    step_count: u64,
}

impl AdamState {
    pub fn new(num_params: usize, config: AdamConfig) -> Self {
        AdamState {
            config,
            first_moment: vec![0.0; num_params],
            second_moment: vec![0.0; num_params],
            step_count: 0,
        }
    }

    pub fn for_net(net: &DenseNet, config: AdamConfig) -> Self {
        Self::new(net.num_params(), config)
    }

    pub fn step_count(&self) -> u64 {
        self.step_count
    }

    /// Bias-corrected Adam update on a flat slice of parameters.
    pub fn update(&mut self, params: &mut [f64], grads: &[f64]) -> Result<()> {
        if params.len() != self.first_moment.len() || grads.len() != params.len() {
            return Err(NnError::Shape(format!(
                "optimizer holds {} moments, got {} parameters and {} gradients",
                self.first_moment.len(),
                params.len(),
                grads.len()
            )));
        }
        self.step_count += 1;
        let (lr_t, eps) = self.corrected_rate();
        for (i, (p, &g)) in params.iter_mut().zip(grads).enumerate() {
            self.apply_one(i, p, g, lr_t, eps);
        }
        Ok(())
    }

    fn corrected_rate(&self) -> (f64, f64) {
        let c = &self.config;
        let n = self.step_count as i32;
        let bc1 = 1.0 - c.beta1.powi(n);
        let bc2 = 1.0 - c.beta2.powi(n);
        (c.learning_rate * bc2.sqrt() / bc1, c.epsilon * bc2.sqrt())
    }

    // Equivalent to p -= lr * m_hat / (sqrt(v_hat) + eps) with the bias
    // corrections folded into the step size.
    #[inline]
    fn apply_one(&mut self, i: usize, p: &mut f64, g: f64, lr_t: f64, eps: f64) {
        let c = &self.config;
        let m = &mut self.first_moment[i];
        let v = &mut self.second_moment[i];
        *m = c.beta1 * *m + (1.0 - c.beta1) * g;
        *v = c.beta2 * *v + (1.0 - c.beta2) * g * g;
        *p -= lr_t * *m / (v.sqrt() + eps);
    }

    /// One Adam step applied to every weight and bias of `net`.
    pub fn step(&mut self, net: &mut DenseNet, grads: &Gradients) -> Result<()> {
        if !grads.shapes_match(net) {
            return Err(NnError::Shape("gradients do not match network parameters".into()));
        }
        if net.num_params() != self.first_moment.len() {
            return Err(NnError::Shape(format!(
                "optimizer holds {} moments, network has {} parameters",
                self.first_moment.len(),
                net.num_params()
            )));
        }
        self.step_count += 1;
        let (lr_t, eps) = self.corrected_rate();
        let mut offset = 0;
        for (w, g) in net.weights.iter_mut().zip(&grads.weights) {
            for (p, &gv) in w.iter_mut().zip(g.iter()) {
                self.apply_one(offset, p, gv, lr_t, eps);
                offset += 1;
            }
        }
        for (b, g) in net.biases.iter_mut().zip(&grads.biases) {
            for (p, &gv) in b.iter_mut().zip(g.iter()) {
                self.apply_one(offset, p, gv, lr_t, eps);
                offset += 1;
            }
        }
        Ok(())
    }
}
