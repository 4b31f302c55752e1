//! Stacked LSTM classifier with hand-derived backpropagation through time.
//!
//! Each LSTM layer acts on the concatenation `z_t = [h_{t-1}, x_t]`:
//!
//! ```text
//! f_t  = σ(W_f·z_t + b_f)        forget gate
//! i_t  = σ(W_i·z_t + b_i)        input gate
//! C̃_t  = tanh(W_c·z_t + b_c)     candidate state
//! C_t  = f_t ∘ C_{t-1} + i_t ∘ C̃_t
//! o_t  = σ(W_o·z_t + b_o)        output gate
//! h_t  = o_t ∘ tanh(C_t)
//! ```
//!
//! Layer 1 reads the MFCC frames; every further layer reads the hidden
//! sequence of the layer below, passed through inverted dropout while
//! training. The top layer's hidden states are flattened (or, optionally, only
//! the last one is kept) and fed to a dense layer and softmax.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::numeric::{
    gemv_acc, gemv_t_acc, outer_acc, sigmoid_grad_from_output, sigmoid_scalar, softmax_in_place,
    tanh_grad_from_output, Matrix, NumericError,
};
use crate::rng::{derive_seed, XorShift64Star};

/// Lower clamp applied to the true-class probability inside the log.
pub const PROB_FLOOR: f64 = 1e-12;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum NnError {
    #[error(transparent)]
    Numeric(#[from] NumericError),
    #[error("shape mismatch for {what}: expected {expected:?}, got {got:?}")]
    Shape {
        what: String,
        expected: (usize, usize),
        got: (usize, usize),
    },
    #[error("invalid model configuration: {0}")]
    Config(String),
    #[error("class index {class} out of range for {num_classes} classes")]
    Class { class: usize, num_classes: usize },
    #[error("gradient requested from an inference-mode cache")]
    InferenceCache,
}

/// What the dense head sees of the top layer's hidden sequence.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HeadInput {
    /// Concatenation of all `seq_len` hidden vectors.
    Flatten,
    /// Only the final hidden vector.
    LastHidden,
}

impl HeadInput {
    pub fn as_str(&self) -> &'static str {
        match self {
            HeadInput::Flatten => "flatten",
            HeadInput::LastHidden => "last_hidden",
        }
    }
}

impl std::str::FromStr for HeadInput {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "flatten" => Ok(HeadInput::Flatten),
            "last_hidden" => Ok(HeadInput::LastHidden),
            other => Err(format!("unknown head input {other:?} (flatten | last_hidden)")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub num_lstm_layers: usize,
    pub hidden_dim: usize,
    pub input_dim: usize,
    pub seq_len: usize,
    pub num_classes: usize,
    pub dropout_rate: f64,
    pub head: HeadInput,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            num_lstm_layers: 2,
            hidden_dim: 128,
            input_dim: 40,
            seq_len: 20,
            num_classes: 8,
            dropout_rate: 0.001,
            head: HeadInput::Flatten,
        }
    }
}

impl ModelConfig {
    pub fn with_layers(layers: usize) -> Self {
        Self {
            num_lstm_layers: layers,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<(), NnError> {
        let bad = |m: String| Err(NnError::Config(m));
        if !(1..=2).contains(&self.num_lstm_layers) {
            return bad(format!(
                "num_lstm_layers must be 1 or 2, got {}",
                self.num_lstm_layers
            ));
        }
        if self.hidden_dim == 0 || self.input_dim == 0 || self.seq_len == 0 {
            return bad("hidden_dim, input_dim and seq_len must be positive".into());
        }
        if self.num_classes < 2 {
            return bad(format!("need at least 2 classes, got {}", self.num_classes));
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return bad(format!(
                "dropout_rate must be in [0, 1), got {}",
                self.dropout_rate
            ));
        }
        Ok(())
    }

    pub fn dense_input_dim(&self) -> usize {
        match self.head {
            HeadInput::Flatten => self.seq_len * self.hidden_dim,
            HeadInput::LastHidden => self.hidden_dim,
        }
    }

    pub fn layer_input_dim(&self, layer: usize) -> usize {
        if layer == 0 {
            self.input_dim
        } else {
            self.hidden_dim
        }
    }

    /// Total scalar parameter count.
    pub fn num_params(&self) -> usize {
        let h = self.hidden_dim;
        let lstm: usize = (0..self.num_lstm_layers)
            .map(|l| 4 * h * (h + self.layer_input_dim(l)) + 4 * h)
            .sum();
        lstm + self.num_classes * self.dense_input_dim() + self.num_classes
    }
}

/// Weights and biases of one LSTM layer. Every `w_*` is `(H, H + D)` acting on
/// `[h_{t-1}, x_t]`; every `b_*` is `1 × H`.
#[derive(Debug, Clone, PartialEq)]
pub struct LstmLayerParams {
    pub w_f: Matrix,
    pub w_i: Matrix,
    pub w_c: Matrix,
    pub w_o: Matrix,
    pub b_f: Matrix,
    pub b_i: Matrix,
    pub b_c: Matrix,
    pub b_o: Matrix,
}

impl LstmLayerParams {
    pub fn zeros(input_dim: usize, hidden_dim: usize) -> Self {
        let w = || Matrix::zeros(hidden_dim, hidden_dim + input_dim);
        let b = || Matrix::zeros(1, hidden_dim);
        Self {
            w_f: w(),
            w_i: w(),
            w_c: w(),
            w_o: w(),
            b_f: b(),
            b_i: b(),
            b_c: b(),
            b_o: b(),
        }
    }

    pub fn hidden_dim(&self) -> usize {
        self.w_f.rows()
    }

    pub fn input_dim(&self) -> usize {
        self.w_f.cols() - self.w_f.rows()
    }

    fn blocks(&self) -> [(&'static str, &Matrix); 8] {
        [
            ("w_f", &self.w_f),
            ("w_i", &self.w_i),
            ("w_c", &self.w_c),
            ("w_o", &self.w_o),
            ("b_f", &self.b_f),
            ("b_i", &self.b_i),
            ("b_c", &self.b_c),
            ("b_o", &self.b_o),
        ]
    }

    fn blocks_mut(&mut self) -> [(&'static str, &mut Matrix); 8] {
        [
            ("w_f", &mut self.w_f),
            ("w_i", &mut self.w_i),
            ("w_c", &mut self.w_c),
            ("w_o", &mut self.w_o),
            ("b_f", &mut self.b_f),
            ("b_i", &mut self.b_i),
            ("b_c", &mut self.b_c),
            ("b_o", &mut self.b_o),
        ]
    }

    fn check_shapes(&self, input_dim: usize, hidden_dim: usize, layer: usize) -> Result<(), NnError> {
        let w_shape = (hidden_dim, hidden_dim + input_dim);
        for (name, m) in self.blocks() {
            let expected = if name.starts_with('w') { w_shape } else { (1, hidden_dim) };
            if m.shape() != expected {
                return Err(NnError::Shape {
                    what: format!("lstm{layer}.{name}"),
                    expected,
                    got: m.shape(),
                });
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DenseParams {
    /// `(num_classes, dense_input_dim)`
    pub w: Matrix,
    /// `1 × num_classes`
    pub b: Matrix,
}

/// Every trainable tensor of the classifier. Also used to carry gradients
/// and optimizer moments, which share the same shapes.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    pub layers: Vec<LstmLayerParams>,
    pub dense: DenseParams,
}

impl ModelParams {
    pub fn zeros(cfg: &ModelConfig) -> Self {
        Self {
            layers: (0..cfg.num_lstm_layers)
                .map(|l| LstmLayerParams::zeros(cfg.layer_input_dim(l), cfg.hidden_dim))
                .collect(),
            dense: DenseParams {
                w: Matrix::zeros(cfg.num_classes, cfg.dense_input_dim()),
                b: Matrix::zeros(1, cfg.num_classes),
            },
        }
    }

    /// Uniform `±1/√fan_in` weights (fan-in `H + D` for LSTM gates), zero
    /// biases except the forget gate bias, which starts at 1.
    pub fn init(cfg: &ModelConfig, seed: u64) -> Self {
        let mut p = Self::zeros(cfg);
        let mut rng = XorShift64Star::new(seed);
        for layer in &mut p.layers {
            let bound = 1.0 / (layer.w_f.cols() as f64).sqrt();
            for w in [&mut layer.w_f, &mut layer.w_i, &mut layer.w_c, &mut layer.w_o] {
                w.data_mut()
                    .iter_mut()
                    .for_each(|v| *v = rng.uniform(-bound, bound));
            }
            layer.b_f.fill(1.0);
        }
        let bound = 1.0 / (cfg.dense_input_dim() as f64).sqrt();
        p.dense
            .w
            .data_mut()
            .iter_mut()
            .for_each(|v| *v = rng.uniform(-bound, bound));
        p
    }

    pub fn zeros_like(&self) -> Self {
        let mut z = self.clone();
        z.for_each_block_mut(|_, m| m.fill(0.0));
        z
    }

    /// Blocks in canonical order: `lstm{l}.{w_f,w_i,w_c,w_o,b_f,b_i,b_c,b_o}`, then `dense.w`, `dense.b`.
    pub fn blocks(&self) -> Vec<(String, &Matrix)> {
        let mut out = Vec::with_capacity(self.layers.len() * 8 + 2);
        for (l, layer) in self.layers.iter().enumerate() {
            for (name, m) in layer.blocks() {
                out.push((format!("lstm{l}.{name}"), m));
            }
        }
        out.push(("dense.w".to_string(), &self.dense.w));
        out.push(("dense.b".to_string(), &self.dense.b));
        out
    }

    pub fn blocks_mut(&mut self) -> Vec<(String, &mut Matrix)> {
        let mut out = Vec::with_capacity(self.layers.len() * 8 + 2);
        for (l, layer) in self.layers.iter_mut().enumerate() {
            for (name, m) in layer.blocks_mut() {
                out.push((format!("lstm{l}.{name}"), m));
            }
        }
        out.push(("dense.w".to_string(), &mut self.dense.w));
        out.push(("dense.b".to_string(), &mut self.dense.b));
        out
    }

    pub fn for_each_block_mut(&mut self, mut f: impl FnMut(&str, &mut Matrix)) {
        for (name, m) in self.blocks_mut() {
            f(&name, m);
        }
    }

    pub fn num_params(&self) -> usize {
        self.blocks().iter().map(|(_, m)| m.len()).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.blocks().iter().all(|(_, m)| m.is_finite())
    }

    /// `self += other`, block by block.
    pub fn add_assign(&mut self, other: &Self) {
        for ((_, a), (_, b)) in self.blocks_mut().into_iter().zip(other.blocks()) {
            a.add_assign(b).expect("matching parameter shapes");
        }
    }

    pub fn scale_in_place(&mut self, k: f64) {
        self.for_each_block_mut(|_, m| m.data_mut().iter_mut().for_each(|v| *v *= k));
    }

    pub fn l2_norm(&self) -> f64 {
        self.blocks()
            .iter()
            .flat_map(|(_, m)| m.data().iter())
            .map(|v| v * v)
            .sum::<f64>()
            .sqrt()
    }

    pub fn check_shapes(&self, cfg: &ModelConfig) -> Result<(), NnError> {
        if self.layers.len() != cfg.num_lstm_layers {
            return Err(NnError::Config(format!(
                "{} LSTM layers present, configuration expects {}",
                self.layers.len(),
                cfg.num_lstm_layers
            )));
        }
        for (l, layer) in self.layers.iter().enumerate() {
            layer.check_shapes(cfg.layer_input_dim(l), cfg.hidden_dim, l)?;
        }
        for (what, m, expected) in [
            ("dense.w", &self.dense.w, (cfg.num_classes, cfg.dense_input_dim())),
            ("dense.b", &self.dense.b, (1, cfg.num_classes)),
        ] {
            if m.shape() != expected {
                return Err(NnError::Shape {
                    what: what.into(),
                    expected,
                    got: m.shape(),
                });
            }
        }
        Ok(())
    }
}

/// Gate activations and states of one timestep.
#[derive(Debug, Clone, PartialEq)]
pub struct LstmStepState {
    pub f: Vec<f64>,
    pub i: Vec<f64>,
    pub c_tilde: Vec<f64>,
    pub o: Vec<f64>,
    pub c: Vec<f64>,
    pub h: Vec<f64>,
}

/// One timestep of an LSTM layer.
pub fn lstm_cell_forward(
    params: &LstmLayerParams,
    x: &[f64],
    h_prev: &[f64],
    c_prev: &[f64],
) -> Result<LstmStepState, NnError> {
    let hd = params.hidden_dim();
    let d = params.input_dim();
    for (what, got, expected) in [("x_t", x.len(), d), ("h_prev", h_prev.len(), hd), ("c_prev", c_prev.len(), hd)] {
        if got != expected {
            return Err(NnError::Shape {
                what: what.into(),
                expected: (1, expected),
                got: (1, got),
            });
        }
    }
    let mut z = Vec::with_capacity(hd + d);
    z.extend_from_slice(h_prev);
    z.extend_from_slice(x);
    Ok(cell_step(params, &z, c_prev))
}

fn cell_step(p: &LstmLayerParams, z: &[f64], c_prev: &[f64]) -> LstmStepState {
    let gate = |w: &Matrix, b: &Matrix| {
        let mut a = b.data().to_vec();
        gemv_acc(w, z, &mut a);
        a
    };
    let mut f = gate(&p.w_f, &p.b_f);
    let mut i = gate(&p.w_i, &p.b_i);
    let mut c_tilde = gate(&p.w_c, &p.b_c);
    let mut o = gate(&p.w_o, &p.b_o);
    f.iter_mut().for_each(|v| *v = sigmoid_scalar(*v));
    i.iter_mut().for_each(|v| *v = sigmoid_scalar(*v));
    c_tilde.iter_mut().for_each(|v| *v = v.tanh());
    o.iter_mut().for_each(|v| *v = sigmoid_scalar(*v));
    let c: Vec<f64> = (0..f.len())
        .map(|k| f[k] * c_prev[k] + i[k] * c_tilde[k])
        .collect();
    let h = c.iter().zip(&o).map(|(c, o)| o * c.tanh()).collect();
    LstmStepState {
        f,
        i,
        c_tilde,
        o,
        c,
        h,
    }
}

/// Runs a layer over `inputs` (one row per timestep) from state `(h0, c0)`.
pub fn lstm_sequence_forward(
    params: &LstmLayerParams,
    inputs: &Matrix,
    h0: &[f64],
    c0: &[f64],
) -> Result<Vec<LstmStepState>, NnError> {
    let mut states: Vec<LstmStepState> = Vec::with_capacity(inputs.rows());
    for t in 0..inputs.rows() {
        let (h_prev, c_prev) = match states.last() {
            Some(s) => (s.h.as_slice(), s.c.as_slice()),
            None => (h0, c0),
        };
        let s = lstm_cell_forward(params, inputs.row(t), h_prev, c_prev)?;
        states.push(s);
    }
    Ok(states)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ForwardMode {
    Inference,
    /// Dropout active; the mask is a pure function of the seed.
    Train { dropout_seed: u64 },
}

#[derive(Debug, Clone)]
struct LayerCache {
    inputs: Matrix,
    states: Vec<LstmStepState>,
}

/// Everything the backward pass needs from a forward pass.
#[derive(Debug, Clone)]
pub struct ForwardCache {
    layers: Vec<LayerCache>,
    /// `masks[l]` scales the output of layer `l` before layer `l + 1` (`T × H`, already divided by `1 - p`).
    masks: Vec<Option<Matrix>>,
    dense_input: Vec<f64>,
    probs: Vec<f64>,
    training: bool,
}

impl ForwardCache {
    pub fn layer_states(&self, layer: usize) -> &[LstmStepState] {
        &self.layers[layer].states
    }

    pub fn dropout_mask(&self, layer: usize) -> Option<&Matrix> {
        self.masks.get(layer).and_then(Option::as_ref)
    }
}

#[derive(Debug, Clone)]
pub struct ForwardOutput {
    pub logits: Matrix,
    pub probs: Matrix,
    pub cache: ForwardCache,
}

/// Inverted-dropout scale factors for a `T × H` activation map.
pub fn dropout_mask(rows: usize, cols: usize, rate: f64, seed: u64) -> Matrix {
    let mut rng = XorShift64Star::new(seed);
    let keep_scale = 1.0 / (1.0 - rate);
    Matrix::from_fn(rows, cols, |_, _| {
        if rng.next_f64() < rate {
            0.0
        } else {
            keep_scale
        }
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    pub config: ModelConfig,
    pub params: ModelParams,
}

impl Model {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self, NnError> {
        config.validate()?;
        let params = ModelParams::init(&config, seed);
        Ok(Self { config, params })
    }

    pub fn from_params(config: ModelConfig, params: ModelParams) -> Result<Self, NnError> {
        config.validate()?;
        params.check_shapes(&config)?;
        Ok(Self { config, params })
    }

    pub fn num_params(&self) -> usize {
        self.params.num_params()
    }

    pub fn forward(&self, features: &Matrix, mode: ForwardMode) -> Result<ForwardOutput, NnError> {
        model_forward(self, features, mode)
    }

    /// Class probabilities in inference mode.
    pub fn predict(&self, features: &Matrix) -> Result<Vec<f64>, NnError> {
        Ok(self.forward(features, ForwardMode::Inference)?.probs.into_data())
    }
}

/// Full forward pass: LSTM stack, flatten, dense, softmax.
pub fn model_forward(model: &Model, features: &Matrix, mode: ForwardMode) -> Result<ForwardOutput, NnError> {
    let cfg = &model.config;
    let expected = (cfg.seq_len, cfg.input_dim);
    if features.shape() != expected {
        return Err(NnError::Shape {
            what: "features".into(),
            expected,
            got: features.shape(),
        });
    }
    let hd = cfg.hidden_dim;
    let zeros = vec![0.0; hd];
    let mut layers = Vec::with_capacity(cfg.num_lstm_layers);
    let mut masks = Vec::with_capacity(cfg.num_lstm_layers);
    let mut input = features.clone();
    for (l, params) in model.params.layers.iter().enumerate() {
        let states = lstm_sequence_forward(params, &input, &zeros, &zeros)?;
        let is_top = l + 1 == cfg.num_lstm_layers;
        let mut out = Matrix::from_fn(cfg.seq_len, hd, |t, k| states[t].h[k]);
        let mask = match mode {
            ForwardMode::Train { dropout_seed } if !is_top && cfg.dropout_rate > 0.0 => {
                let m = dropout_mask(cfg.seq_len, hd, cfg.dropout_rate, derive_seed(&[dropout_seed, l as u64]));
                out = out.hadamard(&m)?;
                Some(m)
            }
            _ => None,
        };
        masks.push(mask);
        layers.push(LayerCache {
            inputs: input,
            states,
        });
        input = out;
    }

    let top = &layers.last().expect("at least one layer").states;
    let dense_input: Vec<f64> = match cfg.head {
        HeadInput::Flatten => top.iter().flat_map(|s| s.h.iter().copied()).collect(),
        HeadInput::LastHidden => top.last().expect("seq_len >= 1").h.clone(),
    };
    let mut logits = model.params.dense.b.data().to_vec();
    gemv_acc(&model.params.dense.w, &dense_input, &mut logits);
    let mut probs = logits.clone();
    softmax_in_place(&mut probs);
    let c = cfg.num_classes;
    Ok(ForwardOutput {
        logits: Matrix::new(1, c, logits)?,
        probs: Matrix::new(1, c, probs.clone())?,
        cache: ForwardCache {
            layers,
            masks,
            dense_input,
            probs,
            training: matches!(mode, ForwardMode::Train { .. }),
        },
    })
}

/// `−ln p[true]` with the probability clamped below at [`PROB_FLOOR`].
pub fn cross_entropy(probs: &Matrix, onehot: &Matrix) -> f64 {
    let k = onehot.argmax_row(0);
    -probs.get(0, k).max(PROB_FLOOR).ln()
}

pub fn cross_entropy_class(probs: &[f64], class: usize) -> f64 {
    -probs[class].max(PROB_FLOOR).ln()
}

/// Gradient of the loss with respect to every parameter, for a cache from a
/// training-mode forward pass.
pub fn model_backward(model: &Model, cache: &ForwardCache, onehot: &Matrix) -> Result<ModelParams, NnError> {
    let c = model.config.num_classes;
    if onehot.shape() != (1, c) {
        return Err(NnError::Shape {
            what: "onehot".into(),
            expected: (1, c),
            got: onehot.shape(),
        });
    }
    if !cache.training {
        return Err(NnError::InferenceCache);
    }
    let mut grads = model.params.zeros_like();
    accumulate_gradients(model, cache, onehot.argmax_row(0), 1.0, &mut grads)?;
    Ok(grads)
}

/// Adds `scale · ∂loss/∂θ` for one sample into `grads`.
///
/// Uses the fused softmax/cross-entropy gradient `probs − onehot`, then runs
/// BPTT through each layer from the top down, replaying dropout masks.
pub fn accumulate_gradients(
    model: &Model,
    cache: &ForwardCache,
    class: usize,
    scale: f64,
    grads: &mut ModelParams,
) -> Result<(), NnError> {
    let cfg = &model.config;
    if class >= cfg.num_classes {
        return Err(NnError::Class {
            class,
            num_classes: cfg.num_classes,
        });
    }
    if cache.layers.len() != cfg.num_lstm_layers || cache.probs.len() != cfg.num_classes {
        return Err(NnError::Config("cache does not belong to this model".into()));
    }
    let hd = cfg.hidden_dim;
    let t_len = cfg.seq_len;

    let mut dlogits = cache.probs.clone();
    dlogits[class] -= 1.0;
    dlogits.iter_mut().for_each(|v| *v *= scale);

    for (g, d) in grads.dense.b.data_mut().iter_mut().zip(&dlogits) {
        *g += d;
    }
    outer_acc(&mut grads.dense.w, &dlogits, &cache.dense_input);
    let mut d_dense_in = vec![0.0; cache.dense_input.len()];
    gemv_t_acc(&model.params.dense.w, &dlogits, &mut d_dense_in);

    // Gradient arriving at each hidden output of the current layer from above.
    let mut dh_ext = Matrix::zeros(t_len, hd);
    match cfg.head {
        HeadInput::Flatten => dh_ext.data_mut().copy_from_slice(&d_dense_in),
        HeadInput::LastHidden => dh_ext.row_mut(t_len - 1).copy_from_slice(&d_dense_in),
    }

    let zeros = vec![0.0; hd];
    for l in (0..cfg.num_lstm_layers).rev() {
        let params = &model.params.layers[l];
        let layer = &cache.layers[l];
        let g = &mut grads.layers[l];
        let d_in = layer.inputs.cols();
        let mut dx = Matrix::zeros(t_len, d_in);
        let mut dh_next = vec![0.0; hd];
        let mut dc_next = vec![0.0; hd];
        let mut z = vec![0.0; hd + d_in];
        let mut da = [vec![0.0; hd], vec![0.0; hd], vec![0.0; hd], vec![0.0; hd]];
        for t in (0..t_len).rev() {
            let s = &layer.states[t];
            let (h_prev, c_prev) = if t == 0 {
                (&zeros[..], &zeros[..])
            } else {
                (&layer.states[t - 1].h[..], &layer.states[t - 1].c[..])
            };
            z[..hd].copy_from_slice(h_prev);
            z[hd..].copy_from_slice(layer.inputs.row(t));
            let [da_f, da_i, da_c, da_o] = &mut da;
            for k in 0..hd {
                let dh = dh_ext.get(t, k) + dh_next[k];
                let tc = s.c[k].tanh();
                let d_o = dh * tc;
                let dc = dh * s.o[k] * tanh_grad_from_output(tc) + dc_next[k];
                da_f[k] = dc * c_prev[k] * sigmoid_grad_from_output(s.f[k]);
                da_i[k] = dc * s.c_tilde[k] * sigmoid_grad_from_output(s.i[k]);
                da_c[k] = dc * s.i[k] * tanh_grad_from_output(s.c_tilde[k]);
                da_o[k] = d_o * sigmoid_grad_from_output(s.o[k]);
                dc_next[k] = dc * s.f[k];
            }
            let mut dz = vec![0.0; hd + d_in];
            for (w, gw, gb, a) in [
                (&params.w_f, &mut g.w_f, &mut g.b_f, &*da_f),
                (&params.w_i, &mut g.w_i, &mut g.b_i, &*da_i),
                (&params.w_c, &mut g.w_c, &mut g.b_c, &*da_c),
                (&params.w_o, &mut g.w_o, &mut g.b_o, &*da_o),
            ] {
                outer_acc(gw, a, &z);
                for (b, v) in gb.data_mut().iter_mut().zip(a) {
                    *b += v;
                }
                gemv_t_acc(w, a, &mut dz);
            }
            dh_next.copy_from_slice(&dz[..hd]);
            dx.row_mut(t).copy_from_slice(&dz[hd..]);
        }
        if l > 0 {
            dh_ext = match &cache.masks[l - 1] {
                Some(mask) => dx.hadamard(mask)?,
                None => dx,
            };
        }
    }
    Ok(())
}

/// Per-block worst relative error between analytic and numeric gradients.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BlockCheck {
    pub name: String,
    pub params: usize,
    pub max_rel_error: f64,
    pub worst_index: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GradCheckReport {
    pub step: f64,
    pub blocks: Vec<BlockCheck>,
}

impl GradCheckReport {
    pub fn max_rel_error(&self) -> f64 {
        self.blocks.iter().map(|b| b.max_rel_error).fold(0.0, f64::max)
    }

    pub fn flagged(&self, threshold: f64) -> Vec<&str> {
        self.blocks
            .iter()
            .filter(|b| b.max_rel_error > threshold)
            .map(|b| b.name.as_str())
            .collect()
    }

    pub fn total_params(&self) -> usize {
        self.blocks.iter().map(|b| b.params).sum()
    }
}

/// Smallest denominator in [`relative_error`]. A central difference with step
/// `1e-5` on an O(1) loss carries about `1e-11` of rounding noise, so entries
/// far below this magnitude are compared in absolute terms.
pub const RELATIVE_ERROR_FLOOR: f64 = 1e-4;

/// `|a − n| / max(|a|, |n|, RELATIVE_ERROR_FLOOR)`
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(RELATIVE_ERROR_FLOOR)
}

/// Mean cross-entropy over `samples` (features, class) under `mode`; sample
/// `k` uses dropout seed `derive_seed([seed, k])` in training mode.
pub fn mean_loss(model: &Model, samples: &[(Matrix, usize)], mode: ForwardMode) -> Result<f64, NnError> {
    let mut total = 0.0;
    for (k, (x, y)) in samples.iter().enumerate() {
        let out = model.forward(x, sample_mode(mode, k))?;
        total += cross_entropy_class(out.probs.data(), *y);
    }
    Ok(total / samples.len() as f64)
}

fn sample_mode(mode: ForwardMode, k: usize) -> ForwardMode {
    match mode {
        ForwardMode::Inference => ForwardMode::Inference,
        ForwardMode::Train { dropout_seed } => ForwardMode::Train {
            dropout_seed: derive_seed(&[dropout_seed, k as u64]),
        },
    }
}

/// Analytic gradient of [`mean_loss`] (training mode with the same seeds).
pub fn mean_loss_gradients(
    model: &Model,
    samples: &[(Matrix, usize)],
    dropout_seed: u64,
) -> Result<ModelParams, NnError> {
    let mut grads = model.params.zeros_like();
    let scale = 1.0 / samples.len() as f64;
    for (k, (x, y)) in samples.iter().enumerate() {
        let out = model.forward(x, sample_mode(ForwardMode::Train { dropout_seed }, k))?;
        accumulate_gradients(model, &out.cache, *y, scale, &mut grads)?;
    }
    Ok(grads)
}

/// Compares `analytic` against central differences of [`mean_loss`] for
/// every scalar parameter. Dropout masks are replayed from `dropout_seed`, so
/// both perturbed evaluations see the same mask as the analytic pass.
pub fn compare_gradients(
    model: &Model,
    samples: &[(Matrix, usize)],
    dropout_seed: u64,
    analytic: &ModelParams,
    step: f64,
) -> Result<GradCheckReport, NnError> {
    let mode = ForwardMode::Train { dropout_seed };
    let mut probe = model.clone();
    let names: Vec<String> = model.params.blocks().into_iter().map(|(n, _)| n).collect();
    let analytic_blocks: Vec<Vec<f64>> = analytic
        .blocks()
        .into_iter()
        .map(|(_, m)| m.data().to_vec())
        .collect();
    let mut blocks = Vec::with_capacity(names.len());
    for (b, name) in names.iter().enumerate() {
        let len = analytic_blocks[b].len();
        let mut worst = (0.0, 0);
        for idx in 0..len {
            let original = block_value(&probe, b, idx);
            set_block_value(&mut probe, b, idx, original + step);
            let plus = mean_loss(&probe, samples, mode)?;
            set_block_value(&mut probe, b, idx, original - step);
            let minus = mean_loss(&probe, samples, mode)?;
            set_block_value(&mut probe, b, idx, original);
            let numeric = (plus - minus) / (2.0 * step);
            let err = relative_error(analytic_blocks[b][idx], numeric);
            if err > worst.0 {
                worst = (err, idx);
            }
        }
        blocks.push(BlockCheck {
            name: name.clone(),
            params: len,
            max_rel_error: worst.0,
            worst_index: worst.1,
        });
    }
    Ok(GradCheckReport { step, blocks })
}

fn block_value(model: &Model, block: usize, idx: usize) -> f64 {
    model.params.blocks()[block].1.data()[idx]
}

fn set_block_value(model: &mut Model, block: usize, idx: usize, v: f64) {
    model.params.blocks_mut()[block].1.data_mut()[idx] = v;
}

/// Finite-difference step used by [`gradient_check`].
pub const GRADCHECK_STEP: f64 = 1e-5;
/// Number of random samples whose mean loss is differentiated.
pub const GRADCHECK_SAMPLES: usize = 2;

/// Builds a random model and inputs from `seed` and checks every analytic
/// gradient against central differences.
pub fn gradient_check(cfg: &ModelConfig, seed: u64) -> Result<GradCheckReport, NnError> {
    cfg.validate()?;
    if cfg.num_params() > 2_000 {
        return Err(NnError::Config(format!(
            "{} parameters is too many for a finite-difference check",
            cfg.num_params()
        )));
    }
    let model = Model::new(cfg.clone(), seed)?;
    let samples = gradcheck_samples(cfg, seed);
    let dropout_seed = derive_seed(&[seed, 0xD0]);
    let analytic = mean_loss_gradients(&model, &samples, dropout_seed)?;
    compare_gradients(&model, &samples, dropout_seed, &analytic, GRADCHECK_STEP)
}

/// Standard-normal inputs and uniformly drawn labels for gradient checks.
pub fn gradcheck_samples(cfg: &ModelConfig, seed: u64) -> Vec<(Matrix, usize)> {
    let mut rng = XorShift64Star::new(derive_seed(&[seed, 0xDA7A]));
    (0..GRADCHECK_SAMPLES)
        .map(|_| {
            let x = Matrix::from_fn(cfg.seq_len, cfg.input_dim, |_, _| rng.normal());
            (x, rng.below(cfg.num_classes))
        })
        .collect()
}

/// The small configuration used for gradient checks: 2 layers, H=4, D=3, T=5, C=3, no dropout.
pub fn gradcheck_config() -> ModelConfig {
    ModelConfig {
        num_lstm_layers: 2,
        hidden_dim: 4,
        input_dim: 3,
        seq_len: 5,
        num_classes: 3,
        dropout_rate: 0.0,
        head: HeadInput::Flatten,
    }
}
