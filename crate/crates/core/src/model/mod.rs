//! Bidirectional LSTM acoustic model with exact backpropagation through time.
//!
//! Layout: `layers` stacked BiLSTM layers (hidden size `hidden` per
//! direction), inverted dropout on every layer output, and a linear
//! projection to `classes` logits per frame.

mod checkpoint;
mod optim;

use rand::Rng as _;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::matrix::Matrix;
use crate::rng::{derive_seed, rng_from_seed};

pub use checkpoint::{load_checkpoint, read_checkpoint, save_checkpoint, write_checkpoint, Checkpoint, RngCursor, CHECKPOINT_VERSION};
pub use optim::{adam_step, AdamConfig, OptimizerState, StepStats};

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("input width {got} does not match model input width {expected}")]
    WidthMismatch { expected: usize, got: usize },
    #[error("empty input sequence")]
    EmptyInput,
    #[error("tape was recorded at parameter version {tape}, model is at {model}")]
    StaleTape { tape: u64, model: u64 },
    #[error("gradient shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("non-finite gradient in {0}; step aborted")]
    NonFiniteGradient(String),
    #[error("invalid model config: {0}")]
    InvalidConfig(String),
    #[error("checkpoint error: {0}")]
    Checkpoint(String),
    #[error("checkpoint has {found} output classes, expected {expected}")]
    VocabMismatch { expected: usize, found: usize },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub input_dim: usize,
    pub hidden: usize,
    pub layers: usize,
    /// Output classes, blank included.
    pub classes: usize,
    /// Dropout rate on each recurrent layer's output, in `[0, 1)`.
    pub dropout: f64,
}

impl ModelConfig {
    pub fn validate(&self) -> Result<(), ModelError> {
        let bad = |m: &str| Err(ModelError::InvalidConfig(m.into()));
        if self.input_dim == 0 || self.hidden == 0 || self.layers == 0 {
            return bad("input_dim, hidden and layers must be positive");
        }
        if self.classes < 2 {
            return bad("need at least one token plus blank");
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return bad("dropout must lie in [0, 1)");
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// A named parameter tensor, row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    pub name: String,
    pub shape: (usize, usize),
    pub data: Vec<f64>,
}

/// Gradients in the same order and shapes as the model parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct Gradients {
    pub tensors: Vec<Vec<f64>>,
}

impl Gradients {
    pub fn zeros_like(model: &AcousticModel) -> Self {
        Self { tensors: model.params.iter().map(|p| vec![0.0; p.data.len()]).collect() }
    }

    pub fn add_scaled(&mut self, other: &Gradients, scale: f64) {
        for (a, b) in self.tensors.iter_mut().zip(&other.tensors) {
            for (x, y) in a.iter_mut().zip(b) {
                *x += scale * y;
            }
        }
    }

    pub fn scale(&mut self, s: f64) {
        self.tensors.iter_mut().flatten().for_each(|x| *x *= s);
    }

    pub fn global_norm(&self) -> f64 {
        self.tensors.iter().flatten().map(|x| x * x).sum::<f64>().sqrt()
    }

    pub fn is_zero(&self) -> bool {
        self.tensors.iter().flatten().all(|&x| x == 0.0)
    }
}

const GATES: usize = 4;

/// Parameter indices of one direction of one layer.
#[derive(Clone, Copy, Debug)]
struct CellIdx {
    w_ih: usize,
    w_hh: usize,
    bias: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct AcousticModel {
    config: ModelConfig,
    params: Vec<Tensor>,
    version: u64,
}

/// Activations of one direction of one layer, in time order.
#[derive(Clone, Debug)]
struct DirTape {
    /// Post-activation gates `[i, f, g, o]`, T x 4H.
    gates: Matrix,
    cells: Matrix,
    tanh_cells: Matrix,
    hidden: Matrix,
}

#[derive(Clone, Debug)]
struct LayerTape {
    input: Matrix,
    fwd: DirTape,
    bwd: DirTape,
    /// Inverted-dropout multipliers on this layer's output, if any.
    mask: Option<Matrix>,
}

/// Everything [`AcousticModel::backward`] needs from a forward pass.
#[derive(Clone, Debug)]
pub struct Tape {
    version: u64,
    layers: Vec<LayerTape>,
    top: Matrix,
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

impl AcousticModel {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self, ModelError> {
        config.validate()?;
        let mut rng = rng_from_seed(seed);
        let h = config.hidden;
        let mut params = Vec::new();
        let bound = 1.0 / (h as f64).sqrt();
        let mut uniform = |n: usize, b: f64| (0..n).map(|_| rng.gen_range(-b..b)).collect::<Vec<f64>>();
        for l in 0..config.layers {
            let input = if l == 0 { config.input_dim } else { 2 * h };
            for dir in ["fwd", "bwd"] {
                params.push(Tensor { name: format!("layer{l}.{dir}.w_ih"), shape: (GATES * h, input), data: uniform(GATES * h * input, bound) });
                params.push(Tensor { name: format!("layer{l}.{dir}.w_hh"), shape: (GATES * h, h), data: uniform(GATES * h * h, bound) });
                let mut bias = uniform(GATES * h, bound);
                // forget gate starts open
                bias[h..2 * h].iter_mut().for_each(|b| *b += 1.0);
                params.push(Tensor { name: format!("layer{l}.{dir}.bias"), shape: (GATES * h, 1), data: bias });
            }
        }
        let out_bound = 1.0 / ((2 * h) as f64).sqrt();
        params.push(Tensor { name: "out.weight".into(), shape: (config.classes, 2 * h), data: uniform(config.classes * 2 * h, out_bound) });
        params.push(Tensor { name: "out.bias".into(), shape: (config.classes, 1), data: vec![0.0; config.classes] });
        Ok(Self { config, params, version: 0 })
    }

    pub(crate) fn from_parts(config: ModelConfig, params: Vec<Tensor>, version: u64) -> Result<Self, ModelError> {
        config.validate()?;
        let reference = Self::new(config.clone(), 0)?;
        if reference.params.len() != params.len() {
            return Err(ModelError::Checkpoint(format!("expected {} tensors, found {}", reference.params.len(), params.len())));
        }
        for (r, p) in reference.params.iter().zip(&params) {
            if r.name != p.name || r.shape != p.shape || p.data.len() != r.data.len() {
                return Err(ModelError::Checkpoint(format!("tensor {} does not match architecture", p.name)));
            }
        }
        Ok(Self { config, params, version })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    /// Changes the dropout rate; parameters are untouched.
    pub fn set_dropout(&mut self, rate: f64) -> Result<(), ModelError> {
        let cfg = ModelConfig { dropout: rate, ..self.config.clone() };
        cfg.validate()?;
        self.config = cfg;
        Ok(())
    }

    pub fn params(&self) -> &[Tensor] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Tensor] {
        self.version += 1;
        &mut self.params
    }

    pub fn param_count(&self) -> usize {
        self.params.iter().map(|p| p.data.len()).sum()
    }

    /// Parameter version, bumped on every mutation. Tapes and pseudo-labels
    /// are stamped with it.
    pub fn version(&self) -> u64 {
        self.version
    }

    /// FNV hash over the parameter bits.
    pub fn param_hash(&self) -> u64 {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        for x in self.params.iter().flat_map(|p| &p.data) {
            for b in x.to_bits().to_le_bytes() {
                h ^= u64::from(b);
                h = h.wrapping_mul(0x0000_0100_0000_01b3);
            }
        }
        h
    }

    fn cell(&self, layer: usize, backward: bool) -> CellIdx {
        let base = (layer * 2 + usize::from(backward)) * 3;
        CellIdx { w_ih: base, w_hh: base + 1, bias: base + 2 }
    }

    fn out_idx(&self) -> (usize, usize) {
        let n = self.params.len();
        (n - 2, n - 1)
    }

    /// Eval-mode logits without recording a tape.
    pub fn infer(&self, features: &Matrix) -> Result<Matrix, ModelError> {
        self.forward(features, Mode::Eval, 0).map(|(l, _)| l)
    }

    /// Per-frame logits, T x classes. In train mode dropout masks are drawn
    /// from `seed`; eval mode is deterministic.
    pub fn forward(&self, features: &Matrix, mode: Mode, seed: u64) -> Result<(Matrix, Tape), ModelError> {
        if features.cols() != self.config.input_dim {
            return Err(ModelError::WidthMismatch { expected: self.config.input_dim, got: features.cols() });
        }
        if features.rows() == 0 {
            return Err(ModelError::EmptyInput);
        }
        let t_len = features.rows();
        let h = self.config.hidden;
        let mut input = features.clone();
        let mut layers = Vec::with_capacity(self.config.layers);
        for l in 0..self.config.layers {
            let fwd = self.run_direction(&input, self.cell(l, false), false);
            let bwd = self.run_direction(&input, self.cell(l, true), true);
            let mut out = Matrix::zeros(t_len, 2 * h);
            for t in 0..t_len {
                let row = out.row_mut(t);
                row[..h].copy_from_slice(fwd.hidden.row(t));
                row[h..].copy_from_slice(bwd.hidden.row(t));
            }
            let mask = (mode == Mode::Train && self.config.dropout > 0.0).then(|| {
                let rate = self.config.dropout;
                let keep = 1.0 / (1.0 - rate);
                let mut rng = rng_from_seed(derive_seed(seed, &[l as u64]));
                let data = (0..t_len * 2 * h).map(|_| if rng.gen::<f64>() < rate { 0.0 } else { keep }).collect();
                Matrix::from_vec(t_len, 2 * h, data)
            });
            if let Some(m) = &mask {
                for (x, k) in out.as_mut_slice().iter_mut().zip(m.as_slice()) {
                    *x *= k;
                }
            }
            layers.push(LayerTape { input: std::mem::replace(&mut input, out), fwd, bwd, mask });
        }
        let (wi, bi) = self.out_idx();
        let (w, b) = (&self.params[wi], &self.params[bi]);
        let classes = self.config.classes;
        let width = 2 * h;
        let mut logits = Matrix::zeros(t_len, classes);
        for t in 0..t_len {
            let x = input.row(t);
            let row = logits.row_mut(t);
            for (k, o) in row.iter_mut().enumerate() {
                *o = b.data[k] + dot(&w.data[k * width..(k + 1) * width], x);
            }
        }
        Ok((logits, Tape { version: self.version, layers, top: input }))
    }

    fn run_direction(&self, input: &Matrix, idx: CellIdx, reverse: bool) -> DirTape {
        let (t_len, in_dim) = (input.rows(), input.cols());
        let h = self.config.hidden;
        let (w_ih, w_hh, bias) = (&self.params[idx.w_ih].data, &self.params[idx.w_hh].data, &self.params[idx.bias].data);
        let mut gates = Matrix::zeros(t_len, GATES * h);
        let mut cells = Matrix::zeros(t_len, h);
        let mut tanh_cells = Matrix::zeros(t_len, h);
        let mut hidden = Matrix::zeros(t_len, h);
        let mut h_prev = vec![0.0; h];
        let mut c_prev = vec![0.0; h];
        let mut z = vec![0.0; GATES * h];
        for step in 0..t_len {
            let t = if reverse { t_len - 1 - step } else { step };
            let x = input.row(t);
            for (j, zj) in z.iter_mut().enumerate() {
                *zj = bias[j] + dot(&w_ih[j * in_dim..(j + 1) * in_dim], x) + dot(&w_hh[j * h..(j + 1) * h], &h_prev);
            }
            let g = gates.row_mut(t);
            for j in 0..h {
                g[j] = sigmoid(z[j]);
                g[h + j] = sigmoid(z[h + j]);
                g[2 * h + j] = z[2 * h + j].tanh();
                g[3 * h + j] = sigmoid(z[3 * h + j]);
            }
            let g = gates.row(t);
            for j in 0..h {
                let c = g[h + j] * c_prev[j] + g[j] * g[2 * h + j];
                let tc = c.tanh();
                cells.set(t, j, c);
                tanh_cells.set(t, j, tc);
                hidden.set(t, j, g[3 * h + j] * tc);
                c_prev[j] = c;
                h_prev[j] = g[3 * h + j] * tc;
            }
        }
        DirTape { gates, cells, tanh_cells, hidden }
    }

    /// Gradients of a scalar loss with respect to every parameter, given
    /// `d loss / d logits` and the tape of the matching forward pass.
    pub fn backward(&self, tape: &Tape, grad_logits: &Matrix) -> Result<Gradients, ModelError> {
        if tape.version != self.version {
            return Err(ModelError::StaleTape { tape: tape.version, model: self.version });
        }
        let t_len = tape.top.rows();
        if grad_logits.rows() != t_len || grad_logits.cols() != self.config.classes {
            return Err(ModelError::ShapeMismatch(format!(
                "grad_logits is {}x{}, expected {}x{}",
                grad_logits.rows(),
                grad_logits.cols(),
                t_len,
                self.config.classes
            )));
        }
        let h = self.config.hidden;
        let width = 2 * h;
        let mut grads = Gradients::zeros_like(self);
        let (wi, bi) = self.out_idx();
        let w_out = &self.params[wi].data;
        let mut d_top = Matrix::zeros(t_len, width);
        for t in 0..t_len {
            let gl = grad_logits.row(t);
            let x = tape.top.row(t);
            for (k, &g) in gl.iter().enumerate() {
                if g == 0.0 {
                    continue;
                }
                grads.tensors[bi][k] += g;
                axpy(&mut grads.tensors[wi][k * width..(k + 1) * width], g, x);
                axpy(d_top.row_mut(t), g, &w_out[k * width..(k + 1) * width]);
            }
        }
        let mut d_out = d_top;
        for l in (0..self.config.layers).rev() {
            let lt = &tape.layers[l];
            if let Some(m) = &lt.mask {
                for (x, k) in d_out.as_mut_slice().iter_mut().zip(m.as_slice()) {
                    *x *= k;
                }
            }
            let mut d_input = Matrix::zeros(t_len, lt.input.cols());
            for (backward, dir) in [(false, &lt.fwd), (true, &lt.bwd)] {
                let offset = if backward { h } else { 0 };
                self.backprop_direction(&lt.input, dir, &d_out, offset, self.cell(l, backward), backward, &mut grads, &mut d_input);
            }
            d_out = d_input;
        }
        Ok(grads)
    }

    #[allow(clippy::too_many_arguments)]
    fn backprop_direction(
        &self,
        input: &Matrix,
        tape: &DirTape,
        d_out: &Matrix,
        offset: usize,
        idx: CellIdx,
        reverse: bool,
        grads: &mut Gradients,
        d_input: &mut Matrix,
    ) {
        let (t_len, in_dim) = (input.rows(), input.cols());
        let h = self.config.hidden;
        let w_ih = &self.params[idx.w_ih].data;
        let w_hh = &self.params[idx.w_hh].data;
        let mut dh_next = vec![0.0; h];
        let mut dc_next = vec![0.0; h];
        let mut dz = vec![0.0; GATES * h];
        for step in (0..t_len).rev() {
            let t = if reverse { t_len - 1 - step } else { step };
            let prev = if step == 0 { None } else { Some(if reverse { t + 1 } else { t - 1 }) };
            let g = tape.gates.row(t);
            let dh_ext = &d_out.row(t)[offset..offset + h];
            for j in 0..h {
                let (i, f, gg, o) = (g[j], g[h + j], g[2 * h + j], g[3 * h + j]);
                let tc = tape.tanh_cells.get(t, j);
                let c_prev = prev.map_or(0.0, |p| tape.cells.get(p, j));
                let dh = dh_ext[j] + dh_next[j];
                let dc = dh * o * (1.0 - tc * tc) + dc_next[j];
                dz[j] = dc * gg * i * (1.0 - i);
                dz[h + j] = dc * c_prev * f * (1.0 - f);
                dz[2 * h + j] = dc * i * (1.0 - gg * gg);
                dz[3 * h + j] = dh * tc * o * (1.0 - o);
                dc_next[j] = dc * f;
            }
            let x = input.row(t);
            dh_next.fill(0.0);
            for (r, &d) in dz.iter().enumerate() {
                if d == 0.0 {
                    continue;
                }
                grads.tensors[idx.bias][r] += d;
                axpy(&mut grads.tensors[idx.w_ih][r * in_dim..(r + 1) * in_dim], d, x);
                axpy(d_input.row_mut(t), d, &w_ih[r * in_dim..(r + 1) * in_dim]);
                if let Some(p) = prev {
                    axpy(&mut grads.tensors[idx.w_hh][r * h..(r + 1) * h], d, tape.hidden.row(p));
                }
                axpy(&mut dh_next, d, &w_hh[r * h..(r + 1) * h]);
            }
        }
    }
}

#[inline]
fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

#[inline]
fn axpy(y: &mut [f64], a: f64, x: &[f64]) {
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += a * xi;
    }
}
