//! Dense multi-layer perceptrons with hand-written reverse-mode gradients.
//!
//! Parameters live in one flat `f64` vector. Layer `l` stores its weight
//! matrix (`in x out`, row-major) followed by its bias (`out`), so a batch
//! `X` (`B x in`) maps to `X W + b`.

mod adam;
mod checkpoint;
mod gradcheck;
mod io;

pub use adam::AdamState;
pub use checkpoint::TrainState;
pub use gradcheck::{gradcheck, GradCheckReport};
pub use io::{load_params, read_params_from, save_params, write_params_to, PARAMS_FORMAT_VERSION};

use ndarray::{s, Array1, Array2, ArrayView1, ArrayView2, Axis};
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::seed::child_rng;
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Gelu,
    Relu,
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2 / pi)
const GELU_A: f64 = 0.044_715;

impl Activation {
    pub fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Relu => x.max(0.0),
            Activation::Gelu => {
                let t = (GELU_C * (x + GELU_A * x * x * x)).tanh();
                0.5 * x * (1.0 + t)
            }
        }
    }

    pub fn derivative(self, x: f64) -> f64 {
        match self {
            Activation::Relu => {
                if x > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Gelu => {
                let inner = GELU_C * (x + GELU_A * x * x * x);
                let t = inner.tanh();
                let dinner = GELU_C * (1.0 + 3.0 * GELU_A * x * x);
                0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * dinner
            }
        }
    }
}

/// Layer widths from input to output. The last layer is linear.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MlpSpec {
    pub layer_dims: Vec<usize>,
    pub activation: Activation,
}

impl MlpSpec {
    pub fn new(layer_dims: Vec<usize>, activation: Activation) -> Result<Self> {
        let spec = Self {
            layer_dims,
            activation,
        };
        spec.validate()?;
        Ok(spec)
    }

    /// `input -> hidden... -> output`.
    pub fn with_hidden(input: usize, hidden: &[usize], output: usize, activation: Activation) -> Result<Self> {
        let mut dims = Vec::with_capacity(hidden.len() + 2);
        dims.push(input);
        dims.extend_from_slice(hidden);
        dims.push(output);
        Self::new(dims, activation)
    }

    pub fn validate(&self) -> Result<()> {
        if self.layer_dims.len() < 3 {
            return Err(Error::Shape(format!(
                "an MLP needs at least one hidden layer, got dims {:?}",
                self.layer_dims
            )));
        }
        if self.layer_dims.contains(&0) {
            return Err(Error::Shape(format!("zero width in {:?}", self.layer_dims)));
        }
        Ok(())
    }

    pub fn input_dim(&self) -> usize {
        self.layer_dims[0]
    }

    pub fn output_dim(&self) -> usize {
        *self.layer_dims.last().expect("validated")
    }

    pub fn num_layers(&self) -> usize {
        self.layer_dims.len() - 1
    }

    /// `(fan_in, fan_out, offset)` of every layer in the flat vector.
    pub fn layer_layout(&self) -> Vec<(usize, usize, usize)> {
        let mut off = 0;
        self.layer_dims
            .windows(2)
            .map(|w| {
                let entry = (w[0], w[1], off);
                off += (w[0] + 1) * w[1];
                entry
            })
            .collect()
    }

    pub fn num_params(&self) -> usize {
        self.layer_dims.windows(2).map(|w| (w[0] + 1) * w[1]).sum()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamSet {
    pub values: Vec<f64>,
    /// How the values were first initialized, e.g. `kaiming-uniform:seed=7`.
    pub init: String,
}

impl ParamSet {
    pub fn zeros(spec: &MlpSpec) -> Self {
        Self {
            values: vec![0.0; spec.num_params()],
            init: "zeros".into(),
        }
    }

    /// Kaiming-uniform weights `U(-sqrt(6/fan_in), sqrt(6/fan_in))` with one
    /// derived RNG stream per layer; biases start at zero.
    pub fn kaiming(spec: &MlpSpec, seed: u64) -> Self {
        let mut values = vec![0.0; spec.num_params()];
        for (l, (fan_in, fan_out, off)) in spec.layer_layout().into_iter().enumerate() {
            let mut rng = child_rng(seed, l as u64);
            let bound = (6.0 / fan_in as f64).sqrt();
            for w in &mut values[off..off + fan_in * fan_out] {
                *w = rng.random_range(-bound..bound);
            }
        }
        Self {
            values,
            init: format!("kaiming-uniform:seed={seed}"),
        }
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }
}

/// Intermediate values kept by [`forward_tape`] for [`backward`].
#[derive(Debug, Clone)]
pub struct Tape {
    inputs: Vec<Array2<f64>>,
    pre: Vec<Array2<f64>>,
}

fn check_params(spec: &MlpSpec, params: &[f64]) -> Result<()> {
    if params.len() != spec.num_params() {
        return Err(Error::Shape(format!(
            "{} parameters supplied, spec needs {}",
            params.len(),
            spec.num_params()
        )));
    }
    Ok(())
}

fn layer<'a>(params: &'a [f64], fan_in: usize, fan_out: usize, off: usize) -> (ArrayView2<'a, f64>, ArrayView1<'a, f64>) {
    let w = ArrayView2::from_shape((fan_in, fan_out), &params[off..off + fan_in * fan_out]).expect("layout");
    let b = ArrayView1::from(&params[off + fan_in * fan_out..off + (fan_in + 1) * fan_out]);
    (w, b)
}

fn run(spec: &MlpSpec, params: &[f64], batch: ArrayView2<f64>, mut tape: Option<&mut Tape>) -> Result<Array2<f64>> {
    spec.validate()?;
    check_params(spec, params)?;
    if batch.ncols() != spec.input_dim() {
        return Err(Error::Shape(format!(
            "batch width {} != input dim {}",
            batch.ncols(),
            spec.input_dim()
        )));
    }
    let layout = spec.layer_layout();
    let last = layout.len() - 1;
    let mut h = batch.to_owned();
    for (l, &(fan_in, fan_out, off)) in layout.iter().enumerate() {
        let (w, b) = layer(params, fan_in, fan_out, off);
        let mut z = h.dot(&w);
        z += &b;
        if let Some(t) = tape.as_deref_mut() {
            t.inputs.push(h);
        }
        if l == last {
            return Ok(z);
        }
        let act = spec.activation;
        let a = z.mapv(|v| act.apply(v));
        if let Some(t) = tape.as_deref_mut() {
            t.pre.push(z);
        }
        h = a;
    }
    unreachable!("at least one layer")
}

pub fn forward(spec: &MlpSpec, params: &[f64], batch: ArrayView2<f64>) -> Result<Array2<f64>> {
    run(spec, params, batch, None)
}

pub fn forward_tape(spec: &MlpSpec, params: &[f64], batch: ArrayView2<f64>) -> Result<(Array2<f64>, Tape)> {
    let mut tape = Tape {
        inputs: Vec::new(),
        pre: Vec::new(),
    };
    let out = run(spec, params, batch, Some(&mut tape))?;
    Ok((out, tape))
}

/// Gradients of `sum(upstream * forward(batch))` with respect to the flat
/// parameters and to the batch.
pub fn backward(
    spec: &MlpSpec,
    params: &[f64],
    tape: &Tape,
    upstream: ArrayView2<f64>,
) -> Result<(Vec<f64>, Array2<f64>)> {
    check_params(spec, params)?;
    let layout = spec.layer_layout();
    let batch = tape.inputs.first().map_or(0, |x| x.nrows());
    if tape.inputs.len() != layout.len() || upstream.dim() != (batch, spec.output_dim()) {
        return Err(Error::Shape(format!(
            "upstream gradient {:?} does not match forward output ({batch}, {})",
            upstream.dim(),
            spec.output_dim()
        )));
    }
    let mut grads = vec![0.0; params.len()];
    let mut g = upstream.to_owned();
    for l in (0..layout.len()).rev() {
        let (fan_in, fan_out, off) = layout[l];
        let (w, _) = layer(params, fan_in, fan_out, off);
        let gw = tape.inputs[l].t().dot(&g);
        let gb = g.sum_axis(Axis(0));
        // logical (row-major) order; `dot` may return a transposed layout
        for (dst, v) in grads[off..off + (fan_in + 1) * fan_out].iter_mut().zip(gw.iter().chain(gb.iter())) {
            *dst = *v;
        }
        let mut gin = g.dot(&w.t());
        if l > 0 {
            let act = spec.activation;
            gin.zip_mut_with(&tape.pre[l - 1], |gv, &z| *gv *= act.derivative(z));
        }
        g = gin;
    }
    Ok((grads, g))
}

/// An [`MlpSpec`] bundled with its parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Mlp {
    pub spec: MlpSpec,
    pub params: ParamSet,
}

impl Mlp {
    pub fn new(spec: MlpSpec, seed: u64) -> Self {
        let params = ParamSet::kaiming(&spec, seed);
        Self { spec, params }
    }

    pub fn from_parts(spec: MlpSpec, params: ParamSet) -> Result<Self> {
        spec.validate()?;
        check_params(&spec, &params.values)?;
        Ok(Self { spec, params })
    }

    pub fn forward(&self, batch: ArrayView2<f64>) -> Result<Array2<f64>> {
        forward(&self.spec, &self.params.values, batch)
    }

    pub fn forward_tape(&self, batch: ArrayView2<f64>) -> Result<(Array2<f64>, Tape)> {
        forward_tape(&self.spec, &self.params.values, batch)
    }

    pub fn backward(&self, tape: &Tape, upstream: ArrayView2<f64>) -> Result<(Vec<f64>, Array2<f64>)> {
        backward(&self.spec, &self.params.values, tape, upstream)
    }

    /// Evaluates a single input row.
    pub fn forward_one(&self, x: &[f64]) -> Result<Array1<f64>> {
        let view = ArrayView2::from_shape((1, x.len()), x).map_err(|e| Error::Shape(e.to_string()))?;
        Ok(self.forward(view)?.row(0).to_owned())
    }
}

/// Copies rows `idx` of `m` into a new matrix.
pub fn gather_rows(m: ArrayView2<f64>, idx: &[usize]) -> Array2<f64> {
    let mut out = Array2::zeros((idx.len(), m.ncols()));
    for (r, &i) in idx.iter().enumerate() {
        out.slice_mut(s![r, ..]).assign(&m.row(i));
    }
    out
}
