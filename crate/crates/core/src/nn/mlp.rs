use ndarray::{Array1, Array2, Axis};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Result, SpareError};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    #[default]
    Relu,
    /// Smooth alternative, used where finite differences must be exact.
    Tanh,
}

impl Activation {
    #[inline]
    fn apply(self, v: f64) -> f64 {
        match self {
            Activation::Relu => v.max(0.0),
            Activation::Tanh => v.tanh(),
        }
    }

    /// Derivative expressed through the activation output `a`.
    #[inline]
    fn grad_from_output(self, a: f64) -> f64 {
        match self {
            Activation::Relu => {
                if a > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Tanh => 1.0 - a * a,
        }
    }
}

/// Fully connected layer computing `x W + b`; `w` is `(inputs, outputs)`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "LayerFile", into = "LayerFile")]
pub struct Dense {
    pub w: Array2<f64>,
    pub b: Array1<f64>,
}

#[derive(Serialize, Deserialize)]
struct LayerFile {
    /// `[inputs, outputs]`
    shape: [usize; 2],
    /// Row-major `(inputs, outputs)` weights.
    weights: Vec<f64>,
    bias: Vec<f64>,
}

impl From<Dense> for LayerFile {
    fn from(d: Dense) -> Self {
        let (i, o) = d.w.dim();
        LayerFile {
            shape: [i, o],
            weights: d.w.iter().copied().collect(),
            bias: d.b.to_vec(),
        }
    }
}

impl TryFrom<LayerFile> for Dense {
    type Error = SpareError;

    fn try_from(f: LayerFile) -> Result<Self> {
        let [i, o] = f.shape;
        if f.bias.len() != o {
            return Err(SpareError::Format(format!("bias length {} != {o}", f.bias.len())));
        }
        if f.weights.iter().chain(&f.bias).any(|v| !v.is_finite()) {
            return Err(SpareError::NonFinite("layer parameters"));
        }
        let w = Array2::from_shape_vec((i, o), f.weights)
            .map_err(|e| SpareError::Format(format!("weight shape: {e}")))?;
        Ok(Dense {
            w,
            b: Array1::from(f.bias),
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Mlp {
    pub layers: Vec<Dense>,
    pub activation: Activation,
}

/// Per-layer inputs recorded by [`Mlp::forward_cached`]; `inputs[l]` is
/// what layer `l` consumed, after the previous activation.
pub struct ForwardCache {
    inputs: Vec<Array2<f64>>,
}

impl Mlp {
    /// Glorot-uniform weights, zero biases. `sizes` lists every layer width
    /// including input and output.
    pub fn new<R: Rng + ?Sized>(sizes: &[usize], activation: Activation, rng: &mut R) -> Self {
        assert!(sizes.len() >= 2, "an MLP needs input and output sizes");
        let layers = sizes
            .windows(2)
            .map(|w| {
                let limit = (6.0 / (w[0] + w[1]) as f64).sqrt();
                Dense {
                    w: Array2::from_shape_fn((w[0], w[1]), |_| rng.random_range(-limit..limit)),
                    b: Array1::zeros(w[1]),
                }
            })
            .collect();
        Self { layers, activation }
    }

    /// Build from explicit layers, checking that shapes chain.
    pub fn from_layers(layers: Vec<Dense>, activation: Activation) -> Result<Self> {
        for w in layers.windows(2) {
            if w[0].w.ncols() != w[1].w.nrows() {
                return Err(SpareError::Format("layer shapes do not chain".into()));
            }
        }
        if layers.is_empty() {
            return Err(SpareError::Format("network has no layers".into()));
        }
        Ok(Self { layers, activation })
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].w.nrows()
    }

    pub fn output_dim(&self) -> usize {
        self.layers.last().unwrap().w.ncols()
    }

    pub fn n_params(&self) -> usize {
        self.layers.iter().map(|l| l.w.len() + l.b.len()).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.layers
            .iter()
            .all(|l| l.w.iter().chain(l.b.iter()).all(|v| v.is_finite()))
    }

    /// Batch forward pass; rows of `x` are samples.
    pub fn forward(&self, x: &Array2<f64>) -> Array2<f64> {
        let last = self.layers.len() - 1;
        let mut h = x.dot(&self.layers[0].w) + &self.layers[0].b;
        for (l, layer) in self.layers.iter().enumerate().skip(1) {
            let act = self.activation;
            h.mapv_inplace(|v| act.apply(v));
            h = h.dot(&layer.w) + &layer.b;
            debug_assert!(l <= last);
        }
        h
    }

    pub fn forward_cached(&self, x: &Array2<f64>) -> (Array2<f64>, ForwardCache) {
        let mut inputs = Vec::with_capacity(self.layers.len());
        let mut h = x.to_owned();
        for (l, layer) in self.layers.iter().enumerate() {
            let z = h.dot(&layer.w) + &layer.b;
            inputs.push(h);
            h = if l + 1 < self.layers.len() {
                let act = self.activation;
                z.mapv(|v| act.apply(v))
            } else {
                z
            };
        }
        (h, ForwardCache { inputs })
    }

    /// Gradients of `sum(d_out * output)` w.r.t. every layer, in layer order.
    pub fn backward(&self, cache: &ForwardCache, d_out: &Array2<f64>) -> Vec<Dense> {
        let mut grads = Vec::with_capacity(self.layers.len());
        let mut delta = d_out.to_owned();
        for l in (0..self.layers.len()).rev() {
            let input = &cache.inputs[l];
            let gw = input.t().dot(&delta);
            let gb = delta.sum_axis(Axis(0));
            if l > 0 {
                let mut d_in = delta.dot(&self.layers[l].w.t());
                let act = self.activation;
                ndarray::Zip::from(&mut d_in)
                    .and(input)
                    .for_each(|d, &a| *d *= act.grad_from_output(a));
                delta = d_in;
            }
            grads.push(Dense { w: gw, b: gb });
        }
        grads.reverse();
        grads
    }
}
