//! Fully connected networks over `(x, t)` with exact input derivatives.
//!
//! A batch evaluation carries three columns per point through every layer:
//! the activation value and its tangents along `x` and `t` (forward mode).
//! The reverse sweep in [`Tape::backward`] then differentiates any scalar
//! built from those three quantities w.r.t. all weights and biases, which
//! includes the mixed second-order path through the tangents.
//!
//! Flat parameter layout, layer by layer: the weight matrix in row-major
//! order (`out x in`) followed by the bias vector.

use ndarray::{s, Array1, Array2, ArrayView2, Axis};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Points per evaluation chunk. Fixed so that reductions are performed in the
/// same order whatever the thread count.
const CHUNK: usize = 256;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ActivationKind {
    HyperbolicTangent,
    Sigmoid,
    Linear,
}

impl ActivationKind {
    #[inline]
    pub fn apply(self, a: f64) -> f64 {
        match self {
            ActivationKind::HyperbolicTangent => a.tanh(),
            ActivationKind::Sigmoid => 1.0 / (1.0 + (-a).exp()),
            ActivationKind::Linear => a,
        }
    }

    /// First and second derivative, expressed through the activation output `y`.
    #[inline]
    pub fn derivatives_from_output(self, y: f64) -> (f64, f64) {
        match self {
            ActivationKind::HyperbolicTangent => {
                let d1 = 1.0 - y * y;
                (d1, -2.0 * y * d1)
            }
            ActivationKind::Sigmoid => {
                let d1 = y * (1.0 - y);
                (d1, d1 * (1.0 - 2.0 * y))
            }
            ActivationKind::Linear => (1.0, 0.0),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct NetworkSpec {
    pub input_dim: usize,
    pub hidden_layer_sizes: Vec<usize>,
    pub output_dim: usize,
    pub hidden_activation: ActivationKind,
    pub output_activation: ActivationKind,
}

impl NetworkSpec {
    /// Five tanh layers of twenty units over `(x, t)`, one output.
    pub fn standard(output_activation: ActivationKind) -> Self {
        NetworkSpec {
            input_dim: 2,
            hidden_layer_sizes: vec![20; 5],
            output_dim: 1,
            hidden_activation: ActivationKind::HyperbolicTangent,
            output_activation,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.input_dim != 2 {
            return Err(Error::config(
                "input_dim",
                format!(
                    "networks take (x, t) inputs, got input_dim = {}",
                    self.input_dim
                ),
            ));
        }
        if self.output_dim == 0 {
            return Err(Error::config("output_dim", "must be at least 1"));
        }
        if let Some(i) = self.hidden_layer_sizes.iter().position(|&w| w == 0) {
            return Err(Error::config(
                "hidden_layer_sizes",
                format!("hidden layer {i} has zero width"),
            ));
        }
        Ok(())
    }

    /// `(fan_in, fan_out)` of every affine layer, input to output.
    pub fn layer_shapes(&self) -> Vec<(usize, usize)> {
        let mut dims = Vec::with_capacity(self.hidden_layer_sizes.len() + 2);
        dims.push(self.input_dim);
        dims.extend_from_slice(&self.hidden_layer_sizes);
        dims.push(self.output_dim);
        dims.windows(2).map(|w| (w[0], w[1])).collect()
    }

    pub fn num_params(&self) -> usize {
        self.layer_shapes().iter().map(|&(i, o)| i * o + o).sum()
    }

    fn activation(&self, layer: usize, n_layers: usize) -> ActivationKind {
        if layer + 1 == n_layers {
            self.output_activation
        } else {
            self.hidden_activation
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Layer {
    /// `out x in`
    pub weights: Array2<f64>,
    pub bias: Array1<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct NetworkParams {
    spec: NetworkSpec,
    layers: Vec<Layer>,
}

/// Value and first input derivatives of one network output at one point.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct FieldSample {
    pub value: f64,
    pub d_dx: f64,
    pub d_dt: f64,
}

impl FieldSample {
    pub const ZERO: FieldSample = FieldSample {
        value: 0.0,
        d_dx: 0.0,
        d_dt: 0.0,
    };

    pub fn new(value: f64, d_dx: f64, d_dt: f64) -> Self {
        FieldSample { value, d_dx, d_dt }
    }

    pub fn is_finite(&self) -> bool {
        self.value.is_finite() && self.d_dx.is_finite() && self.d_dt.is_finite()
    }
}

/// Glorot-normal weights, zero biases.
pub fn init_network(spec: &NetworkSpec, seed: u64) -> Result<NetworkParams> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let layers = spec
        .layer_shapes()
        .into_iter()
        .map(|(fan_in, fan_out)| {
            let std = (2.0 / (fan_in + fan_out) as f64).sqrt();
            let normal = Normal::new(0.0, std).expect("positive std");
            Layer {
                weights: Array2::from_shape_simple_fn((fan_out, fan_in), || {
                    normal.sample(&mut rng)
                }),
                bias: Array1::zeros(fan_out),
            }
        })
        .collect();
    Ok(NetworkParams {
        spec: spec.clone(),
        layers,
    })
}

impl NetworkParams {
    pub fn zeros(spec: &NetworkSpec) -> Result<Self> {
        spec.validate()?;
        let layers = spec
            .layer_shapes()
            .into_iter()
            .map(|(i, o)| Layer {
                weights: Array2::zeros((o, i)),
                bias: Array1::zeros(o),
            })
            .collect();
        Ok(NetworkParams {
            spec: spec.clone(),
            layers,
        })
    }

    pub fn from_layers(spec: &NetworkSpec, layers: Vec<Layer>) -> Result<Self> {
        spec.validate()?;
        let shapes = spec.layer_shapes();
        if shapes.len() != layers.len() {
            return Err(Error::config(
                "layers",
                format!("expected {} layers, got {}", shapes.len(), layers.len()),
            ));
        }
        for (k, ((i, o), layer)) in shapes.iter().zip(&layers).enumerate() {
            if layer.weights.dim() != (*o, *i) || layer.bias.len() != *o {
                return Err(Error::config(
                    "layers",
                    format!("layer {k} does not match shape {o}x{i}"),
                ));
            }
        }
        Ok(NetworkParams {
            spec: spec.clone(),
            layers,
        })
    }

    pub fn from_flat(spec: &NetworkSpec, flat: &[f64]) -> Result<Self> {
        let mut net = NetworkParams::zeros(spec)?;
        if flat.len() != spec.num_params() {
            return Err(Error::config(
                "params",
                format!(
                    "expected {} parameters, got {}",
                    spec.num_params(),
                    flat.len()
                ),
            ));
        }
        net.set_flat(flat);
        Ok(net)
    }

    pub fn spec(&self) -> &NetworkSpec {
        &self.spec
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [Layer] {
        &mut self.layers
    }

    pub fn num_params(&self) -> usize {
        self.spec.num_params()
    }

    pub fn to_flat(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.num_params());
        for layer in &self.layers {
            out.extend(layer.weights.iter());
            out.extend(layer.bias.iter());
        }
        out
    }

    /// Overwrites all parameters from `flat`, whose length must be `num_params()`.
    pub fn set_flat(&mut self, flat: &[f64]) {
        assert_eq!(flat.len(), self.num_params(), "flat parameter length");
        let mut at = 0;
        for layer in &mut self.layers {
            for w in layer.weights.iter_mut() {
                *w = flat[at];
                at += 1;
            }
            for b in layer.bias.iter_mut() {
                *b = flat[at];
                at += 1;
            }
        }
    }

    pub fn all_finite(&self) -> bool {
        self.layers.iter().all(|l| {
            l.weights.iter().all(|v| v.is_finite()) && l.bias.iter().all(|v| v.is_finite())
        })
    }

    /// Network outputs at `(x, t)`.
    pub fn forward(&self, x: f64, t: f64) -> Vec<f64> {
        self.forward_with_input_derivatives(x, t)
            .into_iter()
            .map(|s| s.value)
            .collect()
    }

    /// Network outputs with their exact `x` and `t` derivatives.
    pub fn forward_with_input_derivatives(&self, x: f64, t: f64) -> Vec<FieldSample> {
        let chunk = ChunkTape::forward(self, &[(x, t)]);
        (0..self.spec.output_dim)
            .map(|o| chunk.sample(o, 0))
            .collect()
    }

    /// Evaluates the network on a batch of points, keeping what the reverse
    /// sweep needs.
    pub fn tape(&self, points: &[(f64, f64)]) -> Tape {
        let chunks = points
            .par_chunks(CHUNK)
            .map(|c| ChunkTape::forward(self, c))
            .collect();
        Tape {
            chunks,
            len: points.len(),
        }
    }

    /// Samples of the first output over a batch of points.
    pub fn samples(&self, points: &[(f64, f64)]) -> Vec<FieldSample> {
        self.tape(points).samples(0)
    }
}

/// Batched evaluation record for one network.
pub struct Tape {
    chunks: Vec<ChunkTape>,
    len: usize,
}

impl Tape {
    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn sample(&self, output: usize, point: usize) -> FieldSample {
        self.chunks[point / CHUNK].sample(output, point % CHUNK)
    }

    pub fn samples(&self, output: usize) -> Vec<FieldSample> {
        self.chunks
            .iter()
            .flat_map(|c| (0..c.n).map(move |j| c.sample(output, j)))
            .collect()
    }

    /// Accumulates into `grad` the parameter gradient of
    /// `sum_i adj_i . sample_i` for the first output, where `adjoints[i]`
    /// holds the partials of a scalar objective w.r.t. the value and input
    /// derivatives at point `i`.
    pub fn backward(&self, net: &NetworkParams, adjoints: &[FieldSample], grad: &mut [f64]) {
        assert_eq!(adjoints.len(), self.len, "one adjoint per point");
        assert_eq!(grad.len(), net.num_params(), "gradient length");
        if self.len == 0 {
            return;
        }
        let partials: Vec<Vec<f64>> = self
            .chunks
            .par_iter()
            .enumerate()
            .map(|(k, chunk)| {
                let adj = &adjoints[k * CHUNK..k * CHUNK + chunk.n];
                chunk.backward(net, adj)
            })
            .collect();
        for p in partials {
            for (g, v) in grad.iter_mut().zip(p) {
                *g += v;
            }
        }
    }
}

/// Forward record for at most `CHUNK` points. Every activation matrix has
/// `3n` columns: values, then `x` tangents, then `t` tangents.
struct ChunkTape {
    n: usize,
    /// acts[0] is the input block, acts[l + 1] the output of layer l.
    acts: Vec<Array2<f64>>,
    /// Pre-activations of every layer (only the tangent blocks are read back).
    pre: Vec<Array2<f64>>,
}

impl ChunkTape {
    fn forward(net: &NetworkParams, points: &[(f64, f64)]) -> ChunkTape {
        let n = points.len();
        let mut input = Array2::zeros((2, 3 * n));
        for (j, &(x, t)) in points.iter().enumerate() {
            input[[0, j]] = x;
            input[[1, j]] = t;
            input[[0, n + j]] = 1.0;
            input[[1, 2 * n + j]] = 1.0;
        }
        let n_layers = net.layers.len();
        let mut acts = Vec::with_capacity(n_layers + 1);
        let mut pre = Vec::with_capacity(n_layers);
        acts.push(input);
        for (l, layer) in net.layers.iter().enumerate() {
            let act = net.spec.activation(l, n_layers);
            let mut a = layer.weights.dot(&acts[l]);
            let out = a.nrows();
            let mut h = Array2::zeros((out, 3 * n));
            for r in 0..out {
                let b = layer.bias[r];
                let arow = a.row_mut(r).into_slice().expect("standard layout");
                let hrow = h.row_mut(r).into_slice().expect("standard layout");
                for j in 0..n {
                    arow[j] += b;
                    let y = act.apply(arow[j]);
                    let (d1, _) = act.derivatives_from_output(y);
                    hrow[j] = y;
                    hrow[n + j] = d1 * arow[n + j];
                    hrow[2 * n + j] = d1 * arow[2 * n + j];
                }
            }
            pre.push(a);
            acts.push(h);
        }
        ChunkTape { n, acts, pre }
    }

    fn sample(&self, output: usize, j: usize) -> FieldSample {
        let out = self.acts.last().expect("at least one layer");
        FieldSample {
            value: out[[output, j]],
            d_dx: out[[output, self.n + j]],
            d_dt: out[[output, 2 * self.n + j]],
        }
    }

    fn backward(&self, net: &NetworkParams, adjoints: &[FieldSample]) -> Vec<f64> {
        let n = self.n;
        let n_layers = net.layers.len();
        let out_dim = net.spec.output_dim;
        let mut g = Array2::zeros((out_dim, 3 * n));
        for (j, adj) in adjoints.iter().enumerate() {
            g[[0, j]] = adj.value;
            g[[0, n + j]] = adj.d_dx;
            g[[0, 2 * n + j]] = adj.d_dt;
        }

        // Gradients are produced back to front, then laid out front to back.
        let mut per_layer: Vec<(Array2<f64>, Array1<f64>)> = Vec::with_capacity(n_layers);
        for l in (0..n_layers).rev() {
            let act = net.spec.activation(l, n_layers);
            let h = &self.acts[l + 1];
            let a = &self.pre[l];
            let rows = h.nrows();
            let mut ga = Array2::zeros((rows, 3 * n));
            for r in 0..rows {
                let hrow = h.row(r);
                let hrow = hrow.as_slice().expect("standard layout");
                let arow = a.row(r);
                let arow = arow.as_slice().expect("standard layout");
                let grow = g.row(r);
                let grow = grow.as_slice().expect("standard layout");
                let garow = ga.row_mut(r).into_slice().expect("standard layout");
                for j in 0..n {
                    let (d1, d2) = act.derivatives_from_output(hrow[j]);
                    let gx = grow[n + j];
                    let gt = grow[2 * n + j];
                    garow[j] = grow[j] * d1 + (gx * arow[n + j] + gt * arow[2 * n + j]) * d2;
                    garow[n + j] = gx * d1;
                    garow[2 * n + j] = gt * d1;
                }
            }
            let input: ArrayView2<f64> = self.acts[l].view();
            let gw = ga.dot(&input.t());
            let gb = ga.slice(s![.., ..n]).sum_axis(Axis(1));
            if l > 0 {
                g = net.layers[l].weights.t().dot(&ga);
            }
            per_layer.push((gw, gb));
        }

        let mut flat = Vec::with_capacity(net.num_params());
        for (gw, gb) in per_layer.into_iter().rev() {
            flat.extend(gw.iter());
            flat.extend(gb.iter());
        }
        flat
    }
}

/// Gradient of `sum_i local(i, samples_i)` w.r.t. the concatenated
/// parameters of several single-output networks evaluated on the same points.
///
/// `local` receives the samples of every network at point `i` and returns
/// the point's contribution together with its partials w.r.t. each sample.
pub fn objective_gradient<F>(
    specs: &[NetworkSpec],
    params_all: &[f64],
    points: &[(f64, f64)],
    local: F,
) -> Result<(f64, Vec<f64>)>
where
    F: Fn(usize, &[FieldSample]) -> (f64, Vec<FieldSample>),
{
    let total: usize = specs.iter().map(NetworkSpec::num_params).sum();
    if params_all.len() != total {
        return Err(Error::config(
            "params_all",
            format!("expected {total} parameters, got {}", params_all.len()),
        ));
    }
    let mut nets = Vec::with_capacity(specs.len());
    let mut at = 0;
    for spec in specs {
        let np = spec.num_params();
        nets.push(NetworkParams::from_flat(spec, &params_all[at..at + np])?);
        at += np;
    }
    let tapes: Vec<Tape> = nets.iter().map(|n| n.tape(points)).collect();

    let mut value = 0.0;
    let mut adjoints = vec![Vec::with_capacity(points.len()); nets.len()];
    let mut samples = Vec::with_capacity(nets.len());
    for i in 0..points.len() {
        samples.clear();
        samples.extend(tapes.iter().map(|tp| tp.sample(0, i)));
        let (v, partials) = local(i, &samples);
        value += v;
        for (k, p) in partials.into_iter().enumerate().take(nets.len()) {
            adjoints[k].push(p);
        }
    }
    if !value.is_finite() {
        return Err(Error::Numerical(format!(
            "objective is {value} over {} points",
            points.len()
        )));
    }
    if points.is_empty() {
        return Ok((value, vec![0.0; total]));
    }

    let mut grad = vec![0.0; total];
    let mut at = 0;
    for ((net, tape), adj) in nets.iter().zip(&tapes).zip(&adjoints) {
        let np = net.num_params();
        tape.backward(net, adj, &mut grad[at..at + np]);
        at += np;
    }
    Ok((value, grad))
}
