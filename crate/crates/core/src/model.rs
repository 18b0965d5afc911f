//! Multilayer perceptron with ReLU hidden layers and hand-derived gradients.
//!
//! Parameters live in one flat buffer in canonical order: layer 0 weights
//! (row-major, `outputs × inputs`), layer 0 biases, layer 1 weights, and so
//! on. Aggregation and distances operate directly on that buffer.

use std::io::{Read, Write};

use rand::Rng;
use rand_distr::{Distribution, Uniform};

use crate::error::{invalid, Error, Result};
use crate::numerics::SeedSpec;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ArchSpec {
    pub input_dim: usize,
    pub hidden_dims: Vec<usize>,
    pub output_dim: usize,
}

impl ArchSpec {
    pub fn new(input_dim: usize, hidden_dims: Vec<usize>, output_dim: usize) -> Self {
        Self {
            input_dim,
            hidden_dims,
            output_dim,
        }
    }

    /// `(inputs, outputs)` per linear layer.
    pub fn layer_shapes(&self) -> Result<Vec<(usize, usize)>> {
        let mut dims = Vec::with_capacity(self.hidden_dims.len() + 2);
        dims.push(self.input_dim);
        dims.extend_from_slice(&self.hidden_dims);
        dims.push(self.output_dim);
        if dims.contains(&0) {
            return Err(invalid(format!("architecture has a zero-width layer: {dims:?}")));
        }
        Ok(dims.windows(2).map(|w| (w[0], w[1])).collect())
    }
}

/// Flat parameter buffer plus the layer shapes that index it.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelParams {
    shapes: Vec<(usize, usize)>,
    data: Vec<f64>,
}

fn param_count(shapes: &[(usize, usize)]) -> usize {
    shapes.iter().map(|(i, o)| i * o + o).sum()
}

impl ModelParams {
    pub fn zeros(shapes: Vec<(usize, usize)>) -> Self {
        let n = param_count(&shapes);
        Self {
            shapes,
            data: vec![0.0; n],
        }
    }

    pub fn zeros_like(other: &ModelParams) -> Self {
        Self::zeros(other.shapes.clone())
    }

    pub fn unflatten(shapes: Vec<(usize, usize)>, data: Vec<f64>) -> Result<Self> {
        let expected = param_count(&shapes);
        if data.len() != expected {
            return Err(invalid(format!(
                "flat buffer has {} values, shapes need {expected}",
                data.len()
            )));
        }
        Ok(Self { shapes, data })
    }

    pub fn flatten(&self) -> Vec<f64> {
        self.data.clone()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn shapes(&self) -> &[(usize, usize)] {
        &self.shapes
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn same_shape(&self, other: &ModelParams) -> bool {
        self.shapes == other.shapes
    }

    pub fn input_dim(&self) -> usize {
        self.shapes.first().map_or(0, |s| s.0)
    }

    pub fn output_dim(&self) -> usize {
        self.shapes.last().map_or(0, |s| s.1)
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// `(weights, biases)` for layer `l`.
    pub fn layer(&self, l: usize) -> (&[f64], &[f64]) {
        let (start, (i, o)) = self.layer_offset(l);
        let w = &self.data[start..start + i * o];
        let b = &self.data[start + i * o..start + i * o + o];
        (w, b)
    }

    fn layer_mut(&mut self, l: usize) -> (&mut [f64], &mut [f64]) {
        let (start, (i, o)) = self.layer_offset(l);
        let (w, rest) = self.data[start..start + i * o + o].split_at_mut(i * o);
        (w, rest)
    }

    fn layer_offset(&self, l: usize) -> (usize, (usize, usize)) {
        let start = param_count(&self.shapes[..l]);
        (start, self.shapes[l])
    }

    /// `self += scale * other`.
    pub fn add_scaled(&mut self, other: &ModelParams, scale: f64) {
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += scale * b;
        }
    }

    /// Checkpoint record: `FEDM`, `u32` layer count, `(u32 inputs, u32
    /// outputs)` per layer, then every parameter as little-endian `f64`.
    pub fn write_binary<W: Write>(&self, mut w: W) -> Result<()> {
        w.write_all(b"FEDM")?;
        w.write_all(&(self.shapes.len() as u32).to_le_bytes())?;
        for (i, o) in &self.shapes {
            w.write_all(&(*i as u32).to_le_bytes())?;
            w.write_all(&(*o as u32).to_le_bytes())?;
        }
        for v in &self.data {
            w.write_all(&v.to_le_bytes())?;
        }
        Ok(())
    }

    pub fn read_binary<R: Read>(mut r: R) -> Result<Self> {
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic)?;
        if &magic != b"FEDM" {
            return Err(invalid("not a model checkpoint (bad magic)"));
        }
        let read_u32 = |r: &mut R| -> Result<usize> {
            let mut b = [0u8; 4];
            r.read_exact(&mut b)?;
            Ok(u32::from_le_bytes(b) as usize)
        };
        let layers = read_u32(&mut r)?;
        let mut shapes = Vec::with_capacity(layers);
        for _ in 0..layers {
            let i = read_u32(&mut r)?;
            let o = read_u32(&mut r)?;
            shapes.push((i, o));
        }
        let n = param_count(&shapes);
        let mut data = Vec::with_capacity(n);
        let mut b = [0u8; 8];
        for _ in 0..n {
            r.read_exact(&mut b)?;
            data.push(f64::from_le_bytes(b));
        }
        Ok(Self { shapes, data })
    }
}

/// Fan-in scaled uniform init, `U(-√(6/fan_in), √(6/fan_in))`, zero biases.
pub fn init_params(arch: &ArchSpec, seed: SeedSpec) -> Result<ModelParams> {
    let shapes = arch.layer_shapes()?;
    let mut params = ModelParams::zeros(shapes.clone());
    let mut rng = seed.rng();
    for (l, (fan_in, _)) in shapes.iter().enumerate() {
        let bound = (6.0 / *fan_in as f64).sqrt();
        let dist = Uniform::new_inclusive(-bound, bound).expect("finite bound");
        let (w, _) = params.layer_mut(l);
        for v in w.iter_mut() {
            *v = dist.sample(&mut rng);
        }
    }
    Ok(params)
}

/// Activations kept from a forward pass.
#[derive(Clone, Debug)]
pub struct ForwardCache {
    shapes: Vec<(usize, usize)>,
    /// Input to each layer (post-ReLU for hidden layers).
    inputs: Vec<Vec<f64>>,
}

pub fn forward(params: &ModelParams, x: &[f64]) -> Result<(Vec<f64>, ForwardCache)> {
    if x.len() != params.input_dim() {
        return Err(invalid(format!(
            "feature vector has {} entries, model expects {}",
            x.len(),
            params.input_dim()
        )));
    }
    let n_layers = params.shapes.len();
    let mut inputs = Vec::with_capacity(n_layers);
    let mut act = x.to_vec();
    for l in 0..n_layers {
        let mut out = affine(params, l, &act);
        if l + 1 < n_layers {
            for v in out.iter_mut() {
                *v = v.max(0.0);
            }
        }
        inputs.push(std::mem::replace(&mut act, out));
    }
    Ok((
        act,
        ForwardCache {
            shapes: params.shapes.clone(),
            inputs,
        },
    ))
}

/// Forward pass without keeping activations.
pub fn predict_logits(params: &ModelParams, x: &[f64]) -> Result<Vec<f64>> {
    if x.len() != params.input_dim() {
        return Err(invalid(format!(
            "feature vector has {} entries, model expects {}",
            x.len(),
            params.input_dim()
        )));
    }
    let n_layers = params.shapes.len();
    let mut act = x.to_vec();
    for l in 0..n_layers {
        act = affine(params, l, &act);
        if l + 1 < n_layers {
            for v in act.iter_mut() {
                *v = v.max(0.0);
            }
        }
    }
    Ok(act)
}

fn affine(params: &ModelParams, l: usize, input: &[f64]) -> Vec<f64> {
    let (w, b) = params.layer(l);
    let n_in = input.len();
    b.iter()
        .enumerate()
        .map(|(o, bias)| {
            let row = &w[o * n_in..(o + 1) * n_in];
            bias + row.iter().zip(input).map(|(a, x)| a * x).sum::<f64>()
        })
        .collect()
}

/// Gradient of a loss wrt every parameter, given `dL/dlogits`.
pub fn backward(params: &ModelParams, cache: &ForwardCache, dlogits: &[f64]) -> Result<ModelParams> {
    let mut grad = ModelParams::zeros_like(params);
    backward_accumulate(params, cache, dlogits, 1.0, &mut grad)?;
    Ok(grad)
}

/// Adds `scale · ∂L/∂θ` into `grad`.
pub fn backward_accumulate(
    params: &ModelParams,
    cache: &ForwardCache,
    dlogits: &[f64],
    scale: f64,
    grad: &mut ModelParams,
) -> Result<()> {
    if cache.shapes != params.shapes || cache.inputs.len() != params.shapes.len() {
        return Err(Error::Contract(
            "forward cache does not belong to these parameters".into(),
        ));
    }
    if !grad.same_shape(params) {
        return Err(invalid("gradient buffer shape mismatch"));
    }
    if dlogits.len() != params.output_dim() {
        return Err(invalid(format!(
            "dL/dlogits has {} entries, model has {} outputs",
            dlogits.len(),
            params.output_dim()
        )));
    }
    let mut delta: Vec<f64> = dlogits.iter().map(|d| d * scale).collect();
    for l in (0..params.shapes.len()).rev() {
        let input = &cache.inputs[l];
        let n_in = input.len();
        {
            let (gw, gb) = grad.layer_mut(l);
            for (o, d) in delta.iter().enumerate() {
                if *d == 0.0 {
                    continue;
                }
                gb[o] += d;
                for (g, x) in gw[o * n_in..(o + 1) * n_in].iter_mut().zip(input) {
                    *g += d * x;
                }
            }
        }
        if l == 0 {
            break;
        }
        let (w, _) = params.layer(l);
        let mut prev = vec![0.0; n_in];
        for (o, d) in delta.iter().enumerate() {
            if *d == 0.0 {
                continue;
            }
            for (p, wv) in prev.iter_mut().zip(&w[o * n_in..(o + 1) * n_in]) {
                *p += d * wv;
            }
        }
        // ReLU mask: the cached input is post-activation, zero where inactive.
        for (p, a) in prev.iter_mut().zip(input) {
            if *a <= 0.0 {
                *p = 0.0;
            }
        }
        delta = prev;
    }
    Ok(())
}

/// SGD with heavy-ball momentum and L2 weight decay.
#[derive(Clone, Debug)]
pub struct OptimizerState {
    pub buffer: Vec<f64>,
    pub learning_rate: f64,
    pub momentum: f64,
    pub weight_decay: f64,
}

impl OptimizerState {
    pub fn new(params: &ModelParams, learning_rate: f64, momentum: f64, weight_decay: f64) -> Self {
        Self {
            buffer: vec![0.0; params.len()],
            learning_rate,
            momentum,
            weight_decay,
        }
    }
}

/// `buf ← μ·buf + g + λ·θ; θ ← θ − lr·buf`.
pub fn sgd_step(params: &mut ModelParams, grad: &ModelParams, opt: &mut OptimizerState) -> Result<()> {
    if !params.same_shape(grad) || opt.buffer.len() != params.len() {
        return Err(invalid("sgd_step shape mismatch"));
    }
    if !grad.is_finite() {
        return Err(Error::Divergence("non-finite gradient in SGD step".into()));
    }
    for ((theta, g), buf) in params
        .data
        .iter_mut()
        .zip(&grad.data)
        .zip(opt.buffer.iter_mut())
    {
        *buf = opt.momentum * *buf + g + opt.weight_decay * *theta;
        *theta -= opt.learning_rate * *buf;
    }
    Ok(())
}

/// Euclidean distance between two flattened parameter sets.
pub fn l2_distance(a: &ModelParams, b: &ModelParams) -> Result<f64> {
    if !a.same_shape(b) {
        return Err(invalid("l2_distance between differently shaped models"));
    }
    Ok(squared_distance(&a.data, &b.data).sqrt())
}

pub(crate) fn squared_distance(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Uniform random parameters, mostly for tests and gradient checks.
pub fn random_params<R: Rng>(shapes: Vec<(usize, usize)>, scale: f64, rng: &mut R) -> ModelParams {
    let mut p = ModelParams::zeros(shapes);
    for v in p.data.iter_mut() {
        *v = rng.random_range(-scale..scale);
    }
    p
}
