use rand::Rng;

use crate::{seeded_rng, Error, Result};

/// Shape of the velocity-field MLP.
///
/// The network input is `[x, c, t]`: the data vector, the condition vector
/// and the raw time scalar. Hidden layers use tanh; the output layer is
/// linear and has the data dimension.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MlpSpec {
    pub data_dim: usize,
    pub cond_dim: usize,
    pub hidden: Vec<usize>,
}

impl MlpSpec {
    pub fn new(data_dim: usize, cond_dim: usize, hidden: Vec<usize>) -> Result<Self> {
        let spec = MlpSpec {
            data_dim,
            cond_dim,
            hidden,
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        if self.data_dim == 0 {
            return Err(Error::Config("data dimension must be at least 1".into()));
        }
        if self.hidden.is_empty() {
            return Err(Error::Config(
                "at least one hidden layer is required".into(),
            ));
        }
        if self.hidden.contains(&0) {
            return Err(Error::Config("hidden layer widths must be positive".into()));
        }
        Ok(())
    }

    pub fn input_dim(&self) -> usize {
        self.data_dim + self.cond_dim + 1
    }

    pub fn output_dim(&self) -> usize {
        self.data_dim
    }

    /// Weight shapes as `(rows, cols) = (fan_out, fan_in)`, input layer first.
    pub fn layer_shapes(&self) -> Vec<(usize, usize)> {
        let mut widths = Vec::with_capacity(self.hidden.len() + 2);
        widths.push(self.input_dim());
        widths.extend_from_slice(&self.hidden);
        widths.push(self.output_dim());
        widths.windows(2).map(|w| (w[1], w[0])).collect()
    }

    pub fn param_count(&self) -> usize {
        self.layer_shapes().iter().map(|&(r, c)| r * c + r).sum()
    }
}

/// Flat parameter storage: every weight matrix (row-major, input layer
/// first) followed by every bias vector.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamVector {
    pub values: Vec<f64>,
    pub layout: Vec<(usize, usize)>,
}

impl ParamVector {
    pub fn zeros(layout: Vec<(usize, usize)>) -> Self {
        let n = layout.iter().map(|&(r, c)| r * c + r).sum();
        ParamVector {
            values: vec![0.0; n],
            layout,
        }
    }

    pub fn from_values(values: Vec<f64>, layout: Vec<(usize, usize)>) -> Result<Self> {
        let p = ParamVector { values, layout };
        p.validate()?;
        Ok(p)
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn validate(&self) -> Result<()> {
        let expected: usize = self.layout.iter().map(|&(r, c)| r * c + r).sum();
        if expected != self.values.len() {
            return Err(Error::shape(
                "parameter vector",
                expected,
                self.values.len(),
            ));
        }
        if !self.values.iter().all(|v| v.is_finite()) {
            return Err(Error::overflow("parameter vector"));
        }
        Ok(())
    }

    fn weight_count(&self) -> usize {
        self.layout.iter().map(|&(r, c)| r * c).sum()
    }

    pub fn weight_offset(&self, layer: usize) -> usize {
        self.layout[..layer].iter().map(|&(r, c)| r * c).sum()
    }

    pub fn bias_offset(&self, layer: usize) -> usize {
        self.weight_count() + self.layout[..layer].iter().map(|&(r, _)| r).sum::<usize>()
    }

    pub fn weights(&self, layer: usize) -> &[f64] {
        let (r, c) = self.layout[layer];
        let off = self.weight_offset(layer);
        &self.values[off..off + r * c]
    }

    pub fn bias(&self, layer: usize) -> &[f64] {
        let (r, _) = self.layout[layer];
        let off = self.bias_offset(layer);
        &self.values[off..off + r]
    }

    pub fn norm(&self) -> f64 {
        super::norm(&self.values)
    }
}

/// Glorot-uniform weights, zero biases, drawn from the seeded stream.
pub fn mlp_init(spec: &MlpSpec, seed: u64) -> Result<ParamVector> {
    spec.validate()?;
    let mut rng = seeded_rng(seed);
    let mut params = ParamVector::zeros(spec.layer_shapes());
    let mut off = 0;
    for &(rows, cols) in &params.layout.clone() {
        let limit = (6.0 / (rows + cols) as f64).sqrt();
        for w in &mut params.values[off..off + rows * cols] {
            *w = rng.random_range(-limit..limit);
        }
        off += rows * cols;
    }
    Ok(params)
}

/// A velocity field `v(x, t, c)` over data vectors.
pub trait VelocityField {
    fn data_dim(&self) -> usize;
    fn velocity(&self, x: &[f64], t: f64, c: &[f64]) -> Result<Vec<f64>>;
}

/// Layer activations kept from a forward pass for backprop.
///
/// `activations[0]` is the network input, `activations[l]` the tanh output
/// of hidden layer `l`, and the last entry is the linear output.
#[derive(Debug, Clone)]
pub struct ForwardCache {
    pub activations: Vec<Vec<f64>>,
}

impl ForwardCache {
    pub fn output(&self) -> &[f64] {
        self.activations
            .last()
            .expect("cache always holds the input")
    }

    pub fn into_output(mut self) -> Vec<f64> {
        self.activations.pop().unwrap_or_default()
    }
}

/// An MLP velocity field: a spec paired with matching parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    pub spec: MlpSpec,
    pub params: ParamVector,
}

impl Model {
    pub fn new(spec: MlpSpec, params: ParamVector) -> Result<Self> {
        spec.validate()?;
        let shapes = spec.layer_shapes();
        if params.layout != shapes {
            return Err(Error::shape(
                "parameter layout",
                spec.param_count(),
                params.len(),
            ));
        }
        params.validate()?;
        Ok(Model { spec, params })
    }

    pub fn init(spec: MlpSpec, seed: u64) -> Result<Self> {
        let params = mlp_init(&spec, seed)?;
        Ok(Model { spec, params })
    }

    /// Same architecture, different parameters. Layout is checked.
    pub fn with_params(&self, params: ParamVector) -> Result<Self> {
        Model::new(self.spec.clone(), params)
    }

    pub fn forward_cached(&self, x: &[f64], t: f64, c: &[f64]) -> Result<ForwardCache> {
        forward_cached(&self.spec, &self.params, x, t, c)
    }

    /// Accumulates `dL/dparams` into `grad` given `dL/doutput`.
    pub fn backward(&self, cache: &ForwardCache, grad_out: &[f64], grad: &mut [f64]) {
        backward(&self.params, cache, grad_out, grad);
    }
}

impl VelocityField for Model {
    fn data_dim(&self) -> usize {
        self.spec.data_dim
    }

    fn velocity(&self, x: &[f64], t: f64, c: &[f64]) -> Result<Vec<f64>> {
        Ok(self.forward_cached(x, t, c)?.into_output())
    }
}

/// Evaluates `v_θ(x, t, c)`.
pub fn mlp_forward(
    params: &ParamVector,
    spec: &MlpSpec,
    x: &[f64],
    t: f64,
    c: &[f64],
) -> Result<Vec<f64>> {
    if params.layout != spec.layer_shapes() {
        return Err(Error::shape(
            "parameter layout",
            spec.param_count(),
            params.len(),
        ));
    }
    Ok(forward_cached(spec, params, x, t, c)?.into_output())
}

fn forward_cached(
    spec: &MlpSpec,
    params: &ParamVector,
    x: &[f64],
    t: f64,
    c: &[f64],
) -> Result<ForwardCache> {
    if x.len() != spec.data_dim {
        return Err(Error::shape("model input x", spec.data_dim, x.len()));
    }
    if c.len() != spec.cond_dim {
        return Err(Error::shape("model condition c", spec.cond_dim, c.len()));
    }
    let mut input = Vec::with_capacity(spec.input_dim());
    input.extend_from_slice(x);
    input.extend_from_slice(c);
    input.push(t);

    let n_layers = params.layout.len();
    let mut activations = Vec::with_capacity(n_layers + 1);
    activations.push(input);
    for layer in 0..n_layers {
        let (rows, cols) = params.layout[layer];
        let w = params.weights(layer);
        let b = params.bias(layer);
        let prev = &activations[layer];
        let mut out = Vec::with_capacity(rows);
        for r in 0..rows {
            let row = &w[r * cols..(r + 1) * cols];
            let mut z = b[r];
            for (wi, ai) in row.iter().zip(prev) {
                z += wi * ai;
            }
            out.push(if layer + 1 < n_layers { z.tanh() } else { z });
        }
        activations.push(out);
    }
    Ok(ForwardCache { activations })
}

fn backward(params: &ParamVector, cache: &ForwardCache, grad_out: &[f64], grad: &mut [f64]) {
    let n_layers = params.layout.len();
    let mut delta = grad_out.to_vec();
    for layer in (0..n_layers).rev() {
        let (rows, cols) = params.layout[layer];
        let prev = &cache.activations[layer];
        let w_off = params.weight_offset(layer);
        let b_off = params.bias_offset(layer);
        for r in 0..rows {
            let d = delta[r];
            grad[b_off + r] += d;
            let g_row = &mut grad[w_off + r * cols..w_off + (r + 1) * cols];
            for (g, a) in g_row.iter_mut().zip(prev) {
                *g += d * a;
            }
        }
        if layer == 0 {
            break;
        }
        let w = params.weights(layer);
        let mut next = vec![0.0; cols];
        for r in 0..rows {
            let d = delta[r];
            for (n, wi) in next.iter_mut().zip(&w[r * cols..(r + 1) * cols]) {
                *n += d * wi;
            }
        }
        // tanh' = 1 - tanh²
        for (n, a) in next.iter_mut().zip(prev) {
            *n *= 1.0 - a * a;
        }
        delta = next;
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn spec() -> MlpSpec {
        MlpSpec::new(2, 1, vec![8]).unwrap()
    }

    #[test]
    fn init_zero_biases() {
        let s = spec();
        let p = mlp_init(&s, 7).unwrap();
        for l in 0..p.layout.len() {
            assert!(p.bias(l).iter().all(|&b| b == 0.0));
        }
        assert_eq!(p.len(), s.param_count());
    }

    #[test]
    fn init_deterministic_and_seed_sensitive() {
        let s = spec();
        let a = mlp_init(&s, 1).unwrap();
        let b = mlp_init(&s, 1).unwrap();
        let c = mlp_init(&s, 2).unwrap();
        assert_eq!(a.values, b.values);
        assert!(a.values.iter().zip(&c.values).any(|(x, y)| x != y));
    }

    #[test]
    fn init_respects_glorot_bound() {
        let s = spec();
        let p = mlp_init(&s, 3).unwrap();
        for (l, &(r, c)) in p.layout.iter().enumerate() {
            let lim = (6.0 / (r + c) as f64).sqrt();
            assert!(p.weights(l).iter().all(|w| w.abs() <= lim));
        }
    }

    #[test]
    fn invalid_spec_rejected() {
        assert!(matches!(MlpSpec::new(0, 1, vec![4]), Err(Error::Config(_))));
        assert!(matches!(MlpSpec::new(2, 1, vec![]), Err(Error::Config(_))));
        assert!(matches!(
            MlpSpec::new(2, 1, vec![4, 0]),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn zero_params_give_zero_output() {
        let s = spec();
        let p = ParamVector::zeros(s.layer_shapes());
        let v = mlp_forward(&p, &s, &[0.3, -1.2], 0.4, &[1.0]).unwrap();
        assert_eq!(v, vec![0.0, 0.0]);
    }

    #[test]
    fn forward_is_pure() {
        let s = spec();
        let p = mlp_init(&s, 11).unwrap();
        let a = mlp_forward(&p, &s, &[0.3, -1.2], 0.4, &[1.0]).unwrap();
        let b = mlp_forward(&p, &s, &[0.3, -1.2], 0.4, &[1.0]).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn forward_matches_independent_evaluator() {
        // Second evaluator: explicit nested loops over the layer shapes,
        // indexing the flat vector by hand.
        let s = MlpSpec::new(3, 2, vec![5, 4]).unwrap();
        let p = mlp_init(&s, 5).unwrap();
        let x = [0.1, -0.7, 2.0];
        let c = [0.0, 1.0];
        let t = 0.65;
        let input = [x[0], x[1], x[2], c[0], c[1], t];
        let widths = [6usize, 5, 4, 3];
        let n_w: usize = widths.windows(2).map(|w| w[0] * w[1]).sum();
        let mut a: Vec<f64> = input.to_vec();
        let mut w_off = 0;
        let mut b_off = n_w;
        for l in 0..3 {
            let (fan_in, fan_out) = (widths[l], widths[l + 1]);
            let mut z = vec![0.0; fan_out];
            for o in 0..fan_out {
                z[o] = p.values[b_off + o];
                for i in 0..fan_in {
                    z[o] += p.values[w_off + o * fan_in + i] * a[i];
                }
            }
            if l < 2 {
                z.iter_mut().for_each(|v| *v = v.tanh());
            }
            w_off += fan_in * fan_out;
            b_off += fan_out;
            a = z;
        }
        let got = mlp_forward(&p, &s, &x, t, &c).unwrap();
        for (g, e) in got.iter().zip(&a) {
            assert!((g - e).abs() < 1e-14);
        }
    }

    #[test]
    fn dimension_mismatch_is_shape_error() {
        let s = spec();
        let p = mlp_init(&s, 1).unwrap();
        assert!(matches!(
            mlp_forward(&p, &s, &[0.0], 0.0, &[1.0]),
            Err(Error::Shape { .. })
        ));
        assert!(matches!(
            mlp_forward(&p, &s, &[0.0, 0.0], 0.0, &[1.0, 0.0]),
            Err(Error::Shape { .. })
        ));
    }
}
