//! Dense layers with hand-written reverse-mode derivatives.
//!
//! Weights act on row vectors: a batch `X` (rows = instances) maps to
//! `X·W + b` with `W` stored `in × out`.

use crate::error::{shape_err, Result};
use crate::matrix::DenseMatrix;
use crate::rng::Rng;

/// Visitor over named parameter tensors. Gradients share the parameter type.
pub trait Params: Clone {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(String, (usize, usize), &[f64]));
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, (usize, usize), &mut [f64]));

    fn zeros_like(&self) -> Self {
        let mut z = self.clone();
        z.visit_mut("", &mut |_, _, d| d.fill(0.0));
        z
    }

    fn num_params(&self) -> usize {
        let mut n = 0;
        self.visit("", &mut |_, _, d| n += d.len());
        n
    }

    fn max_abs(&self) -> f64 {
        let mut m = 0.0f64;
        self.visit("", &mut |_, _, d| {
            for v in d {
                m = m.max(v.abs());
            }
        });
        m
    }
}

pub(crate) fn join(prefix: &str, name: &str) -> String {
    if prefix.is_empty() {
        name.to_string()
    } else {
        format!("{prefix}.{name}")
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    #[default]
    Relu,
    Identity,
}

impl Activation {
    pub fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Relu => x.max(0.0),
            Activation::Identity => x,
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
            Activation::Identity => 1.0,
        }
    }

    pub fn forward(self, x: &DenseMatrix) -> DenseMatrix {
        x.map(|v| self.apply(v))
    }

    /// `dy ⊙ σ'(pre)`.
    pub fn backward(self, pre: &DenseMatrix, dy: &DenseMatrix) -> Result<DenseMatrix> {
        pre.zip_map(dy, |p, g| g * self.derivative(p))
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Uniform(-1/√fan_in, 1/√fan_in) matrix.
pub fn init_uniform(rng: &mut Rng, fan_in: usize, rows: usize, cols: usize) -> DenseMatrix {
    let bound = 1.0 / (fan_in.max(1) as f64).sqrt();
    DenseMatrix::from_fn(rows, cols, |_, _| rng.uniform_in(-bound, bound))
}

#[derive(Debug, Clone, PartialEq)]
pub struct Linear {
    pub weight: DenseMatrix,
    pub bias: Option<Vec<f64>>,
}

impl Linear {
    pub fn new(rng: &mut Rng, input: usize, output: usize, bias: bool) -> Self {
        let weight = init_uniform(rng, input, input, output);
        let bias = bias.then(|| {
            let bound = 1.0 / (input.max(1) as f64).sqrt();
            (0..output).map(|_| rng.uniform_in(-bound, bound)).collect()
        });
        Self { weight, bias }
    }

    pub fn zeros(input: usize, output: usize, bias: bool) -> Self {
        Self {
            weight: DenseMatrix::zeros(input, output),
            bias: bias.then(|| vec![0.0; output]),
        }
    }

    pub fn input_dim(&self) -> usize {
        self.weight.rows()
    }

    pub fn output_dim(&self) -> usize {
        self.weight.cols()
    }

    pub fn forward(&self, x: &DenseMatrix) -> Result<DenseMatrix> {
        let mut y = x.matmul(&self.weight)?;
        if let Some(b) = &self.bias {
            y.add_row_vector(b)?;
        }
        Ok(y)
    }

    /// Accumulates weight/bias gradients into `grad` and returns `dx`.
    pub fn backward(&self, x: &DenseMatrix, dy: &DenseMatrix, grad: &mut Linear) -> Result<DenseMatrix> {
        grad.weight.add_assign(&x.t_matmul(dy)?)?;
        if let (Some(gb), true) = (grad.bias.as_mut(), self.bias.is_some()) {
            for (g, s) in gb.iter_mut().zip(dy.col_sums()) {
                *g += s;
            }
        }
        dy.matmul_t(&self.weight)
    }
}

impl Params for Linear {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(String, (usize, usize), &[f64])) {
        f(join(prefix, "weight"), self.weight.shape(), self.weight.data());
        if let Some(b) = &self.bias {
            f(join(prefix, "bias"), (1, b.len()), b);
        }
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, (usize, usize), &mut [f64])) {
        let shape = self.weight.shape();
        f(join(prefix, "weight"), shape, self.weight.data_mut());
        if let Some(b) = &mut self.bias {
            let n = b.len();
            f(join(prefix, "bias"), (1, n), b);
        }
    }
}

/// Per-row layer normalization with learnable gain and bias.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerNorm {
    pub gain: Vec<f64>,
    pub bias: Vec<f64>,
    pub eps: f64,
}

#[derive(Debug, Clone)]
pub struct LayerNormCache {
    normalized: DenseMatrix,
    inv_std: Vec<f64>,
}

impl LayerNorm {
    pub fn new(dim: usize) -> Self {
        Self {
            gain: vec![1.0; dim],
            bias: vec![0.0; dim],
            eps: 1e-5,
        }
    }

    pub fn forward(&self, x: &DenseMatrix) -> Result<(DenseMatrix, LayerNormCache)> {
        let d = x.cols();
        if d != self.gain.len() {
            return Err(shape_err("LayerNorm", self.gain.len(), d));
        }
        let mut normalized = DenseMatrix::zeros(x.rows(), d);
        let mut y = DenseMatrix::zeros(x.rows(), d);
        let mut inv_std = Vec::with_capacity(x.rows());
        for r in 0..x.rows() {
            let row = x.row(r);
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let is = 1.0 / (var + self.eps).sqrt();
            inv_std.push(is);
            for c in 0..d {
                let n = (row[c] - mean) * is;
                normalized.set(r, c, n);
                y.set(r, c, n * self.gain[c] + self.bias[c]);
            }
        }
        Ok((y, LayerNormCache { normalized, inv_std }))
    }

    pub fn backward(&self, cache: &LayerNormCache, dy: &DenseMatrix, grad: &mut LayerNorm) -> Result<DenseMatrix> {
        let d = dy.cols();
        let mut dx = DenseMatrix::zeros(dy.rows(), d);
        for r in 0..dy.rows() {
            let n = cache.normalized.row(r);
            let g = dy.row(r);
            let mut dn = vec![0.0; d];
            for c in 0..d {
                grad.gain[c] += g[c] * n[c];
                grad.bias[c] += g[c];
                dn[c] = g[c] * self.gain[c];
            }
            let mean_dn = dn.iter().sum::<f64>() / d as f64;
            let mean_dn_n = dn.iter().zip(n).map(|(a, b)| a * b).sum::<f64>() / d as f64;
            for c in 0..d {
                dx.set(r, c, cache.inv_std[r] * (dn[c] - mean_dn - n[c] * mean_dn_n));
            }
        }
        Ok(dx)
    }
}

impl Params for LayerNorm {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(String, (usize, usize), &[f64])) {
        f(join(prefix, "gain"), (1, self.gain.len()), &self.gain);
        f(join(prefix, "bias"), (1, self.bias.len()), &self.bias);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, (usize, usize), &mut [f64])) {
        let n = self.gain.len();
        f(join(prefix, "gain"), (1, n), &mut self.gain);
        f(join(prefix, "bias"), (1, n), &mut self.bias);
    }
}

/// Stack of linear layers with ReLU between them (none after the last),
/// optionally with a layer norm before each ReLU.
#[derive(Debug, Clone, PartialEq)]
pub struct Mlp {
    pub layers: Vec<Linear>,
    pub norms: Vec<LayerNorm>,
}

#[derive(Debug, Clone)]
pub struct MlpCache {
    inputs: Vec<DenseMatrix>,
    pre_activations: Vec<DenseMatrix>,
    norm_caches: Vec<LayerNormCache>,
}

impl MlpCache {
    /// Smallest |pre-activation| over the hidden ReLUs.
    pub fn kink_margin(&self) -> f64 {
        self.pre_activations
            .iter()
            .flat_map(|m| m.data().iter())
            .fold(f64::INFINITY, |m, v| m.min(v.abs()))
    }
}

impl Mlp {
    /// `dims = [in, h1, ..., out]`.
    pub fn new(rng: &mut Rng, dims: &[usize], layer_norm: bool) -> Self {
        let layers: Vec<Linear> = dims.windows(2).map(|w| Linear::new(rng, w[0], w[1], true)).collect();
        let norms = if layer_norm {
            dims[1..dims.len() - 1].iter().map(|&d| LayerNorm::new(d)).collect()
        } else {
            Vec::new()
        };
        Self { layers, norms }
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].input_dim()
    }

    pub fn output_dim(&self) -> usize {
        self.layers.last().map_or(0, Linear::output_dim)
    }

    pub fn forward(&self, x: &DenseMatrix) -> Result<DenseMatrix> {
        Ok(self.forward_cached(x)?.0)
    }

    pub fn forward_cached(&self, x: &DenseMatrix) -> Result<(DenseMatrix, MlpCache)> {
        let n = self.layers.len();
        let mut cache = MlpCache {
            inputs: Vec::with_capacity(n),
            pre_activations: Vec::with_capacity(n.saturating_sub(1)),
            norm_caches: Vec::new(),
        };
        let mut h = x.clone();
        for (i, layer) in self.layers.iter().enumerate() {
            let y = layer.forward(&h)?;
            cache.inputs.push(h);
            if i + 1 == n {
                return Ok((y, cache));
            }
            let pre = match self.norms.get(i) {
                Some(norm) => {
                    let (z, nc) = norm.forward(&y)?;
                    cache.norm_caches.push(nc);
                    z
                }
                None => y,
            };
            h = Activation::Relu.forward(&pre);
            cache.pre_activations.push(pre);
        }
        Ok((h, cache))
    }

    pub fn backward(&self, cache: &MlpCache, dy: &DenseMatrix, grad: &mut Mlp) -> Result<DenseMatrix> {
        let mut g = dy.clone();
        for i in (0..self.layers.len()).rev() {
            if i + 1 < self.layers.len() {
                g = Activation::Relu.backward(&cache.pre_activations[i], &g)?;
                if let Some(norm) = self.norms.get(i) {
                    g = norm.backward(&cache.norm_caches[i], &g, &mut grad.norms[i])?;
                }
            }
            g = self.layers[i].backward(&cache.inputs[i], &g, &mut grad.layers[i])?;
        }
        Ok(g)
    }
}

impl Params for Mlp {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(String, (usize, usize), &[f64])) {
        for (i, l) in self.layers.iter().enumerate() {
            l.visit(&join(prefix, &format!("layers.{i}")), f);
        }
        for (i, n) in self.norms.iter().enumerate() {
            n.visit(&join(prefix, &format!("norms.{i}")), f);
        }
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, (usize, usize), &mut [f64])) {
        for (i, l) in self.layers.iter_mut().enumerate() {
            l.visit_mut(&join(prefix, &format!("layers.{i}")), f);
        }
        for (i, n) in self.norms.iter_mut().enumerate() {
            n.visit_mut(&join(prefix, &format!("norms.{i}")), f);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scalar(y: &DenseMatrix, g: &DenseMatrix) -> f64 {
        y.hadamard(g).unwrap().sum()
    }

    #[test]
    fn mlp_gradients_match_finite_differences() {
        let mut rng = Rng::new(3);
        for norm in [false, true] {
            let mlp = Mlp::new(&mut rng, &[4, 5, 6, 2], norm);
            let x = DenseMatrix::from_fn(3, 4, |_, _| rng.uniform_in(-1.0, 1.0));
            let g = DenseMatrix::from_fn(3, 2, |_, _| rng.uniform_in(-1.0, 1.0));
            let (y, cache) = mlp.forward_cached(&x).unwrap();
            let mut grad = mlp.zeros_like();
            let dx = mlp.backward(&cache, &g, &mut grad).unwrap();
            let _ = y;
            let eps = 1e-6;
            for k in 0..x.data().len() {
                let mut xp = x.clone();
                xp.data_mut()[k] += eps;
                let mut xm = x.clone();
                xm.data_mut()[k] -= eps;
                let fd = (scalar(&mlp.forward(&xp).unwrap(), &g) - scalar(&mlp.forward(&xm).unwrap(), &g)) / (2.0 * eps);
                assert!((fd - dx.data()[k]).abs() < 1e-7, "x[{k}] fd {fd} an {}", dx.data()[k]);
            }
            let mut analytic = Vec::new();
            grad.visit("", &mut |_, _, d| analytic.extend_from_slice(d));
            let mut idx = 0;
            let mut p = mlp.clone();
            let total = p.num_params();
            for k in 0..total {
                let eval = |p: &Mlp| scalar(&p.forward(&x).unwrap(), &g);
                let bump = |p: &mut Mlp, delta: f64| {
                    let mut i = 0;
                    p.visit_mut("", &mut |_, _, d| {
                        for v in d.iter_mut() {
                            if i == k {
                                *v += delta;
                            }
                            i += 1;
                        }
                    });
                };
                bump(&mut p, eps);
                let fp = eval(&p);
                bump(&mut p, -2.0 * eps);
                let fm = eval(&p);
                bump(&mut p, eps);
                let fd = (fp - fm) / (2.0 * eps);
                assert!((fd - analytic[k]).abs() < 1e-7, "param {k} fd {fd} an {}", analytic[k]);
                idx += 1;
            }
            assert_eq!(idx, total);
        }
    }

    #[test]
    fn layer_norm_output_is_standardized() {
        let ln = LayerNorm::new(4);
        let x = DenseMatrix::from_rows(&[vec![1.0, 2.0, 3.0, 4.0]], 0).unwrap();
        let (y, _) = ln.forward(&x).unwrap();
        let mean: f64 = y.row(0).iter().sum::<f64>() / 4.0;
        assert!(mean.abs() < 1e-12);
    }

    #[test]
    fn sigmoid_is_stable() {
        assert_eq!(sigmoid(0.0), 0.5);
        assert!(sigmoid(-800.0) >= 0.0);
        assert_eq!(sigmoid(800.0), 1.0);
    }
}
