//! Small dense feature maps with explicit forward/backward passes.
//!
//! Used as the nonlinear representation under both value heads. Layers
//! apply tanh (smooth, slope bounded by 1), so an upper bound on the map's
//! Lipschitz constant is the product of the layers' spectral norms.

use rand::Rng;

/// One dense layer, weights in row-major `[out][in]` order.
#[derive(Debug, Clone)]
pub struct DenseLayer {
    pub weights: Vec<f64>,
    pub bias: Vec<f64>,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl DenseLayer {
    pub fn random<R: Rng>(in_dim: usize, out_dim: usize, rng: &mut R) -> Self {
        let scale = 1.0 / (in_dim as f64).sqrt();
        let weights = (0..in_dim * out_dim)
            .map(|_| (rng.random::<f64>() * 2.0 - 1.0) * scale)
            .collect();
        let bias = vec![0.0; out_dim];
        Self { weights, bias, in_dim, out_dim }
    }

    fn affine(&self, x: &[f64], out: &mut Vec<f64>) {
        out.clear();
        for o in 0..self.out_dim {
            let row = &self.weights[o * self.in_dim..(o + 1) * self.in_dim];
            let mut acc = self.bias[o];
            for (w, v) in row.iter().zip(x) {
                acc += w * v;
            }
            out.push(acc);
        }
    }

    /// Largest singular value by power iteration, deterministic start.
    pub fn spectral_norm(&self) -> f64 {
        if self.weights.iter().all(|w| *w == 0.0) {
            return 0.0;
        }
        let mut v: Vec<f64> = (0..self.in_dim).map(|i| 1.0 + 0.01 * i as f64).collect();
        let mut u = vec![0.0; self.out_dim];
        let mut sigma = 0.0;
        for _ in 0..300 {
            for o in 0..self.out_dim {
                let row = &self.weights[o * self.in_dim..(o + 1) * self.in_dim];
                u[o] = row.iter().zip(&v).map(|(w, x)| w * x).sum();
            }
            let u_norm = u.iter().map(|x| x * x).sum::<f64>().sqrt();
            if u_norm == 0.0 {
                return 0.0;
            }
            for x in &mut u {
                *x /= u_norm;
            }
            for i in 0..self.in_dim {
                v[i] = (0..self.out_dim).map(|o| self.weights[o * self.in_dim + i] * u[o]).sum();
            }
            let v_norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
            if v_norm == 0.0 {
                return 0.0;
            }
            for x in &mut v {
                *x /= v_norm;
            }
            let prev = sigma;
            sigma = v_norm;
            if (sigma - prev).abs() <= 1e-13 * sigma.max(1.0) {
                break;
            }
        }
        sigma
    }
}

/// Parameter gradients of one layer.
#[derive(Debug, Clone)]
pub struct LayerGrads {
    pub weights: Vec<f64>,
    pub bias: Vec<f64>,
}

/// Cached activations from a forward pass.
#[derive(Debug, Clone)]
pub struct FeatureTrace {
    pub input: Vec<f64>,
    /// Pre-activation values per layer.
    pub pre: Vec<Vec<f64>>,
    /// Post-activation values per layer; the last entry is the output.
    pub post: Vec<Vec<f64>>,
}

impl FeatureTrace {
    pub fn output(&self) -> &[f64] {
        self.post.last().map(|v| v.as_slice()).unwrap_or(&self.input)
    }
}

/// Feed-forward feature map `x -> tanh(W_n ... tanh(W_1 x + b_1) ...)`.
/// Zero layers is the identity map.
#[derive(Debug, Clone)]
pub struct FeatureMap {
    pub layers: Vec<DenseLayer>,
    in_dim: usize,
}

impl FeatureMap {
    pub fn identity(dim: usize) -> Self {
        Self { layers: Vec::new(), in_dim: dim }
    }

    /// Random map with the given hidden widths (tanh after every layer).
    pub fn random<R: Rng>(in_dim: usize, widths: &[usize], rng: &mut R) -> Self {
        let mut layers = Vec::with_capacity(widths.len());
        let mut prev = in_dim;
        for &w in widths {
            layers.push(DenseLayer::random(prev, w, rng));
            prev = w;
        }
        Self { layers, in_dim }
    }

    pub fn in_dim(&self) -> usize {
        self.in_dim
    }

    pub fn out_dim(&self) -> usize {
        self.layers.last().map(|l| l.out_dim).unwrap_or(self.in_dim)
    }

    pub fn is_identity(&self) -> bool {
        self.layers.is_empty()
    }

    pub fn forward(&self, x: &[f64]) -> Vec<f64> {
        let mut cur = x.to_vec();
        let mut buf = Vec::new();
        for layer in &self.layers {
            layer.affine(&cur, &mut buf);
            cur.clear();
            cur.extend(buf.iter().map(|v| v.tanh()));
        }
        cur
    }

    pub fn trace(&self, x: &[f64]) -> FeatureTrace {
        let mut pre = Vec::with_capacity(self.layers.len());
        let mut post = Vec::with_capacity(self.layers.len());
        let mut cur = x.to_vec();
        for layer in &self.layers {
            let mut z = Vec::new();
            layer.affine(&cur, &mut z);
            cur = z.iter().map(|v| v.tanh()).collect();
            pre.push(z);
            post.push(cur.clone());
        }
        FeatureTrace { input: x.to_vec(), pre, post }
    }

    /// Gradient of `upstream . phi(x)` with respect to the input.
    pub fn backward_input(&self, trace: &FeatureTrace, upstream: &[f64]) -> Vec<f64> {
        let mut g = upstream.to_vec();
        for (idx, layer) in self.layers.iter().enumerate().rev() {
            // Through tanh: multiply by 1 - tanh(z)^2.
            for (gi, post) in g.iter_mut().zip(&trace.post[idx]) {
                *gi *= 1.0 - post * post;
            }
            // Through the affine map: W^T g.
            let mut back = vec![0.0; layer.in_dim];
            for o in 0..layer.out_dim {
                let row = &layer.weights[o * layer.in_dim..(o + 1) * layer.in_dim];
                let go = g[o];
                for (b, w) in back.iter_mut().zip(row) {
                    *b += w * go;
                }
            }
            g = back;
        }
        g
    }

    /// Parameter gradients of `upstream . phi(x)`, plus the input gradient.
    pub fn backward_params(
        &self,
        trace: &FeatureTrace,
        upstream: &[f64],
    ) -> (Vec<LayerGrads>, Vec<f64>) {
        let mut grads: Vec<LayerGrads> = self
            .layers
            .iter()
            .map(|l| LayerGrads {
                weights: vec![0.0; l.weights.len()],
                bias: vec![0.0; l.out_dim],
            })
            .collect();
        let mut g = upstream.to_vec();
        for (idx, layer) in self.layers.iter().enumerate().rev() {
            for (gi, post) in g.iter_mut().zip(&trace.post[idx]) {
                *gi *= 1.0 - post * post;
            }
            let input = if idx == 0 { &trace.input } else { &trace.post[idx - 1] };
            let lg = &mut grads[idx];
            for o in 0..layer.out_dim {
                let go = g[o];
                lg.bias[o] += go;
                let row = &mut lg.weights[o * layer.in_dim..(o + 1) * layer.in_dim];
                for (w, v) in row.iter_mut().zip(input.iter()) {
                    *w += go * v;
                }
            }
            let mut back = vec![0.0; layer.in_dim];
            for o in 0..layer.out_dim {
                let row = &layer.weights[o * layer.in_dim..(o + 1) * layer.in_dim];
                let go = g[o];
                for (b, w) in back.iter_mut().zip(row) {
                    *b += w * go;
                }
            }
            g = back;
        }
        (grads, g)
    }

    /// SGD step on the map parameters.
    pub fn apply_step(&mut self, grads: &[LayerGrads], lr: f64) {
        for (layer, g) in self.layers.iter_mut().zip(grads) {
            for (w, gw) in layer.weights.iter_mut().zip(&g.weights) {
                *w -= lr * gw;
            }
            for (b, gb) in layer.bias.iter_mut().zip(&g.bias) {
                *b -= lr * gb;
            }
        }
    }

    /// Upper bound on the map's Lipschitz constant: product of per-layer
    /// spectral norms (tanh slope bound is 1), with a 1% margin on the
    /// power-iteration estimates. Exactly 1 for the identity map.
    pub fn lipschitz_bound(&self) -> f64 {
        if self.layers.is_empty() {
            return 1.0;
        }
        self.layers.iter().map(|l| l.spectral_norm() * 1.01).product()
    }
}
