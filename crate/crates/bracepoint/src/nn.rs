//! Dense network substrate: linear layers, small MLPs, manual backprop,
//! and an Adam optimizer with a stepped learning-rate schedule.
//!
//! Everything runs in f64 on flat `Vec<f64>` buffers. Layers cache what
//! their backward pass needs, so gradient checks can exercise the exact
//! code paths used in training.

use crate::geometry::Prng;

/// Output nonlinearity of a layer. Hidden layers always use `Tanh`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    Linear,
    Tanh,
    Sigmoid,
    Softplus,
}

impl Activation {
    pub fn apply(self, z: f64) -> f64 {
        match self {
            Activation::Linear => z,
            Activation::Tanh => z.tanh(),
            Activation::Sigmoid => sigmoid(z),
            Activation::Softplus => softplus(z),
        }
    }

    /// Derivative at pre-activation `z` with post-activation `a` available,
    /// so tanh and sigmoid reuse the cheaper form.
    pub fn derivative(self, z: f64, a: f64) -> f64 {
        match self {
            Activation::Linear => 1.0,
            Activation::Tanh => 1.0 - a * a,
            Activation::Sigmoid => a * (1.0 - a),
            Activation::Softplus => sigmoid(z),
        }
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

/// Numerically stable log(1 + e^z).
pub fn softplus(z: f64) -> f64 {
    if z > 30.0 {
        z
    } else if z < -30.0 {
        z.exp()
    } else {
        z.exp().ln_1p()
    }
}

/// Fully connected layer, weights stored row-major as `w[out * in_dim + in]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Linear {
    pub w: Vec<f64>,
    pub b: Vec<f64>,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl Linear {
    /// Xavier-uniform init over [-sqrt(6/(in+out)), +sqrt(6/(in+out))].
    pub fn init(in_dim: usize, out_dim: usize, rng: &mut Prng) -> Self {
        assert!(in_dim > 0 && out_dim > 0);
        let limit = (6.0 / (in_dim + out_dim) as f64).sqrt();
        let w = (0..in_dim * out_dim)
            .map(|_| (rng.uniform() * 2.0 - 1.0) * limit)
            .collect();
        Linear { w, b: vec![0.0; out_dim], in_dim, out_dim }
    }

    pub fn zeros(in_dim: usize, out_dim: usize) -> Self {
        Linear { w: vec![0.0; in_dim * out_dim], b: vec![0.0; out_dim], in_dim, out_dim }
    }

    pub fn zeros_like(&self) -> Self {
        Linear::zeros(self.in_dim, self.out_dim)
    }

    pub fn forward_into(&self, x: &[f64], out: &mut [f64]) {
        debug_assert_eq!(x.len(), self.in_dim);
        debug_assert_eq!(out.len(), self.out_dim);
        for (o, out_slot) in out.iter_mut().enumerate() {
            let row = &self.w[o * self.in_dim..(o + 1) * self.in_dim];
            let mut acc = self.b[o];
            for (wi, xi) in row.iter().zip(x) {
                acc += wi * xi;
            }
            *out_slot = acc;
        }
    }

    pub fn forward(&self, x: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.out_dim];
        self.forward_into(x, &mut out);
        out
    }

    /// Accumulates parameter gradients into `grad` and input gradient into
    /// `dx` (both are added to, not overwritten).
    pub fn backward_into(&self, x: &[f64], dy: &[f64], grad: &mut Linear, dx: &mut [f64]) {
        debug_assert_eq!(x.len(), self.in_dim);
        debug_assert_eq!(dy.len(), self.out_dim);
        debug_assert_eq!(dx.len(), self.in_dim);
        for (o, &g) in dy.iter().enumerate() {
            grad.b[o] += g;
            let wrow = &self.w[o * self.in_dim..(o + 1) * self.in_dim];
            let grow = &mut grad.w[o * self.in_dim..(o + 1) * self.in_dim];
            for i in 0..self.in_dim {
                grow[i] += g * x[i];
                dx[i] += g * wrow[i];
            }
        }
    }

    pub fn param_count(&self) -> usize {
        self.w.len() + self.b.len()
    }
}

/// Stack of linear layers with per-layer activations. `acts[i]` follows
/// `layers[i]`; hidden activations are tanh by convention of the callers.
#[derive(Debug, Clone, PartialEq)]
pub struct Mlp {
    pub layers: Vec<Linear>,
    pub acts: Vec<Activation>,
}

/// Forward intermediates: `xs[i]` is the input of layer i, `zs[i]` its
/// pre-activation, `xs.last()` the network output.
#[derive(Debug, Clone)]
pub struct MlpCache {
    pub xs: Vec<Vec<f64>>,
    pub zs: Vec<Vec<f64>>,
}

impl Mlp {
    /// `dims` = [in, hidden.., out]. All hidden layers use tanh, the last
    /// layer uses `out_act`.
    pub fn init(dims: &[usize], out_act: Activation, rng: &mut Prng) -> Self {
        assert!(dims.len() >= 2, "mlp needs at least one layer");
        let mut layers = Vec::with_capacity(dims.len() - 1);
        let mut acts = Vec::with_capacity(dims.len() - 1);
        for k in 0..dims.len() - 1 {
            layers.push(Linear::init(dims[k], dims[k + 1], rng));
            acts.push(if k + 2 == dims.len() { out_act } else { Activation::Tanh });
        }
        Mlp { layers, acts }
    }

    pub fn zeros_like(&self) -> Self {
        Mlp {
            layers: self.layers.iter().map(Linear::zeros_like).collect(),
            acts: self.acts.clone(),
        }
    }

    pub fn in_dim(&self) -> usize {
        self.layers[0].in_dim
    }

    pub fn out_dim(&self) -> usize {
        self.layers.last().unwrap().out_dim
    }

    pub fn forward(&self, x: &[f64]) -> Vec<f64> {
        let mut cur = x.to_vec();
        for (layer, act) in self.layers.iter().zip(&self.acts) {
            let mut z = layer.forward(&cur);
            for v in &mut z {
                *v = act.apply(*v);
            }
            cur = z;
        }
        cur
    }

    pub fn forward_cached(&self, x: &[f64]) -> (Vec<f64>, MlpCache) {
        let mut xs = Vec::with_capacity(self.layers.len() + 1);
        let mut zs = Vec::with_capacity(self.layers.len());
        xs.push(x.to_vec());
        for (layer, act) in self.layers.iter().zip(&self.acts) {
            let z = layer.forward(xs.last().unwrap());
            let a: Vec<f64> = z.iter().map(|&v| act.apply(v)).collect();
            zs.push(z);
            xs.push(a);
        }
        (xs.last().unwrap().clone(), MlpCache { xs, zs })
    }

    /// Returns the gradient w.r.t. the network input; parameter gradients
    /// accumulate into `grad`.
    pub fn backward(&self, cache: &MlpCache, dy: &[f64], grad: &mut Mlp) -> Vec<f64> {
        debug_assert_eq!(cache.zs.len(), self.layers.len());
        let mut d = dy.to_vec();
        for k in (0..self.layers.len()).rev() {
            let z = &cache.zs[k];
            let a = &cache.xs[k + 1];
            for (j, dj) in d.iter_mut().enumerate() {
                *dj *= self.acts[k].derivative(z[j], a[j]);
            }
            let mut dx = vec![0.0; self.layers[k].in_dim];
            self.layers[k].backward_into(&cache.xs[k], &d, &mut grad.layers[k], &mut dx);
            d = dx;
        }
        d
    }

    pub fn param_count(&self) -> usize {
        self.layers.iter().map(Linear::param_count).sum()
    }

    /// Visits every parameter array as (name, slice), names like
    /// `prefix.0.w`, `prefix.0.b`, `prefix.1.w`, ...
    pub fn collect_params<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, &'a mut Vec<f64>)>) {
        for (k, layer) in self.layers.iter_mut().enumerate() {
            out.push((format!("{prefix}.{k}.w"), &mut layer.w));
            out.push((format!("{prefix}.{k}.b"), &mut layer.b));
        }
    }
}

/// Adam with decoupled-from-nothing weight decay (decay is added to the
/// gradient before the moment updates) and a stepped learning-rate
/// schedule: lr = lr0 * factor^(step / every), never below `lr_floor`.
#[derive(Debug, Clone)]
pub struct Adam {
    pub lr0: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub decay_factor: f64,
    pub decay_every: u64,
    pub lr_floor: f64,
    pub steps_done: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    names: Vec<String>,
}

impl Adam {
    pub fn new(lr0: f64, weight_decay: f64, decay_factor: f64, decay_every: u64, lr_floor: f64) -> Self {
        Adam {
            lr0,
            weight_decay,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            decay_factor,
            decay_every,
            lr_floor,
            steps_done: 0,
            m: Vec::new(),
            v: Vec::new(),
            names: Vec::new(),
        }
    }

    /// Learning rate that the next `step` call will use.
    pub fn current_lr(&self) -> f64 {
        let k = if self.decay_every == 0 { 0 } else { self.steps_done / self.decay_every };
        self.lr0 * self.decay_factor.powi(k as i32)
    }

    /// True once the schedule has decayed the rate under the floor; callers
    /// use this as the stop signal for open-ended training loops.
    pub fn below_floor(&self) -> bool {
        self.current_lr() < self.lr_floor
    }

    /// One update over matched (name, param) / (name, grad) lists. Entries
    /// for which `trainable` returns false are skipped entirely: no moment
    /// state is advanced for them and the parameters stay bit-identical.
    pub fn step(
        &mut self,
        params: &mut [(String, &mut Vec<f64>)],
        grads: &[(String, &Vec<f64>)],
        trainable: &dyn Fn(&str) -> bool,
    ) {
        assert_eq!(params.len(), grads.len(), "param/grad list mismatch");
        if self.names.is_empty() {
            self.names = params.iter().map(|(n, _)| n.clone()).collect();
            self.m = params.iter().map(|(_, p)| vec![0.0; p.len()]).collect();
            self.v = params.iter().map(|(_, p)| vec![0.0; p.len()]).collect();
        }
        assert_eq!(self.names.len(), params.len(), "optimizer bound to a different model");
        let lr = self.current_lr();
        self.steps_done += 1;
        let t = self.steps_done as i32;
        let bc1 = 1.0 - self.beta1.powi(t);
        let bc2 = 1.0 - self.beta2.powi(t);
        for (idx, ((name, param), (gname, grad))) in params.iter_mut().zip(grads).enumerate() {
            assert_eq!(name, gname, "param/grad name mismatch at {idx}");
            assert_eq!(self.names[idx], *name, "optimizer bound to a different model");
            assert_eq!(param.len(), grad.len());
            if !trainable(name) {
                continue;
            }
            let m = &mut self.m[idx];
            let v = &mut self.v[idx];
            for i in 0..param.len() {
                let g = grad[i] + self.weight_decay * param[i];
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * g;
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * g * g;
                let mh = m[i] / bc1;
                let vh = v[i] / bc2;
                param[i] -= lr * mh / (vh.sqrt() + self.eps);
            }
        }
    }
}

/// Row-major matrix of f64, used for per-point feature tables.
#[derive(Debug, Clone, PartialEq)]
pub struct Matrix {
    pub data: Vec<f64>,
    pub rows: usize,
    pub cols: usize,
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Matrix { data: vec![0.0; rows * cols], rows, cols }
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn row_mut(&mut self, r: usize) -> &mut [f64] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }
}

/// Elementwise max over rows of a flat row-major matrix, with argmax rows
/// recorded per output slot so backward can route gradients.
pub fn maxpool_rows(data: &[f64], rows: usize, cols: usize) -> (Vec<f64>, Vec<usize>) {
    assert!(rows > 0 && data.len() == rows * cols);
    let mut out = data[..cols].to_vec();
    let mut arg = vec![0usize; cols];
    for r in 1..rows {
        let row = &data[r * cols..(r + 1) * cols];
        for c in 0..cols {
            if row[c] > out[c] {
                out[c] = row[c];
                arg[c] = r;
            }
        }
    }
    (out, arg)
}
