//! Small dense networks with exact reverse-mode gradients and AdamW.
//!
//! Layers are stored as `(in, out)` weight matrices so a batch `X` of shape
//! `(B, in)` maps to `X W + b`. Hidden layers use `tanh`, the output layer is
//! linear. Everything runs in `f64`.

use ndarray::{Array1, Array2, ArrayView2, Axis};
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::Rng;

#[derive(Debug, Clone, PartialEq)]
pub struct Mlp {
    sizes: Vec<usize>,
    weights: Vec<Array2<f64>>,
    biases: Vec<Array1<f64>>,
}

/// Layer inputs recorded during a forward pass; enough to backpropagate.
#[derive(Debug, Clone)]
pub struct Tape {
    inputs: Vec<Array2<f64>>,
}

impl Tape {
    pub fn batch_size(&self) -> usize {
        self.inputs[0].nrows()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    pub weights: Vec<Array2<f64>>,
    pub biases: Vec<Array1<f64>>,
}

impl Mlp {
    /// Glorot-uniform weights, zero biases.
    pub fn new(sizes: &[usize], rng: &mut Rng) -> Result<Self> {
        let mut net = Self::zeros(sizes)?;
        for w in &mut net.weights {
            let (fan_in, fan_out) = w.dim();
            let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
            w.mapv_inplace(|_| rng.gen_range(-limit..limit));
        }
        Ok(net)
    }

    pub fn zeros(sizes: &[usize]) -> Result<Self> {
        if sizes.len() < 2 || sizes.iter().any(|&s| s == 0) {
            return Err(Error::invalid(
                "mlp layer sizes",
                format!("{sizes:?}: need at least two positive widths"),
            ));
        }
        let weights = sizes
            .windows(2)
            .map(|w| Array2::zeros((w[0], w[1])))
            .collect();
        let biases = sizes[1..].iter().map(|&n| Array1::zeros(n)).collect();
        Ok(Self {
            sizes: sizes.to_vec(),
            weights,
            biases,
        })
    }

    pub fn from_parts(weights: Vec<Array2<f64>>, biases: Vec<Array1<f64>>) -> Result<Self> {
        if weights.is_empty() || weights.len() != biases.len() {
            return Err(Error::invalid("mlp", "weights and biases must pair up"));
        }
        let mut sizes = vec![weights[0].nrows()];
        for (w, b) in weights.iter().zip(&biases) {
            if w.nrows() != *sizes.last().unwrap() {
                return Err(Error::dim("mlp layer input", *sizes.last().unwrap(), w.nrows()));
            }
            if b.len() != w.ncols() {
                return Err(Error::dim("mlp bias", w.ncols(), b.len()));
            }
            sizes.push(w.ncols());
        }
        if weights
            .iter()
            .flat_map(|w| w.iter())
            .chain(biases.iter().flat_map(|b| b.iter()))
            .any(|v| !v.is_finite())
        {
            return Err(Error::non_finite("mlp parameters"));
        }
        Ok(Self {
            sizes,
            weights,
            biases,
        })
    }

    pub fn sizes(&self) -> &[usize] {
        &self.sizes
    }

    pub fn input_dim(&self) -> usize {
        self.sizes[0]
    }

    pub fn output_dim(&self) -> usize {
        *self.sizes.last().unwrap()
    }

    pub fn num_layers(&self) -> usize {
        self.weights.len()
    }

    pub fn weights(&self) -> &[Array2<f64>] {
        &self.weights
    }

    pub fn biases(&self) -> &[Array1<f64>] {
        &self.biases
    }

    pub fn weights_mut(&mut self) -> &mut [Array2<f64>] {
        &mut self.weights
    }

    pub fn biases_mut(&mut self) -> &mut [Array1<f64>] {
        &mut self.biases
    }

    pub fn param_count(&self) -> usize {
        self.sizes.windows(2).map(|w| w[0] * w[1] + w[1]).sum()
    }

    /// Multiply-accumulates for one input row.
    pub fn macs(&self) -> usize {
        self.sizes.windows(2).map(|w| w[0] * w[1]).sum()
    }

    /// Floating-point operations for one input row (2 per MAC plus bias and
    /// activation work).
    pub fn flops(&self) -> usize {
        2 * self.macs() + 2 * self.sizes[1..].iter().sum::<usize>()
    }

    pub fn forward(&self, input: &[f64]) -> Result<(Vec<f64>, Tape)> {
        let x = ArrayView2::from_shape((1, input.len()), input)
            .map_err(|_| Error::dim("mlp input", self.input_dim(), input.len()))?;
        let (y, tape) = self.forward_batch(x)?;
        Ok((y.into_raw_vec_and_offset().0, tape))
    }

    /// Forward pass without keeping a tape.
    pub fn predict(&self, input: &[f64]) -> Result<Vec<f64>> {
        if input.len() != self.input_dim() {
            return Err(Error::dim("mlp input", self.input_dim(), input.len()));
        }
        let x = ArrayView2::from_shape((1, input.len()), input).expect("row view");
        let mut a = x.to_owned();
        for (l, (w, b)) in self.weights.iter().zip(&self.biases).enumerate() {
            a = a.dot(w) + b;
            if l + 1 < self.weights.len() {
                a.mapv_inplace(f64::tanh);
            }
        }
        let out = a.into_raw_vec_and_offset().0;
        check_finite(&out)?;
        Ok(out)
    }

    pub fn forward_batch(&self, x: ArrayView2<'_, f64>) -> Result<(Array2<f64>, Tape)> {
        if x.ncols() != self.input_dim() {
            return Err(Error::dim("mlp input", self.input_dim(), x.ncols()));
        }
        let mut inputs = Vec::with_capacity(self.weights.len());
        let mut a = x.to_owned();
        for (l, (w, b)) in self.weights.iter().zip(&self.biases).enumerate() {
            let mut z = a.dot(w);
            z += b;
            if l + 1 < self.weights.len() {
                z.mapv_inplace(f64::tanh);
            }
            inputs.push(a);
            a = z;
        }
        check_finite(a.as_slice().unwrap_or(&[]))?;
        Ok((a, Tape { inputs }))
    }

    /// Backpropagates `d_out` (gradient of a scalar loss w.r.t. the output
    /// batch). Returns parameter gradients summed over the batch and the
    /// gradient w.r.t. the input batch.
    pub fn backward(&self, tape: &Tape, d_out: ArrayView2<'_, f64>) -> Result<(Gradients, Array2<f64>)> {
        if tape.inputs.len() != self.weights.len() {
            return Err(Error::dim("tape layers", self.weights.len(), tape.inputs.len()));
        }
        for (a, w) in tape.inputs.iter().zip(&self.weights) {
            if a.ncols() != w.nrows() {
                return Err(Error::dim("tape layer width", w.nrows(), a.ncols()));
            }
        }
        if d_out.ncols() != self.output_dim() || d_out.nrows() != tape.batch_size() {
            return Err(Error::dim("output gradient", self.output_dim(), d_out.ncols()));
        }
        let n = self.weights.len();
        let mut gw = Vec::with_capacity(n);
        let mut gb = Vec::with_capacity(n);
        let mut dz = d_out.to_owned();
        for l in (0..n).rev() {
            let a = &tape.inputs[l];
            gw.push(a.t().dot(&dz));
            gb.push(dz.sum_axis(Axis(0)));
            let mut da = dz.dot(&self.weights[l].t());
            if l > 0 {
                // inputs[l] is tanh output of layer l-1
                ndarray::Zip::from(&mut da)
                    .and(a)
                    .for_each(|d, &y| *d *= 1.0 - y * y);
            }
            dz = da;
        }
        gw.reverse();
        gb.reverse();
        Ok((
            Gradients {
                weights: gw,
                biases: gb,
            },
            dz,
        ))
    }

    pub fn zero_grads(&self) -> Gradients {
        Gradients {
            weights: self.weights.iter().map(|w| Array2::zeros(w.raw_dim())).collect(),
            biases: self.biases.iter().map(|b| Array1::zeros(b.raw_dim())).collect(),
        }
    }

    /// Flattened `(name, shape, data)` triples for serialization.
    pub fn named_arrays(&self, prefix: &str) -> Vec<(String, Vec<usize>, Vec<f64>)> {
        let mut out = Vec::new();
        for (l, (w, b)) in self.weights.iter().zip(&self.biases).enumerate() {
            out.push((
                format!("{prefix}.w{l}"),
                vec![w.nrows(), w.ncols()],
                w.iter().copied().collect(),
            ));
            out.push((format!("{prefix}.b{l}"), vec![b.len()], b.to_vec()));
        }
        out
    }

    pub fn from_named_arrays<'a>(
        prefix: &str,
        mut lookup: impl FnMut(&str) -> Option<(&'a [usize], &'a [f64])>,
    ) -> Result<Self> {
        let mut weights = Vec::new();
        let mut biases = Vec::new();
        for l in 0.. {
            let Some((ws, wd)) = lookup(&format!("{prefix}.w{l}")) else {
                break;
            };
            let (bs, bd) = lookup(&format!("{prefix}.b{l}"))
                .ok_or_else(|| Error::invalid("mlp arrays", format!("missing {prefix}.b{l}")))?;
            if ws.len() != 2 || bs.len() != 1 {
                return Err(Error::invalid("mlp arrays", format!("bad rank for layer {l} of {prefix}")));
            }
            let w = Array2::from_shape_vec((ws[0], ws[1]), wd.to_vec())
                .map_err(|e| Error::invalid("mlp arrays", e.to_string()))?;
            weights.push(w);
            biases.push(Array1::from_vec(bd.to_vec()));
        }
        if weights.is_empty() {
            return Err(Error::invalid("mlp arrays", format!("no layers under {prefix}")));
        }
        Self::from_parts(weights, biases)
    }
}

fn check_finite(xs: &[f64]) -> Result<()> {
    match xs.iter().position(|v| !v.is_finite()) {
        Some(i) => Err(Error::non_finite(format!("mlp output element {i}"))),
        None => Ok(()),
    }
}

impl Gradients {
    pub fn add_assign(&mut self, other: &Gradients) {
        for (a, b) in self.weights.iter_mut().zip(&other.weights) {
            *a += b;
        }
        for (a, b) in self.biases.iter_mut().zip(&other.biases) {
            *a += b;
        }
    }

    pub fn scale(&mut self, k: f64) {
        self.weights.iter_mut().for_each(|w| *w *= k);
        self.biases.iter_mut().for_each(|b| *b *= k);
    }

    pub fn sq_norm(&self) -> f64 {
        self.weights
            .iter()
            .flat_map(|w| w.iter())
            .chain(self.biases.iter().flat_map(|b| b.iter()))
            .map(|g| g * g)
            .sum()
    }

    pub fn is_finite(&self) -> bool {
        self.sq_norm().is_finite()
    }
}

/// Rescales a set of gradients so their joint L2 norm is at most `max_norm`.
pub fn clip_global_norm(grads: &mut [&mut Gradients], max_norm: f64) -> f64 {
    let norm = grads.iter().map(|g| g.sq_norm()).sum::<f64>().sqrt();
    if norm > max_norm && norm > 0.0 {
        let k = max_norm / norm;
        grads.iter_mut().for_each(|g| g.scale(k));
    }
    norm
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamWConfig {
    pub lr: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self {
            lr: 2e-3,
            weight_decay: 0.01,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// AdamW moments for one network. Weight decay is decoupled: parameters are
/// shrunk by `(1 - lr * wd)` before the adaptive step.
#[derive(Debug, Clone)]
pub struct OptimState {
    pub cfg: AdamWConfig,
    step: u64,
    m: Gradients,
    v: Gradients,
}

impl OptimState {
    pub fn new(net: &Mlp, cfg: AdamWConfig) -> Self {
        Self {
            cfg,
            step: 0,
            m: net.zero_grads(),
            v: net.zero_grads(),
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    pub fn step(&mut self, net: &mut Mlp, grads: &Gradients) -> Result<()> {
        self.step_with_lr(net, grads, self.cfg.lr)
    }

    pub fn step_with_lr(&mut self, net: &mut Mlp, grads: &Gradients, lr: f64) -> Result<()> {
        if grads.weights.len() != net.weights.len()
            || grads
                .weights
                .iter()
                .zip(&net.weights)
                .any(|(g, w)| g.raw_dim() != w.raw_dim())
            || grads
                .biases
                .iter()
                .zip(&net.biases)
                .any(|(g, b)| g.len() != b.len())
        {
            return Err(Error::invalid("optimizer step", "gradient shapes do not match network"));
        }
        self.step += 1;
        let c = self.cfg;
        let t = self.step as i32;
        let bc1 = 1.0 - c.beta1.powi(t);
        let bc2 = 1.0 - c.beta2.powi(t);
        let decay = 1.0 - lr * c.weight_decay;
        let update = |p: &mut f64, g: f64, m: &mut f64, v: &mut f64| {
            *p *= decay;
            *m = c.beta1 * *m + (1.0 - c.beta1) * g;
            *v = c.beta2 * *v + (1.0 - c.beta2) * g * g;
            let m_hat = *m / bc1;
            let v_hat = *v / bc2;
            *p -= lr * m_hat / (v_hat.sqrt() + c.eps);
        };
        for l in 0..net.weights.len() {
            ndarray::Zip::from(&mut net.weights[l])
                .and(&grads.weights[l])
                .and(&mut self.m.weights[l])
                .and(&mut self.v.weights[l])
                .for_each(|p, &g, m, v| update(p, g, m, v));
            ndarray::Zip::from(&mut net.biases[l])
                .and(&grads.biases[l])
                .and(&mut self.m.biases[l])
                .and(&mut self.v.biases[l])
                .for_each(|p, &g, m, v| update(p, g, m, v));
        }
        Ok(())
    }
}

/// Learning-rate schedule evaluated per optimizer step.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, Default)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LrSchedule {
    #[default]
    Constant,
    /// Linear warmup then cosine decay to `min_lr`.
    Cosine { warmup_steps: u64, min_lr: f64 },
}

impl LrSchedule {
    pub fn lr_at(&self, base: f64, step: u64, total_steps: u64) -> f64 {
        match *self {
            LrSchedule::Constant => base,
            LrSchedule::Cosine {
                warmup_steps,
                min_lr,
            } => {
                if step < warmup_steps {
                    return base * (step + 1) as f64 / warmup_steps as f64;
                }
                let span = total_steps.saturating_sub(warmup_steps).max(1) as f64;
                let p = ((step - warmup_steps) as f64 / span).min(1.0);
                min_lr + 0.5 * (base - min_lr) * (1.0 + (std::f64::consts::PI * p).cos())
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::stream_rng;
    use ndarray::array;

    fn rng() -> Rng {
        stream_rng(11, &[])
    }

    #[test]
    fn zero_network_outputs_zero() {
        let net = Mlp::zeros(&[4, 8, 3]).unwrap();
        assert_eq!(net.predict(&[1.0, 2.0, 3.0, 4.0]).unwrap(), vec![0.0; 3]);
    }

    #[test]
    fn identity_layer_passes_input_through() {
        let net = Mlp::from_parts(vec![Array2::eye(3)], vec![Array1::zeros(3)]).unwrap();
        assert_eq!(net.predict(&[0.5, -2.0, 3.0]).unwrap(), vec![0.5, -2.0, 3.0]);
    }

    #[test]
    fn forward_is_deterministic() {
        let net = Mlp::new(&[5, 16, 16, 4], &mut rng()).unwrap();
        let x = [0.1, -0.2, 0.3, 0.4, -0.5];
        let a = net.forward(&x).unwrap().0;
        let b = net.forward(&x).unwrap().0;
        assert_eq!(a, b);
        assert_eq!(a, net.predict(&x).unwrap());
    }

    #[test]
    fn forward_rejects_wrong_width() {
        let net = Mlp::new(&[5, 4], &mut rng()).unwrap();
        assert!(matches!(net.forward(&[1.0; 4]), Err(Error::Dimension { .. })));
    }

    #[test]
    fn linear_identity_gradient_is_outer_product() {
        // loss = |W^T x|^2 / 2 with W = I  =>  dL/dW = x x^T
        let net = Mlp::from_parts(vec![Array2::eye(3)], vec![Array1::zeros(3)]).unwrap();
        let x = [1.0, 2.0, -3.0];
        let (y, tape) = net.forward(&x).unwrap();
        let dy = ArrayView2::from_shape((1, 3), &y).unwrap();
        let (g, _) = net.backward(&tape, dy).unwrap();
        let xv = array![[1.0, 2.0, -3.0]];
        assert_eq!(g.weights[0], xv.t().dot(&xv));
        assert_eq!(g.biases[0], array![1.0, 2.0, -3.0]);
    }

    #[test]
    fn zero_output_gradient_gives_zero_grads() {
        let net = Mlp::new(&[3, 6, 2], &mut rng()).unwrap();
        let (_, tape) = net.forward(&[0.3, 0.1, -0.7]).unwrap();
        let (g, dx) = net.backward(&tape, Array2::zeros((1, 2)).view()).unwrap();
        assert_eq!(g.sq_norm(), 0.0);
        assert!(dx.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn backward_rejects_mismatched_tape() {
        let a = Mlp::new(&[3, 6, 2], &mut rng()).unwrap();
        let b = Mlp::new(&[3, 2], &mut rng()).unwrap();
        let (_, tape) = b.forward(&[0.0; 3]).unwrap();
        assert!(a.backward(&tape, Array2::zeros((1, 2)).view()).is_err());
    }

    #[test]
    fn finite_difference_gradient_check() {
        let mut r = rng();
        let net = Mlp::new(&[4, 7, 5, 3], &mut r).unwrap();
        let x = [0.3, -0.8, 0.5, 1.1];
        let target = [0.2, -0.1, 0.4];
        let loss = |n: &Mlp| -> f64 {
            let y = n.predict(&x).unwrap();
            0.5 * y.iter().zip(&target).map(|(a, b)| (a - b) * (a - b)).sum::<f64>()
        };
        let (y, tape) = net.forward(&x).unwrap();
        let dy: Vec<f64> = y.iter().zip(&target).map(|(a, b)| a - b).collect();
        let (g, _) = net.backward(&tape, ArrayView2::from_shape((1, 3), &dy).unwrap()).unwrap();
        let h = 1e-5;
        let mut worst: f64 = 0.0;
        for l in 0..net.num_layers() {
            for idx in 0..net.weights[l].len() {
                let (i, j) = (idx / net.weights[l].ncols(), idx % net.weights[l].ncols());
                let mut p = net.clone();
                p.weights[l][[i, j]] += h;
                let mut m = net.clone();
                m.weights[l][[i, j]] -= h;
                let num = (loss(&p) - loss(&m)) / (2.0 * h);
                let ana = g.weights[l][[i, j]];
                worst = worst.max((num - ana).abs() / ana.abs().max(num.abs()).max(1e-6));
            }
        }
        assert!(worst < 1e-4, "worst relative error {worst}");
    }

    #[test]
    fn adamw_closed_forms() {
        // zero gradient, no decay: unchanged
        let mut net = Mlp::new(&[2, 3], &mut rng()).unwrap();
        let before = net.clone();
        let g = net.zero_grads();
        let mut st = OptimState::new(&net, AdamWConfig { weight_decay: 0.0, ..Default::default() });
        st.step(&mut net, &g).unwrap();
        assert_eq!(net, before);

        // zero gradient with decay: scaled by (1 - lr * wd)
        let cfg = AdamWConfig { lr: 0.1, weight_decay: 0.5, ..Default::default() };
        let mut net = before.clone();
        let mut st = OptimState::new(&net, cfg);
        st.step(&mut net, &g).unwrap();
        for (a, b) in net.weights[0].iter().zip(before.weights[0].iter()) {
            assert!((a - b * 0.95).abs() < 1e-15);
        }
        assert_eq!(st.step_count(), 1);
    }

    #[test]
    fn adamw_first_step_magnitude_is_lr() {
        // hand-computed oracle: m = 0.1, v = 0.001, m_hat = v_hat = 1,
        // step = -lr * 1 / (1 + eps)
        let mut net = Mlp::from_parts(vec![array![[0.0]]], vec![array![0.0]]).unwrap();
        let grads = Gradients { weights: vec![array![[1.0]]], biases: vec![array![0.0]] };
        let cfg = AdamWConfig { lr: 2e-3, weight_decay: 0.0, ..Default::default() };
        let mut st = OptimState::new(&net, cfg);
        st.step(&mut net, &grads).unwrap();
        let expected = -2e-3 / (1.0 + 1e-8);
        assert!((net.weights[0][[0, 0]] - expected).abs() < 1e-15);
    }

    #[test]
    fn optimizer_rejects_shape_mismatch() {
        let mut net = Mlp::new(&[2, 3], &mut rng()).unwrap();
        let other = Mlp::new(&[2, 4], &mut rng()).unwrap();
        let mut st = OptimState::new(&net, AdamWConfig::default());
        assert!(st.step(&mut net, &other.zero_grads()).is_err());
    }

    #[test]
    fn small_lr_loss_is_non_increasing_on_quadratic() {
        let mut r = rng();
        let mut net = Mlp::from_parts(
            vec![Array2::from_shape_fn((3, 2), |_| r.gen_range(-1.0..1.0))],
            vec![Array1::zeros(2)],
        )
        .unwrap();
        let xs = array![[1.0, 0.0, 0.5], [0.0, 1.0, -0.5], [0.3, 0.3, 0.3]];
        let ys = array![[1.0, -1.0], [0.5, 0.5], [0.0, 0.2]];
        let cfg = AdamWConfig { lr: 1e-4, weight_decay: 0.0, ..Default::default() };
        let mut st = OptimState::new(&net, cfg);
        let mut prev = f64::INFINITY;
        for _ in 0..10 {
            let (y, tape) = net.forward_batch(xs.view()).unwrap();
            let d = &y - &ys;
            let loss = 0.5 * d.iter().map(|v| v * v).sum::<f64>();
            assert!(loss <= prev, "{loss} > {prev}");
            prev = loss;
            let (g, _) = net.backward(&tape, d.view()).unwrap();
            st.step(&mut net, &g).unwrap();
        }
    }

    #[test]
    fn named_arrays_round_trip() {
        let net = Mlp::new(&[3, 5, 2], &mut rng()).unwrap();
        let arrays = net.named_arrays("enc");
        let back = Mlp::from_named_arrays("enc", |name| {
            arrays
                .iter()
                .find(|(n, _, _)| n == name)
                .map(|(_, s, d)| (s.as_slice(), d.as_slice()))
        })
        .unwrap();
        assert_eq!(back, net);
    }

    #[test]
    fn cosine_schedule_endpoints() {
        let s = LrSchedule::Cosine { warmup_steps: 10, min_lr: 1e-5 };
        assert!((s.lr_at(1e-3, 9, 100) - 1e-3).abs() < 1e-12);
        assert!((s.lr_at(1e-3, 100, 100) - 1e-5).abs() < 1e-12);
        assert_eq!(LrSchedule::Constant.lr_at(0.5, 3, 10), 0.5);
    }
}
