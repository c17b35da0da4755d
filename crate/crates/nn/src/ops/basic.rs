//! Elementwise, shape and reduction ops.

use crate::error::{invalid, shape_err, Result};
use crate::graph::{Graph, Operation, Var};
use crate::rng::{derive_key, splitmix64};

struct Add {
    a: Var,
    b: Var,
}

impl Operation for Add {
    fn name(&self) -> &'static str {
        "add"
    }
    fn inputs(&self) -> Vec<Var> {
        vec![self.a, self.b]
    }
    fn backward(&self, _: &Graph, _: Var, g: &[f32], needs: &[bool]) -> Vec<Option<Vec<f32>>> {
        needs.iter().map(|n| n.then(|| g.to_vec())).collect()
    }
}

struct Relu {
    x: Var,
}

impl Operation for Relu {
    fn name(&self) -> &'static str {
        "relu"
    }
    fn inputs(&self) -> Vec<Var> {
        vec![self.x]
    }
    fn backward(&self, graph: &Graph, _: Var, g: &[f32], _: &[bool]) -> Vec<Option<Vec<f32>>> {
        let x = graph.data(self.x);
        let dx = x.iter().zip(g).map(|(&x, &g)| if x > 0.0 { g } else { 0.0 }).collect();
        vec![Some(dx)]
    }
}

struct Dropout {
    x: Var,
    /// Per-element multiplier: 0 for dropped units, 1/(1-p) for kept ones.
    scale: Vec<f32>,
}

impl Operation for Dropout {
    fn name(&self) -> &'static str {
        "dropout"
    }
    fn inputs(&self) -> Vec<Var> {
        vec![self.x]
    }
    fn backward(&self, _: &Graph, _: Var, g: &[f32], _: &[bool]) -> Vec<Option<Vec<f32>>> {
        vec![Some(g.iter().zip(&self.scale).map(|(g, s)| g * s).collect())]
    }
}

struct Reshape {
    x: Var,
}

impl Operation for Reshape {
    fn name(&self) -> &'static str {
        "reshape"
    }
    fn inputs(&self) -> Vec<Var> {
        vec![self.x]
    }
    fn backward(&self, _: &Graph, _: Var, g: &[f32], _: &[bool]) -> Vec<Option<Vec<f32>>> {
        vec![Some(g.to_vec())]
    }
}

fn transpose_last2_data(data: &[f32], batch: usize, rows: usize, cols: usize) -> Vec<f32> {
    let mut out = vec![0.0; data.len()];
    for b in 0..batch {
        let src = &data[b * rows * cols..(b + 1) * rows * cols];
        let dst = &mut out[b * rows * cols..(b + 1) * rows * cols];
        for r in 0..rows {
            for c in 0..cols {
                dst[c * rows + r] = src[r * cols + c];
            }
        }
    }
    out
}

struct TransposeLast2 {
    x: Var,
    batch: usize,
    rows: usize,
    cols: usize,
}

impl Operation for TransposeLast2 {
    fn name(&self) -> &'static str {
        "transpose"
    }
    fn inputs(&self) -> Vec<Var> {
        vec![self.x]
    }
    fn backward(&self, _: &Graph, _: Var, g: &[f32], _: &[bool]) -> Vec<Option<Vec<f32>>> {
        vec![Some(transpose_last2_data(g, self.batch, self.cols, self.rows))]
    }
}

struct SliceLast {
    x: Var,
    outer: usize,
    len_in: usize,
    start: usize,
    len: usize,
}

impl Operation for SliceLast {
    fn name(&self) -> &'static str {
        "slice_last"
    }
    fn inputs(&self) -> Vec<Var> {
        vec![self.x]
    }
    fn backward(&self, _: &Graph, _: Var, g: &[f32], _: &[bool]) -> Vec<Option<Vec<f32>>> {
        let mut dx = vec![0.0; self.outer * self.len_in];
        for o in 0..self.outer {
            dx[o * self.len_in + self.start..o * self.len_in + self.start + self.len]
                .copy_from_slice(&g[o * self.len..(o + 1) * self.len]);
        }
        vec![Some(dx)]
    }
}

struct Sum {
    x: Var,
    n: usize,
}

impl Operation for Sum {
    fn name(&self) -> &'static str {
        "sum"
    }
    fn inputs(&self) -> Vec<Var> {
        vec![self.x]
    }
    fn backward(&self, _: &Graph, _: Var, g: &[f32], _: &[bool]) -> Vec<Option<Vec<f32>>> {
        vec![Some(vec![g[0]; self.n])]
    }
}

struct WeightedSum {
    x: Var,
    weights: Vec<f32>,
}

impl Operation for WeightedSum {
    fn name(&self) -> &'static str {
        "weighted_sum"
    }
    fn inputs(&self) -> Vec<Var> {
        vec![self.x]
    }
    fn backward(&self, _: &Graph, _: Var, g: &[f32], _: &[bool]) -> Vec<Option<Vec<f32>>> {
        vec![Some(self.weights.iter().map(|w| w * g[0]).collect())]
    }
}

struct MseLoss {
    pred: Var,
    target: Vec<f32>,
}

impl Operation for MseLoss {
    fn name(&self) -> &'static str {
        "mse_loss"
    }
    fn inputs(&self) -> Vec<Var> {
        vec![self.pred]
    }
    fn backward(&self, graph: &Graph, _: Var, g: &[f32], _: &[bool]) -> Vec<Option<Vec<f32>>> {
        let pred = graph.data(self.pred);
        let scale = 2.0 * f64::from(g[0]) / pred.len() as f64;
        let dx = pred.iter().zip(&self.target).map(|(&p, &t)| (scale * (f64::from(p) - f64::from(t))) as f32).collect();
        vec![Some(dx)]
    }
}

pub(crate) fn sigmoid(x: f32) -> f32 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

struct GateMix {
    first: Var,
    second: Var,
    logit: Var,
}

impl Operation for GateMix {
    fn name(&self) -> &'static str {
        "gate_mix"
    }
    fn inputs(&self) -> Vec<Var> {
        vec![self.first, self.second, self.logit]
    }
    fn backward(&self, graph: &Graph, _: Var, g: &[f32], needs: &[bool]) -> Vec<Option<Vec<f32>>> {
        let alpha = sigmoid(graph.data(self.logit)[0]);
        let d_first = needs[0].then(|| g.iter().map(|g| g * alpha).collect());
        let d_second = needs[1].then(|| g.iter().map(|g| g * (1.0 - alpha)).collect());
        let d_logit = needs[2].then(|| {
            let a = graph.data(self.first);
            let b = graph.data(self.second);
            let s: f64 =
                g.iter().zip(a.iter().zip(b)).map(|(&g, (&a, &b))| f64::from(g) * (f64::from(a) - f64::from(b))).sum();
            vec![(s * f64::from(alpha) * f64::from(1.0 - alpha)) as f32]
        });
        vec![d_first, d_second, d_logit]
    }
}

impl Graph {
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return shape_err("add", self.shape(a), self.shape(b));
        }
        let data = self.data(a).iter().zip(self.data(b)).map(|(x, y)| x + y).collect();
        let shape = self.shape(a).to_vec();
        Ok(self.push_op(shape, data, Box::new(Add { a, b })))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let data = self.data(x).iter().map(|v| v.max(0.0)).collect();
        let shape = self.shape(x).to_vec();
        self.push_op(shape, data, Box::new(Relu { x }))
    }

    /// Inverted dropout: in training mode each unit is zeroed with
    /// probability `p` and survivors are scaled by `1/(1-p)`; in evaluation
    /// mode, or with `p == 0`, the input is returned unchanged. The mask is a
    /// pure function of `(mode.seed, site, mode.step)`.
    pub fn dropout(&mut self, x: Var, p: f32, site: u64) -> Result<Var> {
        if !(0.0..1.0).contains(&p) {
            return invalid("dropout", format!("p = {p} outside [0, 1)"));
        }
        if !self.is_training() || p == 0.0 {
            return Ok(x);
        }
        let mode = self.mode();
        let scale = dropout_scale(self.value(x).len(), p, mode.seed, site, mode.step);
        let data = self.data(x).iter().zip(&scale).map(|(x, s)| x * s).collect();
        let shape = self.shape(x).to_vec();
        Ok(self.push_op(shape, data, Box::new(Dropout { x, scale })))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let n: usize = shape.iter().product();
        if n != self.value(x).len() {
            return shape_err("reshape", self.shape(x), shape);
        }
        let data = self.data(x).to_vec();
        Ok(self.push_op(shape.to_vec(), data, Box::new(Reshape { x })))
    }

    /// Swaps the last two axes of a rank-3 tensor: `[B, R, C] -> [B, C, R]`.
    pub fn transpose_last2(&mut self, x: Var) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let [batch, rows, cols] = shape[..] else {
            return shape_err("transpose_last2", "rank 3", shape);
        };
        let data = transpose_last2_data(self.data(x), batch, rows, cols);
        Ok(self.push_op(vec![batch, cols, rows], data, Box::new(TransposeLast2 { x, batch, rows, cols })))
    }

    /// Keeps `len` entries of the last axis starting at `start`.
    pub fn slice_last(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let Some(&len_in) = shape.last() else {
            return shape_err("slice_last", "rank >= 1", shape);
        };
        if len == 0 || start + len > len_in {
            return invalid("slice_last", format!("range {start}..{} outside axis of length {len_in}", start + len));
        }
        let outer = self.value(x).len() / len_in;
        let src = self.data(x);
        let mut data = Vec::with_capacity(outer * len);
        for o in 0..outer {
            data.extend_from_slice(&src[o * len_in + start..o * len_in + start + len]);
        }
        let mut out_shape = shape;
        *out_shape.last_mut().unwrap() = len;
        Ok(self.push_op(out_shape, data, Box::new(SliceLast { x, outer, len_in, start, len })))
    }

    /// Drops the trailing `p` steps of the time axis (`[B, C, L] -> [B, C, L-p]`).
    pub fn chomp(&mut self, x: Var, p: usize) -> Result<Var> {
        let len = *self.shape(x).last().unwrap_or(&0);
        if p >= len {
            return invalid("chomp", format!("chomp size {p} >= length {len}"));
        }
        if p == 0 {
            return Ok(x);
        }
        self.slice_last(x, 0, len - p)
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s: f64 = self.data(x).iter().map(|&v| f64::from(v)).sum();
        let n = self.value(x).len();
        self.push_op(vec![1], vec![s as f32], Box::new(Sum { x, n }))
    }

    /// `Σ weights[i] * x[i]` with a double-precision accumulator.
    pub fn weighted_sum(&mut self, x: Var, weights: &[f32]) -> Result<Var> {
        if weights.len() != self.value(x).len() {
            return shape_err("weighted_sum", self.value(x).len(), weights.len());
        }
        let s: f64 = self.data(x).iter().zip(weights).map(|(&x, &w)| f64::from(x) * f64::from(w)).sum();
        Ok(self.push_op(vec![1], vec![s as f32], Box::new(WeightedSum { x, weights: weights.to_vec() })))
    }

    /// Mean squared error over every entry of `pred` against a constant target.
    pub fn mse_loss(&mut self, pred: Var, target: &[f32]) -> Result<Var> {
        if target.len() != self.value(pred).len() {
            return shape_err("mse_loss", self.value(pred).len(), target.len());
        }
        let sse: f64 = self.data(pred).iter().zip(target).map(|(&p, &t)| (f64::from(p) - f64::from(t)).powi(2)).sum();
        let mse = sse / target.len() as f64;
        Ok(self.push_op(vec![1], vec![mse as f32], Box::new(MseLoss { pred, target: target.to_vec() })))
    }

    /// `sigmoid(logit) * first + (1 - sigmoid(logit)) * second`, with
    /// `logit` a one-element tensor.
    pub fn gate_mix(&mut self, first: Var, second: Var, logit: Var) -> Result<Var> {
        if self.shape(first) != self.shape(second) {
            return shape_err("gate_mix", self.shape(first), self.shape(second));
        }
        if self.value(logit).len() != 1 {
            return shape_err("gate_mix", [1], self.shape(logit));
        }
        let alpha = sigmoid(self.data(logit)[0]);
        let data = self.data(first).iter().zip(self.data(second)).map(|(a, b)| alpha * a + (1.0 - alpha) * b).collect();
        let shape = self.shape(first).to_vec();
        Ok(self.push_op(shape, data, Box::new(GateMix { first, second, logit })))
    }
}

/// Inverted-dropout multipliers for `n` units.
pub(crate) fn dropout_scale(n: usize, p: f32, seed: u64, site: u64, step: u64) -> Vec<f32> {
    // Counter-based: unit `i` reads the hash of `key + i`, 24 bits of it.
    let keep = 1.0 / (1.0 - p);
    let key = derive_key(&[seed, site, step]);
    let threshold = (p as f64 * (1u64 << 24) as f64) as u64;
    (0..n as u64).map(|i| if splitmix64(key.wrapping_add(i)) >> 40 < threshold { 0.0 } else { keep }).collect()
}

#[cfg(test)]
mod tests {
    use crate::graph::{Graph, GraphMode};
    use crate::tensor::Tensor;

    #[test]
    fn dropout_is_identity_in_eval_mode() {
        let mut g = Graph::new(GraphMode::eval());
        let x = g.constant(Tensor::from_fn(&[4, 5], |i| i as f32));
        let y = g.dropout(x, 0.5, 7).unwrap();
        assert_eq!(g.data(x), g.data(y));
    }

    #[test]
    fn dropout_rejects_bad_rate() {
        let mut g = Graph::new(GraphMode::train(1, 0));
        let x = g.constant(Tensor::zeros(&[3]));
        assert!(g.dropout(x, 1.0, 0).is_err());
        assert!(g.dropout(x, -0.1, 0).is_err());
    }

    #[test]
    fn dropout_keep_rate_and_scaling() {
        let n = 1_000_000;
        let mut g = Graph::new(GraphMode::train(2024, 3));
        let x = g.constant(Tensor::full(&[n], 1.0));
        let y = g.dropout(x, 0.5, 11).unwrap();
        let kept = g.data(y).iter().filter(|&&v| v != 0.0).count();
        assert!(g.data(y).iter().all(|&v| v == 0.0 || v == 2.0));
        let rate = kept as f64 / n as f64;
        assert!((rate - 0.5).abs() < 0.002, "keep rate {rate}");
    }

    #[test]
    fn mse_of_identical_tensors_is_zero() {
        let mut g = Graph::new(GraphMode::eval());
        let t = Tensor::from_fn(&[2, 3], |i| (i as f32).sin());
        let x = g.constant(t.clone());
        let l = g.mse_loss(x, t.data()).unwrap();
        assert_eq!(g.data(l)[0], 0.0);
    }

    #[test]
    fn sum_gradient_is_all_ones() {
        let mut g = Graph::new(GraphMode::eval());
        let x = g.param(Tensor::from_fn(&[3, 4], |i| i as f32 - 5.0));
        let s = g.sum(x);
        g.backward(s).unwrap();
        assert_eq!(g.grad(x).unwrap(), &[1.0; 12]);
    }

    #[test]
    fn fan_out_gradients_accumulate() {
        let mut g = Graph::new(GraphMode::eval());
        let x = g.param(Tensor::from_fn(&[3], |i| i as f32));
        let y = g.add(x, x).unwrap();
        let s = g.sum(y);
        g.backward(s).unwrap();
        assert_eq!(g.grad(x).unwrap(), &[2.0; 3]);
    }

    #[test]
    fn second_backward_is_rejected() {
        let mut g = Graph::new(GraphMode::eval());
        let x = g.param(Tensor::scalar(1.0));
        let s = g.sum(x);
        g.backward(s).unwrap();
        assert_eq!(g.backward(s), Err(crate::NnError::GraphConsumed));
    }

    #[test]
    fn chomp_keeps_prefix() {
        let mut g = Graph::new(GraphMode::eval());
        let x = g.constant(Tensor::from_fn(&[1, 2, 10], |i| i as f32));
        assert_eq!(g.chomp(x, 0).unwrap(), x);
        let y = g.chomp(x, 4).unwrap();
        assert_eq!(g.shape(y), &[1, 2, 6]);
        assert_eq!(&g.data(y)[..6], &[0.0, 1.0, 2.0, 3.0, 4.0, 5.0]);
        assert_eq!(&g.data(y)[6..], &[10.0, 11.0, 12.0, 13.0, 14.0, 15.0]);
        assert!(g.chomp(x, 10).is_err());
    }

    #[test]
    fn gate_mix_endpoints() {
        let mut g = Graph::new(GraphMode::eval());
        let a = g.constant(Tensor::full(&[2], 1.0));
        let b = g.constant(Tensor::full(&[2], 3.0));
        let hi = g.constant(Tensor::scalar(200.0));
        let lo = g.constant(Tensor::scalar(-200.0));
        let zero = g.constant(Tensor::scalar(0.0));
        let y = g.gate_mix(a, b, hi).unwrap();
        assert_eq!(g.data(y), &[1.0, 1.0]);
        let y = g.gate_mix(a, b, lo).unwrap();
        assert_eq!(g.data(y), &[3.0, 3.0]);
        let y = g.gate_mix(a, b, zero).unwrap();
        assert_eq!(g.data(y), &[2.0, 2.0]);
    }
}
