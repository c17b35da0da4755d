//! Central finite-difference gradient checking.
//!
//! The function under test maps a list of input tensors to an arbitrary
//! output tensor; the check contracts that output with fixed random
//! weights, so one scalar probe exercises every output entry. Forward values
//! are `f32`; the contraction and the difference quotients are `f64`.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::graph::{Graph, GraphMode, Var};
use crate::tensor::Tensor;

/// Outcome of a gradient check.
#[derive(Debug, Clone)]
pub struct GradCheckReport {
    /// Max over all checked entries of `|analytic - numeric| / max(|analytic|, |numeric|, floor)`.
    pub max_rel_error: f64,
    /// `(input index, element index, analytic, numeric)` of the worst entry.
    pub worst: (usize, usize, f64, f64),
    pub checked: usize,
}

/// Options for [`check_gradients`].
#[derive(Debug, Clone, Copy)]
pub struct GradCheckOptions {
    pub eps: f32,
    /// Denominator floor of the relative error, so entries whose true
    /// gradient is ~0 are compared absolutely.
    pub floor: f64,
    pub mode: GraphMode,
    pub seed: u64,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        Self { eps: 4e-2, floor: 1e-2, mode: GraphMode::eval(), seed: 0 }
    }
}

fn probe<F>(inputs: &[Tensor], f: &F, weights: Option<&[f32]>, mode: GraphMode) -> Result<(Graph, Vec<Var>, Var, Var)>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    let mut g = Graph::new(mode);
    let vars: Vec<Var> = inputs.iter().map(|t| g.param(t.clone())).collect();
    let out = f(&mut g, &vars)?;
    let n = g.value(out).len();
    let owned;
    let w = match weights {
        Some(w) => w,
        None => {
            owned = vec![1.0; n];
            &owned
        }
    };
    let loss = g.weighted_sum(out, w)?;
    Ok((g, vars, out, loss))
}

fn scalar_at<F>(inputs: &[Tensor], f: &F, weights: &[f32], mode: GraphMode) -> Result<f64>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    let mut g = Graph::new(mode);
    let vars: Vec<Var> = inputs.iter().map(|t| g.constant(t.clone())).collect();
    let out = f(&mut g, &vars)?;
    Ok(g.data(out).iter().zip(weights).map(|(&y, &w)| f64::from(y) * f64::from(w)).sum())
}

/// Compares backward gradients of every input element with central
/// differences `(L(x+ε) − L(x−ε)) / 2ε`, Richardson-extrapolated over
/// steps ε and ε/2.
pub fn check_gradients<F>(inputs: &[Tensor], f: F, opts: GradCheckOptions) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    // Output size first, to draw the contraction weights.
    let (g0, _, out0, _) = probe(inputs, &f, None, opts.mode)?;
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let weights: Vec<f32> = (0..g0.value(out0).len()).map(|_| rng.gen_range(-1.0..1.0)).collect();
    drop(g0);

    let (mut g, vars, _, loss) = probe(inputs, &f, Some(&weights), opts.mode)?;
    g.backward(loss)?;
    let analytic: Vec<Vec<f32>> =
        vars.iter().zip(inputs).map(|(v, t)| g.grad(*v).map_or_else(|| vec![0.0; t.len()], <[f32]>::to_vec)).collect();

    let mut report = GradCheckReport { max_rel_error: 0.0, worst: (0, 0, 0.0, 0.0), checked: 0 };
    let mut work = inputs.to_vec();
    for (ti, t) in inputs.iter().enumerate() {
        for e in 0..t.len() {
            let orig = t.data()[e];
            let mut diff = |h: f32| -> Result<f64> {
                work[ti].data_mut()[e] = orig + h;
                let plus = scalar_at(&work, &f, &weights, opts.mode)?;
                work[ti].data_mut()[e] = orig - h;
                let minus = scalar_at(&work, &f, &weights, opts.mode)?;
                work[ti].data_mut()[e] = orig;
                // Step actually representable in f32.
                let step = f64::from(orig + h) - f64::from(orig - h);
                Ok((plus - minus) / step)
            };
            // Richardson extrapolation of two central differences: O(ε⁴).
            let coarse = diff(opts.eps)?;
            let fine = diff(opts.eps / 2.0)?;
            let numeric = (4.0 * fine - coarse) / 3.0;
            let a = f64::from(analytic[ti][e]);
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(opts.floor);
            if rel > report.max_rel_error {
                report.max_rel_error = rel;
                report.worst = (ti, e, a, numeric);
            }
            report.checked += 1;
        }
    }
    Ok(report)
}

/// Boxed graph builder used by [`primitive_suite`].
pub type GraphFn = Box<dyn Fn(&mut Graph, &[Var]) -> Result<Var>>;

/// One named gradient-check case.
pub struct GradCase {
    pub name: String,
    pub inputs: Vec<Tensor>,
    pub f: GraphFn,
    pub opts: GradCheckOptions,
}

fn randn(rng: &mut ChaCha8Rng, shape: &[usize], scale: f32) -> Tensor {
    Tensor::from_fn(shape, |_| {
        // Sum of uniforms: cheap, bounded, roughly Gaussian.
        let s: f32 = (0..4).map(|_| rng.gen_range(-1.0f32..1.0)).sum();
        s * 0.866 * scale
    })
}

/// Values bounded away from zero, for ops with a kink at the origin.
fn away_from_zero(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    Tensor::from_fn(shape, |_| {
        let m = rng.gen_range(0.1f32..1.5);
        if rng.gen::<bool>() {
            m
        } else {
            -m
        }
    })
}

/// Gradient-check cases for every differentiable primitive, `shapes`
/// random geometries each, all derived from `seed`.
pub fn primitive_cases(seed: u64, shapes: usize) -> Vec<GradCase> {
    let mut cases = Vec::new();
    let base = GradCheckOptions { seed, ..GradCheckOptions::default() };
    for i in 0..shapes as u64 {
        let mut rng = crate::rng::keyed_rng(seed, 0x6772_6164, i);
        let b = rng.gen_range(1..3);
        let c_in = rng.gen_range(1..4);
        let c_out = rng.gen_range(1..4);
        let len = rng.gen_range(4..10);
        let k = rng.gen_range(1..4);
        let d = rng.gen_range(1..3);

        cases.push(GradCase {
            name: format!("conv1d causal #{i} (k={k}, d={d})"),
            inputs: vec![
                randn(&mut rng, &[b, c_in, len], 1.0),
                randn(&mut rng, &[c_out, c_in, k], 0.5),
                randn(&mut rng, &[c_out], 0.5),
            ],
            f: Box::new(move |g, v| g.causal_conv1d(v[0], v[1], Some(v[2]), d)),
            opts: base,
        });
        let pad = (k - 1) * d;
        cases.push(GradCase {
            name: format!("conv1d symmetric + chomp #{i}"),
            inputs: vec![randn(&mut rng, &[b, c_in, len], 1.0), randn(&mut rng, &[c_out, c_in, k], 0.5)],
            f: Box::new(move |g, v| {
                let y = g.conv1d(v[0], v[1], None, d, pad, pad)?;
                g.chomp(y, pad)
            }),
            opts: base,
        });
        cases.push(GradCase {
            name: format!("relu #{i}"),
            inputs: vec![away_from_zero(&mut rng, &[b, c_in, len])],
            f: Box::new(|g, v| Ok(g.relu(v[0]))),
            opts: base,
        });
        cases.push(GradCase {
            name: format!("dropout (training) #{i}"),
            inputs: vec![randn(&mut rng, &[b, c_in, len], 1.0)],
            f: Box::new(|g, v| g.dropout(v[0], 0.3, 5)),
            opts: GradCheckOptions { mode: GraphMode::train(seed, i), ..base },
        });
        let fan_in = rng.gen_range(1..6);
        let fan_out = rng.gen_range(1..6);
        cases.push(GradCase {
            name: format!("linear #{i}"),
            inputs: vec![
                randn(&mut rng, &[b, len, fan_in], 1.0),
                randn(&mut rng, &[fan_in, fan_out], 0.5),
                randn(&mut rng, &[fan_out], 0.5),
            ],
            f: Box::new(|g, v| g.linear(v[0], v[1], Some(v[2]))),
            opts: base,
        });
        let width = rng.gen_range(3..8);
        cases.push(GradCase {
            name: format!("layer_norm #{i}"),
            inputs: vec![
                randn(&mut rng, &[b, len, width], 1.0),
                randn(&mut rng, &[width], 1.0),
                randn(&mut rng, &[width], 1.0),
            ],
            f: Box::new(|g, v| g.layer_norm(v[0], v[1], v[2], 1e-5)),
            opts: GradCheckOptions { eps: 5e-2, ..base },
        });
        cases.push(GradCase {
            name: format!("weight_norm #{i}"),
            inputs: vec![away_from_zero(&mut rng, &[c_out, c_in, k]), randn(&mut rng, &[c_out], 1.0)],
            f: Box::new(|g, v| g.weight_norm(v[0], v[1])),
            opts: GradCheckOptions { eps: 5e-2, ..base },
        });
        let heads = rng.gen_range(1..3);
        let head_dim = rng.gen_range(1..4);
        let chunk = rng.gen_range(2..5);
        let alen = rng.gen_range(3..10);
        let w = heads * head_dim;
        let train = i % 2 == 1;
        cases.push(GradCase {
            name: format!("chunked_attention #{i} (L={alen}, chunk={chunk}, heads={heads}, dropout={train})"),
            inputs: vec![
                randn(&mut rng, &[b, alen, w], 1.0),
                randn(&mut rng, &[b, alen, w], 1.0),
                randn(&mut rng, &[b, alen, w], 1.0),
            ],
            f: Box::new(move |g, v| {
                g.chunked_attention(v[0], v[1], v[2], heads, chunk, if train { 0.2 } else { 0.0 }, 9)
            }),
            opts: GradCheckOptions {
                eps: 5e-2,
                mode: if train { GraphMode::train(seed, i) } else { GraphMode::eval() },
                ..base
            },
        });
        let target: Vec<f32> = randn(&mut rng, &[b, fan_out], 1.0).into_data();
        cases.push(GradCase {
            name: format!("mse_loss #{i}"),
            inputs: vec![randn(&mut rng, &[b, fan_out], 1.0)],
            f: Box::new(move |g, v| g.mse_loss(v[0], &target)),
            opts: base,
        });
        cases.push(GradCase {
            name: format!("gate_mix #{i}"),
            inputs: vec![
                randn(&mut rng, &[b, fan_out], 1.0),
                randn(&mut rng, &[b, fan_out], 1.0),
                randn(&mut rng, &[1], 1.0),
            ],
            f: Box::new(|g, v| g.gate_mix(v[0], v[1], v[2])),
            opts: base,
        });
        let start = rng.gen_range(0..len / 2);
        cases.push(GradCase {
            name: format!("transpose + slice + add #{i}"),
            inputs: vec![randn(&mut rng, &[b, c_in, len], 1.0), randn(&mut rng, &[b, len, c_in], 1.0)],
            f: Box::new(move |g, v| {
                let t = g.transpose_last2(v[1])?;
                let s = g.add(v[0], t)?;
                let s = g.slice_last(s, start, len - start)?;
                let s = g.reshape(s, &[b * c_in * (len - start)])?;
                Ok(g.sum(s))
            }),
            opts: base,
        });
    }
    cases
}

/// Runs a list of cases, returning `(name, report)` per case.
pub fn run_cases(cases: &[GradCase]) -> Result<Vec<(String, GradCheckReport)>> {
    cases.iter().map(|c| Ok((c.name.clone(), check_gradients(&c.inputs, &c.f, c.opts)?))).collect()
}
