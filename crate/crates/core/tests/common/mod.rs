//! Double-precision reference blocks and the gradient check shared by the
//! block gradient tests and the acceptance suite.

#![allow(dead_code)]

use pace_core::model::{cab_forward, dhb_forward, dtb_forward, Cab, ConvUnit, Dhb, Dtb, DtbSpec, Padding};
use pace_nn::{Graph, GraphMode, NnError, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize], scale: f32) -> Tensor {
    Tensor::from_fn(shape, |_| rng.gen_range(-scale..scale))
}

pub fn to_nn(e: pace_core::Error) -> NnError {
    NnError::InvalidArgument { op: "block", reason: e.to_string() }
}

/// `y[o] = b[o] + Σ_i x[i]·w[i][o]` with `w` input-major.
pub fn affine(x: &[f64], w: &[f64], b: &[f64]) -> Vec<f64> {
    let n = b.len();
    (0..n).map(|o| b[o] + x.iter().enumerate().map(|(i, xi)| xi * w[i * n + o]).sum::<f64>()).collect()
}

/// Causal dilated temporal block on `[B, C, L]`; `units` holds `(v, g, bias)`.
pub fn dtb_ref(x: &[f64], dims: (usize, usize, usize), k: usize, d: usize, units: &[&[f64]]) -> Vec<f64> {
    let (batch, c, l) = dims;
    let mut h = x.to_vec();
    for u in units.chunks(3) {
        let (v, g, bias) = (u[0], u[1], u[2]);
        let w: Vec<f64> = (0..c * c * k)
            .map(|e| {
                let o = e / (c * k);
                let row = &v[o * c * k..(o + 1) * c * k];
                g[o] * v[e] / row.iter().map(|r| r * r).sum::<f64>().sqrt()
            })
            .collect();
        let mut y = vec![0.0; batch * c * l];
        for b in 0..batch {
            for o in 0..c {
                for t in 0..l {
                    let mut acc = bias[o];
                    for i in 0..c {
                        for j in 0..k {
                            let lag = (k - 1 - j) * d;
                            if t >= lag {
                                acc += w[(o * c + i) * k + j] * h[(b * c + i) * l + t - lag];
                            }
                        }
                    }
                    y[(b * c + o) * l + t] = acc.max(0.0);
                }
            }
        }
        h = y;
    }
    x.iter().zip(&h).map(|(a, b)| a + b).collect()
}

/// Attention block on `[B, C, L]` with the sequence left-padded to a
/// multiple of `chunk`; padded keys never enter a softmax.
pub fn cab_ref(x: &[f64], dims: (usize, usize, usize), heads: usize, chunk: usize, p: &[&[f64]]) -> Vec<f64> {
    let (batch, c, l) = dims;
    let [wq, bq, wk, bk, wv, bv, wo, bo, gain, shift] = p[..] else { unreachable!() };
    let chunk = chunk.min(l);
    let pad = (chunk - l % chunk) % chunk;
    let dh = c / heads;
    let mut out = vec![0.0; batch * c * l];
    for b in 0..batch {
        let rows: Vec<Vec<f64>> = (0..l).map(|t| (0..c).map(|ch| x[(b * c + ch) * l + t]).collect()).collect();
        let q: Vec<_> = rows.iter().map(|r| affine(r, wq, bq)).collect();
        let k: Vec<_> = rows.iter().map(|r| affine(r, wk, bk)).collect();
        let v: Vec<_> = rows.iter().map(|r| affine(r, wv, bv)).collect();
        for t in 0..l {
            let keys: Vec<usize> = (0..l).filter(|&s| (s + pad) / chunk == (t + pad) / chunk).collect();
            let mut att = vec![0.0; c];
            for h in 0..heads {
                let r = h * dh..(h + 1) * dh;
                let scores: Vec<f64> = keys
                    .iter()
                    .map(|&s| r.clone().map(|e| q[t][e] * k[s][e]).sum::<f64>() / (dh as f64).sqrt())
                    .collect();
                let m = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let z: f64 = scores.iter().map(|s| (s - m).exp()).sum();
                for (&s, sc) in keys.iter().zip(&scores) {
                    for e in r.clone() {
                        att[e] += (sc - m).exp() / z * v[s][e];
                    }
                }
            }
            let a = affine(&att, wo, bo);
            let res: Vec<f64> = (0..c).map(|i| rows[t][i] + a[i]).collect();
            let mean = res.iter().sum::<f64>() / c as f64;
            let var = res.iter().map(|r| (r - mean).powi(2)).sum::<f64>() / c as f64;
            for i in 0..c {
                out[(b * c + i) * l + t] = gain[i] * (res[i] - mean) / (var + 1e-5).sqrt() + shift[i];
            }
        }
    }
    out
}

/// Gated dual head on `[B, C, L]` with a conv head over the last `w` steps.
pub fn dhb_ref(h: &[f64], dims: (usize, usize, usize), w: usize, p: &[&[f64]]) -> Vec<f64> {
    let (batch, c, l) = dims;
    let [conv_w, conv_b, out_w, out_b, lin_w, lin_b, logit] = p[..] else { unreachable!() };
    let alpha = 1.0 / (1.0 + (-logit[0]).exp());
    let mut y = Vec::new();
    for b in 0..batch {
        let pooled: Vec<f64> = (0..c)
            .map(|o| {
                conv_b[o]
                    + (0..c)
                        .flat_map(|i| (0..w).map(move |j| (i, j)))
                        .map(|(i, j)| conv_w[(o * c + i) * w + j] * h[(b * c + i) * l + l - w + j])
                        .sum::<f64>()
            })
            .collect();
        let last: Vec<f64> = (0..c).map(|i| h[(b * c + i) * l + l - 1]).collect();
        let yc = affine(&pooled, out_w, out_b);
        let yl = affine(&last, lin_w, lin_b);
        y.extend(yc.iter().zip(&yl).map(|(a, b)| alpha * a + (1.0 - alpha) * b));
    }
    y
}

pub struct Check {
    pub max_rel_error: f64,
    pub forward_error: f64,
    pub checked: usize,
}

/// Contracts the block output with fixed random weights, then compares the
/// f32 backward gradient of every input element with the central difference
/// of the f64 reference, using `|a − n| / max(|a|, |n|, 1e−2)`.
pub fn check<F, R>(inputs: &[Tensor], seed: u64, block: F, reference: R) -> Check
where
    F: Fn(&mut Graph, &[Var]) -> pace_nn::Result<Var>,
    R: Fn(&[&[f64]]) -> Vec<f64>,
{
    let mut g = Graph::new(GraphMode::eval());
    let vars: Vec<Var> = inputs.iter().map(|t| g.param(t.clone())).collect();
    let y = block(&mut g, &vars).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let weights: Vec<f32> = (0..g.value(y).len()).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let output = g.data(y).to_vec();
    let loss = g.weighted_sum(y, &weights).unwrap();
    g.backward(loss).unwrap();

    let mut point: Vec<Vec<f64>> = inputs.iter().map(|t| t.data().iter().map(|&v| f64::from(v)).collect()).collect();
    let eval = |point: &[Vec<f64>]| {
        let refs: Vec<&[f64]> = point.iter().map(Vec::as_slice).collect();
        reference(&refs)
    };
    let forward_error = eval(&point).iter().zip(&output).map(|(r, &o)| (r - f64::from(o)).abs()).fold(0.0, f64::max);
    let scalar = |point: &[Vec<f64>]| eval(point).iter().zip(&weights).map(|(y, &w)| y * f64::from(w)).sum::<f64>();

    let eps = 1e-6;
    let mut out = Check { max_rel_error: 0.0, forward_error, checked: 0 };
    for (ti, v) in vars.iter().enumerate() {
        let analytic = g.grad(*v).map(<[f32]>::to_vec).unwrap_or_else(|| vec![0.0; inputs[ti].len()]);
        for e in 0..inputs[ti].len() {
            let orig = point[ti][e];
            point[ti][e] = orig + eps;
            let plus = scalar(&point);
            point[ti][e] = orig - eps;
            let minus = scalar(&point);
            point[ti][e] = orig;
            let numeric = (plus - minus) / (2.0 * eps);
            let a = f64::from(analytic[e]);
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-2);
            out.max_rel_error = out.max_rel_error.max(rel);
            out.checked += 1;
        }
    }
    out
}

pub fn shape(rng: &mut ChaCha8Rng) -> (usize, usize, usize) {
    (rng.gen_range(1..=2), rng.gen_range(2..=4) * 2, rng.gen_range(6..=14))
}
/// One seeded temporal block case; returns its shape and the check.
pub fn dtb_case(case: u64) -> (String, Vec<Tensor>, Check) {
    let mut rng = ChaCha8Rng::seed_from_u64(case);
    let (b, c, l) = shape(&mut rng);
    let k = rng.gen_range(2..=3);
    let d = rng.gen_range(1..=3);
    let mut inputs = vec![rand_tensor(&mut rng, &[b, c, l], 1.0)];
    for _ in 0..2 {
        inputs.push(rand_tensor(&mut rng, &[c, c, k], 0.6));
        inputs.push(Tensor::from_fn(&[c], |_| rng.gen_range(0.5..1.5)));
        inputs.push(rand_tensor(&mut rng, &[c], 0.3));
    }
    let block = |g: &mut Graph, v: &[Var]| {
        let p = Dtb { units: v[1..].chunks(3).map(|u| ConvUnit { v: u[0], g: u[1], b: u[2] }).collect() };
        let spec = DtbSpec { dilation: d, padding: Padding::Causal, dropout: 0.2, site: 0 };
        dtb_forward(g, &p, v[0], &spec).map_err(to_nn)
    };
    let r = check(&inputs, case, block, |p| dtb_ref(p[0], (b, c, l), k, d, &p[1..]));
    (format!("B={b} C={c} L={l} k={k} d={d}"), inputs, r)
}

pub fn cab_case(case: u64) -> (String, Vec<Tensor>, Check) {
    let mut rng = ChaCha8Rng::seed_from_u64(100 + case);
    let (b, c, l) = shape(&mut rng);
    let heads = if c % 4 == 0 { 2 } else { 1 };
    let chunk = rng.gen_range(3..=6);
    let mut inputs = vec![rand_tensor(&mut rng, &[b, c, l], 1.0)];
    for _ in 0..4 {
        inputs.push(rand_tensor(&mut rng, &[c, c], 0.6));
        inputs.push(rand_tensor(&mut rng, &[c], 0.2));
    }
    inputs.push(Tensor::from_fn(&[c], |_| rng.gen_range(0.5..1.5)));
    inputs.push(rand_tensor(&mut rng, &[c], 0.3));
    let block = |g: &mut Graph, v: &[Var]| {
        let p = Cab {
            wq: v[1],
            bq: v[2],
            wk: v[3],
            bk: v[4],
            wv: v[5],
            bv: v[6],
            wo: v[7],
            bo: v[8],
            gain: v[9],
            shift: v[10],
        };
        cab_forward(g, &p, v[0], heads, chunk, 0.1, 0).map_err(to_nn)
    };
    let r = check(&inputs, case, block, |p| cab_ref(p[0], (b, c, l), heads, chunk, &p[1..]));
    (format!("B={b} C={c} L={l} heads={heads} chunk={chunk}"), inputs, r)
}

pub fn dhb_case(case: u64) -> (String, Vec<Tensor>, Check) {
    let mut rng = ChaCha8Rng::seed_from_u64(200 + case);
    let (b, c, l) = shape(&mut rng);
    let w = rng.gen_range(1..=5);
    let h = rng.gen_range(1..=6);
    let inputs = vec![
        rand_tensor(&mut rng, &[b, c, l], 1.0),
        rand_tensor(&mut rng, &[c, c, w], 0.5),
        rand_tensor(&mut rng, &[c], 0.2),
        rand_tensor(&mut rng, &[c, h], 0.5),
        rand_tensor(&mut rng, &[h], 0.2),
        rand_tensor(&mut rng, &[c, h], 0.5),
        rand_tensor(&mut rng, &[h], 0.2),
        rand_tensor(&mut rng, &[1], 2.0),
    ];
    let block = |g: &mut Graph, v: &[Var]| {
        let p = Dhb {
            conv_w: v[1],
            conv_b: v[2],
            conv_out_w: v[3],
            conv_out_b: v[4],
            linear_w: v[5],
            linear_b: v[6],
            alpha_logit: v[7],
        };
        dhb_forward(g, &p, v[0], w).map_err(to_nn)
    };
    let r = check(&inputs, case, block, |p| dhb_ref(p[0], (b, c, l), w, &p[1..]));
    (format!("B={b} C={c} L={l} w={w} H={h}"), inputs, r)
}

/// Multi-head attention over `[B, L, C]` with a block-diagonal mask, blocks
/// aligned to the right end of the sequence.
pub fn masked_full_attention(q: &Tensor, k: &Tensor, v: &Tensor, heads: usize, chunk: usize) -> Vec<f64> {
    let [b, l, c] = q.shape()[..] else { unreachable!() };
    let dh = c / heads;
    let pad = (chunk - l % chunk) % chunk;
    let block = |t: usize| (t + pad) / chunk;
    let at = |t: &Tensor, bi: usize, i: usize, e: usize| f64::from(t.data()[(bi * l + i) * c + e]);
    let mut out = vec![0.0; b * l * c];
    for bi in 0..b {
        for h in 0..heads {
            for i in 0..l {
                let keys: Vec<usize> = (0..l).filter(|&j| block(i) == block(j)).collect();
                let s: Vec<f64> = keys
                    .iter()
                    .map(|&j| {
                        (0..dh).map(|e| at(q, bi, i, h * dh + e) * at(k, bi, j, h * dh + e)).sum::<f64>()
                            / (dh as f64).sqrt()
                    })
                    .collect();
                let m = s.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let z: f64 = s.iter().map(|x| (x - m).exp()).sum();
                for (&j, sj) in keys.iter().zip(&s) {
                    for e in 0..dh {
                        out[(bi * l + i) * c + h * dh + e] += (sj - m).exp() / z * at(v, bi, j, h * dh + e);
                    }
                }
            }
        }
    }
    out
}
