//! Backward passes of the composed blocks against central differences of
//! independent double-precision forward implementations.

mod common;

use common::{cab_case, cab_ref, dhb_case, dtb_case, rand_tensor, Check};
use pace_core::model::{cab_forward, Cab};
use pace_nn::{Graph, GraphMode, Tensor, Var};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

const CASES: u64 = 10;
const TOLERANCE: f64 = 1e-3;

fn assert_cases(run: fn(u64) -> (String, Vec<Tensor>, Check)) {
    for case in 0..CASES {
        let (shape, inputs, r) = run(case);
        assert!(r.forward_error <= 1e-5, "case {case} {shape}: forward differs by {:e}", r.forward_error);
        assert!(r.max_rel_error <= TOLERANCE, "case {case} {shape}: {:e}", r.max_rel_error);
        assert_eq!(r.checked, inputs.iter().map(Tensor::len).sum::<usize>());
    }
}

#[test]
fn temporal_block_gradients() {
    assert_cases(dtb_case);
}

#[test]
fn attention_block_gradients() {
    assert_cases(cab_case);
}

#[test]
fn output_block_gradients() {
    assert_cases(dhb_case);
}

#[test]
fn padded_attention_block_matches_reference_at_full_length() {
    let (b, c, l, heads, chunk) = (1, 8, 100, 4, 16);
    assert_eq!((l + (chunk - l % chunk) % chunk) / chunk, 7);
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let mut inputs = vec![rand_tensor(&mut rng, &[b, c, l], 1.0)];
    for _ in 0..4 {
        inputs.push(rand_tensor(&mut rng, &[c, c], 0.6));
        inputs.push(rand_tensor(&mut rng, &[c], 0.1));
    }
    inputs.push(rand_tensor(&mut rng, &[c], 1.0));
    inputs.push(rand_tensor(&mut rng, &[c], 0.3));
    let mut g = Graph::new(GraphMode::eval());
    let v: Vec<Var> = inputs.iter().map(|t| g.constant(t.clone())).collect();
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
    let y = cab_forward(&mut g, &p, v[0], heads, chunk, 0.0, 0).unwrap();
    assert_eq!(g.shape(y), &[b, c, l]);
    let point: Vec<Vec<f64>> = inputs.iter().map(|t| t.data().iter().map(|&x| f64::from(x)).collect()).collect();
    let refs: Vec<&[f64]> = point.iter().map(Vec::as_slice).collect();
    let expected = cab_ref(refs[0], (b, c, l), heads, chunk, &refs[1..]);
    for (a, e) in g.data(y).iter().zip(&expected) {
        assert!((f64::from(*a) - e).abs() <= 1e-5, "{a} vs {e}");
    }
}
