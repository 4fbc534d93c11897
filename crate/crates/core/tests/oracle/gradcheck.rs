//! Central finite-difference oracle for the autodiff graph.
//!
//! Every check rebuilds the forward pass from scratch for each perturbed
//! coordinate, so it shares nothing with the adjoint rules it validates.

#![allow(dead_code)]

use gtbev::tensor::{Graph, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const STEP: f64 = 1e-6;
pub const TOLERANCE: f64 = 1e-4;

/// A scalar-valued function of the leaf tensors, expressed on a graph.
pub type Build<'a> = dyn Fn(&mut Graph<f64>, &[Var]) -> Var + 'a;

/// Relative error with a small absolute floor so that near-zero gradients
/// are compared on the scale of finite-difference round-off.
pub fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-3)
}

fn eval(build: &Build<'_>, leaves: &[Tensor<f64>]) -> f64 {
    let mut g = Graph::new();
    let vars: Vec<Var> = leaves.iter().map(|t| g.constant(t.clone())).collect();
    let out = build(&mut g, &vars);
    g.value(out).data()[0]
}

/// Maximum relative error between the graph's gradients and central finite
/// differences over every coordinate of every leaf.
pub fn max_gradient_error(build: &Build<'_>, leaves: &[Tensor<f64>]) -> f64 {
    let mut g = Graph::new();
    let vars: Vec<Var> = leaves.iter().map(|t| g.param(t.clone())).collect();
    let out = build(&mut g, &vars);
    let grads = g.backward(out).expect("backward");
    let mut worst = 0.0f64;
    for (li, leaf) in leaves.iter().enumerate() {
        let analytic = grads.get(vars[li]).expect("leaf gradient").data().to_vec();
        for k in 0..leaf.numel() {
            let mut plus = leaves.to_vec();
            plus[li].data_mut()[k] += STEP;
            let mut minus = leaves.to_vec();
            minus[li].data_mut()[k] -= STEP;
            let numeric = (eval(build, &plus) - eval(build, &minus)) / (2.0 * STEP);
            worst = worst.max(rel_err(analytic[k], numeric));
        }
    }
    worst
}

pub fn random_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    let n = shape.iter().product();
    let data = (0..n).map(|_| rng.gen_range(-1.5..1.5)).collect();
    Tensor::new(shape.to_vec(), data).unwrap()
}

/// Projects `out` onto a fixed random tensor so every output coordinate
/// contributes to the scalar.
pub fn project(g: &mut Graph<f64>, out: Var, seed: u64) -> Var {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let w = random_tensor(&mut rng, g.shape(out));
    let w = g.constant(w);
    let prod = g.mul(out, w).unwrap();
    g.sum(prod)
}

/// Named single-primitive cases: `(name, leaves, build)`.
pub fn primitive_cases() -> Vec<(&'static str, Vec<Tensor<f64>>, Box<Build<'static>>)> {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let mut t = |s: &[usize]| random_tensor(&mut rng, s);
    let mut cases: Vec<(&'static str, Vec<Tensor<f64>>, Box<Build<'static>>)> = Vec::new();
    macro_rules! case {
        ($name:expr, [$($shape:expr),*], $f:expr) => {
            cases.push(($name, vec![$(t(&$shape)),*], Box::new($f)));
        };
    }
    case!("matmul", [[3, 4], [4, 2]], |g, v| {
        let o = g.matmul(v[0], v[1]).unwrap();
        project(g, o, 1)
    });
    case!("transpose", [[3, 2]], |g, v| {
        let o = g.transpose(v[0]).unwrap();
        project(g, o, 2)
    });
    case!("add", [[2, 3], [2, 3]], |g, v| {
        let o = g.add(v[0], v[1]).unwrap();
        project(g, o, 3)
    });
    case!("add_scalar_broadcast", [[2, 3], [1]], |g, v| {
        let o = g.add(v[1], v[0]).unwrap();
        project(g, o, 4)
    });
    case!("sub", [[2, 3], [1]], |g, v| {
        let o = g.sub(v[0], v[1]).unwrap();
        project(g, o, 5)
    });
    case!("mul", [[2, 3], [2, 3]], |g, v| {
        let o = g.mul(v[0], v[1]).unwrap();
        project(g, o, 6)
    });
    case!("mul_scalar_broadcast", [[1], [3, 2]], |g, v| {
        let o = g.mul(v[0], v[1]).unwrap();
        project(g, o, 7)
    });
    case!("add_row", [[3, 4], [4]], |g, v| {
        let o = g.add_row(v[0], v[1]).unwrap();
        project(g, o, 8)
    });
    case!("scale", [[5]], |g, v| {
        let o = g.scale(v[0], -0.7);
        project(g, o, 9)
    });
    case!("add_scalar", [[5]], |g, v| {
        let o = g.add_scalar(v[0], 0.3);
        project(g, o, 10)
    });
    case!("relu", [[3, 3]], |g, v| {
        let o = g.relu(v[0]);
        project(g, o, 11)
    });
    case!("sigmoid", [[3, 3]], |g, v| {
        let o = g.sigmoid(v[0]);
        project(g, o, 12)
    });
    case!("exp", [[4]], |g, v| {
        let o = g.exp(v[0]);
        project(g, o, 13)
    });
    case!("log", [[4]], |g, v| {
        let e = g.exp(v[0]);
        let o = g.log(e);
        project(g, o, 14)
    });
    case!("abs", [[2, 4]], |g, v| {
        let o = g.abs(v[0]);
        project(g, o, 15)
    });
    case!("clamp_max", [[2, 4]], |g, v| {
        let o = g.clamp_max(v[0], 0.25);
        project(g, o, 16)
    });
    case!("softmax_axis0", [[3, 4]], |g, v| {
        let o = g.softmax(v[0], 0).unwrap();
        project(g, o, 17)
    });
    case!("softmax_axis1", [[3, 4]], |g, v| {
        let o = g.softmax(v[0], 1).unwrap();
        project(g, o, 18)
    });
    case!("layer_norm", [[3, 5], [5], [5]], |g, v| {
        let o = g.layer_norm(v[0], v[1], v[2], 1e-5).unwrap();
        project(g, o, 19)
    });
    case!("l2_normalize_axis0", [[3, 4]], |g, v| {
        let o = g.l2_normalize(v[0], 0).unwrap();
        project(g, o, 20)
    });
    case!("l2_normalize_axis1", [[3, 4]], |g, v| {
        let o = g.l2_normalize(v[0], 1).unwrap();
        project(g, o, 21)
    });
    case!("cross_entropy", [[4, 5]], |g, v| {
        let o = g.cross_entropy(v[0], &[0, 3, 4, 1]).unwrap();
        project(g, o, 22)
    });
    case!("sum", [[2, 3]], |g, v| {
        let s = g.sum(v[0]);
        let sq = g.mul(s, s).unwrap();
        g.sum(sq)
    });
    case!("mean", [[2, 3]], |g, v| {
        let s = g.mean(v[0]);
        let e = g.exp(s);
        g.sum(e)
    });
    case!("concat_axis0", [[2, 3], [1, 3]], |g, v| {
        let o = g.concat(&[v[0], v[1]], 0).unwrap();
        project(g, o, 23)
    });
    case!("concat_axis1", [[2, 3], [2, 2]], |g, v| {
        let o = g.concat(&[v[0], v[1], v[0]], 1).unwrap();
        project(g, o, 24)
    });
    case!("slice_axis0", [[4, 3]], |g, v| {
        let o = g.slice(v[0], 0, 1, 3).unwrap();
        project(g, o, 25)
    });
    case!("slice_axis1", [[3, 5]], |g, v| {
        let o = g.slice(v[0], 1, 2, 5).unwrap();
        project(g, o, 26)
    });
    case!("gather_rows", [[4, 3]], |g, v| {
        let o = g.gather_rows(v[0], &[3, 0, 3]).unwrap();
        project(g, o, 27)
    });
    case!("gather_mean", [[5, 3]], |g, v| {
        let o = g.gather_mean(v[0], &[1, 2, 4]).unwrap();
        project(g, o, 28)
    });
    case!("reshape", [[2, 6]], |g, v| {
        let o = g.reshape(v[0], &[3, 4]).unwrap();
        let s = g.softmax(o, 1).unwrap();
        project(g, s, 29)
    });
    case!("attention_one_head", [[3, 4], [5, 4], [5, 4]], |g, v| {
        let o = g.attention(v[0], v[1], v[2], 1, None).unwrap();
        project(g, o, 30)
    });
    case!(
        "attention_two_heads_bias",
        [[3, 4], [5, 4], [5, 4], [3, 5]],
        |g, v| {
            let o = g.attention(v[0], v[1], v[2], 2, Some(v[3])).unwrap();
            project(g, o, 31)
        }
    );
    case!("attention_shared_qkv", [[4, 6]], |g, v| {
        let o = g.attention(v[0], v[0], v[0], 3, None).unwrap();
        project(g, o, 32)
    });
    cases
}

/// Builds a random composition of primitives over `leaves`, choosing every
/// step from `seed`. All intermediate tensors stay at or below 64 elements.
pub fn random_composition(seed: u64) -> (Vec<Tensor<f64>>, Box<Build<'static>>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let rows = rng.gen_range(1..=4);
    let cols = rng.gen_range(2..=4);
    let n_steps = rng.gen_range(3..=7);
    let ops: Vec<u32> = (0..n_steps).map(|_| rng.gen_range(0..19)).collect();
    let op_seed: u64 = rng.gen();
    // Leaf 0 is the running value; the rest feed binary ops as needed.
    let mut leaves = vec![random_tensor(&mut rng, &[rows, cols])];
    for _ in 0..n_steps {
        leaves.push(random_tensor(&mut rng, &[8, 8]));
    }
    let build = move |g: &mut Graph<f64>, v: &[Var]| -> Var {
        let mut rng = ChaCha8Rng::seed_from_u64(op_seed);
        let mut x = v[0];
        for (step, &op) in ops.iter().enumerate() {
            let (r, c) = g.value(x).dims2().unwrap();
            let aux = v[step + 1];
            // Square 8x8 auxiliary leaf, sliced to whatever shape is needed.
            let aux_of = |g: &mut Graph<f64>, rr: usize, cc: usize| {
                let a = g.slice(aux, 0, 0, rr).unwrap();
                g.slice(a, 1, 0, cc).unwrap()
            };
            x = match op {
                0 => {
                    let k = rng.gen_range(1..=4).min(64 / r);
                    let w = aux_of(g, c, k);
                    g.matmul(x, w).unwrap()
                }
                1 => {
                    let y = aux_of(g, r, c);
                    g.add(x, y).unwrap()
                }
                2 => {
                    let y = aux_of(g, r, c);
                    g.mul(x, y).unwrap()
                }
                3 => {
                    let b = aux_of(g, 1, c);
                    g.add_row(x, b).unwrap()
                }
                4 => g.sigmoid(x),
                5 => g.relu(x),
                6 => {
                    let s = g.scale(x, 0.5);
                    g.exp(s)
                }
                7 => g.softmax(x, rng.gen_range(0..2)).unwrap(),
                8 => {
                    let gain = aux_of(g, 1, c);
                    let bias = aux_of(g, 1, c);
                    let gain = g.reshape(gain, &[c]).unwrap();
                    g.layer_norm(x, gain, bias, 1e-5).unwrap()
                }
                9 => g.l2_normalize(x, rng.gen_range(0..2)).unwrap(),
                10 => g.transpose(x).unwrap(),
                11 if c < 8 => {
                    let y = aux_of(g, r, 1);
                    g.concat(&[x, y], 1).unwrap()
                }
                12 if c > 1 => g.slice(x, 1, 0, c - 1).unwrap(),
                13 => {
                    let rows: Vec<usize> = (0..r.clamp(2, 8).min(64 / c))
                        .map(|_| rng.gen_range(0..r))
                        .collect();
                    g.gather_rows(x, &rows).unwrap()
                }
                14 => {
                    let rows: Vec<usize> = (0..r).filter(|_| rng.gen_bool(0.7)).collect();
                    let rows = if rows.is_empty() { vec![0] } else { rows };
                    g.gather_mean(x, &rows).unwrap()
                }
                15 if c > 1 => {
                    let targets: Vec<usize> = (0..r).map(|_| rng.gen_range(0..c)).collect();
                    let ce = g.cross_entropy(x, &targets).unwrap();
                    g.reshape(ce, &[r, 1]).unwrap()
                }
                16 => {
                    let s = g.sigmoid(x);
                    let s = g.add_scalar(s, 0.5);
                    g.log(s)
                }
                17 => {
                    let nk = rng.gen_range(1..=4);
                    let heads = if c % 2 == 0 { 2 } else { 1 };
                    let k = aux_of(g, nk, c);
                    let vv = g.slice(aux, 0, 8 - nk, 8).unwrap();
                    let vv = g.slice(vv, 1, 8 - c, 8).unwrap();
                    g.attention(x, k, vv, heads, None).unwrap()
                }
                _ => {
                    let y = aux_of(g, 1, 1);
                    let y = g.reshape(y, &[1]).unwrap();
                    let t = g.mul(x, y).unwrap();
                    g.abs(t)
                }
            };
            assert!(g.value(x).numel() <= 64);
        }
        project(g, x, op_seed ^ 0x5eed)
    };
    (leaves, Box::new(build))
}
