mod common;

use common::*;
use kws::autodiff::{analytic_gradients, grad_check, Graph, Tensor, Var};
use kws::Result;
use proptest::prelude::*;

/// Weights in [0.5, 1.5] keep every gradient element away from zero, where
/// the relative error is dominated by round-off.
fn positive_sum<'g>(y: Var<'g>, seed: u64) -> Result<Var<'g>> {
    let w = random_tensor(&y.shape(), seed).map(|v| 1.0 + 0.5 * v);
    y.mul(y.graph().constant(w))?.sum_all()
}

fn shape_strategy() -> impl Strategy<Value = Vec<usize>> {
    prop::collection::vec(1usize..=8, 1..=3)
}

const EPS: f64 = 1e-5;
const TOL: f64 = 1e-6;

fn objective<F>(f: F) -> F
where
    F: for<'g> Fn(&'g Graph, &[Var<'g>]) -> Result<Var<'g>>,
{
    f
}

fn check(f: impl for<'g> Fn(&'g Graph, &[Var<'g>]) -> Result<Var<'g>> + Sync, params: &[Tensor]) -> f64 {
    grad_check(f, params, EPS).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn unary_primitives(shape in shape_strategy(), seed in any::<u64>(), op in 0usize..8) {
        let x = random_tensor(&shape, seed);
        // log needs positive inputs. Near 0 the x² and x³ gradients shrink
        // below round-off (plus an ε² term for x³), and relu has its kink.
        let x = match op {
            5 => x.map(|v| v.abs() + 0.5),
            2 | 6 | 7 => x.map(|v| v + 0.2 * v.signum()),
            _ => x,
        };
        let err = check(
            move |_, v| {
                let y = match op {
                    0 => v[0].sigmoid(),
                    1 => v[0].tanh(),
                    2 => v[0].relu(),
                    3 => v[0].exp(),
                    4 => v[0].scale(-1.7).offset(0.3),
                    5 => v[0].log(),
                    6 => v[0].powf(3.0),
                    _ => v[0].mul(v[0])?,
                };
                positive_sum(y, seed ^ 1)
            },
            &[x],
        );
        prop_assert!(err < TOL, "op {} err {}", op, err);
    }

    // Softmax gradients of any scalar sum to zero along the axis, so some
    // elements always sit near zero. Compare whole vectors instead.
    #[test]
    fn softmax_gradient_normwise(shape in shape_strategy(), seed in any::<u64>(), axis_pick in 0usize..3) {
        let x = random_tensor(&shape, seed).map(|v| 2.0 * v);
        let axis = axis_pick % shape.len();
        let f = objective(move |_, v| positive_sum(v[0].softmax(axis)?, seed ^ 3));
        let analytic = analytic_gradients(&f, std::slice::from_ref(&x)).unwrap().remove(0);
        let numeric: Vec<f64> = (0..x.numel())
            .map(|i| {
                let at = |d: f64| {
                    let mut p = x.clone();
                    p.data_mut()[i] += d;
                    let g = Graph::new();
                    f(&g, &[g.constant(p)]).unwrap().value().item()
                };
                (at(EPS) - at(-EPS)) / (2.0 * EPS)
            })
            .collect();
        let diff: f64 = analytic.data().iter().zip(&numeric).map(|(a, n)| (a - n).powi(2)).sum::<f64>().sqrt();
        let norm = |v: &[f64]| v.iter().map(|a| a * a).sum::<f64>().sqrt();
        let err = diff / (norm(analytic.data()) + norm(&numeric)).max(1e-8);
        prop_assert!(err < TOL, "axis {} err {}", axis, err);
    }

    #[test]
    fn binary_broadcast_primitives(
        shape in shape_strategy(),
        mask in any::<u8>(),
        seed in any::<u64>(),
        op in 0usize..4,
    ) {
        // b broadcasts along the axes where the mask bit is set
        let b_shape: Vec<usize> = shape
            .iter()
            .enumerate()
            .map(|(i, &d)| if mask >> i & 1 == 1 { 1 } else { d })
            .collect();
        let a = random_tensor(&shape, seed);
        let b = random_tensor(&b_shape, seed.wrapping_add(7));
        let err = check(
            move |_, v| {
                let y = match op {
                    0 => v[0].add(v[1])?,
                    1 => v[0].sub(v[1])?,
                    2 => v[0].mul(v[1])?,
                    _ => v[0].maximum(v[1])?,
                };
                positive_sum(y, seed ^ 2)
            },
            &[a, b],
        );
        prop_assert!(err < TOL, "op {} err {}", op, err);
    }

    #[test]
    fn matmul_grad(m in 1usize..=8, k in 1usize..=8, n in 1usize..=8, seed in any::<u64>()) {
        let a = random_tensor(&[m, k], seed).map(|v| 1.0 + 0.5 * v);
        let b = random_tensor(&[k, n], seed ^ 3).map(|v| 1.0 + 0.5 * v);
        let err = check(move |_, v| positive_sum(v[0].matmul(v[1])?, seed), &[a, b]);
        prop_assert!(err < TOL, "err {}", err);
    }

    #[test]
    fn structural_primitives(shape in prop::collection::vec(1usize..=8, 2..=3), seed in any::<u64>(), op in 0usize..7) {
        let x = random_tensor(&shape, seed);
        let rank = shape.len();
        let err = check(
            move |g, v| {
                let x = v[0];
                let y = match op {
                    0 => x.reshape(&[x.value().numel()])?,
                    1 => {
                        let perm: Vec<usize> = (0..rank).rev().collect();
                        x.transpose(&perm)?
                    }
                    2 => g.concat(&[x, x.scale(2.0)], rank - 1)?,
                    3 => {
                        let d = x.shape()[0];
                        x.slice(0, d / 2, d)?
                    }
                    4 => x.sum(1, seed % 2 == 0)?,
                    5 => x.mean(0, false)?,
                    _ => {
                        let mut target = vec![3];
                        target.extend(x.shape());
                        x.broadcast_to(&target)?
                    }
                };
                positive_sum(y.tanh(), seed ^ 5)
            },
            &[x],
        );
        prop_assert!(err < TOL, "op {} err {}", op, err);
    }

    #[test]
    fn softmax_shift_invariance(shape in prop::collection::vec(1usize..=8, 1..=3), seed in any::<u64>(), c in -50.0f64..50.0) {
        let x = random_tensor(&shape, seed).map(|v| 5.0 * v);
        let axis = shape.len() - 1;
        let a = graph_value(|g| g.constant(x.clone()).softmax(axis));
        let b = graph_value(|g| g.constant(x.map(|v| v + c)).softmax(axis));
        prop_assert!(max_abs_diff(a.data(), b.data()) < 1e-12);
        for row in a.data().chunks(shape[axis]) {
            prop_assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn matmul_matches_triple_loop(m in 1usize..=8, k in 1usize..=8, n in 1usize..=8, seed in any::<u64>()) {
        let a = random_tensor(&[m, k], seed);
        let b = random_tensor(&[k, n], seed ^ 9);
        let c = graph_value(|g| g.constant(a.clone()).matmul(g.constant(b.clone())));
        let mut naive = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                for p in 0..k {
                    naive[i * n + j] += a.data()[i * k + p] * b.data()[p * n + j];
                }
            }
        }
        prop_assert!(max_abs_diff(c.data(), &naive) < 1e-12);
    }
}

#[test]
fn sigmoid_of_linear_map() {
    let w = random_tensor(&[5, 4], 1);
    let x = random_tensor(&[4, 3], 2);
    let err = grad_check(|_, v| v[0].matmul(v[1]).map(|y| y.sigmoid())?.sum_all(), &[w, x], EPS).unwrap();
    assert!(err < 1e-6, "{err}");
}

#[test]
fn reuse_accumulates_both_paths() {
    let x = random_tensor(&[3, 4], 11);
    let w = random_tensor(&[3, 4], 12);
    let g = Graph::new();
    let xv = g.param(x.clone());
    // x used twice: sum(w ⊙ x ⊙ x) has gradient 2 w ⊙ x
    let y = xv
        .mul(xv)
        .unwrap()
        .mul(g.constant(w.clone()))
        .unwrap()
        .sum_all()
        .unwrap();
    let grads = g.backward(y).unwrap();
    let expected: Vec<f64> = x.data().iter().zip(w.data()).map(|(a, b)| 2.0 * a * b).collect();
    assert!(max_abs_diff(grads.wrt(xv).data(), &expected) < 1e-15);
}

#[test]
fn forward_is_deterministic() {
    let x = random_tensor(&[4, 6], 5);
    let run = || {
        graph_value(|g| {
            let v = g.constant(x.clone());
            v.matmul(v.transpose(&[1, 0])?)?.softmax(1)?.log().tanh().sum(0, false)
        })
    };
    assert_eq!(run(), run());
}

#[test]
fn shape_errors_name_primitive() {
    let g = Graph::new();
    let a = g.constant(Tensor::zeros(&[2, 3]));
    let b = g.constant(Tensor::zeros(&[4, 2]));
    let err = a.matmul(b).unwrap_err().to_string();
    assert!(err.contains("matmul") && err.contains("[2, 3]"), "{err}");
    assert!(a.add(b).unwrap_err().to_string().contains("add"));
}
