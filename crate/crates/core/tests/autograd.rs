//! Gradient checks for every differentiable op, plus softmax properties.

use pointfuse::autograd::{finite_diff_check, Fault, Tape, TapeOptions, Tensor, Var};
use pointfuse::chamfer::ChamferVariant;
use pointfuse::error::Result;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const H: f64 = 1e-5;
const TOL: f64 = 1e-4;

fn random(shape: &[usize], seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
}

/// Weighted sum so every output element gets a distinct upstream gradient.
fn weighted<'t>(y: Var<'t>, seed: u64) -> Result<Var<'t>> {
    let w = y.tape().constant(random(&y.shape(), seed));
    Ok(y.mul(w)?.sum())
}

fn check<F>(name: &str, mut params: Vec<Tensor>, f: F)
where
    F: for<'t> Fn(&'t Tape, &[Var<'t>]) -> Result<Var<'t>>,
{
    let report = finite_diff_check(&mut params, None, H, TOL, TapeOptions::wide(), f).unwrap();
    assert!(report.passed(), "{name}: {report:?}");
    assert!(report.checked > 0);
}

#[test]
fn elementwise_ops() {
    check("add", vec![random(&[2, 3], 1), random(&[2, 3], 2)], |_, v| {
        weighted(v[0].add(v[1])?, 9)
    });
    check("sub", vec![random(&[2, 3], 1), random(&[2, 3], 2)], |_, v| {
        weighted(v[0].sub(v[1])?, 9)
    });
    check("mul", vec![random(&[2, 3], 1), random(&[2, 3], 2)], |_, v| {
        weighted(v[0].mul(v[1])?, 9)
    });
    check("scale", vec![random(&[4], 3)], |_, v| weighted(v[0].scale(-2.5), 9));
    check("gelu", vec![random(&[3, 4], 4)], |_, v| weighted(v[0].gelu(), 9));
}

#[test]
fn relu_away_from_kink() {
    // Keep inputs away from 0 where the derivative is undefined.
    let mut t = random(&[10], 5);
    for x in t.data_mut() {
        *x += 0.2 * x.signum();
    }
    check("relu", vec![t], |_, v| weighted(v[0].relu(), 9));
}

#[test]
fn broadcasting_ops() {
    check("broadcast_to", vec![random(&[4], 6)], |_, v| {
        weighted(v[0].broadcast_to(&[2, 3, 4])?, 9)
    });
    check("add_broadcast", vec![random(&[2, 3, 4], 7), random(&[4], 8)], |_, v| {
        weighted(v[0].add_broadcast(v[1])?, 9)
    });
}

#[test]
fn matmul_variants() {
    check("matmul 2d", vec![random(&[3, 4], 1), random(&[4, 2], 2)], |_, v| {
        weighted(v[0].matmul(v[1])?, 9)
    });
    check(
        "matmul batched",
        vec![random(&[2, 3, 4], 1), random(&[2, 4, 5], 2)],
        |_, v| weighted(v[0].matmul(v[1])?, 9),
    );
    check(
        "matmul broadcast rhs",
        vec![random(&[2, 3, 4], 1), random(&[4, 5], 2)],
        |_, v| weighted(v[0].matmul(v[1])?, 9),
    );
}

#[test]
fn layout_ops() {
    check("permute", vec![random(&[2, 3, 4], 1)], |_, v| {
        weighted(v[0].permute(&[2, 0, 1])?, 9)
    });
    check("transpose", vec![random(&[2, 3, 4], 1)], |_, v| {
        weighted(v[0].transpose()?, 9)
    });
    check("reshape", vec![random(&[2, 6], 1)], |_, v| {
        weighted(v[0].reshape(&[3, 4])?, 9)
    });
    check("concat", vec![random(&[2, 2, 3], 1), random(&[2, 1, 3], 2)], |_, v| {
        weighted(Var::concat(&[v[0], v[1]], 1)?, 9)
    });
    check("gather_rows", vec![random(&[2, 3, 2], 1)], |_, v| {
        weighted(v[0].gather_rows(&[vec![2, 0, 0], vec![1, 2, 0]])?, 9)
    });
}

#[test]
fn reductions() {
    check("sum", vec![random(&[2, 3], 1)], |_, v| Ok(v[0].sum().scale(1.5)));
    check("mean", vec![random(&[2, 3], 1)], |_, v| Ok(v[0].mean().scale(1.5)));
    // Random values are distinct, so the max is unique.
    check("max_axis", vec![random(&[2, 5, 3], 1)], |_, v| {
        weighted(v[0].max_axis(1)?, 9)
    });
}

#[test]
fn softmax_and_layernorm() {
    check("softmax last", vec![random(&[2, 3, 4], 1)], |_, v| {
        weighted(v[0].softmax(2)?, 9)
    });
    check("softmax middle", vec![random(&[2, 3, 4], 1)], |_, v| {
        weighted(v[0].softmax(1)?, 9)
    });
    let mut gamma = random(&[4], 2);
    for g in gamma.data_mut() {
        *g += 1.5;
    }
    check("layernorm", vec![random(&[3, 4], 1), gamma, random(&[4], 3)], |_, v| {
        weighted(v[0].layernorm(v[1], v[2], 1e-5)?, 9)
    });
}

#[test]
fn chamfer_op() {
    let targets = vec![
        (0..5).map(|i| [i as f64 * 0.3, 0.1, -0.2]).collect::<Vec<_>>(),
        (0..4).map(|i| [0.0, i as f64 * 0.4, 0.5]).collect::<Vec<_>>(),
    ];
    for variant in [ChamferVariant::L2Sq, ChamferVariant::L1] {
        let t = targets.clone();
        check(variant.name(), vec![random(&[2, 6, 3], 11)], move |_, v| {
            v[0].chamfer_loss(&t, variant)
        });
    }
}

#[test]
fn fault_injection_breaks_matmul_check() {
    let mut params = vec![random(&[3, 4], 1), random(&[4, 2], 2)];
    let options = TapeOptions {
        fault: Some(Fault::FlipMatmulGrad),
        ..TapeOptions::wide()
    };
    let report = finite_diff_check(&mut params, None, H, TOL, options, |_, v| {
        weighted(v[0].matmul(v[1])?, 9)
    })
    .unwrap();
    assert!(!report.passed());
}

proptest! {
    #[test]
    fn softmax_rows_are_distributions(
        data in prop::collection::vec(-50.0f64..50.0, 12),
        axis in 0usize..3,
    ) {
        let tape = Tape::new(TapeOptions::wide());
        let x = tape.constant(Tensor::new(vec![2, 3, 2], data).unwrap());
        let y = x.softmax(axis).unwrap().to_tensor();
        let shape = [2usize, 3, 2];
        let stride: usize = shape[axis + 1..].iter().product();
        for (i, v) in y.data().iter().enumerate() {
            prop_assert!(*v >= 0.0);
            if (i / stride).is_multiple_of(shape[axis]) {
                let s: f64 = (0..shape[axis]).map(|k| y.data()[i + k * stride]).sum();
                prop_assert!((s - 1.0).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn softmax_is_shift_invariant(data in prop::collection::vec(-10.0f64..10.0, 5), c in -100.0f64..100.0) {
        let tape = Tape::new(TapeOptions::wide());
        let a = tape.constant(Tensor::from_vec(data.clone())).softmax(0).unwrap().to_tensor();
        let shifted: Vec<f64> = data.iter().map(|v| v + c).collect();
        let b = tape.constant(Tensor::from_vec(shifted)).softmax(0).unwrap().to_tensor();
        for (x, y) in a.data().iter().zip(b.data()) {
            prop_assert!((x - y).abs() < 1e-9);
        }
    }
}
