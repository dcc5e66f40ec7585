use dptfsnet::numerics::{
    grad_check, grad_check_many, Conv2dGeometry, ElementwiseOp, OpKind, ReduceOp, Tape, Tensor, Var,
};
use proptest::prelude::*;

const EPS: f64 = 1e-5;
const TOL: f64 = 1e-4;

fn tensor(shape: &[usize], data: Vec<f64>) -> Tensor {
    Tensor::new(shape.to_vec(), data).unwrap()
}

fn values(n: usize) -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(-2.0..2.0f64, n)
}

/// Values with magnitude in [0.1, 2], away from the kinks of relu and abs.
fn off_kink(n: usize) -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec((0.1..2.0f64, any::<bool>()), n)
        .prop_map(|v| v.into_iter().map(|(m, s)| if s { m } else { -m }).collect())
}

/// `sum(y * w)` with `w_k = cos(k + 1)`, so every output coordinate counts.
fn weigh(tape: &mut Tape, y: Var) -> Var {
    let n = tape.value(y).numel();
    let w = Tensor::new(tape.shape(y).to_vec(), (0..n).map(|k| ((k + 1) as f64).cos()).collect()).unwrap();
    let w = tape.constant(w);
    let p = tape.mul(y, w).unwrap();
    tape.sum(p)
}

proptest! {
    #![proptest_config(ProptestConfig { cases: 24, failure_persistence: None, ..ProptestConfig::default() })]

    #[test]
    fn unary_elementwise(v in off_kink(12)) {
        let x = tensor(&[3, 4], v);
        for op in [ElementwiseOp::Relu, ElementwiseOp::Sigmoid, ElementwiseOp::Tanh, ElementwiseOp::Abs, ElementwiseOp::Square, ElementwiseOp::Neg] {
            let r = grad_check(|t, x| { let y = t.elementwise(op, x, None)?; Ok(weigh(t, y)) }, &x, EPS, TOL).unwrap();
            prop_assert!(r.pass, "{op:?}: {r:?}");
        }
    }

    #[test]
    fn binary_elementwise_with_broadcast(a in values(12), b in off_kink(4)) {
        let inputs = [tensor(&[3, 4], a), tensor(&[4], b)];
        for op in [ElementwiseOp::Add, ElementwiseOp::Sub, ElementwiseOp::Mul, ElementwiseOp::Div] {
            let r = grad_check_many(|t, v| { let y = t.elementwise(op, v[0], Some(v[1]))?; Ok(weigh(t, y)) }, &inputs, None, EPS, TOL).unwrap();
            prop_assert!(r.pass, "{op:?}: {r:?}");
        }
    }

    #[test]
    fn batched_matmul(a in values(2 * 3 * 4), b in values(4 * 5)) {
        let inputs = [tensor(&[2, 3, 4], a), tensor(&[4, 5], b)];
        let r = grad_check_many(|t, v| { let y = t.matmul(v[0], v[1])?; Ok(weigh(t, y)) }, &inputs, None, EPS, TOL).unwrap();
        prop_assert!(r.pass, "{r:?}");
    }

    #[test]
    fn softmax_each_axis(v in values(24)) {
        let x = tensor(&[2, 3, 4], v);
        for axis in 0..3 {
            let r = grad_check(|t, x| { let y = t.softmax(x, axis)?; Ok(weigh(t, y)) }, &x, EPS, TOL).unwrap();
            prop_assert!(r.pass, "axis {axis}: {r:?}");
        }
    }

    #[test]
    fn sum_and_mean_reductions(v in values(24)) {
        let x = tensor(&[2, 3, 4], v);
        for op in [ReduceOp::Sum, ReduceOp::Mean] {
            for axis in [None, Some(0), Some(1), Some(2)] {
                let r = grad_check(|t, x| { let y = t.reduce(op, x, axis)?; Ok(weigh(t, y)) }, &x, EPS, TOL).unwrap();
                prop_assert!(r.pass, "{op:?} {axis:?}: {r:?}");
            }
        }
    }

    #[test]
    fn shape_ops(a in values(24), b in values(12)) {
        let inputs = [tensor(&[2, 3, 4], a), tensor(&[2, 3, 2], b)];
        let r = grad_check_many(|t, v| {
            let c = t.concat(&[v[0], v[1]], 2)?;
            let p = t.permute(c, &[1, 2, 0])?;
            let s = t.slice(p, 1, 2, 3)?;
            let r = t.reshape(s, &[3, 6])?;
            let st = t.stack(&[r, r], 0)?;
            let sel = t.select(st, 0, 1)?;
            Ok(weigh(t, sel))
        }, &inputs, None, EPS, TOL).unwrap();
        prop_assert!(r.pass, "{r:?}");
    }

    #[test]
    fn conv2d_dilated_and_padded(x in values(2 * 5 * 4), w in values(3 * 2 * 2 * 3), b in values(3), dt in 1usize..3) {
        let inputs = [tensor(&[2, 5, 4], x), tensor(&[3, 2, 2, 3], w), tensor(&[3], b)];
        let geom = Conv2dGeometry { dilation: (dt, 1), pad_time: (dt, 0), pad_freq: (1, 1) };
        let r = grad_check_many(|t, v| { let y = t.conv2d(v[0], v[1], v[2], geom)?; Ok(weigh(t, y)) }, &inputs, None, EPS, TOL).unwrap();
        prop_assert!(r.pass, "{r:?}");
    }

    #[test]
    // Every axis has length >= 3: over two elements the normalised output is
    // nearly constant in x and the gradient is pure roundoff.
    fn layer_norm_each_axis(x in values(60), g in values(5), b in values(5)) {
        for axis in 0..3 {
            let len = [3, 4, 5][axis];
            let inputs = [tensor(&[3, 4, 5], x.clone()), tensor(&[len], g[..len].to_vec()), tensor(&[len], b[..len].to_vec())];
            let r = grad_check_many(|t, v| { let y = t.layer_norm(v[0], v[1], v[2], axis, 1e-5)?; Ok(weigh(t, y)) }, &inputs, None, EPS, TOL).unwrap();
            prop_assert!(r.pass, "axis {axis}: {r:?}");
        }
    }

    #[test]
    fn prelu_per_channel(x in off_kink(24), a in values(3)) {
        let inputs = [tensor(&[3, 2, 4], x), tensor(&[3], a)];
        let r = grad_check_many(|t, v| { let y = t.prelu(v[0], v[1], 0)?; Ok(weigh(t, y)) }, &inputs, None, EPS, TOL).unwrap();
        prop_assert!(r.pass, "{r:?}");
    }
}

#[test]
fn max_reduction_away_from_ties() {
    let x = Tensor::from_fn(&[3, 4], |i| ((i * 5) % 12) as f64 * 0.1);
    for axis in [None, Some(0), Some(1)] {
        let r = grad_check(
            |t, x| {
                let y = t.reduce(ReduceOp::Max, x, axis)?;
                Ok(weigh(t, y))
            },
            &x,
            EPS,
            TOL,
        )
        .unwrap();
        assert!(r.pass, "{axis:?}: {r:?}");
    }
}

#[test]
fn grad_of_sum_of_product_is_ones_times_b_transposed() {
    let a = tensor(&[2, 3], vec![0.5, -1.0, 2.0, 0.25, 3.0, -0.75]);
    let b = tensor(&[3, 4], (0..12).map(|k| k as f64 * 0.3 - 1.1).collect());
    let mut tape = Tape::new();
    let va = tape.param(a);
    let vb = tape.constant(b.clone());
    let y = tape.matmul(va, vb).unwrap();
    let s = tape.sum(y);
    let g = tape.backward(s).unwrap().wrt(va).unwrap();
    // (ones[2,4] B^T)[i, k] = sum_j B[k, j]
    for i in 0..2 {
        for k in 0..3 {
            let want: f64 = (0..4).map(|j| b.get(&[k, j])).sum();
            assert!((g.get(&[i, k]) - want).abs() < 1e-14);
        }
    }
}

#[test]
fn gradients_accumulate_over_reuse() {
    let mut tape = Tape::new();
    let x = tape.param(Tensor::scalar(1.5));
    let y = tape.mul(x, x).unwrap();
    let z = tape.add(y, x).unwrap();
    let g = tape.backward(z).unwrap().wrt(x).unwrap();
    assert_eq!(g.item().unwrap(), 2.0 * 1.5 + 1.0);
}

#[test]
fn injected_fault_is_detected_only_for_its_op() {
    let x = Tensor::from_fn(&[2, 3, 3], |i| (i as f64 * 0.37).sin());
    let w = Tensor::from_fn(&[2, 2, 1, 1], |i| 0.3 + i as f64 * 0.1);
    let b = Tensor::from_fn(&[2], |i| i as f64);
    let inputs = [x, w, b];
    let run = |fault: Option<OpKind>| {
        grad_check_many(
            |t, v| {
                if let Some(k) = fault {
                    t.inject_grad_fault(k, 1.5);
                }
                let y = t.conv2d(v[0], v[1], v[2], Conv2dGeometry::POINTWISE)?;
                let y = t.tanh(y);
                Ok(weigh(t, y))
            },
            &inputs,
            None,
            EPS,
            TOL,
        )
        .unwrap()
    };
    assert!(run(None).pass);
    assert!(!run(Some(OpKind::Conv2d)).pass);
    assert!(run(Some(OpKind::LayerNorm)).pass);
}

#[test]
fn backward_requires_scalar() {
    let mut tape = Tape::new();
    let x = tape.param(Tensor::zeros(&[2]));
    assert!(tape.backward(x).is_err());
}
