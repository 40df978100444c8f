use super::*;
use crate::error::Error;
use crate::numerics::Rng;

fn random_tensor(rng: &mut Rng, rows: usize, cols: usize) -> Tensor {
    Tensor::from_fn(rows, cols, |_, _| rng.uniform_range(-1.0, 1.0))
}

/// Central difference of a scalar function of one input, for op-level checks.
fn numeric_derivative(f: impl Fn(f64) -> f64, x: f64) -> f64 {
    let h = 1e-6;
    (f(x + h) - f(x - h)) / (2.0 * h)
}

fn unary_grad_at(op: fn(&mut Tape, Var) -> Var, x: f64) -> (f64, f64) {
    let mut tape = Tape::new();
    let v = tape.leaf(Tensor::scalar(x));
    let y = op(&mut tape, v);
    let g = tape.backward(y).unwrap();
    (tape.value(y).item(), g.get(v).item())
}

#[test]
fn scalar_examples() {
    let (v, g) = unary_grad_at(Tape::tanh, 0.0);
    assert_eq!((v, g), (0.0, 1.0));
    let (_, g) = unary_grad_at(Tape::atan, 1.0);
    assert!((g - 0.5).abs() < 1e-15);
    let (_, g) = unary_grad_at(Tape::erf, 0.0);
    let fd = numeric_derivative(crate::numerics::erf, 0.0);
    assert!((g - fd).abs() < 1e-9);
    assert!((g - 1.128_379_167_1).abs() < 1e-10);
    let (v, g) = unary_grad_at(Tape::relu, 0.0);
    assert_eq!((v, g), (0.0, 0.0));
}

#[test]
fn unary_ops_match_finite_differences() {
    let ops: [(fn(&mut Tape, Var) -> Var, f64); 9] = [
        (Tape::tanh, 0.3),
        (Tape::atan, -1.7),
        (Tape::exp, 0.4),
        (Tape::log, 2.5),
        (Tape::softplus, -0.8),
        (Tape::erf, 0.9),
        (Tape::square, -1.2),
        (Tape::xlogx, 0.35),
        (Tape::neg, 0.2),
    ];
    for (op, x) in ops {
        let (_, g) = unary_grad_at(op, x);
        let fd = numeric_derivative(|t| unary_grad_at(op, t).0, x);
        assert!((g - fd).abs() < 1e-8, "x={x} analytic={g} fd={fd}");
    }
}

#[test]
fn forward_values_match_scalar_math() {
    let mut tape = Tape::new();
    let x = tape.leaf(Tensor::row(&[-2.0, -0.5, 0.0, 0.7, 3.0]));
    let checks: Vec<(Var, fn(f64) -> f64)> = vec![
        (tape.tanh(x), f64::tanh),
        (tape.atan(x), f64::atan),
        (tape.erf(x), crate::numerics::erf),
        (tape.softplus(x), |v| (1.0 + v.exp()).ln()),
        (tape.exp(x), f64::exp),
    ];
    for (y, f) in checks {
        for (a, b) in tape.value(y).data().iter().zip(tape.value(x).data()) {
            assert!((a - f(*b)).abs() < 1e-12);
        }
    }
}

#[test]
fn quadratic_and_constant_roots() {
    let mut tape = Tape::new();
    let w = tape.leaf(Tensor::row(&[1.0, 2.0]));
    let sq = tape.mul(w, w).unwrap();
    let s = tape.sum(sq);
    let g = tape.backward(s).unwrap();
    assert_eq!(g.get(w).data(), &[2.0, 4.0]);

    let mut tape = Tape::new();
    let w = tape.leaf(Tensor::row(&[1.0, 2.0]));
    let c = tape.scalar(3.0);
    let g = tape.backward(c).unwrap();
    assert_eq!(g.get(w).data(), &[0.0, 0.0]);
    assert_eq!(g.get(w).shape(), (1, 2));
}

#[test]
fn non_scalar_root_rejected() {
    let mut tape = Tape::new();
    let w = tape.leaf(Tensor::row(&[1.0, 2.0]));
    assert!(matches!(tape.backward(w), Err(Error::Shape { .. })));
}

#[test]
fn shape_mismatch_at_construction() {
    let mut tape = Tape::new();
    let a = tape.leaf(Tensor::zeros(2, 3));
    let b = tape.leaf(Tensor::zeros(3, 2));
    assert!(tape.add(a, b).is_err());
    assert!(tape.matmul(a, a).is_err());
    assert!(tape.slice_cols(a, 2, 4).is_err());
    assert!(tape.gather(a, &[0]).is_err());
    assert!(tape.gather(a, &[0, 3]).is_err());
    assert!(tape.concat_cols(&[a, b]).is_err());
    // broadcasting along unit dims is allowed
    let row = tape.leaf(Tensor::zeros(1, 3));
    let col = tape.leaf(Tensor::zeros(2, 1));
    let sum = tape.add(a, row).unwrap();
    assert_eq!(tape.shape(sum), (2, 3));
    let outer = tape.sub(col, row).unwrap();
    assert_eq!(tape.shape(outer), (2, 3));
}

/// Every structural op in one expression, checked against central differences.
#[test]
fn composite_expression_gradcheck() {
    let mut rng = Rng::new(11);
    let mut params = ParamSet::new();
    params.insert("a", random_tensor(&mut rng, 4, 3)).unwrap();
    params.insert("b", random_tensor(&mut rng, 3, 5)).unwrap();
    params.insert("bias", random_tensor(&mut rng, 1, 5)).unwrap();
    params.insert("col", random_tensor(&mut rng, 4, 1)).unwrap();
    params.insert("pos", Tensor::from_fn(1, 5, |_, c| 0.5 + c as f64 * 0.1)).unwrap();
    let labels = [0usize, 4, 2, 1];

    let f = |t: &mut Tape, v: &[Var]| {
        let h = t.matmul(v[0], v[1])?;
        let h = t.add(h, v[2])?;
        let h = t.tanh(h);
        let scaled = t.mul(h, v[3])?;
        let d = t.div(scaled, v[4])?;
        let e = t.erf(d);
        let at = t.atan(e);
        let left = t.slice_cols(at, 0, 2)?;
        let right = t.slice_cols(at, 2, 5)?;
        let right = t.softplus(right);
        let cat = t.concat_cols(&[right, left])?;
        let cum = t.cumsum(cat);
        let rep = t.repeat_rows(cum, 2);
        let tr = t.transpose(rep);
        let tr = t.transpose(tr);
        let r = t.reshape(tr, 8, 5)?;
        let ls = t.log_softmax(r);
        let mut lab = labels.to_vec();
        lab.extend_from_slice(&labels);
        let picked = t.gather(ls, &lab)?;
        let rows = t.sum_rows(cum);
        let cols = t.sum_cols(cum);
        let sq = t.square(cols);
        let pos = t.add_const(v[4], 0.1);
        let xl = t.xlogx(pos);
        let ex = t.exp(xl);
        let lg = t.log(ex);
        let s1 = t.mean(picked);
        let s2 = t.sum(rows);
        let s3 = t.sum(sq);
        let s4 = t.sum(lg);
        let s2 = t.scale(s2, 0.01);
        let acc = t.sub(s1, s2)?;
        let acc = t.add(acc, s3)?;
        let acc = t.add(acc, s4)?;
        Ok(t.neg(acc))
    };
    let report = gradcheck(f, &params, 1e-5, 1e-7).unwrap();
    assert_eq!(report.checked, params.numel());
    assert!(report.skipped_kinks.is_empty());
}

#[test]
fn two_layer_mlp_matches_finite_differences() {
    let mut rng = Rng::new(3);
    let mut params = ParamSet::new();
    params.insert("w1", random_tensor(&mut rng, 6, 8)).unwrap();
    params.insert("b1", random_tensor(&mut rng, 1, 8)).unwrap();
    params.insert("w2", random_tensor(&mut rng, 8, 4)).unwrap();
    params.insert("b2", random_tensor(&mut rng, 1, 4)).unwrap();
    let x = random_tensor(&mut rng, 5, 6);
    let y = [0usize, 1, 2, 3, 1];
    let f = |t: &mut Tape, v: &[Var]| {
        let xv = t.constant(x.clone());
        let h = t.matmul(xv, v[0])?;
        let h = t.add(h, v[1])?;
        let h = t.relu(h);
        let o = t.matmul(h, v[2])?;
        let o = t.add(o, v[3])?;
        let o = t.log_softmax(o);
        let p = t.gather(o, &y)?;
        let m = t.mean(p);
        Ok(t.neg(m))
    };
    let report = gradcheck(f, &params, 1e-5, 1e-4).unwrap();
    assert!(report.max_relative_error < 1e-4);
    assert_eq!(report.checked + report.skipped_kinks.len(), params.numel());
}

#[test]
fn sum_of_squares_is_tight() {
    let mut params = ParamSet::new();
    params.insert("w", Tensor::row(&[0.3, -1.2, 2.0])).unwrap();
    let report = gradcheck(
        |t, v| {
            let s = t.square(v[0]);
            Ok(t.sum(s))
        },
        &params,
        1e-5,
        1e-9,
    )
    .unwrap();
    assert!(report.max_relative_error < 1e-9);
}

#[test]
fn relu_kink_is_classified_not_failed() {
    // relu(w) at w = 0: the central difference straddles the kink
    let mut params = ParamSet::new();
    params.insert("w", Tensor::row(&[0.0, 0.5])).unwrap();
    let report = gradcheck(
        |t, v| {
            let r = t.relu(v[0]);
            Ok(t.sum(r))
        },
        &params,
        1e-5,
        1e-6,
    )
    .unwrap();
    assert_eq!(report.skipped_kinks, vec![("w".to_string(), 0)]);
    assert_eq!(report.checked, 1);
}

#[test]
fn gradcheck_names_the_failing_parameter() {
    // a deliberately wrong gradient: detach the second factor of w*w by
    // routing it through a constant copy
    let mut params = ParamSet::new();
    params.insert("w", Tensor::row(&[1.5])).unwrap();
    let err = gradcheck(
        |t, v| {
            let copy = t.value(v[0]).clone();
            let frozen = t.constant(copy);
            let p = t.mul(v[0], frozen)?;
            Ok(t.sum(p))
        },
        &params,
        1e-5,
        1e-4,
    )
    .unwrap_err();
    match err {
        Error::Gradcheck { param, index, .. } => assert_eq!((param.as_str(), index), ("w", 0)),
        other => panic!("unexpected {other}"),
    }
}

#[test]
fn linearity_of_backward() {
    let mut tape = Tape::new();
    let w = tape.leaf(Tensor::row(&[0.4, -0.9, 1.3]));
    let f = tape.tanh(w);
    let f = tape.sum(f);
    let g = tape.square(w);
    let g = tape.sum(g);
    let af = tape.scale(f, 2.0);
    let bg = tape.scale(g, -3.0);
    let h = tape.add(af, bg).unwrap();
    let gh = tape.backward(h).unwrap();
    let gf = tape.backward(f).unwrap();
    let gg = tape.backward(g).unwrap();
    for i in 0..3 {
        let expect = 2.0 * gf.get(w).data()[i] - 3.0 * gg.get(w).data()[i];
        assert!((gh.get(w).data()[i] - expect).abs() < 1e-14);
    }
}

#[test]
fn repeated_passes_are_bit_identical() {
    let run = || {
        let mut rng = Rng::new(77);
        let mut tape = Tape::new();
        let a = tape.leaf(random_tensor(&mut rng, 7, 5));
        let b = tape.leaf(random_tensor(&mut rng, 5, 3));
        let m = tape.matmul(a, b).unwrap();
        let m = tape.softplus(m);
        let s = tape.sum(m);
        let g = tape.backward(s).unwrap();
        (tape.value(s).item(), g.get(a).clone(), g.get(b).clone())
    };
    assert_eq!(run(), run());
}
