use super::gradcheck::{self, rel_err};
use super::*;
use crate::rng::SeededRng;
use proptest::prelude::*;

fn t2(rows: &[&[f64]]) -> Tensor {
    Tensor::from_rows(&rows.iter().map(|r| r.to_vec()).collect::<Vec<_>>()).unwrap()
}

/// Store holding each input as a parameter, so gradcheck covers inputs too.
fn store_with(inputs: Vec<Tensor>) -> (ParamStore, Vec<ParamId>) {
    let mut s = ParamStore::new();
    let ids = inputs
        .into_iter()
        .enumerate()
        .map(|(i, t)| s.add(format!("in{i}"), t))
        .collect();
    (s, ids)
}

/// Reduce an arbitrary tensor to a scalar with a fixed random projection so
/// every output element receives a distinct upstream gradient.
fn project(g: &mut Graph, y: Var, seed: u64) -> Result<Var, crate::Error> {
    let shape = g.shape(y).to_vec();
    let mut rng = SeededRng::new(seed);
    let w = g.constant(Tensor::randn(&shape, 1.0, &mut rng));
    let p = g.mul(y, w)?;
    Ok(g.sum(p))
}

fn check_op<F>(inputs: Vec<Tensor>, tol: f64, f: F)
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var, crate::Error>,
{
    let (mut store, ids) = store_with(inputs);
    let report = gradcheck::check(&mut store, None, 1e-5, 1, |g| {
        let vars: Vec<Var> = ids.iter().map(|&id| g.param(id)).collect();
        let y = f(g, &vars)?;
        project(g, y, 99)
    })
    .unwrap();
    assert!(report.passes(tol), "gradcheck failed: {report:?}");
}

fn rand(shape: &[usize], seed: u64) -> Tensor {
    Tensor::randn(shape, 1.0, &mut SeededRng::new(seed))
}

#[test]
fn matmul_identity_and_hand_values() {
    let store = ParamStore::new();
    let mut g = Graph::new(&store);
    let i2 = g.constant(t2(&[&[1.0, 0.0], &[0.0, 1.0]]));
    let x = g.constant(t2(&[&[0.3, -2.0], &[5.0, 7.5]]));
    let y = g.matmul(i2, x).unwrap();
    assert_eq!(g.value(y), g.value(x));

    let a = g.constant(t2(&[&[1.0, 2.0], &[3.0, 4.0]]));
    let b = g.constant(t2(&[&[1.0], &[1.0]]));
    let c = g.matmul(a, b).unwrap();
    assert_eq!(g.value(c).data(), &[3.0, 7.0]);
    assert_eq!(g.shape(c), &[2, 1]);
}

#[test]
fn matmul_shape_error_names_both_shapes() {
    let store = ParamStore::new();
    let mut g = Graph::new(&store);
    let a = g.constant(Tensor::zeros(&[2, 3]));
    let b = g.constant(Tensor::zeros(&[2, 3]));
    let msg = g.matmul(a, b).unwrap_err().to_string();
    assert!(msg.contains("[2, 3]"), "{msg}");
}

#[test]
fn matmul_gradient_of_sum_matches_finite_differences() {
    let (mut store, ids) = store_with(vec![rand(&[3, 4], 1), rand(&[4, 2], 2)]);
    let report = gradcheck::check(&mut store, None, 1e-5, 1, |g| {
        let a = g.param(ids[0]);
        let b = g.param(ids[1]);
        let c = g.matmul(a, b)?;
        Ok(g.sum(c))
    })
    .unwrap();
    assert!(report.passes(1e-6), "{report:?}");
}

#[test]
fn softmax_examples() {
    let y = softmax_rows(&t2(&[&[0.0, 0.0]]));
    assert_eq!(y.data(), &[0.5, 0.5]);

    let y = softmax_rows(&t2(&[&[1.0, 2.0, 3.0]]));
    // 50-digit evaluation of e^k / sum e^k
    let oracle = [
        0.090_030_573_170_380_457_998_022_1,
        0.244_728_471_054_797_652_472_959_6,
        0.665_240_955_774_821_889_529_018_3,
    ];
    for (a, b) in y.data().iter().zip(oracle) {
        assert!((a - b).abs() < 1e-12, "{a} vs {b}");
    }
}

proptest! {
    #[test]
    fn softmax_rows_sum_to_one_and_shift_invariant(
        vals in prop::collection::vec(-30.0f64..30.0, 12),
        shift in -50.0f64..50.0,
    ) {
        let x = Tensor::new(vec![3, 4], vals).unwrap();
        let y = softmax_rows(&x);
        for r in 0..3 {
            let s: f64 = y.row(r).iter().sum();
            prop_assert!((s - 1.0).abs() < 1e-12);
            prop_assert!(y.row(r).iter().all(|&v| v >= 0.0));
        }
        let ys = softmax_rows(&x.map(|v| v + shift));
        prop_assert!(y.max_abs_diff(&ys) < 1e-12);
    }
}

#[test]
fn layer_norm_examples() {
    let store = ParamStore::new();
    let mut g = Graph::new(&store);
    let ones = g.constant(Tensor::ones(&[4]));
    let zeros = g.constant(Tensor::zeros(&[4]));
    let c = g.constant(Tensor::full(&[1, 4], 3.7));
    let y = g.layer_norm(c, Some(ones), Some(zeros), 1e-5).unwrap();
    assert!(g.value(y).data().iter().all(|&v| v == 0.0));

    let x = g.constant(t2(&[&[1.0, 3.0]]));
    let y = g.layer_norm(x, None, None, 1e-14).unwrap();
    let d = g.value(y).data();
    assert!((d[0] + 1.0).abs() < 1e-12 && (d[1] - 1.0).abs() < 1e-12, "{d:?}");
}

#[test]
fn layer_norm_gradient() {
    check_op(vec![rand(&[3, 5], 3), rand(&[5], 4), rand(&[5], 5)], 1e-5, |g, v| {
        g.layer_norm(v[0], Some(v[1]), Some(v[2]), 1e-5)
    });
    check_op(vec![rand(&[2, 6], 6)], 1e-5, |g, v| g.layer_norm(v[0], None, None, 1e-5));
}

#[test]
fn conv2d_examples() {
    let store = ParamStore::new();
    let mut g = Graph::new(&store);
    let x = g.constant(rand(&[1, 4, 5], 7));
    let w = g.constant(Tensor::ones(&[1, 1, 1, 1]));
    let y = g.conv2d(x, w, 1, 0).unwrap();
    assert_eq!(g.value(y), g.value(x));

    let c = 0.75;
    let x = g.constant(Tensor::full(&[1, 5, 5], c));
    let w = g.constant(Tensor::ones(&[1, 1, 3, 3]));
    let y = g.conv2d(x, w, 1, 1).unwrap();
    let yv = g.value(y);
    assert_eq!(yv.shape(), &[1, 5, 5]);
    assert_eq!(yv.data()[2 * 5 + 2], 9.0 * c);
    // corners only see four in-bounds taps under zero padding
    assert_eq!(yv.data()[0], 4.0 * c);
}

#[test]
fn conv2d_rejects_bad_shapes() {
    let store = ParamStore::new();
    let mut g = Graph::new(&store);
    let x = g.constant(Tensor::zeros(&[2, 3, 3]));
    let w = g.constant(Tensor::zeros(&[1, 3, 3, 3]));
    assert!(g.conv2d(x, w, 1, 0).is_err());
    let w = g.constant(Tensor::zeros(&[1, 2, 5, 5]));
    assert!(g.conv2d(x, w, 1, 0).is_err());
}

#[test]
fn conv_gradients() {
    check_op(vec![rand(&[2, 5, 6], 8), rand(&[3, 2, 3, 3], 9)], 1e-5, |g, v| g.conv2d(v[0], v[1], 2, 1));
    check_op(vec![rand(&[2, 4, 3], 10), rand(&[2, 3, 4, 4], 11)], 1e-5, |g, v| {
        g.conv_transpose2d(v[0], v[1], 2, 1)
    });
}

#[test]
fn conv_transpose_doubles_resolution() {
    let store = ParamStore::new();
    let mut g = Graph::new(&store);
    let x = g.constant(rand(&[3, 4, 6], 12));
    let w = g.constant(rand(&[3, 2, 4, 4], 13));
    let y = g.conv_transpose2d(x, w, 2, 1).unwrap();
    assert_eq!(g.shape(y), &[2, 8, 12]);
}

#[test]
fn silu_and_mse_examples() {
    let store = ParamStore::new();
    let mut g = Graph::new(&store);
    let z = g.constant(Tensor::zeros(&[3]));
    let s = g.silu(z);
    assert_eq!(g.value(s).data(), &[0.0; 3]);

    let x = g.constant(rand(&[2, 3], 14));
    let m = g.mse(x, x).unwrap();
    assert_eq!(g.value(m).data(), &[0.0]);

    let a = g.constant(Tensor::vector(vec![0.0, 0.0]));
    let b = g.constant(Tensor::vector(vec![1.0, 1.0]));
    let m = g.mse(a, b).unwrap();
    assert_eq!(g.value(m).data(), &[1.0]);
    assert!(g.mse(a, x).is_err());
}

#[test]
fn elementwise_and_structural_gradients() {
    let tol = 1e-4;
    check_op(vec![rand(&[3, 4], 20), rand(&[3, 4], 21)], tol, |g, v| g.add(v[0], v[1]));
    check_op(vec![rand(&[3, 4], 22), rand(&[3, 4], 23)], tol, |g, v| g.sub(v[0], v[1]));
    check_op(vec![rand(&[3, 4], 24), rand(&[3, 4], 25)], tol, |g, v| g.mul(v[0], v[1]));
    check_op(vec![rand(&[3, 4], 26)], tol, |g, v| Ok(g.scale(v[0], -1.7)));
    check_op(vec![rand(&[3, 4], 27)], tol, |g, v| Ok(g.add_scalar(v[0], 0.3)));
    check_op(vec![rand(&[3, 4], 28)], tol, |g, v| Ok(g.silu(v[0])));
    check_op(vec![rand(&[3, 4], 29)], tol, |g, v| Ok(g.softplus(v[0])));
    check_op(vec![rand(&[3, 4], 30)], tol, |g, v| Ok(g.exp(v[0])));
    check_op(vec![rand(&[3, 4], 31)], tol, |g, v| Ok(g.softmax_rows(v[0])));
    check_op(vec![rand(&[3, 4], 32)], tol, |g, v| g.transpose(v[0]));
    check_op(vec![rand(&[3, 4], 33), rand(&[4], 34)], tol, |g, v| g.add_row_vec(v[0], v[1]));
    check_op(vec![rand(&[3, 4], 35), rand(&[4], 36)], tol, |g, v| g.mul_row_vec(v[0], v[1]));
    check_op(vec![rand(&[3, 2, 2], 37), rand(&[3], 38)], tol, |g, v| g.add_col_vec(v[0], v[1]));
    check_op(vec![rand(&[3, 2, 2], 39), rand(&[3], 40)], tol, |g, v| g.mul_col_vec(v[0], v[1]));
    check_op(vec![rand(&[5, 3], 41)], tol, |g, v| g.gather_rows(v[0], &[4, 0, 4, 2]));
    check_op(vec![rand(&[4, 2, 3], 42)], tol, |g, v| g.slice_rows(v[0], 1, 3));
    check_op(vec![rand(&[3, 5], 43)], tol, |g, v| g.slice_cols(v[0], 1, 4));
    check_op(vec![rand(&[2, 3], 44), rand(&[1, 3], 45)], tol, |g, v| g.concat_rows(&[v[0], v[1]]));
    check_op(vec![rand(&[2, 3], 46), rand(&[2, 1], 47)], tol, |g, v| g.concat_cols(&[v[0], v[1]]));
    check_op(vec![rand(&[4, 3], 48)], tol, |g, v| g.mean_rows(v[0]));
    check_op(vec![rand(&[2, 3, 2], 49)], tol, |g, v| g.reshape(v[0], &[3, 4]));
    check_op(vec![rand(&[2, 7, 3], 50)], tol, |g, v| g.temporal_stats_pool(v[0], 3));
    check_op(vec![rand(&[3, 4], 51)], tol, |g, v| Ok(g.mean(v[0])));
    check_op(vec![rand(&[3, 4], 52), rand(&[3, 4], 53)], tol, |g, v| g.mse(v[0], v[1]));
}

#[test]
fn random_shape_gradient_sweep() {
    // h = 1e-5, rel. err < 1e-4 on random small shapes for the heavier ops
    let mut rng = SeededRng::new(2024);
    for trial in 0..6u64 {
        let m = rng.range_inclusive(1, 4);
        let k = rng.range_inclusive(1, 4);
        let n = rng.range_inclusive(1, 4);
        check_op(vec![rand(&[m, k], 100 + trial), rand(&[k, n], 200 + trial)], 1e-4, |g, v| g.matmul(v[0], v[1]));
        check_op(vec![rand(&[m, k + 1], 300 + trial)], 1e-4, |g, v| Ok(g.softmax_rows(v[0])));
        let c = rng.range_inclusive(1, 3);
        let h = rng.range_inclusive(3, 6);
        let w = rng.range_inclusive(3, 6);
        let stride = rng.range_inclusive(1, 2);
        check_op(vec![rand(&[c, h, w], 400 + trial), rand(&[2, c, 3, 3], 500 + trial)], 1e-4, |g, v| {
            g.conv2d(v[0], v[1], stride, 1)
        });
    }
}

#[test]
fn backward_examples() {
    let mut store = ParamStore::new();
    let x = store.add("x", rand(&[2, 3], 60));
    let grads = {
        let mut g = Graph::new(&store);
        let xv = g.param(x);
        let s = g.sum(xv);
        g.backward(s).unwrap()
    };
    assert_eq!(grads.get(x).unwrap().data(), &[1.0; 6]);

    let p = store.add("p", rand(&[5], 61));
    let target = rand(&[5], 62);
    let grads = {
        let mut g = Graph::new(&store);
        let pv = g.param(p);
        let tv = g.constant(target.clone());
        let l = g.mse(pv, tv).unwrap();
        g.backward(l).unwrap()
    };
    let expect = store.value(p).sub(&target).unwrap().scale(2.0 / 5.0);
    assert!(grads.get(p).unwrap().max_abs_diff(&expect) < 1e-15);
}

#[test]
fn backward_rejects_non_scalar_root() {
    let mut store = ParamStore::new();
    let x = store.add("x", rand(&[2], 63));
    let mut g = Graph::new(&store);
    let xv = g.param(x);
    let y = g.silu(xv);
    assert!(matches!(g.backward(y), Err(crate::Error::Contract(_))));
}

#[test]
fn backward_twice_accumulates() {
    let mut store = ParamStore::new();
    let x = store.add("x", rand(&[3], 64));
    let grads = {
        let mut g = Graph::new(&store);
        let xv = g.param(x);
        let y = g.mul(xv, xv).unwrap();
        let s = g.sum(y);
        g.backward(s).unwrap()
    };
    store.accumulate(&grads);
    let once = store.grad(x).clone();
    store.accumulate(&grads);
    assert_eq!(store.grad(x).data(), once.scale(2.0).data());
    store.zero_grad();
    assert_eq!(store.grad(x).data(), &[0.0; 3]);
}

#[test]
fn inference_graph_records_no_gradients() {
    let mut store = ParamStore::new();
    let x = store.add("x", rand(&[3], 65));
    let mut g = Graph::inference(&store);
    let xv = g.param(x);
    let s = g.sum(xv);
    assert!(g.backward(s).unwrap().is_empty());
}

#[test]
fn ops_are_bitwise_deterministic() {
    let run = || {
        let store = ParamStore::new();
        let mut g = Graph::new(&store);
        let x = g.constant(rand(&[3, 9, 8], 70));
        let w = g.constant(rand(&[4, 3, 3, 3], 71));
        let y = g.conv2d(x, w, 2, 1).unwrap();
        let y = g.silu(y);
        let y = g.reshape(y, &[4, 20]).unwrap();
        let y = g.softmax_rows(y);
        g.value(y).clone()
    };
    let (a, b) = (run(), run());
    assert!(a.data().iter().zip(b.data()).all(|(x, y)| x.to_bits() == y.to_bits()));
}

#[test]
fn rel_err_uses_floor_for_tiny_gradients() {
    assert!(rel_err(1e-12, 2e-12) < 1e-5);
    assert!((rel_err(1.0, 1.1) - 0.1 / 1.1).abs() < 1e-12);
}
