use proptest::prelude::*;
use survseq::numerics::{finite_difference_check, NumericsError, ParamStore, Tape, Tensor, Var};

const TOL: f64 = 1e-6;
const H: f64 = 1e-3;

fn matrix(rows: usize, cols: usize, values: &[f64]) -> Tensor {
    Tensor::matrix(rows, cols, values[..rows * cols].to_vec()).unwrap()
}

/// Reduces to a scalar with fixed uneven weights so every output element
/// carries its own gradient.
fn reduce(tape: &mut Tape, x: Var) -> Result<Var, NumericsError> {
    let n = tape.value(x).len();
    let w: Vec<f64> = (0..n).map(|i| 0.3 + 0.17 * i as f64 - 0.05 * (i * i % 7) as f64).collect();
    tape.weighted_sum(x, &w)
}

fn check_unary(values: &[f64], rows: usize, cols: usize, op: fn(&mut Tape, Var) -> Result<Var, NumericsError>) -> f64 {
    let mut store = ParamStore::new();
    let a = store.add("a", matrix(rows, cols, values));
    finite_difference_check(
        &mut store,
        |tape| {
            let x = tape.param(a);
            let y = op(tape, x)?;
            reduce(tape, y)
        },
        H,
    )
    .unwrap()
}

fn spread(row: &[f64]) -> f64 {
    let m = row.iter().sum::<f64>() / row.len() as f64;
    row.iter().map(|v| (v - m).powi(2)).sum::<f64>() / row.len() as f64
}

fn entries(n: usize) -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(-2.0..2.0f64, n)
}

/// Values kept at least 0.05 away from zero.
fn off_kink(n: usize) -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec((0.05..2.0f64, any::<bool>()).prop_map(|(m, s)| if s { m } else { -m }), n)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn matmul_gradient(a in entries(12), b in entries(12), r in 1usize..4, k in 1usize..4, c in 1usize..4) {
        let mut store = ParamStore::new();
        let pa = store.add("a", matrix(r, k, &a));
        let pb = store.add("b", matrix(k, c, &b));
        let err = finite_difference_check(&mut store, |tape| {
            let (x, y) = (tape.param(pa), tape.param(pb));
            let z = tape.matmul(x, y)?;
            reduce(tape, z)
        }, H).unwrap();
        prop_assert!(err < TOL, "{err}");
    }

    #[test]
    fn add_and_add_row_gradient(a in entries(12), b in entries(12), r in 1usize..4, c in 1usize..4) {
        let mut store = ParamStore::new();
        let pa = store.add("a", matrix(r, c, &a));
        let pb = store.add("b", matrix(r, c, &b));
        let pr = store.add("row", matrix(1, c, &b));
        let err = finite_difference_check(&mut store, |tape| {
            let (x, y, row) = (tape.param(pa), tape.param(pb), tape.param(pr));
            let s = tape.add(x, y)?;
            let z = tape.add_row(s, row)?;
            let z = tape.mul_row(z, row)?;
            reduce(tape, z)
        }, H).unwrap();
        prop_assert!(err < TOL, "{err}");
    }

    #[test]
    fn relu_gradient(a in off_kink(12), r in 1usize..4, c in 1usize..4) {
        let err = check_unary(&a, r, c, |t, x| Ok(t.relu(x)));
        prop_assert!(err < TOL, "{err}");
    }

    #[test]
    fn softmax_gradient(a in entries(12), r in 1usize..4, c in 1usize..4) {
        let err = check_unary(&a, r, c, |t, x| Ok(t.softmax_lastdim(x)));
        prop_assert!(err < TOL, "{err}");
    }

    #[test]
    fn layernorm_gradient(a in entries(12), r in 1usize..4, c in 2usize..4) {
        // near-constant rows curve on the scale of sqrt(eps), below any usable step
        prop_assume!(a[..r * c].chunks(c).all(|row| spread(row) > 0.05));
        let err = check_unary(&a, r, c, |t, x| Ok(t.layernorm_lastdim(x)));
        prop_assert!(err < TOL, "{err}");
    }

    #[test]
    fn masked_mean_gradient(a in entries(12), mask in prop::collection::vec(any::<bool>(), 3), c in 1usize..4) {
        prop_assume!(mask.iter().any(|&m| m));
        let m: Vec<f64> = mask.iter().map(|&b| if b { 1.0 } else { 0.0 }).collect();
        let mut store = ParamStore::new();
        let pa = store.add("a", matrix(3, c, &a));
        let err = finite_difference_check(&mut store, |tape| {
            let x = tape.param(pa);
            let y = tape.masked_mean(x, &m)?;
            reduce(tape, y)
        }, H).unwrap();
        prop_assert!(err < TOL, "{err}");
    }

    #[test]
    fn scale_sigmoid_square_gradient(a in entries(12), r in 1usize..4, c in 1usize..4, k in -3.0..3.0f64) {
        let mut store = ParamStore::new();
        let pa = store.add("a", matrix(r, c, &a));
        let err = finite_difference_check(&mut store, |tape| {
            let x = tape.param(pa);
            let s = tape.scale(x, k);
            let y = tape.sigmoid(s);
            let z = tape.square(y);
            let l = tape.log_sigmoid(z);
            reduce(tape, l)
        }, H).unwrap();
        prop_assert!(err < TOL, "{err}");
    }

    #[test]
    fn log_gradient(a in prop::collection::vec(0.2..3.0f64, 12), r in 1usize..4, c in 1usize..4) {
        let err = check_unary(&a, r, c, |t, x| Ok(t.log(x)));
        prop_assert!(err < TOL, "{err}");
    }

    #[test]
    fn softmax_rows_sum_to_one_and_shift_invariant(a in entries(12), shift in -50.0..50.0f64) {
        let mut tape = Tape::new();
        let x = tape.constant(matrix(3, 4, &a));
        let y = tape.softmax_lastdim(x);
        let shifted = tape.constant(matrix(3, 4, &a).map(|v| v + shift));
        let z = tape.softmax_lastdim(shifted);
        for r in 0..3 {
            let row = tape.value(y).row_slice(r);
            prop_assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            for (p, q) in row.iter().zip(tape.value(z).row_slice(r)) {
                prop_assert!((p - q).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn layernorm_rows_standardized(a in prop::collection::vec(-5.0..5.0f64, 12)) {
        prop_assume!(spread(&a[..6]) > 0.1 && spread(&a[6..]) > 0.1);
        let mut tape = Tape::new();
        let x = tape.constant(matrix(2, 6, &a));
        let y = tape.layernorm_lastdim(x);
        for r in 0..2 {
            let row = tape.value(y).row_slice(r);
            let mean = row.iter().sum::<f64>() / 6.0;
            let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 6.0;
            prop_assert!(mean.abs() < 1e-9);
            prop_assert!((var - 1.0).abs() < 1e-4, "{var}");
        }
    }

    #[test]
    fn masked_mean_special_masks(a in entries(12), pick in 0usize..4) {
        let t = matrix(4, 3, &a);
        let mut tape = Tape::new();
        let x = tape.constant(t.clone());
        let all = tape.masked_mean(x, &[1.0; 4]).unwrap();
        let mut one_hot = [0.0; 4];
        one_hot[pick] = 1.0;
        let single = tape.masked_mean(x, &one_hot).unwrap();
        for c in 0..3 {
            let mean = (0..4).map(|r| t.get(r, c)).sum::<f64>() / 4.0;
            prop_assert!((tape.value(all).data()[c] - mean).abs() < 1e-12);
            prop_assert_eq!(tape.value(single).data()[c], t.get(pick, c));
        }
    }
}
