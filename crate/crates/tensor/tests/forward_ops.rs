//! Forward semantics: worked examples, error paths, and softmax invariants.

use kgad_tensor::{ParamStore, Shape, Tape, Tensor, TensorError};
use proptest::prelude::*;

fn tape_with(values: &[f64]) -> (ParamStore, Vec<f64>) {
    (ParamStore::new(), values.to_vec())
}

#[test]
fn softmax_of_equal_logits_is_uniform() {
    let (store, data) = tape_with(&[0.0, 0.0, 0.0]);
    let mut tape = Tape::new(&store);
    let x = tape.input(Tensor::from_vec(data)).unwrap();
    let y = tape.softmax(x, 0).unwrap();
    for v in tape.value(y).data() {
        assert!((v - 1.0 / 3.0).abs() < 1e-12);
    }
}

#[test]
fn l2_norm_of_3_4_is_5() {
    let (store, data) = tape_with(&[3.0, 4.0]);
    let mut tape = Tape::new(&store);
    let x = tape.input(Tensor::from_vec(data)).unwrap();
    let n = tape.l2_norm(x).unwrap();
    assert!((tape.scalar(n) - 5.0).abs() < 1e-15);
}

#[test]
fn sigmoid_at_zero_is_half() {
    let (store, data) = tape_with(&[0.0]);
    let mut tape = Tape::new(&store);
    let x = tape.input(Tensor::from_vec(data)).unwrap();
    let y = tape.sigmoid(x).unwrap();
    assert_eq!(tape.scalar(y), 0.5);
}

#[test]
fn shape_mismatch_names_both_shapes() {
    let store = ParamStore::new();
    let mut tape = Tape::new(&store);
    let a = tape.input(Tensor::from_vec(vec![1.0, 2.0])).unwrap();
    let b = tape.input(Tensor::from_vec(vec![1.0, 2.0, 3.0])).unwrap();
    let err = tape.add(a, b).unwrap_err();
    let msg = err.to_string();
    assert!(msg.contains("[2]") && msg.contains("[3]"), "got: {msg}");
}

#[test]
fn non_finite_output_is_an_error() {
    let store = ParamStore::new();
    let mut tape = Tape::new(&store);
    let x = tape.input(Tensor::from_vec(vec![-1.0])).unwrap();
    let err = tape.log(x).unwrap_err();
    assert!(matches!(err, TensorError::NonFinite { op: "log" }));
}

#[test]
fn matmul_rejects_inner_dim_mismatch() {
    let store = ParamStore::new();
    let mut tape = Tape::new(&store);
    let a = tape
        .input(Tensor::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0]]).unwrap())
        .unwrap();
    let b = tape
        .input(Tensor::from_rows(&[vec![1.0], vec![2.0], vec![3.0]]).unwrap())
        .unwrap();
    assert!(tape.matmul(a, b).is_err());
}

proptest! {
    #[test]
    fn softmax_is_a_probability_vector(logits in prop::collection::vec(-30.0f64..30.0, 1..40)) {
        let store = ParamStore::new();
        let mut tape = Tape::new(&store);
        let x = tape.input(Tensor::from_vec(logits)).unwrap();
        let y = tape.softmax(x, 0).unwrap();
        let out = tape.value(y).data();
        prop_assert!(out.iter().all(|&v| v >= 0.0));
        let total: f64 = out.iter().sum();
        prop_assert!((total - 1.0).abs() < 1e-12);
    }

    #[test]
    fn concat_then_slice_round_trips(
        a in prop::collection::vec(-5.0f64..5.0, 1..10),
        b in prop::collection::vec(-5.0f64..5.0, 1..10),
    ) {
        let store = ParamStore::new();
        let mut tape = Tape::new(&store);
        let la = a.len();
        let va = tape.input(Tensor::from_vec(a.clone())).unwrap();
        let vb = tape.input(Tensor::from_vec(b.clone())).unwrap();
        let joined = tape.concat(&[va, vb]).unwrap();
        let back = tape.slice(joined, la, la + b.len()).unwrap();
        prop_assert_eq!(tape.value(back).data(), &b[..]);
    }
}
