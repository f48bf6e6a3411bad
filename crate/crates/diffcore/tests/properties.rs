use proptest::prelude::*;
use spa_diff::{Tape, Tensor};

fn tensor(shape: Vec<usize>) -> impl Strategy<Value = Tensor<f64>> {
    let n: usize = shape.iter().product();
    prop::collection::vec(-5.0f64..5.0, n).prop_map(move |d| Tensor::new(shape.clone(), d).unwrap())
}

proptest! {
    #[test]
    fn softmax_rows_are_distributions(x in tensor(vec![3, 7])) {
        let t = Tape::new();
        let v = t.constant(x);
        let s = t.value(t.softmax(v, 1).unwrap());
        for row in s.data().chunks(7) {
            prop_assert!(row.iter().all(|&p| p >= 0.0));
            prop_assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn permute_roundtrip(x in tensor(vec![2, 3, 4])) {
        let t = Tape::new();
        let v = t.constant(x.clone());
        let p = t.permute(v, &[1, 2, 0]).unwrap();
        let back = t.permute(p, &[2, 0, 1]).unwrap();
        prop_assert_eq!(t.value(back), x);
    }

    #[test]
    fn broadcast_add_matches_loop(a in tensor(vec![3, 4]), b in tensor(vec![4])) {
        let t = Tape::new();
        let (va, vb) = (t.constant(a.clone()), t.constant(b.clone()));
        let s = t.value(t.add(va, vb).unwrap());
        for i in 0..3 {
            for j in 0..4 {
                prop_assert_eq!(s.data()[i * 4 + j], a.data()[i * 4 + j] + b.data()[j]);
            }
        }
    }

    #[test]
    fn sum_gradient_is_ones(x in tensor(vec![5, 2])) {
        let t = Tape::new();
        let v = t.input(x);
        let s = t.sum_all(v).unwrap();
        let g = t.backward(s).unwrap();
        prop_assert!(g.wrt(v).unwrap().data().iter().all(|&d| d == 1.0));
    }

    #[test]
    fn cumprod_of_positive_is_monotone_for_sub_unit(x in prop::collection::vec(0.0f64..1.0, 1..20)) {
        let n = x.len();
        let t = Tape::new();
        let v = t.constant(Tensor::new(vec![n], x).unwrap());
        let p = t.value(t.exclusive_cumprod(v).unwrap());
        prop_assert_eq!(p.data()[0], 1.0);
        prop_assert!(p.data().windows(2).all(|w| w[1] <= w[0]));
    }

    #[test]
    fn normalize_is_shift_invariant(x in tensor(vec![2, 6]), c in -3.0f64..3.0) {
        let t = Tape::new();
        let v = t.constant(x);
        let shifted = t.add_scalar(v, c).unwrap();
        let a = t.value(t.normalize(v, 1, 1e-5).unwrap());
        let b = t.value(t.normalize(shifted, 1, 1e-5).unwrap());
        for (p, q) in a.data().iter().zip(b.data()) {
            prop_assert!((p - q).abs() < 1e-9);
        }
    }
}
