use proptest::prelude::*;
use spa_core::config::TrainConfig;
use spa_core::optim::{adamw_step, clip_grad_norm, onecycle_lr, AdamW, EmaState, OptimState};
use spa_diff::{ParamId, ParamStore, Tensor};

fn one_param(value: f64, grad: f64) -> (ParamStore<f64>, ParamId) {
    let mut s = ParamStore::new();
    let id = s.register("w", Tensor::new(vec![1], vec![value]).unwrap()).unwrap();
    s.get_mut(id).grad = Tensor::new(vec![1], vec![grad]).unwrap();
    (s, id)
}

fn adam(wd: f64) -> AdamW {
    AdamW { beta1: 0.9, beta2: 0.999, eps: 1e-8, weight_decay: wd }
}

#[test]
fn first_step_moves_by_the_learning_rate() {
    let (mut s, id) = one_param(0.0, 1.0);
    let mut st = OptimState::new(&s);
    adamw_step(&mut s, &mut st, &adam(0.0), 0.01).unwrap();
    // m_hat = v_hat = 1, so the step is lr / (1 + eps).
    assert!((s.value(id).data()[0] + 0.01 / (1.0 + 1e-8)).abs() < 1e-15);
    assert!((s.value(id).data()[0] + 0.01).abs() < 1e-10);
}

#[test]
fn zero_gradient_without_decay_changes_nothing() {
    let (mut s, id) = one_param(0.7, 0.0);
    let mut st = OptimState::new(&s);
    for _ in 0..5 {
        adamw_step(&mut s, &mut st, &adam(0.0), 0.1).unwrap();
    }
    assert_eq!(s.value(id).data()[0], 0.7);
}

#[test]
fn decay_is_decoupled_from_the_gradient() {
    let (mut s, id) = one_param(2.0, 0.0);
    let mut st = OptimState::new(&s);
    let (lr, wd) = (0.01, 0.04);
    adamw_step(&mut s, &mut st, &adam(wd), lr).unwrap();
    assert!((s.value(id).data()[0] - 2.0 * (1.0 - lr * wd)).abs() < 1e-10);
}

#[test]
fn non_finite_gradient_aborts_without_changes() {
    let (mut s, id) = one_param(1.0, f64::NAN);
    let mut st = OptimState::new(&s);
    assert!(adamw_step(&mut s, &mut st, &adam(0.1), 0.1).is_err());
    assert_eq!(s.value(id).data()[0], 1.0);
    assert_eq!(st.step, 0);
}

#[test]
fn clipping_bounds_the_global_norm() {
    let mut s = ParamStore::<f64>::new();
    let a = s.register("a", Tensor::zeros(vec![2])).unwrap();
    let b = s.register("b", Tensor::zeros(vec![1])).unwrap();
    s.get_mut(a).grad = Tensor::new(vec![2], vec![3.0, 0.0]).unwrap();
    s.get_mut(b).grad = Tensor::new(vec![1], vec![4.0]).unwrap();
    assert!((clip_grad_norm(&mut s, 1.0) - 5.0).abs() < 1e-12);
    assert!((s.grad_norm() - 1.0).abs() < 1e-6);
    // Already small gradients are left alone.
    assert!((clip_grad_norm(&mut s, 10.0) - s.grad_norm()).abs() < 1e-15);
}

#[test]
fn onecycle_endpoints_for_the_training_profiles() {
    let lr = |s| onecycle_lr(s, 1000, 8e-4, 0.05, 100.0, 1000.0);
    assert!((lr(0) - 8e-6).abs() < 1e-18);
    assert!((lr(50) - 8e-4).abs() < 1e-18);
    assert!((lr(1000) - 8e-9).abs() < 1e-20);
    assert!(lr(5000) - 8e-9 < 1e-20);

    let p = TrainConfig::paper();
    assert_eq!(p.lr, 8e-4);
    assert_eq!(p.weight_decay, 0.04);
    assert_eq!(p.ema_decay, 0.999);
}

/// Warm-up then decay, each half a cosine, written out from scratch.
fn reference_lr(step: usize, total: usize) -> f64 {
    let (max, init) = (8e-4, 8e-4 / 100.0);
    let min = init / 1000.0;
    let warm = (0.05 * total as f64) as usize;
    let pi = std::f64::consts::PI;
    if step <= warm {
        let f = step as f64 / warm as f64;
        init + (max - init) * (1.0 - (pi * f).cos()) / 2.0
    } else {
        let f = (step - warm) as f64 / (total - warm) as f64;
        min + (max - min) * (1.0 + (pi * f).cos()) / 2.0
    }
}

#[test]
fn onecycle_trace_matches_reference() {
    for total in [100, 300, 1000] {
        let lr = |s| onecycle_lr(s, total, 8e-4, 0.05, 100.0, 1000.0);
        let warm = total / 20;
        for s in 0..=total {
            assert!((lr(s) - reference_lr(s, total)).abs() < 1e-12, "step {s}/{total}");
            if s > 0 {
                // Rising through warm-up, falling after.
                assert_eq!(lr(s) > lr(s - 1), s <= warm, "step {s}/{total}");
            }
        }
    }
}

#[test]
fn ema_on_a_frozen_parameter_is_geometric() {
    let (s, _) = one_param(1.0, 0.0);
    let mut ema = EmaState::new(&s, 0.999);
    ema.shadow[0] = Tensor::zeros(vec![1]);
    ema.update(&s);
    assert!((ema.shadow[0].data()[0] - 0.001).abs() < 1e-15);
    for _ in 1..100 {
        ema.update(&s);
    }
    // e_k = p + (e_0 - p) d^k
    let want = 1.0 - 0.999f64.powi(100);
    assert!((ema.shadow[0].data()[0] - want).abs() < 1e-12);
    let st = ema.store(&s);
    assert_eq!(st.value(st.id("w").unwrap()).data()[0], ema.shadow[0].data()[0]);
}

proptest! {
    #[test]
    fn single_step_is_bounded_by_the_learning_rate(
        g in -100.0f64..100.0, theta in -5.0f64..5.0, lr in 1e-5f64..0.1,
    ) {
        prop_assume!(g.abs() > 1e-3);
        let (mut s, id) = one_param(theta, g);
        let mut st = OptimState::new(&s);
        adamw_step(&mut s, &mut st, &adam(0.0), lr).unwrap();
        let moved = s.value(id).data()[0] - theta;
        prop_assert!(moved.abs() <= lr * (1.0 + 1e-9));
        prop_assert!(moved * g < 0.0);
    }

    #[test]
    fn schedule_stays_within_its_range(step in 0usize..2000, total in 20usize..2000) {
        let lr = onecycle_lr(step, total, 1e-3, 0.05, 100.0, 1000.0);
        prop_assert!(lr >= 1e-3 / 100.0 / 1000.0 * (1.0 - 1e-12));
        prop_assert!(lr <= 1e-3 * (1.0 + 1e-12));
    }
}
