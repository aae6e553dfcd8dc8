mod common;

use common::*;
use mfpmp::dynamics::{
    contractivity_check, eval_velocity, gronwall_radius, jacobian_flow, kernel_jacobians, simulate, simulate_from,
    support_bound, ControlField, ControlSignal, Drift, Kernel, NonlocalField,
};
use mfpmp::linalg::Matrix;
use mfpmp::{EmpiricalMeasure, Error};
use proptest::prelude::*;

fn zero_control(d: usize, intervals: usize) -> ControlSignal {
    ControlSignal::uniform(1.0, intervals, ControlField::zero_affine(d)).unwrap()
}

/// `exp(A)` by scaling and squaring of a truncated Taylor series.
fn expm(a: &Matrix) -> Matrix {
    let norm = a.frobenius();
    let squarings = if norm > 0.5 { (norm / 0.5).log2().ceil() as u32 } else { 0 };
    let scale = 0.5f64.powi(squarings as i32);
    let d = a.dim();
    let scaled = Matrix::from_row_major(d, a.as_slice().iter().map(|x| x * scale).collect());
    let mut sum = Matrix::identity(d);
    let mut term = Matrix::identity(d);
    for k in 1..=20 {
        let next = term.matmul(&scaled);
        term = Matrix::from_row_major(d, next.as_slice().iter().map(|x| x / k as f64).collect());
        sum = Matrix::from_row_major(d, sum.as_slice().iter().zip(term.as_slice()).map(|(a, b)| a + b).collect());
    }
    for _ in 0..squarings {
        sum = sum.matmul(&sum);
    }
    sum
}

#[test]
fn velocity_examples() {
    let mut r = rng(20);
    let mu = weighted_cloud(&mut r, 7, 2, 1.0);
    let a = 0.7;
    let field = NonlocalField::linear_attraction(a);
    let mean = mu.mean();
    let x = [0.3, -1.2];
    let v = eval_velocity(&field, None, &mu, 0.0, &x);
    for k in 0..2 {
        assert!((v[k] - a * (mean[k] - x[k])).abs() < 1e-14);
    }

    let b = ControlField::constant(vec![0.5, -2.0]);
    let v = eval_velocity(&NonlocalField::zero(), Some(&b), &mu, 0.0, &x);
    assert_eq!(v, vec![0.5, -2.0]);

    let dirac = EmpiricalMeasure::dirac(&[1.0, 1.0]).unwrap();
    let v = eval_velocity(&field, None, &dirac, 0.0, &x);
    assert!((v[0] - a * 0.7).abs() < 1e-15 && (v[1] - a * 2.2).abs() < 1e-15);
}

#[test]
fn kernel_jacobian_examples() {
    let (dx, dy) = kernel_jacobians(&Kernel::LinearAttraction { strength: 2.0 }, 0.0, &[1.0, 2.0], &[0.0, 3.0]);
    assert_eq!(dx, Matrix::scaled_identity(2, -2.0));
    assert_eq!(dy, Matrix::scaled_identity(2, 2.0));
    let (dx, dy) = kernel_jacobians(&Kernel::Zero, 0.0, &[1.0], &[0.0]);
    assert_eq!((dx, dy), (Matrix::zeros(1), Matrix::zeros(1)));
}

#[test]
fn simulate_examples() {
    let mut r = rng(21);
    let mu0 = weighted_cloud(&mut r, 6, 2, 1.0);
    let traj = simulate(&NonlocalField::zero(), &zero_control(2, 1), &mu0, 1.0, 0.01).unwrap();
    assert!(traj.states.iter().all(|s| s == &mu0));

    let b = vec![0.4, -0.3];
    let u = ControlSignal::uniform(1.0, 2, ControlField::constant(b.clone())).unwrap();
    let traj = simulate(&NonlocalField::zero(), &u, &mu0, 1.0, 0.01).unwrap();
    for (s, t) in traj.states.iter().zip(&traj.times) {
        for (x, x0) in s.points().zip(mu0.points()) {
            for k in 0..2 {
                assert!((x[k] - x0[k] - t * b[k]).abs() < 1e-13);
            }
        }
    }

    let a = 0.9;
    let traj = simulate(&NonlocalField::linear_attraction(a), &zero_control(2, 1), &mu0, 1.0, 1e-3).unwrap();
    let mean0 = mu0.mean();
    for (s, t) in traj.states.iter().zip(&traj.times) {
        assert!((s.variance() - (-2.0 * a * t).exp() * mu0.variance()).abs() < 1e-6);
        assert!(max_abs_diff(&s.mean(), &mean0) < 1e-13);
    }
}

// A stiff drift far beyond the RK4 stability region overflows.
#[test]
fn blow_up_is_reported() {
    let mu0 = EmpiricalMeasure::uniform(&[vec![1.0], vec![2.0]]).unwrap();
    let field = NonlocalField::new(
        Kernel::Zero,
        Drift::Linear {
            matrix: vec![-2000.0],
            offset: vec![0.0],
        },
    );
    let err = simulate(&field, &zero_control(1, 1), &mu0, 1.0, 0.01).unwrap_err();
    assert!(matches!(err, Error::BlowUp { .. }), "{err}");
}

#[test]
fn dt_must_divide_control_switches() {
    let mu0 = EmpiricalMeasure::dirac(&[0.0]).unwrap();
    let err = simulate(&NonlocalField::zero(), &zero_control(1, 3), &mu0, 1.0, 0.01).unwrap_err();
    assert!(matches!(err, Error::TimeGrid(_)), "{err}");
}

#[test]
fn jacobian_flow_examples() {
    let mut r = rng(22);
    let mu0 = uniform_cloud(&mut r, 5, 2, 1.0);
    let traj = jacobian_flow(&NonlocalField::zero(), &zero_control(2, 1), &mu0, 1.0, 0.01).unwrap();
    for w in traj.jacobians.as_ref().unwrap() {
        assert!(w.iter().all(|m| m == &Matrix::identity(2)));
    }

    let a = random_matrix(&mut r, 2, 1.0);
    let u = ControlSignal::uniform(1.0, 1, ControlField::affine(a.clone(), vec![0.1, 0.0]).unwrap()).unwrap();
    let traj = jacobian_flow(&NonlocalField::zero(), &u, &mu0, 1.0, 1e-3).unwrap();
    let jac = traj.jacobians.as_ref().unwrap();
    for (k, &t) in traj.times.iter().enumerate().step_by(100) {
        let exact = expm(&Matrix::from_row_major(2, a.iter().map(|x| x * t).collect()));
        for w in &jac[k] {
            assert!(w.max_abs_diff(&exact) < 1e-7);
        }
    }

    let s = 0.8;
    let traj = jacobian_flow(&NonlocalField::linear_attraction(s), &zero_control(2, 1), &mu0, 1.0, 1e-3).unwrap();
    let jac = traj.jacobians.as_ref().unwrap();
    for (k, &t) in traj.times.iter().enumerate() {
        let exact = Matrix::scaled_identity(2, (-s * t).exp());
        assert!(jac[k].iter().all(|w| w.max_abs_diff(&exact) < 1e-12));
    }
}

#[test]
fn contractivity_examples() {
    let mut r = rng(23);
    let mu0 = uniform_cloud(&mut r, 8, 2, 1.0);
    let nu0 = mu0.pushforward(|x| vec![x[0] + 0.01, x[1] - 0.02]).unwrap();
    let curve = contractivity_check(&NonlocalField::zero(), &zero_control(2, 1), &mu0, &nu0, 1.0, 0.01).unwrap();
    assert!(curve.ratios.iter().all(|q| (q - 1.0).abs() < 1e-9));

    let nu0 = uniform_cloud(&mut r, 8, 2, 1.0);
    let curve =
        contractivity_check(&NonlocalField::linear_attraction(1.0), &zero_control(2, 1), &mu0, &nu0, 1.0, 0.01).unwrap();
    assert!(curve.ratios.iter().all(|q| *q <= 1.0 + 1e-12));

    let curve = contractivity_check(&NonlocalField::gaussian(0.8, 1.5), &zero_control(2, 1), &mu0, &nu0, 1.0, 0.01).unwrap();
    assert!(curve.worst_excess() <= 1.0);

    let err = contractivity_check(&NonlocalField::zero(), &zero_control(2, 1), &mu0, &mu0, 1.0, 0.01).unwrap_err();
    assert_eq!(err, Error::CoincidentMeasures);
}

/// The field with every velocity negated: integrating it forward runs the
/// original flow backward.
fn reversed(field: &NonlocalField) -> NonlocalField {
    let kernel = match &field.kernel {
        Kernel::LinearAttraction { strength } => Kernel::LinearAttraction { strength: -strength },
        Kernel::Gaussian { width, strength } => Kernel::Gaussian {
            width: *width,
            strength: -strength,
        },
        k => k.clone(),
    };
    let drift = match &field.drift {
        Drift::Linear { matrix, offset } => Drift::Linear {
            matrix: matrix.iter().map(|x| -x).collect(),
            offset: offset.iter().map(|x| -x).collect(),
        },
        Drift::Constant { value } => Drift::Constant {
            value: value.iter().map(|x| -x).collect(),
        },
        Drift::Zero => Drift::Zero,
    };
    NonlocalField::new(kernel, drift)
}

#[test]
fn forward_backward_step_is_fourth_order() {
    let mut r = rng(24);
    let field = NonlocalField::new(
        Kernel::Gaussian {
            width: 1.0,
            strength: 1.2,
        },
        Drift::Linear {
            matrix: vec![0.0, 0.5, -0.5, 0.1],
            offset: vec![0.2, 0.0],
        },
    );
    let back = reversed(&field);
    let mu0 = uniform_cloud(&mut r, 12, 2, 1.5);
    let u = zero_control(2, 1);
    let mut errors = Vec::new();
    let steps = [0.1, 0.05, 0.025];
    for &dt in &steps {
        let fwd = simulate_from(&field, &u, &mu0, 0.0, dt, dt).unwrap();
        let ret = simulate_from(&back, &u, fwd.terminal(), 0.0, dt, dt).unwrap();
        errors.push(max_abs_diff(ret.terminal().points_flat(), mu0.points_flat()));
    }
    // One RK4 step there and back errs by O(dt^5).
    assert!(loglog_slope(&steps, &errors) >= 4.5, "{errors:?}");
    assert!(errors[2] < 1e-6 * mu0.len() as f64);
}

#[test]
fn rk4_order_on_linear_attraction() {
    let mut r = rng(25);
    let mu0 = uniform_cloud(&mut r, 10, 2, 1.0);
    let a: f64 = 1.5;
    let mean = mu0.mean();
    let exact: Vec<f64> = mu0
        .points()
        .flat_map(|x| vec![mean[0] + (-a).exp() * (x[0] - mean[0]), mean[1] + (-a).exp() * (x[1] - mean[1])])
        .collect();
    let err = |dt: f64| {
        let t = simulate(&NonlocalField::linear_attraction(a), &zero_control(2, 1), &mu0, 1.0, dt).unwrap();
        max_abs_diff(t.terminal().points_flat(), &exact)
    };
    assert!((err(0.1) / err(0.05)).log2() >= 3.7);
}

#[test]
fn gronwall_radius_formula() {
    assert!((gronwall_radius(1.0, 2.0, 0.5) - 2.0 * 1f64.exp()).abs() < 1e-15);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn weights_conserved_and_support_bounded(
        seed in 0u64..1000,
        n in 1usize..10,
        strength in -1.0f64..1.0,
        width in 0.5f64..2.0,
    ) {
        let mut r = rng(seed);
        let mu0 = weighted_cloud(&mut r, n, 2, 2.0);
        let field = NonlocalField::new(
            Kernel::Gaussian { width, strength },
            Drift::Linear { matrix: random_matrix(&mut r, 2, 0.5), offset: random_vector(&mut r, 2, 0.5) },
        );
        let u = random_affine_signal(&mut r, 2, 4, 1.0, 0.4);
        let traj = simulate(&field, &u, &mu0, 1.0, 0.01).unwrap();
        let bound = support_bound(&field, &u, &mu0, 1.0);
        for s in &traj.states {
            prop_assert_eq!(s.weights(), mu0.weights());
            prop_assert!(s.support_radius() <= bound);
        }
    }
}
