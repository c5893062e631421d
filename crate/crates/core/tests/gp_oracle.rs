use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use sitegp_core::gp::{fit_hyperparameters, gram_matrix, log_marginal_likelihood};
use sitegp_core::{DieCoord, GpModel, GpOptions, KernelParams};

fn distinct_coords(rng: &mut ChaCha8Rng, n: usize, span: i32) -> Vec<DieCoord> {
    let mut out: Vec<DieCoord> = Vec::new();
    while out.len() < n {
        let c = DieCoord::new(rng.random_range(0..span), rng.random_range(0..span));
        if !out.contains(&c) {
            out.push(c);
        }
    }
    out
}

fn dense_gram(p: &KernelParams, a: &[DieCoord], b: &[DieCoord]) -> DMatrix<f64> {
    DMatrix::from_fn(a.len(), b.len(), |i, j| p.theta1 * (-a[i].dist2(b[j]) / p.theta2).exp())
}

#[test]
fn prediction_matches_dense_inverse() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for _ in 0..25 {
        let n = rng.random_range(3..40);
        let xs = distinct_coords(&mut rng, n + 10, 20);
        let (train, test) = xs.split_at(n);
        let p = KernelParams::new(rng.random_range(0.1..5.0), rng.random_range(1.0..30.0), rng.random_range(1e-3..0.1)).unwrap();
        let ys: Vec<f64> = (0..n).map(|_| rng.random_range(-2.0..2.0)).collect();

        let model = GpModel::fit(train, &ys, p).unwrap();
        let pred = model.predict(test);

        let k = dense_gram(&p, train, train) + DMatrix::identity(n, n) * p.nugget;
        let kinv = k.try_inverse().unwrap();
        let ks = dense_gram(&p, train, test);
        let mu = ks.transpose() * &kinv * DVector::from_column_slice(&ys);
        let cov = ks.transpose() * &kinv * &ks;
        for j in 0..test.len() {
            assert!((pred.means[j] - mu[j]).abs() < 1e-8 * (1.0 + mu[j].abs()), "mean {j}");
            let v = (p.theta1 - cov[(j, j)]).max(0.0);
            assert!((pred.variances[j] - v).abs() < 1e-8 * p.theta1, "var {j}");
        }
    }
}

#[test]
fn residual_of_alpha_is_small() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let xs = distinct_coords(&mut rng, 60, 12);
    let ys: Vec<f64> = (0..60).map(|_| rng.random_range(-1.0..1.0)).collect();
    let p = KernelParams::new(1.0, 20.0, 1e-6).unwrap();
    let model = GpModel::fit(&xs, &ys, p).unwrap();
    assert_eq!(model.effective_nugget(), p.nugget);
    let z = gram_matrix(&p, &xs);
    let r = z.mul_vec(model.alpha());
    let err = r.iter().zip(&ys).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
    // backward error relative to |Z| |alpha|
    let zmax = z.as_slice().iter().fold(0.0f64, |m, v| m.max(v.abs())) * 60.0;
    let amax = model.alpha().iter().fold(0.0f64, |m, v| m.max(v.abs()));
    assert!(err / (zmax * amax) < 1e-12, "{err} {zmax} {amax}");
}

#[test]
fn log_likelihood_matches_dense_formula() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let xs = distinct_coords(&mut rng, 20, 10);
    let ys: Vec<f64> = (0..20).map(|_| rng.random_range(-1.0..1.0)).collect();
    let p = KernelParams::new(0.7, 6.0, 0.05).unwrap();
    let k = dense_gram(&p, &xs, &xs) + DMatrix::identity(20, 20) * p.nugget;
    let y = DVector::from_column_slice(&ys);
    let quad = (y.transpose() * k.clone().try_inverse().unwrap() * &y)[(0, 0)];
    let expected = -0.5 * quad - 0.5 * k.determinant().ln() - 10.0 * (2.0 * std::f64::consts::PI).ln();
    let got = log_marginal_likelihood(&xs, &ys, &p);
    assert!((got - expected).abs() < 1e-8, "{got} vs {expected}");
}

// Draws 200 points from a GP with theta = (1, 8, 0.01) and checks that the
// fitted length scale lands within a factor of two of the truth.
#[test]
fn refit_recovers_length_scale() {
    let xs = distinct_coords(&mut ChaCha8Rng::seed_from_u64(100), 200, 20);
    let p = KernelParams::new(1.0, 8.0, 0.01).unwrap();
    let n = xs.len();
    let k = dense_gram(&p, &xs, &xs) + DMatrix::identity(n, n) * p.nugget;
    let l = k.cholesky().unwrap().l();
    let mut theta2 = Vec::new();
    for seed in 0..10 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let z = DVector::from_fn(n, |_, _| StandardNormal.sample(&mut rng));
        let y = &l * z;
        let fit = fit_hyperparameters(&xs, y.as_slice(), &GpOptions::default()).unwrap();
        theta2.push(fit.params.theta2);
    }
    theta2.sort_by(f64::total_cmp);
    let med = 0.5 * (theta2[4] + theta2[5]);
    assert!((4.0..=16.0).contains(&med), "median theta2 {med}: {theta2:?}");
}

// The nugget floor is absolute, so the base data keeps var(y) * 1e-8 above it.
#[test]
fn prediction_is_scale_equivariant() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let xs = distinct_coords(&mut rng, 40, 15);
    let (train, test) = xs.split_at(30);
    let ys: Vec<f64> = train.iter().map(|c| 10.0 * (f64::from(c.x) / 4.0).sin() + f64::from(c.y)).collect();
    let opts = GpOptions::default();
    let (fa, a) = sitegp_core::gp::fit_predict(train, &ys, test, &opts).unwrap();
    let s = 1000.0;
    let scaled: Vec<f64> = ys.iter().map(|v| s * v + 5.0).collect();
    let (fb, b) = sitegp_core::gp::fit_predict(train, &scaled, test, &opts).unwrap();
    assert!((fb.params.theta2 / fa.params.theta2 - 1.0).abs() < 1e-3);
    for j in 0..test.len() {
        assert!(((b.means[j] - 5.0) / s - a.means[j]).abs() < 1e-6, "{j}");
        assert!((b.variances[j] / (s * s) - a.variances[j]).abs() < 1e-6 * (1.0 + a.variances[j]));
    }
}
