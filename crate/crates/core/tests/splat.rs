mod common;

use std::f64::consts::PI;

use approx::assert_abs_diff_eq;
use common::*;
use ngrf_core::antenna::ArraySpec;
use ngrf_core::dataset::Measurement;
use ngrf_core::math::{softplus, Mat3};
use ngrf_core::model::{FieldModel, Query};
use ngrf_core::splat::{cs1_jacobian, cs1_project, footprint, Cs1Model, Cs2Model, SplatConfig, SplatShapes};
use ngrf_core::trainer::{train, TrainConfig};
use ngrf_core::{Complex, Error, Vec3};
use proptest::prelude::*;
use rand::Rng;

fn siso_config() -> SplatConfig {
    SplatConfig { n_gaussians: 0, s_init: 0.137, carrier_hz: 2.4e9, tx_array: ArraySpec::single(), rx_array: ArraySpec::single() }
}

fn shapes(means: &[Vec3], opacity_raw: &[f64]) -> SplatShapes {
    SplatShapes {
        means: means.iter().flat_map(|m| m.to_array()).collect(),
        quats: means.iter().flat_map(|_| [1.0, 0.0, 0.0, 0.0]).collect(),
        scale_raw: vec![0.3; 3 * means.len()],
        opacity_raw: opacity_raw.to_vec(),
    }
}

/// `(λ/4πd) e^{-j2πd/λ}`
fn free_space(d: f64, lambda: f64) -> Complex {
    Complex::from_polar(lambda / (4.0 * PI * d), -2.0 * PI * d / lambda)
}

#[test]
fn projection_examples() {
    let (nt, nr) = (16, 2);
    let rx = Vec3::new(1.0, 2.0, 0.5);
    let (uv, r) = cs1_project(rx + Vec3::new(3.0, 0.0, 0.0), rx, nt, nr).unwrap();
    assert_abs_diff_eq!(uv[0], 7.5 + 0.5, epsilon = 1e-15);
    assert_abs_diff_eq!(uv[1], 0.5 + 0.5, epsilon = 1e-15);
    assert_abs_diff_eq!(r, 3.0, epsilon = 1e-15);
    // Approaching +z the latitude goes to π/2, so s_y → 1.
    let (uv, _) = cs1_project(rx + Vec3::new(1e-7, 0.0, 1.0), rx, nt, nr).unwrap();
    assert_abs_diff_eq!(uv[1], 1.5 * (nr as f64 - 1.0) + 0.5, epsilon = 1e-6);
    assert!(matches!(cs1_project(rx, rx, nt, nr), Err(Error::SingularGeometry(_))));
    assert!(matches!(cs1_project(rx + Vec3::new(0.0, 0.0, 2.0), rx, nt, nr), Err(Error::SingularGeometry(_))));
}

#[test]
fn jacobian_examples() {
    let mut r = rng(1);
    for _ in 0..50 {
        let (nt, nr) = (r.gen_range(1..17), r.gen_range(1..5));
        let d = Vec3::new(r.gen_range(-3.0..3.0), r.gen_range(-3.0..3.0), 0.0);
        let j = cs1_jacobian(d, nt, nr).unwrap();
        assert_eq!(j[0][2], 0.0);
        assert_abs_diff_eq!(j[1][2], 2.0 * (nr as f64 - 1.0) / (PI * d.norm()), epsilon = 1e-12);
        let d = rand_vec3(&mut r, -3.0, 3.0);
        assert_eq!(cs1_jacobian(d, nt, nr).unwrap()[0][2], 0.0);
    }
    assert!(cs1_jacobian(Vec3::new(0.0, 0.0, 1.0), 4, 2).is_err());
}

#[test]
fn footprint_matches_generic_two_by_two_inverse() {
    let mut r = rng(2);
    for _ in 0..100 {
        let (nt, nr) = (r.gen_range(1..6), r.gen_range(1..4));
        let mu = rand_vec3(&mut r, -2.0, 2.0);
        let rx = rand_vec3(&mut r, -2.0, 2.0);
        let s = [r.gen_range(0.05..1.0), r.gen_range(0.05..1.0), r.gen_range(0.05..1.0)];
        let rot = ngrf_core::math::build_rotation(rand_quat(&mut r)).unwrap();
        let m = rot.mul_mat(&Mat3::from_diag(s));
        let cov = m.mul_mat(&m.transpose());
        let Some(fp) = footprint(mu, rx, &cov, nt, nr) else { continue };
        let j = cs1_jacobian(mu - rx, nt, nr).unwrap();
        let mut s2 = [[0.0; 2]; 2];
        for a in 0..2 {
            for b in 0..2 {
                s2[a][b] = (0..3).map(|i| (0..3).map(|k| j[a][i] * cov.0[i][k] * j[b][k]).sum::<f64>()).sum::<f64>();
            }
            s2[a][a] += 1e-6;
        }
        let det = s2[0][0] * s2[1][1] - s2[0][1] * s2[1][0];
        let (uv, _) = cs1_project(mu, rx, nt, nr).unwrap();
        for t in 0..nt {
            for c in 0..nr {
                let (x, y) = (uv[0] - t as f64 - 0.5, uv[1] - c as f64 - 0.5);
                let m2 = (s2[1][1] * x * x - 2.0 * s2[0][1] * x * y + s2[0][0] * y * y) / det;
                let want = (-0.5 * m2).exp();
                let got = fp.sigma[t * nr + c];
                assert!((got - want).abs() <= 1e-12 * want.max(1e-300).max(1.0), "{got} vs {want}");
                assert!(got > 0.0 || want < 1e-300);
                assert!(got <= 1.0);
            }
        }
    }
}

#[test]
fn footprint_at_cell_center_is_one() {
    // SISO: every direction lands on the single cell center.
    let cov = Mat3::from_diag([0.01, 0.02, 0.03]);
    let fp = footprint(Vec3::new(1.0, 2.0, 3.0), Vec3::ZERO, &cov, 1, 1).unwrap();
    assert_eq!(fp.sigma, vec![1.0]);
}

#[test]
fn cs1_line_of_sight_is_free_space() {
    let m = Cs1Model::from_parts(siso_config(), shapes(&[Vec3::new(5.0, 5.0, 5.0)], &[0.0]), vec![0.0, 0.0]).unwrap();
    let q = Query { tx: Vec3::new(0.0, 0.0, 1.0), rx: Vec3::new(3.0, 4.0, 1.0) };
    let h = m.line_of_sight(&q).unwrap();
    let want = free_space(5.0, m.config.wavelength());
    assert!((h.data[0] - want).norm() <= 1e-12 * want.norm());
    // γ = 0 leaves only the direct path.
    assert_eq!(m.predict(&[q]).unwrap()[0], h);
}

#[test]
fn cs1_single_scatterer_siso() {
    let mu = Vec3::new(2.0, -1.0, 1.5);
    let gamma = Complex::new(0.4, -0.7);
    let m = Cs1Model::from_parts(siso_config(), shapes(&[mu], &[0.3]), vec![gamma.re, gamma.im]).unwrap();
    let q = Query { tx: Vec3::new(0.0, 0.0, 1.0), rx: Vec3::new(3.0, 2.0, 0.5) };
    let h = m.predict(&[q]).unwrap()[0].data[0];
    let lambda = m.config.wavelength();
    let d = mu.distance(q.tx) + mu.distance(q.rx);
    let o = 1.0 / (1.0 + (-0.3f64).exp());
    let want = free_space(q.tx.distance(q.rx), lambda) + gamma * free_space(d, lambda) * o;
    assert!((h - want).norm() <= 1e-12 * want.norm());
}

#[test]
fn cs1_scatterer_at_a_pole_contributes_nothing() {
    let rx = Vec3::new(3.0, 2.0, 0.5);
    let m = Cs1Model::from_parts(siso_config(), shapes(&[rx + Vec3::new(0.0, 0.0, 1.0)], &[2.0]), vec![1.0, 1.0]).unwrap();
    let q = Query { tx: Vec3::ZERO, rx };
    assert_eq!(m.predict(&[q]).unwrap()[0], m.line_of_sight(&q).unwrap());
}

#[test]
fn cs1_mimo_scatter_term_is_rank_one_with_free_space_modulus() {
    let mut r = rng(3);
    for _ in 0..20 {
        let m = tiny_cs1(r.gen(), 1, 2, 2, 2);
        let q = Query { tx: rand_vec3(&mut r, 0.0, 2.0), rx: rand_vec3(&mut r, 0.0, 2.0) };
        let h = &m.predict(&[q]).unwrap()[0];
        let los = m.line_of_sight(&q).unwrap();
        let mu = m.shapes.mean(0);
        let (_, cov) = m.shapes.covariance(0).unwrap();
        let Some(fp) = footprint(mu, q.rx, &cov, 4, 2) else { continue };
        let o = m.shapes.opacity(0);
        let lambda = m.config.wavelength();
        let beta = Complex::new(m.gamma[0], m.gamma[1]) * free_space(mu.distance(q.tx) + mu.distance(q.rx), lambda);
        // Recovering the term from h − h_LOS loses |h_LOS|·ε absolute, amplified by 1/(oσ).
        let cells: Vec<usize> = (0..8).filter(|&k| o * fp.sigma[k] * beta.norm() > 1e-6 * los.data[k].norm()).collect();
        let p = |k: usize| (h.data[k] - los.data[k]) / (o * fp.sigma[k]);
        let tol = |k: usize| 1e-13 * los.data[k].norm() / (o * fp.sigma[k]);
        for &k in &cells {
            assert!((p(k).norm() - beta.norm()).abs() <= tol(k), "cell {k}: {} vs {}", p(k).norm(), beta.norm());
        }
        for &a in &cells {
            for &b in &cells {
                let (ta, ra, tb, rb) = (a / 2, a % 2, b / 2, b % 2);
                if ta == tb || ra == rb || !cells.contains(&(2 * ta + rb)) || !cells.contains(&(2 * tb + ra)) {
                    continue;
                }
                // P[ta][ra]·P[tb][rb] = P[ta][rb]·P[tb][ra] for an outer product.
                let minor = p(a) * p(b) - p(2 * ta + rb) * p(2 * tb + ra);
                assert!(minor.norm() <= 4.0 * beta.norm() * [a, b, 2 * ta + rb, 2 * tb + ra].iter().map(|&k| tol(k)).fold(0.0, f64::max));
            }
        }
    }
}

fn cs2(means: &[Vec3], opacity_raw: &[f64], amp_raw: &[f64], phase: &[f64]) -> Cs2Model {
    Cs2Model::from_parts(siso_config(), shapes(means, opacity_raw), amp_raw.to_vec(), phase.to_vec()).unwrap()
}

fn cs2_contribution(m: &Cs2Model, i: usize, rx: Vec3) -> Complex {
    let lambda = m.config.wavelength();
    let r = m.shapes.mean(i).distance(rx);
    softplus(m.amp_raw[i]) * Complex::from_polar(lambda / (4.0 * PI * r), m.phase[i] - 2.0 * PI * r / lambda)
}

#[test]
fn cs2_opaque_gaussian_returns_its_contribution() {
    let m = cs2(&[Vec3::new(1.0, 2.0, 3.0)], &[40.0], &[0.7], &[1.2]);
    let q = Query { tx: Vec3::ZERO, rx: Vec3::new(4.0, 1.0, 0.0) };
    let h = m.predict(&[q]).unwrap()[0].data[0];
    let want = cs2_contribution(&m, 0, q.rx);
    assert!((h - want).norm() <= 1e-12 * want.norm());
}

#[test]
fn cs2_second_gaussian_is_attenuated_by_the_first() {
    let rx = Vec3::new(4.0, 1.0, 0.0);
    let near = rx + Vec3::new(1.0, 0.5, 0.2);
    let far = rx + Vec3::new(-3.0, 2.0, 1.0);
    // Stored far-first: compositing must still go near to far.
    let m = cs2(&[far, near], &[0.4, -0.2], &[0.7, 1.5], &[1.2, -0.4]);
    let h = m.predict(&[Query { tx: Vec3::ZERO, rx }]).unwrap()[0].data[0];
    let (a_far, a_near) = (m.shapes.opacity(0), m.shapes.opacity(1));
    let want = cs2_contribution(&m, 1, rx) * a_near + cs2_contribution(&m, 0, rx) * (a_far * (1.0 - a_near));
    assert!((h - want).norm() <= 1e-12 * want.norm());
}

#[test]
fn cs2_depends_on_depth_order() {
    let rx = Vec3::new(4.0, 1.0, 0.0);
    let a = rx + Vec3::new(1.0, 0.5, 0.2);
    let b = rx + Vec3::new(-3.0, 2.0, 1.0);
    let q = [Query { tx: Vec3::ZERO, rx }];
    // Swap which Gaussian carries which attributes, so the front one changes.
    let h1 = cs2(&[a, b], &[1.0, 1.0], &[0.7, 1.5], &[1.2, -0.4]).predict(&q).unwrap();
    let h2 = cs2(&[b, a], &[1.0, 1.0], &[0.7, 1.5], &[1.2, -0.4]).predict(&q).unwrap();
    assert!((h1[0].data[0] - h2[0].data[0]).norm() > 1e-6);
}

#[test]
fn variants_train_under_the_shared_trainer() {
    let mut r = rng(4);
    let tx = Vec3::new(0.2, 0.2, 0.2);
    let data: Vec<Measurement> =
        (0..24).map(|_| Measurement { tx, rx: rand_vec3(&mut r, 0.0, 2.0), h: rand_channel(&mut r, 4, 2, 1e-3) }).collect();
    let cfg = TrainConfig { iterations: 30, batch_size: 8, eval_every: 10, ..Default::default() };
    let a = train(tiny_cs1(5, 6, 2, 2, 2), &data[..20], &data[20..], &cfg).unwrap();
    let b = train(tiny_cs2(6, 6, 2, 2, 2), &data[..20], &data[20..], &cfg).unwrap();
    for out in [a.history, b.history] {
        assert_eq!(out.len(), 4);
        assert!(out.iter().all(|r| r.loss.is_finite() && r.train_snr.is_finite()));
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn projection_stays_on_the_extended_grid(
        d in proptest::array::uniform3(-5.0f64..5.0),
        nt in 1usize..17,
        nr in 1usize..5,
    ) {
        let d = Vec3::from(d);
        prop_assume!(d.x.hypot(d.y) > 1e-6);
        let ([u, v], _) = cs1_project(d, Vec3::ZERO, nt, nr).unwrap();
        let (t, r) = (nt as f64 - 1.0, nr as f64 - 1.0);
        prop_assert!(u >= -0.5 * t + 0.5 - 1e-12 && u <= 1.5 * t + 0.5 + 1e-12);
        prop_assert!(v >= -0.5 * r + 0.5 - 1e-12 && v <= 1.5 * r + 0.5 + 1e-12);
    }

    #[test]
    fn projection_is_continuous_off_the_seam(d in proptest::array::uniform3(-5.0f64..5.0)) {
        let d = Vec3::from(d);
        prop_assume!(d.x.hypot(d.y) > 0.1 && !(d.x < 0.0 && d.y.abs() < 0.1));
        let (a, _) = cs1_project(d, Vec3::ZERO, 8, 3).unwrap();
        let (b, _) = cs1_project(d + Vec3::new(1e-7, -1e-7, 1e-7), Vec3::ZERO, 8, 3).unwrap();
        prop_assert!((a[0] - b[0]).abs() < 1e-4 && (a[1] - b[1]).abs() < 1e-4);
    }

    #[test]
    fn cs2_faint_limit_is_first_order_sum(seed in any::<u64>()) {
        let mut r = rng(seed);
        let rx = Vec3::new(1.0, 1.0, 1.0);
        let means: Vec<Vec3> = (0..4).map(|_| rand_vec3(&mut r, -2.0, 4.0)).collect();
        prop_assume!(means.iter().all(|m| (*m - rx).to_array()[..2].iter().any(|v| v.abs() > 0.1)));
        let raw = -12.0;
        let amp: Vec<f64> = (0..4).map(|_| r.gen_range(-1.0..1.0)).collect();
        let phase: Vec<f64> = (0..4).map(|_| r.gen_range(0.0..6.0)).collect();
        let m = cs2(&means, &[raw; 4], &amp, &phase);
        let h = m.predict(&[Query { tx: Vec3::ZERO, rx }]).unwrap()[0].data[0];
        let alpha = m.shapes.opacity(0);
        let first: Complex = (0..4).map(|i| cs2_contribution(&m, i, rx) * alpha).sum();
        let scale: f64 = (0..4).map(|i| cs2_contribution(&m, i, rx).norm()).sum();
        prop_assert!((h - first).norm() <= 4.0 * alpha * alpha * scale);
    }
}
