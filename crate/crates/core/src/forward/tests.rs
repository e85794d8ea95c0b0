use std::f64::consts::PI;

use nalgebra::{DMatrix, DVector};
use proptest::prelude::*;

use super::*;
use crate::geometry::{rotation, ChartAtlas, FiberMetric, GridBundle, GridManifold, Section};
use crate::linalg::block_diag;

fn line_model(n: usize) -> SpectralModel<f64> {
    let b = GridBundle::new(
        GridManifold::uniform(n).unwrap(),
        ChartAtlas::trivial(n, 1),
        FiberMetric::constant(n, DMatrix::identity(1, 1)).unwrap(),
    )
    .unwrap();
    assemble_and_decompose(&EllipticOperatorSpec::laplace_plus_one(n, 1), &b).unwrap()
}

fn rank2_bundle(n: usize) -> GridBundle<f64> {
    let atlas = ChartAtlas::two_chart(
        n,
        2,
        |k| rotation(0.2 * k as f64),
        |k| rotation(1.0 - 0.1 * k as f64),
    )
    .unwrap();
    GridBundle::new(
        GridManifold::uniform(n).unwrap(),
        atlas,
        FiberMetric::constant(n, DMatrix::identity(2, 2)).unwrap(),
    )
    .unwrap()
}

fn rank2_model(n: usize) -> SpectralModel<f64> {
    let b = rank2_bundle(n);
    let spec = EllipticOperatorSpec::laplace_with_potential(n, 2, |i| {
        1.0 + 0.5 * (2.0 * PI * i as f64 / n as f64).sin()
    });
    assemble_and_decompose(&spec, &b).unwrap()
}

fn mode_zero_source(model: &SpectralModel<f64>) -> SourceFunction<f64> {
    SourceFunction::Separable {
        profile: model.eigenvectors().column(0).into_owned(),
        window: Window::Boxcar,
        start: 0.0,
        end: PI,
    }
}

fn bump(model: &SpectralModel<f64>, center: usize, start: f64, end: f64) -> SourceFunction<f64> {
    let n = model.bundle.node_count();
    let d = model.bundle.rank();
    let mut p = DVector::zeros(n * d);
    for i in 0..n {
        let dist =
            ((i as f64 - center as f64 + n as f64 / 2.0).rem_euclid(n as f64)) - n as f64 / 2.0;
        for k in 0..d {
            p[i * d + k] = (-(dist * dist) / 8.0).exp() * (1.0 + k as f64);
        }
    }
    SourceFunction::Separable {
        profile: p,
        window: Window::Hann,
        start,
        end,
    }
}

fn sampled(
    model: &SpectralModel<f64>,
    seed: u64,
    start: f64,
    step: f64,
    knots: usize,
) -> SourceFunction<f64> {
    let dim = model.dim();
    let mut x = seed as f64 + 0.5;
    let values = DMatrix::from_fn(dim, knots, |_, _| {
        x = (x * 7.31 + 0.17).fract() * 10.0;
        x.sin()
    });
    SourceFunction::Sampled {
        start,
        step,
        values,
    }
}

#[test]
fn zero_source_stays_at_rest() {
    let m = line_model(16);
    for t in [-3.0, 0.0, 5.0] {
        let s = duhamel_evolve(&m, &SourceFunction::Zero, t).unwrap();
        assert_eq!(s.u.values.amax(), 0.0);
        assert_eq!(s.u_t.values.amax(), 0.0);
        assert_eq!(energy(&m, &SourceFunction::Zero, t).unwrap(), 0.0);
    }
}

#[test]
fn single_mode_state_and_energy() {
    let m = line_model(64);
    let src = mode_zero_source(&m);
    let s = duhamel_evolve(&m, &src, PI).unwrap();
    let phi0 = m.eigenvectors().column(0);
    assert!((s.u.to_flat() - phi0 * 2.0).amax() < 1e-8);
    assert!(s.u_t.to_flat().amax() < 1e-8);
    assert!((energy(&m, &src, PI).unwrap() - 2.0).abs() < 1e-8);

    let knots = DMatrix::from_fn(64, 9, |r, _| phi0[r]);
    let piecewise = SourceFunction::Sampled {
        start: 0.0,
        step: PI / 8.0,
        values: knots,
    };
    assert!((energy(&m, &piecewise, PI).unwrap() - 2.0).abs() < 1e-10);
}

#[test]
fn closed_form_agrees_with_quadrature() {
    let m = line_model(32);
    let src = bump(&m, 5, -0.3, 0.45);
    let t = 0.2;
    let closed = ModalSource::new(&m, &src).unwrap().state(&m, t).unwrap();
    let (gx, gw) = gauss_legendre(20);
    let panels = 200;
    let h = (t + 0.3) / panels as f64;
    let mut u = DVector::zeros(32);
    let mut v = DVector::zeros(32);
    for p in 0..panels {
        for k in 0..gx.len() {
            let s = -0.3 + h * (p as f64 + 0.5 * (gx[k] + 1.0));
            let fl = m.project(&src.value_at(s, 32));
            for l in 0..32 {
                let w = m.frequencies()[l];
                u[l] += 0.5 * h * gw[k] * (w * (t - s)).sin() / w * fl[l];
                v[l] += 0.5 * h * gw[k] * (w * (t - s)).cos() * fl[l];
            }
        }
    }
    assert!((closed.0 - u).amax() < 1e-11);
    assert!((closed.1 - v).amax() < 1e-11);
}

#[test]
fn energy_is_conserved_after_support() {
    let m = rank2_model(24);
    let src = SourceFunction::Sum(vec![
        (1.0, 0.0, bump(&m, 3, 0.0, 0.5)),
        (-0.7, 0.0, sampled(&m, 3, 0.6, 0.05, 11)),
    ]);
    let e0 = energy(&m, &src, 1.2).unwrap();
    assert!(e0 > 0.0);
    for k in 0..10 {
        let e = energy(&m, &src, 1.2 + 3.7 * k as f64).unwrap();
        assert!((e - e0).abs() <= 1e-10 * e0);
    }
}

#[test]
fn time_shift_identity() {
    let m = rank2_model(16);
    let src = sampled(&m, 1, 0.0, 0.1, 8);
    for (shift, t) in [(0.5, 0.3), (2.0, 1.0), (0.25, -0.1)] {
        let a = duhamel_evolve(&m, &src.clone().shifted(shift), t).unwrap();
        let b = duhamel_evolve(&m, &src, t + shift).unwrap();
        assert!((a.u.values - b.u.values).amax() < 1e-12);
        assert!((a.u_t.values - b.u_t.values).amax() < 1e-12);
    }
}

#[test]
fn cauchy_control_round_trip() {
    let m = line_model(32);
    let zero = Section::zero(1, 32);
    assert_eq!(
        source_for_cauchy_data(&m, &zero, &zero, -1.0, 0.0, 0.5).unwrap(),
        SourceFunction::Zero
    );
    for (a, b) in [
        (m.eigensection(0), zero.clone()),
        (zero.clone(), m.eigensection(1)),
    ] {
        let src = source_for_cauchy_data(&m, &a, &b, -1.0, 0.0, 0.5).unwrap();
        let st = duhamel_evolve(&m, &src, 0.5).unwrap();
        assert!((st.u.values - &a.values).amax() < 1e-8);
        assert!((st.u_t.values - &b.values).amax() < 1e-8);
    }
}

#[test]
fn a_priori_bound_is_homogeneous() {
    let m = line_model(32);
    let src = bump(&m, 9, 0.0, 1.0);
    let ratio = |scale: f64| {
        let scaled = SourceFunction::Sum(vec![(scale, 0.0, src.clone())]);
        let st = duhamel_evolve(&m, &scaled, 1.5).unwrap();
        let (gx, gw) = gauss_legendre(16);
        let mut l2 = 0.0;
        for k in 0..gx.len() {
            let s = 0.5 * (gx[k] + 1.0);
            let v = Section::from_flat(&scaled.value_at(s, 32), 1);
            l2 += 0.5 * gw[k] * m.sobolev_norm_sq(&v, 2);
        }
        m.sobolev_norm(&st.u, 2) / l2.sqrt()
    };
    let base = ratio(1.0);
    assert!(base.is_finite() && base > 0.0);
    for scale in [1e-3, 3.0, 250.0] {
        assert!((ratio(scale) - base).abs() < 1e-10 * base);
    }
}

fn smooth_gauge(n: usize) -> Vec<DMatrix<f64>> {
    (0..n)
        .map(|i| {
            let x = 2.0 * PI * i as f64 / n as f64;
            DMatrix::from_row_slice(
                2,
                2,
                &[
                    1.3 + 0.2 * x.sin(),
                    0.4 * x.cos(),
                    -0.3 * (2.0 * x).sin(),
                    0.9 + 0.1 * x.cos(),
                ],
            )
        })
        .collect()
}

#[test]
fn gauge_covariance_of_energies() {
    let n = 24;
    let m = rank2_model(n);
    let g = smooth_gauge(n);
    let gb = m.bundle.gauge_transform(&g).unwrap();
    let gs = m.spec.gauge_transform(&m.bundle, &g).unwrap();
    let gm = SpectralModel::new(&gs, &gb, 1e-10).unwrap();
    let inv: Vec<_> = g.iter().map(|x| x.clone().try_inverse().unwrap()).collect();
    let ginv = block_diag(&inv);
    let src = SourceFunction::Sum(vec![
        (1.0, 0.0, bump(&m, 3, 0.0, 0.5)),
        (2.0, 0.7, sampled(&m, 3, 0.6, 0.05, 11)),
    ]);
    let gsrc = src.map_values(&ginv).unwrap();
    for t in [0.1, 0.3, 2.0, 9.0] {
        let e = energy(&m, &src, t).unwrap();
        let ge = energy(&gm, &gsrc, t).unwrap();
        assert!((e - ge).abs() <= 1e-9 * e.max(1e-12), "{e} vs {ge}");
    }
    for l in 0..m.dim() {
        assert!((m.eigenvalues()[l] - gm.eigenvalues()[l]).abs() <= 1e-9 * m.eigenvalues()[l]);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn duhamel_is_linear(a in -3.0f64..3.0, b in -3.0f64..3.0, t in -0.5f64..4.0, seed in 0u64..50) {
        let m = rank2_model(12);
        let f1 = sampled(&m, seed, 0.0, 0.1, 6);
        let f2 = bump(&m, (seed % 12) as usize, 0.2, 0.9);
        let sum = SourceFunction::Sum(vec![(a, 0.0, f1.clone()), (b, 0.0, f2.clone())]);
        let s = duhamel_evolve(&m, &sum, t).unwrap();
        let s1 = duhamel_evolve(&m, &f1, t).unwrap();
        let s2 = duhamel_evolve(&m, &f2, t).unwrap();
        let want = &s1.u.values * a + &s2.u.values * b;
        let scale = want.amax().max(1e-12);
        prop_assert!((s.u.values - want).amax() <= 1e-10 * scale);
    }

    #[test]
    fn shift_identity_holds(shift in 0.0f64..3.0, t in 0.0f64..3.0) {
        let m = line_model(16);
        let src = sampled(&m, 11, -0.2, 0.07, 9);
        let a = ModalSource::new(&m, &src.clone().shifted(shift)).unwrap().state(&m, t).unwrap();
        let b = ModalSource::new(&m, &src).unwrap().state(&m, t + shift).unwrap();
        prop_assert!((a.0 - b.0).amax() < 1e-12);
    }
}
