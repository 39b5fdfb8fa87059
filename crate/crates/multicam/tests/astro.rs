use std::f64::consts::PI;

use multicam::astro::{
    build_grid, elements_to_state, linearize_segment, propagate, propagate_with_stats, refine_tca, specific_energy,
    Dynamics, Model, State,
};
use multicam::units::{Units, J2_EARTH, MU_EARTH, R_EARTH};
use nalgebra::{Vector3, Vector6};
use proptest::prelude::*;

fn leo() -> (Units, Dynamics, State) {
    let units = Units::from_semi_major_axis(6928.0);
    let d = Dynamics::new(Model::TwoBodyJ2, &units);
    let x = elements_to_state(1.0, 0.0, 53f64.to_radians(), 0.0, 0.0, 0.0, 1.0);
    (units, d, x)
}

fn raan(x: &State) -> f64 {
    let r = Vector3::new(x[0], x[1], x[2]);
    let v = Vector3::new(x[3], x[4], x[5]);
    let h = r.cross(&v);
    h.x.atan2(-h.y)
}

#[test]
fn j2_raan_drift_matches_secular_rate() {
    let (units, d, x0) = leo();
    // least-squares slope of the osculating node over 10 orbits
    let n_samples = 600;
    let span = 10.0 * 2.0 * PI;
    let dt = span / n_samples as f64;
    let mut x = x0;
    let mut ts = vec![0.0];
    let mut om = vec![raan(&x0)];
    for k in 1..=n_samples {
        x = propagate(&x, &[0.0; 3], dt, &d, 1e-12).unwrap();
        ts.push(k as f64 * dt);
        om.push(raan(&x));
    }
    let tm = ts.iter().sum::<f64>() / ts.len() as f64;
    let omm = om.iter().sum::<f64>() / om.len() as f64;
    let num: f64 = ts.iter().zip(&om).map(|(t, o)| (t - tm) * (o - omm)).sum();
    let den: f64 = ts.iter().map(|t| (t - tm) * (t - tm)).sum();
    let slope = num / den;
    let re = R_EARTH / units.length;
    let secular = -1.5 * J2_EARTH * re * re * 53f64.to_radians().cos();
    let rel = (slope - secular).abs() / secular.abs();
    assert!(rel < 0.01, "slope {slope:e} vs secular {secular:e} ({rel:e})");
    let _ = MU_EARTH;
}

#[test]
fn energy_is_conserved_over_ten_orbits() {
    let x0 = elements_to_state(1.0, 0.1, 0.5, 0.2, 0.3, 0.0, 1.0);
    let e0 = specific_energy(&x0);
    let x = propagate(&x0, &[0.0; 3], 20.0 * PI, &Dynamics::point_mass(), 1e-12).unwrap();
    let drift = ((specific_energy(&x) - e0) / e0).abs();
    assert!(drift <= 1e-10, "energy drift {drift:e}");
}

#[test]
fn concatenated_segments_match_single_span() {
    let (_, d, x0) = leo();
    let u = [1e-5, -2e-5, 3e-6];
    let whole = propagate(&x0, &u, 0.7, &d, 1e-12).unwrap();
    let a = propagate(&x0, &u, 0.3, &d, 1e-12).unwrap();
    let b = propagate(&a, &u, 0.4, &d, 1e-12).unwrap();
    for i in 0..6 {
        assert!((whole[i] - b[i]).abs() <= 10.0 * 1e-12, "{i}: {:e}", whole[i] - b[i]);
    }
}

#[test]
fn stm_matches_central_differences() {
    let (_, d, x0) = leo();
    let u = [2e-6, 0.0, -1e-6];
    let dt = 2.0 * PI / 60.0;
    let maps = linearize_segment(&x0, &u, dt, &d, 1e-13).unwrap();
    let h = 1e-6;
    for j in 0..9 {
        let mut xp = x0;
        let mut xm = x0;
        let mut up = u;
        let mut um = u;
        if j < 6 {
            xp[j] += h;
            xm[j] -= h;
        } else {
            up[j - 6] += h;
            um[j - 6] -= h;
        }
        let fp = propagate(&xp, &up, dt, &d, 1e-13).unwrap();
        let fm = propagate(&xm, &um, dt, &d, 1e-13).unwrap();
        let col: Vector6<f64> = Vector6::from_fn(|i, _| (fp[i] - fm[i]) / (2.0 * h));
        let jet_col: Vector6<f64> = if j < 6 { maps.a.column(j).into() } else { maps.b.column(j - 6).into() };
        let rel = (col - jet_col).norm() / jet_col.norm();
        assert!(rel <= 1e-5, "column {j}: rel {rel:e}");
    }
    let x = Vector6::from_column_slice(&x0);
    let uu = Vector3::from_column_slice(&u);
    assert!((maps.a * x + maps.b * uu + maps.c - maps.xbar).norm() < 1e-14);
}

#[test]
fn vanishing_segment_is_identity() {
    let (units, d, x0) = leo();
    let dt = units.scale(1e-9, multicam::units::Kind::Time);
    let maps = linearize_segment(&x0, &[0.0; 3], dt, &d, 1e-12).unwrap();
    for i in 0..6 {
        for j in 0..6 {
            let id = if i == j { 1.0 } else { 0.0 };
            assert!((maps.a[(i, j)] - id).abs() <= 1e-8);
        }
        for j in 0..3 {
            assert!(maps.b[(i, j)].abs() <= 1e-8);
        }
        assert!(maps.c[i].abs() <= 1e-8);
    }
}

#[test]
fn control_columns_follow_impulse_response() {
    let (_, d, x0) = leo();
    let dt = 2.0 * PI / 600.0;
    let maps = linearize_segment(&x0, &[0.0; 3], dt, &d, 1e-13).unwrap();
    for j in 0..3 {
        let pos = maps.b[(j, j)];
        let vel = maps.b[(3 + j, j)];
        assert!((pos / (dt * dt / 2.0) - 1.0).abs() < 0.05, "pos {j}");
        assert!((vel / dt - 1.0).abs() < 0.05, "vel {j}");
    }
}

#[test]
fn linear_prediction_error_is_second_order() {
    let (_, d, x0) = leo();
    let dt = 2.0 * PI / 60.0;
    let maps = linearize_segment(&x0, &[0.0; 3], dt, &d, 1e-13).unwrap();
    let dir = Vector6::new(0.3, -0.5, 0.2, 0.1, 0.4, -0.2).normalize();
    let mut ks = Vec::new();
    for k in 0..4 {
        let eps = 1e-4 / 2f64.powi(k);
        let mut xp = x0;
        for i in 0..6 {
            xp[i] += eps * dir[i];
        }
        let f = propagate(&xp, &[0.0; 3], dt, &d, 1e-14).unwrap();
        let lin = maps.a * Vector6::from_column_slice(&xp) + maps.c;
        let err = (Vector6::from_column_slice(&f) - lin).norm();
        ks.push(err / (eps * eps));
    }
    for w in ks.windows(2) {
        assert!((w[1] / w[0] - 1.0).abs() < 0.05, "{ks:?}");
    }
}

#[test]
fn xi_vanishes_for_linear_flow_direction() {
    let (_, d, x0) = leo();
    let maps = linearize_segment(&x0, &[0.0; 3], 0.1, &d, 1e-12).unwrap();
    assert!(maps.xi.iter().all(|v| v.is_finite() && *v >= 0.0));
    // the position block is curved by gravity, the control enters almost linearly
    assert!(maps.xi[0] > maps.xi[6]);
}

#[test]
fn straight_line_tca() {
    // far from the attractor gravity is negligible
    let r0 = [1e6, 0.0, 0.0];
    let dr = Vector3::new(0.3, -0.2, 0.1);
    let dv = Vector3::new(0.5, 0.7, -0.1);
    let xp: State = [r0[0] + dr.x, r0[1] + dr.y, r0[2] + dr.z, dv.x, dv.y, dv.z];
    let xs: State = [r0[0], r0[1], r0[2], 0.0, 0.0, 0.0];
    let got = refine_tca(&xp, &xs, &Dynamics::point_mass(), 1e-14).unwrap();
    let want = -dr.dot(&dv) / dv.norm_squared();
    assert!((got - want).abs() < 1e-9, "{got} vs {want}");
}

fn scan_min_distance(xp: &State, xs: &State, d: &Dynamics, half: f64, n: usize) -> f64 {
    let mut best = (f64::INFINITY, 0.0);
    let p0 = propagate(xp, &[0.0; 3], -half, d, 1e-13).unwrap();
    let s0 = propagate(xs, &[0.0; 3], -half, d, 1e-13).unwrap();
    let step = 2.0 * half / n as f64;
    let (mut p, mut s) = (p0, s0);
    for k in 0..=n {
        let dist = ((p[0] - s[0]).powi(2) + (p[1] - s[1]).powi(2) + (p[2] - s[2]).powi(2)).sqrt();
        if dist < best.0 {
            best = (dist, -half + k as f64 * step);
        }
        p = propagate(&p, &[0.0; 3], step, d, 1e-13).unwrap();
        s = propagate(&s, &[0.0; 3], step, d, 1e-13).unwrap();
    }
    best.1
}

#[test]
fn two_body_tca_matches_time_scan() {
    let units = Units::from_semi_major_axis(6800.0);
    let d = Dynamics::new(Model::TwoBody, &units);
    let tca_p = elements_to_state(1.0, 0.0, 91.67f64.to_radians(), 0.0, 0.0, 0.0, 1.0);
    let tca_s = elements_to_state(
        22453.1 / 6800.0,
        0.6971,
        181.67f64.to_radians(),
        1.72e-3f64.to_radians(),
        0.0,
        0.11f64.to_radians(),
        1.0,
    );
    // nominal epoch 2 s after the true encounter
    let off = units.scale(2.0, multicam::units::Kind::Time);
    let xp = propagate(&tca_p, &[0.0; 3], off, &d, 1e-13).unwrap();
    let xs = propagate(&tca_s, &[0.0; 3], off, &d, 1e-13).unwrap();
    let dt = refine_tca(&xp, &xs, &d, 1e-13).unwrap();
    let scan = scan_min_distance(&xp, &xs, &d, units.scale(5.0, multicam::units::Kind::Time), 2000);
    let diff_s = units.unscale(dt - scan, multicam::units::Kind::Time);
    assert!(diff_s.abs() < 0.05, "refined {dt} scan {scan} ({diff_s} s)");
}

#[test]
fn grid_contains_thickened_epochs() {
    let g = build_grid(0.0, 4.0 * PI, 2.0 * PI, 60, &[3.0 - 1e-3, 3.0, 3.0 + 1e-3], 1e-12).unwrap();
    for t in [3.0 - 1e-3, 3.0, 3.0 + 1e-3] {
        let i = g.node_at(t, 0.0).expect("node present");
        assert_eq!(g.times[i], t);
    }
}

#[test]
fn adaptive_step_rejects_and_recovers() {
    let x0 = elements_to_state(1.0, 0.6, 0.1, 0.0, 0.0, 0.0, 1.0);
    let (_, stats) = propagate_with_stats(&x0, &[0.0; 3], 2.0 * PI, &Dynamics::point_mass(), 1e-12).unwrap();
    assert!(stats.accepted > 10);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn refine_never_increases_separation(
        ox in -0.5f64..0.5, oy in -0.5f64..0.5, oz in -0.5f64..0.5, lead in -3.0f64..3.0
    ) {
        let units = Units::from_semi_major_axis(6800.0);
        let d = Dynamics::new(Model::TwoBody, &units);
        let xp = elements_to_state(1.0, 0.0, 0.9, 0.0, 0.0, 0.0, 1.0);
        let mut xs = elements_to_state(1.0, 0.001, 2.1, 0.1, 0.0, 0.0, 1.0);
        xs[0] = xp[0] + ox * 1e-4;
        xs[1] = xp[1] + oy * 1e-4;
        xs[2] = xp[2] + oz * 1e-4;
        let off = units.scale(lead, multicam::units::Kind::Time);
        let p0 = propagate(&xp, &[0.0; 3], off, &d, 1e-13).unwrap();
        let s0 = propagate(&xs, &[0.0; 3], off, &d, 1e-13).unwrap();
        let dt = refine_tca(&p0, &s0, &d, 1e-13).unwrap();
        let p1 = propagate(&p0, &[0.0; 3], dt, &d, 1e-13).unwrap();
        let s1 = propagate(&s0, &[0.0; 3], dt, &d, 1e-13).unwrap();
        let dist = |a: &State, b: &State| ((a[0]-b[0]).powi(2) + (a[1]-b[1]).powi(2) + (a[2]-b[2]).powi(2)).sqrt();
        prop_assert!(dist(&p1, &s1) <= dist(&p0, &s0) * (1.0 + 1e-12));
    }

    #[test]
    fn linearization_reproduces_reference(dx in -1e-3f64..1e-3, du in -1e-4f64..1e-4) {
        let (_, d, x0) = leo();
        let x = [x0[0] + dx, x0[1], x0[2], x0[3], x0[4] - dx, x0[5]];
        let u = [du, 0.0, -du];
        let m = linearize_segment(&x, &u, 0.05, &d, 1e-12).unwrap();
        let pred = m.a * Vector6::from_column_slice(&x) + m.b * Vector3::from_column_slice(&u) + m.c;
        prop_assert!((pred - m.xbar).norm() < 1e-13);
    }
}

#[test]
fn scaled_period_is_two_pi() {
    let units = Units::from_semi_major_axis(6928.0);
    let p = 2.0 * PI * (6928.0f64.powi(3) / MU_EARTH).sqrt();
    assert!((units.scale(p, multicam::units::Kind::Time) - 2.0 * PI).abs() < 1e-13);
}
