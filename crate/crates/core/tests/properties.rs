//! Property tests for the invariants of the analysis modules.

mod common;

use std::collections::BTreeSet;

use proptest::prelude::*;

use lto_health::anomaly::{detect_anomalies, feedback_refine};
use lto_health::dva::{compute_dva, moving_average, window_capacity};
use lto_health::health::{compute_soh, fit_quadratic, predict_soh, solve_end_of_life, SohPoint, SohSeries};
use lto_health::ingest::{
    build_features_multi, detect_schema, load_cycles, read_table, write_cycles, CycleRecord, DischargeTrace, MinMax,
    Sample,
};
use lto_health::metrics::evaluate;
use lto_health::synth::{generate_cells, generate_trace, inject_anomaly, AnomalyKind, DegradationProfile, TraceShape};

fn close(a: f64, b: f64, rel: f64) -> bool {
    (a - b).abs() <= rel * a.abs().max(b.abs()).max(f64::MIN_POSITIVE)
}

fn scramble_case(name: &str, mask: u64) -> String {
    name.chars()
        .enumerate()
        .map(|(i, c)| if mask >> (i % 64) & 1 == 1 { c.to_ascii_uppercase() } else { c.to_ascii_lowercase() })
        .collect()
}

fn records_strategy() -> impl Strategy<Value = Vec<CycleRecord>> {
    prop::collection::vec(
        (1u32..5, 0.0..2000.0f64, 0.0..2000.0f64, prop::option::of(0.0..9000.0f64), prop::option::of(-20.0..60.0f64)),
        1..40,
    )
    .prop_map(|rows| {
        let mut cycle = 0;
        rows.into_iter()
            .map(|(step, chg, dchg, energy, temp)| {
                cycle += step;
                CycleRecord {
                    cell_id: "cell".into(),
                    cycle_index: cycle,
                    cap_chg_mah: chg,
                    cap_dchg_mah: dchg,
                    energy_mwh: energy,
                    temperature_c: temp,
                }
            })
            .collect()
    })
}

/// A noiseless profile whose SoH stays in (0, 100].
fn profile_strategy() -> impl Strategy<Value = DegradationProfile> {
    (100.0..5000.0f64, -2e-4..0.0f64, -0.05..0.0f64, 50u32..800)
        .prop_map(|(nominal, a, b, n)| DegradationProfile {
            nominal_capacity_mah: nominal,
            fade_a: a,
            fade_b: b,
            noise_sd_mah: 0.0,
            n_cycles: n,
            seed: 0,
        })
        .prop_filter("profile must be valid", |p| p.validate().is_ok())
}

/// Strictly falling voltage grid with spacing at least 1 mV.
fn falling_grid() -> impl Strategy<Value = Vec<f64>> {
    (1.5..3.0f64, prop::collection::vec(1e-3..0.05f64, 2..60)).prop_map(|(top, steps)| {
        let mut v = top;
        let mut out = vec![v];
        for s in steps {
            v -= s;
            out.push(v);
        }
        out
    })
}

fn noisy_trace(seed: u64, sd: f64) -> DischargeTrace {
    let profile = DegradationProfile { seed, ..DegradationProfile::default() };
    let shape = TraceShape { voltage_noise_sd_v: sd, ..TraceShape::default() };
    generate_trace(&profile, &shape, 100).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn schema_follows_header_permutation(perm in Just((0..5).collect::<Vec<usize>>()).prop_shuffle(), mask in any::<u64>()) {
        let names = ["Cycle", "Cap_Chg(mAh)", "Cap_DChg(mAh)", "Voltage(V)", "Temperature(C)"];
        let header: Vec<String> = perm.iter().map(|&i| scramble_case(names[i], mask)).collect();
        let pos = |orig: usize| perm.iter().position(|&i| i == orig).unwrap();
        let s = detect_schema(&header).unwrap();
        prop_assert_eq!(s.cycle_col, Some(pos(0)));
        prop_assert_eq!(s.charge_capacity_col, pos(1));
        prop_assert_eq!(s.discharge_capacity_col, pos(2));
        prop_assert_eq!(s.voltage_col, Some(pos(3)));
    }

    #[test]
    fn cycles_round_trip(records in records_strategy()) {
        let mut buf = Vec::new();
        write_cycles(&records, &mut buf).unwrap();
        let table = read_table(buf.as_slice()).unwrap();
        let schema = detect_schema(&table.header).unwrap();
        let loaded = load_cycles(buf.as_slice(), &schema, "cell").unwrap();
        prop_assert_eq!(loaded.skipped, 0);
        prop_assert_eq!(loaded.records, records);
    }

    #[test]
    fn normalization_inverts(values in prop::collection::vec(-1e4..1e4f64, 2..50)) {
        let mm = MinMax::fit(values.iter().copied());
        prop_assume!(mm.range() > 0.0);
        for &x in &values {
            let back = mm.denormalize(mm.normalize(x));
            prop_assert!((back - x).abs() <= 1e-12 * x.abs().max(1.0), "{x} -> {back}");
        }
    }

    #[test]
    fn split_is_chronological(lengths in prop::collection::vec(12usize..60, 1..4), window in 1usize..10) {
        let profile = DegradationProfile { n_cycles: 100, ..DegradationProfile::default() };
        let cells: Vec<Vec<CycleRecord>> = generate_cells(&profile, lengths.len())
            .unwrap()
            .into_iter()
            .zip(&lengths)
            .map(|(c, &n)| c[..n].to_vec())
            .collect();
        let fm = build_features_multi(&cells, window).unwrap();
        for cell in cells.iter().map(|c| &c[0].cell_id) {
            let cycles = |idx: &[usize]| -> Vec<u32> {
                idx.iter().filter(|&&i| &fm.origins[i].cell_id == cell).map(|&i| fm.origins[i].label_cycle).collect()
            };
            let train = cycles(&fm.train_indices);
            let test = cycles(&fm.test_indices);
            if let (Some(tr), Some(te)) = (train.iter().max(), test.iter().min()) {
                prop_assert!(tr < te);
            }
        }
    }

    #[test]
    fn noiseless_synth_reproduces_profile(profile in profile_strategy()) {
        let cells = generate_cells(&profile, 1).unwrap();
        let soh = compute_soh(&cells[0], profile.nominal_capacity_mah).unwrap();
        for p in &soh.points {
            prop_assert!(close(p.soh_pct, profile.soh(p.cycle as f64), 1e-9));
        }
    }

    #[test]
    fn synth_is_deterministic(seed in any::<u64>(), sd in 0.0..5.0f64) {
        let profile = DegradationProfile { seed, noise_sd_mah: sd, n_cycles: 50, ..DegradationProfile::default() };
        prop_assert_eq!(generate_cells(&profile, 2).unwrap(), generate_cells(&profile, 2).unwrap());
    }

    #[test]
    fn dva_matches_quadratic_derivative(grid in falling_grid(), alpha in -50.0..50.0f64, slope in 1.0..500.0f64, gamma in 0.0..1000.0f64) {
        // Q'(v) = 2αv + β with β chosen so Q' stays at or below -slope
        // on the grid, keeping the relative error well defined.
        let v_max = grid[0];
        let v_min = grid[grid.len() - 1];
        let beta = -slope - (2.0 * alpha * v_max).max(2.0 * alpha * v_min);
        let q = |v: f64| (alpha * v + beta) * v + gamma;
        let dq = |v: f64| 2.0 * alpha * v + beta;
        let trace = common::trace_from_fn(&grid, q);
        let curve = compute_dva(&trace, 1).unwrap();
        prop_assert_eq!(curve.points.len(), grid.len() - 1);
        for (p, w) in curve.points.iter().zip(grid.windows(2)) {
            let mid = 0.5 * (w[0] + w[1]);
            prop_assert!((p.v_mid - mid).abs() < 1e-15);
            prop_assert!(close(p.dq_dv, dq(mid), 1e-9), "{} vs {}", p.dq_dv, dq(mid));
        }
    }

    #[test]
    fn window_capacity_is_additive(grid in falling_grid(), cuts in prop::collection::vec(0.0..1.0f64, 1..6), caps in prop::collection::vec(0.0..10.0f64, 60)) {
        let mut q = 0.0;
        let samples: Vec<Sample> = grid.iter().zip(&caps).map(|(&v, &dq)| { q += dq; Sample::new(v, q) }).collect();
        let trace = DischargeTrace::new("t", 1, samples);
        let (lo, hi) = (grid[grid.len() - 1] - 0.01, grid[0] + 0.01);
        let mut edges: Vec<f64> = cuts.iter().map(|c| lo + c * (hi - lo)).collect();
        edges.push(lo);
        edges.push(hi);
        edges.sort_by(f64::total_cmp);
        let parts: f64 = edges.windows(2).map(|w| window_capacity(&trace, w[0], w[1])).sum();
        let union = window_capacity(&trace, lo, hi);
        prop_assert!((parts - union).abs() <= 1e-9 * union.abs().max(1e-300), "{parts} vs {union}");
        let q_oracle = common::window_capacity_by_quadrature(&trace, edges[1], edges[edges.len() - 2]);
        let q_lib = window_capacity(&trace, edges[1], edges[edges.len() - 2]);
        prop_assert!((q_oracle - q_lib).abs() <= 1e-9 * q_oracle.abs().max(1.0));
    }

    #[test]
    fn smoothing_preserves_interior_mass(inner in prop::collection::vec(-100.0..100.0f64, 1..60), half in 0usize..5) {
        // Zero padding of width 2·half keeps every nonzero value inside
        // windows that lie wholly in the interior.
        let window = 2 * half + 1;
        let mut values = vec![0.0; 2 * half];
        values.extend(&inner);
        values.extend(vec![0.0; 2 * half]);
        let smooth = moving_average(&values, window);
        let n = values.len();
        let interior = half..n - half;
        let raw_sum: f64 = inner.iter().sum();
        let smooth_sum: f64 = smooth[interior].iter().sum();
        prop_assert!((raw_sum - smooth_sum).abs() <= 1e-9 * inner.iter().map(|v| v.abs()).sum::<f64>().max(1.0));
    }

    #[test]
    fn soh_is_homogeneous(records in records_strategy(), nominal in 100.0..5000.0f64, scale in 1e-3..1e3f64) {
        let scaled: Vec<CycleRecord> = records.iter().map(|r| CycleRecord { cap_chg_mah: r.cap_chg_mah * scale, ..r.clone() }).collect();
        let a = compute_soh(&records, nominal).unwrap();
        let b = compute_soh(&scaled, nominal * scale).unwrap();
        for (p, q) in a.points.iter().zip(&b.points) {
            prop_assert!((p.soh_pct - q.soh_pct).abs() <= 1e-12 * p.soh_pct.abs().max(1.0));
        }
    }

    #[test]
    fn fit_is_least_squares_optimal(noise in prop::collection::vec(-1.0..1.0f64, 30), a in -1e-4..1e-4f64, b in -0.05..0.0f64) {
        let s = series((1..=30).map(|c| (c * 10, 100.0 + b * (c * 10) as f64 + a * ((c * 10) as f64).powi(2) + noise[c as usize - 1])));
        let fit = fit_quadratic(&s).unwrap();
        let ssr = |a: f64, b: f64, c: f64| -> f64 {
            s.points.iter().map(|p| { let x = p.cycle as f64; (p.soh_pct - (a * x * x + b * x + c)).powi(2) }).sum()
        };
        let best = ssr(fit.a, fit.b, fit.c);
        for d in [-1e-3, 1e-3] {
            prop_assert!(ssr(fit.a + d, fit.b, fit.c) >= best);
            prop_assert!(ssr(fit.a, fit.b + d, fit.c) >= best);
            prop_assert!(ssr(fit.a, fit.b, fit.c + d) >= best);
        }
    }

    #[test]
    fn fit_predictions_are_shift_invariant(noise in prop::collection::vec(-1.0..1.0f64, 25), k in 0u32..5000) {
        let base: Vec<(u32, f64)> = (1..=25).map(|c| (c * 20, 100.0 - 0.02 * (c * 20) as f64 + noise[c as usize - 1])).collect();
        let f0 = fit_quadratic(&series(base.iter().copied())).unwrap();
        let f1 = fit_quadratic(&series(base.iter().map(|&(c, s)| (c + k, s)))).unwrap();
        for &(c, _) in &base {
            let p0 = predict_soh(&f0, c as f64);
            let p1 = predict_soh(&f1, (c + k) as f64);
            prop_assert!((p0 - p1).abs() <= 1e-6, "{p0} vs {p1}");
        }
    }

    #[test]
    fn end_of_life_matches_bisection(case in common_rul_case()) {
        let (fit, current, threshold) = case;
        let est = solve_end_of_life(&fit, current, threshold);
        let oracle = first_crossing(&fit, current as f64, threshold).unwrap();
        let eol = est.end_of_life_cycle.unwrap();
        prop_assert!((eol - oracle).abs() <= 1e-6, "{eol} vs {oracle}");
    }

    #[test]
    fn metrics_translation_and_scale(y in prop::collection::vec(-10.0..10.0f64, 2..40), noise in prop::collection::vec(-3.0..3.0f64, 40), k in -100.0..100.0f64, sc in prop_oneof![-50.0..-0.1f64, 0.1..50.0f64]) {
        let p: Vec<f64> = y.iter().zip(&noise).map(|(a, b)| a + b).collect();
        let base = evaluate(&y, &p, (1.0, 1), 0, None).unwrap();
        let shift = |v: &[f64], f: &dyn Fn(f64) -> f64| -> Vec<f64> { v.iter().map(|&x| f(x)).collect() };
        let t = evaluate(&shift(&y, &|x| x + k), &shift(&p, &|x| x + k), (1.0, 1), 0, None).unwrap();
        prop_assert!((t.mse - base.mse).abs() <= 1e-12 * base.mse.max(1.0) * (1.0 + k.abs()));
        prop_assert!((t.mae - base.mae).abs() <= 1e-12 * base.mae.max(1.0) * (1.0 + k.abs()));
        let s = evaluate(&shift(&y, &|x| x * sc), &shift(&p, &|x| x * sc), (1.0, 1), 0, None).unwrap();
        prop_assert!(close(s.mae, base.mae * sc.abs(), 1e-9));
        prop_assert!(close(s.mse, base.mse * sc * sc, 1e-9));
        if base.r2.is_finite() {
            let af = evaluate(&shift(&y, &|x| x * sc + k), &shift(&p, &|x| x * sc + k), (1.0, 1), 0, None).unwrap();
            prop_assert!((af.r2 - base.r2).abs() <= 1e-9 * base.r2.abs().max(1.0));
        }
        prop_assert!(base.r2 <= 1.0 && base.mse >= 0.0 && base.mae * base.mae <= base.mse + 1e-12);
    }

    #[test]
    fn metrics_match_naive_oracle(y in prop::collection::vec(-1e3..1e3f64, 2..60), noise in prop::collection::vec(-50.0..50.0f64, 60)) {
        let p: Vec<f64> = y.iter().zip(&noise).map(|(a, b)| a + b).collect();
        let e = evaluate(&y, &p, (1.0, 1), 0, None).unwrap();
        let (mse, mae, r2) = common::naive_metrics(&y, &p);
        prop_assert!(close(e.mse, mse, 1e-12));
        prop_assert!(close(e.mae, mae, 1e-12));
        if r2.is_finite() {
            prop_assert!((e.r2 - r2).abs() <= 1e-12 * r2.abs().max(1.0));
        }
    }

    #[test]
    fn raising_threshold_never_adds_flags(seed in 0u64..1000, sd in 1e-4..5e-3f64, z1 in 0.5..6.0f64, dz in 0.0..6.0f64) {
        let t = noisy_trace(seed, sd);
        let low: BTreeSet<usize> = detect_anomalies(&t, None, z1).unwrap().flagged_indices().into_iter().collect();
        let high: BTreeSet<usize> = detect_anomalies(&t, None, z1 + dz).unwrap().flagged_indices().into_iter().collect();
        prop_assert!(high.is_subset(&low));
    }

    #[test]
    fn clean_synthetic_traces_flag_nothing(cycle in 1u32..=500, center in 2.0..2.6f64, sharp in 5.0..60.0f64, n in 20usize..400) {
        let shape = TraceShape { plateau_center_v: center, plateau_sharpness: sharp, n_samples: n, ..TraceShape::default() };
        let t = generate_trace(&DegradationProfile::default(), &shape, cycle).unwrap();
        let r = detect_anomalies(&t, None, 3.0).unwrap();
        prop_assert!(r.flagged.is_empty(), "{:?}", r.flagged_indices());
    }

    #[test]
    fn refine_removes_what_it_flagged(loc in 12usize..229, mag in prop_oneof![-0.2..-0.01f64, 0.01..0.2f64], kind in prop_oneof![Just(AnomalyKind::Spike), Just(AnomalyKind::Sag)], noise_seed in prop::option::of(0u64..1000)) {
        let t = match noise_seed {
            Some(seed) => noisy_trace(seed, 1e-3),
            None => generate_trace(&DegradationProfile::default(), &TraceShape::default(), 100).unwrap(),
        };
        let spiked = inject_anomaly(&t, kind, mag, loc).unwrap().trace;
        let first = detect_anomalies(&spiked, None, 3.0).unwrap();
        let refined = feedback_refine(&first, &spiked).unwrap();
        let again: BTreeSet<usize> = detect_anomalies(&refined, None, 3.0).unwrap().flagged_indices().into_iter().collect();
        for i in first.flagged_indices() {
            prop_assert!(!again.contains(&i), "index {i} flagged again");
        }
    }
}

fn series(points: impl IntoIterator<Item = (u32, f64)>) -> SohSeries {
    SohSeries {
        cell_id: "c".into(),
        nominal_capacity_mah: 1000.0,
        points: points.into_iter().map(|(cycle, soh_pct)| SohPoint { cycle, soh_pct }).collect(),
        overshoot: false,
    }
}

/// A quadratic (or line) whose first threshold crossing after `current`
/// is a known root `r`; the other root, if any, is well separated.
fn common_rul_case() -> impl Strategy<Value = (lto_health::health::QuadraticFit, u32, f64)> {
    (1u32..2000, 1.0..3000.0f64, 10.0..3000.0f64, prop::bool::ANY, 1e-5..1e-3f64, prop::bool::ANY, 70.0..90.0f64).prop_map(
        |(current, ahead, gap, other_before, mag, linear, threshold)| {
            let r = current as f64 + ahead;
            if linear {
                // threshold crossed going down at r
                let b = -mag * 100.0;
                return (lto_health::health::QuadraticFit::from_coefficients(0.0, b, threshold - b * r), current, threshold);
            }
            let s = if other_before { current as f64 - gap } else { r + gap };
            let a = -mag;
            // p(C) - threshold = a (C - r)(C - s)
            let fit = lto_health::health::QuadraticFit::from_coefficients(a, -a * (r + s), threshold + a * r * s);
            (fit, current, threshold)
        },
    )
}

/// First sign change of `p(C) − threshold` after `from`, refined by bisection.
fn first_crossing(fit: &lto_health::health::QuadraticFit, from: f64, threshold: f64) -> Option<f64> {
    let f = |x: f64| fit.a * x * x + fit.b * x + fit.c - threshold;
    let step = 0.5;
    let mut x = from + 1e-9;
    let mut fx = f(x);
    for _ in 0..40_000 {
        let y = x + step;
        let fy = f(y);
        if fx == 0.0 {
            return Some(x);
        }
        if fx * fy <= 0.0 {
            return Some(common::bisect(f, x, y, 1e-10));
        }
        x = y;
        fx = fy;
    }
    None
}
