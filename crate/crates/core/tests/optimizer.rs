use exotune::optimizer::{
    fit_surrogate, initial_design, minimize, propose_next, CycleState, EvalRecord, OptProblem, OptResult,
    ProposalSettings, RbfSurrogate,
};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const CENTRE: [f64; 4] = [310.0, 280.0, 330.0, 265.0];

fn shifted_sphere(x: &[f64]) -> Result<f64, ()> {
    Ok(x.iter().zip(CENTRE).map(|(v, c)| (v - c) * (v - c)).sum())
}

/// Best value over the 9⁴ uniform grid on [0, 600]⁴.
fn grid_oracle() -> f64 {
    let axis: Vec<f64> = (0..9).map(|i| i as f64 * 75.0).collect();
    let mut best = f64::INFINITY;
    for &a in &axis {
        for &b in &axis {
            for &c in &axis {
                for &d in &axis {
                    best = best.min(shifted_sphere(&[a, b, c, d]).unwrap());
                }
            }
        }
    }
    best
}

fn records(points: &[Vec<f64>], f: impl Fn(&[f64]) -> f64) -> Vec<EvalRecord> {
    points
        .iter()
        .enumerate()
        .map(|(i, p)| EvalRecord {
            eval_index: i,
            point: p.clone(),
            value: f(p),
            failed: false,
            wall_time: 0.0,
        })
        .collect()
}

fn nearest(history: &[EvalRecord], p: &[f64], width: f64) -> f64 {
    history
        .iter()
        .map(|r| {
            r.point
                .iter()
                .zip(p)
                .map(|(a, b)| ((a - b) / width).powi(2))
                .sum::<f64>()
                .sqrt()
        })
        .fold(f64::INFINITY, f64::min)
}

#[test]
fn sphere_beats_the_grid_oracle() {
    let oracle = grid_oracle();
    assert_eq!(oracle, 2625.0);
    let p = OptProblem::cube(4, 0.0, 600.0, 150, 0);
    let r = minimize(&p, shifted_sphere).unwrap();
    assert_eq!(r.history.len(), 150);
    assert!(r.best_value <= oracle, "best {} vs grid {oracle}", r.best_value);
}

#[test]
fn baseline_seed_is_evaluated_first_and_never_beaten_by_the_result() {
    let p = OptProblem::cube(4, 0.0, 600.0, 30, 3).with_initial_points(vec![vec![340.0; 4]]);
    let r = minimize(&p, shifted_sphere).unwrap();
    assert_eq!(r.history[0].point, vec![340.0; 4]);
    assert!(r.best_value <= r.history[0].value);
}

#[test]
fn different_seeds_give_different_designs() {
    let a = initial_design(&OptProblem::cube(4, 0.0, 600.0, 150, 7));
    let b = initial_design(&OptProblem::cube(4, 0.0, 600.0, 150, 8));
    assert_eq!(a.len(), 8);
    assert_ne!(a, b);
    assert_eq!(a, initial_design(&OptProblem::cube(4, 0.0, 600.0, 150, 7)));
}

#[test]
fn proposals_over_a_run_are_pairwise_distinct() {
    let p = OptProblem::cube(4, 0.0, 600.0, 80, 5);
    let r = minimize(&p, shifted_sphere).unwrap();
    for (i, a) in r.history.iter().enumerate() {
        for b in &r.history[i + 1..] {
            assert_ne!(a.point, b.point, "evaluations {} and {}", a.eval_index, b.eval_index);
        }
    }
}

fn merit_extreme(w: f64) -> (Vec<f64>, RbfSurrogate, Vec<EvalRecord>) {
    let mut p = OptProblem::cube(4, 0.0, 600.0, 150, 9);
    p.proposal = ProposalSettings {
        merit_weights: vec![w],
        ..ProposalSettings::default()
    };
    let history = records(&initial_design(&p), |x| shifted_sphere(x).unwrap());
    let s = fit_surrogate(&p, &history).unwrap();
    let next = propose_next(&s, &history, &[], &p, &mut CycleState::new(p.seed));
    (next, s, history)
}

#[test]
fn pure_exploration_moves_far_from_the_history() {
    let (x, _, history) = merit_extreme(0.0);
    let d = nearest(&history, &x, 600.0);
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut probes: Vec<f64> = (0..2000)
        .map(|_| {
            let u: Vec<f64> = (0..4).map(|_| rng.random_range(0.0..600.0)).collect();
            nearest(&history, &u, 600.0)
        })
        .collect();
    probes.sort_by(f64::total_cmp);
    assert!(d >= probes[1900], "distance {d} vs 95th percentile {}", probes[1900]);
    let (y, _, _) = merit_extreme(1.0);
    assert!(d > nearest(&history, &y, 600.0));
}

#[test]
fn pure_exploitation_minimises_the_surrogate() {
    let (x, s, history) = merit_extreme(1.0);
    let incumbent = history.iter().map(|r| r.value).fold(f64::INFINITY, f64::min);
    assert!(s.eval(&x) < incumbent, "surrogate {} vs incumbent {incumbent}", s.eval(&x));
    let (y, _, _) = merit_extreme(0.0);
    assert!(s.eval(&x) < s.eval(&y));
}

#[test]
fn surrogate_of_a_quadratic_is_accurate_inside_the_box() {
    let mut rng = ChaCha8Rng::seed_from_u64(42);
    let lower = vec![0.0; 4];
    let upper = vec![600.0; 4];
    let f = |x: &[f64]| x.iter().map(|v| v * v).sum::<f64>();
    let pts: Vec<Vec<f64>> = (0..30)
        .map(|_| (0..4).map(|_| rng.random_range(0.0..600.0)).collect())
        .collect();
    let vals: Vec<f64> = pts.iter().map(|x| f(x)).collect();
    let s = RbfSurrogate::fit(&lower, &upper, &pts, &vals).unwrap();
    for (x, v) in pts.iter().zip(&vals) {
        assert!((s.eval(x) - v).abs() <= 1e-8 * v.abs().max(1.0));
    }
    for _ in 0..100 {
        let x: Vec<f64> = (0..4).map(|_| rng.random_range(150.0..450.0)).collect();
        let rel = (s.eval(&x) - f(&x)).abs() / f(&x);
        assert!(rel <= 0.05, "relative error {rel} at {x:?}");
    }
}

#[test]
fn failed_evaluations_never_stop_the_run() {
    let p = OptProblem::cube(4, 0.0, 600.0, 40, 2);
    let r = minimize(&p, |x: &[f64]| if x[0] > 400.0 { Err(()) } else { shifted_sphere(x) }).unwrap();
    assert_eq!(r.history.len(), 40);
    assert!(r.history.iter().any(|h| h.failed));
    assert!(r.history.iter().all(|h| h.value.is_finite()));
    let best = r.history.iter().find(|h| h.value == r.best_value).unwrap();
    assert!(!best.failed);
}

fn best_is_history_min(r: &OptResult) -> bool {
    r.history.iter().map(|h| h.value).fold(f64::INFINITY, f64::min) == r.best_value
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn runs_respect_bounds_and_are_monotone_and_reproducible(
        dim in 2usize..5,
        lo in -100.0..100.0f64,
        width in 1.0..1000.0f64,
        seed in any::<u64>(),
        batch in 1usize..4,
        c in prop::array::uniform4(0.0..1.0f64),
    ) {
        let mut p = OptProblem::cube(dim, lo, lo + width, 24, seed);
        p.batch_size = batch;
        p.proposal.candidates = 200;
        let centre: Vec<f64> = c[..dim].iter().map(|u| lo + u * width).collect();
        let f = |x: &[f64]| Ok::<_, ()>(x.iter().zip(&centre).map(|(v, c)| (v - c).abs()).sum::<f64>());
        let a = minimize(&p, f).unwrap();
        let b = minimize(&p, f).unwrap();

        prop_assert!(a.history.iter().all(|h| p.contains(&h.point)));
        prop_assert!(p.contains(&a.best_point));
        prop_assert!(best_is_history_min(&a));
        let curve = a.incumbent_curve();
        prop_assert!(curve.windows(2).all(|w| w[1] <= w[0]));
        let strip = |r: &OptResult| r.history.iter().map(|h| (h.point.clone(), h.value)).collect::<Vec<_>>();
        prop_assert_eq!(strip(&a), strip(&b));
    }
}
