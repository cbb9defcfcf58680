mod common;

use common::{duality_trials, random_density, GridOracle};
use proptest::prelude::*;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use spline_conformal::conformal::{
    calibrate, predict_set_hpd, predict_set_nd, quantile_rank, CalibrationResult, ScoreKind,
    Scorer, DEFAULT_BISECTION_STEPS,
};
use spline_conformal::model::{HistModel, SplineModel};
use spline_conformal::spline::Degree;

/// Covariates in two dimensions and targets from a bimodal law, so an
/// untrained network gives uneven scores.
fn pool(rng: &mut impl Rng, n: usize) -> (Vec<Vec<f64>>, Vec<f64>) {
    let x: Vec<Vec<f64>> = (0..n)
        .map(|_| vec![rng.gen_range(-2.0..2.0), rng.gen_range(-2.0..2.0)])
        .collect();
    let y = x
        .iter()
        .map(|r| {
            let centre = if rng.gen_bool(0.5) { 0.25 } else { 0.75 };
            (centre + 0.1 * r[0].tanh() + rng.gen_range(-0.1..0.1)).clamp(0.0, 1.0)
        })
        .collect();
    (x, y)
}

struct Models {
    spline: SplineModel,
    quadratic: SplineModel,
    hist: HistModel,
}

fn models(seed: u64) -> Models {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Models {
        spline: SplineModel::new(2, Degree::Linear, 11, 1e-3, &mut rng).unwrap(),
        quadratic: SplineModel::new(2, Degree::Quadratic, 11, 1e-3, &mut rng).unwrap(),
        hist: HistModel::new(2, 9, &mut rng).unwrap(),
    }
}

fn scorers(m: &Models) -> Vec<Scorer<'_>> {
    vec![
        Scorer::Nd(&m.spline),
        Scorer::Hpd {
            model: &m.spline,
            steps: DEFAULT_BISECTION_STEPS,
        },
        Scorer::Nd(&m.quadratic),
        Scorer::Hpd {
            model: &m.quadratic,
            steps: DEFAULT_BISECTION_STEPS,
        },
        Scorer::Hist(&m.hist),
    ]
}

#[test]
fn order_statistic_examples() {
    let ints = |n: usize| (1..=n).map(|i| i as f64).collect::<Vec<_>>();
    assert_eq!(calibrate(&ints(9), 0.1, ScoreKind::Nd).unwrap().q_hat, 9.0);
    assert_eq!(
        calibrate(&ints(99), 0.1, ScoreKind::Nd).unwrap().q_hat,
        90.0
    );
    assert_eq!(calibrate(&ints(3), 0.5, ScoreKind::Nd).unwrap().q_hat, 2.0);
    // k = ceil(6 * 0.99) = 6 > 5
    let cal = calibrate(&ints(5), 0.01, ScoreKind::Hpd).unwrap();
    assert_eq!(cal.q_hat, f64::INFINITY);
    assert!(
        predict_set_nd(
            &random_density(&mut ChaCha8Rng::seed_from_u64(0), Degree::Linear, 5),
            &CalibrationResult {
                kind: ScoreKind::Nd,
                ..cal
            }
        )
        .unwrap()
        .intervals
        .to_pairs()
            == vec![[0.0, 1.0]]
    );
}

#[test]
fn marginal_coverage_over_resampled_splits() {
    let m = models(21);
    let mut rng = ChaCha8Rng::seed_from_u64(22);
    let (x, y) = pool(&mut rng, 1500);
    let rows: Vec<&[f64]> = x.iter().map(Vec::as_slice).collect();
    for scorer in scorers(&m) {
        let scores = scorer.scores(&rows, &y).unwrap().scores;
        for alpha in [0.1, 0.2] {
            let mut idx: Vec<usize> = (0..scores.len()).collect();
            let mut total = 0.0;
            let draws = 200;
            for _ in 0..draws {
                idx.shuffle(&mut rng);
                let cal: Vec<f64> = idx[..500].iter().map(|&i| scores[i]).collect();
                let q = calibrate(&cal, alpha, scorer.kind()).unwrap().q_hat;
                let hit = idx[500..1000].iter().filter(|&&i| scores[i] <= q).count();
                total += hit as f64 / 500.0;
            }
            let mean = total / draws as f64;
            assert!(
                mean >= 1.0 - alpha - 0.01,
                "{:?} alpha {alpha}: {mean}",
                scorer.kind()
            );
        }
    }
}

#[test]
fn sets_contain_exactly_the_conforming_targets() {
    let m = models(31);
    let mut rng = ChaCha8Rng::seed_from_u64(32);
    let (x, y) = pool(&mut rng, 300);
    let rows: Vec<&[f64]> = x.iter().map(Vec::as_slice).collect();
    for scorer in scorers(&m) {
        let cal = scorer.scores(&rows[..200], &y[..200]).unwrap().scores;
        let d = duality_trials(&scorer, &rows[200..], &cal, 500, &mut rng);
        assert_eq!(d.violations, 0, "{:?}: {d:?}", scorer.kind());
        assert!(d.checked > 450);
    }
}

#[test]
fn hpd_bisection_brackets_the_target_mass() {
    let mut rng = ChaCha8Rng::seed_from_u64(41);
    for degree in [Degree::Linear, Degree::Quadratic] {
        for _ in 0..10 {
            let d = random_density(&mut rng, degree, 21);
            let oracle = GridOracle::for_density(&d, 100_000);
            let target = rng.gen_range(0.02..0.98);
            let cal = CalibrationResult {
                alpha: 0.1,
                q_hat: -target,
                n_cal: 100,
                kind: ScoreKind::Hpd,
            };
            let hpd = predict_set_hpd(&d, &cal, DEFAULT_BISECTION_STEPS).unwrap();
            let band = d.sup() / (1u64 << DEFAULT_BISECTION_STEPS) as f64;
            assert!((hpd.upper - hpd.level - band).abs() < 1e-12 * d.sup());
            let below = oracle.mass_below(hpd.level);
            let above = oracle.mass_below(hpd.level + band);
            assert!(
                below < target + 1e-9 && target <= above + 1e-9,
                "{below} {target} {above}"
            );
        }
    }
}

#[test]
fn hpd_sets_cover_at_least_the_target_mass() {
    let mut rng = ChaCha8Rng::seed_from_u64(43);
    for _ in 0..20 {
        let d = random_density(&mut rng, Degree::Quadratic, 11);
        let target = rng.gen_range(0.05..0.95);
        let cal = CalibrationResult {
            alpha: 0.1,
            q_hat: -target,
            n_cal: 100,
            kind: ScoreKind::Hpd,
        };
        let hpd = predict_set_hpd(&d, &cal, DEFAULT_BISECTION_STEPS).unwrap();
        assert!(d.mass_of(&hpd.set.intervals) >= 1.0 - target - 1e-9);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn smaller_alpha_never_lowers_the_quantile(
        scores in prop::collection::vec(-10.0..0.0f64, 1..300),
        a in 0.01..0.99f64,
        b in 0.01..0.99f64,
    ) {
        let (lo, hi) = (a.min(b), a.max(b));
        let q_lo = calibrate(&scores, lo, ScoreKind::Nd).unwrap().q_hat;
        let q_hi = calibrate(&scores, hi, ScoreKind::Nd).unwrap().q_hat;
        prop_assert!(q_lo >= q_hi);
    }

    #[test]
    fn quantile_is_a_calibration_score(scores in prop::collection::vec(-10.0..0.0f64, 1..300), alpha in 0.01..0.99f64) {
        let n = scores.len();
        let cal = calibrate(&scores, alpha, ScoreKind::Nd).unwrap();
        let k = quantile_rank(n, alpha);
        prop_assert!(k as f64 >= (n + 1) as f64 * (1.0 - alpha) - 1e-9);
        if k > n {
            prop_assert_eq!(cal.q_hat, f64::INFINITY);
        } else {
            prop_assert!(scores.contains(&cal.q_hat));
            let at_most = scores.iter().filter(|&&s| s <= cal.q_hat).count();
            prop_assert!(at_most >= k);
        }
    }

    #[test]
    fn nested_sets_in_alpha(seed in any::<u64>(), a in 0.05..0.95f64, b in 0.05..0.95f64) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let d = random_density(&mut rng, Degree::Quadratic, 11);
        let (lo, hi) = (a.min(b), a.max(b));
        let cal = |t: f64, kind| CalibrationResult { alpha: 0.1, q_hat: -t, n_cal: 50, kind };
        // a lower HPD mass target gives a larger set
        let big = predict_set_hpd(&d, &cal(lo, ScoreKind::Hpd), DEFAULT_BISECTION_STEPS).unwrap();
        let small = predict_set_hpd(&d, &cal(hi, ScoreKind::Hpd), DEFAULT_BISECTION_STEPS).unwrap();
        prop_assert!(big.set.intervals.is_superset_of(&small.set.intervals, 1e-9));
        let sup = d.sup();
        let big = predict_set_nd(&d, &cal(lo * sup, ScoreKind::Nd)).unwrap();
        let small = predict_set_nd(&d, &cal(hi * sup, ScoreKind::Nd)).unwrap();
        prop_assert!(big.intervals.is_superset_of(&small.intervals, 1e-9));
    }
}

#[test]
fn short_bisection_preset_still_brackets_the_target() {
    use spline_conformal::conformal::SHORT_BISECTION_STEPS;
    let mut rng = ChaCha8Rng::seed_from_u64(44);
    for _ in 0..20 {
        let d = random_density(&mut rng, Degree::Linear, 21);
        let target = rng.gen_range(0.05..0.95);
        let cal = CalibrationResult {
            alpha: 0.1,
            q_hat: -target,
            n_cal: 100,
            kind: ScoreKind::Hpd,
        };
        let short = predict_set_hpd(&d, &cal, SHORT_BISECTION_STEPS).unwrap();
        let long = predict_set_hpd(&d, &cal, DEFAULT_BISECTION_STEPS).unwrap();
        assert!(short.mass_below < target && target <= d.mass_below_level(short.upper));
        // the finer bracket sits inside the coarse one
        assert!(short.level <= long.level && long.upper <= short.upper);
    }
}
