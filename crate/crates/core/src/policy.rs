//! Action selection from posterior value samples.
//!
//! Variance-IDS scores each action by its expected regret `Δ̂_a` and by
//! `v̂_a`, the between-group variance of `Q̂(s, a)` when samples are grouped
//! by their greedy action. The policy minimizes the information ratio
//! (regret² over information) over the simplex of action distributions.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Ps2Error, Result};
use crate::hypermodel::QSampleSet;
use crate::matrix::{argmax_first, Matrix};

/// Per-action statistics of one state under a sample set.
#[derive(Debug, Clone, PartialEq)]
pub struct ActionStats {
    pub delta_hat: Vec<f64>,
    pub v_hat: Vec<f64>,
    /// `|Z̃(a)|`: how many samples are greedy on each action.
    pub argmax_counts: Vec<usize>,
}

/// Which information-ratio numerator to minimize.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum IdsMode {
    /// `(E_π[Δ])² / E_π[v]`, minimized over pairs of actions.
    #[default]
    SquaredExpectation,
    /// `E_π[Δ²] / E_π[v]`, whose minimizer is a single action.
    Literal,
}

impl std::str::FromStr for IdsMode {
    type Err = Ps2Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "squared-expectation" => Ok(IdsMode::SquaredExpectation),
            "literal" => Ok(IdsMode::Literal),
            other => Err(Ps2Error::config(format!(
                "unknown ids mode {other:?} (expected squared-expectation or literal)"
            ))),
        }
    }
}

impl std::fmt::Display for IdsMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            IdsMode::SquaredExpectation => "squared-expectation",
            IdsMode::Literal => "literal",
        })
    }
}

/// A distribution over at most two actions.
#[derive(Debug, Clone, PartialEq)]
pub struct IdsPolicy {
    pub support: Vec<usize>,
    pub probabilities: Vec<f64>,
    /// Achieved information ratio (may be `inf` when no action is informative).
    pub ratio: f64,
}

impl IdsPolicy {
    fn point_mass(action: usize, ratio: f64) -> Self {
        IdsPolicy {
            support: vec![action],
            probabilities: vec![1.0],
            ratio,
        }
    }
}

fn check_state(samples: &QSampleSet, s: usize) -> Result<()> {
    if samples.is_empty() {
        return Err(Ps2Error::usage("empty sample set"));
    }
    if s >= samples.num_states() {
        return Err(Ps2Error::usage(format!("state {s} out of range")));
    }
    Ok(())
}

/// `Δ̂_a(s)`: mean over samples of `max_a* Q̂(s, a*) − Q̂(s, a)`.
pub fn expected_regrets(samples: &QSampleSet, s: usize) -> Result<Vec<f64>> {
    check_state(samples, s)?;
    let k = samples.len() as f64;
    let mut delta = vec![0.0; samples.num_actions()];
    for q in samples.samples() {
        let row = q.row(s);
        let best = row[argmax_first(row)];
        for (d, x) in delta.iter_mut().zip(row) {
            *d += best - x;
        }
    }
    delta.iter_mut().for_each(|d| *d /= k);
    Ok(delta)
}

/// `v̂_a(s)` and the greedy-action counts `|Z̃(a*)|`.
pub fn conditional_variances(samples: &QSampleSet, s: usize) -> Result<(Vec<f64>, Vec<usize>)> {
    check_state(samples, s)?;
    let num_actions = samples.num_actions();
    let k = samples.len() as f64;
    let mut overall = vec![0.0; num_actions];
    let mut group_sums = Matrix::zeros(num_actions, num_actions);
    let mut counts = vec![0usize; num_actions];
    for q in samples.samples() {
        let row = q.row(s);
        let greedy = argmax_first(row);
        counts[greedy] += 1;
        for ((o, g), x) in overall.iter_mut().zip(group_sums.row_mut(greedy)).zip(row) {
            *o += x;
            *g += x;
        }
    }
    overall.iter_mut().for_each(|o| *o /= k);
    let mut v = vec![0.0; num_actions];
    for (star, &count) in counts.iter().enumerate() {
        if count == 0 {
            continue;
        }
        let weight = count as f64 / k;
        for ((vi, g), o) in v.iter_mut().zip(group_sums.row(star)).zip(&overall) {
            let dev = g / count as f64 - o;
            *vi += weight * dev * dev;
        }
    }
    Ok((v, counts))
}

pub fn action_stats(samples: &QSampleSet, s: usize) -> Result<ActionStats> {
    let delta_hat = expected_regrets(samples, s)?;
    let (v_hat, argmax_counts) = conditional_variances(samples, s)?;
    Ok(ActionStats {
        delta_hat,
        v_hat,
        argmax_counts,
    })
}

/// `N² / D` with `0/0 = 0` and `x/0 = inf`.
fn ratio(numer: f64, denom: f64) -> f64 {
    if denom > 0.0 {
        numer * numer / denom
    } else if numer == 0.0 {
        0.0
    } else {
        f64::INFINITY
    }
}

/// Information-ratio minimizer.
pub fn ids_distribution(delta: &[f64], v: &[f64], mode: IdsMode) -> Result<IdsPolicy> {
    if delta.is_empty() || delta.len() != v.len() {
        return Err(Ps2Error::usage(
            "delta and v must be non-empty and equally long",
        ));
    }
    if delta.iter().chain(v).any(|x| !(*x >= 0.0)) {
        return Err(Ps2Error::usage("delta and v must be non-negative"));
    }

    // Zero-regret actions are optimal at ratio 0; prefer an informative one.
    let zero_regret = |informative: bool| {
        delta
            .iter()
            .zip(v)
            .position(|(&d, &vv)| d == 0.0 && (vv > 0.0) == informative)
    };
    if let Some(a) = zero_regret(true).or_else(|| zero_regret(false)) {
        return Ok(IdsPolicy::point_mass(a, 0.0));
    }
    if v.iter().all(|&x| x == 0.0) {
        let a = argmin_first(delta);
        return Ok(IdsPolicy::point_mass(a, f64::INFINITY));
    }

    match mode {
        IdsMode::Literal => {
            let scores: Vec<f64> = delta.iter().zip(v).map(|(&d, &vv)| ratio(d, vv)).collect();
            let a = argmin_first(&scores);
            Ok(IdsPolicy::point_mass(a, scores[a]))
        }
        IdsMode::SquaredExpectation => Ok(minimize_over_pairs(delta, v)),
    }
}

fn argmin_first(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in values.iter().enumerate().skip(1) {
        if x < values[best] {
            best = i;
        }
    }
    best
}

/// Exact minimizer of `(Σ π_a Δ_a)² / Σ π_a v_a`; some minimizer is supported
/// on at most two actions, so it suffices to search vertices and pairs.
fn minimize_over_pairs(delta: &[f64], v: &[f64]) -> IdsPolicy {
    let n = delta.len();
    let vertex_ratios: Vec<f64> = (0..n).map(|a| ratio(delta[a], v[a])).collect();
    let best_vertex = argmin_first(&vertex_ratios);
    let mut best = IdsPolicy::point_mass(best_vertex, vertex_ratios[best_vertex]);

    for i in 0..n {
        for j in (i + 1)..n {
            // π = p·e_i + (1 − p)·e_j; f(p) = (Δ_j + p·d)² / (v_j + p·w).
            let d = delta[i] - delta[j];
            let w = v[i] - v[j];
            if d == 0.0 || w == 0.0 {
                continue; // monotone in p: a vertex is optimal
            }
            let p = delta[j] / d - 2.0 * v[j] / w;
            if !(p > 0.0 && p < 1.0) {
                continue;
            }
            let value = ratio(delta[j] + p * d, v[j] + p * w);
            if value < best.ratio {
                best = IdsPolicy {
                    support: vec![i, j],
                    probabilities: vec![p, 1.0 - p],
                    ratio: value,
                };
            }
        }
    }
    best
}

/// Draws an action from `policy`.
pub fn sample_action<R: Rng + ?Sized>(policy: &IdsPolicy, rng: &mut R) -> usize {
    if policy.support.len() == 1 {
        return policy.support[0];
    }
    let u: f64 = rng.random();
    let mut acc = 0.0;
    for (&a, &p) in policy.support.iter().zip(&policy.probabilities) {
        acc += p;
        if u < acc {
            return a;
        }
    }
    *policy.support.last().expect("non-empty support")
}

/// Greedy action in row `s` of one posterior sample.
pub fn thompson_action(q_sample: &Matrix, s: usize) -> usize {
    argmax_first(q_sample.row(s))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn set(rows: &[Vec<f64>]) -> QSampleSet {
        QSampleSet::new(
            rows.iter()
                .map(|r| Matrix::from_rows(&[r.clone()]).unwrap())
                .collect(),
        )
        .unwrap()
    }

    #[test]
    fn two_sample_worked_example() {
        let samples = set(&[vec![1.0, 0.0], vec![0.0, 1.0]]);
        assert_eq!(expected_regrets(&samples, 0).unwrap(), vec![0.5, 0.5]);
        let (v, counts) = conditional_variances(&samples, 0).unwrap();
        assert_eq!(v, vec![0.25, 0.25]);
        assert_eq!(counts, vec![1, 1]);
    }

    #[test]
    fn identical_samples_have_no_variance() {
        let samples = set(&vec![vec![0.2, 0.9, 0.4]; 5]);
        let delta = expected_regrets(&samples, 0).unwrap();
        let expect = [0.7, 0.0, 0.5];
        for (d, e) in delta.iter().zip(expect) {
            assert!((d - e).abs() < 1e-15);
        }
        let (v, counts) = conditional_variances(&samples, 0).unwrap();
        assert_eq!(v, vec![0.0; 3]);
        assert_eq!(counts, vec![0, 5, 0]);
    }

    #[test]
    fn state_out_of_range() {
        let samples = set(&[vec![1.0]]);
        assert!(expected_regrets(&samples, 1).is_err());
        assert!(conditional_variances(&samples, 1).is_err());
    }

    #[test]
    fn ids_worked_examples() {
        let p = ids_distribution(&[0.0, 1.0], &[0.5, 0.5], IdsMode::SquaredExpectation).unwrap();
        assert_eq!((p.support.clone(), p.ratio), (vec![0], 0.0));

        let p = ids_distribution(&[1.0, 1.0], &[1.0, 4.0], IdsMode::SquaredExpectation).unwrap();
        assert_eq!(p.support, vec![1]);
        assert!((p.ratio - 0.25).abs() < 1e-9);

        let p = ids_distribution(&[1.0, 3.0], &[0.0, 4.0], IdsMode::SquaredExpectation).unwrap();
        assert_eq!(p.support, vec![0, 1]);
        assert!((p.probabilities[0] - 0.5).abs() < 1e-12);
        assert!((p.ratio - 2.0).abs() < 1e-9);
    }

    #[test]
    fn ids_degenerate_rules() {
        // Zero regret with zero variance still wins if nothing better exists.
        let p = ids_distribution(&[0.3, 0.0], &[1.0, 0.0], IdsMode::SquaredExpectation).unwrap();
        assert_eq!((p.support, p.ratio), (vec![1], 0.0));
        // Informative zero-regret action is preferred.
        let p = ids_distribution(&[0.0, 0.0], &[0.0, 0.2], IdsMode::SquaredExpectation).unwrap();
        assert_eq!(p.support, vec![1]);
        // Collapsed posterior: least regret.
        let p = ids_distribution(&[0.4, 0.1, 0.2], &[0.0; 3], IdsMode::Literal).unwrap();
        assert_eq!(p.support, vec![1]);
        assert!(ids_distribution(&[-0.1], &[1.0], IdsMode::Literal).is_err());
        assert!(ids_distribution(&[0.1], &[1.0, 2.0], IdsMode::Literal).is_err());
        assert!(ids_distribution(&[0.1], &[f64::NAN], IdsMode::Literal).is_err());
    }

    #[test]
    fn literal_mode_picks_best_single_action() {
        // Δ²/v = [1, 0.5625/0.5 = 1.125, 0.25/0.1 = 2.5]
        let p = ids_distribution(&[1.0, 0.75, 0.5], &[1.0, 0.5, 0.1], IdsMode::Literal).unwrap();
        assert_eq!(p.support, vec![0]);
        assert!((p.ratio - 1.0).abs() < 1e-15);
    }

    #[test]
    fn sample_action_frequencies() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let point = IdsPolicy::point_mass(2, 0.0);
        assert!((0..10).all(|_| sample_action(&point, &mut rng) == 2));

        let half = IdsPolicy {
            support: vec![0, 3],
            probabilities: vec![0.5, 0.5],
            ratio: 1.0,
        };
        let n = 100_000;
        let zeros = (0..n)
            .filter(|_| sample_action(&half, &mut rng) == 0)
            .count();
        assert!((zeros as f64 / n as f64 - 0.5).abs() < 0.01);

        let draw = |seed| {
            let mut r = ChaCha8Rng::seed_from_u64(seed);
            (0..20)
                .map(|_| sample_action(&half, &mut r))
                .collect::<Vec<_>>()
        };
        assert_eq!(draw(5), draw(5));
    }

    #[test]
    fn thompson_is_greedy_with_low_tie_break() {
        let q = Matrix::from_rows(&[vec![0.1, 0.9], vec![0.4, 0.4]]).unwrap();
        assert_eq!(thompson_action(&q, 0), 1);
        assert_eq!(thompson_action(&q, 1), 0);
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        for _ in 0..50 {
            let row: Vec<f64> = (0..6).map(|_| rng.random()).collect();
            let q = Matrix::from_rows(&[row.clone()]).unwrap();
            let best = (0..6).fold(0, |b, a| if row[a] > row[b] { a } else { b });
            assert_eq!(thompson_action(&q, 0), best);
        }
    }

    #[test]
    fn point_mass_posterior_reduces_to_greedy() {
        let samples = set(&vec![vec![0.3, 0.8, 0.1]; 4]);
        let stats = action_stats(&samples, 0).unwrap();
        for mode in [IdsMode::SquaredExpectation, IdsMode::Literal] {
            let p = ids_distribution(&stats.delta_hat, &stats.v_hat, mode).unwrap();
            assert_eq!(p.support, vec![1]);
        }
    }

    fn grid_minimum(delta: &[f64], v: &[f64]) -> f64 {
        let n = delta.len();
        let mut best = f64::INFINITY;
        for i in 0..n {
            for j in i..n {
                for step in 0..=1000 {
                    let p = step as f64 / 1000.0;
                    let num = p * delta[i] + (1.0 - p) * delta[j];
                    let den = p * v[i] + (1.0 - p) * v[j];
                    best = best.min(ratio(num, den));
                }
            }
        }
        best
    }

    proptest! {
        #[test]
        fn squared_mode_beats_pairwise_grid(
            delta in prop::collection::vec(0.0f64..2.0, 2..=6),
            seed in 0u64..10_000,
        ) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let v: Vec<f64> = delta.iter().map(|_| rng.random_range(0.0..1.0)).collect();
            let p = ids_distribution(&delta, &v, IdsMode::SquaredExpectation).unwrap();
            prop_assert!(p.support.len() <= 2);
            prop_assert!((p.probabilities.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            prop_assert!(p.ratio <= grid_minimum(&delta, &v) + 1e-6);
        }

        #[test]
        fn distribution_is_scale_invariant(
            delta in prop::collection::vec(0.01f64..2.0, 2..=6),
            c in 0.1f64..10.0,
            seed in 0u64..10_000,
        ) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let v: Vec<f64> = delta.iter().map(|_| rng.random_range(0.01..1.0)).collect();
            let base = ids_distribution(&delta, &v, IdsMode::SquaredExpectation).unwrap();

            let scaled_delta: Vec<f64> = delta.iter().map(|d| d * c).collect();
            let p = ids_distribution(&scaled_delta, &v, IdsMode::SquaredExpectation).unwrap();
            prop_assert_eq!(&p.support, &base.support);
            for (a, b) in p.probabilities.iter().zip(&base.probabilities) {
                prop_assert!((a - b).abs() < 1e-9);
            }
            prop_assert!((p.ratio - c * c * base.ratio).abs() <= 1e-9 * p.ratio.max(1.0));

            let scaled_v: Vec<f64> = v.iter().map(|x| x * c).collect();
            let p = ids_distribution(&delta, &scaled_v, IdsMode::SquaredExpectation).unwrap();
            prop_assert_eq!(&p.support, &base.support);
            for (a, b) in p.probabilities.iter().zip(&base.probabilities) {
                prop_assert!((a - b).abs() < 1e-9);
            }
            prop_assert!((p.ratio - base.ratio / c).abs() <= 1e-9 * base.ratio.max(1.0));
        }

        #[test]
        fn between_group_variance_bounded_by_total(
            k in 1usize..10,
            a in 1usize..5,
            seed in 0u64..10_000,
        ) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let rows: Vec<Vec<f64>> = (0..k)
                .map(|_| (0..a).map(|_| rng.random_range(-1.0..1.0)).collect())
                .collect();
            let samples = set(&rows);
            let (v, counts) = conditional_variances(&samples, 0).unwrap();
            prop_assert_eq!(counts.iter().sum::<usize>(), k);
            let delta = expected_regrets(&samples, 0).unwrap();
            for act in 0..a {
                let mean = rows.iter().map(|r| r[act]).sum::<f64>() / k as f64;
                let total = rows.iter().map(|r| (r[act] - mean).powi(2)).sum::<f64>() / k as f64;
                prop_assert!(v[act] >= 0.0 && v[act] <= total + 1e-12);
                prop_assert!(delta[act] >= 0.0);
                let always_greedy = rows.iter().all(|r| argmax_first(r) == act || r[act] == r[argmax_first(r)]);
                prop_assert_eq!(delta[act] == 0.0, always_greedy);
            }
        }
    }
}
