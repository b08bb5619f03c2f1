//! Entropy-based routing between a low- and a high-effort model.

use std::io::Write;

use ndarray::ArrayView1;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::vit::LogitBatch;

pub const DEFAULT_THRESHOLD_STEP: f64 = 0.01;

/// Normalized prediction entropy `-(1/ln K) sum p ln p`, in `[0, 1]`.
///
/// Evaluated as `1 - KL(p || uniform) / ln K`, which equals the plain form for
/// any distribution and gives exactly 1 for a uniform `p` and exactly 0 for a
/// one-hot `p`.
pub fn entropy(p: ArrayView1<'_, f64>) -> Result<f64> {
    let k = p.len();
    if k < 2 {
        return Err(Error::domain("entropy needs at least 2 classes"));
    }
    if p.iter().any(|v| !v.is_finite() || *v < 0.0) {
        return Err(Error::domain(
            "probabilities must be finite and non-negative",
        ));
    }
    let sum = p.sum();
    if (sum - 1.0).abs() > 1e-6 {
        return Err(Error::domain(format!("probabilities sum to {sum}")));
    }
    Ok(entropy_unchecked(p))
}

fn entropy_unchecked(p: ArrayView1<'_, f64>) -> f64 {
    let k = p.len() as f64;
    let kl: f64 = p
        .iter()
        .filter(|&&v| v > 0.0)
        .map(|&v| v * (v * k).ln())
        .sum();
    (1.0 - kl.max(0.0) / k.ln()).clamp(0.0, 1.0)
}

/// Entropy of every row of a batch.
pub fn batch_entropies(batch: &LogitBatch) -> Vec<f64> {
    batch
        .probs()
        .rows()
        .into_iter()
        .map(entropy_unchecked)
        .collect()
}

/// Accounting for one threshold.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoutingOutcome {
    pub threshold: f64,
    pub samples: usize,
    pub n_low: usize,
    pub n_high: usize,
    pub f_low: f64,
    pub f_high: f64,
    pub c_low: usize,
    pub i_low: usize,
    pub c_high: usize,
    pub i_high: usize,
    pub accuracy: f64,
}

impl RoutingOutcome {
    pub const CSV_HEADER: [&'static str; 11] = [
        "threshold",
        "samples",
        "n_low",
        "n_high",
        "f_low",
        "f_high",
        "c_low",
        "i_low",
        "c_high",
        "i_high",
        "accuracy",
    ];

    fn csv_record(&self) -> [String; 11] {
        [
            self.threshold.to_string(),
            self.samples.to_string(),
            self.n_low.to_string(),
            self.n_high.to_string(),
            self.f_low.to_string(),
            self.f_high.to_string(),
            self.c_low.to_string(),
            self.i_low.to_string(),
            self.c_high.to_string(),
            self.i_high.to_string(),
            self.accuracy.to_string(),
        ]
    }
}

pub fn write_outcomes_csv<W: Write>(outcomes: &[RoutingOutcome], w: W) -> Result<()> {
    let io = |e: csv::Error| Error::Io(std::io::Error::other(e));
    let mut out = csv::Writer::from_writer(w);
    out.write_record(RoutingOutcome::CSV_HEADER).map_err(io)?;
    for o in outcomes {
        out.write_record(o.csv_record()).map_err(io)?;
    }
    out.flush()?;
    Ok(())
}

fn check_aligned(low: &LogitBatch, high: &LogitBatch) -> Result<()> {
    if low.len() != high.len() {
        return Err(Error::domain(format!(
            "low batch has {} samples, high batch {}",
            low.len(),
            high.len()
        )));
    }
    if low.num_classes() != high.num_classes() {
        return Err(Error::domain(
            "low and high batches disagree on class count",
        ));
    }
    if low.labels() != high.labels() {
        return Err(Error::domain("low and high batches carry different labels"));
    }
    Ok(())
}

fn check_threshold(threshold: f64) -> Result<()> {
    if !(threshold > 0.0 && threshold <= 1.0) {
        return Err(Error::domain(format!(
            "threshold {threshold} outside (0, 1]"
        )));
    }
    Ok(())
}

/// Routes with precomputed low-effort entropies. `high_correct` is only
/// called for samples sent to the high effort.
pub fn route_with_entropies(
    entropies: &[f64],
    threshold: f64,
    low_correct: impl Fn(usize) -> bool,
    high_correct: impl Fn(usize) -> bool,
) -> Result<RoutingOutcome> {
    check_threshold(threshold)?;
    let n = entropies.len();
    if n == 0 {
        return Err(Error::domain("routing an empty batch"));
    }
    let (mut c_low, mut i_low, mut c_high, mut i_high) = (0, 0, 0, 0);
    for (s, &e) in entropies.iter().enumerate() {
        if e < threshold {
            if low_correct(s) {
                c_low += 1;
            } else {
                i_low += 1;
            }
        } else if high_correct(s) {
            c_high += 1;
        } else {
            i_high += 1;
        }
    }
    let n_low = c_low + i_low;
    let n_high = c_high + i_high;
    Ok(RoutingOutcome {
        threshold,
        samples: n,
        n_low,
        n_high,
        f_low: n_low as f64 / n as f64,
        f_high: n_high as f64 / n as f64,
        c_low,
        i_low,
        c_high,
        i_high,
        accuracy: (c_low + c_high) as f64 / n as f64,
    })
}

/// Sends a sample to the low effort iff its low-effort entropy is strictly
/// below `threshold`; every other sample is served by the high effort.
pub fn route(low: &LogitBatch, high: &LogitBatch, threshold: f64) -> Result<RoutingOutcome> {
    check_aligned(low, high)?;
    route_with_entropies(
        &batch_entropies(low),
        threshold,
        |s| low.is_correct(s),
        |s| high.is_correct(s),
    )
}

/// Thresholds `step, 2 step, ...` up to 1. When `1/step` is an integer the
/// points are computed as `k / n` so that decimal steps land exactly.
pub fn threshold_grid(step: f64) -> Result<Vec<f64>> {
    if !(step > 0.0 && step <= 0.1) {
        return Err(Error::domain(format!(
            "threshold step {step} outside (0, 0.1]"
        )));
    }
    let inv = 1.0 / step;
    let n = inv.round();
    if (inv - n).abs() < 1e-9 {
        let n = n as u64;
        return Ok((1..=n).map(|k| k as f64 / n as f64).collect());
    }
    Ok((1..)
        .map(|k| k as f64 * step)
        .take_while(|&t| t <= 1.0)
        .collect())
}

/// First grid threshold at which at least a fraction `lec` of the batch is
/// served by the low effort. `lec = 0` is accepted and returns the first point.
pub fn sweep_threshold(
    low: &LogitBatch,
    high: &LogitBatch,
    lec: f64,
    step: f64,
) -> Result<RoutingOutcome> {
    check_aligned(low, high)?;
    if !(0.0..=1.0).contains(&lec) {
        return Err(Error::domain(format!("LEC {lec} outside (0, 1]")));
    }
    let entropies = batch_entropies(low);
    for th in threshold_grid(step)? {
        let outcome = route_with_entropies(
            &entropies,
            th,
            |s| low.is_correct(s),
            |s| high.is_correct(s),
        )?;
        if outcome.f_low >= lec {
            return Ok(outcome);
        }
    }
    Err(Error::InfeasibleLec { lec })
}

/// Outcome at every grid threshold, for sweep reports.
pub fn threshold_table(
    low: &LogitBatch,
    high: &LogitBatch,
    step: f64,
) -> Result<Vec<RoutingOutcome>> {
    check_aligned(low, high)?;
    let entropies = batch_entropies(low);
    threshold_grid(step)?
        .into_iter()
        .map(|th| {
            route_with_entropies(
                &entropies,
                th,
                |s| low.is_correct(s),
                |s| high.is_correct(s),
            )
        })
        .collect()
}

/// Mean entropy over correctly classified samples; `None` when no sample is
/// correct.
pub fn entropy_regularizer_value(batch: &LogitBatch) -> Option<f64> {
    let entropies = batch_entropies(batch);
    let correct: Vec<f64> = (0..batch.len())
        .filter(|&s| batch.is_correct(s))
        .map(|s| entropies[s])
        .collect();
    if correct.is_empty() {
        None
    } else {
        Some(correct.iter().sum::<f64>() / correct.len() as f64)
    }
}

#[cfg(test)]
mod tests {
    use approx::assert_abs_diff_eq;
    use ndarray::{array, Array1, Array2};
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    use super::*;

    fn route_list(e: &[f64], th: f64) -> RoutingOutcome {
        route_with_entropies(e, th, |_| true, |_| true).unwrap()
    }

    #[test]
    fn entropy_endpoints() {
        for k in [2usize, 3, 7, 10, 49, 1000] {
            let u = Array1::from_elem(k, 1.0 / k as f64);
            assert_eq!(entropy(u.view()).unwrap(), 1.0, "K = {k}");
            let mut one_hot = Array1::zeros(k);
            one_hot[k / 2] = 1.0;
            assert_eq!(entropy(one_hot.view()).unwrap(), 0.0);
        }
        assert_abs_diff_eq!(
            entropy(array![0.9, 0.1].view()).unwrap(),
            0.468_995_59,
            epsilon = 1e-8
        );
    }

    #[test]
    fn entropy_rejects_invalid() {
        assert!(entropy(array![1.0].view()).is_err());
        assert!(entropy(array![0.5, 0.6].view()).is_err());
        assert!(entropy(array![1.5, -0.5].view()).is_err());
        assert!(entropy(array![f64::NAN, 1.0].view()).is_err());
    }

    #[test]
    fn routing_examples() {
        let e = [0.1, 0.3, 0.6, 0.9];
        let o = route_list(&e, 0.5);
        assert_eq!((o.f_low, o.f_high), (0.5, 0.5));

        let all = route_list(&[0.2, 0.999_999, 1.0], 1.0);
        assert_eq!((o.n_low + o.n_high, all.n_low, all.n_high), (4, 2, 1));

        assert!(route_with_entropies(&e, 0.0, |_| true, |_| true).is_err());
        assert!(route_with_entropies(&e, 1.0 + 1e-12, |_| true, |_| true).is_err());
        // Boundary goes high.
        assert_eq!(route_list(&[0.5], 0.5).n_high, 1);
    }

    #[test]
    fn grid_points_are_exact_decimals() {
        let g = threshold_grid(0.05).unwrap();
        assert_eq!(g.len(), 20);
        assert_eq!(g[11], 0.6);
        assert_eq!(g[12], 0.65);
        assert_eq!(*g.last().unwrap(), 1.0);
        assert_eq!(threshold_grid(0.01).unwrap().len(), 100);
        assert_eq!(threshold_grid(0.03).unwrap().len(), 33);
        assert!(threshold_grid(0.0).is_err());
        assert!(threshold_grid(0.2).is_err());
    }

    /// Batch with two classes where sample `s` has low-effort entropy close to
    /// `targets[s]`, found by bisection on the top probability.
    fn batch_with_entropies(targets: &[f64], labels: Vec<u32>) -> LogitBatch {
        let mut probs = Array2::zeros((targets.len(), 2));
        for (s, &t) in targets.iter().enumerate() {
            let (mut lo, mut hi) = (0.5, 1.0);
            for _ in 0..200 {
                let mid = 0.5 * (lo + hi);
                if entropy(array![mid, 1.0 - mid].view()).unwrap() > t {
                    lo = mid;
                } else {
                    hi = mid;
                }
            }
            // `lo` sits just above the target entropy.
            probs[[s, 0]] = lo;
            probs[[s, 1]] = 1.0 - lo;
        }
        LogitBatch::new(probs, labels).unwrap()
    }

    #[test]
    fn sweep_examples() {
        let low = batch_with_entropies(&[0.1, 0.3, 0.6, 0.9], vec![0, 0, 1, 1]);
        let high = low.clone();
        let o = sweep_threshold(&low, &high, 0.75, 0.05).unwrap();
        assert_eq!(o.threshold, 0.65);
        assert_eq!(o.f_low, 0.75);

        let first = sweep_threshold(&low, &high, 0.0, 0.05).unwrap();
        assert_eq!(first.threshold, 0.05);

        let confident = LogitBatch::new(array![[1.0, 0.0], [0.0, 1.0]], vec![0, 1]).unwrap();
        let o = sweep_threshold(&confident, &confident, 1.0, 0.01).unwrap();
        assert_eq!((o.threshold, o.f_low), (0.01, 1.0));

        let uniform = LogitBatch::new(array![[0.5, 0.5], [1.0, 0.0]], vec![0, 0]).unwrap();
        assert!(matches!(
            sweep_threshold(&uniform, &uniform, 0.9, 0.01),
            Err(Error::InfeasibleLec { .. })
        ));
        assert!(sweep_threshold(&low, &high, 0.5, 0.5).is_err());
    }

    #[test]
    fn misaligned_batches_rejected() {
        let a = LogitBatch::new(array![[0.5, 0.5]], vec![0]).unwrap();
        let b = LogitBatch::new(array![[0.5, 0.5]], vec![1]).unwrap();
        let c = LogitBatch::new(array![[0.5, 0.5], [0.1, 0.9]], vec![0, 1]).unwrap();
        assert!(route(&a, &b, 0.5).is_err());
        assert!(route(&a, &c, 0.5).is_err());
    }

    fn seeded_batch(n: usize, k: usize, rng: &mut ChaCha8Rng, labels: &[u32]) -> LogitBatch {
        let mut probs = Array2::zeros((n, k));
        for mut row in probs.rows_mut() {
            let sharp = rng.gen_range(0.0..6.0);
            let logits: Array1<f64> = (0..k).map(|_| rng.gen_range(-1.0..1.0) * sharp).collect();
            row.assign(&crate::vit::softmax(logits.view()).unwrap());
        }
        LogitBatch::new(probs, labels.to_vec()).unwrap()
    }

    #[test]
    #[allow(clippy::needless_range_loop)]
    fn route_matches_per_sample_enumeration() {
        let mut rng = ChaCha8Rng::seed_from_u64(2024);
        let labels: Vec<u32> = (0..100).map(|_| rng.gen_range(0..5)).collect();
        let low = seeded_batch(100, 5, &mut rng, &labels);
        let high = seeded_batch(100, 5, &mut rng, &labels);
        for th in [0.2, 0.5, 0.8, 1.0] {
            let got = route(&low, &high, th).unwrap();
            // Straight-line recount.
            let (mut cl, mut il, mut ch, mut ih) = (0, 0, 0, 0);
            for s in 0..100 {
                let row = low.probs().row(s);
                let h: f64 = -row
                    .iter()
                    .filter(|p| **p > 0.0)
                    .map(|p| p * p.ln())
                    .sum::<f64>()
                    / 5f64.ln();
                let pick = |b: &LogitBatch| {
                    let r = b.probs().row(s);
                    (0..5).fold(0, |best, c| if r[c] > r[best] { c } else { best })
                };
                if h < th {
                    if pick(&low) == labels[s] as usize {
                        cl += 1
                    } else {
                        il += 1
                    }
                } else if pick(&high) == labels[s] as usize {
                    ch += 1
                } else {
                    ih += 1
                }
            }
            assert_eq!(
                (got.c_low, got.i_low, got.c_high, got.i_high),
                (cl, il, ch, ih)
            );
            assert_eq!(got.accuracy, (cl + ch) as f64 / 100.0);
        }
    }

    #[test]
    fn extreme_thresholds_recover_single_model_accuracy() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let labels: Vec<u32> = (0..64).map(|_| rng.gen_range(0..4)).collect();
        let low = seeded_batch(64, 4, &mut rng, &labels);
        let high = seeded_batch(64, 4, &mut rng, &labels);
        let min_e = batch_entropies(&low).into_iter().fold(1.0, f64::min);
        let none_low = route(&low, &high, min_e).unwrap();
        assert_eq!(none_low.f_low, 0.0);
        assert_eq!(none_low.accuracy, high.accuracy());
        let all_low = route(&low, &high, 1.0).unwrap();
        assert_eq!(all_low.f_low, 1.0);
        assert_eq!(all_low.accuracy, low.accuracy());
    }

    #[test]
    fn high_rows_of_low_routed_samples_are_ignored() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let labels: Vec<u32> = (0..50).map(|_| rng.gen_range(0..3)).collect();
        let low = seeded_batch(50, 3, &mut rng, &labels);
        let high = seeded_batch(50, 3, &mut rng, &labels);
        let th = 0.6;
        let entropies = batch_entropies(&low);
        let mut poisoned = high.probs().clone();
        for s in 0..50 {
            if entropies[s] < th {
                let l = labels[s] as usize;
                poisoned.row_mut(s).fill(0.0);
                poisoned[[s, (l + 1) % 3]] = 1.0;
            }
        }
        let poisoned = LogitBatch::new(poisoned, labels.clone()).unwrap();
        assert_eq!(
            route(&low, &high, th).unwrap(),
            route(&low, &poisoned, th).unwrap()
        );
    }

    #[test]
    fn regularizer_value() {
        let confident = LogitBatch::new(array![[1.0, 0.0], [0.0, 1.0]], vec![0, 1]).unwrap();
        assert_eq!(entropy_regularizer_value(&confident), Some(0.0));
        let wrong = LogitBatch::new(array![[1.0, 0.0], [0.0, 1.0]], vec![1, 0]).unwrap();
        assert_eq!(entropy_regularizer_value(&wrong), None);

        let mut rng = ChaCha8Rng::seed_from_u64(77);
        let labels: Vec<u32> = (0..40).map(|_| rng.gen_range(0..6)).collect();
        let b = seeded_batch(40, 6, &mut rng, &labels);
        let (mut sum, mut count) = (0.0, 0);
        for s in 0..40 {
            if b.is_correct(s) {
                let row = b.probs().row(s);
                sum -= row
                    .iter()
                    .filter(|p| **p > 0.0)
                    .map(|p| p * p.ln())
                    .sum::<f64>()
                    / 6f64.ln();
                count += 1;
            }
        }
        assert!(count > 0);
        assert_abs_diff_eq!(
            entropy_regularizer_value(&b).unwrap(),
            sum / count as f64,
            epsilon = 1e-12
        );
    }

    #[test]
    fn outcomes_csv_has_one_row_per_threshold() {
        let low = batch_with_entropies(&[0.1, 0.3, 0.6, 0.9], vec![0, 0, 1, 1]);
        let table = threshold_table(&low, &low, 0.1).unwrap();
        let mut buf = Vec::new();
        write_outcomes_csv(&table, &mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert_eq!(text.lines().count(), 11);
        assert!(table.windows(2).all(|w| w[0].f_low <= w[1].f_low));
    }

    proptest! {
        #[test]
        fn entropy_bounded_and_permutation_invariant(
            raw in prop::collection::vec(0.0f64..1.0, 2..20),
            rot in 0usize..20,
        ) {
            let total: f64 = raw.iter().sum();
            prop_assume!(total > 1e-9);
            let p = Array1::from(raw.iter().map(|v| v / total).collect::<Vec<_>>());
            let e = entropy(p.view()).unwrap();
            prop_assert!((0.0..=1.0).contains(&e));
            let mut q = p.to_vec();
            let len = q.len();
            q.rotate_left(rot % len);
            q.reverse();
            prop_assert!((entropy(Array1::from(q).view()).unwrap() - e).abs() < 1e-12);
        }

        #[test]
        fn f_low_monotone_and_complementary(
            e in prop::collection::vec(0.0f64..=1.0, 1..60),
            a in 0.01f64..=1.0,
            b in 0.01f64..=1.0,
        ) {
            let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
            let x = route_list(&e, lo);
            let y = route_list(&e, hi);
            prop_assert!(x.f_low <= y.f_low);
            prop_assert_eq!(x.n_low + x.n_high, e.len());
            prop_assert_eq!(x.c_low + x.i_low, x.n_low);
        }
    }
}
