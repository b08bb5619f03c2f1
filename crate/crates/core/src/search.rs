//! Low/high effort pair search under a delay target, and LEC sweeps.

use std::collections::BTreeMap;
use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::pathfinder::EffortCatalog;
use crate::router::{sweep_threshold, threshold_grid, RoutingOutcome};
use crate::sim::{simulate, CombinedReport, HardwareConfig, SimReport};
use crate::vit::{EffortConfig, LogitBatch, SyntheticRun, ViTConfig};

/// Samples routed per candidate pair.
pub const DEFAULT_SEARCH_BATCH: usize = 256;
/// Allowed relative distance between the combined delay and the target.
pub const DELAY_BAND: f64 = 0.05;

/// Accepts a fraction in `[0, 1]` or a percentage in `(1, 100]`.
pub fn normalize_lec(lec: f64) -> Result<f64> {
    if !lec.is_finite() || !(0.0..=100.0).contains(&lec) {
        return Err(Error::domain(format!(
            "LEC {lec} is neither a fraction nor a percentage"
        )));
    }
    Ok(if lec > 1.0 { lec / 100.0 } else { lec })
}

#[derive(Debug, Clone)]
pub struct SearchSpec {
    pub catalog: EffortCatalog,
    pub delay_target_ms: f64,
    pub lec: f64,
    pub threshold_step: f64,
    /// Logits of the search batch per effort level.
    pub logits: BTreeMap<usize, LogitBatch>,
}

impl SearchSpec {
    pub fn new(
        catalog: EffortCatalog,
        delay_target_ms: f64,
        lec: f64,
        threshold_step: f64,
        logits: BTreeMap<usize, LogitBatch>,
    ) -> Result<Self> {
        let spec = SearchSpec {
            catalog,
            delay_target_ms,
            lec: normalize_lec(lec)?,
            threshold_step,
            logits,
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.delay_target_ms.is_finite() && self.delay_target_ms > 0.0) {
            return Err(Error::domain(format!(
                "delay target {} ms must be positive",
                self.delay_target_ms
            )));
        }
        if !(0.0..=1.0).contains(&self.lec) {
            return Err(Error::domain(format!("LEC {} outside [0, 1]", self.lec)));
        }
        threshold_grid(self.threshold_step)?;
        if self.catalog.len() < 2 {
            return Err(Error::domain("search needs at least two effort levels"));
        }
        for effort in self.catalog.efforts() {
            if !self.logits.contains_key(&effort) {
                return Err(Error::domain(format!("no logits for effort {effort}")));
            }
        }
        Ok(())
    }

    pub fn with_lec(&self, lec: f64) -> Result<Self> {
        let mut spec = self.clone();
        spec.lec = normalize_lec(lec)?;
        Ok(spec)
    }
}

/// Runs the synthetic model once per catalogued path.
pub fn synthetic_logits(
    vit: &ViTConfig,
    catalog: &EffortCatalog,
    samples: usize,
    seed: u64,
) -> Result<BTreeMap<usize, LogitBatch>> {
    let run = SyntheticRun::new(vit, samples, seed)?;
    catalog
        .efforts()
        .map(|effort| {
            let path = &catalog.get(effort).expect("listed effort").config;
            Ok((effort, run.logits(path)?))
        })
        .collect()
}

/// Pairs `(low, high)` with `low < high`, by descending high then descending low.
pub fn candidate_pairs(catalog: &EffortCatalog) -> Vec<(usize, usize)> {
    let efforts: Vec<usize> = catalog.efforts().collect();
    let mut pairs = Vec::new();
    for &high in efforts.iter().rev() {
        for &low in efforts.iter().rev().filter(|&&l| l < high) {
            pairs.push((low, high));
        }
    }
    pairs
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Rejection {
    InfeasibleLec,
    DelayTooHigh,
    DelayTooLow,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Candidate {
    pub low_effort: EffortConfig,
    pub high_effort: EffortConfig,
    pub threshold: f64,
    pub routing: RoutingOutcome,
    pub d_low_ms: f64,
    pub d_high_ms: f64,
    pub combined_delay_ms: f64,
    pub accuracy: f64,
    /// `(combined - target) / target`.
    pub relative_error: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceEntry {
    pub low: usize,
    pub high: usize,
    pub reason: Rejection,
    pub combined_delay_ms: Option<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SearchStatus {
    Success,
    Infeasible,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SearchResult {
    pub status: SearchStatus,
    pub delay_target_ms: f64,
    pub lec: f64,
    pub selected: Option<Candidate>,
    /// Closest LEC-feasible candidate when nothing lands in the band.
    pub nearest_miss: Option<Candidate>,
    /// Rejected pairs in visiting order.
    pub trace: Vec<TraceEntry>,
}

impl SearchResult {
    pub fn is_success(&self) -> bool {
        self.status == SearchStatus::Success
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("search result serializes")
    }
}

/// Simulated delays, computed once per effort.
struct DelayCache<'a> {
    vit: &'a ViTConfig,
    hw: &'a HardwareConfig,
    catalog: &'a EffortCatalog,
    reports: BTreeMap<usize, SimReport>,
}

impl<'a> DelayCache<'a> {
    fn new(vit: &'a ViTConfig, hw: &'a HardwareConfig, catalog: &'a EffortCatalog) -> Self {
        DelayCache {
            vit,
            hw,
            catalog,
            reports: BTreeMap::new(),
        }
    }

    fn path(&self, effort: usize) -> &'a EffortConfig {
        &self.catalog.get(effort).expect("catalogued effort").config
    }

    fn report(&mut self, effort: usize) -> Result<&SimReport> {
        if !self.reports.contains_key(&effort) {
            let r = simulate(self.vit, self.path(effort), self.hw)?;
            self.reports.insert(effort, r);
        }
        Ok(&self.reports[&effort])
    }
}

fn evaluate(
    spec: &SearchSpec,
    cache: &mut DelayCache<'_>,
    low: usize,
    high: usize,
) -> Result<Option<Candidate>> {
    let routing = match sweep_threshold(
        &spec.logits[&low],
        &spec.logits[&high],
        spec.lec,
        spec.threshold_step,
    ) {
        Ok(r) => r,
        Err(Error::InfeasibleLec { .. }) => return Ok(None),
        Err(e) => return Err(e),
    };
    let d_low = cache.report(low)?.total_delay_ms;
    let d_high = cache.report(high)?.total_delay_ms;
    let combined = crate::sim::combined_delay(d_low, d_high, routing.f_low, routing.f_high)?;
    Ok(Some(Candidate {
        low_effort: cache.path(low).clone(),
        high_effort: cache.path(high).clone(),
        threshold: routing.threshold,
        accuracy: routing.accuracy,
        routing,
        d_low_ms: d_low,
        d_high_ms: d_high,
        combined_delay_ms: combined,
        relative_error: (combined - spec.delay_target_ms) / spec.delay_target_ms,
    }))
}

/// Visits candidate pairs in [`candidate_pairs`] order and returns the first
/// whose combined delay is within [`DELAY_BAND`] of the target while serving
/// at least `lec` of the batch at low effort.
pub fn phase2_search(
    spec: &SearchSpec,
    vit: &ViTConfig,
    hw: &HardwareConfig,
) -> Result<SearchResult> {
    spec.validate()?;
    let mut cache = DelayCache::new(vit, hw, &spec.catalog);
    let mut trace = Vec::new();
    let mut nearest: Option<Candidate> = None;
    for (low, high) in candidate_pairs(&spec.catalog) {
        let Some(cand) = evaluate(spec, &mut cache, low, high)? else {
            trace.push(TraceEntry {
                low,
                high,
                reason: Rejection::InfeasibleLec,
                combined_delay_ms: None,
            });
            continue;
        };
        if cand.relative_error.abs() <= DELAY_BAND {
            return Ok(SearchResult {
                status: SearchStatus::Success,
                delay_target_ms: spec.delay_target_ms,
                lec: spec.lec,
                selected: Some(cand),
                nearest_miss: None,
                trace,
            });
        }
        trace.push(TraceEntry {
            low,
            high,
            reason: if cand.relative_error > 0.0 {
                Rejection::DelayTooHigh
            } else {
                Rejection::DelayTooLow
            },
            combined_delay_ms: Some(cand.combined_delay_ms),
        });
        if nearest
            .as_ref()
            .is_none_or(|n| cand.relative_error.abs() < n.relative_error.abs())
        {
            nearest = Some(cand);
        }
    }
    Ok(SearchResult {
        status: SearchStatus::Infeasible,
        delay_target_ms: spec.delay_target_ms,
        lec: spec.lec,
        selected: None,
        nearest_miss: nearest,
        trace,
    })
}

/// One LEC grid point.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LecSweepRow {
    pub lec: f64,
    pub status: SearchStatus,
    pub low: Option<usize>,
    pub high: Option<usize>,
    pub threshold: Option<f64>,
    pub f_low: Option<f64>,
    pub accuracy: Option<f64>,
    pub combined_delay_ms: Option<f64>,
    pub edp_j_ms: Option<f64>,
    pub edp_low_j_ms: Option<f64>,
    pub edp_high_j_ms: Option<f64>,
    pub edp_recompute_j_ms: Option<f64>,
}

impl LecSweepRow {
    pub const CSV_HEADER: [&'static str; 12] = [
        "lec",
        "status",
        "low",
        "high",
        "threshold",
        "f_low",
        "accuracy",
        "combined_delay_ms",
        "edp_j_ms",
        "edp_low_j_ms",
        "edp_high_j_ms",
        "edp_recompute_j_ms",
    ];

    fn infeasible(lec: f64) -> Self {
        LecSweepRow {
            lec,
            status: SearchStatus::Infeasible,
            low: None,
            high: None,
            threshold: None,
            f_low: None,
            accuracy: None,
            combined_delay_ms: None,
            edp_j_ms: None,
            edp_low_j_ms: None,
            edp_high_j_ms: None,
            edp_recompute_j_ms: None,
        }
    }

    fn from_candidate(lec: f64, cand: &Candidate, cache: &mut DelayCache<'_>) -> Result<Self> {
        let low = cand.low_effort.effort();
        let high = cand.high_effort.effort();
        let low_report = cache.report(low)?.clone();
        let hw = cache.hw;
        let high_report = cache.report(high)?;
        let c = CombinedReport::new(
            &low_report,
            high_report,
            cand.routing.f_low,
            cand.routing.f_high,
            hw,
        )?;
        Ok(LecSweepRow {
            lec,
            status: SearchStatus::Success,
            low: Some(low),
            high: Some(high),
            threshold: Some(cand.threshold),
            f_low: Some(cand.routing.f_low),
            accuracy: Some(cand.accuracy),
            combined_delay_ms: Some(c.combined_delay_ms),
            edp_j_ms: Some(c.energy.edp_j_ms),
            edp_low_j_ms: Some(c.edp_low_j_ms),
            edp_high_j_ms: Some(c.edp_high_j_ms),
            edp_recompute_j_ms: Some(c.edp_recompute_j_ms),
        })
    }

    fn csv_record(&self) -> Vec<String> {
        fn opt<T: ToString>(v: Option<T>) -> String {
            v.map(|v| v.to_string()).unwrap_or_default()
        }
        vec![
            self.lec.to_string(),
            match self.status {
                SearchStatus::Success => "success".into(),
                SearchStatus::Infeasible => "infeasible".into(),
            },
            opt(self.low),
            opt(self.high),
            opt(self.threshold),
            opt(self.f_low),
            opt(self.accuracy),
            opt(self.combined_delay_ms),
            opt(self.edp_j_ms),
            opt(self.edp_low_j_ms),
            opt(self.edp_high_j_ms),
            opt(self.edp_recompute_j_ms),
        ]
    }
}

pub fn write_lec_sweep_csv<W: Write>(rows: &[LecSweepRow], w: W) -> Result<()> {
    let io = |e: csv::Error| Error::Io(std::io::Error::other(e));
    let mut out = csv::Writer::from_writer(w);
    out.write_record(LecSweepRow::CSV_HEADER).map_err(io)?;
    for r in rows {
        out.write_record(r.csv_record()).map_err(io)?;
    }
    out.flush()?;
    Ok(())
}

/// For every LEC, either searches (`pinned = None`) or routes the given
/// `(low, high)` pair at the first feasible threshold, and tabulates
/// accuracy and the EDP split. Rows come back in ascending LEC order.
pub fn sweep_lec(
    base: &SearchSpec,
    lecs: &[f64],
    pinned: Option<(usize, usize)>,
    vit: &ViTConfig,
    hw: &HardwareConfig,
) -> Result<Vec<LecSweepRow>> {
    if lecs.is_empty() {
        return Err(Error::domain("empty LEC grid"));
    }
    let mut lecs = lecs
        .iter()
        .map(|&l| normalize_lec(l))
        .collect::<Result<Vec<_>>>()?;
    lecs.sort_by(f64::total_cmp);
    if let Some((low, high)) = pinned {
        for e in [low, high] {
            if base.catalog.get(e).is_none() {
                return Err(Error::domain(format!("effort {e} is not in the catalog")));
            }
        }
        if low >= high {
            return Err(Error::domain(format!(
                "pinned pair ({low}, {high}) needs low < high"
            )));
        }
    }
    let mut cache = DelayCache::new(vit, hw, &base.catalog);
    let mut rows = Vec::with_capacity(lecs.len());
    for lec in lecs {
        let spec = base.with_lec(lec)?;
        spec.validate()?;
        let chosen = match pinned {
            Some((low, high)) => evaluate(&spec, &mut cache, low, high)?,
            None => phase2_search(&spec, vit, hw)?.selected,
        };
        rows.push(match chosen {
            Some(cand) => LecSweepRow::from_candidate(lec, &cand, &mut cache)?,
            None => LecSweepRow::infeasible(lec),
        });
    }
    Ok(rows)
}

#[cfg(test)]
mod tests {
    use approx::assert_relative_eq;
    use ndarray::Array2;

    use super::*;
    use crate::pathfinder::PathScoreResult;
    use crate::router::route;

    fn catalog(d: usize, efforts: &[usize]) -> EffortCatalog {
        EffortCatalog::new(
            d,
            efforts.iter().map(|&e| PathScoreResult {
                config: EffortConfig::new(d, (1..=e).collect()).unwrap(),
                score: 0.0,
            }),
        )
        .unwrap()
    }

    /// Low batch: the first `confident` samples are one-hot, the rest uniform.
    fn batch(n: usize, confident: usize, k: usize) -> LogitBatch {
        let probs = Array2::from_shape_fn((n, k), |(s, c)| {
            if s < confident {
                if c == s % k {
                    1.0
                } else {
                    0.0
                }
            } else {
                1.0 / k as f64
            }
        });
        let labels = (0..n).map(|s| (s % k) as u32).collect();
        LogitBatch::new(probs, labels).unwrap()
    }

    fn logits(efforts: &[usize], confident: &[usize]) -> BTreeMap<usize, LogitBatch> {
        efforts
            .iter()
            .zip(confident)
            .map(|(&e, &c)| (e, batch(20, c, 4)))
            .collect()
    }

    #[test]
    fn lec_normalization() {
        assert_eq!(normalize_lec(0.7).unwrap(), 0.7);
        assert_eq!(normalize_lec(70.0).unwrap(), 0.7);
        assert_eq!(normalize_lec(100.0).unwrap(), 1.0);
        assert_eq!(normalize_lec(1.0).unwrap(), 1.0);
        assert!(normalize_lec(101.0).is_err());
        assert!(normalize_lec(-0.1).is_err());
        assert!(normalize_lec(f64::NAN).is_err());
    }

    #[test]
    fn pair_order() {
        let c = catalog(6, &[2, 4, 6]);
        assert_eq!(candidate_pairs(&c), vec![(4, 6), (2, 6), (2, 4)]);
    }

    #[test]
    fn spec_validation() {
        let c = catalog(6, &[2, 4, 6]);
        let l = logits(&[2, 4, 6], &[20, 20, 20]);
        assert!(SearchSpec::new(c.clone(), 1.0, 0.5, 0.01, l.clone()).is_ok());
        assert!(SearchSpec::new(c.clone(), 0.0, 0.5, 0.01, l.clone()).is_err());
        assert!(SearchSpec::new(c.clone(), 1.0, 0.5, 0.5, l.clone()).is_err());
        let mut missing = l.clone();
        missing.remove(&4);
        assert!(SearchSpec::new(c, 1.0, 0.5, 0.01, missing).is_err());
        assert!(SearchSpec::new(catalog(6, &[6]), 1.0, 0.5, 0.01, l).is_err());
    }

    fn delays(vit: &ViTConfig, hw: &HardwareConfig, efforts: &[usize]) -> Vec<f64> {
        efforts
            .iter()
            .map(|&e| {
                simulate(vit, &EffortConfig::new(6, (1..=e).collect()).unwrap(), hw)
                    .unwrap()
                    .total_delay_ms
            })
            .collect()
    }

    #[test]
    fn middle_pair_is_found_after_rejecting_the_first() {
        let vit = ViTConfig::toy(6);
        let hw = HardwareConfig::default();
        let efforts = [2, 4, 6];
        let c = catalog(6, &efforts);
        // Every low batch is fully confident, so F_L = 1 and combined = D_L.
        let l = logits(&efforts, &[20, 20, 20]);
        let d = delays(&vit, &hw, &efforts);
        let spec = SearchSpec::new(c, d[0], 0.5, 0.01, l).unwrap();
        let result = phase2_search(&spec, &vit, &hw).unwrap();
        assert!(result.is_success());
        let sel = result.selected.unwrap();
        assert_eq!((sel.low_effort.effort(), sel.high_effort.effort()), (2, 6));
        assert_eq!(result.trace.len(), 1);
        assert_eq!((result.trace[0].low, result.trace[0].high), (4, 6));
        assert_eq!(result.trace[0].reason, Rejection::DelayTooHigh);
        // Off-line check of every pair.
        let off: Vec<bool> = candidate_pairs(&spec.catalog)
            .into_iter()
            .map(|(lo, _)| {
                let dl = d[efforts.iter().position(|&e| e == lo).unwrap()];
                ((dl - d[0]) / d[0]).abs() <= DELAY_BAND
            })
            .collect();
        assert_eq!(off, vec![false, true, true]);
    }

    #[test]
    fn target_below_every_pair_is_infeasible() {
        let vit = ViTConfig::toy(6);
        let hw = HardwareConfig::default();
        let efforts = [2, 4, 6];
        let spec = SearchSpec::new(
            catalog(6, &efforts),
            1e-6,
            0.5,
            0.01,
            logits(&efforts, &[20, 20, 20]),
        )
        .unwrap();
        let result = phase2_search(&spec, &vit, &hw).unwrap();
        assert_eq!(result.status, SearchStatus::Infeasible);
        assert_eq!(result.trace.len(), 3);
        assert!(result
            .trace
            .iter()
            .all(|t| t.reason == Rejection::DelayTooHigh));
        let miss = result.nearest_miss.unwrap();
        assert_eq!(miss.low_effort.effort(), 2);
    }

    #[test]
    fn unreachable_lec_is_reported_per_pair() {
        let vit = ViTConfig::toy(6);
        let hw = HardwareConfig::default();
        let efforts = [2, 4, 6];
        // Only 5 of 20 low samples are confident; uniform rows have entropy 1.
        let spec = SearchSpec::new(
            catalog(6, &efforts),
            1.0,
            0.9,
            0.01,
            logits(&efforts, &[5, 5, 5]),
        )
        .unwrap();
        let result = phase2_search(&spec, &vit, &hw).unwrap();
        assert_eq!(result.status, SearchStatus::Infeasible);
        assert!(result
            .trace
            .iter()
            .all(|t| t.reason == Rejection::InfeasibleLec));
        assert!(result.nearest_miss.is_none());
    }

    #[test]
    fn success_satisfies_band_and_lec() {
        let vit = ViTConfig::toy(6);
        let hw = HardwareConfig::default();
        let efforts = [2, 4, 6];
        let l = logits(&efforts, &[12, 16, 20]);
        let d = delays(&vit, &hw, &efforts);
        let spec = SearchSpec::new(catalog(6, &efforts), d[1] + 0.2 * d[2], 60.0, 0.01, l).unwrap();
        let result = phase2_search(&spec, &vit, &hw).unwrap();
        let sel = result.selected.expect("feasible");
        assert_eq!(sel.routing.f_low, 0.8);
        assert!(sel.routing.f_low >= 0.6);
        assert!(sel.relative_error.abs() <= DELAY_BAND);
        let direct = route(&spec.logits[&4], &spec.logits[&6], sel.threshold).unwrap();
        assert_eq!(direct, sel.routing);
    }

    #[test]
    fn lec_sweep_rows_and_edp_split() {
        let vit = ViTConfig::toy(6);
        let hw = HardwareConfig::default();
        let efforts = [2, 4, 6];
        let l = logits(&efforts, &[20, 16, 20]);
        let spec = SearchSpec::new(catalog(6, &efforts), 1.0, 0.5, 0.01, l).unwrap();
        let rows = sweep_lec(&spec, &[0.9, 60.0, 0.7, 0.8], Some((4, 6)), &vit, &hw).unwrap();
        assert_eq!(rows.len(), 4);
        assert_eq!(
            rows.iter().map(|r| r.lec).collect::<Vec<_>>(),
            vec![0.6, 0.7, 0.8, 0.9]
        );
        for r in &rows[..3] {
            assert_eq!(r.status, SearchStatus::Success);
            let split =
                r.edp_low_j_ms.unwrap() + r.edp_high_j_ms.unwrap() + r.edp_recompute_j_ms.unwrap();
            assert_relative_eq!(split, r.edp_j_ms.unwrap(), max_relative = 1e-9);
        }
        assert_eq!(rows[3].status, SearchStatus::Infeasible);

        // LEC = 100: every input stays at low effort.
        let full = sweep_lec(&spec, &[100.0], Some((2, 6)), &vit, &hw).unwrap();
        let d_low = delays(&vit, &hw, &[2])[0];
        assert_eq!(full[0].f_low, Some(1.0));
        assert_relative_eq!(
            full[0].combined_delay_ms.unwrap(),
            d_low,
            max_relative = 1e-12
        );
        assert_eq!(full[0].accuracy, Some(spec.logits[&2].accuracy()));

        let mut buf = Vec::new();
        write_lec_sweep_csv(&rows, &mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert_eq!(text.lines().count(), 5);
        assert!(text.lines().last().unwrap().starts_with("0.9,infeasible,,"));

        assert!(sweep_lec(&spec, &[], None, &vit, &hw).is_err());
        assert!(sweep_lec(&spec, &[0.5], Some((6, 4)), &vit, &hw).is_err());
        assert!(sweep_lec(&spec, &[0.5], Some((3, 6)), &vit, &hw).is_err());
    }

    #[test]
    fn synthetic_logits_cover_catalog() {
        let vit = ViTConfig::toy(4);
        let c = catalog(4, &[1, 3, 4]);
        let l = synthetic_logits(&vit, &c, 16, 3).unwrap();
        assert_eq!(l.keys().copied().collect::<Vec<_>>(), vec![1, 3, 4]);
        assert_eq!(l[&1].labels(), l[&4].labels());
        assert_eq!(l[&4].len(), 16);
    }
}
