//! Path enumeration, Path-Score and per-effort optimal path selection.

use std::cmp::Ordering;
use std::collections::BTreeMap;
use std::fmt::Write as _;

use itertools::Itertools;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::similarity::CkaMatrix;
use crate::vit::EffortConfig;

/// Default limit on materialised enumerations.
pub const DEFAULT_ENUMERATION_CAP: u128 = 1_000_000;

/// Limit on streamed enumerations during selection: `C(24, 12)`.
pub const STREAMING_CAP: u128 = 2_704_156;

pub fn binomial(n: usize, k: usize) -> u128 {
    if k > n {
        return 0;
    }
    let k = k.min(n - k);
    (0..k).fold(1u128, |acc, i| acc * (n - i) as u128 / (i + 1) as u128)
}

/// Lazily yields every path of one effort level in lexicographic order of
/// active indices.
pub fn stream_paths(
    num_encoders: usize,
    effort: usize,
) -> Result<impl Iterator<Item = EffortConfig>> {
    if effort > num_encoders {
        return Err(Error::domain(format!(
            "effort {effort} exceeds the {num_encoders} encoders"
        )));
    }
    if num_encoders == 0 {
        return Err(Error::domain("a ViT has at least one encoder"));
    }
    Ok((1..=num_encoders)
        .combinations(effort)
        .map(move |active| EffortConfig::new(num_encoders, active).expect("sorted, in range")))
}

/// All `C(D, effort)` paths, refusing when the count exceeds `cap`.
pub fn enumerate_paths(num_encoders: usize, effort: usize, cap: u128) -> Result<Vec<EffortConfig>> {
    let count = binomial(num_encoders, effort);
    if count > cap {
        return Err(Error::EnumerationTooLarge { count, cap });
    }
    Ok(stream_paths(num_encoders, effort)?.collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PathScoreResult {
    pub config: EffortConfig,
    pub score: f64,
}

/// Path-Score: for every active encoder `i`, add `CKA(MLP_i, A_j)` for each
/// following encoder `j` while `j`'s attention is inactive, stopping at the
/// next active one. Leading inactive encoders have no anchor and add nothing.
pub fn path_score(config: &EffortConfig, ckam: &CkaMatrix) -> Result<PathScoreResult> {
    let d = config.num_encoders();
    if ckam.num_encoders() != d {
        return Err(Error::domain(format!(
            "path over {d} encoders scored with a {0}x{0} CKA matrix",
            ckam.num_encoders()
        )));
    }
    let mut score = 0.0;
    for &i in config.active() {
        for j in i + 1..=d {
            if config.is_active(j) {
                break;
            }
            score += ckam.get(i, j)?;
        }
    }
    Ok(PathScoreResult {
        config: config.clone(),
        score,
    })
}

fn inactive_depth(config: &EffortConfig) -> usize {
    config.inactive().iter().sum()
}

/// Ranking used for the argmax: higher score, then deeper skipped attentions,
/// then lexicographically smaller active set. `Greater` means preferred.
pub fn compare_candidates(a: &PathScoreResult, b: &PathScoreResult) -> Ordering {
    a.score
        .total_cmp(&b.score)
        .then_with(|| inactive_depth(&a.config).cmp(&inactive_depth(&b.config)))
        .then_with(|| b.config.active().cmp(a.config.active()))
}

/// Optimal path per effort level.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EffortCatalog {
    num_encoders: usize,
    paths: BTreeMap<usize, PathScoreResult>,
}

impl EffortCatalog {
    pub fn new(
        num_encoders: usize,
        entries: impl IntoIterator<Item = PathScoreResult>,
    ) -> Result<Self> {
        let mut paths = BTreeMap::new();
        for entry in entries {
            if entry.config.num_encoders() != num_encoders {
                return Err(Error::domain(
                    "catalog entries must share the encoder count",
                ));
            }
            let effort = entry.config.effort();
            if paths.insert(effort, entry).is_some() {
                return Err(Error::domain(format!(
                    "effort {effort} appears twice in the catalog"
                )));
            }
        }
        Ok(EffortCatalog {
            num_encoders,
            paths,
        })
    }

    pub fn num_encoders(&self) -> usize {
        self.num_encoders
    }

    pub fn efforts(&self) -> impl Iterator<Item = usize> + '_ {
        self.paths.keys().copied()
    }

    pub fn get(&self, effort: usize) -> Option<&PathScoreResult> {
        self.paths.get(&effort)
    }

    pub fn len(&self) -> usize {
        self.paths.len()
    }

    pub fn is_empty(&self) -> bool {
        self.paths.is_empty()
    }

    /// Tab-separated text report: an `encoders` line, a header, then one row
    /// per effort with comma-joined active indices (`-` when none).
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        writeln!(out, "encoders\t{}", self.num_encoders).unwrap();
        writeln!(out, "effort\tactive\tscore").unwrap();
        for (effort, entry) in &self.paths {
            let active = if entry.config.active().is_empty() {
                "-".to_string()
            } else {
                entry.config.active().iter().join(",")
            };
            writeln!(out, "{effort}\t{active}\t{}", entry.score).unwrap();
        }
        out
    }

    pub fn parse(text: &str) -> Result<Self> {
        let err =
            |line: usize, msg: &str| Error::Config(format!("effort catalog line {line}: {msg}"));
        let mut lines = text
            .lines()
            .enumerate()
            .map(|(n, l)| (n + 1, l.trim_end_matches('\r')));
        let (n, first) = lines.next().ok_or_else(|| err(1, "empty file"))?;
        let num_encoders: usize = first
            .strip_prefix("encoders\t")
            .and_then(|v| v.trim().parse().ok())
            .filter(|&d| d > 0)
            .ok_or_else(|| err(n, "expected `encoders<TAB><count>`"))?;
        match lines.next() {
            Some((_, "effort\tactive\tscore")) => {}
            Some((n, _)) => return Err(err(n, "expected header `effort\tactive\tscore`")),
            None => return Err(err(n + 1, "missing header")),
        }
        let mut entries = Vec::new();
        for (n, line) in lines {
            if line.trim().is_empty() {
                continue;
            }
            let fields: Vec<&str> = line.split('\t').collect();
            if fields.len() != 3 {
                return Err(err(n, "expected 3 tab-separated fields"));
            }
            let effort: usize = fields[0].parse().map_err(|_| err(n, "bad effort"))?;
            let active: Vec<usize> = if fields[1] == "-" {
                Vec::new()
            } else {
                fields[1]
                    .split(',')
                    .map(|s| s.parse::<usize>())
                    .collect::<std::result::Result<_, _>>()
                    .map_err(|_| err(n, "bad active index list"))?
            };
            let score: f64 = fields[2].parse().map_err(|_| err(n, "bad score"))?;
            if !(score.is_finite() && score >= 0.0) {
                return Err(err(n, "score must be finite and non-negative"));
            }
            let config =
                EffortConfig::new(num_encoders, active).map_err(|e| err(n, &e.to_string()))?;
            if config.effort() != effort {
                return Err(err(n, "effort does not match the number of active indices"));
            }
            entries.push(PathScoreResult { config, score });
        }
        Self::new(num_encoders, entries).map_err(|e| Error::Config(e.to_string()))
    }
}

/// Scores every path of each requested effort and keeps the best one.
pub fn select_optimal_paths(ckam: &CkaMatrix, efforts: &[usize]) -> Result<EffortCatalog> {
    let d = ckam.num_encoders();
    let mut best = Vec::with_capacity(efforts.len());
    for &effort in efforts.iter().collect::<std::collections::BTreeSet<_>>() {
        let count = binomial(d, effort);
        if count > STREAMING_CAP {
            return Err(Error::EnumerationTooLarge {
                count,
                cap: STREAMING_CAP,
            });
        }
        let mut winner: Option<PathScoreResult> = None;
        for config in stream_paths(d, effort)? {
            let scored = path_score(&config, ckam)?;
            let better = winner
                .as_ref()
                .is_none_or(|w| compare_candidates(&scored, w) == Ordering::Greater);
            if better {
                winner = Some(scored);
            }
        }
        best.push(winner.expect("at least one path per valid effort"));
    }
    EffortCatalog::new(d, best)
}
