//! Linear centered kernel alignment and the MLP-vs-attention CKA matrix.

use std::io::{Read, Write};

use ndarray::{Array2, ArrayView2, Axis};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::vit::{ActivationCapture, EffortConfig};

/// Protocol batch size for building the CKA matrix.
pub const DEFAULT_CKA_BATCH: usize = 256;

/// How activation rows are formed before comparing two taps.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum CkaRows {
    /// Every token of every sample is one row.
    #[default]
    TokenFlattened,
    /// Tokens are mean-pooled so each sample is one row. The capture rows
    /// must come in consecutive groups of `tokens`.
    PooledPerSample { tokens: usize },
}

fn centered(x: ArrayView2<'_, f64>) -> Array2<f64> {
    let mean = x.mean_axis(Axis(0)).expect("n >= 2");
    &x - &mean.insert_axis(Axis(0))
}

fn frobenius(m: &Array2<f64>) -> f64 {
    m.iter().map(|v| v * v).sum::<f64>().sqrt()
}

fn check_not_degenerate(raw: ArrayView2<'_, f64>, c: &Array2<f64>, which: &str) -> Result<()> {
    let raw_norm = raw.iter().map(|v| v * v).sum::<f64>().sqrt();
    if !raw_norm.is_finite() {
        return Err(Error::domain(format!("{which} has non-finite entries")));
    }
    if frobenius(c) <= 1e-12 * raw_norm.max(f64::MIN_POSITIVE) {
        return Err(Error::Degenerate(format!(
            "{which} has zero variance after centering"
        )));
    }
    Ok(())
}

/// Linear CKA: `||Yc^T Xc||_F^2 / (||Xc^T Xc||_F ||Yc^T Yc||_F)` with
/// column-centred `Xc`, `Yc`. The result is clamped to `[0, 1]`.
pub fn cka(x: ArrayView2<'_, f64>, y: ArrayView2<'_, f64>) -> Result<f64> {
    if x.nrows() != y.nrows() {
        return Err(Error::domain(format!(
            "CKA arguments have {} and {} rows",
            x.nrows(),
            y.nrows()
        )));
    }
    if x.nrows() < 2 {
        return Err(Error::domain("CKA needs at least 2 rows"));
    }
    if x.ncols() == 0 || y.ncols() == 0 {
        return Err(Error::Degenerate("CKA argument has no columns".into()));
    }
    let xc = centered(x);
    let yc = centered(y);
    check_not_degenerate(x, &xc, "first argument")?;
    check_not_degenerate(y, &yc, "second argument")?;
    let cross = yc.t().dot(&xc);
    let xx = xc.t().dot(&xc);
    let yy = yc.t().dot(&yc);
    let num = cross.iter().map(|v| v * v).sum::<f64>();
    let den = frobenius(&xx) * frobenius(&yy);
    if den == 0.0 || !den.is_finite() {
        return Err(Error::Degenerate("CKA normaliser is zero".into()));
    }
    Ok((num / den).clamp(0.0, 1.0))
}

fn pool(m: &Array2<f64>, tokens: usize) -> Result<Array2<f64>> {
    if tokens == 0 || !m.nrows().is_multiple_of(tokens) {
        return Err(Error::domain(format!(
            "{} rows cannot be pooled in groups of {tokens} tokens",
            m.nrows()
        )));
    }
    let samples = m.nrows() / tokens;
    let mut out = Array2::zeros((samples, m.ncols()));
    for s in 0..samples {
        let block = m.slice(ndarray::s![s * tokens..(s + 1) * tokens, ..]);
        out.row_mut(s)
            .assign(&block.mean_axis(Axis(0)).expect("tokens >= 1"));
    }
    Ok(out)
}

/// `CKA(MLP_i, A_j)` for every `j > i` (1-based encoder indices).
#[derive(Debug, Clone, PartialEq)]
pub struct CkaMatrix {
    num_encoders: usize,
    values: Vec<f64>,
    sample_count: usize,
}

impl CkaMatrix {
    /// Builds a matrix from explicit upper-triangle entries, mainly for tests
    /// and for files. `entry(i, j)` is called for every `1 <= i < j <= D`.
    pub fn from_fn(
        num_encoders: usize,
        sample_count: usize,
        mut entry: impl FnMut(usize, usize) -> f64,
    ) -> Result<Self> {
        let mut m = CkaMatrix {
            num_encoders,
            values: vec![0.0; num_encoders * num_encoders],
            sample_count,
        };
        for i in 1..=num_encoders {
            for j in i + 1..=num_encoders {
                let v = entry(i, j);
                if !(v.is_finite() && (-1e-9..=1.0 + 1e-9).contains(&v)) {
                    return Err(Error::domain(format!(
                        "CKA entry ({i}, {j}) = {v} is outside [0, 1]"
                    )));
                }
                m.values[(i - 1) * num_encoders + (j - 1)] = v.clamp(0.0, 1.0);
            }
        }
        Ok(m)
    }

    pub fn num_encoders(&self) -> usize {
        self.num_encoders
    }

    pub fn sample_count(&self) -> usize {
        self.sample_count
    }

    /// Entry `(i, j)`; only the strict upper triangle is defined.
    pub fn get(&self, i: usize, j: usize) -> Result<f64> {
        if i == 0 || j <= i || j > self.num_encoders {
            return Err(Error::domain(format!(
                "CKA entry ({i}, {j}) is outside the upper triangle of a {0}x{0} matrix",
                self.num_encoders
            )));
        }
        Ok(self.values[(i - 1) * self.num_encoders + (j - 1)])
    }

    pub fn entries(&self) -> impl Iterator<Item = (usize, usize, f64)> + '_ {
        let d = self.num_encoders;
        (1..=d)
            .flat_map(move |i| (i + 1..=d).map(move |j| (i, j, self.values[(i - 1) * d + (j - 1)])))
    }

    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut out = csv::Writer::from_writer(w);
        let io = |e: csv::Error| Error::Io(std::io::Error::other(e));
        out.write_record(["i", "j", "cka", "samples"]).map_err(io)?;
        for (i, j, v) in self.entries() {
            out.write_record([
                i.to_string(),
                j.to_string(),
                format!("{v:.17e}"),
                self.sample_count.to_string(),
            ])
            .map_err(io)?;
        }
        out.flush()?;
        Ok(())
    }

    pub fn to_csv_string(&self) -> String {
        let mut buf = Vec::new();
        self.write_csv(&mut buf)
            .expect("writing to a Vec cannot fail");
        String::from_utf8(buf).expect("csv output is utf-8")
    }

    /// Parses the CSV emitted by [`CkaMatrix::write_csv`]. The matrix size is
    /// `num_encoders`; every upper-triangle entry must appear exactly once.
    pub fn read_csv<R: Read>(r: R, num_encoders: usize) -> Result<Self> {
        let mut reader = csv::Reader::from_reader(r);
        let headers = reader
            .headers()
            .map_err(|e| Error::domain(format!("CKA csv header: {e}")))?
            .clone();
        if headers.iter().collect::<Vec<_>>() != ["i", "j", "cka", "samples"] {
            return Err(Error::domain("CKA csv header must be i,j,cka,samples"));
        }
        let d = num_encoders;
        let mut seen: Vec<Option<f64>> = vec![None; d * d];
        let mut samples: Option<usize> = None;
        for (line, rec) in reader.records().enumerate() {
            let rec = rec.map_err(|e| Error::domain(format!("CKA csv: {e}")))?;
            let field = |k: usize| rec.get(k).unwrap_or("").trim();
            let ctx =
                |what: &str| Error::domain(format!("CKA csv record {}: bad {what}", line + 1));
            let i: usize = field(0).parse().map_err(|_| ctx("i"))?;
            let j: usize = field(1).parse().map_err(|_| ctx("j"))?;
            let v: f64 = field(2).parse().map_err(|_| ctx("cka"))?;
            let n: usize = field(3).parse().map_err(|_| ctx("samples"))?;
            if i == 0 || j <= i || j > d {
                return Err(ctx("index pair"));
            }
            if *samples.get_or_insert(n) != n {
                return Err(ctx("samples (inconsistent)"));
            }
            let slot = &mut seen[(i - 1) * d + (j - 1)];
            if slot.is_some() {
                return Err(ctx("index pair (duplicate)"));
            }
            *slot = Some(v);
        }
        let mut missing = None;
        let m = Self::from_fn(d, samples.unwrap_or(0), |i, j| {
            seen[(i - 1) * d + (j - 1)].unwrap_or_else(|| {
                missing.get_or_insert((i, j));
                0.0
            })
        })?;
        if let Some((i, j)) = missing {
            return Err(Error::domain(format!("CKA csv lacks entry ({i}, {j})")));
        }
        Ok(m)
    }
}

/// Fills every upper-triangle entry with `cka(mlp_out_i, attn_out_j)`.
///
/// `capture_effort` is the skip pattern the capture was recorded with; it has
/// to be all-active, otherwise some attention taps cannot exist.
pub fn build_cka_matrix(
    capture: &ActivationCapture,
    capture_effort: &EffortConfig,
    rows: CkaRows,
) -> Result<CkaMatrix> {
    let d = capture.num_encoders();
    if capture_effort.num_encoders() != d {
        return Err(Error::domain(format!(
            "capture has {d} encoders but the effort context has {}",
            capture_effort.num_encoders()
        )));
    }
    if let Some(&skipped) = capture_effort.inactive().iter().find(|&&j| j > 1) {
        return Err(Error::MissingTap {
            encoder: skipped,
            tap: "attn",
        });
    }
    let prepare = |m: &Array2<f64>| -> Result<Array2<f64>> {
        match rows {
            CkaRows::TokenFlattened => Ok(m.clone()),
            CkaRows::PooledPerSample { tokens } => pool(m, tokens),
        }
    };
    let mlp: Vec<Option<Array2<f64>>> = (1..=d)
        .map(|i| {
            if i < d {
                prepare(capture.mlp_out(i)?).map(Some)
            } else {
                Ok(None)
            }
        })
        .collect::<Result<_>>()?;
    let attn: Vec<Option<Array2<f64>>> = (1..=d)
        .map(|j| {
            if j > 1 {
                prepare(capture.attn_out(j)?).map(Some)
            } else {
                Ok(None)
            }
        })
        .collect::<Result<_>>()?;
    let sample_count = match rows {
        CkaRows::TokenFlattened => capture.rows(),
        CkaRows::PooledPerSample { tokens } => capture.rows() / tokens,
    };
    let mut first_err = None;
    let m = CkaMatrix::from_fn(d, sample_count, |i, j| {
        let x = mlp[i - 1].as_ref().expect("i < d");
        let y = attn[j - 1].as_ref().expect("j > 1");
        match cka(x.view(), y.view()) {
            Ok(v) => v,
            Err(e) => {
                first_err.get_or_insert(e);
                0.0
            }
        }
    })?;
    match first_err {
        Some(e) => Err(e),
        None => Ok(m),
    }
}
