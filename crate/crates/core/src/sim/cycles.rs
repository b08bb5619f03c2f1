//! Cycle model of one GEMM on the systolic array, and the event-driven
//! register-level simulation that pins down its semantics.
//!
//! Mapping: the reduction dimension `K` runs along the `R` array rows and `M`
//! along the `C` array columns. For every `(K, M)` tile the stationary operand
//! is loaded one row per cycle (`R_u` cycles), then the `N` streaming columns
//! enter skewed by row, move right one PE per cycle while partial sums move
//! down one PE per cycle, and the last result leaves the bottom of the array
//! `N + R_u + C_u - 2` cycles after streaming starts. Partial sums of
//! successive K-tiles are accumulated in output memory at no extra cost.

use ndarray::Array2;

use crate::error::{Error, Result};

/// Default cap on `M * K * N` for the event-driven simulation.
pub const DEFAULT_ORACLE_CAP: u64 = 1_000_000;

/// Used extents of one tile.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Tile {
    pub rows_used: usize,
    pub cols_used: usize,
    /// Last tile along K for its column block (outputs are final afterwards).
    pub last_k: bool,
}

impl Tile {
    pub fn compute_cycles(&self, n: usize) -> u64 {
        let (r, c) = (self.rows_used as u64, self.cols_used as u64);
        r + n as u64 + r + c - 2
    }
}

fn check_dims(m: usize, k: usize, n: usize, rows: usize, cols: usize) -> Result<()> {
    if m == 0 || k == 0 || n == 0 {
        return Err(Error::domain(format!("degenerate GEMM {m}x{k}x{n}")));
    }
    if rows == 0 || cols == 0 {
        return Err(Error::domain("array dimensions must be positive"));
    }
    Ok(())
}

fn extents(total: usize, size: usize) -> impl Iterator<Item = usize> {
    (0..total.div_ceil(size)).map(move |i| size.min(total - i * size))
}

/// Tiles in issue order: column blocks of `M` outermost, K-tiles inside.
pub fn tiles(m: usize, k: usize, rows: usize, cols: usize) -> impl Iterator<Item = Tile> {
    let k_tiles = k.div_ceil(rows);
    extents(m, cols).flat_map(move |cols_used| {
        extents(k, rows)
            .enumerate()
            .map(move |(i, rows_used)| Tile {
                rows_used,
                cols_used,
                last_k: i + 1 == k_tiles,
            })
    })
}

/// Closed form of the summed per-tile cost:
/// `2 K ceil(M/C) + M ceil(K/R) + ceil(K/R) ceil(M/C) (N - 2)`.
pub fn gemm_cycles_analytic(m: usize, k: usize, n: usize, rows: usize, cols: usize) -> Result<u64> {
    check_dims(m, k, n, rows, cols)?;
    let t_r = k.div_ceil(rows) as u64;
    let t_c = m.div_ceil(cols) as u64;
    let (m, k, n) = (m as u64, k as u64, n as u64);
    Ok(2 * k * t_c + m * t_r + t_r * t_c * n - 2 * t_r * t_c)
}

/// Result of the register-level simulation.
#[derive(Debug, Clone, PartialEq)]
pub struct OracleRun {
    pub cycles: u64,
    /// The `M x N` product computed by the simulated array.
    pub product: Array2<f64>,
}

#[derive(Clone, Copy)]
struct Tagged {
    vector: usize,
    value: f64,
}

/// Simulates `a (M x K) . b (K x N)` cycle by cycle.
pub fn simulate_array(
    a: &Array2<f64>,
    b: &Array2<f64>,
    rows: usize,
    cols: usize,
) -> Result<OracleRun> {
    let (m, k) = a.dim();
    let n = b.ncols();
    if b.nrows() != k {
        return Err(Error::domain("inner dimensions differ"));
    }
    check_dims(m, k, n, rows, cols)?;
    let mut product = Array2::<f64>::zeros((m, n));
    let mut cycles = 0u64;
    for m0 in (0..m).step_by(cols) {
        let cu = cols.min(m - m0);
        for k0 in (0..k).step_by(rows) {
            let ru = rows.min(k - k0);

            // Stationary load: rows shift down one PE per cycle.
            let mut weights: Vec<Vec<Option<f64>>> = vec![vec![None; cu]; ru];
            for step in 0..ru {
                for r in (1..ru).rev() {
                    weights[r] = weights[r - 1].clone();
                }
                let src = ru - 1 - step;
                weights[0] = (0..cu).map(|c| Some(a[[m0 + c, k0 + src]])).collect();
                cycles += 1;
            }
            let weights: Vec<Vec<f64>> = weights
                .into_iter()
                .map(|row| row.into_iter().map(|w| w.expect("loaded")).collect())
                .collect();

            // Streaming: operands move right, partial sums move down.
            let mut act: Vec<Vec<Option<Tagged>>> = vec![vec![None; cu]; ru];
            let mut psum: Vec<Vec<Option<Tagged>>> = vec![vec![None; cu]; ru];
            let mut drained = 0usize;
            let mut tick = 0usize;
            while drained < n * cu {
                let mut next_act = vec![vec![None; cu]; ru];
                let mut next_psum = vec![vec![None; cu]; ru];
                for r in 0..ru {
                    for c in 0..cu {
                        let incoming = if c == 0 {
                            tick.checked_sub(r).filter(|&v| v < n).map(|v| Tagged {
                                vector: v,
                                value: b[[k0 + r, v]],
                            })
                        } else {
                            act[r][c - 1]
                        };
                        next_act[r][c] = incoming;
                        let above = if r == 0 { None } else { psum[r - 1][c] };
                        next_psum[r][c] = match (incoming, above) {
                            (Some(x), Some(p)) => {
                                assert_eq!(x.vector, p.vector, "skew misaligned at PE ({r}, {c})");
                                Some(Tagged {
                                    vector: x.vector,
                                    value: p.value + weights[r][c] * x.value,
                                })
                            }
                            (Some(x), None) => {
                                assert_eq!(r, 0, "partial sum lost above PE ({r}, {c})");
                                Some(Tagged {
                                    vector: x.vector,
                                    value: weights[r][c] * x.value,
                                })
                            }
                            (None, None) => None,
                            (None, Some(_)) => panic!("operand missing at PE ({r}, {c})"),
                        };
                    }
                }
                act = next_act;
                psum = next_psum;
                for c in 0..cu {
                    if let Some(out) = psum[ru - 1][c] {
                        product[[m0 + c, out.vector]] += out.value;
                        drained += 1;
                    }
                }
                tick += 1;
                cycles += 1;
            }
        }
    }
    Ok(OracleRun { cycles, product })
}

fn operand(i: usize, j: usize, salt: usize) -> f64 {
    ((i * 7 + j * 13 + salt * 5) % 11) as f64 - 5.0
}

/// Event-driven cycle count for an `M x K x N` GEMM with deterministic
/// small-integer operands. Panics if the simulated array computes a wrong
/// product.
pub fn gemm_cycles_oracle(
    m: usize,
    k: usize,
    n: usize,
    rows: usize,
    cols: usize,
    cap: u64,
) -> Result<u64> {
    check_dims(m, k, n, rows, cols)?;
    let volume = (m as u64).saturating_mul(k as u64).saturating_mul(n as u64);
    if volume > cap {
        return Err(Error::OracleCap { volume, cap });
    }
    let a = Array2::from_shape_fn((m, k), |(i, j)| operand(i, j, 1));
    let b = Array2::from_shape_fn((k, n), |(i, j)| operand(i, j, 2));
    let run = simulate_array(&a, &b, rows, cols)?;
    assert_eq!(
        run.product,
        a.dot(&b),
        "systolic product differs from reference"
    );
    Ok(run.cycles)
}
