//! Delay, energy and EDP for one effort and for a low/high effort pair.

use std::collections::BTreeMap;
use std::io::Write;

use serde::{Deserialize, Serialize};

use super::cycles::tiles;
use super::hardware::{HardwareConfig, ACCUMULATOR_BITS, OPERAND_BYTES};
use super::workload::{lower_workload, ModuleLabel, WorkloadKind};
use crate::error::{Error, Result};
use crate::vit::{EffortConfig, ViTConfig};

/// Delay grouped into attention MACs, softmax, MLP and other PS work.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, Default)]
pub struct DelayBreakdown {
    /// QKV, QK^T, SMxV and Proj GEMMs.
    pub attention_mac_ms: f64,
    pub softmax_ms: f64,
    /// MLP1 and MLP2 GEMMs.
    pub mlp_ms: f64,
    /// Remaining PS work (GELU).
    pub ps_other_ms: f64,
}

impl DelayBreakdown {
    pub fn total(&self) -> f64 {
        self.attention_mac_ms + self.softmax_ms + self.mlp_ms + self.ps_other_ms
    }

    /// Share of the attention module (MACs plus softmax) in the total.
    pub fn attention_share(&self) -> f64 {
        (self.attention_mac_ms + self.softmax_ms) / self.total()
    }

    pub fn softmax_share(&self) -> f64 {
        self.softmax_ms / self.total()
    }

    fn add_scaled(&self, other: &DelayBreakdown, f: f64) -> DelayBreakdown {
        DelayBreakdown {
            attention_mac_ms: self.attention_mac_ms + f * other.attention_mac_ms,
            softmax_ms: self.softmax_ms + f * other.softmax_ms,
            mlp_ms: self.mlp_ms + f * other.mlp_ms,
            ps_other_ms: self.ps_other_ms + f * other.ps_other_ms,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ComponentEnergy {
    pub pe_array_j: f64,
    pub sram_j: f64,
    pub periphery_j: f64,
    pub ps_j: f64,
}

/// Energy figures derived from a delay under the constant-power model.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EnergyFigures {
    pub power_w: f64,
    pub energy_j: f64,
    pub edp_j_ms: f64,
    pub fps_per_watt: f64,
    pub components: ComponentEnergy,
}

impl EnergyFigures {
    pub fn from_delay(delay_ms: f64, hw: &HardwareConfig) -> Self {
        let p = hw.power_w;
        let delay_s = delay_ms / 1e3;
        let energy_j = p * delay_s;
        EnergyFigures {
            power_w: p,
            energy_j,
            edp_j_ms: energy_j * delay_ms,
            fps_per_watt: 1.0 / (delay_s * p),
            components: ComponentEnergy {
                pe_array_j: energy_j * hw.power_split_pe_array,
                sram_j: energy_j * hw.power_split_sram,
                periphery_j: energy_j * hw.power_split_periphery,
                ps_j: energy_j * hw.power_split_ps,
            },
        }
    }
}

/// Result of simulating one effort.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimReport {
    pub effort: usize,
    pub active: Vec<usize>,
    pub total_delay_ms: f64,
    pub pl_delay_ms: f64,
    pub ps_delay_ms: f64,
    /// PL cycles including memory stalls.
    pub pl_cycles: f64,
    /// PL cycles of the array alone.
    pub compute_cycles: u64,
    pub breakdown: DelayBreakdown,
    pub per_module_ms: BTreeMap<ModuleLabel, f64>,
    /// Entropy evaluation on the PS, reported separately and not part of the delay.
    pub entropy_overhead_ms: f64,
    #[serde(flatten)]
    pub energy: EnergyFigures,
}

impl SimReport {
    pub const CSV_HEADER: [&'static str; 14] = [
        "effort",
        "active",
        "total_delay_ms",
        "attention_mac_ms",
        "softmax_ms",
        "mlp_ms",
        "ps_other_ms",
        "energy_j",
        "edp_j_ms",
        "fps_per_watt",
        "pe_array_j",
        "sram_j",
        "periphery_j",
        "ps_j",
    ];

    pub fn csv_record(&self) -> Vec<String> {
        let active = self
            .active
            .iter()
            .map(|i| i.to_string())
            .collect::<Vec<_>>()
            .join(" ");
        let b = &self.breakdown;
        let c = &self.energy.components;
        vec![
            self.effort.to_string(),
            active,
            self.total_delay_ms.to_string(),
            b.attention_mac_ms.to_string(),
            b.softmax_ms.to_string(),
            b.mlp_ms.to_string(),
            b.ps_other_ms.to_string(),
            self.energy.energy_j.to_string(),
            self.energy.edp_j_ms.to_string(),
            self.energy.fps_per_watt.to_string(),
            c.pe_array_j.to_string(),
            c.sram_j.to_string(),
            c.periphery_j.to_string(),
            c.ps_j.to_string(),
        ]
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }
}

pub fn write_reports_csv<W: Write>(reports: &[SimReport], w: W) -> Result<()> {
    let io = |e: csv::Error| Error::Io(std::io::Error::other(e));
    let mut out = csv::Writer::from_writer(w);
    out.write_record(SimReport::CSV_HEADER).map_err(io)?;
    for r in reports {
        out.write_record(r.csv_record()).map_err(io)?;
    }
    out.flush()?;
    Ok(())
}

/// Checks that one tile fits its memories (double-buffered operands, 32-bit
/// accumulators).
fn check_capacity(rows_used: usize, cols_used: usize, hw: &HardwareConfig) -> Result<()> {
    let (r, c) = (rows_used as u64, cols_used as u64);
    let byte_bits = 8 * OPERAND_BYTES;
    let checks = [
        ("IPMEM", 2 * r * c * byte_bits, hw.ipmem_bits),
        ("WTMEM", 2 * r * byte_bits, hw.wtmem_bits),
        ("OPMEM", 2 * c * ACCUMULATOR_BITS, hw.opmem_bits),
        ("GB", (r * c + r) * byte_bits, hw.gb_bytes * 8),
    ];
    for (memory, required_bits, capacity_bits) in checks {
        if required_bits > capacity_bits {
            return Err(Error::Capacity {
                memory,
                required_bits,
                capacity_bits,
            });
        }
    }
    Ok(())
}

/// Timing of one GEMM including DRAM traffic.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GemmTiming {
    pub compute_cycles: u64,
    /// Sum over tiles of `max(compute, transfer)`.
    pub cycles: f64,
}

/// Per tile, DRAM moves the stationary tile, the streamed `R_u x N` slice and,
/// after the last K-tile of a column block, the `C_u x N` outputs. With double
/// buffering a tile costs `max(compute, bytes / bandwidth)`.
pub fn gemm_timing(m: usize, k: usize, n: usize, hw: &HardwareConfig) -> Result<GemmTiming> {
    if m == 0 || k == 0 || n == 0 {
        return Err(Error::domain(format!("degenerate GEMM {m}x{k}x{n}")));
    }
    let mut compute_cycles = 0u64;
    let mut cycles = 0.0;
    for tile in tiles(m, k, hw.array_rows, hw.array_cols) {
        check_capacity(tile.rows_used, tile.cols_used, hw)?;
        let compute = tile.compute_cycles(n);
        let (r, c, n) = (tile.rows_used as u64, tile.cols_used as u64, n as u64);
        let mut bytes = (r * c + r * n) * OPERAND_BYTES;
        if tile.last_k {
            bytes += c * n * OPERAND_BYTES;
        }
        let transfer = bytes as f64 / hw.dram_bandwidth_bytes_per_cycle;
        compute_cycles += compute;
        cycles += (compute as f64).max(transfer);
    }
    Ok(GemmTiming {
        compute_cycles,
        cycles,
    })
}

/// Delay of one effort: PL GEMM time plus serialized PS softmax and GELU time.
pub fn simulate(vit: &ViTConfig, effort: &EffortConfig, hw: &HardwareConfig) -> Result<SimReport> {
    vit.validate()?;
    hw.validate()?;
    effort.check_matches(vit)?;
    let cycle_ms = 1e3 / hw.clock_hz;
    let mut per_module_ms: BTreeMap<ModuleLabel, f64> = BTreeMap::new();
    let mut timings: BTreeMap<(usize, usize, usize), GemmTiming> = BTreeMap::new();
    let mut pl_cycles = 0.0;
    let mut compute_cycles = 0u64;
    let mut ps_ms = 0.0;
    for item in lower_workload(vit, effort) {
        let ms = match item.kind {
            WorkloadKind::Gemm { m, k, n, count } => {
                let timing = match timings.get(&(m, k, n)) {
                    Some(t) => *t,
                    None => {
                        let t = gemm_timing(m, k, n, hw)?;
                        timings.insert((m, k, n), t);
                        t
                    }
                };
                pl_cycles += timing.cycles * count as f64;
                compute_cycles += timing.compute_cycles * count as u64;
                timing.cycles * count as f64 * cycle_ms
            }
            WorkloadKind::Softmax { elements } => {
                let ms = elements as f64 * hw.ps_softmax_ns_per_element * 1e-6;
                ps_ms += ms;
                ms
            }
            WorkloadKind::Gelu { elements } => {
                let ms = elements as f64 * hw.ps_gelu_ns_per_element * 1e-6;
                ps_ms += ms;
                ms
            }
        };
        *per_module_ms.entry(item.module).or_default() += ms;
    }
    let get = |l: ModuleLabel| per_module_ms.get(&l).copied().unwrap_or(0.0);
    let breakdown = DelayBreakdown {
        attention_mac_ms: get(ModuleLabel::Qkv)
            + get(ModuleLabel::Qkt)
            + get(ModuleLabel::SmxV)
            + get(ModuleLabel::Proj),
        softmax_ms: get(ModuleLabel::Softmax),
        mlp_ms: get(ModuleLabel::Mlp1) + get(ModuleLabel::Mlp2),
        ps_other_ms: get(ModuleLabel::Gelu),
    };
    let total = breakdown.total();
    Ok(SimReport {
        effort: effort.effort(),
        active: effort.active().to_vec(),
        total_delay_ms: total,
        pl_delay_ms: pl_cycles * cycle_ms,
        ps_delay_ms: ps_ms,
        pl_cycles,
        compute_cycles,
        breakdown,
        per_module_ms,
        entropy_overhead_ms: hw.ps_entropy_ms_per_image,
        energy: EnergyFigures::from_delay(total, hw),
    })
}

fn check_fractions(f_low: f64, f_high: f64) -> Result<()> {
    for (name, f) in [("F_L", f_low), ("F_H", f_high)] {
        if !(0.0..=1.0).contains(&f) {
            return Err(Error::domain(format!("{name} = {f} outside [0, 1]")));
        }
    }
    if (f_low + f_high - 1.0).abs() > 1e-12 {
        return Err(Error::domain(format!(
            "F_L + F_H = {} instead of 1",
            f_low + f_high
        )));
    }
    Ok(())
}

/// Average delay of a low/high pair: every input pays `D_L`, high-routed
/// inputs additionally pay `D_H`, i.e. `D_L + F_H D_H`.
pub fn combined_delay(d_low: f64, d_high: f64, f_low: f64, f_high: f64) -> Result<f64> {
    check_fractions(f_low, f_high)?;
    Ok(d_low + f_high * d_high)
}

/// Delay spent on low-effort passes of inputs that are re-run at high effort.
pub fn recomputation_overhead(d_low: f64, f_high: f64) -> f64 {
    d_low * f_high
}

/// Delay and energy of a routed low/high pair.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CombinedReport {
    pub d_low_ms: f64,
    pub d_high_ms: f64,
    pub f_low: f64,
    pub f_high: f64,
    pub combined_delay_ms: f64,
    /// `F_L D_L`.
    pub low_share_ms: f64,
    /// `F_H D_H`.
    pub high_share_ms: f64,
    /// `F_H D_L`.
    pub recompute_ms: f64,
    pub breakdown: DelayBreakdown,
    #[serde(flatten)]
    pub energy: EnergyFigures,
    pub edp_low_j_ms: f64,
    pub edp_high_j_ms: f64,
    pub edp_recompute_j_ms: f64,
}

impl CombinedReport {
    pub fn new(
        low: &SimReport,
        high: &SimReport,
        f_low: f64,
        f_high: f64,
        hw: &HardwareConfig,
    ) -> Result<Self> {
        let d_low = low.total_delay_ms;
        let d_high = high.total_delay_ms;
        let combined = combined_delay(d_low, d_high, f_low, f_high)?;
        let energy = EnergyFigures::from_delay(combined, hw);
        let low_share = f_low * d_low;
        let high_share = f_high * d_high;
        let recompute = recomputation_overhead(d_low, f_high);
        // EDP = P D^2 split along D = F_L D_L + F_H D_H + F_H D_L.
        let per_ms = hw.power_w / 1e3 * combined;
        Ok(CombinedReport {
            d_low_ms: d_low,
            d_high_ms: d_high,
            f_low,
            f_high,
            combined_delay_ms: combined,
            low_share_ms: low_share,
            high_share_ms: high_share,
            recompute_ms: recompute,
            breakdown: low.breakdown.add_scaled(&high.breakdown, f_high),
            energy,
            edp_low_j_ms: per_ms * low_share,
            edp_high_j_ms: per_ms * high_share,
            edp_recompute_j_ms: per_ms * recompute,
        })
    }
}

/// Upper end of the bracket searched by [`calibrate_ps_latency`], in ns.
const CALIBRATION_MAX_NS: f64 = 1e9;

/// Finds the PS softmax latency per element at which the softmax takes
/// `target_share` of the all-active delay, by bisection to `1e-4` relative.
pub fn calibrate_ps_latency(
    vit: &ViTConfig,
    hw: &HardwareConfig,
    target_share: f64,
) -> Result<f64> {
    if !(target_share > 0.0 && target_share < 1.0) {
        return Err(Error::Calibration(format!(
            "target share {target_share} outside (0, 1)"
        )));
    }
    let effort = EffortConfig::all_active(vit.num_encoders);
    let share_at = |ns: f64| -> Result<f64> {
        let mut trial = hw.clone();
        trial.ps_softmax_ns_per_element = ns;
        Ok(simulate(vit, &effort, &trial)?.breakdown.softmax_share())
    };
    let mut hi = 1.0;
    while share_at(hi)? < target_share {
        hi *= 2.0;
        if hi > CALIBRATION_MAX_NS {
            return Err(Error::Calibration(format!(
                "softmax share {target_share} not reachable below {CALIBRATION_MAX_NS} ns per element"
            )));
        }
    }
    let mut lo = 0.0;
    while hi - lo > 1e-4 * hi {
        let mid = 0.5 * (lo + hi);
        if share_at(mid)? < target_share {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    Ok(0.5 * (lo + hi))
}

#[cfg(test)]
mod tests {
    use approx::assert_relative_eq;

    use super::*;
    use crate::pathfinder::stream_paths;
    use crate::sim::cycles::gemm_cycles_analytic;

    #[test]
    fn identities_hold() {
        let hw = HardwareConfig::default();
        let r = simulate(&ViTConfig::deit_s(), &EffortConfig::all_active(12), &hw).unwrap();
        assert_relative_eq!(r.breakdown.total(), r.total_delay_ms, max_relative = 1e-9);
        assert_relative_eq!(
            r.pl_delay_ms + r.ps_delay_ms,
            r.total_delay_ms,
            max_relative = 1e-9
        );
        let e = &r.energy;
        assert_relative_eq!(
            e.energy_j,
            7.92 * r.total_delay_ms / 1e3,
            max_relative = 1e-12
        );
        assert_relative_eq!(
            e.edp_j_ms,
            e.energy_j * r.total_delay_ms,
            max_relative = 1e-12
        );
        assert_relative_eq!(
            e.fps_per_watt,
            1.0 / (r.total_delay_ms / 1e3 * 7.92),
            max_relative = 1e-12
        );
        let c = &e.components;
        assert_relative_eq!(
            c.pe_array_j + c.sram_j + c.periphery_j + c.ps_j,
            e.energy_j,
            max_relative = 1e-12
        );
    }

    #[test]
    fn energy_identities_from_reference_delay() {
        let e = EnergyFigures::from_delay(59.66, &HardwareConfig::default());
        assert_relative_eq!(e.energy_j, 0.4725, max_relative = 1e-3);
        assert_relative_eq!(e.energy_j, 0.47, max_relative = 0.01);
        assert_relative_eq!(e.edp_j_ms, 28.19, max_relative = 0.01);
        assert_relative_eq!(e.fps_per_watt, 2.14, max_relative = 0.02);
    }

    #[test]
    fn compute_bound_by_default() {
        let hw = HardwareConfig::default();
        let t = gemm_timing(197, 384, 1152, &hw).unwrap();
        assert_eq!(
            t.compute_cycles,
            gemm_cycles_analytic(197, 384, 1152, 64, 36).unwrap()
        );
        assert_eq!(t.cycles, t.compute_cycles as f64);

        let slow = HardwareConfig {
            dram_bandwidth_bytes_per_cycle: 1.0,
            ..hw
        };
        assert!(gemm_timing(197, 384, 1152, &slow).unwrap().cycles > t.cycles);
    }

    #[test]
    fn capacity_errors_name_memory() {
        let hw = HardwareConfig {
            ipmem_bits: 1024,
            ..HardwareConfig::default()
        };
        let err = simulate(&ViTConfig::deit_s(), &EffortConfig::all_active(12), &hw).unwrap_err();
        assert!(
            matches!(
                err,
                Error::Capacity {
                    memory: "IPMEM",
                    ..
                }
            ),
            "{err}"
        );
        let hw = HardwareConfig {
            opmem_bits: 64,
            ..HardwareConfig::default()
        };
        assert!(matches!(
            simulate(&ViTConfig::toy(2), &EffortConfig::all_active(2), &hw),
            Err(Error::Capacity {
                memory: "OPMEM",
                ..
            })
        ));
    }

    #[test]
    fn combined_delay_examples() {
        assert_eq!(combined_delay(40.0, 60.0, 1.0, 0.0).unwrap(), 40.0);
        assert_eq!(combined_delay(40.0, 60.0, 0.0, 1.0).unwrap(), 100.0);
        assert_eq!(combined_delay(40.0, 60.0, 0.75, 0.25).unwrap(), 55.0);
        assert!(combined_delay(40.0, 60.0, 0.5, 0.6).is_err());
        assert!(combined_delay(40.0, 60.0, 1.5, -0.5).is_err());
    }

    #[test]
    fn combined_report_accounting() {
        let hw = HardwareConfig::default();
        let vit = ViTConfig::deit_s();
        let low = simulate(
            &vit,
            &EffortConfig::new(12, (1..=6).collect()).unwrap(),
            &hw,
        )
        .unwrap();
        let high = simulate(
            &vit,
            &EffortConfig::new(12, (1..=9).collect()).unwrap(),
            &hw,
        )
        .unwrap();
        let c = CombinedReport::new(&low, &high, 0.7, 0.3, &hw).unwrap();
        assert_relative_eq!(
            c.low_share_ms + c.high_share_ms + c.recompute_ms,
            c.combined_delay_ms,
            max_relative = 1e-12
        );
        assert_relative_eq!(
            c.edp_low_j_ms + c.edp_high_j_ms + c.edp_recompute_j_ms,
            c.energy.edp_j_ms,
            max_relative = 1e-9
        );
        assert_relative_eq!(
            c.breakdown.total(),
            c.combined_delay_ms,
            max_relative = 1e-9
        );
    }

    #[test]
    fn calibration_reproduces_target() {
        let hw = HardwareConfig::default();
        let vit = ViTConfig::deit_s();
        let ns = calibrate_ps_latency(&vit, &hw, 0.6).unwrap();
        let mut cal = hw.clone();
        cal.ps_softmax_ns_per_element = ns;
        let r = simulate(&vit, &EffortConfig::all_active(12), &cal).unwrap();
        assert!((r.breakdown.softmax_share() - 0.6).abs() < 1e-3);
        // Shipped default is this calibration rounded to 0.1 ns.
        assert!(
            (ns - super::super::hardware::DEFAULT_SOFTMAX_NS).abs() < 0.05,
            "{ns}"
        );

        let tiny = calibrate_ps_latency(&vit, &hw, 1e-9).unwrap();
        assert!(tiny < 1e-6);
        assert!(calibrate_ps_latency(&vit, &hw, 1.0).is_err());
        assert!(calibrate_ps_latency(&vit, &hw, 0.0).is_err());
        // No softmax work at all: every share is unreachable.
        let no_attn = ViTConfig::toy(1);
        let r = simulate(&no_attn, &EffortConfig::new(1, vec![]).unwrap(), &hw).unwrap();
        assert_eq!(r.breakdown.softmax_ms, 0.0);
    }

    #[test]
    fn skipping_strictly_reduces_delay_toy() {
        let hw = HardwareConfig::default();
        let vit = ViTConfig::toy(6);
        for effort in 0..=6 {
            for cfg in stream_paths(6, effort).unwrap() {
                let base = simulate(&vit, &cfg, &hw).unwrap().total_delay_ms;
                for &i in cfg.active() {
                    let fewer = simulate(&vit, &cfg.without(i).unwrap(), &hw).unwrap();
                    assert!(fewer.total_delay_ms < base);
                }
            }
        }
    }

    #[test]
    fn entropy_overhead_is_negligible_for_deit_s() {
        let hw = HardwareConfig::default();
        let r = simulate(&ViTConfig::deit_s(), &EffortConfig::all_active(12), &hw).unwrap();
        assert!(r.total_delay_ms >= 59.66, "{}", r.total_delay_ms);
        assert!(r.entropy_overhead_ms / r.total_delay_ms < 5e-4);
    }

    #[test]
    fn json_and_csv_emission() {
        let hw = HardwareConfig::default();
        let r = simulate(&ViTConfig::toy(2), &EffortConfig::all_active(2), &hw).unwrap();
        let json: serde_json::Value = serde_json::from_str(&r.to_json()).unwrap();
        assert_eq!(json["effort"], 2);
        assert!(json["edp_j_ms"].as_f64().unwrap() > 0.0);
        assert!(json["per_module_ms"]["SM"].as_f64().unwrap() > 0.0);
        let mut buf = Vec::new();
        write_reports_csv(&[r.clone(), r], &mut buf).unwrap();
        assert_eq!(String::from_utf8(buf).unwrap().lines().count(), 3);
    }
}
