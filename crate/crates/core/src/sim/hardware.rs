use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum Dataflow {
    /// The input tile stays in the PE array while weight columns stream through.
    #[default]
    InputStationary,
}

/// Systolic array, on-chip memories, PS-side latencies and power model.
///
/// The flat `key = value` file format uses exactly these field names; every
/// key is optional and falls back to the default platform below.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct HardwareConfig {
    pub array_rows: usize,
    pub array_cols: usize,
    pub clock_hz: f64,
    pub gb_bytes: u64,
    pub ipmem_bits: u64,
    pub wtmem_bits: u64,
    pub opmem_bits: u64,
    pub dram_bandwidth_bytes_per_cycle: f64,
    pub dataflow: Dataflow,
    pub ps_softmax_ns_per_element: f64,
    pub ps_gelu_ns_per_element: f64,
    pub ps_entropy_ms_per_image: f64,
    pub power_w: f64,
    pub power_split_pe_array: f64,
    pub power_split_sram: f64,
    pub power_split_periphery: f64,
    pub power_split_ps: f64,
}

impl Default for HardwareConfig {
    /// 64x36 input-stationary array at 125 MHz, 16 KB global buffer, 64 Kb
    /// scratchpads, 7.92 W. The softmax latency is the value that gives the
    /// softmax 60% of the all-active DeiT-S delay under this model.
    fn default() -> Self {
        HardwareConfig {
            array_rows: 64,
            array_cols: 36,
            clock_hz: 125e6,
            gb_bytes: 16 * 1024,
            ipmem_bits: 64 * 1024,
            wtmem_bits: 64 * 1024,
            opmem_bits: 64 * 1024,
            dram_bandwidth_bytes_per_cycle: 128.0,
            dataflow: Dataflow::InputStationary,
            ps_softmax_ns_per_element: DEFAULT_SOFTMAX_NS,
            ps_gelu_ns_per_element: 0.5,
            ps_entropy_ms_per_image: 0.03,
            power_w: 7.92,
            power_split_pe_array: 0.40,
            power_split_sram: 0.20,
            power_split_periphery: 0.15,
            power_split_ps: 0.25,
        }
    }
}

/// Softmax latency per element on the PS, in ns (see [`HardwareConfig::default`]).
pub const DEFAULT_SOFTMAX_NS: f64 = 13.7;

/// One array row is fed per operand byte; all operands are 8-bit.
pub const OPERAND_BYTES: u64 = 1;
/// Partial sums are held at 32 bits in OPMEM.
pub const ACCUMULATOR_BITS: u64 = 32;

impl HardwareConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(msg));
        if self.array_rows == 0 || self.array_cols == 0 {
            return bad("array_rows and array_cols must be positive".into());
        }
        let positive = [
            ("clock_hz", self.clock_hz),
            (
                "dram_bandwidth_bytes_per_cycle",
                self.dram_bandwidth_bytes_per_cycle,
            ),
            ("power_w", self.power_w),
        ];
        for (key, v) in positive {
            if !(v.is_finite() && v > 0.0) {
                return bad(format!("{key} must be positive, got {v}"));
            }
        }
        let non_negative = [
            ("ps_softmax_ns_per_element", self.ps_softmax_ns_per_element),
            ("ps_gelu_ns_per_element", self.ps_gelu_ns_per_element),
            ("ps_entropy_ms_per_image", self.ps_entropy_ms_per_image),
            ("power_split_pe_array", self.power_split_pe_array),
            ("power_split_sram", self.power_split_sram),
            ("power_split_periphery", self.power_split_periphery),
            ("power_split_ps", self.power_split_ps),
        ];
        for (key, v) in non_negative {
            if !(v.is_finite() && v >= 0.0) {
                return bad(format!("{key} must be finite and non-negative, got {v}"));
            }
        }
        let split = self.power_split_pe_array
            + self.power_split_sram
            + self.power_split_periphery
            + self.power_split_ps;
        if (split - 1.0).abs() > 1e-9 {
            return bad(format!("power split fractions sum to {split}, expected 1"));
        }
        Ok(())
    }

    pub fn from_toml_str(src: &str) -> Result<Self> {
        let hw: HardwareConfig =
            toml::from_str(src).map_err(|e| Error::Config(e.to_string().trim().to_string()))?;
        hw.validate()?;
        Ok(hw)
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("HardwareConfig serializes")
    }

    pub fn with_array(mut self, rows: usize, cols: usize) -> Self {
        self.array_rows = rows;
        self.array_cols = cols;
        self
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_validate() {
        let hw = HardwareConfig::default();
        hw.validate().unwrap();
        assert_eq!((hw.array_rows, hw.array_cols), (64, 36));
        assert_eq!(hw.clock_hz, 125e6);
        assert_eq!(hw.gb_bytes, 16384);
        assert_eq!(hw.ipmem_bits, 65536);
        assert_eq!(hw.power_w, 7.92);
        assert_eq!(hw.ps_entropy_ms_per_image, 0.03);
    }

    #[test]
    fn parse_partial_file() {
        let hw = HardwareConfig::from_toml_str(
            "# small array\narray_rows = 8\narray_cols = 8\ndataflow = \"input-stationary\"\n",
        )
        .unwrap();
        assert_eq!(hw.array_rows, 8);
        assert_eq!(hw.clock_hz, 125e6);
        let back = HardwareConfig::from_toml_str(&hw.to_toml_string()).unwrap();
        assert_eq!(back, hw);
    }

    #[test]
    fn parse_errors_name_key_or_line() {
        let err = HardwareConfig::from_toml_str("array_rows = 8\nclock_mhz = 3\n").unwrap_err();
        assert!(err.to_string().contains("clock_mhz"), "{err}");
        let err = HardwareConfig::from_toml_str("array_rows = 8\narray_cols = =\n").unwrap_err();
        assert!(err.to_string().contains("line 2"), "{err}");
        let err = HardwareConfig::from_toml_str("power_split_ps = 0.5\n").unwrap_err();
        assert!(err.to_string().contains("split"), "{err}");
        assert!(HardwareConfig::from_toml_str("dataflow = \"weight-stationary\"\n").is_err());
        assert!(HardwareConfig::from_toml_str("array_rows = 0\n").is_err());
    }
}
