//! Machine description for the simulated GPU.
//!
//! The default profile models an NVIDIA RTX 3080 Ti class machine: 80 SMs of
//! 48 warps split over four sub-cores, a 128 KiB L1D per SM, and 24 memory
//! partitions whose two sub-partitions each own a 128 KiB slice of the 6 MiB
//! L2. Cache associativity, line sizes and latencies are model defaults, not
//! vendor-published numbers.

use std::fmt::Write as _;

use thiserror::Error;

/// Full machine description. Immutable after parsing; every worker reads it
/// concurrently without synchronization.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GpuConfig {
    pub core_clock_mhz: u64,
    pub mem_clock_mhz: u64,
    pub num_sms: usize,
    pub warps_per_sm: usize,
    pub sub_cores_per_sm: usize,
    pub max_ctas_per_sm: usize,
    pub l1d_size_bytes: u64,
    pub l1d_assoc: usize,
    pub l1d_line_bytes: u64,
    pub l2_total_size_bytes: u64,
    pub l2_assoc: usize,
    pub l2_line_bytes: u64,
    pub num_mem_partitions: usize,
    pub sub_partitions_per_partition: usize,
    pub icnt_latency_cycles: u64,
    pub icnt_bw_per_dest_per_cycle: usize,
    pub l1_hit_latency: u64,
    pub l2_hit_latency: u64,
    pub dram_latency: u64,
    pub dram_queue_capacity: usize,
}

impl Default for GpuConfig {
    fn default() -> Self {
        Self {
            core_clock_mhz: 1365,
            mem_clock_mhz: 9500,
            num_sms: 80,
            warps_per_sm: 48,
            sub_cores_per_sm: 4,
            max_ctas_per_sm: 32,
            l1d_size_bytes: 128 * 1024,
            l1d_assoc: 4,
            l1d_line_bytes: 128,
            l2_total_size_bytes: 6 * 1024 * 1024,
            l2_assoc: 16,
            l2_line_bytes: 128,
            num_mem_partitions: 24,
            sub_partitions_per_partition: 2,
            icnt_latency_cycles: 8,
            icnt_bw_per_dest_per_cycle: 1,
            l1_hit_latency: 4,
            l2_hit_latency: 40,
            dram_latency: 120,
            dram_queue_capacity: 16,
        }
    }
}

/// Derived cache and core geometry, computed once from a validated config.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CacheGeometry {
    pub num_sub_partitions: usize,
    pub l2_slice_bytes: u64,
    pub l1d_sets: usize,
    pub l2_slice_sets: usize,
    pub warps_per_sub_core: usize,
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum ConfigError {
    #[error("line {line}: expected `key = value`")]
    Syntax { line: usize },
    #[error("line {line}: unknown config key `{key}`")]
    UnknownKey { line: usize, key: String },
    #[error("line {line}: invalid value `{value}` for key `{key}`")]
    BadValue {
        line: usize,
        key: String,
        value: String,
    },
    #[error("{0}")]
    Invariant(String),
}

impl GpuConfig {
    /// Parses a `key = value` configuration document. Keys that do not
    /// appear keep their default value, so an empty document yields the
    /// default machine profile.
    ///
    /// ```
    /// use gpusim_core::GpuConfig;
    ///
    /// let cfg = GpuConfig::parse("num_sms = 4\nl1d_size_bytes = 64 KiB\n").unwrap();
    /// assert_eq!(cfg.num_sms, 4);
    /// assert_eq!(cfg.l1d_size_bytes, 65536);
    /// assert_eq!(GpuConfig::parse(&cfg.render()).unwrap(), cfg);
    /// ```
    pub fn parse(text: &str) -> Result<Self, ConfigError> {
        let mut cfg = GpuConfig::default();
        for (idx, raw) in text.lines().enumerate() {
            let line = idx + 1;
            let stripped = match raw.find('#') {
                Some(pos) => &raw[..pos],
                None => raw,
            };
            let stripped = stripped.trim();
            if stripped.is_empty() {
                continue;
            }
            let (key, value) = stripped
                .split_once('=')
                .ok_or(ConfigError::Syntax { line })?;
            let key = key.trim();
            let value = value.trim();
            let parsed = parse_size(value).ok_or_else(|| ConfigError::BadValue {
                line,
                key: key.to_string(),
                value: value.to_string(),
            })?;
            cfg.set_key(key, parsed)
                .map_err(|()| ConfigError::UnknownKey {
                    line,
                    key: key.to_string(),
                })?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    fn set_key(&mut self, key: &str, value: u64) -> Result<(), ()> {
        match key {
            "core_clock_mhz" => self.core_clock_mhz = value,
            "mem_clock_mhz" => self.mem_clock_mhz = value,
            "num_sms" => self.num_sms = value as usize,
            "warps_per_sm" => self.warps_per_sm = value as usize,
            "sub_cores_per_sm" => self.sub_cores_per_sm = value as usize,
            "max_ctas_per_sm" => self.max_ctas_per_sm = value as usize,
            "l1d_size_bytes" => self.l1d_size_bytes = value,
            "l1d_assoc" => self.l1d_assoc = value as usize,
            "l1d_line_bytes" => self.l1d_line_bytes = value,
            "l2_total_size_bytes" => self.l2_total_size_bytes = value,
            "l2_assoc" => self.l2_assoc = value as usize,
            "l2_line_bytes" => self.l2_line_bytes = value,
            "num_mem_partitions" => self.num_mem_partitions = value as usize,
            "sub_partitions_per_partition" => self.sub_partitions_per_partition = value as usize,
            "icnt_latency_cycles" => self.icnt_latency_cycles = value,
            "icnt_bw_per_dest_per_cycle" => self.icnt_bw_per_dest_per_cycle = value as usize,
            "l1_hit_latency" => self.l1_hit_latency = value,
            "l2_hit_latency" => self.l2_hit_latency = value,
            "dram_latency" => self.dram_latency = value,
            "dram_queue_capacity" => self.dram_queue_capacity = value as usize,
            _ => return Err(()),
        }
        Ok(())
    }

    /// Renders the canonical text form; `parse(render(cfg)) == cfg`.
    pub fn render(&self) -> String {
        let mut out = String::new();
        for (key, value) in self.entries() {
            let _ = writeln!(out, "{key} = {value}");
        }
        out
    }

    fn entries(&self) -> [(&'static str, u64); 20] {
        [
            ("core_clock_mhz", self.core_clock_mhz),
            ("mem_clock_mhz", self.mem_clock_mhz),
            ("num_sms", self.num_sms as u64),
            ("warps_per_sm", self.warps_per_sm as u64),
            ("sub_cores_per_sm", self.sub_cores_per_sm as u64),
            ("max_ctas_per_sm", self.max_ctas_per_sm as u64),
            ("l1d_size_bytes", self.l1d_size_bytes),
            ("l1d_assoc", self.l1d_assoc as u64),
            ("l1d_line_bytes", self.l1d_line_bytes),
            ("l2_total_size_bytes", self.l2_total_size_bytes),
            ("l2_assoc", self.l2_assoc as u64),
            ("l2_line_bytes", self.l2_line_bytes),
            ("num_mem_partitions", self.num_mem_partitions as u64),
            (
                "sub_partitions_per_partition",
                self.sub_partitions_per_partition as u64,
            ),
            ("icnt_latency_cycles", self.icnt_latency_cycles),
            (
                "icnt_bw_per_dest_per_cycle",
                self.icnt_bw_per_dest_per_cycle as u64,
            ),
            ("l1_hit_latency", self.l1_hit_latency),
            ("l2_hit_latency", self.l2_hit_latency),
            ("dram_latency", self.dram_latency),
            ("dram_queue_capacity", self.dram_queue_capacity as u64),
        ]
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let positives: [(&str, u64); 19] = [
            ("core_clock_mhz", self.core_clock_mhz),
            ("mem_clock_mhz", self.mem_clock_mhz),
            ("num_sms", self.num_sms as u64),
            ("warps_per_sm", self.warps_per_sm as u64),
            ("sub_cores_per_sm", self.sub_cores_per_sm as u64),
            ("max_ctas_per_sm", self.max_ctas_per_sm as u64),
            ("l1d_size_bytes", self.l1d_size_bytes),
            ("l1d_assoc", self.l1d_assoc as u64),
            ("l1d_line_bytes", self.l1d_line_bytes),
            ("l2_total_size_bytes", self.l2_total_size_bytes),
            ("l2_assoc", self.l2_assoc as u64),
            ("l2_line_bytes", self.l2_line_bytes),
            ("num_mem_partitions", self.num_mem_partitions as u64),
            (
                "sub_partitions_per_partition",
                self.sub_partitions_per_partition as u64,
            ),
            (
                "icnt_bw_per_dest_per_cycle",
                self.icnt_bw_per_dest_per_cycle as u64,
            ),
            ("l1_hit_latency", self.l1_hit_latency),
            ("l2_hit_latency", self.l2_hit_latency),
            ("dram_latency", self.dram_latency),
            ("dram_queue_capacity", self.dram_queue_capacity as u64),
        ];
        for (name, value) in positives {
            if value == 0 {
                return Err(ConfigError::Invariant(format!("{name} must be positive")));
            }
        }
        if !self.l1d_line_bytes.is_power_of_two() {
            return Err(ConfigError::Invariant(
                "l1d_line_bytes must be a power of two".into(),
            ));
        }
        if !self.l2_line_bytes.is_power_of_two() {
            return Err(ConfigError::Invariant(
                "l2_line_bytes must be a power of two".into(),
            ));
        }
        if !self.warps_per_sm.is_multiple_of(self.sub_cores_per_sm) {
            return Err(ConfigError::Invariant(
                "warps_per_sm must be divisible by sub_cores_per_sm".into(),
            ));
        }
        let subs = (self.num_mem_partitions * self.sub_partitions_per_partition) as u64;
        if !self.l2_total_size_bytes.is_multiple_of(subs) {
            return Err(ConfigError::Invariant(
                "l2_total_size_bytes must be divisible by num_mem_partitions * sub_partitions_per_partition"
                    .into(),
            ));
        }
        let l1_way = self.l1d_assoc as u64 * self.l1d_line_bytes;
        if !self.l1d_size_bytes.is_multiple_of(l1_way) {
            return Err(ConfigError::Invariant(
                "l1d_size_bytes must be divisible by l1d_assoc * l1d_line_bytes".into(),
            ));
        }
        let slice = self.l2_total_size_bytes / subs;
        let l2_way = self.l2_assoc as u64 * self.l2_line_bytes;
        if !slice.is_multiple_of(l2_way) {
            return Err(ConfigError::Invariant(
                "l2 slice size must be divisible by l2_assoc * l2_line_bytes".into(),
            ));
        }
        Ok(())
    }

    /// Derived geometry. Panics only on an unvalidated config.
    pub fn geometry(&self) -> CacheGeometry {
        let num_sub_partitions = self.num_mem_partitions * self.sub_partitions_per_partition;
        let l2_slice_bytes = self.l2_total_size_bytes / num_sub_partitions as u64;
        CacheGeometry {
            num_sub_partitions,
            l2_slice_bytes,
            l1d_sets: (self.l1d_size_bytes / (self.l1d_assoc as u64 * self.l1d_line_bytes))
                as usize,
            l2_slice_sets: (l2_slice_bytes / (self.l2_assoc as u64 * self.l2_line_bytes)) as usize,
            warps_per_sub_core: self.warps_per_sm / self.sub_cores_per_sm,
        }
    }

    pub fn num_sub_partitions(&self) -> usize {
        self.num_mem_partitions * self.sub_partitions_per_partition
    }
}

/// Accepts plain integers plus `KiB`/`MiB`/`GiB` suffixes ("128 KiB", "6MiB").
fn parse_size(value: &str) -> Option<u64> {
    let value = value.trim();
    let (digits, mult) = if let Some(v) = value.strip_suffix("KiB") {
        (v, 1024)
    } else if let Some(v) = value.strip_suffix("MiB") {
        (v, 1024 * 1024)
    } else if let Some(v) = value.strip_suffix("GiB") {
        (v, 1024 * 1024 * 1024)
    } else {
        (value, 1)
    };
    let n: u64 = digits.trim().parse().ok()?;
    n.checked_mul(mult)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_profile_matches_machine_table() {
        let cfg = GpuConfig::parse("").unwrap();
        assert_eq!(cfg.num_sms, 80);
        assert_eq!(cfg.warps_per_sm, 48);
        assert_eq!(cfg.num_mem_partitions, 24);
        assert_eq!(cfg.l2_total_size_bytes, 6 * 1024 * 1024);
        assert_eq!(cfg.core_clock_mhz, 1365);
        assert_eq!(cfg.mem_clock_mhz, 9500);
        assert_eq!(cfg.l1d_size_bytes, 128 * 1024);
        assert_eq!(cfg, GpuConfig::default());
        cfg.validate().unwrap();
    }

    #[test]
    fn geometry_of_default_profile() {
        let g = GpuConfig::default().geometry();
        assert_eq!(g.num_sub_partitions, 48);
        // 6 MiB / 48 slices.
        assert_eq!(g.l2_slice_bytes, 131072);
        assert_eq!(g.warps_per_sub_core, 12);
        // 128 KiB / (4 ways * 128 B).
        assert_eq!(g.l1d_sets, 256);
        // 128 KiB slice / (16 ways * 128 B).
        assert_eq!(g.l2_slice_sets, 64);
    }

    #[test]
    fn geometry_small_machine() {
        let cfg = GpuConfig {
            num_mem_partitions: 1,
            sub_partitions_per_partition: 2,
            l2_total_size_bytes: 256 * 1024,
            ..GpuConfig::default()
        };
        assert_eq!(cfg.geometry().num_sub_partitions, 2);
    }

    #[test]
    fn zero_sm_count_rejected() {
        let err = GpuConfig::parse("num_sms = 0").unwrap_err();
        assert_eq!(err.to_string(), "num_sms must be positive".to_string());
    }

    #[test]
    fn warp_divisibility_rejected() {
        let err = GpuConfig::parse("warps_per_sm = 46\nsub_cores_per_sm = 4").unwrap_err();
        assert!(err
            .to_string()
            .contains("warps_per_sm must be divisible by sub_cores_per_sm"));
    }

    #[test]
    fn unknown_key_named_in_error() {
        let err = GpuConfig::parse("warp_count = 3").unwrap_err();
        assert!(matches!(err, ConfigError::UnknownKey { ref key, .. } if key == "warp_count"));
        assert!(err.to_string().contains("warp_count"));
    }

    #[test]
    fn size_suffixes_and_comments() {
        let cfg = GpuConfig::parse(
            "# comment line\nl1d_size_bytes = 128 KiB\nl2_total_size_bytes = 6MiB # trailing\n",
        )
        .unwrap();
        assert_eq!(cfg.l1d_size_bytes, 131072);
        assert_eq!(cfg.l2_total_size_bytes, 6291456);
    }

    #[test]
    fn render_parse_round_trip() {
        let cfg = GpuConfig {
            num_sms: 12,
            warps_per_sm: 16,
            num_mem_partitions: 3,
            l2_total_size_bytes: 768 * 1024,
            icnt_latency_cycles: 3,
            ..GpuConfig::default()
        };
        cfg.validate().unwrap();
        let round = GpuConfig::parse(&cfg.render()).unwrap();
        assert_eq!(round, cfg);
    }

    #[test]
    fn round_trip_across_generated_configs() {
        // Deterministic sweep over a grid of valid machines.
        for sms in [1usize, 2, 7, 80] {
            for parts in [1usize, 2, 24] {
                let cfg = GpuConfig {
                    num_sms: sms,
                    num_mem_partitions: parts,
                    l2_total_size_bytes: (parts * 2) as u64 * 128 * 1024,
                    ..GpuConfig::default()
                };
                cfg.validate().unwrap();
                assert_eq!(GpuConfig::parse(&cfg.render()).unwrap(), cfg);
            }
        }
    }
}
