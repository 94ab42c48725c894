//! Measurement harness: worker-count sweeps, speedup/efficiency tables,
//! static-vs-dynamic scheduler comparison and the wall-time/speedup
//! correlation.
//!
//! Runs execute one at a time so wall-clock samples do not contaminate each
//! other; only the engine run is timed (parsing and report rendering are
//! excluded). Every cell's rendered report is digested, and any digest
//! mismatch within one workload aborts the sweep: measurement must never
//! influence simulated results.

use std::time::Instant;

use thiserror::Error;

use crate::config::GpuConfig;
use crate::engine::{self, EngineError, PolicyKind, SchedulePolicy};
use crate::stats::render_report;
use crate::trace::TraceProgram;

#[derive(Debug, Clone)]
pub struct Workload {
    pub name: String,
    pub program: TraceProgram,
}

impl Workload {
    pub fn new(name: impl Into<String>, program: TraceProgram) -> Self {
        Self {
            name: name.into(),
            program,
        }
    }
}

/// All repeats of one `(workload, policy, workers)` cell.
#[derive(Debug, Clone)]
pub struct BenchRecord {
    pub workload: String,
    pub policy: PolicyKind,
    pub workers: usize,
    pub wall_times: Vec<f64>,
    pub stats_digest: u64,
}

impl BenchRecord {
    pub fn median_seconds(&self) -> f64 {
        median(&self.wall_times)
    }
}

#[derive(Debug, Error)]
pub enum BenchError {
    #[error("repeats must be at least 3, got {0}")]
    TooFewRepeats(usize),
    #[error("need at least {need} workloads, got {got}")]
    TooFewWorkloads { need: usize, got: usize },
    #[error(
        "determinism violation in workload `{workload}`: cell {policy}/{workers} \
         digest {got:016x} != baseline {expected:016x}, first differing key: {key}"
    )]
    DeterminismViolation {
        workload: String,
        policy: PolicyKind,
        workers: usize,
        expected: u64,
        got: u64,
        key: String,
    },
    #[error(transparent)]
    Engine(#[from] EngineError),
}

/// FNV-1a over the rendered report; stable and cheap.
pub fn digest(text: &str) -> u64 {
    let mut hash: u64 = 0xcbf2_9ce4_8422_2325;
    for byte in text.bytes() {
        hash ^= u64::from(byte);
        hash = hash.wrapping_mul(0x0000_0100_0000_01b3);
    }
    hash
}

pub fn median(xs: &[f64]) -> f64 {
    assert!(!xs.is_empty());
    let mut v = xs.to_vec();
    v.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let mid = v.len() / 2;
    if v.len() % 2 == 1 {
        v[mid]
    } else {
        (v[mid - 1] + v[mid]) / 2.0
    }
}

/// Runs every `(workload, policy, workers)` combination `repeats` times.
/// Sequential cells run once per workload regardless of the worker list
/// (their worker count is always 1).
pub fn sweep(
    cfg: &GpuConfig,
    workloads: &[Workload],
    worker_counts: &[usize],
    policies: &[PolicyKind],
    repeats: usize,
) -> Result<Vec<BenchRecord>, BenchError> {
    if repeats < 3 {
        return Err(BenchError::TooFewRepeats(repeats));
    }
    let mut records = Vec::new();
    for workload in workloads {
        let mut baseline: Option<(u64, String)> = None;
        for &policy in policies {
            let cells: Vec<usize> = if policy == PolicyKind::Sequential {
                vec![1]
            } else {
                worker_counts.to_vec()
            };
            for workers in cells {
                let sched = SchedulePolicy::new(policy, workers);
                let mut wall_times = Vec::with_capacity(repeats);
                let mut cell_digest = 0;
                for _ in 0..repeats {
                    let started = Instant::now();
                    let out = engine::run(cfg, &workload.program, &sched)?;
                    wall_times.push(started.elapsed().as_secs_f64());
                    let report = render_report(&out.stats);
                    cell_digest = digest(&report);
                    match &baseline {
                        None => baseline = Some((cell_digest, report)),
                        Some((expected, base_report)) => {
                            if cell_digest != *expected {
                                let key = match crate::stats::diff_reports(base_report, &report) {
                                    Ok(crate::stats::DiffOutcome::Differs { key, .. }) => key,
                                    _ => "<unknown>".into(),
                                };
                                return Err(BenchError::DeterminismViolation {
                                    workload: workload.name.clone(),
                                    policy,
                                    workers,
                                    expected: *expected,
                                    got: cell_digest,
                                    key,
                                });
                            }
                        }
                    }
                }
                records.push(BenchRecord {
                    workload: workload.name.clone(),
                    policy,
                    workers,
                    wall_times,
                    stats_digest: cell_digest,
                });
            }
        }
    }
    Ok(records)
}

#[derive(Debug, Clone, PartialEq)]
pub struct SpeedupRow {
    pub workload: String,
    pub policy: PolicyKind,
    pub workers: usize,
    pub speedup: f64,
    pub efficiency: f64,
}

/// Speedups against the workload's baseline: its Sequential cell when one
/// exists, otherwise the lowest-worker-count cell of the same policy.
#[derive(Debug, Clone, Default)]
pub struct SpeedupTable {
    pub rows: Vec<SpeedupRow>,
}

impl SpeedupTable {
    pub fn build(records: &[BenchRecord]) -> Self {
        let mut rows = Vec::new();
        for rec in records {
            if rec.policy == PolicyKind::Sequential {
                continue;
            }
            let Some(base) = baseline_seconds(records, &rec.workload, rec.policy) else {
                continue;
            };
            let speedup = base / rec.median_seconds();
            rows.push(SpeedupRow {
                workload: rec.workload.clone(),
                policy: rec.policy,
                workers: rec.workers,
                speedup,
                efficiency: speedup / rec.workers as f64,
            });
        }
        Self { rows }
    }

    pub fn get(&self, workload: &str, policy: PolicyKind, workers: usize) -> Option<&SpeedupRow> {
        self.rows
            .iter()
            .find(|r| r.workload == workload && r.policy == policy && r.workers == workers)
    }
}

fn baseline_seconds(records: &[BenchRecord], workload: &str, policy: PolicyKind) -> Option<f64> {
    if let Some(seq) = records
        .iter()
        .find(|r| r.workload == workload && r.policy == PolicyKind::Sequential)
    {
        return Some(seq.median_seconds());
    }
    records
        .iter()
        .filter(|r| r.workload == workload && r.policy == policy)
        .min_by_key(|r| r.workers)
        .map(BenchRecord::median_seconds)
}

/// Pearson correlation between per-workload sequential wall time and the
/// speedup reached at `workers` under `policy`. `None` when undefined (zero
/// variance on either axis).
pub fn correlate(
    records: &[BenchRecord],
    policy: PolicyKind,
    workers: usize,
) -> Result<Option<f64>, BenchError> {
    let table = SpeedupTable::build(records);
    let mut pairs: Vec<(f64, f64)> = Vec::new();
    for rec in records {
        if rec.policy != PolicyKind::Sequential {
            continue;
        }
        if let Some(row) = table.get(&rec.workload, policy, workers) {
            pairs.push((rec.median_seconds(), row.speedup));
        }
    }
    if pairs.len() < 3 {
        return Err(BenchError::TooFewWorkloads {
            need: 3,
            got: pairs.len(),
        });
    }
    Ok(pearson(&pairs))
}

pub fn pearson(pairs: &[(f64, f64)]) -> Option<f64> {
    let n = pairs.len() as f64;
    let mean_x = pairs.iter().map(|p| p.0).sum::<f64>() / n;
    let mean_y = pairs.iter().map(|p| p.1).sum::<f64>() / n;
    let mut cov = 0.0;
    let mut var_x = 0.0;
    let mut var_y = 0.0;
    for (x, y) in pairs {
        cov += (x - mean_x) * (y - mean_y);
        var_x += (x - mean_x).powi(2);
        var_y += (y - mean_y).powi(2);
    }
    if var_x == 0.0 || var_y == 0.0 {
        None
    } else {
        Some(cov / (var_x * var_y).sqrt())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScheduleCompareRow {
    pub workload: String,
    pub workers: usize,
    pub static_speedup: f64,
    pub dynamic_speedup: f64,
}

/// Static-vs-dynamic speedups per workload and worker count, measured
/// against a shared sequential baseline.
pub fn scheduler_compare(
    cfg: &GpuConfig,
    workloads: &[Workload],
    worker_counts: &[usize],
    repeats: usize,
) -> Result<Vec<ScheduleCompareRow>, BenchError> {
    let records = sweep(
        cfg,
        workloads,
        worker_counts,
        &[
            PolicyKind::Sequential,
            PolicyKind::Static,
            PolicyKind::Dynamic,
        ],
        repeats,
    )?;
    let table = SpeedupTable::build(&records);
    let mut rows = Vec::new();
    for workload in workloads {
        for &workers in worker_counts {
            let s = table.get(&workload.name, PolicyKind::Static, workers);
            let d = table.get(&workload.name, PolicyKind::Dynamic, workers);
            if let (Some(s), Some(d)) = (s, d) {
                rows.push(ScheduleCompareRow {
                    workload: workload.name.clone(),
                    workers,
                    static_speedup: s.speedup,
                    dynamic_speedup: d.speedup,
                });
            }
        }
    }
    Ok(rows)
}

/// Raw per-repeat CSV: `workload,policy,workers,repeat,wall_seconds,digest`.
pub fn render_records_csv(records: &[BenchRecord]) -> String {
    let mut out = String::from("workload,policy,workers,repeat,wall_seconds,digest\n");
    for rec in records {
        for (i, secs) in rec.wall_times.iter().enumerate() {
            out.push_str(&format!(
                "{},{},{},{},{:.6},{:016x}\n",
                rec.workload, rec.policy, rec.workers, i, secs, rec.stats_digest
            ));
        }
    }
    out
}

/// Summary CSV: `workload,policy,workers,speedup,efficiency`.
pub fn render_speedup_csv(table: &SpeedupTable) -> String {
    let mut out = String::from("workload,policy,workers,speedup,efficiency\n");
    for row in &table.rows {
        out.push_str(&format!(
            "{},{},{},{:.4},{:.4}\n",
            row.workload, row.policy, row.workers, row.speedup, row.efficiency
        ));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::trace::gen::{generate_workload, Preset};

    fn tiny_cfg() -> GpuConfig {
        GpuConfig {
            num_sms: 8,
            num_mem_partitions: 2,
            l2_total_size_bytes: 512 * 1024,
            ..GpuConfig::default()
        }
    }

    fn tiny_workload() -> Workload {
        let mut p = generate_workload(Preset::MemoryHeavy, 1, 1);
        p.kernels.truncate(1);
        p.kernels[0].ctas.truncate(24);
        Workload::new("mini", p)
    }

    #[test]
    fn median_of_odd_and_even() {
        assert_eq!(median(&[3.0, 1.0, 2.0]), 2.0);
        assert_eq!(median(&[4.0, 1.0, 2.0, 3.0]), 2.5);
    }

    #[test]
    fn pearson_perfectly_linear_pairs() {
        let pairs: Vec<(f64, f64)> = (0..5).map(|i| (i as f64, 2.0 + 3.0 * i as f64)).collect();
        let r = pearson(&pairs).unwrap();
        assert!((r - 1.0).abs() < 1e-12, "r = {r}");
    }

    #[test]
    fn pearson_zero_variance_is_undefined() {
        let pairs = vec![(1.0, 5.0), (2.0, 5.0), (3.0, 5.0)];
        assert_eq!(pearson(&pairs), None);
    }

    #[test]
    fn repeats_below_three_rejected() {
        let err = sweep(
            &tiny_cfg(),
            &[tiny_workload()],
            &[1],
            &[PolicyKind::Sequential],
            2,
        )
        .unwrap_err();
        assert!(matches!(err, BenchError::TooFewRepeats(2)));
    }

    #[test]
    fn digests_agree_across_cells_and_speedup_at_one_worker_is_unity() {
        let cfg = tiny_cfg();
        let records = sweep(
            &cfg,
            &[tiny_workload()],
            &[1],
            &[PolicyKind::Sequential, PolicyKind::Static],
            3,
        )
        .unwrap();
        let digests: Vec<u64> = records.iter().map(|r| r.stats_digest).collect();
        assert!(digests.windows(2).all(|w| w[0] == w[1]));
        // Expected rows: seq/1, static/1.
        assert_eq!(records.len(), 2);
        let table = SpeedupTable::build(&records);
        let row = table.get("mini", PolicyKind::Static, 1).unwrap();
        // Same work on one worker; the ratio can wobble with OS noise but
        // must stay near unity.
        assert!(row.speedup > 0.2 && row.speedup < 5.0, "{}", row.speedup);
        assert_eq!(row.efficiency, row.speedup);
    }

    #[test]
    fn csv_row_count_matches_cells_times_repeats() {
        let cfg = tiny_cfg();
        let records = sweep(&cfg, &[tiny_workload()], &[1, 2], &[PolicyKind::Static], 3).unwrap();
        let csv = render_records_csv(&records);
        // Header + 2 worker counts x 3 repeats.
        assert_eq!(csv.lines().count(), 1 + 2 * 3);
        assert!(csv.starts_with("workload,policy,workers,repeat,wall_seconds,digest"));
    }
}
