//! Per-SM statistic sheets and their deterministic reduction.
//!
//! Every SM owns exactly one [`StatSheet`]; during the parallel phase no
//! other thread can reach it, so counting never needs atomics or locks.
//! Set-typed stats follow the same pattern: each SM collects its own
//! `unique_lines` set and the reduction unions them in ascending SM order.
//! Memory-side counters ([`MemCounters`]) live in a single global block
//! because they are only ever touched in the sequential phases.
//!
//! `l1_hits`/`l1_misses` count *load* lookups. Stores are write-through and
//! always travel to L2, so they are tallied separately; a load that merges
//! into an outstanding miss counts as `l1_mshr_hits` and produces no packet.
//! This keeps the traffic identity exact:
//! `l2_hits + l2_misses == l1_misses + instructions_st`.

use std::collections::BTreeSet;
use std::fmt::Write as _;

use thiserror::Error;

/// Closed registry of per-SM counters. Rendering order is fixed by `name()`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(usize)]
pub enum Counter {
    ActiveCycles,
    InstructionsAlu,
    InstructionsBar,
    InstructionsExit,
    InstructionsLd,
    InstructionsSt,
    IssuedCtas,
    L1Hits,
    L1Misses,
    L1MshrHits,
    StallCyclesExec,
    StallCyclesMem,
}

pub const NUM_COUNTERS: usize = 12;

impl Counter {
    pub const ALL: [Counter; NUM_COUNTERS] = [
        Counter::ActiveCycles,
        Counter::InstructionsAlu,
        Counter::InstructionsBar,
        Counter::InstructionsExit,
        Counter::InstructionsLd,
        Counter::InstructionsSt,
        Counter::IssuedCtas,
        Counter::L1Hits,
        Counter::L1Misses,
        Counter::L1MshrHits,
        Counter::StallCyclesExec,
        Counter::StallCyclesMem,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Counter::ActiveCycles => "active_cycles",
            Counter::InstructionsAlu => "instructions_alu",
            Counter::InstructionsBar => "instructions_bar",
            Counter::InstructionsExit => "instructions_exit",
            Counter::InstructionsLd => "instructions_ld",
            Counter::InstructionsSt => "instructions_st",
            Counter::IssuedCtas => "issued_ctas",
            Counter::L1Hits => "l1_hits",
            Counter::L1Misses => "l1_misses",
            Counter::L1MshrHits => "l1_mshr_hits",
            Counter::StallCyclesExec => "stall_cycles_exec",
            Counter::StallCyclesMem => "stall_cycles_mem",
        }
    }
}

pub type CounterBlock = [u64; NUM_COUNTERS];

/// One SM's private accumulator. Counters are monotone within a kernel.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct StatSheet {
    pub counts: CounterBlock,
    pub unique_lines: BTreeSet<u64>,
}

impl StatSheet {
    pub fn new() -> Self {
        Self::default()
    }

    #[inline]
    pub fn bump(&mut self, c: Counter) {
        self.counts[c as usize] += 1;
    }

    #[inline]
    pub fn add(&mut self, c: Counter, n: u64) {
        self.counts[c as usize] += n;
    }

    #[inline]
    pub fn get(&self, c: Counter) -> u64 {
        self.counts[c as usize]
    }

    pub fn reset(&mut self) {
        self.counts = [0; NUM_COUNTERS];
        self.unique_lines.clear();
    }
}

/// Memory-side counters, updated only in sequential phases.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct MemCounters {
    pub l2_hits: u64,
    pub l2_misses: u64,
    pub l2_writebacks: u64,
    pub dram_accesses: u64,
}

impl MemCounters {
    pub fn accumulate(&mut self, other: &MemCounters) {
        self.l2_hits += other.l2_hits;
        self.l2_misses += other.l2_misses;
        self.l2_writebacks += other.l2_writebacks;
        self.dram_accesses += other.dram_accesses;
    }
}

/// Per-kernel slice of the final report.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct KernelSummary {
    pub name: String,
    pub cycles: u64,
    pub totals: CounterBlock,
    pub unique_line_count: u64,
    pub mem: MemCounters,
}

/// The reduced, GPU-wide report. Immutable once built.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct GpuStats {
    pub cycles: u64,
    pub totals: CounterBlock,
    pub per_sm: Vec<CounterBlock>,
    pub unique_line_count: u64,
    pub mem: MemCounters,
    pub kernels: Vec<KernelSummary>,
}

impl GpuStats {
    pub fn total(&self, c: Counter) -> u64 {
        self.totals[c as usize]
    }

    pub fn total_instructions(&self) -> u64 {
        self.total(Counter::InstructionsAlu)
            + self.total(Counter::InstructionsBar)
            + self.total(Counter::InstructionsExit)
            + self.total(Counter::InstructionsLd)
            + self.total(Counter::InstructionsSt)
    }

    pub fn ipc(&self) -> f64 {
        if self.cycles == 0 {
            0.0
        } else {
            self.total_instructions() as f64 / self.cycles as f64
        }
    }
}

/// Folds per-SM sheets into one report: counter totals by summation and
/// unique-line sets by union, both walked in ascending SM id order. The
/// result depends only on the sheets' contents, not on how or where they
/// were produced.
pub fn reduce(sheets: &[StatSheet], mem: &MemCounters, cycles: u64) -> GpuStats {
    let mut totals = [0u64; NUM_COUNTERS];
    let mut union = BTreeSet::new();
    let mut per_sm = Vec::with_capacity(sheets.len());
    for sheet in sheets {
        for (i, v) in sheet.counts.iter().enumerate() {
            totals[i] += v;
        }
        union.extend(sheet.unique_lines.iter().copied());
        per_sm.push(sheet.counts);
    }
    GpuStats {
        cycles,
        totals,
        per_sm,
        unique_line_count: union.len() as u64,
        mem: *mem,
        kernels: Vec::new(),
    }
}

/// Renders the canonical report: `key = value` lines, keys sorted
/// lexicographically, byte-identical for equal stats.
pub fn render_report(gs: &GpuStats) -> String {
    let mut entries: Vec<(String, String)> = Vec::new();
    entries.push(("cycles".into(), gs.cycles.to_string()));
    entries.push(("instructions".into(), gs.total_instructions().to_string()));
    entries.push(("ipc".into(), format!("{:.6}", gs.ipc())));
    entries.push(("unique_line_count".into(), gs.unique_line_count.to_string()));
    entries.push(("l2_hits".into(), gs.mem.l2_hits.to_string()));
    entries.push(("l2_misses".into(), gs.mem.l2_misses.to_string()));
    entries.push(("l2_writebacks".into(), gs.mem.l2_writebacks.to_string()));
    entries.push(("dram_accesses".into(), gs.mem.dram_accesses.to_string()));
    for c in Counter::ALL {
        entries.push((c.name().to_string(), gs.total(c).to_string()));
    }
    for (id, block) in gs.per_sm.iter().enumerate() {
        for c in Counter::ALL {
            entries.push((
                format!("sm.{id}.{}", c.name()),
                block[c as usize].to_string(),
            ));
        }
    }
    for (idx, k) in gs.kernels.iter().enumerate() {
        entries.push((format!("kernel.{idx}.name"), k.name.clone()));
        entries.push((format!("kernel.{idx}.cycles"), k.cycles.to_string()));
        entries.push((
            format!("kernel.{idx}.unique_line_count"),
            k.unique_line_count.to_string(),
        ));
        entries.push((format!("kernel.{idx}.l2_hits"), k.mem.l2_hits.to_string()));
        entries.push((
            format!("kernel.{idx}.l2_misses"),
            k.mem.l2_misses.to_string(),
        ));
        entries.push((
            format!("kernel.{idx}.l2_writebacks"),
            k.mem.l2_writebacks.to_string(),
        ));
        entries.push((
            format!("kernel.{idx}.dram_accesses"),
            k.mem.dram_accesses.to_string(),
        ));
        for c in Counter::ALL {
            entries.push((
                format!("kernel.{idx}.{}", c.name()),
                k.totals[c as usize].to_string(),
            ));
        }
    }
    entries.sort();
    let mut out = String::new();
    for (k, v) in entries {
        let _ = writeln!(out, "{k} = {v}");
    }
    out
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum ReportError {
    #[error("malformed report, line {line}: {msg}")]
    Malformed { line: usize, msg: String },
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum DiffOutcome {
    Equal,
    Differs {
        key: String,
        left: String,
        right: String,
    },
}

fn parse_report(text: &str) -> Result<Vec<(String, String)>, ReportError> {
    let mut out: Vec<(String, String)> = Vec::new();
    for (idx, raw) in text.lines().enumerate() {
        let line = idx + 1;
        if raw.trim().is_empty() {
            continue;
        }
        let (k, v) = raw
            .split_once(" = ")
            .ok_or_else(|| ReportError::Malformed {
                line,
                msg: "expected `key = value`".into(),
            })?;
        if let Some((prev, _)) = out.last() {
            if prev.as_str() >= k {
                return Err(ReportError::Malformed {
                    line,
                    msg: format!("key `{k}` out of canonical order"),
                });
            }
        }
        out.push((k.to_string(), v.to_string()));
    }
    Ok(out)
}

/// Compares two canonical reports, returning the first differing key.
pub fn diff_reports(a: &str, b: &str) -> Result<DiffOutcome, ReportError> {
    let left = parse_report(a)?;
    let right = parse_report(b)?;
    let mut li = left.iter();
    let mut ri = right.iter();
    let (mut l, mut r) = (li.next(), ri.next());
    loop {
        match (l, r) {
            (None, None) => return Ok(DiffOutcome::Equal),
            (Some((k, v)), None) => {
                return Ok(DiffOutcome::Differs {
                    key: k.clone(),
                    left: v.clone(),
                    right: "<missing>".into(),
                })
            }
            (None, Some((k, v))) => {
                return Ok(DiffOutcome::Differs {
                    key: k.clone(),
                    left: "<missing>".into(),
                    right: v.clone(),
                })
            }
            (Some((lk, lv)), Some((rk, rv))) => {
                if lk == rk {
                    if lv != rv {
                        return Ok(DiffOutcome::Differs {
                            key: lk.clone(),
                            left: lv.clone(),
                            right: rv.clone(),
                        });
                    }
                    l = li.next();
                    r = ri.next();
                } else if lk < rk {
                    return Ok(DiffOutcome::Differs {
                        key: lk.clone(),
                        left: lv.clone(),
                        right: "<missing>".into(),
                    });
                } else {
                    return Ok(DiffOutcome::Differs {
                        key: rk.clone(),
                        left: "<missing>".into(),
                        right: rv.clone(),
                    });
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn reduce_sums_counters() {
        let mut sheets = vec![StatSheet::new(), StatSheet::new(), StatSheet::new()];
        sheets[0].add(Counter::L1Hits, 5);
        sheets[1].add(Counter::L1Hits, 7);
        let gs = reduce(&sheets, &MemCounters::default(), 10);
        assert_eq!(gs.total(Counter::L1Hits), 12);
    }

    #[test]
    fn reduce_unions_line_sets() {
        let mut a = StatSheet::new();
        a.unique_lines.extend([0x100u64, 0x180]);
        let mut b = StatSheet::new();
        b.unique_lines.extend([0x180u64, 0x200]);
        let gs = reduce(&[a, b], &MemCounters::default(), 1);
        assert_eq!(gs.unique_line_count, 3);
    }

    #[test]
    fn reduce_of_empty_sheets_is_zero() {
        let sheets = vec![StatSheet::new(); 80];
        let gs = reduce(&sheets, &MemCounters::default(), 0);
        assert!(gs.totals.iter().all(|&v| v == 0));
        assert_eq!(gs.unique_line_count, 0);
    }

    #[test]
    fn reduce_ignores_sheet_production_order() {
        let mut a = StatSheet::new();
        a.add(Counter::InstructionsAlu, 3);
        a.unique_lines.insert(1);
        let mut b = StatSheet::new();
        b.add(Counter::InstructionsAlu, 9);
        b.unique_lines.insert(2);
        // Same multiset of sheets in the same id order must reduce equally no
        // matter which one was filled first; identity of the vec is all that
        // matters.
        let g1 = reduce(&[a.clone(), b.clone()], &MemCounters::default(), 5);
        let g2 = reduce(&[a, b], &MemCounters::default(), 5);
        assert_eq!(g1, g2);
    }

    #[test]
    fn render_is_deterministic_and_diffable() {
        let mut sheets = vec![StatSheet::new(); 3];
        sheets[2].add(Counter::InstructionsLd, 4);
        let gs = reduce(&sheets, &MemCounters::default(), 7);
        let a = render_report(&gs);
        let b = render_report(&gs);
        assert_eq!(a, b);
        assert_eq!(diff_reports(&a, &b).unwrap(), DiffOutcome::Equal);
    }

    #[test]
    fn empty_stats_render_parses() {
        let text = render_report(&GpuStats::default());
        assert_eq!(diff_reports(&text, &text).unwrap(), DiffOutcome::Equal);
    }

    #[test]
    fn diff_names_perturbed_counter() {
        let mut sheets = vec![StatSheet::new()];
        sheets[0].add(Counter::L1Hits, 3);
        let gs = reduce(&sheets, &MemCounters::default(), 2);
        let good = render_report(&gs);
        let bad = good.replace("l1_hits = 3", "l1_hits = 4");
        match diff_reports(&good, &bad).unwrap() {
            DiffOutcome::Differs { key, left, right } => {
                assert_eq!(key, "l1_hits");
                assert_eq!((left.as_str(), right.as_str()), ("3", "4"));
            }
            DiffOutcome::Equal => panic!("perturbation not detected"),
        }
    }

    #[test]
    fn reordered_report_is_malformed() {
        let text = "b = 1\na = 2\n";
        assert!(matches!(
            diff_reports(text, text),
            Err(ReportError::Malformed { .. })
        ));
    }
}
