//! Top-level simulation driver.
//!
//! Each cycle runs a fixed sequence of phases: deliver interconnect traffic
//! to the SMs, collect memory responses, cycle DRAM, feed and cycle the L2
//! slices, schedule freshly emitted SM requests into the interconnect, cycle
//! every SM, and finally issue pending CTAs round-robin. Only the SM loop is
//! ever parallel; everything else is single-threaded by construction.
//!
//! SM emissions are buffered in per-SM outboxes during the parallel phase
//! and drained by the *next* cycle's sequential scheduling phase in
//! ascending SM order. That mailbox hand-off is what makes simulated results
//! a pure function of `(config, program)` — independent of the schedule
//! policy, the worker count, and any wall-clock timing.

use std::collections::VecDeque;
use std::time::{Duration, Instant};

use thiserror::Error;

use crate::config::{ConfigError, GpuConfig};
use crate::icnt::{self, IcntState};
use crate::memsys::{AddressMap, MemPartition};
use crate::pool::{LoopSchedule, WorkerPool};
use crate::smcore::SmState;
use crate::stats::{self, GpuStats, KernelSummary, MemCounters, StatSheet};
use crate::trace::{TraceError, TraceProgram};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum PolicyKind {
    Sequential,
    Static,
    Dynamic,
}

impl PolicyKind {
    pub fn name(self) -> &'static str {
        match self {
            PolicyKind::Sequential => "seq",
            PolicyKind::Static => "static",
            PolicyKind::Dynamic => "dynamic",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "seq" | "sequential" => Some(PolicyKind::Sequential),
            "static" => Some(PolicyKind::Static),
            "dynamic" => Some(PolicyKind::Dynamic),
            _ => None,
        }
    }
}

impl std::fmt::Display for PolicyKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

/// How the per-SM loop is dispatched. Results never depend on it.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SchedulePolicy {
    pub kind: PolicyKind,
    pub workers: usize,
    pub chunk: usize,
}

impl SchedulePolicy {
    pub fn sequential() -> Self {
        Self {
            kind: PolicyKind::Sequential,
            workers: 1,
            chunk: 1,
        }
    }

    pub fn new(kind: PolicyKind, workers: usize) -> Self {
        Self {
            kind,
            workers,
            chunk: 1,
        }
    }

    fn validate(&self) -> Result<(), EngineError> {
        if self.workers == 0 {
            return Err(EngineError::Policy("workers must be positive".into()));
        }
        if self.chunk == 0 {
            return Err(EngineError::Policy("chunk must be positive".into()));
        }
        Ok(())
    }
}

impl std::fmt::Display for SchedulePolicy {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}", self.kind)
    }
}

#[derive(Debug, Error)]
pub enum EngineError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Trace(#[from] TraceError),
    #[error("invalid schedule policy: {0}")]
    Policy(String),
}

/// Wall-time spent per phase. Only ever reported, never fed back into the
/// simulation.
#[derive(Debug, Clone, Copy, Default)]
pub struct PhaseProfile {
    pub icnt_to_sm: Duration,
    pub mem_to_icnt: Duration,
    pub dram: Duration,
    pub l2: Duration,
    pub icnt_schedule: Duration,
    pub sm: Duration,
    pub issue: Duration,
    pub total: Duration,
}

impl PhaseProfile {
    pub fn named(&self) -> [(&'static str, Duration); 7] {
        [
            ("icnt_to_sm", self.icnt_to_sm),
            ("mem_to_icnt", self.mem_to_icnt),
            ("dram", self.dram),
            ("l2", self.l2),
            ("icnt_schedule", self.icnt_schedule),
            ("sm_cycles", self.sm),
            ("issue", self.issue),
        ]
    }

    /// Per-phase shares of total wall time, including an `other` bucket for
    /// unattributed time; they sum to 1.0. Empty when nothing was measured.
    pub fn shares(&self) -> Vec<(&'static str, f64)> {
        if self.total.is_zero() {
            return Vec::new();
        }
        let total = self.total.as_secs_f64();
        let mut out: Vec<(&'static str, f64)> = self
            .named()
            .iter()
            .map(|&(name, d)| (name, d.as_secs_f64() / total))
            .collect();
        let named: f64 = out.iter().map(|(_, s)| s).sum();
        out.push(("other", (1.0 - named).max(0.0)));
        out
    }

    pub fn sm_share(&self) -> f64 {
        if self.total.is_zero() {
            0.0
        } else {
            self.sm.as_secs_f64() / self.total.as_secs_f64()
        }
    }
}

/// One CTA placement decision, in issue order.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CtaPlacement {
    pub kernel: u32,
    pub cta: u32,
    pub sm: u32,
    pub cycle: u64,
}

#[derive(Debug)]
pub struct EngineState {
    pub cfg: GpuConfig,
    pub sms: Vec<SmState>,
    pub icnt: IcntState,
    pub partitions: Vec<MemPartition>,
    pub mem_stats: MemCounters,
    pub gpu_cycle: u64,
    pub pending_ctas: VecDeque<u32>,
    pub issue_pointer: usize,
    pub current_kernel: usize,
    pub issue_log: Vec<CtaPlacement>,
    map: AddressMap,
}

impl EngineState {
    pub fn new(cfg: &GpuConfig) -> Self {
        Self {
            sms: (0..cfg.num_sms)
                .map(|id| SmState::new(id as u32, cfg))
                .collect(),
            icnt: IcntState::new(
                cfg.num_sms,
                cfg.num_sub_partitions(),
                cfg.icnt_latency_cycles,
                cfg.icnt_bw_per_dest_per_cycle,
            ),
            partitions: (0..cfg.num_mem_partitions)
                .map(|id| MemPartition::new(id, cfg))
                .collect(),
            mem_stats: MemCounters::default(),
            gpu_cycle: 0,
            pending_ctas: VecDeque::new(),
            issue_pointer: 0,
            current_kernel: 0,
            issue_log: Vec::new(),
            map: AddressMap::from_config(cfg),
            cfg: cfg.clone(),
        }
    }

    fn begin_kernel(&mut self, kernel_idx: usize, program: &TraceProgram) {
        self.current_kernel = kernel_idx;
        self.pending_ctas = (0..program.kernels[kernel_idx].ctas.len() as u32).collect();
        // Distribution restarts at SM 0 for every kernel; a kernel with two
        // CTAs only ever activates SMs 0 and 1 no matter how many kernels
        // the program launches.
        self.issue_pointer = 0;
    }

    /// A kernel is complete once no CTA is pending, every SM is idle and no
    /// packet is anywhere in flight.
    pub fn kernel_complete(&self) -> bool {
        self.pending_ctas.is_empty() && self.is_drained()
    }

    /// True iff no packet is in flight and every SM is idle.
    pub fn is_drained(&self) -> bool {
        self.sms.iter().all(SmState::is_idle)
            && self.icnt.is_drained()
            && self.partitions.iter().all(MemPartition::is_drained)
    }

    /// Executes one GPU cycle: the sequential interconnect/memory phases,
    /// the (possibly parallel) SM phase, the cycle increment and CTA issue.
    pub fn cycle(
        &mut self,
        program: &TraceProgram,
        policy: &SchedulePolicy,
        pool: &mut WorkerPool,
        prof: &mut PhaseProfile,
    ) {
        let cycle = self.gpu_cycle;

        let t0 = Instant::now();
        icnt::icnt_to_sm(&mut self.icnt, &mut self.sms, cycle);
        let t1 = Instant::now();
        icnt::mem_to_icnt(&mut self.icnt, &mut self.partitions, cycle);
        let t2 = Instant::now();
        for p in &mut self.partitions {
            p.dram_cycle(self.cfg.dram_latency, &mut self.mem_stats);
        }
        let t3 = Instant::now();
        for p in &mut self.partitions {
            let MemPartition {
                subs, dram_queue, ..
            } = p;
            for sub in subs.iter_mut() {
                self.icnt.deliver_to_sub(sub, cycle);
                sub.cache_cycle(
                    dram_queue,
                    self.cfg.dram_queue_capacity,
                    cycle,
                    self.cfg.l2_hit_latency,
                    &mut self.mem_stats,
                );
            }
        }
        let t4 = Instant::now();
        icnt::icnt_schedule(&mut self.icnt, &mut self.sms, &self.map, cycle);
        let t5 = Instant::now();

        let cfg = &self.cfg;
        parallel_for_sms(pool, policy, &mut self.sms, |sm| sm.cycle(program, cfg));
        let t6 = Instant::now();

        self.gpu_cycle += 1;
        self.issue_blocks_to_sms(program);
        let t7 = Instant::now();

        prof.icnt_to_sm += t1 - t0;
        prof.mem_to_icnt += t2 - t1;
        prof.dram += t3 - t2;
        prof.l2 += t4 - t3;
        prof.icnt_schedule += t5 - t4;
        prof.sm += t6 - t5;
        prof.issue += t7 - t6;
    }

    /// Round-robin CTA issue: probe SMs starting at the issue pointer,
    /// wrapping once; the first SM that accepts the head CTA takes it and
    /// the pointer moves just past that SM. A full fruitless wrap ends the
    /// phase for this cycle.
    fn issue_blocks_to_sms(&mut self, program: &TraceProgram) {
        let kernel = &program.kernels[self.current_kernel];
        while let Some(&cta_idx) = self.pending_ctas.front() {
            let cta = &kernel.ctas[cta_idx as usize];
            let n = self.sms.len();
            let mut accepted = false;
            for probe in 0..n {
                let sm = (self.issue_pointer + probe) % n;
                if self.sms[sm].accept_cta(cta, self.current_kernel as u32) {
                    self.pending_ctas.pop_front();
                    self.issue_pointer = (sm + 1) % n;
                    self.issue_log.push(CtaPlacement {
                        kernel: self.current_kernel as u32,
                        cta: cta_idx,
                        sm: sm as u32,
                        cycle: self.gpu_cycle,
                    });
                    accepted = true;
                    break;
                }
            }
            if !accepted {
                break;
            }
        }
    }
}

/// Dispatches the SM loop under the given policy. Every SM is cycled exactly
/// once per call; the function returns only after all of them completed.
pub fn parallel_for_sms<F>(
    pool: &mut WorkerPool,
    policy: &SchedulePolicy,
    sms: &mut [SmState],
    body: F,
) where
    F: Fn(&mut SmState) + Sync,
{
    match policy.kind {
        PolicyKind::Sequential => {
            for sm in sms.iter_mut() {
                body(sm);
            }
        }
        PolicyKind::Static | PolicyKind::Dynamic => {
            struct SmsPtr(*mut SmState);
            // SAFETY: both schedules hand out each index exactly once per
            // call, so workers never alias an SmState.
            unsafe impl Sync for SmsPtr {}
            impl SmsPtr {
                fn at(&self, i: usize) -> *mut SmState {
                    self.0.wrapping_add(i)
                }
            }
            let base = SmsPtr(sms.as_mut_ptr());
            let n = sms.len();
            let schedule = match policy.kind {
                PolicyKind::Static => LoopSchedule::Static,
                _ => LoopSchedule::Dynamic,
            };
            let inner = move |i: usize| {
                // SAFETY: i < n is in bounds and this worker is the only
                // one handed index i this phase.
                let sm = unsafe { &mut *base.at(i) };
                body(sm);
            };
            pool.parallel_for(n, schedule, policy.chunk, &inner);
        }
    }
}

/// Everything a run produces besides its exit status.
#[derive(Debug)]
pub struct RunOutput {
    pub stats: GpuStats,
    pub profile: PhaseProfile,
    pub issue_log: Vec<CtaPlacement>,
}

/// Runs the program to completion. Simulated results are a pure function of
/// `(cfg, program)`; `policy` affects wall time only.
pub fn run(
    cfg: &GpuConfig,
    program: &TraceProgram,
    policy: &SchedulePolicy,
) -> Result<RunOutput, EngineError> {
    run_observed(cfg, program, policy, &mut |_| {})
}

/// Like [`run`], with a read-only observer invoked after every cycle.
pub fn run_observed(
    cfg: &GpuConfig,
    program: &TraceProgram,
    policy: &SchedulePolicy,
    observer: &mut dyn FnMut(&EngineState),
) -> Result<RunOutput, EngineError> {
    cfg.validate()?;
    policy.validate()?;
    program.validate_against(cfg)?;

    let started = Instant::now();
    let mut prof = PhaseProfile::default();
    let mut st = EngineState::new(cfg);
    let pool_workers = match policy.kind {
        PolicyKind::Sequential => 1,
        _ => policy.workers,
    };
    let mut pool = WorkerPool::new(pool_workers);

    let mut acc = RunAccumulator::new(cfg.num_sms);
    for kernel_idx in 0..program.kernels.len() {
        st.begin_kernel(kernel_idx, program);
        let kernel_start = st.gpu_cycle;
        while !st.kernel_complete() {
            st.cycle(program, policy, &mut pool, &mut prof);
            observer(&st);
        }
        let kernel_cycles = st.gpu_cycle - kernel_start;
        acc.absorb_kernel(
            &program.kernels[kernel_idx].name,
            kernel_cycles,
            &mut st.sms,
            &mut st.mem_stats,
        );
    }

    if st.gpu_cycle > 0 {
        prof.total = started.elapsed();
    }
    Ok(RunOutput {
        stats: acc.finish(st.gpu_cycle),
        profile: prof,
        issue_log: st.issue_log,
    })
}

/// Accumulates per-kernel reductions into the run-level report. Sheets and
/// memory counters reset at every kernel boundary so each kernel reduces on
/// its own, mirroring how reports are gathered after each kernel finishes.
struct RunAccumulator {
    per_sm: Vec<[u64; stats::NUM_COUNTERS]>,
    global_lines: std::collections::BTreeSet<u64>,
    totals: [u64; stats::NUM_COUNTERS],
    mem: MemCounters,
    kernels: Vec<KernelSummary>,
}

impl RunAccumulator {
    fn new(num_sms: usize) -> Self {
        Self {
            per_sm: vec![[0; stats::NUM_COUNTERS]; num_sms],
            global_lines: Default::default(),
            totals: [0; stats::NUM_COUNTERS],
            mem: MemCounters::default(),
            kernels: Vec::new(),
        }
    }

    fn absorb_kernel(
        &mut self,
        name: &str,
        cycles: u64,
        sms: &mut [SmState],
        mem: &mut MemCounters,
    ) {
        let sheets: Vec<StatSheet> = sms.iter().map(|sm| sm.stats.clone()).collect();
        let reduced = stats::reduce(&sheets, mem, cycles);
        self.kernels.push(KernelSummary {
            name: name.to_string(),
            cycles,
            totals: reduced.totals,
            unique_line_count: reduced.unique_line_count,
            mem: *mem,
        });
        for (i, v) in reduced.totals.iter().enumerate() {
            self.totals[i] += v;
        }
        for (acc, sheet) in self.per_sm.iter_mut().zip(&sheets) {
            for (i, v) in sheet.counts.iter().enumerate() {
                acc[i] += v;
            }
            self.global_lines.extend(sheet.unique_lines.iter().copied());
        }
        self.mem.accumulate(mem);
        *mem = MemCounters::default();
        for sm in sms.iter_mut() {
            sm.stats.reset();
        }
    }

    fn finish(self, cycles: u64) -> GpuStats {
        GpuStats {
            cycles,
            totals: self.totals,
            per_sm: self.per_sm,
            unique_line_count: self.global_lines.len() as u64,
            mem: self.mem,
            kernels: self.kernels,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::stats::{render_report, Counter};
    use crate::trace::gen::{generate_workload, Preset};
    use crate::trace::parse_trace;

    fn small_cfg() -> GpuConfig {
        GpuConfig {
            num_sms: 8,
            num_mem_partitions: 2,
            l2_total_size_bytes: 512 * 1024,
            ..GpuConfig::default()
        }
    }

    /// A slice of the memory-heavy preset sized for a 2-partition machine;
    /// the full grid is DRAM-bound for seconds.
    fn small_memory_program(seed: u64) -> TraceProgram {
        let mut p = generate_workload(Preset::MemoryHeavy, seed, 1);
        p.kernels.truncate(1);
        p.kernels[0].ctas.truncate(24);
        p
    }

    #[test]
    fn minimal_program_counts() {
        let program = parse_trace("KERNEL k\nCTA 0\nWARP 0\nALU 1\nEXIT\n").unwrap();
        let out = run(&small_cfg(), &program, &SchedulePolicy::sequential()).unwrap();
        assert_eq!(out.stats.total(Counter::InstructionsAlu), 1);
        assert_eq!(out.stats.total(Counter::InstructionsExit), 1);
        assert!(out.stats.cycles >= 1);
        assert_eq!(out.stats.total_instructions(), 2);
    }

    #[test]
    fn empty_program_is_a_zero_cycle_run() {
        let out = run(
            &small_cfg(),
            &TraceProgram::default(),
            &SchedulePolicy::sequential(),
        )
        .unwrap();
        assert_eq!(out.stats.cycles, 0);
        assert!(out.profile.shares().is_empty());
        assert_eq!(out.profile.sm_share(), 0.0);
    }

    #[test]
    fn gpu_cycle_advances_even_with_idle_sms() {
        // One kernel whose single CTA finishes quickly: the tail cycles with
        // zero active SMs still advance gpu_cycle (packets may be in
        // flight).
        let program = parse_trace("KERNEL k\nCTA 0\nWARP 0\nST 0x0 4\nEXIT\n").unwrap();
        let out = run(&small_cfg(), &program, &SchedulePolicy::sequential()).unwrap();
        // The store must drain through icnt + L2 + DRAM long after the warp
        // exited.
        assert!(out.stats.cycles > 10);
        assert_eq!(out.stats.mem.l2_misses, 1);
    }

    #[test]
    fn round_robin_issue_lands_on_low_sms_first() {
        let mut text = String::from("KERNEL k\n");
        for c in 0..5 {
            text.push_str(&format!("CTA {c}\nWARP 0\nALU 1\nEXIT\n"));
        }
        let program = parse_trace(&text).unwrap();
        let out = run(&small_cfg(), &program, &SchedulePolicy::sequential()).unwrap();
        let placed: Vec<(u32, u32)> = out.issue_log.iter().map(|p| (p.cta, p.sm)).collect();
        assert_eq!(placed, vec![(0, 0), (1, 1), (2, 2), (3, 3), (4, 4)]);
    }

    #[test]
    fn two_cta_workload_activates_exactly_two_sms() {
        let cfg = GpuConfig::default();
        let program = generate_workload(Preset::TwoCta, 1, 1);
        let out = run(&cfg, &program, &SchedulePolicy::sequential()).unwrap();
        let active = out
            .stats
            .per_sm
            .iter()
            .filter(|b| b[Counter::ActiveCycles as usize] > 0)
            .count();
        assert_eq!(active, 2, "only two SMs may ever be active");
        assert_eq!(out.issue_log.iter().map(|p| p.sm).max(), Some(1));
    }

    #[test]
    fn load_end_to_end_latency_walk() {
        // Single warp: one cold load, then EXIT.
        //
        // cycle 0: CTA issued at end of cycle.
        // cycle 1: warp issues the load; packet parked in the SM outbox.
        // cycle 2: icnt_schedule injects it (inject_cycle = 2).
        // cycle 10: ripe after 8 icnt cycles; L2 probes and misses.
        // cycle 11: DRAM pops it into service.
        // cycle 131: fill returns (120 DRAM cycles), response queued +40.
        // cycle 171: response leaves the L2 outbox toward the SM.
        // cycle 179: ripe after 8 more icnt cycles; delivered and consumed;
        //            the warp wakes and EXITs in the same SM phase.
        // => 180 cycles total.
        let cfg = GpuConfig::default();
        let program = parse_trace("KERNEL k\nCTA 0\nWARP 0\nLD 0x0 4\nEXIT\n").unwrap();
        let mut first_l2_access = None;
        let out = run_observed(
            &cfg,
            &program,
            &SchedulePolicy::sequential(),
            &mut |st: &EngineState| {
                if first_l2_access.is_none() && st.mem_stats.l2_hits + st.mem_stats.l2_misses > 0 {
                    // gpu_cycle was already incremented this cycle.
                    first_l2_access = Some(st.gpu_cycle - 1);
                }
            },
        )
        .unwrap();
        assert_eq!(
            first_l2_access,
            Some(10),
            "load issued at cycle 1 must reach L2 at cycle 1 + 1 + icnt_latency"
        );
        assert_eq!(out.stats.cycles, 180);
        assert_eq!(out.stats.mem.dram_accesses, 1);
    }

    #[test]
    fn policies_and_worker_counts_do_not_change_results() {
        let cfg = small_cfg();
        let program = small_memory_program(2);
        let baseline = run(&cfg, &program, &SchedulePolicy::sequential()).unwrap();
        let base_report = render_report(&baseline.stats);
        for kind in [PolicyKind::Static, PolicyKind::Dynamic] {
            for workers in [1, 2, 4] {
                let out = run(&cfg, &program, &SchedulePolicy::new(kind, workers)).unwrap();
                assert_eq!(
                    render_report(&out.stats),
                    base_report,
                    "{kind}/{workers} diverged from sequential"
                );
                assert_eq!(out.stats.cycles, baseline.stats.cycles);
            }
        }
    }

    #[test]
    fn instruction_conservation_against_trace_counts() {
        let cfg = small_cfg();
        let program = small_memory_program(7);
        let expect = crate::trace::trace_stats(&program);
        let out = run(&cfg, &program, &SchedulePolicy::sequential()).unwrap();
        assert_eq!(out.stats.total(Counter::InstructionsAlu), expect.alu);
        assert_eq!(out.stats.total(Counter::InstructionsLd), expect.ld);
        assert_eq!(out.stats.total(Counter::InstructionsSt), expect.st);
        assert_eq!(out.stats.total(Counter::InstructionsExit), expect.exit);
        assert_eq!(out.stats.total_instructions(), expect.total());
    }

    #[test]
    fn phase_shares_form_a_partition_of_the_run() {
        let cfg = small_cfg();
        let program = generate_workload(Preset::Balanced, 1, 1);
        let out = run(&cfg, &program, &SchedulePolicy::sequential()).unwrap();
        let shares = out.profile.shares();
        let total: f64 = shares.iter().map(|(_, s)| s).sum();
        assert!((total - 1.0).abs() < 1e-9, "shares sum to {total}");
        assert!(out.profile.sm_share() > 0.0);
        assert!(out
            .profile
            .named()
            .iter()
            .all(|(_, d)| *d <= out.profile.total));
    }

    #[test]
    fn workers_zero_is_rejected() {
        let program = parse_trace("KERNEL k\nCTA 0\nWARP 0\nEXIT\n").unwrap();
        let err = run(
            &small_cfg(),
            &program,
            &SchedulePolicy {
                kind: PolicyKind::Static,
                workers: 0,
                chunk: 1,
            },
        )
        .unwrap_err();
        assert!(err.to_string().contains("workers must be positive"));
    }
}
