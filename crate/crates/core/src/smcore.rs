//! One Streaming Multiprocessor: sub-cores with loose round-robin issue,
//! in-order warps, an L1 data cache with MSHR-style miss merging, and the
//! inbox/outbox mailboxes that let the engine run many SMs in parallel
//! without any shared mutable state.
//!
//! Ownership contract: during the parallel phase an `SmState` is touched by
//! exactly one worker, which only reads the shared `TraceProgram`/`GpuConfig`
//! and mutates this SM. The inbox is filled and the outbox drained strictly
//! by the engine's sequential phases.

use std::collections::{BTreeMap, VecDeque};

use crate::cache::SetAssocCache;
use crate::config::GpuConfig;
use crate::icnt::{Packet, PacketKind};
use crate::stats::{Counter, StatSheet};
use crate::trace::{CtaTrace, TraceOp, TraceProgram};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum WarpState {
    Ready,
    /// Busy in an execution unit (ALU latency or L1 hit latency).
    Exec {
        remaining: u32,
    },
    /// Stalled on an outstanding load.
    WaitMem {
        req_id: u64,
    },
    WaitBarrier,
    Finished,
}

#[derive(Debug, Clone, Copy)]
pub struct WarpContext {
    pub global_warp_id: u32,
    pub cta_slot: u16,
    pub warp_in_cta: u16,
    /// Index of the next instruction to issue.
    pub pc: u32,
    pub state: WarpState,
}

#[derive(Debug, Clone)]
struct CtaSlot {
    kernel_idx: u32,
    cta_idx: u32,
    /// Warps not yet `Finished`.
    live_warps: u32,
    barrier_arrived: u32,
    warp_slots: Vec<u16>,
}

#[derive(Debug, Clone)]
struct PendingMiss {
    req_id: u64,
    waiters: Vec<u16>,
}

/// Private simulation state of one SM.
///
/// Cache-line aligned: neighbouring SMs in the engine's vector are cycled by
/// different workers under interleaved schedules, and boundary-line sharing
/// between them is a measurable slowdown.
#[derive(Debug)]
#[repr(align(128))]
pub struct SmState {
    pub sm_id: u32,
    warps: Vec<Option<WarpContext>>,
    /// Per-sub-core rotating issue pointer (an index into that sub-core's
    /// slot sequence, not a raw slot number).
    issue_ptr: Vec<usize>,
    ctas: Vec<Option<CtaSlot>>,
    pub inbox: VecDeque<Packet>,
    pub outbox: VecDeque<Packet>,
    /// Outstanding load misses keyed by line index; duplicate misses to the
    /// same line merge here instead of emitting another packet.
    pending: BTreeMap<u64, PendingMiss>,
    l1: SetAssocCache,
    pub stats: StatSheet,
    next_req_seq: u64,
    resident_warps: usize,
    line_shift: u32,
    sub_cores: usize,
    warps_per_sub_core: usize,
}

impl SmState {
    pub fn new(sm_id: u32, cfg: &GpuConfig) -> Self {
        Self {
            sm_id,
            warps: vec![None; cfg.warps_per_sm],
            issue_ptr: vec![0; cfg.sub_cores_per_sm],
            ctas: vec![None; cfg.max_ctas_per_sm],
            inbox: VecDeque::new(),
            outbox: VecDeque::new(),
            pending: BTreeMap::new(),
            l1: SetAssocCache::new(cfg.l1d_size_bytes, cfg.l1d_line_bytes, cfg.l1d_assoc),
            stats: StatSheet::new(),
            next_req_seq: 0,
            resident_warps: 0,
            line_shift: cfg.l1d_line_bytes.trailing_zeros(),
            sub_cores: cfg.sub_cores_per_sm,
            warps_per_sub_core: cfg.warps_per_sm / cfg.sub_cores_per_sm,
        }
    }

    /// True iff the SM holds no work at all: no resident warps, empty
    /// mailboxes, no outstanding requests.
    pub fn is_idle(&self) -> bool {
        self.resident_warps == 0
            && self.inbox.is_empty()
            && self.outbox.is_empty()
            && self.pending.is_empty()
    }

    pub fn resident_warps(&self) -> usize {
        self.resident_warps
    }

    fn alloc_req_id(&mut self) -> u64 {
        self.next_req_seq += 1;
        (u64::from(self.sm_id) << 40) | self.next_req_seq
    }

    /// Tries to install a CTA. Warp `w` always lands on sub-core
    /// `w % sub_cores`, so acceptance requires a free warp slot in each
    /// sub-core for its share of the CTA, plus a free CTA slot.
    pub fn accept_cta(&mut self, cta: &CtaTrace, kernel_idx: u32) -> bool {
        let mut needed = vec![0usize; self.sub_cores];
        for warp in &cta.warps {
            needed[warp.warp_id as usize % self.sub_cores] += 1;
        }
        let mut free = vec![0usize; self.sub_cores];
        for (slot, w) in self.warps.iter().enumerate() {
            if w.is_none() {
                free[slot % self.sub_cores] += 1;
            }
        }
        if needed.iter().zip(&free).any(|(n, f)| n > f) {
            return false;
        }
        let Some(cta_slot) = self.ctas.iter().position(Option::is_none) else {
            return false;
        };

        let mut warp_slots = Vec::with_capacity(cta.warps.len());
        for warp in &cta.warps {
            let class = warp.warp_id as usize % self.sub_cores;
            let slot = (class..self.warps.len())
                .step_by(self.sub_cores)
                .find(|&s| self.warps[s].is_none())
                .expect("capacity checked above");
            self.warps[slot] = Some(WarpContext {
                global_warp_id: (cta.cta_id << 16) | warp.warp_id,
                cta_slot: cta_slot as u16,
                warp_in_cta: warp.warp_id as u16,
                pc: 0,
                state: WarpState::Ready,
            });
            warp_slots.push(slot as u16);
        }
        self.resident_warps += cta.warps.len();
        self.ctas[cta_slot] = Some(CtaSlot {
            kernel_idx,
            cta_idx: cta.cta_id,
            live_warps: cta.warps.len() as u32,
            barrier_arrived: 0,
            warp_slots,
        });
        self.stats.bump(Counter::IssuedCtas);
        true
    }

    /// Advances this SM one core cycle. Touches only this SM's own state and
    /// the read-only program/config.
    pub fn cycle(&mut self, program: &TraceProgram, cfg: &GpuConfig) {
        if self.is_idle() {
            return;
        }
        self.stats.bump(Counter::ActiveCycles);

        // 1. Consume this cycle's deliveries: install lines, wake waiters.
        while let Some(pkt) = self.inbox.pop_front() {
            self.handle_response(pkt);
        }

        // 2. Issue at most one instruction per sub-core, ascending id.
        for sc in 0..self.sub_cores {
            self.issue_one(sc, program, cfg);
        }

        // 3. Retire execution latencies and account stall cycles.
        let mut exec_stall = 0;
        let mut mem_stall = 0;
        for slot in self.warps.iter_mut().flatten() {
            match &mut slot.state {
                WarpState::Exec { remaining } => {
                    exec_stall += 1;
                    *remaining -= 1;
                    if *remaining == 0 {
                        slot.state = WarpState::Ready;
                    }
                }
                WarpState::WaitMem { .. } => mem_stall += 1,
                _ => {}
            }
        }
        self.stats.add(Counter::StallCyclesExec, exec_stall);
        self.stats.add(Counter::StallCyclesMem, mem_stall);
    }

    fn handle_response(&mut self, pkt: Packet) {
        debug_assert_eq!(pkt.kind, PacketKind::LoadResp);
        let key = pkt.addr >> self.line_shift;
        let entry = self
            .pending
            .remove(&key)
            .expect("response without an outstanding miss");
        debug_assert_eq!(entry.req_id, pkt.req_id);
        self.l1.install(key, false);
        for slot in entry.waiters {
            let warp = self.warps[slot as usize].as_mut().expect("waiter vanished");
            debug_assert!(matches!(warp.state, WarpState::WaitMem { .. }));
            warp.state = WarpState::Ready;
        }
    }

    /// Loose round-robin: starting at the sub-core's issue pointer, pick the
    /// first ready warp and execute its next instruction.
    fn issue_one(&mut self, sc: usize, program: &TraceProgram, cfg: &GpuConfig) {
        let width = self.warps_per_sub_core;
        for k in 0..width {
            let j = (self.issue_ptr[sc] + k) % width;
            let slot = sc + j * self.sub_cores;
            let ready = matches!(
                self.warps[slot],
                Some(WarpContext {
                    state: WarpState::Ready,
                    ..
                })
            );
            if ready {
                self.issue_ptr[sc] = (j + 1) % width;
                self.execute(slot, program, cfg);
                return;
            }
        }
    }

    fn execute(&mut self, slot: usize, program: &TraceProgram, cfg: &GpuConfig) {
        let warp = self.warps[slot].as_ref().unwrap();
        let cta_slot = warp.cta_slot as usize;
        let cta_info = self.ctas[cta_slot].as_ref().unwrap();
        let instr = program.kernels[cta_info.kernel_idx as usize].ctas[cta_info.cta_idx as usize]
            .warps[warp.warp_in_cta as usize]
            .instructions[warp.pc as usize];

        let warp = self.warps[slot].as_mut().unwrap();
        warp.pc += 1;
        match instr.op {
            TraceOp::Alu { latency } => {
                warp.state = WarpState::Exec { remaining: latency };
                self.stats.bump(Counter::InstructionsAlu);
            }
            TraceOp::Ld { addr, size } => {
                self.stats.bump(Counter::InstructionsLd);
                let key = addr >> self.line_shift;
                self.stats.unique_lines.insert(key << self.line_shift);
                if self.l1.probe(key, false) {
                    self.stats.bump(Counter::L1Hits);
                    warp.state = WarpState::Exec {
                        remaining: cfg.l1_hit_latency as u32,
                    };
                } else if let Some(miss) = self.pending.get_mut(&key) {
                    self.stats.bump(Counter::L1MshrHits);
                    warp.state = WarpState::WaitMem {
                        req_id: miss.req_id,
                    };
                    miss.waiters.push(slot as u16);
                } else {
                    self.stats.bump(Counter::L1Misses);
                    let req_id = self.alloc_req_id();
                    self.warps[slot].as_mut().unwrap().state = WarpState::WaitMem { req_id };
                    self.pending.insert(
                        key,
                        PendingMiss {
                            req_id,
                            waiters: vec![slot as u16],
                        },
                    );
                    self.outbox.push_back(Packet {
                        req_id,
                        kind: PacketKind::LoadReq,
                        src: self.sm_id,
                        dst: u32::MAX,
                        addr,
                        size,
                        inject_cycle: 0,
                    });
                }
            }
            TraceOp::St { addr, size } => {
                self.stats.bump(Counter::InstructionsSt);
                let key = addr >> self.line_shift;
                self.stats.unique_lines.insert(key << self.line_shift);
                // Write-through, no-allocate: refresh the line if present,
                // always forward to L2; the warp never stalls on a store.
                self.l1.probe(key, false);
                let req_id = self.alloc_req_id();
                self.outbox.push_back(Packet {
                    req_id,
                    kind: PacketKind::StoreReq,
                    src: self.sm_id,
                    dst: u32::MAX,
                    addr,
                    size,
                    inject_cycle: 0,
                });
            }
            TraceOp::Bar => {
                self.stats.bump(Counter::InstructionsBar);
                warp.state = WarpState::WaitBarrier;
                self.ctas[cta_slot].as_mut().unwrap().barrier_arrived += 1;
                self.maybe_release_barrier(cta_slot);
            }
            TraceOp::Exit => {
                self.stats.bump(Counter::InstructionsExit);
                warp.state = WarpState::Finished;
                let cta = self.ctas[cta_slot].as_mut().unwrap();
                cta.live_warps -= 1;
                if cta.live_warps == 0 {
                    let slots = std::mem::take(&mut cta.warp_slots);
                    for s in &slots {
                        self.warps[*s as usize] = None;
                    }
                    self.resident_warps -= slots.len();
                    self.ctas[cta_slot] = None;
                } else {
                    // A warp exiting early can be the last arrival a barrier
                    // was waiting for.
                    self.maybe_release_barrier(cta_slot);
                }
            }
        }
    }

    fn maybe_release_barrier(&mut self, cta_slot: usize) {
        let cta = self.ctas[cta_slot].as_ref().unwrap();
        if cta.barrier_arrived == 0 || cta.barrier_arrived < cta.live_warps {
            return;
        }
        let slots = cta.warp_slots.clone();
        for s in slots {
            if let Some(w) = self.warps[s as usize].as_mut() {
                if w.state == WarpState::WaitBarrier {
                    w.state = WarpState::Ready;
                }
            }
        }
        self.ctas[cta_slot].as_mut().unwrap().barrier_arrived = 0;
    }

    #[cfg(test)]
    fn warp_state(&self, slot: usize) -> Option<WarpState> {
        self.warps[slot].map(|w| w.state)
    }
}
