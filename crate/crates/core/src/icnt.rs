//! Deterministic interconnect between SMs and memory sub-partitions.
//!
//! Two logical directions, each a set of per-destination FIFO delay queues
//! with a fixed latency and a per-destination bandwidth cap. All arbitration
//! walks sources in ascending id, which makes the global packet order a pure
//! function of the trace and the configuration — nothing about worker timing
//! can leak into delivery order. This is not a topology model; it is the
//! ordering contract the parallel SM phase relies on.

use std::collections::VecDeque;

use crate::memsys::{AddressMap, MemPartition, SubPartition, SUBPART_INBOX_CAPACITY};
use crate::smcore::SmState;

/// A memory request/response flit.
///
/// `req_id` is assigned by the issuing SM from a private sequence, so ids are
/// globally unique and deterministic without any shared counter. Responses
/// reuse the id of the request they answer.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Packet {
    pub req_id: u64,
    pub kind: PacketKind,
    pub src: u32,
    pub dst: u32,
    pub addr: u64,
    pub size: u32,
    pub inject_cycle: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PacketKind {
    /// SM -> sub-partition load request; expects exactly one `LoadResp`.
    LoadReq,
    /// SM -> sub-partition write-through store; fire and forget.
    StoreReq,
    /// Sub-partition -> SM load data.
    LoadResp,
    /// DRAM -> L2 fill for a store-allocate; never leaves the partition.
    Fill,
}

#[derive(Debug)]
pub struct IcntState {
    toward_mem: Vec<VecDeque<Packet>>,
    toward_sm: Vec<VecDeque<Packet>>,
    latency: u64,
    bw: usize,
    pub injected_toward_mem: u64,
    pub delivered_toward_mem: u64,
    pub injected_toward_sm: u64,
    pub delivered_toward_sm: u64,
}

impl IcntState {
    pub fn new(num_sms: usize, num_sub_partitions: usize, latency: u64, bw: usize) -> Self {
        Self {
            toward_mem: vec![VecDeque::new(); num_sub_partitions],
            toward_sm: vec![VecDeque::new(); num_sms],
            latency,
            bw,
            injected_toward_mem: 0,
            delivered_toward_mem: 0,
            injected_toward_sm: 0,
            delivered_toward_sm: 0,
        }
    }

    pub fn queued_toward_mem(&self) -> u64 {
        self.toward_mem.iter().map(|q| q.len() as u64).sum()
    }

    pub fn queued_toward_sm(&self) -> u64 {
        self.toward_sm.iter().map(|q| q.len() as u64).sum()
    }

    pub fn is_drained(&self) -> bool {
        self.toward_mem.iter().all(VecDeque::is_empty)
            && self.toward_sm.iter().all(VecDeque::is_empty)
    }

    /// Drains one SM's outbox in emission order, stamping the injection
    /// cycle and routing by address.
    pub fn schedule_from_sm(&mut self, sm: &mut SmState, map: &AddressMap, cycle: u64) {
        while let Some(mut pkt) = sm.outbox.pop_front() {
            pkt.inject_cycle = cycle;
            pkt.dst = map.sub_partition(pkt.addr);
            self.injected_toward_mem += 1;
            self.toward_mem[pkt.dst as usize].push_back(pkt);
        }
    }

    /// Moves up to `bw` ripe packets into the sub-partition inbox, stalling
    /// when the inbox is full.
    pub fn deliver_to_sub(&mut self, sub: &mut SubPartition, cycle: u64) {
        let queue = &mut self.toward_mem[sub.id];
        let mut moved = 0;
        while moved < self.bw && sub.inbox.len() < SUBPART_INBOX_CAPACITY {
            match queue.front() {
                Some(pkt) if pkt.inject_cycle + self.latency <= cycle => {
                    sub.inbox.push_back(queue.pop_front().unwrap());
                    self.delivered_toward_mem += 1;
                    moved += 1;
                }
                _ => break,
            }
        }
    }

    /// Drains every response the sub-partition has ready this cycle.
    pub fn collect_from_sub(&mut self, sub: &mut SubPartition, cycle: u64) {
        while let Some(mut pkt) = sub.pop_ready_response(cycle) {
            pkt.inject_cycle = cycle;
            self.injected_toward_sm += 1;
            self.toward_sm[pkt.dst as usize].push_back(pkt);
        }
    }

    /// Delivers up to `bw` ripe responses into the SM inbox.
    pub fn deliver_to_sm(&mut self, sm: &mut SmState, cycle: u64) {
        let queue = &mut self.toward_sm[sm.sm_id as usize];
        for _ in 0..self.bw {
            match queue.front() {
                Some(pkt) if pkt.inject_cycle + self.latency <= cycle => {
                    sm.inbox.push_back(queue.pop_front().unwrap());
                    self.delivered_toward_sm += 1;
                }
                _ => break,
            }
        }
    }

    #[cfg(test)]
    pub(crate) fn push_toward_sm_for_test(&mut self, pkt: Packet) {
        self.injected_toward_sm += 1;
        self.toward_sm[pkt.dst as usize].push_back(pkt);
    }
}

/// Drains all SM outboxes in ascending SM id. Together with per-outbox FIFO
/// order this fixes the global injection order regardless of how the SM
/// phase was scheduled.
pub fn icnt_schedule(ic: &mut IcntState, sms: &mut [SmState], map: &AddressMap, cycle: u64) {
    for sm in sms.iter_mut() {
        ic.schedule_from_sm(sm, map, cycle);
    }
}

/// Moves ripe packets into every sub-partition inbox, ascending id.
pub fn icnt_to_mem(ic: &mut IcntState, partitions: &mut [MemPartition], cycle: u64) {
    for p in partitions.iter_mut() {
        for sub in p.subs.iter_mut() {
            ic.deliver_to_sub(sub, cycle);
        }
    }
}

/// Collects ready responses from every sub-partition, ascending id.
pub fn mem_to_icnt(ic: &mut IcntState, partitions: &mut [MemPartition], cycle: u64) {
    for p in partitions.iter_mut() {
        for sub in p.subs.iter_mut() {
            ic.collect_from_sub(sub, cycle);
        }
    }
}

/// Delivers ripe responses into every SM inbox, ascending id.
pub fn icnt_to_sm(ic: &mut IcntState, sms: &mut [SmState], cycle: u64) {
    for sm in sms.iter_mut() {
        ic.deliver_to_sm(sm, cycle);
    }
}
