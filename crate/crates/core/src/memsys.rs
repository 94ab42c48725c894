//! Memory partitions: per-sub-partition L2 slices and per-partition DRAM
//! channels with deterministic bounded queues.
//!
//! Everything here runs in the engine's sequential phases only, so there is
//! no internal synchronization. The L2 is write-back/write-allocate; dirty
//! evictions are counted but do not re-enter DRAM timing. DRAM is a fixed
//! latency channel that serves one request per `dram_latency` window.

use std::collections::VecDeque;

use crate::cache::SetAssocCache;
use crate::config::GpuConfig;
use crate::icnt::{Packet, PacketKind};
use crate::stats::MemCounters;

/// Requests an interconnect can park at a sub-partition before backpressure
/// reaches the toward-mem queues.
pub const SUBPART_INBOX_CAPACITY: usize = 8;

/// Pure address-to-sub-partition interleave: consecutive lines walk the
/// sub-partitions round-robin.
#[derive(Debug, Clone, Copy)]
pub struct AddressMap {
    pub line_bytes: u64,
    pub num_sub_partitions: usize,
}

impl AddressMap {
    pub fn from_config(cfg: &GpuConfig) -> Self {
        Self {
            line_bytes: cfg.l2_line_bytes,
            num_sub_partitions: cfg.num_sub_partitions(),
        }
    }

    pub fn sub_partition(&self, addr: u64) -> u32 {
        ((addr / self.line_bytes) % self.num_sub_partitions as u64) as u32
    }
}

/// One L2 slice plus its interconnect-facing queues.
#[derive(Debug)]
pub struct SubPartition {
    pub id: usize,
    l2: SetAssocCache,
    pub inbox: VecDeque<Packet>,
    /// Responses waiting out the L2 hit latency, FIFO in enqueue order.
    outbox: VecDeque<(u64, Packet)>,
    /// DRAM fills delivered this cycle, installed by `cache_cycle`.
    fills: VecDeque<Packet>,
    line_bytes: u64,
    num_subs: u64,
}

impl SubPartition {
    pub fn new(id: usize, cfg: &GpuConfig) -> Self {
        let geom = cfg.geometry();
        Self {
            id,
            l2: SetAssocCache::new(geom.l2_slice_bytes, cfg.l2_line_bytes, cfg.l2_assoc),
            inbox: VecDeque::new(),
            outbox: VecDeque::new(),
            fills: VecDeque::new(),
            line_bytes: cfg.l2_line_bytes,
            num_subs: geom.num_sub_partitions as u64,
        }
    }

    /// Cache key of an address within this slice. The slice only ever sees
    /// lines whose index is congruent to `id`, so the interleave stride is
    /// divided out to keep every set reachable.
    fn l2_key(&self, addr: u64) -> u64 {
        (addr / self.line_bytes) / self.num_subs
    }

    pub fn push_fill(&mut self, pkt: Packet) {
        self.fills.push_back(pkt);
    }

    pub fn pending_fills(&self) -> usize {
        self.fills.len()
    }

    /// Pops the next response whose L2 latency has elapsed. Strict FIFO: a
    /// non-ripe head blocks younger responses.
    pub fn pop_ready_response(&mut self, cycle: u64) -> Option<Packet> {
        match self.outbox.front() {
            Some(&(ready, _)) if ready <= cycle => self.outbox.pop_front().map(|(_, p)| p),
            _ => None,
        }
    }

    pub fn is_drained(&self) -> bool {
        self.inbox.is_empty() && self.outbox.is_empty() && self.fills.is_empty()
    }

    /// One L2 cycle: install any DRAM fills that returned this cycle, then
    /// process at most one inbox request. A missing request only leaves the
    /// inbox head once there is room in the DRAM queue (head-of-line
    /// blocking); re-probing a miss does not disturb LRU state, so retries
    /// are idempotent.
    pub fn cache_cycle(
        &mut self,
        dram_queue: &mut VecDeque<Packet>,
        dram_capacity: usize,
        cycle: u64,
        l2_hit_latency: u64,
        stats: &mut MemCounters,
    ) {
        while let Some(pkt) = self.fills.pop_front() {
            let key = self.l2_key(pkt.addr);
            match pkt.kind {
                PacketKind::Fill => {
                    if self.l2.install(key, true).evicted_dirty {
                        stats.l2_writebacks += 1;
                    }
                }
                PacketKind::LoadResp => {
                    if self.l2.install(key, false).evicted_dirty {
                        stats.l2_writebacks += 1;
                    }
                    self.outbox.push_back((cycle + l2_hit_latency, pkt));
                }
                _ => unreachable!("only fills return from DRAM"),
            }
        }

        let Some(front) = self.inbox.front() else {
            return;
        };
        let key = self.l2_key(front.addr);
        let is_store = front.kind == PacketKind::StoreReq;
        if self.l2.probe(key, is_store) {
            stats.l2_hits += 1;
            let pkt = self.inbox.pop_front().unwrap();
            if !is_store {
                let resp = Packet {
                    kind: PacketKind::LoadResp,
                    src: pkt.dst,
                    dst: pkt.src,
                    inject_cycle: 0,
                    ..pkt
                };
                self.outbox.push_back((cycle + l2_hit_latency, resp));
            }
        } else if dram_queue.len() < dram_capacity {
            stats.l2_misses += 1;
            dram_queue.push_back(self.inbox.pop_front().unwrap());
        }
    }
}

/// A memory partition: its sub-partitions plus one DRAM channel.
#[derive(Debug)]
pub struct MemPartition {
    pub id: usize,
    pub subs: Vec<SubPartition>,
    pub dram_queue: VecDeque<Packet>,
    pub dram_in_service: Option<(Packet, u64)>,
}

impl MemPartition {
    pub fn new(id: usize, cfg: &GpuConfig) -> Self {
        let spp = cfg.sub_partitions_per_partition;
        let subs = (0..spp)
            .map(|j| SubPartition::new(id * spp + j, cfg))
            .collect();
        Self {
            id,
            subs,
            dram_queue: VecDeque::new(),
            dram_in_service: None,
        }
    }

    pub fn is_drained(&self) -> bool {
        self.dram_queue.is_empty()
            && self.dram_in_service.is_none()
            && self.subs.iter().all(SubPartition::is_drained)
    }

    /// One DRAM cycle. A request entering service at cycle `t` delivers its
    /// fill to the owning sub-partition at cycle `t + dram_latency`, freeing
    /// the single service slot for the next queued request.
    pub fn dram_cycle(&mut self, dram_latency: u64, stats: &mut MemCounters) {
        if let Some((pkt, remaining)) = self.dram_in_service.as_mut() {
            *remaining -= 1;
            if *remaining == 0 {
                let done = *pkt;
                self.dram_in_service = None;
                let local = done.dst as usize - self.id * self.subs.len();
                let fill = match done.kind {
                    PacketKind::LoadReq => Packet {
                        kind: PacketKind::LoadResp,
                        src: done.dst,
                        dst: done.src,
                        ..done
                    },
                    PacketKind::StoreReq => Packet {
                        kind: PacketKind::Fill,
                        ..done
                    },
                    _ => unreachable!("DRAM only services requests"),
                };
                self.subs[local].push_fill(fill);
            }
        }
        if self.dram_in_service.is_none() {
            if let Some(pkt) = self.dram_queue.pop_front() {
                stats.dram_accesses += 1;
                self.dram_in_service = Some((pkt, dram_latency));
            }
        }
    }

    /// Runs one sub-partition's cache cycle against this partition's DRAM
    /// queue.
    pub fn cache_cycle_sub(
        &mut self,
        local: usize,
        dram_capacity: usize,
        cycle: u64,
        l2_hit_latency: u64,
        stats: &mut MemCounters,
    ) {
        self.subs[local].cache_cycle(
            &mut self.dram_queue,
            dram_capacity,
            cycle,
            l2_hit_latency,
            stats,
        );
    }
}

/// Reference single-step set-associative LRU simulation: every access both
/// probes and (on a miss) installs. This is the ground-truth oracle the
/// timing caches are checked against; it shares no code with
/// [`SetAssocCache`].
pub fn lru_oracle(num_sets: usize, assoc: usize, keys: &[u64]) -> Vec<bool> {
    // Most-recently-used tag first in each set's recency list.
    let mut sets: Vec<Vec<u64>> = vec![Vec::new(); num_sets];
    keys.iter()
        .map(|&key| {
            let set = &mut sets[(key % num_sets as u64) as usize];
            let tag = key / num_sets as u64;
            match set.iter().position(|&t| t == tag) {
                Some(pos) => {
                    set.remove(pos);
                    set.insert(0, tag);
                    true
                }
                None => {
                    set.insert(0, tag);
                    set.truncate(assoc);
                    false
                }
            }
        })
        .collect()
}

/// Ground-truth hit/miss sequence for one L2 slice fed with `addrs`, using
/// the slice geometry of `cfg`.
pub fn l2_oracle_check(cfg: &GpuConfig, addrs: &[u64]) -> Vec<bool> {
    let geom = cfg.geometry();
    let keys: Vec<u64> = addrs
        .iter()
        .map(|a| (a / cfg.l2_line_bytes) / geom.num_sub_partitions as u64)
        .collect();
    lru_oracle(geom.l2_slice_sets, cfg.l2_assoc, &keys)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;
    use rand_xoshiro::rand_core::SeedableRng;
    use rand_xoshiro::Xoshiro256StarStar;

    fn cfg() -> GpuConfig {
        GpuConfig::default()
    }

    fn load(addr: u64, sub: u32) -> Packet {
        Packet {
            req_id: 1,
            kind: PacketKind::LoadReq,
            src: 0,
            dst: sub,
            addr,
            size: 4,
            inject_cycle: 0,
        }
    }

    #[test]
    fn map_address_formula() {
        let map = AddressMap {
            line_bytes: 128,
            num_sub_partitions: 48,
        };
        assert_eq!(map.sub_partition(0x0), 0);
        assert_eq!(map.sub_partition(0x80), 1);
        assert_eq!(map.sub_partition(128 * 48), 0);
    }

    #[test]
    fn sequential_lines_cover_all_sub_partitions() {
        let map = AddressMap::from_config(&cfg());
        let mut seen = vec![0u32; map.num_sub_partitions];
        for i in 0..(2 * map.num_sub_partitions as u64) {
            seen[map.sub_partition(i * 128) as usize] += 1;
        }
        assert!(
            seen.iter().all(|&n| n == 2),
            "round-robin interleave: {seen:?}"
        );
    }

    #[test]
    fn cold_miss_enqueues_to_dram() {
        let cfg = cfg();
        let mut p = MemPartition::new(0, &cfg);
        let mut stats = MemCounters::default();
        p.subs[0].inbox.push_back(load(0, 0));
        p.cache_cycle_sub(
            0,
            cfg.dram_queue_capacity,
            0,
            cfg.l2_hit_latency,
            &mut stats,
        );
        assert_eq!(p.dram_queue.len(), 1);
        assert_eq!(stats.l2_misses, 1);
        assert_eq!(stats.l2_hits, 0);
    }

    #[test]
    fn fill_then_same_line_hits_without_dram_traffic() {
        let cfg = cfg();
        let mut p = MemPartition::new(0, &cfg);
        let mut stats = MemCounters::default();
        p.subs[0].inbox.push_back(load(0, 0));
        p.cache_cycle_sub(
            0,
            cfg.dram_queue_capacity,
            0,
            cfg.l2_hit_latency,
            &mut stats,
        );
        // Walk DRAM until the fill lands and is installed.
        let mut cycle = 0;
        while !p.subs[0].is_drained() || p.dram_in_service.is_some() || !p.dram_queue.is_empty() {
            cycle += 1;
            p.dram_cycle(cfg.dram_latency, &mut stats);
            p.cache_cycle_sub(
                0,
                cfg.dram_queue_capacity,
                cycle,
                cfg.l2_hit_latency,
                &mut stats,
            );
            while p.subs[0].pop_ready_response(cycle).is_some() {}
            assert!(cycle < 10_000);
        }
        p.subs[0].inbox.push_back(load(0, 0));
        p.cache_cycle_sub(
            0,
            cfg.dram_queue_capacity,
            cycle,
            cfg.l2_hit_latency,
            &mut stats,
        );
        assert_eq!(stats.l2_hits, 1);
        assert_eq!(stats.dram_accesses, 1, "second access must not touch DRAM");
        assert!(p.subs[0]
            .pop_ready_response(cycle + cfg.l2_hit_latency)
            .is_some());
    }

    #[test]
    fn full_dram_queue_blocks_inbox_head() {
        let cfg = GpuConfig {
            dram_queue_capacity: 1,
            ..cfg()
        };
        let mut p = MemPartition::new(0, &cfg);
        let mut stats = MemCounters::default();
        // Two distinct lines that both map to sub-partition 0.
        p.subs[0].inbox.push_back(load(0, 0));
        p.subs[0].inbox.push_back(load(128 * 48, 0));
        p.cache_cycle_sub(
            0,
            cfg.dram_queue_capacity,
            0,
            cfg.l2_hit_latency,
            &mut stats,
        );
        p.cache_cycle_sub(
            0,
            cfg.dram_queue_capacity,
            1,
            cfg.l2_hit_latency,
            &mut stats,
        );
        assert_eq!(p.dram_queue.len(), 1);
        assert_eq!(p.subs[0].inbox.len(), 1, "head stalls while queue is full");
        assert_eq!(stats.l2_misses, 1, "a stalled head is not recounted");
    }

    #[test]
    fn dram_latency_is_exact() {
        let cfg = cfg();
        let mut p = MemPartition::new(0, &cfg);
        let mut stats = MemCounters::default();
        p.dram_queue.push_back(load(0, 0));
        // Enters service on the first call.
        p.dram_cycle(cfg.dram_latency, &mut stats);
        assert!(p.dram_in_service.is_some());
        let mut cycles_after_entering = 0;
        while p.dram_in_service.is_some() {
            p.dram_cycle(cfg.dram_latency, &mut stats);
            cycles_after_entering += 1;
        }
        assert_eq!(cycles_after_entering, cfg.dram_latency);
        assert_eq!(stats.dram_accesses, 1);
    }

    #[test]
    fn second_request_served_back_to_back() {
        let cfg = cfg();
        let mut p = MemPartition::new(0, &cfg);
        let mut stats = MemCounters::default();
        p.dram_queue.push_back(load(0, 0));
        p.dram_queue.push_back(load(128 * 48, 0));
        let mut fills_at = Vec::new();
        for cycle in 0..(3 * cfg.dram_latency) {
            p.dram_cycle(cfg.dram_latency, &mut stats);
            let delivered: usize = p.subs.iter().map(|s| s.pending_fills()).sum();
            if delivered > fills_at.len() {
                fills_at.push(cycle);
            }
        }
        assert_eq!(fills_at.len(), 2);
        assert_eq!(
            fills_at[1] - fills_at[0],
            cfg.dram_latency,
            "second fill exactly one service window after the first"
        );
    }

    #[test]
    fn dram_cycle_on_empty_partition_is_noop() {
        let cfg = cfg();
        let mut p = MemPartition::new(0, &cfg);
        let mut stats = MemCounters::default();
        p.dram_cycle(cfg.dram_latency, &mut stats);
        assert!(p.is_drained());
        assert_eq!(stats, MemCounters::default());
    }

    #[test]
    fn oracle_repeated_address() {
        assert_eq!(
            lru_oracle(16, 4, &[7, 7, 7, 7]),
            vec![false, true, true, true]
        );
    }

    #[test]
    fn oracle_lru_thrash_all_miss() {
        // assoc + 1 distinct keys in one set, round-robin: classic LRU thrash.
        let assoc = 4;
        let num_sets = 8;
        let keys: Vec<u64> = (0..(assoc as u64 + 1))
            .map(|i| i * num_sets as u64)
            .collect();
        let mut stream = Vec::new();
        for _ in 0..4 {
            stream.extend_from_slice(&keys);
        }
        let out = lru_oracle(num_sets, assoc, &stream);
        assert!(out.iter().all(|&hit| !hit), "LRU thrash must always miss");
    }

    #[test]
    fn oracle_matches_tag_array_on_random_stream() {
        let cfg = cfg();
        let geom = cfg.geometry();
        let mut rng = Xoshiro256StarStar::seed_from_u64(99);
        let keys: Vec<u64> = (0..1000).map(|_| rng.random_range(0..512u64)).collect();
        let expected = lru_oracle(geom.l2_slice_sets, cfg.l2_assoc, &keys);
        let mut cache = SetAssocCache::new(geom.l2_slice_bytes, cfg.l2_line_bytes, cfg.l2_assoc);
        let got: Vec<bool> = keys
            .iter()
            .map(|&k| {
                let hit = cache.probe(k, false);
                if !hit {
                    cache.install(k, false);
                }
                hit
            })
            .collect();
        assert_eq!(got, expected);
    }
}
