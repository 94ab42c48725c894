//! Seeded synthetic workload generator.
//!
//! Four presets echo the workload classes that matter when parallelizing the
//! per-SM cycle loop:
//!
//! * `two_cta` — every kernel launches exactly two CTAs, so at most two SMs
//!   ever do work. Warps carry a memory-leaning mix, which keeps the
//!   sequential memory phases busy; parallelizing the SM loop should neither
//!   help nor badly hurt.
//! * `balanced` — a uniform compute grid: every CTA has the identical
//!   instruction count, long-latency ALU only. Per-warp count is `32*scale`,
//!   so the total is `2 kernels * 160 CTAs * 12 warps * (32*scale + 1)`.
//! * `imbalanced` — a long-tailed grid: three of every eight CTAs are
//!   48-warp long-runners (>= 10x the median CTA instruction count), the
//!   rest are small. With round-robin placement the heavy CTAs land on a
//!   fixed stride of SMs, which a static chunk-1 schedule splits unevenly.
//! * `memory_heavy` — >= 50% loads/stores, with streaming addresses that
//!   cover every L2 sub-partition of the default machine plus a shared hot
//!   set.
//!
//! The instruction mixes are invented; they are shaped to reproduce workload
//! *classes*, not any particular application. Identical `(preset, seed,
//! scale)` arguments always produce byte-identical programs. Addresses assume
//! the default 128-byte line.

use rand::Rng;
use rand_xoshiro::rand_core::SeedableRng;
use rand_xoshiro::Xoshiro256StarStar;

use super::{CtaTrace, KernelTrace, TraceInstruction, TraceOp, TraceProgram, WarpTrace};

pub const LINE_BYTES: u64 = 128;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Preset {
    TwoCta,
    Balanced,
    Imbalanced,
    MemoryHeavy,
}

pub const ALL_PRESETS: [Preset; 4] = [
    Preset::TwoCta,
    Preset::Balanced,
    Preset::Imbalanced,
    Preset::MemoryHeavy,
];

impl Preset {
    pub fn parse(name: &str) -> Option<Self> {
        match name {
            "two_cta" => Some(Preset::TwoCta),
            "balanced" => Some(Preset::Balanced),
            "imbalanced" => Some(Preset::Imbalanced),
            "memory_heavy" => Some(Preset::MemoryHeavy),
            _ => None,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Preset::TwoCta => "two_cta",
            Preset::Balanced => "balanced",
            Preset::Imbalanced => "imbalanced",
            Preset::MemoryHeavy => "memory_heavy",
        }
    }
}

impl std::fmt::Display for Preset {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

/// Deterministic function of `(preset, seed, scale)`. A `scale` of zero is
/// treated as one.
///
/// ```
/// use gpusim_core::{generate_workload, render_trace, Preset};
///
/// let a = generate_workload(Preset::TwoCta, 1, 1);
/// let b = generate_workload(Preset::TwoCta, 1, 1);
/// assert_eq!(render_trace(&a), render_trace(&b));
/// assert!(a.kernels.iter().all(|k| k.ctas.len() == 2));
/// ```
pub fn generate_workload(preset: Preset, seed: u64, scale: u32) -> TraceProgram {
    let scale = scale.max(1);
    let mut rng = Xoshiro256StarStar::seed_from_u64(seed);
    match preset {
        Preset::TwoCta => gen_two_cta(&mut rng, scale),
        Preset::Balanced => gen_balanced(&mut rng, scale),
        Preset::Imbalanced => gen_imbalanced(&mut rng, scale),
        Preset::MemoryHeavy => gen_memory_heavy(&mut rng, scale),
    }
}

/// Instruction mix knobs for one warp stream. Percentages are out of 100;
/// whatever is left of loads and stores becomes ALU work.
struct Mix {
    ld_pct: u32,
    st_pct: u32,
    lat_lo: u32,
    lat_hi: u32,
    /// Lines in the warp-private streaming window.
    stream_lines: u64,
    /// Share of memory accesses that hit the kernel-shared hot set.
    hot_pct: u32,
    hot_lines: u64,
}

const ACCESS_SIZES: [u32; 3] = [4, 8, 16];

fn gen_warp(
    rng: &mut Xoshiro256StarStar,
    n_instr: u32,
    warp_uid: u64,
    hot_base_line: u64,
    mix: &Mix,
) -> Vec<TraceInstruction> {
    let stream_base_line = warp_uid * mix.stream_lines;
    let mut out = Vec::with_capacity(n_instr as usize + 1);
    let mut stream_pos = 0u64;
    for pc in 0..n_instr {
        let roll = rng.random_range(0..100u32);
        let op = if roll < mix.ld_pct + mix.st_pct {
            let line = if rng.random_range(0..100u32) < mix.hot_pct {
                hot_base_line + rng.random_range(0..mix.hot_lines)
            } else {
                let line = stream_base_line + (stream_pos % mix.stream_lines);
                stream_pos += 1;
                line
            };
            let size = ACCESS_SIZES[rng.random_range(0..ACCESS_SIZES.len())];
            let offset = rng.random_range(0..(LINE_BYTES as u32 / size)) * size;
            let addr = line * LINE_BYTES + offset as u64;
            if roll < mix.ld_pct {
                TraceOp::Ld { addr, size }
            } else {
                TraceOp::St { addr, size }
            }
        } else {
            TraceOp::Alu {
                latency: rng.random_range(mix.lat_lo..=mix.lat_hi),
            }
        };
        out.push(TraceInstruction { pc, op });
    }
    out.push(TraceInstruction {
        pc: n_instr,
        op: TraceOp::Exit,
    });
    out
}

fn build_cta(cta_id: u32, warps: Vec<Vec<TraceInstruction>>) -> CtaTrace {
    CtaTrace {
        cta_id,
        warps: warps
            .into_iter()
            .enumerate()
            .map(|(w, instructions)| WarpTrace {
                warp_id: w as u32,
                instructions,
            })
            .collect(),
    }
}

fn gen_two_cta(rng: &mut Xoshiro256StarStar, scale: u32) -> TraceProgram {
    // stream_lines is coprime to the default 48 sub-partitions so the
    // per-warp stream bases rotate over every memory channel.
    let mix = Mix {
        ld_pct: 45,
        st_pct: 15,
        lat_lo: 16,
        lat_hi: 48,
        stream_lines: 67,
        hot_pct: 30,
        hot_lines: 256,
    };
    let mut warp_uid = 0u64;
    let kernels = (0..scale)
        .map(|k| {
            let hot_base = (1 << 26) + u64::from(k) * 4096;
            let ctas = (0..2)
                .map(|c| {
                    let warps = (0..48)
                        .map(|_| {
                            warp_uid += 1;
                            gen_warp(rng, 64, warp_uid, hot_base, &mix)
                        })
                        .collect();
                    build_cta(c, warps)
                })
                .collect();
            KernelTrace {
                name: format!("two_cta_{k}"),
                ctas,
            }
        })
        .collect();
    TraceProgram { kernels }
}

fn gen_balanced(rng: &mut Xoshiro256StarStar, scale: u32) -> TraceProgram {
    let n_instr = 32 * scale;
    let kernels = (0..2u32)
        .map(|k| {
            let ctas = (0..160)
                .map(|c| {
                    let warps = (0..12)
                        .map(|_| {
                            let mut instrs = Vec::with_capacity(n_instr as usize + 1);
                            for pc in 0..n_instr {
                                instrs.push(TraceInstruction {
                                    pc,
                                    op: TraceOp::Alu {
                                        latency: rng.random_range(96..=160),
                                    },
                                });
                            }
                            instrs.push(TraceInstruction {
                                pc: n_instr,
                                op: TraceOp::Exit,
                            });
                            instrs
                        })
                        .collect();
                    build_cta(c, warps)
                })
                .collect();
            KernelTrace {
                name: format!("balanced_{k}"),
                ctas,
            }
        })
        .collect();
    TraceProgram { kernels }
}

fn gen_imbalanced(rng: &mut Xoshiro256StarStar, scale: u32) -> TraceProgram {
    let n_base = 8 * scale;
    let kernels = (0..1u32)
        .map(|k| {
            let ctas = (0..80)
                .map(|c| {
                    // Three of every eight CTAs are 48-warp long-runners; the
                    // rest are small. Round-robin placement puts the heavy
                    // ones on a fixed stride of SMs, which a static chunk-1
                    // split loads onto one worker while a dynamic schedule
                    // rebalances them.
                    let heavy = c % 8 == 0 || c % 8 == 2 || c % 8 == 4;
                    let (warp_count, n_instr) = if heavy {
                        (48, n_base * rng.random_range(12..=16))
                    } else {
                        (8, n_base)
                    };
                    let warps = (0..warp_count)
                        .map(|_| {
                            let mut instrs = Vec::with_capacity(n_instr as usize + 1);
                            for pc in 0..n_instr {
                                instrs.push(TraceInstruction {
                                    pc,
                                    op: TraceOp::Alu {
                                        latency: rng.random_range(48..=96),
                                    },
                                });
                            }
                            instrs.push(TraceInstruction {
                                pc: n_instr,
                                op: TraceOp::Exit,
                            });
                            instrs
                        })
                        .collect();
                    build_cta(c, warps)
                })
                .collect();
            KernelTrace {
                name: format!("imbalanced_{k}"),
                ctas,
            }
        })
        .collect();
    TraceProgram { kernels }
}

fn gen_memory_heavy(rng: &mut Xoshiro256StarStar, scale: u32) -> TraceProgram {
    let mix = Mix {
        ld_pct: 40,
        st_pct: 20,
        lat_lo: 2,
        lat_hi: 6,
        stream_lines: 97,
        hot_pct: 50,
        hot_lines: 384,
    };
    let n_instr = 12 * scale;
    let mut warp_uid = 0u64;
    let kernels = (0..2u32)
        .map(|k| {
            let hot_base = (1 << 27) + u64::from(k) * 4096;
            let ctas = (0..64)
                .map(|c| {
                    let warps = (0..8)
                        .map(|_| {
                            warp_uid += 1;
                            gen_warp(rng, n_instr, warp_uid, hot_base, &mix)
                        })
                        .collect();
                    build_cta(c, warps)
                })
                .collect();
            KernelTrace {
                name: format!("memory_heavy_{k}"),
                ctas,
            }
        })
        .collect();
    TraceProgram { kernels }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::GpuConfig;
    use crate::trace::{parse_trace, render_trace, trace_stats, TraceOp};

    #[test]
    fn two_cta_kernels_have_exactly_two_ctas() {
        let p = generate_workload(Preset::TwoCta, 1, 1);
        assert!(!p.kernels.is_empty());
        for kernel in &p.kernels {
            assert_eq!(kernel.ctas.len(), 2);
        }
        let s = trace_stats(&p);
        assert_eq!(s.ctas_per_kernel, vec![2; p.kernels.len()]);
    }

    #[test]
    fn balanced_cta_counts_are_identical() {
        let p = generate_workload(Preset::Balanced, 7, 2);
        let counts: Vec<u64> = p.kernels[0]
            .ctas
            .iter()
            .map(|c| c.instruction_count())
            .collect();
        let max = counts.iter().max().unwrap();
        let min = counts.iter().min().unwrap();
        assert_eq!(max, min, "balanced preset must have a 1.0 max/min ratio");
    }

    #[test]
    fn balanced_total_matches_closed_form() {
        for scale in [1u32, 3] {
            let p = generate_workload(Preset::Balanced, 11, scale);
            let expected = 2 * 160 * 12 * (32 * u64::from(scale) + 1);
            assert_eq!(trace_stats(&p).total(), expected);
        }
    }

    #[test]
    fn imbalanced_tail_exceeds_ten_times_median() {
        let p = generate_workload(Preset::Imbalanced, 3, 1);
        let mut counts: Vec<u64> = p.kernels[0]
            .ctas
            .iter()
            .map(|c| c.instruction_count())
            .collect();
        counts.sort_unstable();
        let median = counts[counts.len() / 2];
        let max = *counts.last().unwrap();
        assert!(max >= 10 * median, "max {max} not >= 10x median {median}");
    }

    #[test]
    fn memory_heavy_mix_and_line_spread() {
        let p = generate_workload(Preset::MemoryHeavy, 5, 1);
        let s = trace_stats(&p);
        assert!(
            2 * (s.ld + s.st) >= s.total(),
            "memory instructions must be at least half of the program"
        );
        let mut lines = std::collections::BTreeSet::new();
        for kernel in &p.kernels {
            for cta in &kernel.ctas {
                for warp in &cta.warps {
                    for instr in &warp.instructions {
                        if let TraceOp::Ld { addr, .. } | TraceOp::St { addr, .. } = instr.op {
                            lines.insert(addr / LINE_BYTES);
                        }
                    }
                }
            }
        }
        let subs = GpuConfig::default().num_sub_partitions();
        assert!(
            lines.len() >= subs,
            "want >= {subs} lines, got {}",
            lines.len()
        );
    }

    #[test]
    fn generation_is_deterministic() {
        for preset in ALL_PRESETS {
            let a = render_trace(&generate_workload(preset, 42, 1));
            let b = render_trace(&generate_workload(preset, 42, 1));
            assert_eq!(a, b, "preset {preset} not reproducible");
            let c = render_trace(&generate_workload(preset, 43, 1));
            assert_ne!(a, c, "different seeds should differ for {preset}");
        }
    }

    #[test]
    fn generated_traces_parse_and_validate() {
        let cfg = GpuConfig::default();
        for preset in ALL_PRESETS {
            let p = generate_workload(preset, 9, 1);
            p.validate_against(&cfg).unwrap();
            let round = parse_trace(&render_trace(&p)).unwrap();
            assert_eq!(round, p, "parse(render(p)) != p for {preset}");
        }
    }
}
