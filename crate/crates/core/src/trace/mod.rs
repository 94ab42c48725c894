//! Workload input: an ordered list of kernels, each a grid of CTAs of warps
//! of instructions. Programs are immutable once loaded and shared read-only
//! by every worker.
//!
//! The text grammar is line oriented (`#` starts a comment):
//!
//! ```text
//! KERNEL <name>
//! CTA <id>
//! WARP <id>
//! ALU <latency>
//! LD <addr> <size>
//! ST <addr> <size>
//! BAR
//! EXIT
//! ```
//!
//! Addresses are decimal or `0x` hex. Every warp ends with exactly one
//! `EXIT`, and CTA/warp ids must match their position.

pub mod gen;

use thiserror::Error;

use crate::config::GpuConfig;

/// One instruction of a warp's trace. Execution-unit classes are collapsed
/// into a latency-parametrized `Alu` kind; loads and stores take their timing
/// from the memory system instead of a latency field.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TraceOp {
    Alu { latency: u32 },
    Ld { addr: u64, size: u32 },
    St { addr: u64, size: u32 },
    Bar,
    Exit,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TraceInstruction {
    /// Position within the warp's instruction list.
    pub pc: u32,
    pub op: TraceOp,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct WarpTrace {
    pub warp_id: u32,
    pub instructions: Vec<TraceInstruction>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CtaTrace {
    pub cta_id: u32,
    pub warps: Vec<WarpTrace>,
}

impl CtaTrace {
    pub fn instruction_count(&self) -> u64 {
        self.warps.iter().map(|w| w.instructions.len() as u64).sum()
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct KernelTrace {
    pub name: String,
    pub ctas: Vec<CtaTrace>,
}

impl KernelTrace {
    pub fn instruction_count(&self) -> u64 {
        self.ctas.iter().map(CtaTrace::instruction_count).sum()
    }
}

/// A whole simulated workload. Kernels execute strictly in list order.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct TraceProgram {
    pub kernels: Vec<KernelTrace>,
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum TraceError {
    #[error("line {line}: {msg}")]
    Parse { line: usize, msg: String },
    #[error("kernel {kernel} cta {cta}: warps per CTA exceeds warps_per_sm ({got} > {max})")]
    TooManyWarps {
        kernel: usize,
        cta: usize,
        got: usize,
        max: usize,
    },
    #[error(
        "kernel {kernel} cta {cta} warp {warp}: access size {size} exceeds cache line size {line}"
    )]
    AccessTooWide {
        kernel: usize,
        cta: usize,
        warp: usize,
        size: u32,
        line: u64,
    },
}

fn parse_err(line: usize, msg: impl Into<String>) -> TraceError {
    TraceError::Parse {
        line,
        msg: msg.into(),
    }
}

fn parse_int(tok: &str, line: usize, what: &str) -> Result<u64, TraceError> {
    let parsed = if let Some(hex) = tok.strip_prefix("0x").or_else(|| tok.strip_prefix("0X")) {
        u64::from_str_radix(hex, 16)
    } else {
        tok.parse()
    };
    parsed.map_err(|_| parse_err(line, format!("invalid {what} `{tok}`")))
}

struct Parser {
    program: TraceProgram,
    /// (kernel open, cta open, warp open with its starting line).
    warp_open: Option<usize>,
    current_instrs: Vec<TraceInstruction>,
    saw_exit: bool,
}

impl Parser {
    fn close_warp(&mut self, at_line: usize) -> Result<(), TraceError> {
        let Some(open_line) = self.warp_open.take() else {
            return Ok(());
        };
        if self.current_instrs.is_empty() {
            return Err(parse_err(open_line, "warp has no instructions"));
        }
        if !self.saw_exit {
            return Err(parse_err(
                at_line,
                "warp must end with EXIT before this point",
            ));
        }
        let instrs = std::mem::take(&mut self.current_instrs);
        let kernel = self.program.kernels.last_mut().unwrap();
        let cta = kernel.ctas.last_mut().unwrap();
        cta.warps.last_mut().unwrap().instructions = instrs;
        self.saw_exit = false;
        Ok(())
    }

    fn push_instr(&mut self, line: usize, op: TraceOp) -> Result<(), TraceError> {
        if self.warp_open.is_none() {
            return Err(parse_err(line, "instruction outside of a WARP block"));
        }
        if self.saw_exit {
            return Err(parse_err(
                line,
                "EXIT must be the last instruction of a warp",
            ));
        }
        if matches!(op, TraceOp::Exit) {
            self.saw_exit = true;
        }
        let pc = self.current_instrs.len() as u32;
        self.current_instrs.push(TraceInstruction { pc, op });
        Ok(())
    }
}

/// Parses the trace grammar into a fully materialized program, preserving
/// instruction order exactly.
pub fn parse_trace(text: &str) -> Result<TraceProgram, TraceError> {
    let mut p = Parser {
        program: TraceProgram::default(),
        warp_open: None,
        current_instrs: Vec::new(),
        saw_exit: false,
    };
    let mut last_line = 0;
    for (idx, raw) in text.lines().enumerate() {
        let line = idx + 1;
        last_line = line;
        let stripped = match raw.find('#') {
            Some(pos) => &raw[..pos],
            None => raw,
        };
        let mut toks = stripped.split_whitespace();
        let Some(head) = toks.next() else { continue };
        let rest: Vec<&str> = toks.collect();
        let expect_args = |n: usize| -> Result<(), TraceError> {
            if rest.len() != n {
                Err(parse_err(
                    line,
                    format!("{head} expects {n} argument(s), got {}", rest.len()),
                ))
            } else {
                Ok(())
            }
        };
        match head {
            "KERNEL" => {
                expect_args(1)?;
                p.close_warp(line)?;
                p.program.kernels.push(KernelTrace {
                    name: rest[0].to_string(),
                    ctas: Vec::new(),
                });
            }
            "CTA" => {
                expect_args(1)?;
                p.close_warp(line)?;
                let Some(kernel) = p.program.kernels.last_mut() else {
                    return Err(parse_err(line, "CTA outside of a KERNEL block"));
                };
                let id = parse_int(rest[0], line, "CTA id")? as u32;
                let expected = kernel.ctas.len() as u32;
                if id != expected {
                    return Err(parse_err(
                        line,
                        format!("CTA id {id} out of order (expected {expected})"),
                    ));
                }
                kernel.ctas.push(CtaTrace {
                    cta_id: id,
                    warps: Vec::new(),
                });
            }
            "WARP" => {
                expect_args(1)?;
                p.close_warp(line)?;
                let Some(cta) = p.program.kernels.last_mut().and_then(|k| k.ctas.last_mut()) else {
                    return Err(parse_err(line, "WARP outside of a CTA block"));
                };
                let id = parse_int(rest[0], line, "warp id")? as u32;
                let expected = cta.warps.len() as u32;
                if id != expected {
                    return Err(parse_err(
                        line,
                        format!("warp id {id} out of order (expected {expected})"),
                    ));
                }
                cta.warps.push(WarpTrace {
                    warp_id: id,
                    instructions: Vec::new(),
                });
                p.warp_open = Some(line);
            }
            "ALU" => {
                expect_args(1)?;
                let latency = parse_int(rest[0], line, "ALU latency")? as u32;
                if latency == 0 {
                    return Err(parse_err(line, "ALU latency must be positive"));
                }
                p.push_instr(line, TraceOp::Alu { latency })?;
            }
            "LD" | "ST" => {
                expect_args(2)?;
                let addr = parse_int(rest[0], line, "address")?;
                let size = parse_int(rest[1], line, "access size")? as u32;
                if size == 0 {
                    return Err(parse_err(line, "access size must be positive"));
                }
                let op = if head == "LD" {
                    TraceOp::Ld { addr, size }
                } else {
                    TraceOp::St { addr, size }
                };
                p.push_instr(line, op)?;
            }
            "BAR" => {
                expect_args(0)?;
                p.push_instr(line, TraceOp::Bar)?;
            }
            "EXIT" => {
                expect_args(0)?;
                p.push_instr(line, TraceOp::Exit)?;
            }
            other => return Err(parse_err(line, format!("unknown directive `{other}`"))),
        }
    }
    p.close_warp(last_line + 1)?;
    for kernel in &p.program.kernels {
        for cta in &kernel.ctas {
            if cta.warps.is_empty() {
                return Err(parse_err(
                    last_line,
                    format!("kernel {} CTA {} has no warps", kernel.name, cta.cta_id),
                ));
            }
        }
    }
    Ok(p.program)
}

/// Renders a program back into the text grammar. `parse_trace(render(p)) == p`.
pub fn render_trace(program: &TraceProgram) -> String {
    let mut out = String::new();
    for kernel in &program.kernels {
        out.push_str("KERNEL ");
        out.push_str(&kernel.name);
        out.push('\n');
        for cta in &kernel.ctas {
            out.push_str(&format!("CTA {}\n", cta.cta_id));
            for warp in &cta.warps {
                out.push_str(&format!("WARP {}\n", warp.warp_id));
                for instr in &warp.instructions {
                    match instr.op {
                        TraceOp::Alu { latency } => out.push_str(&format!("ALU {latency}\n")),
                        TraceOp::Ld { addr, size } => {
                            out.push_str(&format!("LD 0x{addr:x} {size}\n"))
                        }
                        TraceOp::St { addr, size } => {
                            out.push_str(&format!("ST 0x{addr:x} {size}\n"))
                        }
                        TraceOp::Bar => out.push_str("BAR\n"),
                        TraceOp::Exit => out.push_str("EXIT\n"),
                    }
                }
            }
        }
    }
    out
}

impl TraceProgram {
    /// Checks that the program fits the machine: CTA warp counts within
    /// `warps_per_sm` and access sizes within one cache line.
    pub fn validate_against(&self, cfg: &GpuConfig) -> Result<(), TraceError> {
        let max_line = cfg.l1d_line_bytes.min(cfg.l2_line_bytes);
        for (ki, kernel) in self.kernels.iter().enumerate() {
            for (ci, cta) in kernel.ctas.iter().enumerate() {
                if cta.warps.len() > cfg.warps_per_sm {
                    return Err(TraceError::TooManyWarps {
                        kernel: ki,
                        cta: ci,
                        got: cta.warps.len(),
                        max: cfg.warps_per_sm,
                    });
                }
                for (wi, warp) in cta.warps.iter().enumerate() {
                    for instr in &warp.instructions {
                        if let TraceOp::Ld { size, .. } | TraceOp::St { size, .. } = instr.op {
                            if size as u64 > max_line {
                                return Err(TraceError::AccessTooWide {
                                    kernel: ki,
                                    cta: ci,
                                    warp: wi,
                                    size,
                                    line: max_line,
                                });
                            }
                        }
                    }
                }
            }
        }
        Ok(())
    }

    pub fn instruction_count(&self) -> u64 {
        self.kernels
            .iter()
            .map(KernelTrace::instruction_count)
            .sum()
    }
}

/// Exact per-kind instruction counts and per-kernel CTA counts.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct TraceSummary {
    pub ctas_per_kernel: Vec<usize>,
    pub alu: u64,
    pub ld: u64,
    pub st: u64,
    pub bar: u64,
    pub exit: u64,
}

impl TraceSummary {
    pub fn total(&self) -> u64 {
        self.alu + self.ld + self.st + self.bar + self.exit
    }
}

pub fn trace_stats(program: &TraceProgram) -> TraceSummary {
    let mut s = TraceSummary::default();
    for kernel in &program.kernels {
        s.ctas_per_kernel.push(kernel.ctas.len());
        for cta in &kernel.ctas {
            for warp in &cta.warps {
                for instr in &warp.instructions {
                    match instr.op {
                        TraceOp::Alu { .. } => s.alu += 1,
                        TraceOp::Ld { .. } => s.ld += 1,
                        TraceOp::St { .. } => s.st += 1,
                        TraceOp::Bar => s.bar += 1,
                        TraceOp::Exit => s.exit += 1,
                    }
                }
            }
        }
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;

    const MINIMAL: &str = "KERNEL k1\nCTA 0\nWARP 0\nALU 4\nEXIT\n";

    #[test]
    fn minimal_program_parses() {
        let p = parse_trace(MINIMAL).unwrap();
        assert_eq!(p.kernels.len(), 1);
        assert_eq!(p.kernels[0].ctas.len(), 1);
        assert_eq!(p.kernels[0].ctas[0].warps.len(), 1);
        assert_eq!(p.kernels[0].ctas[0].warps[0].instructions.len(), 2);
        let s = trace_stats(&p);
        assert_eq!((s.alu, s.exit, s.total()), (1, 1, 2));
    }

    #[test]
    fn too_many_warps_rejected_under_default_config() {
        let mut text = String::from("KERNEL k\nCTA 0\n");
        for w in 0..49 {
            text.push_str(&format!("WARP {w}\nEXIT\n"));
        }
        let p = parse_trace(&text).unwrap();
        let err = p.validate_against(&GpuConfig::default()).unwrap_err();
        assert!(err
            .to_string()
            .contains("warps per CTA exceeds warps_per_sm"));
    }

    #[test]
    fn exit_placement_enforced() {
        let err = parse_trace("KERNEL k\nCTA 0\nWARP 0\nEXIT\nALU 1\n").unwrap_err();
        assert!(err
            .to_string()
            .contains("EXIT must be the last instruction"));
        let err = parse_trace("KERNEL k\nCTA 0\nWARP 0\nALU 1\n").unwrap_err();
        assert!(err.to_string().contains("end with EXIT"));
    }

    #[test]
    fn bar_in_single_warp_cta_accepted() {
        parse_trace("KERNEL k\nCTA 0\nWARP 0\nBAR\nEXIT\n").unwrap();
    }

    #[test]
    fn hex_addresses_and_comments() {
        let p = parse_trace("# hdr\nKERNEL k\nCTA 0\nWARP 0\nLD 0x80 4 # load\nEXIT\n").unwrap();
        assert_eq!(
            p.kernels[0].ctas[0].warps[0].instructions[0].op,
            TraceOp::Ld { addr: 128, size: 4 }
        );
    }

    #[test]
    fn syntax_errors_carry_line_numbers() {
        let err = parse_trace("KERNEL k\nCTA 0\nWARP 0\nALU zero\nEXIT\n").unwrap_err();
        assert_eq!(
            err.to_string(),
            "line 4: invalid ALU latency `zero`".to_string()
        );
        let err = parse_trace("KERNEL k\nCTA 1\n").unwrap_err();
        assert!(err.to_string().contains("out of order"));
    }

    #[test]
    fn render_round_trip_on_minimal() {
        let p = parse_trace(MINIMAL).unwrap();
        assert_eq!(parse_trace(&render_trace(&p)).unwrap(), p);
    }
}
