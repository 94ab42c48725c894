//! Persistent worker pool for the parallel SM phase.
//!
//! The pool is created once per run and driven once per cycle: the
//! coordinating thread publishes a job, releases the workers through a
//! barrier, takes part as worker 0, and meets the workers at a second
//! barrier. Two loop schedules are offered: a static one that preassigns
//! chunk `b` to worker `b % workers`, and a dynamic one where workers claim
//! the next unclaimed chunk from a shared monotone counter. Which worker
//! executes an iteration can never influence simulated results — bodies own
//! disjoint state — so the schedule only affects wall time.

use std::cell::UnsafeCell;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Arc;
use std::thread::JoinHandle;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LoopSchedule {
    Static,
    Dynamic,
}

/// Sense-reversing spin barrier.
///
/// When the pool fits the machine, partners arrive within microseconds and
/// pure spinning is cheapest. With more workers than cores a descheduled
/// partner can take a scheduler quantum to show up, so the barrier must get
/// out of the way fast: a short spin, then yields, then brief sleeps.
pub struct SpinBarrier {
    n: usize,
    count: AtomicUsize,
    sense: AtomicUsize,
    spin_budget: u32,
}

const HOT_SPIN_BUDGET: u32 = 1 << 14;
const COLD_SPIN_BUDGET: u32 = 1 << 7;
const YIELD_BUDGET: u32 = 1 << 10;

impl SpinBarrier {
    pub fn new(n: usize) -> Self {
        let cores = std::thread::available_parallelism()
            .map(std::num::NonZeroUsize::get)
            .unwrap_or(1);
        let spin_budget = if n <= cores {
            HOT_SPIN_BUDGET
        } else {
            COLD_SPIN_BUDGET
        };
        Self {
            n,
            count: AtomicUsize::new(0),
            sense: AtomicUsize::new(0),
            spin_budget,
        }
    }

    /// Every participant passes its own `sense` flag, flipped on each use.
    pub fn wait(&self, sense: &mut usize) {
        let target = 1 - *sense;
        *sense = target;
        if self.count.fetch_add(1, Ordering::AcqRel) + 1 == self.n {
            self.count.store(0, Ordering::Relaxed);
            self.sense.store(target, Ordering::Release);
        } else {
            let mut tries = 0u32;
            while self.sense.load(Ordering::Acquire) != target {
                tries += 1;
                if tries < self.spin_budget {
                    std::hint::spin_loop();
                } else if tries < self.spin_budget + YIELD_BUDGET {
                    std::thread::yield_now();
                } else {
                    std::thread::sleep(std::time::Duration::from_micros(20));
                }
            }
        }
    }
}

type Body<'a> = dyn Fn(usize) + Sync + 'a;

struct Job {
    body: Option<*const Body<'static>>,
    n: usize,
    schedule: LoopSchedule,
    chunk: usize,
    shutdown: bool,
}

/// Keeps one value alone on its cache line pair; the claim counter and the
/// barriers are hammered from every worker and must not share lines with
/// each other or with the job description.
#[repr(align(128))]
struct Padded<T>(T);

struct Shared {
    workers: usize,
    start: Padded<SpinBarrier>,
    done: Padded<SpinBarrier>,
    job: Padded<UnsafeCell<Job>>,
    claim: Padded<AtomicUsize>,
}

// SAFETY: `job` is written by the coordinator strictly before the start
// barrier and read by workers strictly after it; the barrier pair provides
// the happens-before edges. The erased body pointer is only dereferenced
// between the two barriers, while the borrow it was made from is live.
unsafe impl Sync for Shared {}
unsafe impl Send for Shared {}

pub struct WorkerPool {
    shared: Arc<Shared>,
    threads: Vec<JoinHandle<()>>,
    start_sense: usize,
    done_sense: usize,
}

impl WorkerPool {
    pub fn new(workers: usize) -> Self {
        assert!(workers >= 1);
        let shared = Arc::new(Shared {
            workers,
            start: Padded(SpinBarrier::new(workers)),
            done: Padded(SpinBarrier::new(workers)),
            job: Padded(UnsafeCell::new(Job {
                body: None,
                n: 0,
                schedule: LoopSchedule::Static,
                chunk: 1,
                shutdown: false,
            })),
            claim: Padded(AtomicUsize::new(0)),
        });
        let threads = (1..workers)
            .map(|worker_id| {
                let shared = Arc::clone(&shared);
                std::thread::spawn(move || worker_loop(&shared, worker_id))
            })
            .collect();
        Self {
            shared,
            threads,
            start_sense: 0,
            done_sense: 0,
        }
    }

    pub fn workers(&self) -> usize {
        self.shared.workers
    }

    /// Runs `body(i)` for every `i in 0..n`, exactly once, under the given
    /// schedule. Returns only after all iterations completed (barrier).
    pub fn parallel_for(
        &mut self,
        n: usize,
        schedule: LoopSchedule,
        chunk: usize,
        body: &Body<'_>,
    ) {
        let chunk = chunk.max(1);
        if self.shared.workers == 1 {
            for i in 0..n {
                body(i);
            }
            return;
        }
        // SAFETY: the pointer outlives its use — workers only touch it
        // before the done barrier below, and `body` is borrowed for this
        // whole call.
        let erased: *const Body<'static> = unsafe { std::mem::transmute(body) };
        {
            let job = unsafe { &mut *self.shared.job.0.get() };
            job.body = Some(erased);
            job.n = n;
            job.schedule = schedule;
            job.chunk = chunk;
        }
        self.shared.claim.0.store(0, Ordering::Relaxed);
        self.shared.start.0.wait(&mut self.start_sense);
        run_share(&self.shared, 0, n, schedule, chunk, body);
        self.shared.done.0.wait(&mut self.done_sense);
    }
}

impl Drop for WorkerPool {
    fn drop(&mut self) {
        if self.shared.workers > 1 {
            {
                let job = unsafe { &mut *self.shared.job.0.get() };
                job.shutdown = true;
            }
            self.shared.start.0.wait(&mut self.start_sense);
            for t in self.threads.drain(..) {
                let _ = t.join();
            }
        }
    }
}

fn worker_loop(shared: &Shared, worker_id: usize) {
    let mut start_sense = 0;
    let mut done_sense = 0;
    loop {
        shared.start.0.wait(&mut start_sense);
        let (body, n, schedule, chunk) = {
            let job = unsafe { &*shared.job.0.get() };
            if job.shutdown {
                return;
            }
            (
                job.body.expect("job published"),
                job.n,
                job.schedule,
                job.chunk,
            )
        };
        let body = unsafe { &*body };
        run_share(shared, worker_id, n, schedule, chunk, body);
        shared.done.0.wait(&mut done_sense);
    }
}

fn run_share(
    shared: &Shared,
    worker: usize,
    n: usize,
    schedule: LoopSchedule,
    chunk: usize,
    body: &Body<'_>,
) {
    match schedule {
        LoopSchedule::Static => {
            for lo in static_chunk_starts(n, shared.workers, chunk, worker) {
                for i in lo..(lo + chunk).min(n) {
                    body(i);
                }
            }
        }
        LoopSchedule::Dynamic => loop {
            let block = shared.claim.0.fetch_add(1, Ordering::Relaxed);
            let lo = block * chunk;
            if lo >= n {
                break;
            }
            for i in lo..(lo + chunk).min(n) {
                body(i);
            }
        },
    }
}

/// Chunk start offsets owned by `worker` under the static schedule:
/// iteration `i` belongs to worker `(i / chunk) % workers`, processed in
/// ascending order.
pub fn static_chunk_starts(
    n: usize,
    workers: usize,
    chunk: usize,
    worker: usize,
) -> impl Iterator<Item = usize> {
    (0..)
        .map(move |round| (worker + round * workers) * chunk)
        .take_while(move |&lo| lo < n)
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::sync::atomic::AtomicU32;

    #[test]
    fn static_assignment_formula() {
        let got: Vec<usize> = static_chunk_starts(80, 16, 1, 0).collect();
        assert_eq!(got, vec![0, 16, 32, 48, 64]);
        let got: Vec<usize> = static_chunk_starts(10, 4, 2, 1).collect();
        assert_eq!(got, vec![2]); // chunk [2,3]
        let all: Vec<usize> = (0..4)
            .flat_map(|w| static_chunk_starts(10, 4, 2, w))
            .collect();
        let mut covered: Vec<usize> = all.iter().flat_map(|&lo| lo..(lo + 2).min(10)).collect();
        covered.sort_unstable();
        assert_eq!(covered, (0..10).collect::<Vec<_>>());
    }

    fn exactly_once(workers: usize, schedule: LoopSchedule, chunk: usize) {
        let n = 137;
        let hits: Vec<AtomicU32> = (0..n).map(|_| AtomicU32::new(0)).collect();
        let mut pool = WorkerPool::new(workers);
        // Reuse the pool across many invocations, like the engine does per
        // cycle.
        for _ in 0..50 {
            let body = |i: usize| {
                hits[i].fetch_add(1, Ordering::Relaxed);
            };
            pool.parallel_for(n, schedule, chunk, &body);
        }
        for (i, h) in hits.iter().enumerate() {
            assert_eq!(h.load(Ordering::Relaxed), 50, "index {i}");
        }
    }

    #[test]
    fn static_runs_every_iteration_exactly_once() {
        exactly_once(1, LoopSchedule::Static, 1);
        exactly_once(4, LoopSchedule::Static, 1);
        exactly_once(3, LoopSchedule::Static, 5);
    }

    #[test]
    fn dynamic_runs_every_iteration_exactly_once() {
        exactly_once(4, LoopSchedule::Dynamic, 1);
        exactly_once(8, LoopSchedule::Dynamic, 3);
    }

    #[test]
    fn zero_iterations_is_a_noop() {
        let mut pool = WorkerPool::new(2);
        pool.parallel_for(0, LoopSchedule::Dynamic, 1, &|_| panic!("no work"));
    }

    #[test]
    fn barrier_survives_heavy_reuse() {
        let barrier = SpinBarrier::new(2);
        let barrier = &barrier;
        std::thread::scope(|s| {
            s.spawn(move || {
                let mut sense = 0;
                for _ in 0..10_000 {
                    barrier.wait(&mut sense);
                }
            });
            let mut sense = 0;
            for _ in 0..10_000 {
                barrier.wait(&mut sense);
            }
        });
    }
}
