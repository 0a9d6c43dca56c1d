//! Placement simulation.
//!
//! Replays an elementary request stream through a [`PolicyBackend`] and records
//! every block the backend hands out as a [`Job`]: a rectangle spanning the
//! block's address extent and its lifetime. Time is measured in allocated
//! bytes. A malloc is stamped with the current time and then advances it by
//! the requested size; a free stamps the job's end without moving time.

mod backend;
mod io;
pub mod live;

use std::collections::{BTreeMap, HashMap};

pub use backend::{
    best_fit_backend, first_fit_backend, next_fit_backend, segregated_fit_backend, ArenaConfig,
    FitPolicy, FreeListBackend, ScriptedBackend, SegregatedBackend, DEFAULT_ARENA_BASE,
    DEFAULT_SIZE_CLASSES,
};
pub use io::{
    load_placement, maps_sidecar_path, parse_mapping_table, read_placement, save_placement,
    write_mapping_table, write_placement, PLACEMENT_HEADER,
};
pub(crate) use io::{read_jobs, write_jobs};

use crate::error::BackendError;
use crate::trace::ElementaryRequest;

/// A contiguous region of address space owned by the allocator.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Mapping {
    pub start: u64,
    pub len: u64,
}

impl Mapping {
    pub fn new(start: u64, len: u64) -> Self {
        Mapping { start, len }
    }

    pub fn end(&self) -> u64 {
        self.start.saturating_add(self.len)
    }

    pub fn contains(&self, address: u64) -> bool {
        address >= self.start && address < self.end()
    }
}

/// A block together with its lifetime.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Job {
    pub job_id: u64,
    pub block_size: u64,
    pub t_start: u64,
    pub t_end: u64,
    pub address: u64,
    pub map_start: u64,
}

impl Job {
    pub fn end_address(&self) -> u64 {
        self.address + self.block_size
    }

    pub fn duration(&self) -> u64 {
        self.t_end - self.t_start
    }

    /// Rectangle area in byte x allocated-byte units.
    pub fn area(&self) -> u128 {
        self.block_size as u128 * self.duration() as u128
    }
}

/// Result of a simulation: the jobs, the mappings they live in, and the
/// final value of the time axis.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Placement {
    pub jobs: Vec<Job>,
    pub mappings: Vec<Mapping>,
    pub total_time: u64,
}

impl Placement {
    /// Checks the structural invariants: ordered lifetimes, every job inside a
    /// known mapping, and no two simultaneously live jobs overlapping.
    pub fn validate(&self) -> Result<(), String> {
        let by_start: HashMap<u64, Mapping> = self.mappings.iter().map(|m| (m.start, *m)).collect();
        for j in &self.jobs {
            if j.t_end < j.t_start {
                return Err(format!("job {} ends before it starts", j.job_id));
            }
            if j.t_end > self.total_time {
                return Err(format!("job {} ends after total time", j.job_id));
            }
            let m = by_start
                .get(&j.map_start)
                .ok_or_else(|| format!("job {} has unknown mapping {:#x}", j.job_id, j.map_start))?;
            if j.address < m.start || j.address.saturating_add(j.block_size) > m.end() {
                return Err(format!("job {} lies outside mapping {:#x}", j.job_id, m.start));
            }
        }
        if let Some((a, b)) = find_overlap(&self.jobs) {
            return Err(format!("jobs {a} and {b} overlap while both live"));
        }
        Ok(())
    }
}

/// Returns the ids of two jobs whose rectangles intersect, if any.
pub fn find_overlap(jobs: &[Job]) -> Option<(u64, u64)> {
    // (time, is_start, index); ends sort before starts at equal times.
    let mut events: Vec<(u64, bool, usize)> = Vec::with_capacity(jobs.len() * 2);
    for (i, j) in jobs.iter().enumerate() {
        if j.t_end > j.t_start && j.block_size > 0 {
            events.push((j.t_start, true, i));
            events.push((j.t_end, false, i));
        }
    }
    events.sort_unstable();
    let mut live: BTreeMap<u64, usize> = BTreeMap::new();
    for (_, is_start, i) in events {
        let job = &jobs[i];
        if !is_start {
            live.remove(&job.address);
            continue;
        }
        if let Some((_, &k)) = live.range(..=job.address).next_back() {
            if jobs[k].end_address() > job.address {
                return Some((jobs[k].job_id, job.job_id));
            }
        }
        if let Some((_, &k)) = live.range(job.address..).next() {
            if jobs[k].address < job.end_address() {
                return Some((jobs[k].job_id, job.job_id));
            }
        }
        live.insert(job.address, i);
    }
    None
}

/// A block as placed by a backend.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Block {
    pub address: u64,
    /// Bytes dedicated to the block, per-block header included.
    pub extent: u64,
    pub map_start: u64,
}

/// A placement policy: something that decides where blocks go.
///
/// Implementations must never return an extent overlapping a live one, and
/// the extent must be at least the requested size.
pub trait PolicyBackend {
    fn allocate(&mut self, size: u64, origin: Option<u64>) -> Result<Block, BackendError>;

    fn release(&mut self, block: &Block, origin: Option<u64>) -> Result<(), BackendError>;

    /// Every mapping the backend has used so far.
    fn mappings(&self) -> Vec<Mapping>;
}

impl<B: PolicyBackend + ?Sized> PolicyBackend for Box<B> {
    fn allocate(&mut self, size: u64, origin: Option<u64>) -> Result<Block, BackendError> {
        (**self).allocate(size, origin)
    }

    fn release(&mut self, block: &Block, origin: Option<u64>) -> Result<(), BackendError> {
        (**self).release(block, origin)
    }

    fn mappings(&self) -> Vec<Mapping> {
        (**self).mappings()
    }
}

#[derive(Debug, Clone, Copy, Default)]
pub struct SimOptions {
    /// Skip frees of unknown addresses instead of failing.
    pub lenient: bool,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct SimReport {
    pub requests: usize,
    pub jobs: usize,
    pub leaks: usize,
    /// Frees skipped in lenient mode.
    pub skipped_frees: usize,
    /// Live blocks whose origin was reused by a later malloc in lenient mode.
    pub orphaned: usize,
}

#[derive(Debug, thiserror::Error)]
pub enum SimError {
    #[error("request {index}: free of {target:#x}, which is not a live allocation")]
    UnknownFree { index: usize, target: u64 },
    #[error("request {index}: malloc returned {origin:#x}, which is still live")]
    DuplicateOrigin { index: usize, origin: u64 },
    #[error("request {index}: backend failure: {source}")]
    Backend {
        index: usize,
        #[source]
        source: BackendError,
        /// Everything simulated before the failure; open jobs end at the failure time.
        partial: Box<Placement>,
    },
}

/// Replays `requests` through `backend`.
pub fn simulate<B: PolicyBackend + ?Sized>(
    requests: &[ElementaryRequest],
    backend: &mut B,
    options: SimOptions,
) -> Result<(Placement, SimReport), SimError> {
    let mut time: u64 = 0;
    let mut jobs: Vec<Job> = Vec::new();
    let mut open: Vec<bool> = Vec::new();
    let mut live: HashMap<u64, (usize, Block)> = HashMap::new();
    let mut report = SimReport { requests: requests.len(), ..SimReport::default() };

    let finish = |mut jobs: Vec<Job>, open: &[bool], time: u64, mappings: Vec<Mapping>| {
        for (job, _) in jobs.iter_mut().zip(open).filter(|(_, &o)| o) {
            job.t_end = time;
        }
        Placement { jobs, mappings, total_time: time }
    };

    for (index, request) in requests.iter().enumerate() {
        match *request {
            ElementaryRequest::Malloc { size, origin } => {
                if let Some(o) = origin {
                    if live.contains_key(&o) {
                        if !options.lenient {
                            return Err(SimError::DuplicateOrigin { index, origin: o });
                        }
                        live.remove(&o);
                        report.orphaned += 1;
                    }
                }
                let block = match backend.allocate(size, origin) {
                    Ok(b) => b,
                    Err(source) => {
                        let partial = finish(jobs, &open, time, backend.mappings());
                        return Err(SimError::Backend { index, source, partial: Box::new(partial) });
                    }
                };
                let job_index = jobs.len();
                jobs.push(Job {
                    job_id: job_index as u64,
                    block_size: block.extent,
                    t_start: time,
                    t_end: time,
                    address: block.address,
                    map_start: block.map_start,
                });
                open.push(true);
                if let Some(o) = origin {
                    live.insert(o, (job_index, block));
                }
                time = time.checked_add(size).expect("allocated-bytes clock overflow");
            }
            ElementaryRequest::Free { target } => {
                let Some((job_index, block)) = live.remove(&target) else {
                    if options.lenient {
                        report.skipped_frees += 1;
                        continue;
                    }
                    return Err(SimError::UnknownFree { index, target });
                };
                if let Err(source) = backend.release(&block, Some(target)) {
                    let partial = finish(jobs, &open, time, backend.mappings());
                    return Err(SimError::Backend { index, source, partial: Box::new(partial) });
                }
                jobs[job_index].t_end = time;
                open[job_index] = false;
            }
        }
    }

    report.jobs = jobs.len();
    report.leaks = open.iter().filter(|&&o| o).count();
    let placement = finish(jobs, &open, time, backend.mappings());
    Ok((placement, report))
}
