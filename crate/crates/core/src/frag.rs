//! External fragmentation of a bin-packing instance.
//!
//! Time is cut into spans at every job start and end. Inside a span the set
//! of live jobs is fixed, so the span can be scanned vertically. A gap is a
//! free address interval that lies within one page and has a live job of the
//! same page directly above it. Free space above the highest live byte of a
//! page is not a gap, and nothing is counted in pages without live jobs.
//!
//! For a mapping, `F` is the summed gap area and `L` the summed job area, both
//! exact integers in byte x allocated-byte units. The instance-wide ratio is
//! `sum(F) / sum(L)`.
//!
//! Three independent routes compute `F`:
//! - [`mapping_frag`], an incremental sweep used for real work;
//! - [`spans`] followed by [`gaps_in_span`], a literal per-span evaluation;
//! - [`brute_force_frag`], a rasterization of the unit grid.

use std::collections::{BTreeMap, HashMap};
use std::io::{BufRead, Write};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::thread;

use crate::binpack::{BinPackInstance, MappingInstance};
use crate::error::FragError;
use crate::sim::Job;

/// Rasterization refuses instances with more cells than this.
pub const DEFAULT_CELL_LIMIT: u128 = 10_000_000;

/// Below this many spans a mapping is never split between workers.
const MIN_SPANS_PER_CHUNK: usize = 1024;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct FragOptions {
    /// Count free space between a page's base and its lowest live byte.
    pub floor_gaps: bool,
    pub workers: usize,
}

impl Default for FragOptions {
    fn default() -> Self {
        FragOptions {
            floor_gaps: true,
            workers: thread::available_parallelism().map_or(1, |n| n.get()),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Span {
    pub t_begin: u64,
    pub t_end: u64,
    /// Indices into the mapping's job list, in job order.
    pub live: Vec<usize>,
}

impl Span {
    pub fn width(&self) -> u64 {
        self.t_end - self.t_begin
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct MappingFrag {
    pub map_start: u64,
    /// Total gap area.
    pub gap_area: u128,
    /// Total job area.
    pub job_area: u128,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FragmentationReport {
    pub per_mapping: Vec<MappingFrag>,
    pub total_gap: u128,
    pub total_job: u128,
    pub ratio: f64,
}

impl FragmentationReport {
    /// Aggregates per-mapping sums; fails when there is no job area at all.
    pub fn from_mappings(per_mapping: Vec<MappingFrag>) -> Result<Self, FragError> {
        let total_gap = per_mapping.iter().map(|m| m.gap_area).sum();
        let total_job: u128 = per_mapping.iter().map(|m| m.job_area).sum();
        if total_job == 0 {
            return Err(FragError::Undefined);
        }
        Ok(FragmentationReport {
            per_mapping,
            total_gap,
            total_job,
            ratio: total_gap as f64 / total_job as f64,
        })
    }
}

/// The distinct event times of a mapping, paired with the jobs live between
/// consecutive ones. Zero-duration jobs take no part; intervals where nothing
/// is live are left out.
pub fn spans(mapping: &MappingInstance) -> Vec<Span> {
    let jobs = &mapping.jobs;
    let mut times: Vec<u64> = jobs
        .iter()
        .filter(|j| j.t_end > j.t_start)
        .flat_map(|j| [j.t_start, j.t_end])
        .collect();
    times.sort_unstable();
    times.dedup();

    let mut out = Vec::new();
    for w in times.windows(2) {
        let (t_begin, t_end) = (w[0], w[1]);
        let live: Vec<usize> = jobs
            .iter()
            .enumerate()
            .filter(|(_, j)| j.t_start <= t_begin && j.t_end >= t_end)
            .map(|(i, _)| i)
            .collect();
        if !live.is_empty() {
            out.push(Span { t_begin, t_end, live });
        }
    }
    out
}

/// Total gap height among `extents` (disjoint `[start, end)` address ranges).
pub fn gap_height(extents: &[(u64, u64)], page_size: u64, floor_gaps: bool) -> u64 {
    let mut pieces: BTreeMap<u64, Vec<(u64, u64)>> = BTreeMap::new();
    for &(start, end) in extents.iter().filter(|(s, e)| e > s) {
        let mut cursor = start;
        while cursor < end {
            let page = cursor / page_size;
            let page_end = (page as u128 + 1) * page_size as u128;
            let piece_end = (end as u128).min(page_end) as u64;
            pieces.entry(page).or_default().push((cursor, piece_end));
            cursor = piece_end;
        }
    }
    let mut height = 0;
    for (page, mut list) in pieces {
        list.sort_unstable();
        let mut floor = if floor_gaps { page * page_size } else { list[0].0 };
        for (start, end) in list {
            // every free interval below a live piece has that piece as its ceiling
            height += start - floor;
            floor = end;
        }
    }
    height
}

/// Gap area of one span.
pub fn gaps_in_span(span: &Span, jobs: &[Job], page_size: u64, floor_gaps: bool) -> u128 {
    let extents: Vec<(u64, u64)> =
        span.live.iter().map(|&i| (jobs[i].address, jobs[i].end_address())).collect();
    gap_height(&extents, page_size, floor_gaps) as u128 * span.width() as u128
}

pub fn job_area(jobs: &[Job]) -> u128 {
    jobs.iter().map(Job::area).sum()
}

/// Live extents of one mapping plus the running gap height.
///
/// Only the first and last page of a job can hold gaps: pages in between are
/// covered by the job alone. So inserting or removing a job only needs those
/// two pages re-evaluated.
struct PageSweep {
    page_size: u64,
    floor_gaps: bool,
    live: BTreeMap<u64, u64>,
    page_live: HashMap<u64, u64>,
    gap: u64,
}

impl PageSweep {
    fn new(page_size: u64, floor_gaps: bool) -> Self {
        PageSweep { page_size, floor_gaps, live: BTreeMap::new(), page_live: HashMap::new(), gap: 0 }
    }

    fn page_bounds(&self, page: u64) -> (u64, u64) {
        let base = page * self.page_size;
        (base, base.saturating_add(self.page_size))
    }

    fn page_gap(&self, page: u64) -> u64 {
        let (base, end) = self.page_bounds(page);
        let top = match self.live.range(..end).next_back() {
            Some((_, &e)) if e > base => e.min(end),
            _ => return 0,
        };
        let bottom = if self.floor_gaps {
            base
        } else {
            match self.live.range(..=base).next_back() {
                Some((_, &e)) if e > base => base,
                _ => *self.live.range(base..end).next().expect("page has a live extent").0,
            }
        };
        top - bottom - self.page_live.get(&page).copied().unwrap_or(0)
    }

    /// Pages whose gaps can change with the job, with the job's bytes in each.
    fn edge_pages(&self, job: &Job) -> [(u64, u64); 2] {
        let first = job.address / self.page_size;
        let last = (job.end_address() - 1) / self.page_size;
        let clip = |page: u64| {
            let (base, end) = self.page_bounds(page);
            job.end_address().min(end) - job.address.max(base)
        };
        if first == last {
            [(first, job.block_size), (first, 0)]
        } else {
            [(first, clip(first)), (last, clip(last))]
        }
    }

    fn update(&mut self, job: &Job, insert: bool) {
        if job.block_size == 0 {
            return;
        }
        let pages = self.edge_pages(job);
        let distinct = if pages[0].0 == pages[1].0 { 1 } else { 2 };
        for &(p, _) in &pages[..distinct] {
            self.gap -= self.page_gap(p);
        }
        if insert {
            self.live.insert(job.address, job.end_address());
        } else {
            self.live.remove(&job.address);
        }
        for &(p, bytes) in &pages {
            let counter = self.page_live.entry(p).or_insert(0);
            if insert {
                *counter += bytes;
            } else {
                *counter -= bytes;
                if *counter == 0 {
                    self.page_live.remove(&p);
                }
            }
        }
        for &(p, _) in &pages[..distinct] {
            self.gap += self.page_gap(p);
        }
    }
}

/// Event tables of one mapping, shared read-only by every worker.
struct SweepPlan<'a> {
    jobs: Vec<&'a Job>,
    times: Vec<u64>,
    starts: Vec<(u64, usize)>,
    ends: Vec<(u64, usize)>,
}

impl<'a> SweepPlan<'a> {
    fn new(mapping: &'a MappingInstance) -> Self {
        let jobs: Vec<&Job> = mapping
            .jobs
            .iter()
            .filter(|j| j.t_end > j.t_start && j.block_size > 0)
            .collect();
        let mut times: Vec<u64> = jobs.iter().flat_map(|j| [j.t_start, j.t_end]).collect();
        times.sort_unstable();
        times.dedup();
        let mut starts: Vec<(u64, usize)> = jobs.iter().enumerate().map(|(i, j)| (j.t_start, i)).collect();
        let mut ends: Vec<(u64, usize)> = jobs.iter().enumerate().map(|(i, j)| (j.t_end, i)).collect();
        starts.sort_unstable();
        ends.sort_unstable();
        SweepPlan { jobs, times, starts, ends }
    }

    fn span_count(&self) -> usize {
        self.times.len().saturating_sub(1)
    }

    /// Gap area over spans `first..last` (span k runs from `times[k]` to `times[k + 1]`).
    fn sweep(&self, first: usize, last: usize, page_size: u64, floor_gaps: bool) -> u128 {
        if first >= last {
            return 0;
        }
        let mut state = PageSweep::new(page_size, floor_gaps);
        let t0 = self.times[first];
        for j in &self.jobs {
            if j.t_start <= t0 && t0 < j.t_end {
                state.update(j, true);
            }
        }
        let mut next_start = self.starts.partition_point(|&(t, _)| t <= t0);
        let mut next_end = self.ends.partition_point(|&(t, _)| t <= t0);
        let mut area: u128 = 0;
        for k in first..last {
            let t = self.times[k + 1];
            area += state.gap as u128 * (t - self.times[k]) as u128;
            if k + 1 == last {
                break;
            }
            while next_end < self.ends.len() && self.ends[next_end].0 <= t {
                state.update(self.jobs[self.ends[next_end].1], false);
                next_end += 1;
            }
            while next_start < self.starts.len() && self.starts[next_start].0 <= t {
                state.update(self.jobs[self.starts[next_start].1], true);
                next_start += 1;
            }
        }
        area
    }
}

/// Gap and job area of a single mapping, computed sequentially.
pub fn mapping_frag(mapping: &MappingInstance, floor_gaps: bool) -> MappingFrag {
    let plan = SweepPlan::new(mapping);
    MappingFrag {
        map_start: mapping.map_start,
        gap_area: plan.sweep(0, plan.span_count(), mapping.page_size, floor_gaps),
        job_area: job_area(&mapping.jobs),
    }
}

/// Fragmentation of the whole instance.
///
/// Span ranges of every mapping are handed out to `options.workers` threads.
/// Each worker keeps its own integer partial sums, which are added together
/// once all work is done, so the result does not depend on the worker count.
pub fn total_frag(
    instance: &BinPackInstance,
    options: FragOptions,
) -> Result<FragmentationReport, FragError> {
    let plans: Vec<SweepPlan> = instance.mappings.iter().map(SweepPlan::new).collect();
    let workers = options.workers.max(1);

    let mut work: Vec<(usize, usize, usize)> = Vec::new();
    for (m, plan) in plans.iter().enumerate() {
        let spans = plan.span_count();
        let chunks = (workers * 4).min(spans.div_ceil(MIN_SPANS_PER_CHUNK)).max(1);
        let step = spans.div_ceil(chunks).max(1);
        let mut lo = 0;
        while lo < spans {
            let hi = (lo + step).min(spans);
            work.push((m, lo, hi));
            lo = hi;
        }
    }

    let next = AtomicUsize::new(0);
    let partials: Vec<Vec<u128>> = thread::scope(|scope| {
        let handles: Vec<_> = (0..workers.min(work.len()).max(1))
            .map(|_| {
                scope.spawn(|| {
                    let mut sums = vec![0u128; plans.len()];
                    loop {
                        let i = next.fetch_add(1, Ordering::Relaxed);
                        let Some(&(m, lo, hi)) = work.get(i) else { break };
                        sums[m] += plans[m].sweep(lo, hi, instance.page_size, options.floor_gaps);
                    }
                    sums
                })
            })
            .collect();
        handles.into_iter().map(|h| h.join().expect("fragmentation worker panicked")).collect()
    });

    let per_mapping = instance
        .mappings
        .iter()
        .enumerate()
        .map(|(m, mapping)| MappingFrag {
            map_start: mapping.map_start,
            gap_area: partials.iter().map(|p| p[m]).sum(),
            job_area: job_area(&mapping.jobs),
        })
        .collect();
    FragmentationReport::from_mappings(per_mapping)
}

/// Rasterizes every mapping onto a 1 byte x 1 allocated-byte grid and counts
/// gap cells and live cells directly.
pub fn brute_force_frag(
    instance: &BinPackInstance,
    floor_gaps: bool,
    cell_limit: u128,
) -> Result<FragmentationReport, FragError> {
    let per_mapping = instance
        .mappings
        .iter()
        .map(|m| rasterize(m, instance.page_size, floor_gaps, cell_limit))
        .collect::<Result<Vec<_>, _>>()?;
    FragmentationReport::from_mappings(per_mapping)
}

fn rasterize(
    mapping: &MappingInstance,
    page_size: u64,
    floor_gaps: bool,
    cell_limit: u128,
) -> Result<MappingFrag, FragError> {
    let jobs: Vec<&Job> = mapping.jobs.iter().filter(|j| j.area() > 0).collect();
    if jobs.is_empty() {
        return Ok(MappingFrag { map_start: mapping.map_start, gap_area: 0, job_area: 0 });
    }
    let lo = jobs.iter().map(|j| j.address).min().unwrap() / page_size * page_size;
    let hi = jobs.iter().map(|j| j.end_address()).max().unwrap().div_ceil(page_size) * page_size;
    let t_lo = jobs.iter().map(|j| j.t_start).min().unwrap();
    let t_hi = jobs.iter().map(|j| j.t_end).max().unwrap();
    let height = hi - lo;
    let width = t_hi - t_lo;
    let cells = height as u128 * width as u128;
    if cells > cell_limit {
        return Err(FragError::TooLarge { cells, limit: cell_limit });
    }

    let (h, w) = (height as usize, width as usize);
    let mut grid = vec![false; h * w];
    for j in &jobs {
        for t in (j.t_start - t_lo) as usize..(j.t_end - t_lo) as usize {
            let row = &mut grid[t * h..(t + 1) * h];
            row[(j.address - lo) as usize..(j.end_address() - lo) as usize].fill(true);
        }
    }

    let page = page_size as usize;
    let mut gap_cells: u128 = 0;
    let mut live_cells: u128 = 0;
    for t in 0..w {
        let column = &grid[t * h..(t + 1) * h];
        live_cells += column.iter().filter(|&&c| c).count() as u128;
        for cells in column.chunks(page) {
            let Some(top) = cells.iter().rposition(|&c| c) else { continue };
            let bottom = if floor_gaps { 0 } else { cells.iter().position(|&c| c).unwrap() };
            gap_cells += cells[bottom..top].iter().filter(|&&c| !c).count() as u128;
        }
    }
    Ok(MappingFrag { map_start: mapping.map_start, gap_area: gap_cells, job_area: live_cells })
}

pub const REPORT_HEADER: &str = "map_start,F_mi,L_mi";

/// Writes per-mapping rows followed by a `TOTAL,<F>,<L>,<ratio>` line.
pub fn write_report<W: Write>(report: &FragmentationReport, mut sink: W) -> std::io::Result<()> {
    writeln!(sink, "{REPORT_HEADER}")?;
    for m in &report.per_mapping {
        writeln!(sink, "{},{},{}", m.map_start, m.gap_area, m.job_area)?;
    }
    writeln!(sink, "TOTAL,{},{},{:.6}", report.total_gap, report.total_job, report.ratio)?;
    sink.flush()
}

pub fn read_report<R: BufRead>(source: R) -> Result<FragmentationReport, FragError> {
    let mut lines = source.lines();
    let header = lines.next().transpose()?.unwrap_or_default();
    if header.trim() != REPORT_HEADER {
        return Err(FragError::Report(format!("unexpected header `{header}`")));
    }
    let mut per_mapping = Vec::new();
    let mut total = None;
    for (i, line) in lines.enumerate() {
        let line = line?;
        let bad = || FragError::Report(format!("line {}: `{line}`", i + 2));
        let fields: Vec<&str> = line.trim().split(',').collect();
        if total.is_some() {
            return Err(bad());
        }
        match fields.as_slice() {
            ["TOTAL", f, l, _ratio] => {
                total = Some((f.parse::<u128>().map_err(|_| bad())?, l.parse::<u128>().map_err(|_| bad())?));
            }
            [m, f, l] => per_mapping.push(MappingFrag {
                map_start: m.parse().map_err(|_| bad())?,
                gap_area: f.parse().map_err(|_| bad())?,
                job_area: l.parse().map_err(|_| bad())?,
            }),
            _ => return Err(bad()),
        }
    }
    let (f, l) = total.ok_or_else(|| FragError::Report("missing TOTAL line".into()))?;
    let report = FragmentationReport::from_mappings(per_mapping)?;
    if (report.total_gap, report.total_job) != (f, l) {
        return Err(FragError::Report("TOTAL line disagrees with per-mapping rows".into()));
    }
    Ok(report)
}
