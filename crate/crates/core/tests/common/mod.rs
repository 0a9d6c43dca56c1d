#![allow(dead_code)]

use binfrag::binpack::{BinPackInstance, MappingInstance};
use binfrag::sim::{Job, Mapping, ScriptedBackend};
use binfrag::trace::{ElementaryRequest, RawRequest};
use rand::seq::SliceRandom;
use rand::Rng;

/// The six requests of the worked example: A(1), B(2), free A, C(3), free B, free C.
pub fn three_block_trace() -> Vec<RawRequest> {
    vec![
        RawRequest::malloc(0xa0, 1),
        RawRequest::malloc(0xb0, 2),
        RawRequest::free(0xa0),
        RawRequest::malloc(0xc0, 3),
        RawRequest::free(0xb0),
        RawRequest::free(0xc0),
    ]
}

/// Places A at 1, B at 3 and C at 0 inside one 8-byte mapping.
pub fn three_block_backend() -> ScriptedBackend {
    ScriptedBackend::new(vec![1, 3, 0], vec![Mapping::new(0, 8)])
}

/// A well-formed elementary stream: every free names a live origin, and a
/// fraction of blocks is never freed.
pub fn random_stream<R: Rng>(rng: &mut R, mallocs: usize, max_size: u64, max_live: usize) -> Vec<ElementaryRequest> {
    let mut out = Vec::with_capacity(mallocs * 2);
    let mut live: Vec<u64> = Vec::new();
    let mut next_origin = 0x5500_0000u64;
    let mut issued = 0;
    while issued < mallocs {
        let free_now = !live.is_empty() && (live.len() >= max_live || rng.gen_bool(0.45));
        if free_now {
            let i = rng.gen_range(0..live.len());
            out.push(ElementaryRequest::Free { target: live.swap_remove(i) });
        } else {
            let size = if rng.gen_ratio(1, 40) { 0 } else { rng.gen_range(1..=max_size) };
            next_origin += 0x40;
            out.push(ElementaryRequest::Malloc { size, origin: Some(next_origin) });
            live.push(next_origin);
            issued += 1;
        }
    }
    live.shuffle(rng);
    let keep = live.len() / 3;
    for target in live.drain(keep..) {
        out.push(ElementaryRequest::Free { target });
    }
    out
}

fn overlaps(a: &Job, b: &Job) -> bool {
    a.t_start < b.t_end && b.t_start < a.t_end && a.address < b.end_address() && b.address < a.end_address()
}

/// Random disjoint rectangles inside `[0, address_limit) x [0, time_limit)`.
pub fn random_jobs<R: Rng>(rng: &mut R, max_jobs: usize, address_limit: u64, time_limit: u64, map_start: u64) -> Vec<Job> {
    let target = rng.gen_range(1..=max_jobs);
    let mut jobs: Vec<Job> = Vec::new();
    let mut attempts = 0;
    while jobs.len() < target && attempts < max_jobs * 50 {
        attempts += 1;
        let max_size = if rng.gen_bool(0.2) { address_limit / 2 } else { address_limit / 16 };
        let block_size = if rng.gen_ratio(1, 30) { 0 } else { rng.gen_range(1..=max_size.max(1)) };
        let address = rng.gen_range(0..=address_limit - block_size.max(1));
        let t_start = rng.gen_range(0..time_limit);
        let max_len = if rng.gen_bool(0.5) { time_limit / 4 } else { time_limit / 40 };
        let duration = if rng.gen_ratio(1, 30) { 0 } else { rng.gen_range(1..=max_len.max(1)) };
        let t_end = (t_start + duration).min(time_limit);
        let job = Job { job_id: jobs.len() as u64, block_size, t_start, t_end, address, map_start };
        if !jobs.iter().any(|j| overlaps(j, &job)) {
            jobs.push(job);
        }
    }
    jobs
}

pub fn single_mapping(jobs: Vec<Job>, page_size: u64) -> BinPackInstance {
    let total_time = jobs.iter().map(|j| j.t_end).max().unwrap_or(0);
    let map_start = jobs.first().map_or(0, |j| j.map_start);
    BinPackInstance { mappings: vec![MappingInstance { map_start, jobs, page_size }], page_size, total_time }
}

/// Several mappings of random rectangles, each with at least one job of positive area.
pub fn random_instance<R: Rng>(rng: &mut R, page_size: u64, max_jobs: usize, pages: u64, time_limit: u64) -> BinPackInstance {
    let count = rng.gen_range(1..=3);
    let mut mappings = Vec::new();
    for m in 0..count {
        let map_start = m as u64 * 0x100_0000;
        let mut jobs = random_jobs(rng, max_jobs, pages * page_size, time_limit, map_start);
        if !jobs.iter().any(|j| j.area() > 0) {
            jobs = vec![Job { job_id: 0, block_size: 1, t_start: 0, t_end: 1, address: 0, map_start }];
        }
        jobs.sort_by_key(|j| (j.t_start, j.job_id));
        mappings.push(MappingInstance { map_start, jobs, page_size });
    }
    let total_time = mappings.iter().flat_map(|m| m.jobs.iter().map(|j| j.t_end)).max().unwrap_or(0);
    BinPackInstance { mappings, page_size, total_time }
}

