//! The final bin-packing representation.
//!
//! A placement is split into one subset per mapping. Within a subset, jobs are
//! ordered by creation time; the subsets themselves are unordered. Each subset
//! is normalized on its own so that its first job starts at time zero and its
//! lowest job sits in the first page.

use std::collections::BTreeMap;
use std::fs::{self, File};
use std::io::{BufReader, BufWriter, Write};
use std::path::Path;

use crate::error::InstanceError;
use crate::sim::{read_jobs, write_jobs};
use crate::sim::{Job, Placement};

pub const DEFAULT_PAGE_SIZE: u64 = 4096;

pub const MANIFEST_FILE: &str = "manifest.txt";

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub enum Normalization {
    /// Shift addresses down by whole pages only, keeping page offsets intact.
    #[default]
    PageAligned,
    /// Move the lowest job to address zero. Page boundaries no longer line up
    /// with the original ones, so fragmentation can change.
    Exact,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MappingInstance {
    /// Start of the mapping in the original address space.
    pub map_start: u64,
    pub jobs: Vec<Job>,
    pub page_size: u64,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BinPackInstance {
    pub mappings: Vec<MappingInstance>,
    pub page_size: u64,
    pub total_time: u64,
}

impl BinPackInstance {
    pub fn job_count(&self) -> usize {
        self.mappings.iter().map(|m| m.jobs.len()).sum()
    }
}

pub fn check_page_size(page_size: u64) -> Result<(), InstanceError> {
    if page_size.is_power_of_two() {
        Ok(())
    } else {
        Err(InstanceError::BadPageSize(page_size))
    }
}

pub fn build_instance(
    placement: &Placement,
    page_size: u64,
    normalization: Normalization,
) -> Result<BinPackInstance, InstanceError> {
    check_page_size(page_size)?;
    let mut groups: BTreeMap<u64, Vec<Job>> = BTreeMap::new();
    for job in &placement.jobs {
        if !placement.mappings.iter().any(|m| m.start == job.map_start) {
            return Err(InstanceError::UnknownMapping { job_id: job.job_id, map_start: job.map_start });
        }
        groups.entry(job.map_start).or_default().push(*job);
    }
    let mappings = groups
        .into_iter()
        .map(|(map_start, mut jobs)| {
            jobs.sort_by_key(|j| (j.t_start, j.job_id));
            normalize(&mut jobs, page_size, normalization);
            MappingInstance { map_start, jobs, page_size }
        })
        .collect();
    Ok(BinPackInstance { mappings, page_size, total_time: placement.total_time })
}

/// Shifts times so the earliest start is zero and addresses so the lowest
/// job lands in the first page (or exactly at zero).
pub fn normalize(jobs: &mut [Job], page_size: u64, normalization: Normalization) {
    let Some(t0) = jobs.iter().map(|j| j.t_start).min() else {
        return;
    };
    let low = jobs.iter().map(|j| j.address).min().unwrap();
    let shift = match normalization {
        Normalization::PageAligned => low / page_size * page_size,
        Normalization::Exact => low,
    };
    for j in jobs {
        j.t_start -= t0;
        j.t_end -= t0;
        j.address -= shift;
    }
}

fn mapping_file_name(map_start: u64) -> String {
    format!("mapping_{map_start:016x}.csv")
}

/// Writes `manifest.txt` plus one placement-format CSV per mapping into `dir`.
/// Mapping files left over from an earlier write are removed.
pub fn write_instance(instance: &BinPackInstance, dir: &Path) -> Result<(), InstanceError> {
    fs::create_dir_all(dir)?;
    for entry in fs::read_dir(dir)? {
        let path = entry?.path();
        let name = path.file_name().and_then(|n| n.to_str()).unwrap_or_default();
        if name.starts_with("mapping_") && name.ends_with(".csv") {
            fs::remove_file(&path)?;
        }
    }
    let mut manifest = BufWriter::new(File::create(dir.join(MANIFEST_FILE))?);
    writeln!(manifest, "page_size={}", instance.page_size)?;
    writeln!(manifest, "total_time={}", instance.total_time)?;
    for m in &instance.mappings {
        let name = mapping_file_name(m.map_start);
        write_jobs(&m.jobs, File::create(dir.join(&name))?)?;
        writeln!(manifest, "mapping={name}")?;
    }
    manifest.flush()?;
    Ok(())
}

pub fn read_instance(dir: &Path) -> Result<BinPackInstance, InstanceError> {
    let text = fs::read_to_string(dir.join(MANIFEST_FILE))?;
    let mut page_size = None;
    let mut total_time = None;
    let mut files = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let bad = || InstanceError::Manifest(format!("line {}: `{line}`", i + 1));
        let (key, value) = line.split_once('=').ok_or_else(bad)?;
        match key {
            "page_size" => page_size = Some(value.parse::<u64>().map_err(|_| bad())?),
            "total_time" => total_time = Some(value.parse::<u64>().map_err(|_| bad())?),
            "mapping" => files.push(value.to_string()),
            _ => return Err(bad()),
        }
    }
    let page_size = page_size.ok_or_else(|| InstanceError::Manifest("missing page_size".into()))?;
    let total_time = total_time.ok_or_else(|| InstanceError::Manifest("missing total_time".into()))?;
    check_page_size(page_size)?;

    let mut mappings = Vec::with_capacity(files.len());
    for file in files {
        let path = dir.join(&file);
        let mismatch = |reason: &str| InstanceError::MappingFile { file: file.clone(), reason: reason.into() };
        if !path.is_file() {
            return Err(mismatch("listed in manifest but missing"));
        }
        let jobs = read_jobs(BufReader::new(File::open(&path)?))?;
        let map_start = jobs.first().ok_or_else(|| mismatch("no jobs"))?.map_start;
        if jobs.iter().any(|j| j.map_start != map_start) {
            return Err(mismatch("jobs from more than one mapping"));
        }
        if jobs.iter().any(|j| j.t_end > total_time) {
            return Err(mismatch("job ends after total_time"));
        }
        mappings.push(MappingInstance { map_start, jobs, page_size });
    }
    Ok(BinPackInstance { mappings, page_size, total_time })
}
