//! Placement files.
//!
//! Jobs go to a CSV with header `job_id,block_size,t_start,t_end,address,map_start`
//! (all decimal). The mapping table goes to a sidecar next to it, one
//! `start end` pair of hex addresses per line, the same format the live
//! allocation server uses for its mapping dumps.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use super::{Job, Mapping, Placement};
use crate::error::PlacementIoError;

pub const PLACEMENT_HEADER: [&str; 6] =
    ["job_id", "block_size", "t_start", "t_end", "address", "map_start"];

pub fn write_placement<W: Write>(placement: &Placement, sink: W) -> Result<(), PlacementIoError> {
    write_jobs(&placement.jobs, sink)
}

pub(crate) fn write_jobs<W: Write>(jobs: &[Job], sink: W) -> Result<(), PlacementIoError> {
    let mut w = BufWriter::new(sink);
    writeln!(w, "{}", PLACEMENT_HEADER.join(","))?;
    for j in jobs {
        writeln!(
            w,
            "{},{},{},{},{},{}",
            j.job_id, j.block_size, j.t_start, j.t_end, j.address, j.map_start
        )?;
    }
    w.flush()?;
    Ok(())
}

/// Reads jobs back. Without a mapping table, one mapping per distinct
/// `map_start` is derived, just long enough to hold its jobs. The total time
/// is the latest job end, which is exact for simulator output: the block of
/// the final malloc ends (freed or leaked) at the final time.
pub fn read_placement<R: Read>(
    source: R,
    mappings: Option<Vec<Mapping>>,
) -> Result<Placement, PlacementIoError> {
    let jobs = read_jobs(source)?;
    let total_time = jobs.iter().map(|j| j.t_end).max().unwrap_or(0);
    let mappings = mappings.unwrap_or_else(|| derive_mappings(&jobs));
    Ok(Placement { jobs, mappings, total_time })
}

pub(crate) fn read_jobs<R: Read>(source: R) -> Result<Vec<Job>, PlacementIoError> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(false)
        .flexible(true)
        .from_reader(source);
    let mut records = reader.records();
    let header = records.next().ok_or(PlacementIoError::MissingHeader)?.map_err(csv_err(1))?;
    if header.iter().ne(PLACEMENT_HEADER.iter().copied()) {
        return Err(PlacementIoError::BadHeader(header.iter().collect::<Vec<_>>().join(",")));
    }
    let mut jobs = Vec::new();
    for (i, record) in records.enumerate() {
        let line = i as u64 + 2;
        let record = record.map_err(csv_err(line))?;
        if record.len() != PLACEMENT_HEADER.len() {
            return Err(PlacementIoError::Malformed {
                line,
                field: "row",
                value: record.iter().collect::<Vec<_>>().join(","),
            });
        }
        let mut values = [0u64; 6];
        for (k, v) in values.iter_mut().enumerate() {
            *v = record[k].parse().map_err(|_| PlacementIoError::Malformed {
                line,
                field: PLACEMENT_HEADER[k],
                value: record[k].to_string(),
            })?;
        }
        let [job_id, block_size, t_start, t_end, address, map_start] = values;
        if t_end < t_start {
            return Err(PlacementIoError::Malformed { line, field: "t_end", value: t_end.to_string() });
        }
        jobs.push(Job { job_id, block_size, t_start, t_end, address, map_start });
    }
    Ok(jobs)
}

fn csv_err(line: u64) -> impl Fn(csv::Error) -> PlacementIoError {
    move |e| match e.into_kind() {
        csv::ErrorKind::Io(io) => PlacementIoError::Io(io),
        other => PlacementIoError::Malformed { line, field: "row", value: format!("{other:?}") },
    }
}

fn derive_mappings(jobs: &[Job]) -> Vec<Mapping> {
    let mut ends: std::collections::BTreeMap<u64, u64> = Default::default();
    for j in jobs {
        let e = ends.entry(j.map_start).or_insert(j.map_start);
        *e = (*e).max(j.end_address());
    }
    ends.into_iter().map(|(start, end)| Mapping::new(start, end - start)).collect()
}

pub fn write_mapping_table<W: Write>(mappings: &[Mapping], mut sink: W) -> std::io::Result<()> {
    for m in mappings {
        writeln!(sink, "{:#x} {:#x}", m.start, m.end())?;
    }
    sink.flush()
}

/// Parses `start end` hex lines, stopping at a blank line or end of input.
///
/// The `0x` prefix is optional, and `/proc/<pid>/maps` style lines
/// (`start-end perms offset ...`) are accepted as well.
pub fn parse_mapping_table<R: BufRead>(source: &mut R) -> Result<Vec<Mapping>, PlacementIoError> {
    let mut out = Vec::new();
    let mut line = String::new();
    let mut lineno = 0;
    loop {
        line.clear();
        if source.read_line(&mut line)? == 0 {
            break;
        }
        lineno += 1;
        let text = line.trim();
        if text.is_empty() {
            break;
        }
        let malformed = || PlacementIoError::Malformed {
            line: lineno,
            field: "mapping",
            value: text.to_string(),
        };
        let first = text.split_whitespace().next().ok_or_else(malformed)?;
        let (start, end) = match first.split_once('-') {
            Some((s, e)) => (s, e),
            None => (first, text.split_whitespace().nth(1).ok_or_else(malformed)?),
        };
        let hex = |s: &str| u64::from_str_radix(s.trim_start_matches("0x"), 16).ok();
        let (start, end) = hex(start).zip(hex(end)).ok_or_else(malformed)?;
        if end < start {
            return Err(malformed());
        }
        out.push(Mapping::new(start, end - start));
    }
    Ok(out)
}

pub fn maps_sidecar_path(placement: &Path) -> PathBuf {
    let mut name = placement.as_os_str().to_owned();
    name.push(".maps");
    PathBuf::from(name)
}

/// Writes the job CSV to `path` and the mapping table next to it.
pub fn save_placement(placement: &Placement, path: &Path) -> Result<(), PlacementIoError> {
    write_placement(placement, File::create(path)?)?;
    write_mapping_table(&placement.mappings, BufWriter::new(File::create(maps_sidecar_path(path))?))?;
    Ok(())
}

/// Loads a placement written by [`save_placement`]; the mapping sidecar is optional.
pub fn load_placement(path: &Path) -> Result<Placement, PlacementIoError> {
    let sidecar = maps_sidecar_path(path);
    let mappings = if sidecar.exists() {
        Some(parse_mapping_table(&mut BufReader::new(File::open(sidecar)?))?)
    } else {
        None
    };
    read_placement(BufReader::new(File::open(path)?), mappings)
}
