use std::io;

use thiserror::Error;

use crate::trace::ReqType;

#[derive(Debug, Error)]
pub enum TraceError {
    #[error("trace is empty; expected a header row")]
    MissingHeader,
    #[error("unexpected trace header `{0}`")]
    BadHeader(String),
    #[error("line {line}: malformed {field} `{value}`")]
    Malformed { line: u64, field: &'static str, value: String },
    #[error("line {line}: unknown request type `{value}`")]
    UnknownReqType { line: u64, value: String },
    #[error("request {index}: ill-formed {req_type}: {reason}")]
    IllFormed { index: usize, req_type: ReqType, reason: &'static str },
    #[error("request {index}: calloc size {el_size} * {els_num} overflows")]
    SizeOverflow { index: usize, el_size: u64, els_num: u64 },
    #[error("frame {index}: unknown request opcode {op}")]
    UnknownWireOp { index: usize, op: u8 },
    #[error(transparent)]
    Io(#[from] io::Error),
}

/// Failure reported by a placement backend.
#[derive(Debug, Error)]
pub enum BackendError {
    #[error("out of memory: no room for {size} bytes")]
    Exhausted { size: u64 },
    #[error("release of {address:#x}, which is not a live block")]
    NotLive { address: u64 },
    #[error("allocation server returned a null address for {size} bytes")]
    ServerNull { size: u64 },
    #[error("address {address:#x} is not inside any mapping reported by the server")]
    Unattributed { address: u64 },
    #[error("protocol error: {0}")]
    Protocol(String),
    #[error("allocation server closed the connection")]
    ServerExit,
    #[error(transparent)]
    Io(#[from] io::Error),
}

#[derive(Debug, Error)]
pub enum PlacementIoError {
    #[error("placement has no header row")]
    MissingHeader,
    #[error("unexpected placement header `{0}`")]
    BadHeader(String),
    #[error("line {line}: malformed {field} `{value}`")]
    Malformed { line: u64, field: &'static str, value: String },
    #[error(transparent)]
    Io(#[from] io::Error),
}

#[derive(Debug, Error)]
pub enum InstanceError {
    #[error("page size {0} is not a power of two")]
    BadPageSize(u64),
    #[error("job {job_id} belongs to mapping {map_start:#x}, which is not in the mapping table")]
    UnknownMapping { job_id: u64, map_start: u64 },
    #[error("manifest: {0}")]
    Manifest(String),
    #[error("{file}: {reason}")]
    MappingFile { file: String, reason: String },
    #[error(transparent)]
    Placement(#[from] PlacementIoError),
    #[error(transparent)]
    Io(#[from] io::Error),
}

#[derive(Debug, Error)]
pub enum FragError {
    #[error("undefined fragmentation: total job area is zero")]
    Undefined,
    #[error("instance too large for rasterization: {cells} cells exceed the {limit} limit")]
    TooLarge { cells: u128, limit: u128 },
    #[error("report: {0}")]
    Report(String),
    #[error(transparent)]
    Io(#[from] io::Error),
}

#[derive(Debug, Error)]
pub enum AnalysisError {
    #[error("length mismatch: {0} vs {1}")]
    LengthMismatch(usize, usize),
    #[error("need at least 2 observations, got {0}")]
    TooFew(usize),
    #[error("constant input has no ranking")]
    Constant,
    #[error("non-finite value in input")]
    NonFinite,
    #[error("no RSS samples")]
    NoSamples,
    #[error("missing measurements for: {}", .0.join(", "))]
    Missing(Vec<String>),
    #[error("workload `{0}` has fewer than 2 allocators")]
    TooFewAllocators(String),
    #[error("workload `{workload}`: {source}")]
    Workload {
        workload: String,
        #[source]
        source: Box<AnalysisError>,
    },
    #[error("duplicate entry: {0}")]
    Duplicate(String),
    #[error("line {line}: {reason}")]
    Malformed { line: u64, reason: String },
    #[error(transparent)]
    Io(#[from] io::Error),
}
