//! Allocation-interface traces.
//!
//! A trace is a CSV file with one row per intercepted call:
//!
//! ```text
//! req_type,in_address,out_address,el_size,els_num
//! malloc,(nil),0x55a,12,1
//! free,0x55a,(nil),(nil),(nil)
//! calloc,(nil),0x63b,128,1000
//! ```
//!
//! Absent values are written as the literal `(nil)`. Addresses are `0x`-prefixed
//! lowercase hex, sizes and counts are decimal. [`unpack`] turns every row into
//! the two elementary operations the placement simulator understands.

use std::fmt;
use std::io::{Read, Write};
use std::str::FromStr;

use crate::error::TraceError;

pub const TRACE_HEADER: [&str; 5] = ["req_type", "in_address", "out_address", "el_size", "els_num"];

/// Literal marking an absent field.
pub const NIL: &str = "(nil)";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ReqType {
    Malloc,
    Free,
    Calloc,
    Realloc,
    PosixMemalign,
    AlignedAlloc,
    Valloc,
    Memalign,
    Pvalloc,
}

impl ReqType {
    pub const ALL: [ReqType; 9] = [
        ReqType::Malloc,
        ReqType::Free,
        ReqType::Calloc,
        ReqType::Realloc,
        ReqType::PosixMemalign,
        ReqType::AlignedAlloc,
        ReqType::Valloc,
        ReqType::Memalign,
        ReqType::Pvalloc,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            ReqType::Malloc => "malloc",
            ReqType::Free => "free",
            ReqType::Calloc => "calloc",
            ReqType::Realloc => "realloc",
            ReqType::PosixMemalign => "posix_memalign",
            ReqType::AlignedAlloc => "aligned_alloc",
            ReqType::Valloc => "valloc",
            ReqType::Memalign => "memalign",
            ReqType::Pvalloc => "pvalloc",
        }
    }

    /// Opcode used in the binary frames emitted by the interposition shim.
    pub fn wire_op(self) -> u8 {
        ReqType::ALL.iter().position(|t| *t == self).unwrap() as u8
    }

    pub fn from_wire_op(op: u8) -> Option<ReqType> {
        ReqType::ALL.get(op as usize).copied()
    }

    fn is_aligned_family(self) -> bool {
        matches!(
            self,
            ReqType::PosixMemalign
                | ReqType::AlignedAlloc
                | ReqType::Valloc
                | ReqType::Memalign
                | ReqType::Pvalloc
        )
    }
}

impl fmt::Display for ReqType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for ReqType {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        ReqType::ALL
            .iter()
            .copied()
            .find(|t| t.as_str() == s)
            .ok_or_else(|| s.to_string())
    }
}

/// One traced call, exactly as logged.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RawRequest {
    pub req_type: ReqType,
    pub in_address: Option<u64>,
    pub out_address: Option<u64>,
    pub el_size: Option<u64>,
    pub els_num: Option<u64>,
}

impl RawRequest {
    pub fn malloc(out: u64, size: u64) -> Self {
        RawRequest {
            req_type: ReqType::Malloc,
            in_address: None,
            out_address: Some(out),
            el_size: Some(size),
            els_num: Some(1),
        }
    }

    pub fn free(target: u64) -> Self {
        RawRequest {
            req_type: ReqType::Free,
            in_address: Some(target),
            out_address: None,
            el_size: None,
            els_num: None,
        }
    }

    pub fn calloc(out: u64, el_size: u64, els_num: u64) -> Self {
        RawRequest {
            req_type: ReqType::Calloc,
            in_address: None,
            out_address: Some(out),
            el_size: Some(el_size),
            els_num: Some(els_num),
        }
    }

    pub fn realloc(input: Option<u64>, out: Option<u64>, size: u64) -> Self {
        RawRequest {
            req_type: ReqType::Realloc,
            in_address: input,
            out_address: out,
            el_size: Some(size),
            els_num: Some(1),
        }
    }

    /// Any of the alignment-taking entry points. The alignment itself is not traced.
    pub fn aligned(req_type: ReqType, out: u64, size: u64) -> Self {
        assert!(req_type.is_aligned_family(), "{req_type} is not an aligned allocation");
        RawRequest {
            req_type,
            in_address: None,
            out_address: Some(out),
            el_size: Some(size),
            els_num: Some(1),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ElementaryRequest {
    /// `origin` is the address the traced program received; frees refer back to it.
    Malloc { size: u64, origin: Option<u64> },
    Free { target: u64 },
}

/// Non-fatal oddities found while unpacking.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LintKind {
    /// `free(NULL)`: dropped.
    FreeNull,
    /// `realloc(NULL, s)`: treated as `malloc(s)`.
    ReallocNull,
    /// `realloc(p, 0)`: treated as `free(p)`.
    ReallocZero,
    /// An allocating call returned NULL; the block is simulated but can never be freed.
    NullResult,
}

impl fmt::Display for LintKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            LintKind::FreeNull => "free of null pointer dropped",
            LintKind::ReallocNull => "realloc of null pointer treated as malloc",
            LintKind::ReallocZero => "realloc to size 0 treated as free",
            LintKind::NullResult => "allocation returned null",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LintWarning {
    /// 0-based position of the request in the trace.
    pub index: usize,
    pub kind: LintKind,
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Unpacked {
    pub ops: Vec<ElementaryRequest>,
    pub warning: Option<LintKind>,
}

/// Parses a trace CSV. The header row is mandatory.
pub fn parse_trace<R: Read>(input: R) -> Result<Vec<RawRequest>, TraceError> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(false)
        .flexible(true)
        .from_reader(input);
    let mut records = reader.records();

    match records.next() {
        None => return Err(TraceError::MissingHeader),
        Some(header) => {
            let header = header.map_err(|e| csv_error(e, 1))?;
            if header.iter().ne(TRACE_HEADER.iter().copied()) {
                return Err(TraceError::BadHeader(header.iter().collect::<Vec<_>>().join(",")));
            }
        }
    }

    let mut out = Vec::new();
    for (i, record) in records.enumerate() {
        let line = i as u64 + 2;
        let record = record.map_err(|e| csv_error(e, line))?;
        let line = record.position().map(|p| p.line()).unwrap_or(line);
        if record.len() != TRACE_HEADER.len() {
            return Err(TraceError::Malformed {
                line,
                field: "row",
                value: record.iter().collect::<Vec<_>>().join(","),
            });
        }
        let req_type = record[0]
            .parse::<ReqType>()
            .map_err(|value| TraceError::UnknownReqType { line, value })?;
        out.push(RawRequest {
            req_type,
            in_address: parse_field(&record[1], line, "in_address", parse_address)?,
            out_address: parse_field(&record[2], line, "out_address", parse_address)?,
            el_size: parse_field(&record[3], line, "el_size", parse_decimal)?,
            els_num: parse_field(&record[4], line, "els_num", parse_decimal)?,
        });
    }
    Ok(out)
}

fn csv_error(e: csv::Error, line: u64) -> TraceError {
    match e.into_kind() {
        csv::ErrorKind::Io(io) => TraceError::Io(io),
        other => TraceError::Malformed { line, field: "row", value: format!("{other:?}") },
    }
}

fn parse_field(
    raw: &str,
    line: u64,
    field: &'static str,
    parse: fn(&str) -> Option<u64>,
) -> Result<Option<u64>, TraceError> {
    if raw == NIL {
        return Ok(None);
    }
    parse(raw)
        .map(Some)
        .ok_or_else(|| TraceError::Malformed { line, field, value: raw.to_string() })
}

pub(crate) fn parse_address(s: &str) -> Option<u64> {
    let digits = s.strip_prefix("0x")?;
    if digits.is_empty() {
        return None;
    }
    u64::from_str_radix(digits, 16).ok()
}

fn parse_decimal(s: &str) -> Option<u64> {
    if s.is_empty() || !s.bytes().all(|b| b.is_ascii_digit()) {
        return None;
    }
    s.parse().ok()
}

fn fmt_address(v: Option<u64>) -> String {
    v.map_or_else(|| NIL.to_string(), |a| format!("{a:#x}"))
}

fn fmt_decimal(v: Option<u64>) -> String {
    v.map_or_else(|| NIL.to_string(), |a| a.to_string())
}

/// Writes requests in the same format [`parse_trace`] reads.
pub fn write_trace<W: Write>(requests: &[RawRequest], sink: W) -> Result<(), TraceError> {
    let mut w = csv::WriterBuilder::new().has_headers(false).from_writer(sink);
    w.write_record(TRACE_HEADER).map_err(io_from_csv)?;
    for r in requests {
        w.write_record([
            r.req_type.as_str().to_string(),
            fmt_address(r.in_address),
            fmt_address(r.out_address),
            fmt_decimal(r.el_size),
            fmt_decimal(r.els_num),
        ])
        .map_err(io_from_csv)?;
    }
    w.flush()?;
    Ok(())
}

fn io_from_csv(e: csv::Error) -> TraceError {
    match e.into_kind() {
        csv::ErrorKind::Io(io) => TraceError::Io(io),
        other => TraceError::Io(std::io::Error::other(format!("{other:?}"))),
    }
}

/// Rewrites one traced call as elementary malloc/free operations.
///
/// `realloc(p, s)` becomes `free(p); malloc(s)` and `calloc(s, n)` becomes
/// `malloc(n * s)`. Null-pointer and zero-size corner cases follow libc and
/// are reported through [`Unpacked::warning`].
pub fn unpack(request: &RawRequest, index: usize) -> Result<Unpacked, TraceError> {
    use ElementaryRequest::{Free, Malloc};

    let malformed = |reason: &'static str| TraceError::IllFormed {
        index,
        req_type: request.req_type,
        reason,
    };
    let size = || request.el_size.ok_or_else(|| malformed("missing el_size"));
    let null_result = |origin: Option<u64>| origin.is_none().then_some(LintKind::NullResult);

    if request.req_type != ReqType::Calloc && !matches!(request.els_num, None | Some(1)) {
        return Err(malformed("els_num must be absent or 1"));
    }

    let unpacked = match request.req_type {
        ReqType::Free => match request.in_address {
            None => Unpacked { ops: vec![], warning: Some(LintKind::FreeNull) },
            Some(target) => Unpacked { ops: vec![Free { target }], warning: None },
        },
        ReqType::Malloc => {
            if request.in_address.is_some() {
                return Err(malformed("malloc takes no input address"));
            }
            let origin = request.out_address;
            Unpacked { ops: vec![Malloc { size: size()?, origin }], warning: null_result(origin) }
        }
        ReqType::Calloc => {
            if request.in_address.is_some() {
                return Err(malformed("calloc takes no input address"));
            }
            let el_size = size()?;
            let els_num = request.els_num.ok_or_else(|| malformed("missing els_num"))?;
            let total = el_size
                .checked_mul(els_num)
                .ok_or(TraceError::SizeOverflow { index, el_size, els_num })?;
            let origin = request.out_address;
            Unpacked { ops: vec![Malloc { size: total, origin }], warning: null_result(origin) }
        }
        ReqType::Realloc => {
            let s = size()?;
            let origin = request.out_address;
            match request.in_address {
                None => Unpacked {
                    ops: vec![Malloc { size: s, origin }],
                    warning: Some(LintKind::ReallocNull),
                },
                Some(target) if s == 0 => Unpacked {
                    ops: vec![Free { target }],
                    warning: Some(LintKind::ReallocZero),
                },
                Some(target) => Unpacked {
                    ops: vec![Free { target }, Malloc { size: s, origin }],
                    warning: null_result(origin),
                },
            }
        }
        t if t.is_aligned_family() => {
            if request.in_address.is_some() {
                return Err(malformed("aligned allocation takes no input address"));
            }
            let origin = request.out_address;
            Unpacked { ops: vec![Malloc { size: size()?, origin }], warning: null_result(origin) }
        }
        _ => unreachable!(),
    };
    Ok(unpacked)
}

/// Unpacks a whole trace in order, collecting lint warnings.
pub fn unpack_trace(
    requests: &[RawRequest],
) -> Result<(Vec<ElementaryRequest>, Vec<LintWarning>), TraceError> {
    let mut ops = Vec::with_capacity(requests.len());
    let mut lint = Vec::new();
    for (index, r) in requests.iter().enumerate() {
        let u = unpack(r, index)?;
        ops.extend(u.ops);
        if let Some(kind) = u.warning {
            lint.push(LintWarning { index, kind });
        }
    }
    Ok((ops, lint))
}

/// Size of one shim frame: op byte plus four little-endian u64 fields.
pub const WIRE_RECORD_LEN: usize = 33;

/// Decodes the fixed-size frames the interposition shim writes to its pipe.
///
/// Zero addresses decode as absent. Frees carry no sizes. Returns the decoded
/// requests and whether a trailing partial frame was dropped.
pub fn decode_wire_records(bytes: &[u8]) -> Result<(Vec<RawRequest>, bool), TraceError> {
    let mut out = Vec::with_capacity(bytes.len() / WIRE_RECORD_LEN);
    let mut frames = bytes.chunks_exact(WIRE_RECORD_LEN);
    for (index, frame) in frames.by_ref().enumerate() {
        let field = |i: usize| u64::from_le_bytes(frame[1 + 8 * i..9 + 8 * i].try_into().unwrap());
        let req_type = ReqType::from_wire_op(frame[0])
            .ok_or(TraceError::UnknownWireOp { index, op: frame[0] })?;
        let nonzero = |v: u64| (v != 0).then_some(v);
        let (el_size, els_num) = if req_type == ReqType::Free {
            (None, None)
        } else {
            (Some(field(2)), Some(field(3)))
        };
        out.push(RawRequest {
            req_type,
            in_address: nonzero(field(0)),
            out_address: nonzero(field(1)),
            el_size,
            els_num,
        });
    }
    Ok((out, !frames.remainder().is_empty()))
}

/// Inverse of [`decode_wire_records`] for a single request.
pub fn encode_wire_record(r: &RawRequest) -> [u8; WIRE_RECORD_LEN] {
    let mut frame = [0u8; WIRE_RECORD_LEN];
    frame[0] = r.req_type.wire_op();
    let fields = [
        r.in_address.unwrap_or(0),
        r.out_address.unwrap_or(0),
        r.el_size.unwrap_or(0),
        r.els_num.unwrap_or(0),
    ];
    for (i, v) in fields.iter().enumerate() {
        frame[1 + 8 * i..9 + 8 * i].copy_from_slice(&v.to_le_bytes());
    }
    frame
}
