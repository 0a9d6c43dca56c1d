//! Driver side of the lockstep allocation-server protocol.
//!
//! The server runs the allocator under test. Each request is a 17-byte frame:
//!
//! ```text
//! op: u8         0 = malloc, 1 = free, 2 = dump mapping table
//! size: u64 LE   requested bytes (malloc only)
//! origin: u64 LE address the traced program saw; frees name the block by it
//! ```
//!
//! Malloc and free are answered with a 16-byte frame `{address: u64 LE,
//! extent: u64 LE}` where `extent` is the usable size. A free is answered with
//! zeros. A mapping dump is answered with `start end` hex lines and a blank
//! line. The driver never sends a frame before the previous answer arrived.

use std::collections::BTreeMap;
use std::io::{self, BufRead, BufReader, Write};
use std::process::{Child, ChildStdin, ChildStdout, Command, Stdio};

use super::{io::parse_mapping_table, Block, Mapping, PolicyBackend};
use crate::error::BackendError;

pub const OP_MALLOC: u8 = 0;
pub const OP_FREE: u8 = 1;
pub const OP_MAPS: u8 = 2;

pub const REQUEST_LEN: usize = 17;
pub const RESPONSE_LEN: usize = 16;

pub fn encode_request(op: u8, size: u64, origin: u64) -> [u8; REQUEST_LEN] {
    let mut frame = [0u8; REQUEST_LEN];
    frame[0] = op;
    frame[1..9].copy_from_slice(&size.to_le_bytes());
    frame[9..17].copy_from_slice(&origin.to_le_bytes());
    frame
}

pub fn decode_request(frame: &[u8; REQUEST_LEN]) -> (u8, u64, u64) {
    let size = u64::from_le_bytes(frame[1..9].try_into().unwrap());
    let origin = u64::from_le_bytes(frame[9..17].try_into().unwrap());
    (frame[0], size, origin)
}

pub fn encode_response(address: u64, extent: u64) -> [u8; RESPONSE_LEN] {
    let mut frame = [0u8; RESPONSE_LEN];
    frame[..8].copy_from_slice(&address.to_le_bytes());
    frame[8..].copy_from_slice(&extent.to_le_bytes());
    frame
}

/// A [`PolicyBackend`] that forwards every request to an allocation server.
pub struct LiveBackend<R, W> {
    reader: R,
    writer: W,
    header_bytes: u64,
    known: Vec<Mapping>,
    /// Every mapping any job was attributed to, keyed by start.
    used: BTreeMap<u64, Mapping>,
    refreshes: usize,
}

impl<R: BufRead, W: Write> LiveBackend<R, W> {
    pub fn new(reader: R, writer: W) -> Self {
        LiveBackend {
            reader,
            writer,
            header_bytes: 0,
            known: Vec::new(),
            used: BTreeMap::new(),
            refreshes: 0,
        }
    }

    /// Per-block metadata the allocator keeps in front of each block.
    pub fn with_header(mut self, header_bytes: u64) -> Self {
        self.header_bytes = header_bytes;
        self
    }

    /// How many times the mapping table was fetched.
    pub fn refreshes(&self) -> usize {
        self.refreshes
    }

    fn send(&mut self, op: u8, size: u64, origin: u64) -> Result<(), BackendError> {
        self.writer
            .write_all(&encode_request(op, size, origin))
            .and_then(|_| self.writer.flush())
            .map_err(disconnect)
    }

    fn receive(&mut self) -> Result<(u64, u64), BackendError> {
        let mut frame = [0u8; RESPONSE_LEN];
        self.reader.read_exact(&mut frame).map_err(disconnect)?;
        let address = u64::from_le_bytes(frame[..8].try_into().unwrap());
        let extent = u64::from_le_bytes(frame[8..].try_into().unwrap());
        Ok((address, extent))
    }

    /// Fetches the server's current mapping table.
    pub fn refresh_mappings(&mut self) -> Result<&[Mapping], BackendError> {
        self.send(OP_MAPS, 0, 0)?;
        let mut maps = parse_mapping_table(&mut self.reader).map_err(|e| match e {
            crate::error::PlacementIoError::Io(io) => disconnect(io),
            other => BackendError::Protocol(other.to_string()),
        })?;
        maps.sort();
        self.known = maps;
        self.refreshes += 1;
        Ok(&self.known)
    }

    fn containing(&self, address: u64) -> Option<Mapping> {
        let i = self.known.partition_point(|m| m.start <= address);
        i.checked_sub(1).map(|i| self.known[i]).filter(|m| m.contains(address))
    }
}

fn disconnect(e: io::Error) -> BackendError {
    match e.kind() {
        io::ErrorKind::UnexpectedEof | io::ErrorKind::BrokenPipe => BackendError::ServerExit,
        _ => BackendError::Io(e),
    }
}

impl<R: BufRead, W: Write> PolicyBackend for LiveBackend<R, W> {
    fn allocate(&mut self, size: u64, origin: Option<u64>) -> Result<Block, BackendError> {
        self.send(OP_MALLOC, size, origin.unwrap_or(0))?;
        let (address, usable) = self.receive()?;
        if address == 0 {
            return Err(BackendError::ServerNull { size });
        }
        if usable < size {
            return Err(BackendError::Protocol(format!(
                "usable size {usable} below requested {size} at {address:#x}"
            )));
        }
        let mapping = match self.containing(address) {
            Some(m) => m,
            None => {
                self.refresh_mappings()?;
                self.containing(address).ok_or(BackendError::Unattributed { address })?
            }
        };
        self.used.insert(mapping.start, mapping);
        Ok(Block {
            address: address.saturating_sub(self.header_bytes),
            extent: usable + self.header_bytes,
            map_start: mapping.start,
        })
    }

    fn release(&mut self, _block: &Block, origin: Option<u64>) -> Result<(), BackendError> {
        self.send(OP_FREE, 0, origin.unwrap_or(0))?;
        self.receive()?;
        Ok(())
    }

    fn mappings(&self) -> Vec<Mapping> {
        self.used.values().copied().collect()
    }
}

/// A spawned allocation server talking over its stdin/stdout.
pub struct ServerProcess {
    pub child: Child,
}

impl ServerProcess {
    /// Starts `command` and wires its standard streams to a [`LiveBackend`].
    pub fn spawn(
        mut command: Command,
    ) -> io::Result<(ServerProcess, LiveBackend<BufReader<ChildStdout>, ChildStdin>)> {
        let mut child = command.stdin(Stdio::piped()).stdout(Stdio::piped()).spawn()?;
        let stdin = child.stdin.take().expect("piped stdin");
        let stdout = child.stdout.take().expect("piped stdout");
        Ok((ServerProcess { child }, LiveBackend::new(BufReader::new(stdout), stdin)))
    }
}
