//! Deterministic model allocators.
//!
//! These stand in for real allocators so the whole pipeline runs anywhere.
//! Each one owns synthetic mappings laid out from [`ArenaConfig::base`].

use std::collections::{BTreeMap, BTreeSet, HashMap};

use super::{Block, Mapping, PolicyBackend};
use crate::error::BackendError;

pub const DEFAULT_ARENA_BASE: u64 = 0x1000_0000;

pub const DEFAULT_SIZE_CLASSES: [u64; 9] = [16, 32, 64, 128, 256, 512, 1024, 2048, 4096];

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ArenaConfig {
    /// First byte of the first mapping. Must be page-aligned.
    pub base: u64,
    pub page_size: u64,
    /// Pages per arena. Segregated fit creates one arena per size class.
    pub pages: u64,
    /// Bytes of metadata prepended to every block.
    pub header_bytes: u64,
}

impl ArenaConfig {
    pub fn new(pages: u64) -> Self {
        ArenaConfig { base: DEFAULT_ARENA_BASE, page_size: 4096, pages, header_bytes: 0 }
    }

    pub fn with_header(self, header_bytes: u64) -> Self {
        ArenaConfig { header_bytes, ..self }
    }

    fn arena_bytes(&self) -> u64 {
        self.pages.checked_mul(self.page_size).expect("arena size overflows")
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FitPolicy {
    First,
    Best,
    Next,
}

/// Address-ordered free list with coalescing.
#[derive(Debug, Clone)]
struct FreeList {
    holes: BTreeMap<u64, u64>,
    by_size: BTreeSet<(u64, u64)>,
}

impl FreeList {
    fn new(start: u64, len: u64) -> Self {
        let mut list = FreeList { holes: BTreeMap::new(), by_size: BTreeSet::new() };
        if len > 0 {
            list.insert(start, len);
        }
        list
    }

    fn insert(&mut self, start: u64, len: u64) {
        self.holes.insert(start, len);
        self.by_size.insert((len, start));
    }

    fn remove(&mut self, start: u64) -> u64 {
        let len = self.holes.remove(&start).expect("hole exists");
        self.by_size.remove(&(len, start));
        len
    }

    fn first_fit(&self, size: u64) -> Option<u64> {
        self.holes.iter().find(|(_, &len)| len >= size).map(|(&s, _)| s)
    }

    fn best_fit(&self, size: u64) -> Option<u64> {
        self.by_size.range((size, 0)..).next().map(|&(_, s)| s)
    }

    /// First fit starting at the hole containing `rover`, wrapping around.
    fn next_fit(&self, size: u64, rover: u64) -> Option<u64> {
        let containing = self
            .holes
            .range(..=rover)
            .next_back()
            .filter(|(&s, &len)| s + len > rover);
        containing
            .into_iter()
            .chain(self.holes.range(rover.saturating_add(1)..))
            .chain(self.holes.range(..=rover))
            .find(|(_, &len)| len >= size)
            .map(|(&s, _)| s)
    }

    /// Carves `size` bytes from the front of the hole at `start`.
    fn take(&mut self, start: u64, size: u64) {
        let len = self.remove(start);
        if len > size {
            self.insert(start + size, len - size);
        }
    }

    fn give(&mut self, mut start: u64, mut len: u64) {
        if let Some((&ps, &pl)) = self.holes.range(..start).next_back() {
            if ps + pl == start {
                self.remove(ps);
                start = ps;
                len += pl;
            }
        }
        let end = start + len;
        if self.holes.contains_key(&end) {
            len += self.remove(end);
        }
        self.insert(start, len);
    }
}

/// One arena managed by a free list under first, best or next fit.
#[derive(Debug, Clone)]
pub struct FreeListBackend {
    policy: FitPolicy,
    mapping: Mapping,
    free: FreeList,
    rover: u64,
    live: HashMap<u64, u64>,
    header_bytes: u64,
    round_to: u64,
}

impl FreeListBackend {
    pub fn new(policy: FitPolicy, config: ArenaConfig) -> Self {
        let mapping = Mapping::new(config.base, config.arena_bytes());
        FreeListBackend {
            policy,
            mapping,
            free: FreeList::new(mapping.start, mapping.len),
            rover: mapping.start,
            live: HashMap::new(),
            header_bytes: config.header_bytes,
            round_to: 1,
        }
    }

    /// Rounds every extent up to a multiple of `granule`.
    fn with_rounding(mut self, granule: u64) -> Self {
        self.round_to = granule.max(1);
        self
    }

    pub fn policy(&self) -> FitPolicy {
        self.policy
    }

    pub fn mapping(&self) -> Mapping {
        self.mapping
    }
}

pub fn first_fit_backend(config: ArenaConfig) -> FreeListBackend {
    FreeListBackend::new(FitPolicy::First, config)
}

pub fn best_fit_backend(config: ArenaConfig) -> FreeListBackend {
    FreeListBackend::new(FitPolicy::Best, config)
}

pub fn next_fit_backend(config: ArenaConfig) -> FreeListBackend {
    FreeListBackend::new(FitPolicy::Next, config)
}

impl PolicyBackend for FreeListBackend {
    fn allocate(&mut self, size: u64, _origin: Option<u64>) -> Result<Block, BackendError> {
        let extent = size
            .checked_add(self.header_bytes)
            .and_then(|e| e.checked_next_multiple_of(self.round_to))
            .ok_or(BackendError::Exhausted { size })?;
        if extent == 0 {
            // Empty blocks occupy no space; park them at the next free byte.
            let address = self.free.holes.keys().next().copied().unwrap_or(self.mapping.start);
            return Ok(Block { address, extent, map_start: self.mapping.start });
        }
        let found = match self.policy {
            FitPolicy::First => self.free.first_fit(extent),
            FitPolicy::Best => self.free.best_fit(extent),
            FitPolicy::Next => self.free.next_fit(extent, self.rover),
        };
        let address = found.ok_or(BackendError::Exhausted { size })?;
        self.free.take(address, extent);
        self.rover = address + extent;
        self.live.insert(address, extent);
        Ok(Block { address, extent, map_start: self.mapping.start })
    }

    fn release(&mut self, block: &Block, _origin: Option<u64>) -> Result<(), BackendError> {
        if block.extent == 0 {
            return Ok(());
        }
        match self.live.remove(&block.address) {
            Some(extent) if extent == block.extent => {
                self.free.give(block.address, extent);
                Ok(())
            }
            _ => Err(BackendError::NotLive { address: block.address }),
        }
    }

    fn mappings(&self) -> Vec<Mapping> {
        vec![self.mapping]
    }
}

#[derive(Debug, Clone)]
struct ClassArena {
    class: u64,
    mapping: Mapping,
    next_slot: u64,
    free_slots: BTreeSet<u64>,
    capacity: u64,
    page_size: u64,
}

impl ClassArena {
    fn slot_address(&self, slot: u64) -> u64 {
        if self.class <= self.page_size {
            let per_page = self.page_size / self.class;
            self.mapping.start + (slot / per_page) * self.page_size + (slot % per_page) * self.class
        } else {
            self.mapping.start + slot * self.class
        }
    }
}

/// Size-class segregated storage.
///
/// A request (plus header) is rounded up to the smallest class that holds it
/// and served from that class's own mapping. Slots of classes no larger than
/// a page never straddle a page boundary. Freed slots are reused lowest
/// first; otherwise the arena is bump-allocated. Requests above the largest
/// class go to a separate large-object mapping, rounded up to whole pages and
/// placed first fit.
#[derive(Debug, Clone)]
pub struct SegregatedBackend {
    arenas: Vec<ClassArena>,
    large: FreeListBackend,
    live: HashMap<u64, (usize, u64)>,
    header_bytes: u64,
}

pub fn segregated_fit_backend(
    config: ArenaConfig,
    classes: &[u64],
) -> Result<SegregatedBackend, String> {
    if classes.is_empty() {
        return Err("at least one size class is required".into());
    }
    if classes[0] == 0 || classes.windows(2).any(|w| w[0] >= w[1]) {
        return Err("size classes must be positive and strictly ascending".into());
    }
    let region = config.arena_bytes();
    let arenas = classes
        .iter()
        .enumerate()
        .map(|(i, &class)| {
            let mapping = Mapping::new(config.base + i as u64 * region, region);
            let capacity = if class <= config.page_size {
                config.pages * (config.page_size / class)
            } else {
                region / class
            };
            ClassArena {
                class,
                mapping,
                next_slot: 0,
                free_slots: BTreeSet::new(),
                capacity,
                page_size: config.page_size,
            }
        })
        .collect();
    let large_config = ArenaConfig {
        base: config.base + classes.len() as u64 * region,
        header_bytes: 0,
        ..config
    };
    Ok(SegregatedBackend {
        arenas,
        large: first_fit_backend(large_config).with_rounding(config.page_size),
        live: HashMap::new(),
        header_bytes: config.header_bytes,
    })
}

impl SegregatedBackend {
    pub fn classes(&self) -> Vec<u64> {
        self.arenas.iter().map(|a| a.class).collect()
    }
}

impl PolicyBackend for SegregatedBackend {
    fn allocate(&mut self, size: u64, origin: Option<u64>) -> Result<Block, BackendError> {
        let need = size.checked_add(self.header_bytes).ok_or(BackendError::Exhausted { size })?;
        let Some(idx) = self.arenas.iter().position(|a| a.class >= need) else {
            return self.large.allocate(need, origin);
        };
        let arena = &mut self.arenas[idx];
        let slot = match arena.free_slots.pop_first() {
            Some(s) => s,
            None if arena.next_slot < arena.capacity => {
                arena.next_slot += 1;
                arena.next_slot - 1
            }
            None => return Err(BackendError::Exhausted { size }),
        };
        let address = arena.slot_address(slot);
        self.live.insert(address, (idx, slot));
        Ok(Block { address, extent: arena.class, map_start: arena.mapping.start })
    }

    fn release(&mut self, block: &Block, origin: Option<u64>) -> Result<(), BackendError> {
        if block.map_start == self.large.mapping().start {
            return self.large.release(block, origin);
        }
        let (idx, slot) = self
            .live
            .remove(&block.address)
            .ok_or(BackendError::NotLive { address: block.address })?;
        self.arenas[idx].free_slots.insert(slot);
        Ok(())
    }

    fn mappings(&self) -> Vec<Mapping> {
        self.arenas
            .iter()
            .map(|a| a.mapping)
            .chain(std::iter::once(self.large.mapping()))
            .collect()
    }
}

/// Replays predetermined addresses: the n-th allocation lands at `addresses[n]`.
///
/// Extents equal the requested size plus any header. Each address is
/// attributed to the mapping that contains it.
#[derive(Debug, Clone)]
pub struct ScriptedBackend {
    addresses: Vec<u64>,
    next: usize,
    mappings: Vec<Mapping>,
    header_bytes: u64,
}

impl ScriptedBackend {
    pub fn new(addresses: Vec<u64>, mappings: Vec<Mapping>) -> Self {
        ScriptedBackend { addresses, next: 0, mappings, header_bytes: 0 }
    }

    pub fn with_header(mut self, header_bytes: u64) -> Self {
        self.header_bytes = header_bytes;
        self
    }
}

impl PolicyBackend for ScriptedBackend {
    fn allocate(&mut self, size: u64, _origin: Option<u64>) -> Result<Block, BackendError> {
        let address = *self.addresses.get(self.next).ok_or(BackendError::Exhausted { size })?;
        self.next += 1;
        let map_start = self
            .mappings
            .iter()
            .find(|m| m.contains(address) || (m.start == address && m.len == 0))
            .map(|m| m.start)
            .ok_or(BackendError::Unattributed { address })?;
        Ok(Block { address, extent: size + self.header_bytes, map_start })
    }

    fn release(&mut self, _block: &Block, _origin: Option<u64>) -> Result<(), BackendError> {
        Ok(())
    }

    fn mappings(&self) -> Vec<Mapping> {
        self.mappings.clone()
    }
}
