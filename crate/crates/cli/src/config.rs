use anyhow::{bail, Result};
use binfrag::binpack::{check_page_size, Normalization, DEFAULT_PAGE_SIZE};
use binfrag::frag::FragOptions;
use binfrag::sim::{ArenaConfig, DEFAULT_ARENA_BASE, DEFAULT_SIZE_CLASSES};

use crate::{BackendKind, GlobalOptions};

pub const DEFAULT_ARENA_PAGES: u64 = 1 << 24;

#[derive(Debug, Clone)]
pub struct PipelineConfig {
    pub page_size: u64,
    /// Set when `--page-size` was given explicitly.
    pub page_size_override: Option<u64>,
    pub backend: BackendKind,
    pub size_classes: Option<Vec<u64>>,
    pub header_bytes: u64,
    pub arena_pages: u64,
    pub lenient: bool,
    pub normalization: Normalization,
    pub floor_gaps: bool,
    pub workers: usize,
}

impl PipelineConfig {
    pub fn from_options(o: &GlobalOptions) -> Result<Self> {
        let page_size = o.page_size.unwrap_or(DEFAULT_PAGE_SIZE);
        check_page_size(page_size)?;
        if let Some(classes) = &o.classes {
            if classes.is_empty() || classes[0] == 0 || classes.windows(2).any(|w| w[0] >= w[1]) {
                bail!("--classes must be positive and strictly ascending");
            }
            if o.backend != BackendKind::SegregatedFit {
                bail!("--classes only applies to --backend segregated-fit");
            }
        }
        if o.arena_pages == 0 {
            bail!("--arena-pages must be positive");
        }
        if o.workers == Some(0) {
            bail!("--workers must be positive");
        }
        Ok(PipelineConfig {
            page_size,
            page_size_override: o.page_size,
            backend: o.backend,
            size_classes: o.classes.clone(),
            header_bytes: o.header_bytes,
            arena_pages: o.arena_pages,
            lenient: o.lenient,
            normalization: if o.exact_normalize { Normalization::Exact } else { Normalization::PageAligned },
            floor_gaps: !o.no_floor_gaps,
            workers: o.workers.unwrap_or_else(|| FragOptions::default().workers),
        })
    }

    /// Arena layout for the model backends, checked to fit the address space.
    pub fn arena(&self) -> Result<ArenaConfig> {
        let base = DEFAULT_ARENA_BASE.next_multiple_of(self.page_size);
        let arenas = self.size_classes.as_ref().map_or(DEFAULT_SIZE_CLASSES.len(), Vec::len) as u64 + 1;
        let fits = self
            .page_size
            .checked_mul(self.arena_pages)
            .and_then(|region| region.checked_mul(arenas))
            .and_then(|total| total.checked_add(base));
        if fits.is_none() {
            bail!("--arena-pages {} with page size {} exceeds the address space", self.arena_pages, self.page_size);
        }
        Ok(ArenaConfig { base, page_size: self.page_size, pages: self.arena_pages, header_bytes: self.header_bytes })
    }

    pub fn frag_options(&self) -> FragOptions {
        FragOptions { floor_gaps: self.floor_gaps, workers: self.workers }
    }
}
