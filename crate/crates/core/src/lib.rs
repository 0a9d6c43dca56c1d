//! Allocation traces as two-dimensional bin-packing instances.
//!
//! The pipeline runs in stages that communicate through files:
//!
//! 1. [`trace`]: parse a request trace and unpack it into elementary
//!    malloc/free operations.
//! 2. [`sim`]: replay those operations against a placement policy to get a
//!    placement, one job per allocated block.
//! 3. [`binpack`]: split the placement by mapping and normalize each part.
//! 4. [`frag`]: measure page-aware external fragmentation.
//! 5. [`analysis`]: correlate fragmentation with measured peak RSS.

pub mod analysis;
pub mod binpack;
pub mod error;
pub mod frag;
pub mod sim;
pub mod trace;

pub use binpack::{build_instance, read_instance, write_instance, BinPackInstance, MappingInstance, Normalization};
pub use error::{AnalysisError, BackendError, FragError, InstanceError, PlacementIoError, TraceError};
pub use frag::{total_frag, FragOptions, FragmentationReport};
pub use sim::{simulate, Job, Mapping, Placement, PolicyBackend, SimOptions};
pub use trace::{parse_trace, unpack_trace, ElementaryRequest, RawRequest, ReqType};
