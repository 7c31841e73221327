//! Tri-state voxel partition, distance transforms and field queries.

mod distance;
mod dump;
mod edt;
mod partition;

pub use distance::{
    build_distance_fields, central_gradient, interpolant_gradient, query, DistanceFieldSet, FieldBundle, FieldQueryResult, Stencil,
};
pub use dump::{read_egsf, write_egsf, MAGIC as EGSF_MAGIC, VERSION as EGSF_VERSION};
pub use edt::{edt, edt_mask, squared_edt, EMPTY_MASK_DISTANCE};
pub use partition::{carve, Dims, GridFrame, Label, VoxelPartition};
