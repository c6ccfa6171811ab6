//! Hyperspectral cube I/O, normalization, band grouping, degradation and
//! the patch protocol.

pub mod bands;
pub mod cube;
pub mod degrade;
pub mod patches;

pub use bands::{band_group_extract, band_group_merge, band_group_partition, BandGroupSpec};
pub use cube::{decode_cube, denormalize, encode_cube, load_cube, normalize, normalize_with, save_cube, HsiCube, NormRecord};
pub use degrade::area_downsample;
pub use patches::{extract_patches, protocol_split, test_origin, DatasetKind, PatchSet};
