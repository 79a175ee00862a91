//! File formats: NPY arrays and the JSON run configuration.

mod config;
mod npy;

pub use config::{
    load_config, Family, RunConfig, DEFAULT_EPSILON, DEFAULT_LSE_R, DEFAULT_MASS,
    DEFAULT_REDUCTION,
};
pub use npy::{
    decode, encode, header_dict, read_npy, read_npy_header, write_npy, write_npy_feature_map,
    write_npy_vector, Dtype, NpyArray, NpyError, NpyHeader,
};
