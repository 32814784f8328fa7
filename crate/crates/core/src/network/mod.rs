//! Linear Array Blocks and the Linear Array Network.

mod config;
mod io;
mod model;

pub use config::{
    AblationArm, LabConfig, LanConfig, Resample, ATTENTION_ARMS, DESIGN_ARMS, LAB_COUNT, PRESETS, SPATIAL_MULTIPLE,
};
pub use io::{checksum, from_bytes, load, save, to_bytes, FORMAT_VERSION, MAGIC};
pub use model::{build_lan, lab_forward, lab_prefix, lan_forward, param_count, LanModel, LanTrace, CONVS_PER_LAB};
