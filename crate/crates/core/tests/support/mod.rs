#![allow(dead_code)]

pub mod metrics_oracle;
pub mod patch_gen;
