//! Verification, benchmarking, training and ablation workflows around
//! the `mtlsi-core` blocks, plus the binary container and config file
//! formats. The `mtlsi` binary is a thin argument layer over this crate.

use std::str::FromStr;

pub mod ablate;
pub mod bench;
pub mod config;
pub mod container;
pub mod traincmd;
pub mod verify;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Precision {
    F32,
    F64,
}

impl FromStr for Precision {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "f32" => Ok(Precision::F32),
            "f64" => Ok(Precision::F64),
            other => Err(format!("unknown precision `{other}` (f32 or f64)")),
        }
    }
}

/// Seed resolution order: explicit flag, `MTLSI_SEED`, then 42.
pub fn resolve_seed(flag: Option<u64>) -> u64 {
    flag.or_else(|| {
        std::env::var("MTLSI_SEED")
            .ok()
            .and_then(|s| s.parse().ok())
    })
    .unwrap_or(42)
}
