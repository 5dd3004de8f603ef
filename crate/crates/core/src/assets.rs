//! Versioned JSON assets: port layouts and the arm's DH table.
//!
//! The shipped copies are compiled in; setting `EVPLUG_ASSET_DIR` makes every
//! loader read `<dir>/<file>` instead.

use crate::robot::DhChain;
use crate::scene::{PortKind, PortModel};
use std::path::PathBuf;
use thiserror::Error;

pub const ASSET_DIR_ENV: &str = "EVPLUG_ASSET_DIR";

const TYPE1: &str = include_str!("../assets/type1.json");
const TYPE2: &str = include_str!("../assets/type2.json");
const TYPE2_PLUG: &str = include_str!("../assets/type2_plug.json");
const UR10: &str = include_str!("../assets/ur10.json");

#[derive(Debug, Error)]
pub enum AssetError {
    #[error("cannot read asset {path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("asset {name}: {source}")]
    Parse { name: String, source: serde_json::Error },
    #[error("asset {name}: {message}")]
    Invalid { name: String, message: String },
}

fn load(name: &str, builtin: &'static str) -> Result<String, AssetError> {
    match std::env::var_os(ASSET_DIR_ENV) {
        Some(dir) => {
            let path = PathBuf::from(dir).join(name);
            std::fs::read_to_string(&path).map_err(|source| AssetError::Io { path, source })
        }
        None => Ok(builtin.to_string()),
    }
}

fn parse_port(name: &str, builtin: &'static str) -> Result<PortModel, AssetError> {
    let text = load(name, builtin)?;
    let model: PortModel = serde_json::from_str(&text).map_err(|source| AssetError::Parse { name: name.into(), source })?;
    model.validate().map_err(|e| AssetError::Invalid { name: name.into(), message: e.to_string() })?;
    Ok(model)
}

pub fn port_model(kind: PortKind) -> Result<PortModel, AssetError> {
    match kind {
        PortKind::Type1 => parse_port("type1.json", TYPE1),
        PortKind::Type2 => parse_port("type2.json", TYPE2),
    }
}

/// Type 2 connector plug held by the robot; pin layout in the tip frame.
pub fn plug_model() -> Result<PortModel, AssetError> {
    parse_port("type2_plug.json", TYPE2_PLUG)
}

pub fn ur10_chain() -> Result<DhChain, AssetError> {
    let text = load("ur10.json", UR10)?;
    let chain: DhChain = serde_json::from_str(&text).map_err(|source| AssetError::Parse { name: "ur10.json".into(), source })?;
    chain.validate().map_err(|e| AssetError::Invalid { name: "ur10.json".into(), message: e.to_string() })?;
    Ok(chain)
}
