//! JSON persistence for encoders and pools.
//!
//! Files carry field names, shapes and row-major parameter arrays. Floats are
//! written in shortest round-trip decimal form, so a save/load cycle is
//! bit-exact.

use std::fs;
use std::path::Path;

use super::{EncoderModel, EncoderPool};
use crate::error::Result;

pub fn save_encoder(model: &EncoderModel, path: &Path) -> Result<()> {
    fs::write(path, serde_json::to_string_pretty(model)?)?;
    Ok(())
}

pub fn load_encoder(path: &Path) -> Result<EncoderModel> {
    Ok(serde_json::from_str(&fs::read_to_string(path)?)?)
}

pub fn save_pool(pool: &EncoderPool, path: &Path) -> Result<()> {
    fs::write(path, serde_json::to_string_pretty(pool)?)?;
    Ok(())
}

pub fn load_pool(path: &Path) -> Result<EncoderPool> {
    let pool: EncoderPool = serde_json::from_str(&fs::read_to_string(path)?)?;
    EncoderPool::new(pool.models)
}
