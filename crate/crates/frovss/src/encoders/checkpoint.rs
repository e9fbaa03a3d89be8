//! Checkpoint container: one JSON header line followed by raw
//! little-endian f32 parameter blocks in declaration order.

use std::io::{BufRead, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::params::{ParamRole, ParamStore};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub d: usize,
    pub k: usize,
    pub seed: u64,
    pub arch: String,
}

/// Write the parameters whose role is in `roles`, in declaration
/// order.
pub fn save_checkpoint(
    path: &Path,
    header: &CheckpointHeader,
    store: &ParamStore,
    roles: &[ParamRole],
) -> Result<()> {
    let mut file = std::io::BufWriter::new(std::fs::File::create(path)?);
    writeln!(file, "{}", serde_json::to_string(header)?)?;
    for (_, param) in store.iter() {
        if roles.contains(&param.role) {
            for v in param.value.iter() {
                file.write_all(&(*v as f32).to_le_bytes())?;
            }
        }
    }
    Ok(())
}

/// Load a checkpoint into the matching parameters of `store`.
///
/// The store must already have the right shapes (built from the same
/// config); a size mismatch is a model/config error.
pub fn load_checkpoint(
    path: &Path,
    store: &mut ParamStore,
    roles: &[ParamRole],
) -> Result<CheckpointHeader> {
    let mut file = std::io::BufReader::new(
        std::fs::File::open(path)
            .map_err(|e| Error::data(format!("cannot open checkpoint: {e}"), Some(path.into())))?,
    );
    let mut header_line = String::new();
    file.read_line(&mut header_line)?;
    let header: CheckpointHeader = serde_json::from_str(header_line.trim())
        .map_err(|e| Error::data(format!("bad checkpoint header: {e}"), Some(path.into())))?;

    let mut raw = Vec::new();
    file.read_to_end(&mut raw)?;
    let expected: usize = store
        .iter()
        .filter(|(_, p)| roles.contains(&p.role))
        .map(|(_, p)| p.value.len())
        .sum();
    if raw.len() != expected * 4 {
        return Err(Error::model(format!(
            "checkpoint holds {} f32 values but the model expects {expected}; \
             config and checkpoint disagree",
            raw.len() / 4
        )));
    }

    let mut off = 0;
    let ids: Vec<_> = store.ids_with_roles(roles);
    for id in ids {
        let value = store.value_mut(id);
        for v in value.iter_mut() {
            let bytes: [u8; 4] = raw[off..off + 4].try_into().unwrap();
            *v = f32::from_le_bytes(bytes) as f64;
            off += 4;
        }
    }
    Ok(header)
}
