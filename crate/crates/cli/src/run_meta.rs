use std::path::Path;

use anyhow::{Context, Result};
use sha2::{Digest, Sha256};

use cddm_core::config::KvDoc;

pub fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

/// Writes `<out>/<command>.run`: config hash, effective seed and versions.
pub fn write(out: &Path, command: &str, config_path: &Path, config_text: &str, seed: u64) -> Result<()> {
    let mut doc = KvDoc::new();
    doc.set("run.command", command);
    doc.set("run.config", config_path.display());
    doc.set("run.config_sha256", sha256_hex(config_text.as_bytes()));
    doc.set("run.seed", seed);
    doc.set("version.cddm_cli", env!("CARGO_PKG_VERSION"));
    doc.set("version.cddm_core", cddm_core::VERSION);
    doc.set("version.dataset_format", cddm_core::dataset::DATASET_VERSION);
    doc.set("version.checkpoint_format", cddm_core::numerics::CHECKPOINT_VERSION);
    let path = out.join(format!("{command}.run"));
    std::fs::write(&path, doc.to_text()).with_context(|| format!("writing {}", path.display()))
}
