#![allow(dead_code)]

use std::io::Write;
use std::path::Path;

use grolab::harness::ExperimentConfig;

/// 500 users, 200 items, seed 7, every other setting at its default.
pub fn pinned_config(out: &Path) -> ExperimentConfig {
    ExperimentConfig {
        out_dir: out.to_path_buf(),
        ..ExperimentConfig::default()
    }
    .resolved()
}

/// Writes straight to the process stdout so the line survives test capture.
pub fn report(id: &str, pass: bool, detail: impl AsRef<str>) {
    let verdict = if pass { "PASS" } else { "FAIL" };
    let mut out = std::io::stdout().lock();
    let _ = writeln!(out, "{id} {verdict} {}", detail.as_ref());
    let _ = out.flush();
}
