//! `curator kernel-selfcheck`: identity, shape, pooling, and gradient
//! checks with a machine-readable report.

use std::path::Path;

use anyhow::anyhow;
use curator_kernel::{run_selfcheck, SelfCheckOptions};

use crate::CliError;

pub fn run(
    seed: u64,
    configs: usize,
    corrupt_gradient: bool,
    out: Option<&Path>,
) -> Result<(), CliError> {
    let options = SelfCheckOptions {
        seed,
        gradient_configs: configs.max(1),
        corrupt_gradient,
        ..Default::default()
    };
    let report = run_selfcheck(&options);
    let rendered = serde_json::to_string_pretty(&report).expect("report serializes");
    if let Some(path) = out {
        std::fs::write(path, &rendered).map_err(CliError::runtime)?;
    }
    println!("{rendered}");
    if report.all_passed {
        Ok(())
    } else {
        let failing: Vec<&str> = report
            .checks
            .iter()
            .filter(|c| !c.passed)
            .map(|c| c.name.as_str())
            .collect();
        Err(CliError::Runtime(anyhow!(
            "kernel self-check failed: {}",
            failing.join(", ")
        )))
    }
}
