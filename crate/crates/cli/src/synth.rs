use std::path::Path;

use mvnad::synth::{generate_dataset, DatasetIndex, DatasetManifest};

use crate::error::{invalid, CliResult};
use crate::RunConfig;

/// Generates the configured categories into `out`, which must be empty or
/// absent. Every check runs before the first write.
pub fn cmd_synth(rc: &RunConfig, out: &Path) -> CliResult<DatasetIndex> {
    if rc.synth_categories.is_empty() {
        return Err(invalid("`synth.categories` lists no categories"));
    }
    for cat in &rc.synth_categories {
        mvnad::synth::plan_category(rc.seed, cat)?;
    }
    let manifest = DatasetManifest {
        master_seed: rc.seed,
        categories: rc.synth_categories.clone(),
        write_stacks: rc.write_stacks,
        header: vec![("config_hash".to_string(), rc.hash())],
    };
    Ok(generate_dataset(&manifest, out)?)
}
