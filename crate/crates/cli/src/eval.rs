use std::fs;
use std::path::Path;

use mvnad::cprn::CprnModel;
use mvnad::metrics::{evaluate_run, LabeledMap, MetricReport, ViewResult};
use mvnad::mvnt::{self, Record};
use mvnad::synth::{load_sample, DatasetIndex, Label, Split};

use crate::error::{invalid, io_err, CliError, CliResult};
use crate::train::{encode, run_categories};
use crate::{checkpoint_path, write_file, RunConfig};

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct EvalOptions {
    /// Write every anomaly map under `maps/`.
    pub save_maps: bool,
    /// Debug path: use the ground-truth mask as the map and its max as the
    /// score, skipping the model entirely.
    pub oracle_maps: bool,
}

/// Loads a category checkpoint and checks it against the configured model.
pub fn load_checkpoint(rc: &RunConfig, run_dir: &Path, category: &str) -> CliResult<CprnModel> {
    let path = checkpoint_path(run_dir, category);
    let bytes = fs::read(&path).map_err(|e| io_err(&path, e))?;
    let (model, _) = CprnModel::from_checkpoint(&bytes).map_err(|e| CliError::from(e).context(path.display()))?;
    let mut expected = rc.model.clone();
    expected.init_seed = model.config.init_seed;
    if expected != model.config {
        return Err(invalid(format!(
            "{} was trained with a different model configuration (mode {} vs configured {})",
            path.display(),
            model.config.mode.name(),
            rc.model.mode.name()
        )));
    }
    Ok(model)
}

fn views_in(index: &DatasetIndex) -> CliResult<usize> {
    index
        .header
        .get("views")
        .and_then(|v| v.parse().ok())
        .ok_or_else(|| invalid("dataset manifest lacks a valid `views` entry"))
}

/// Scores every view of every test sample and writes `report.csv`,
/// `report.txt` and, on request, `maps/<category>/<sample>/view_<v>.mvnt`.
pub fn cmd_eval(rc: &RunConfig, run_dir: &Path, opts: EvalOptions) -> CliResult<MetricReport> {
    let root = rc.data_root()?;
    let index = DatasetIndex::load(root)?;
    let views = views_in(&index)?;
    let categories = run_categories(rc, &index)?;
    let mut results = Vec::new();
    for category in &categories {
        let model = if opts.oracle_maps {
            None
        } else {
            Some(load_checkpoint(rc, run_dir, category)?)
        };
        for entry in index.select(category, Split::Test) {
            let sample = load_sample(root, entry)?;
            let anomalous = entry.label == Label::Anomalous;
            if anomalous && sample.views.iter().all(|v| v.mask_is_empty()) {
                return Err(invalid(format!("anomalous test sample {} has no masks", entry.sample_id)));
            }
            for (vi, view) in sample.views.iter().enumerate() {
                let (score, map) = match &model {
                    None => {
                        let map: Vec<f64> = view.mask.iter().map(|&m| f64::from(u8::from(m))).collect();
                        (map.iter().copied().fold(0.0, f64::max), map)
                    }
                    Some(m) => {
                        let feats = encode(m, &sample, vi)?;
                        let r = m.infer(&feats, view.height, view.width, &rc.infer)?;
                        (r.score, r.map)
                    }
                };
                if opts.save_maps {
                    let path = run_dir
                        .join("maps")
                        .join(category)
                        .join(&entry.sample_id)
                        .join(format!("view_{vi}.mvnt"));
                    let rec = Record::f32([view.height, view.width], map.iter().map(|&x| x as f32).collect());
                    write_file(&path, rec.to_bytes())?;
                }
                results.push(ViewResult {
                    category: category.clone(),
                    sample_id: entry.sample_id.clone(),
                    view: vi,
                    sample_anomalous: anomalous,
                    score,
                    map: LabeledMap::new(view.height, view.width, map, view.mask.clone())?,
                });
            }
        }
    }
    let report = evaluate_run(&results, views, rc.fpr_limit)?;
    let mut prov = rc.provenance();
    prov.push(("ablation".into(), rc.ablation().name().into()));
    prov.push(("views".into(), views.to_string()));
    if opts.oracle_maps {
        prov.push(("oracle_maps".into(), "true".into()));
    }
    write_file(&run_dir.join("report.csv"), report.to_csv(&prov))?;
    let mut table = crate::preamble(&prov);
    table.push_str(&report.to_table());
    write_file(&run_dir.join("report.txt"), table)?;
    Ok(report)
}

/// Reads a stored map written by `--save-maps`.
pub fn read_map(path: &Path) -> CliResult<(Vec<usize>, Vec<f64>)> {
    let t = mvnt::read_file(path)?.to_tensor()?;
    Ok((t.shape().to_vec(), t.into_data()))
}
