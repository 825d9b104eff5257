use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use mvnad::cprn::{self, CprnModel, InputNorm, StepLog, ViewFeatures};
use mvnad::synth::{load_sample, DatasetIndex, Label, MvSample, Split};

use crate::error::{invalid, CliResult};
use crate::{checkpoint_path, preamble, write_file, RunConfig};

/// Categories a run covers: `run.categories`, or all of the dataset's.
pub fn run_categories(rc: &RunConfig, index: &DatasetIndex) -> CliResult<Vec<String>> {
    if rc.categories.is_empty() {
        return Ok(index.categories.clone());
    }
    let missing: Vec<&str> = rc
        .categories
        .iter()
        .filter(|c| !index.categories.contains(c))
        .map(String::as_str)
        .collect();
    if !missing.is_empty() {
        return Err(invalid(format!("dataset has no categories {}", missing.join(", "))));
    }
    Ok(rc.categories.clone())
}

/// Encodes one stored view with the streams the model's mode needs.
pub fn encode(model: &CprnModel, sample: &MvSample, view: usize) -> CliResult<ViewFeatures> {
    let v = &sample.views[view];
    let mode = model.config.mode;
    let rgb = mode.uses_rgb().then(|| v.rgb_chw());
    let nv = mode.uses_nv().then(|| v.nv.to_chw());
    Ok(model.encode_view(rgb.as_deref(), nv.as_deref(), v.height, v.width)?)
}

#[derive(Debug, Clone)]
pub struct TrainedCategory {
    pub category: String,
    pub checkpoint: PathBuf,
    pub log: Vec<StepLog>,
}

fn load_train_split(root: &Path, index: &DatasetIndex, category: &str) -> CliResult<Vec<MvSample>> {
    let mut out = Vec::new();
    for entry in index.select(category, Split::Train) {
        if entry.label != Label::Normal {
            return Err(invalid(format!(
                "train split holds anomalous sample {}; training is unsupervised",
                entry.sample_id
            )));
        }
        let sample = load_sample(root, entry)?;
        if let Some(v) = sample.views.iter().position(|v| !v.mask_is_empty()) {
            return Err(invalid(format!(
                "train sample {} view {v} has a defect mask; training is unsupervised",
                entry.sample_id
            )));
        }
        out.push(sample);
    }
    if out.is_empty() {
        return Err(invalid(format!("category `{category}` has no training samples")));
    }
    Ok(out)
}

fn log_csv(rc: &RunConfig, category: &str, logs: &[StepLog]) -> String {
    let mut prov = rc.provenance();
    prov.push(("category".into(), category.into()));
    let mut s = preamble(&prov);
    s.push_str("step,L_total,L_r,L_p\n");
    for l in logs {
        let _ = writeln!(s, "{},{:.12e},{:.12e},{:.12e}", l.step, l.l_total, l.l_r, l.l_p);
    }
    s
}

/// Text record of the effective configuration of a run directory.
pub fn run_record(rc: &RunConfig) -> String {
    let mut s = preamble(&rc.provenance());
    s.push_str(&rc.raw.canonical());
    s
}

/// Trains one model per category on the normal training views and writes
/// `checkpoints/<category>.ckpt`, `logs/<category>_train.csv` and
/// `run.txt` under `out`.
pub fn cmd_train(rc: &RunConfig, out: &Path) -> CliResult<Vec<TrainedCategory>> {
    let root = rc.data_root()?;
    let index = DatasetIndex::load(root)?;
    let categories = run_categories(rc, &index)?;
    let mut done = Vec::new();
    for category in &categories {
        let samples = load_train_split(root, &index, category)?;
        let mut model = CprnModel::new(rc.model.clone())?;
        if rc.normalize_inputs {
            let views = samples.iter().flat_map(|s| &s.views);
            let rgb: Vec<Vec<f64>> = views.clone().map(|v| v.rgb_chw()).collect();
            let nv: Vec<Vec<f64>> = views.map(|v| v.nv.to_chw()).collect();
            model.norm_rgb = InputNorm::fit(rgb.iter().map(Vec::as_slice));
            model.norm_nv = InputNorm::fit(nv.iter().map(Vec::as_slice));
        }
        let mut feats = Vec::new();
        for s in &samples {
            for v in 0..s.views.len() {
                feats.push(encode(&model, s, v)?);
            }
        }
        let log = cprn::train(&mut model, &feats, &rc.train, |_| {})?;
        let mut header = rc.provenance();
        header.push(("category".into(), category.clone()));
        let path = checkpoint_path(out, category);
        write_file(&path, model.to_checkpoint(&header))?;
        write_file(&out.join("logs").join(format!("{category}_train.csv")), log_csv(rc, category, &log))?;
        done.push(TrainedCategory {
            category: category.clone(),
            checkpoint: path,
            log,
        });
    }
    write_file(&out.join("run.txt"), run_record(rc))?;
    Ok(done)
}
