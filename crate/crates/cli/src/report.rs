use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use mvnad::cprn::Ablation;
use mvnad::metrics::{format_table, MetricReport, RowKind, MEAN_CATEGORY};

use crate::error::{invalid, io_err, CliError, CliResult};
use crate::write_file;

/// One run's mean-over-categories figures.
#[derive(Debug, Clone, PartialEq)]
pub struct ComparisonRow {
    pub ablation: Ablation,
    pub run_dir: PathBuf,
    pub config_hash: String,
    pub seed: String,
    /// Pooled per-view protocol.
    pub i_auroc: Option<f64>,
    pub p_auroc: Option<f64>,
    pub p_aupro: Option<f64>,
    /// Per-sample max over views.
    pub max_i_auroc: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Comparison {
    pub fpr_limit: f64,
    pub views: String,
    pub rows: Vec<ComparisonRow>,
}

fn fmt(v: Option<f64>) -> String {
    v.map_or_else(|| "nan".into(), |x| format!("{x:.4}"))
}

impl Comparison {
    pub fn to_table(&self) -> String {
        let headers = ["Configuration", "I-AUROC", "P-AUROC", "P-AUPRO", "Max I-AUROC", "Run"].map(String::from);
        let body: Vec<[String; 6]> = self
            .rows
            .iter()
            .map(|r| {
                [
                    r.ablation.label().to_string(),
                    fmt(r.i_auroc),
                    fmt(r.p_auroc),
                    fmt(r.p_aupro),
                    fmt(r.max_i_auroc),
                    r.run_dir.display().to_string(),
                ]
            })
            .collect();
        format_table(&headers, &body)
    }

    pub fn to_csv(&self) -> String {
        let mut s = format!("# fpr_limit={}\n# views={}\n", self.fpr_limit, self.views);
        s.push_str("configuration,ablation,i_auroc,p_auroc,p_aupro,max_i_auroc,config_hash,seed,run\n");
        let num = |v: Option<f64>| v.map_or_else(|| "nan".into(), |x| format!("{x:.6}"));
        for r in &self.rows {
            let _ = writeln!(
                s,
                "{},{},{},{},{},{},{},{},{}",
                r.ablation.label(),
                r.ablation.name(),
                num(r.i_auroc),
                num(r.p_auroc),
                num(r.p_aupro),
                num(r.max_i_auroc),
                r.config_hash,
                r.seed,
                r.run_dir.display()
            );
        }
        s
    }
}

/// Merges evaluated run directories into one table in the fixed ablation
/// order, optionally writing `comparison.csv` and `comparison.txt` to `out`.
pub fn cmd_report(run_dirs: &[PathBuf], out: Option<&Path>) -> CliResult<Comparison> {
    if run_dirs.is_empty() {
        return Err(invalid("report needs at least one run directory"));
    }
    let missing: Vec<String> = run_dirs
        .iter()
        .filter(|d| !d.join("report.csv").is_file())
        .map(|d| d.display().to_string())
        .collect();
    if !missing.is_empty() {
        return Err(invalid(format!("no evaluated run (report.csv) in: {}", missing.join(", "))));
    }
    let mut protocol: Option<(f64, String, PathBuf)> = None;
    let mut rows = Vec::new();
    for dir in run_dirs {
        let path = dir.join("report.csv");
        let text = fs::read_to_string(&path).map_err(|e| io_err(&path, e))?;
        let (report, pre) = MetricReport::from_csv(&text).map_err(|e| CliError::from(e).context(path.display()))?;
        let get = |k: &str| {
            pre.iter()
                .find(|(key, _)| key == k)
                .map(|(_, v)| v.clone())
                .ok_or_else(|| invalid(format!("{}: preamble lacks `{k}`", path.display())))
        };
        let views = get("views")?;
        match &protocol {
            None => protocol = Some((report.fpr_limit, views.clone(), dir.clone())),
            Some((fpr, v, first)) if *fpr != report.fpr_limit || *v != views => {
                return Err(invalid(format!(
                    "incompatible metric protocols: {} uses fpr_limit={fpr}, views={v} but {} uses fpr_limit={}, views={views}",
                    first.display(),
                    dir.display(),
                    report.fpr_limit
                )))
            }
            Some(_) => {}
        }
        let all = report.row(MEAN_CATEGORY, RowKind::AllViews);
        rows.push(ComparisonRow {
            ablation: Ablation::parse(&get("ablation")?).map_err(|e| CliError::from(e).context(path.display()))?,
            run_dir: dir.clone(),
            config_hash: get("config_hash")?,
            seed: get("seed")?,
            i_auroc: all.and_then(|r| r.i_auroc),
            p_auroc: all.and_then(|r| r.p_auroc),
            p_aupro: all.and_then(|r| r.p_aupro),
            max_i_auroc: report.row(MEAN_CATEGORY, RowKind::SampleMax).and_then(|r| r.i_auroc),
        });
    }
    rows.sort_by_key(|r| Ablation::ORDER.iter().position(|a| *a == r.ablation));
    let (fpr_limit, views, _) = protocol.expect("at least one run");
    let cmp = Comparison { fpr_limit, views, rows };
    if let Some(out) = out {
        write_file(&out.join("comparison.csv"), cmp.to_csv())?;
        write_file(&out.join("comparison.txt"), cmp.to_table())?;
    }
    Ok(cmp)
}
