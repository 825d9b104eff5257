use std::path::{Path, PathBuf};

use mvnad::mvnt::{self, Record};
use mvnad::photometric::{self, IntensityStack, LightRig, PsSolution, SolveOptions};

use crate::error::{invalid, CliError, CliResult};

/// Files written by [`cmd_ps_solve`].
#[derive(Debug, Clone, PartialEq)]
pub struct PsOutputs {
    pub normals: PathBuf,
    pub valid: PathBuf,
    pub albedo: PathBuf,
    pub residual: PathBuf,
}

impl PsOutputs {
    pub fn for_prefix(prefix: &Path) -> Self {
        let with = |suffix: &str| {
            let mut s = prefix.as_os_str().to_owned();
            s.push(suffix);
            PathBuf::from(s)
        };
        Self {
            normals: with("_nv.mvnt"),
            valid: with("_nv_valid.mvnt"),
            albedo: with("_albedo.mvnt"),
            residual: with("_residual.mvnt"),
        }
    }
}

fn with_file(path: &Path) -> impl Fn(mvnad::Error) -> CliError + '_ {
    move |e| CliError::from(e).context(path.display())
}

/// Solves one view's intensity stack and writes normals (plus validity),
/// albedo and per-pixel residual next to `prefix`.
pub fn cmd_ps_solve(lights: &Path, stack: &Path, prefix: &Path, opts: &SolveOptions) -> CliResult<(PsSolution, PsOutputs)> {
    let rig = LightRig::load(lights).map_err(with_file(lights))?;
    let record = mvnt::read_file(stack).map_err(with_file(stack))?;
    let stack_data = IntensityStack::from_record(&record).map_err(with_file(stack))?;
    if rig.len() != stack_data.lights {
        return Err(invalid(format!(
            "{} has {} lights but {} holds {} images",
            lights.display(),
            rig.len(),
            stack.display(),
            stack_data.lights
        )));
    }
    let sol = photometric::solve_normals(&rig, &stack_data, opts)
        .map_err(|e| CliError::from(e).context(format!("{} with {}", stack.display(), lights.display())))?;
    let out = PsOutputs::for_prefix(prefix);
    if let Some(dir) = prefix.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| crate::error::io_err(dir, e))?;
    }
    let (h, w) = (sol.normals.height, sol.normals.width);
    photometric::write_normals(&sol.normals, &out.normals, &out.valid)?;
    let f32s = |v: &[f64]| v.iter().map(|&x| x as f32).collect();
    mvnt::write_file(&out.albedo, &Record::f32([h, w], f32s(&sol.albedo.data)))?;
    mvnt::write_file(&out.residual, &Record::f32([h, w], f32s(&sol.residual)))?;
    Ok((sol, out))
}
