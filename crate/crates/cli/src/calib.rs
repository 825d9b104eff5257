use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use mvnad::camera::{self, CameraCalibration};

use crate::error::{invalid, io_err, CliError, CliResult};

pub fn load_calibration(path: &Path) -> CliResult<CameraCalibration> {
    let text = fs::read_to_string(path).map_err(|e| io_err(path, e))?;
    let calib = camera::parse_calibration(&text).map_err(|e| CliError::from(e).context(path.display()))?;
    calib.validate().map_err(|e| CliError::from(e).context(path.display()))?;
    Ok(calib)
}

/// Parses `a,b,...` into exactly `N` numbers.
pub fn parse_point<const N: usize>(text: &str) -> CliResult<[f64; N]> {
    let parts: Vec<&str> = text.split(',').map(str::trim).collect();
    let bad = || invalid(format!("expected {N} comma-separated numbers, got `{text}`"));
    if parts.len() != N {
        return Err(bad());
    }
    let mut out = [0.0; N];
    for (o, p) in out.iter_mut().zip(parts) {
        *o = p.parse().map_err(|_| bad())?;
    }
    Ok(out)
}

/// Parses the file and checks that serializing and reparsing is lossless.
pub fn validate(path: &Path) -> CliResult<String> {
    let c = load_calibration(path)?;
    let again = camera::parse_calibration(&camera::serialize_calibration(&c))?;
    if again != c {
        return Err(CliError::Runtime(format!("{}: serialization does not round-trip", path.display())));
    }
    let k = &c.intrinsics;
    let mut s = String::new();
    let _ = writeln!(s, "file: {}", path.display());
    let _ = writeln!(s, "image: {}x{}", c.image_width, c.image_height);
    let _ = writeln!(s, "fx={} fy={} cx={} cy={}", k[0][0], k[1][1], k[0][2], k[1][2]);
    let _ = writeln!(s, "distortion: {:?}", &c.distortion[..5]);
    let _ = writeln!(s, "round trip: ok");
    Ok(s)
}

/// World point in mm to pixel coordinates.
pub fn project(path: &Path, world: [f64; 3]) -> CliResult<(f64, f64)> {
    let c = load_calibration(path)?;
    Ok(camera::project_point(&c, world)?)
}

/// Applies the file's `H_matrix` to a pixel.
pub fn homography(path: &Path, p: [f64; 2]) -> CliResult<(f64, f64)> {
    let c = load_calibration(path)?;
    Ok(camera::apply_homography(&c.h_matrix, (p[0], p[1]))?)
}
