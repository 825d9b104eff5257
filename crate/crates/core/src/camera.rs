//! Camera calibration files and the pinhole + Brown-Conrady geometry they
//! describe.
//!
//! The file format is a small fixed YAML-like schema: `key: value` lines at
//! column zero, and matrices written as
//!
//! ```text
//! H_matrix:
//!   rows: 3
//!   cols: 3
//!   data:
//!     - 7.5142908289968972e+001
//!     ...
//! ```
//!
//! Only entries 0..5 of the 12-element distortion vector are interpreted,
//! as `(k1, k2, p1, p2, k3)`; entries 5..12 must be zero.

use crate::error::{Error, Result};

pub type Mat3 = [[f64; 3]; 3];
pub type Mat34 = [[f64; 4]; 3];

const KEY_FILE_VERSION: &str = "calibration_file_ver";
const KEY_TIME: &str = "calibration_time";
const KEY_TYPE: &str = "calibration_type";
const KEY_WIDTH: &str = "image_width";
const KEY_HEIGHT: &str = "image_height";
const KEY_BOARD_DX: &str = "board_dx";
const KEY_BOARD_DY: &str = "board_dy";
const KEY_H: &str = "H_matrix";
const KEY_DIST_MODEL: &str = "distortion_model";
const KEY_DIST_LEVEL: &str = "distortion_level";
const KEY_DIST: &str = "distortion_matrix";
const KEY_K: &str = "intrinsic_matrix";
const KEY_RT: &str = "extrinsic_matrix";

const REQUIRED: [&str; 13] = [
    KEY_FILE_VERSION,
    KEY_TIME,
    KEY_TYPE,
    KEY_WIDTH,
    KEY_HEIGHT,
    KEY_BOARD_DX,
    KEY_BOARD_DY,
    KEY_H,
    KEY_DIST_MODEL,
    KEY_DIST_LEVEL,
    KEY_DIST,
    KEY_K,
    KEY_RT,
];

/// Values of keys the typed fields do not cover, kept for round trips.
#[derive(Debug, Clone, PartialEq)]
pub enum ExtraValue {
    Scalar(String),
    Matrix { rows: usize, cols: usize, data: Vec<f64> },
}

#[derive(Debug, Clone, PartialEq)]
pub struct CameraCalibration {
    pub file_version: String,
    pub calib_time: String,
    pub calib_type: String,
    pub image_width: u32,
    pub image_height: u32,
    pub board_dx: f64,
    pub board_dy: f64,
    pub h_matrix: Mat3,
    pub distortion_model: i64,
    pub distortion_level: i64,
    pub distortion: [f64; 12],
    pub intrinsics: Mat3,
    pub extrinsics: Mat34,
    pub extra: Vec<(String, ExtraValue)>,
    /// Key order as read, used when writing the file back out.
    pub key_order: Vec<String>,
}

impl CameraCalibration {
    /// A distortion-free camera with identity extrinsics.
    pub fn pinhole(width: u32, height: u32, fx: f64, fy: f64, cx: f64, cy: f64) -> Self {
        Self {
            file_version: "3.1".into(),
            calib_time: "unset".into(),
            calib_type: "MVP_CALIB_TYPE_NORMAL".into(),
            image_width: width,
            image_height: height,
            board_dx: 1.0,
            board_dy: 1.0,
            h_matrix: [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]],
            distortion_model: 3,
            distortion_level: 2,
            distortion: [0.0; 12],
            intrinsics: [[fx, 0.0, cx], [0.0, fy, cy], [0.0, 0.0, 1.0]],
            extrinsics: [[1.0, 0.0, 0.0, 0.0], [0.0, 1.0, 0.0, 0.0], [0.0, 0.0, 1.0, 0.0]],
            extra: Vec::new(),
            key_order: REQUIRED.iter().map(|s| s.to_string()).collect(),
        }
    }

    pub fn rotation(&self) -> Mat3 {
        let e = &self.extrinsics;
        [
            [e[0][0], e[0][1], e[0][2]],
            [e[1][0], e[1][1], e[1][2]],
            [e[2][0], e[2][1], e[2][2]],
        ]
    }

    pub fn translation(&self) -> [f64; 3] {
        [self.extrinsics[0][3], self.extrinsics[1][3], self.extrinsics[2][3]]
    }

    /// Structural checks on the intrinsic matrix.
    pub fn validate(&self) -> Result<()> {
        let k = &self.intrinsics;
        if k[2] != [0.0, 0.0, 1.0] || k[1][0] != 0.0 {
            return Err(Error::invalid(
                "intrinsic matrix must have the form [[fx, s, cx], [0, fy, cy], [0, 0, 1]]",
            ));
        }
        if self.h_matrix[2][2] == 0.0 {
            return Err(Error::invalid("H_matrix[2][2] is zero"));
        }
        Ok(())
    }
}

fn calib_err(line: usize, msg: impl Into<String>) -> Error {
    Error::Calibration {
        line,
        msg: msg.into(),
    }
}

struct RawMatrix {
    line: usize,
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

enum RawValue {
    Scalar { line: usize, text: String },
    Matrix(RawMatrix),
}

fn parse_number(line: usize, text: &str) -> Result<f64> {
    text.trim()
        .parse::<f64>()
        .map_err(|_| calib_err(line, format!("malformed number `{}`", text.trim())))
}

fn split_key(line: &str) -> Option<(&str, &str)> {
    let (k, v) = line.split_once(':')?;
    Some((k.trim(), v.trim()))
}

/// Parses the calibration text schema.
pub fn parse_calibration(text: &str) -> Result<CameraCalibration> {
    let lines: Vec<&str> = text.lines().collect();
    let mut entries: Vec<(String, RawValue)> = Vec::new();
    let mut i = 0;
    while i < lines.len() {
        let lineno = i + 1;
        let raw = lines[i];
        i += 1;
        if raw.trim().is_empty() || raw.trim_start().starts_with('#') {
            continue;
        }
        if raw.starts_with(char::is_whitespace) {
            return Err(calib_err(lineno, "unexpected indented line"));
        }
        let (key, value) = split_key(raw).ok_or_else(|| calib_err(lineno, "expected `key: value`"))?;
        if entries.iter().any(|(k, _)| k == key) {
            return Err(calib_err(lineno, format!("duplicate key `{key}`")));
        }
        let block_follows = lines.get(i).is_some_and(|l| l.starts_with(char::is_whitespace));
        if !value.is_empty() || !block_follows {
            entries.push((key.to_string(), RawValue::Scalar { line: lineno, text: value.to_string() }));
            continue;
        }
        // matrix block
        let mut rows = None;
        let mut cols = None;
        let mut data = Vec::new();
        let mut in_data = false;
        while i < lines.len() && lines[i].starts_with(char::is_whitespace) {
            let l = lines[i].trim();
            let ln = i + 1;
            i += 1;
            if l.is_empty() {
                continue;
            }
            if let Some(item) = l.strip_prefix('-') {
                if !in_data {
                    return Err(calib_err(ln, format!("`{key}`: data item before `data:`")));
                }
                data.push(parse_number(ln, item)?);
                continue;
            }
            let (sub, v) = split_key(l).ok_or_else(|| calib_err(ln, format!("`{key}`: expected `name: value`")))?;
            match sub {
                "rows" => rows = Some(v.parse::<usize>().map_err(|_| calib_err(ln, format!("`{key}`: bad rows `{v}`")))?),
                "cols" => cols = Some(v.parse::<usize>().map_err(|_| calib_err(ln, format!("`{key}`: bad cols `{v}`")))?),
                "data" => in_data = true,
                other => return Err(calib_err(ln, format!("`{key}`: unknown matrix field `{other}`"))),
            }
        }
        let rows = rows.ok_or_else(|| calib_err(lineno, format!("`{key}`: missing rows")))?;
        let cols = cols.ok_or_else(|| calib_err(lineno, format!("`{key}`: missing cols")))?;
        if rows * cols != data.len() {
            return Err(calib_err(
                lineno,
                format!("`{key}`: rows x cols = {} but {} data entries", rows * cols, data.len()),
            ));
        }
        entries.push((key.to_string(), RawValue::Matrix(RawMatrix { line: lineno, rows, cols, data })));
    }

    let eof = lines.len();
    let find = |key: &str| -> Result<&RawValue> {
        entries
            .iter()
            .find(|(k, _)| k == key)
            .map(|(_, v)| v)
            .ok_or_else(|| calib_err(eof, format!("missing required key `{key}`")))
    };
    let scalar = |key: &str| -> Result<(usize, String)> {
        match find(key)? {
            RawValue::Scalar { line, text } => Ok((*line, text.clone())),
            RawValue::Matrix(m) => Err(calib_err(m.line, format!("`{key}` must be a scalar"))),
        }
    };
    let int = |key: &str| -> Result<i64> {
        let (line, text) = scalar(key)?;
        text.parse::<i64>().map_err(|_| calib_err(line, format!("`{key}`: malformed integer `{text}`")))
    };
    let float = |key: &str| -> Result<f64> {
        let (line, text) = scalar(key)?;
        parse_number(line, &text)
    };
    let matrix = |key: &str, rows: usize, cols: usize| -> Result<Vec<f64>> {
        match find(key)? {
            RawValue::Matrix(m) => {
                if m.rows != rows || m.cols != cols {
                    return Err(calib_err(
                        m.line,
                        format!("`{key}` must be {rows}x{cols}, found {}x{}", m.rows, m.cols),
                    ));
                }
                Ok(m.data.clone())
            }
            RawValue::Scalar { line, .. } => Err(calib_err(*line, format!("`{key}` must be a matrix"))),
        }
    };
    let dim = |key: &str| -> Result<u32> {
        let v = int(key)?;
        u32::try_from(v).map_err(|_| calib_err(scalar(key).map(|s| s.0).unwrap_or(0), format!("`{key}` out of range")))
    };

    let h = matrix(KEY_H, 3, 3)?;
    let dist = matrix(KEY_DIST, 12, 1)?;
    let k = matrix(KEY_K, 3, 3)?;
    let rt = matrix(KEY_RT, 3, 4)?;
    let mat3 = |d: &[f64]| -> Mat3 { [[d[0], d[1], d[2]], [d[3], d[4], d[5]], [d[6], d[7], d[8]]] };

    let extra = entries
        .iter()
        .filter(|(k, _)| !REQUIRED.contains(&k.as_str()))
        .map(|(k, v)| {
            let v = match v {
                RawValue::Scalar { text, .. } => ExtraValue::Scalar(text.clone()),
                RawValue::Matrix(m) => ExtraValue::Matrix {
                    rows: m.rows,
                    cols: m.cols,
                    data: m.data.clone(),
                },
            };
            (k.clone(), v)
        })
        .collect();

    Ok(CameraCalibration {
        file_version: scalar(KEY_FILE_VERSION)?.1,
        calib_time: scalar(KEY_TIME)?.1,
        calib_type: scalar(KEY_TYPE)?.1,
        image_width: dim(KEY_WIDTH)?,
        image_height: dim(KEY_HEIGHT)?,
        board_dx: float(KEY_BOARD_DX)?,
        board_dy: float(KEY_BOARD_DY)?,
        h_matrix: mat3(&h),
        distortion_model: int(KEY_DIST_MODEL)?,
        distortion_level: int(KEY_DIST_LEVEL)?,
        distortion: dist.try_into().expect("12 entries checked"),
        intrinsics: mat3(&k),
        extrinsics: [
            [rt[0], rt[1], rt[2], rt[3]],
            [rt[4], rt[5], rt[6], rt[7]],
            [rt[8], rt[9], rt[10], rt[11]],
        ],
        extra,
        key_order: entries.into_iter().map(|(k, _)| k).collect(),
    })
}

/// `d.dddddddddddddddde+XXX`: 17 significant digits, signed three-digit
/// exponent.
pub fn format_sci(v: f64) -> String {
    let s = format!("{v:.16e}");
    let (mantissa, exp) = s.split_once('e').expect("exponent present");
    let exp: i32 = exp.parse().expect("integer exponent");
    let sign = if exp < 0 { '-' } else { '+' };
    format!("{mantissa}e{sign}{:03}", exp.abs())
}

fn write_matrix(out: &mut String, key: &str, rows: usize, cols: usize, data: &[f64]) {
    out.push_str(&format!("{key}: \n  rows: {rows}\n  cols: {cols}\n  data: \n"));
    for v in data {
        out.push_str(&format!("    - {}\n", format_sci(*v)));
    }
}

pub fn serialize_calibration(c: &CameraCalibration) -> String {
    let mut order = c.key_order.clone();
    for key in REQUIRED.iter().map(|s| s.to_string()).chain(c.extra.iter().map(|(k, _)| k.clone())) {
        if !order.contains(&key) {
            order.push(key);
        }
    }
    let mut out = String::new();
    for key in order {
        let scalar = |v: &str| format!("{key}: {v}\n");
        match key.as_str() {
            KEY_FILE_VERSION => out.push_str(&scalar(&c.file_version)),
            KEY_TIME => out.push_str(&scalar(&c.calib_time)),
            KEY_TYPE => out.push_str(&scalar(&c.calib_type)),
            KEY_WIDTH => out.push_str(&scalar(&c.image_width.to_string())),
            KEY_HEIGHT => out.push_str(&scalar(&c.image_height.to_string())),
            KEY_BOARD_DX => out.push_str(&scalar(&format_sci(c.board_dx))),
            KEY_BOARD_DY => out.push_str(&scalar(&format_sci(c.board_dy))),
            KEY_DIST_MODEL => out.push_str(&scalar(&c.distortion_model.to_string())),
            KEY_DIST_LEVEL => out.push_str(&scalar(&c.distortion_level.to_string())),
            KEY_H => write_matrix(&mut out, &key, 3, 3, &c.h_matrix.concat()),
            KEY_DIST => write_matrix(&mut out, &key, 12, 1, &c.distortion),
            KEY_K => write_matrix(&mut out, &key, 3, 3, &c.intrinsics.concat()),
            KEY_RT => write_matrix(&mut out, &key, 3, 4, &c.extrinsics.concat()),
            _ => match c.extra.iter().find(|(k, _)| *k == key).map(|(_, v)| v) {
                Some(ExtraValue::Scalar(v)) => out.push_str(&scalar(v)),
                Some(ExtraValue::Matrix { rows, cols, data }) => write_matrix(&mut out, &key, *rows, *cols, data),
                None => {}
            },
        }
    }
    out
}

/// Brown-Conrady coefficients `(k1, k2, p1, p2, k3)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BrownConrady {
    pub k1: f64,
    pub k2: f64,
    pub p1: f64,
    pub p2: f64,
    pub k3: f64,
}

impl BrownConrady {
    pub fn from_coeffs(coeffs: &[f64; 12]) -> Result<Self> {
        if let Some(i) = coeffs[5..].iter().position(|&c| c != 0.0) {
            return Err(Error::UnsupportedDistortion(format!(
                "distortion entry {} is {}, only entries 0..5 (k1, k2, p1, p2, k3) are supported",
                i + 5,
                coeffs[i + 5]
            )));
        }
        if coeffs.iter().any(|c| !c.is_finite()) {
            return Err(Error::UnsupportedDistortion("non-finite coefficient".into()));
        }
        Ok(Self {
            k1: coeffs[0],
            k2: coeffs[1],
            p1: coeffs[2],
            p2: coeffs[3],
            k3: coeffs[4],
        })
    }

    fn radial(&self, x: f64, y: f64) -> f64 {
        let r2 = x * x + y * y;
        1.0 + r2 * (self.k1 + r2 * (self.k2 + r2 * self.k3))
    }

    fn tangential(&self, x: f64, y: f64) -> (f64, f64) {
        let r2 = x * x + y * y;
        (
            2.0 * self.p1 * x * y + self.p2 * (r2 + 2.0 * x * x),
            self.p1 * (r2 + 2.0 * y * y) + 2.0 * self.p2 * x * y,
        )
    }

    pub fn distort(&self, x: f64, y: f64) -> (f64, f64) {
        let r = self.radial(x, y);
        let (tx, ty) = self.tangential(x, y);
        (x * r + tx, y * r + ty)
    }

    /// Fixed-point inversion of [`BrownConrady::distort`].
    pub fn undistort(&self, xd: f64, yd: f64) -> Result<(f64, f64)> {
        const TOL: f64 = 1e-12;
        let (mut x, mut y) = (xd, yd);
        for _ in 0..100 {
            let r = self.radial(x, y);
            let (tx, ty) = self.tangential(x, y);
            let nx = (xd - tx) / r;
            let ny = (yd - ty) / r;
            let step = (nx - x).abs().max((ny - y).abs());
            x = nx;
            y = ny;
            if !step.is_finite() {
                break;
            }
            if step < TOL {
                return Ok((x, y));
            }
        }
        let (dx, dy) = self.distort(x, y);
        Err(Error::NoConvergence {
            residual: ((dx - xd).powi(2) + (dy - yd).powi(2)).sqrt(),
        })
    }
}

pub fn distort(pt: (f64, f64), coeffs: &[f64; 12]) -> Result<(f64, f64)> {
    Ok(BrownConrady::from_coeffs(coeffs)?.distort(pt.0, pt.1))
}

pub fn undistort(pt: (f64, f64), coeffs: &[f64; 12]) -> Result<(f64, f64)> {
    BrownConrady::from_coeffs(coeffs)?.undistort(pt.0, pt.1)
}

/// World point (mm) to pixel: `[R|t]`, perspective divide, distortion,
/// intrinsics.
pub fn project_point(c: &CameraCalibration, world: [f64; 3]) -> Result<(f64, f64)> {
    let e = &c.extrinsics;
    let cam: Vec<f64> = (0..3)
        .map(|r| e[r][0] * world[0] + e[r][1] * world[1] + e[r][2] * world[2] + e[r][3])
        .collect();
    if cam[2] <= 0.0 {
        return Err(Error::BehindCamera { z: cam[2] });
    }
    let (xd, yd) = distort((cam[0] / cam[2], cam[1] / cam[2]), &c.distortion)?;
    let k = &c.intrinsics;
    let w = k[2][0] * xd + k[2][1] * yd + k[2][2];
    Ok((
        (k[0][0] * xd + k[0][1] * yd + k[0][2]) / w,
        (k[1][0] * xd + k[1][1] * yd + k[1][2]) / w,
    ))
}

pub fn apply_homography(h: &Mat3, p: (f64, f64)) -> Result<(f64, f64)> {
    let v = [p.0, p.1, 1.0];
    let row = |r: usize| h[r][0] * v[0] + h[r][1] * v[1] + h[r][2] * v[2];
    let den = row(2);
    if den == 0.0 {
        return Err(Error::invalid("homography maps the point to infinity"));
    }
    Ok((row(0) / den, row(1) / den))
}
