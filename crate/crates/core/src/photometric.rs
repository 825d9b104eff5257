//! Calibrated Lambertian photometric stereo.
//!
//! Under a directional light `L` a Lambertian pixel reads
//! `I = rho * max(0, L . n)`. With `K >= 3` known lights the scaled normal
//! `g = rho * n` is the least-squares solution of `L g = I`, i.e.
//! `(L^T L) g = L^T I`; then `rho = |g|` and `n = g / |g|`.
//!
//! Coordinates: `x` grows along image columns, `y` along rows, and `+z`
//! points from the surface toward the camera.

use std::fs;
use std::path::Path;

use nalgebra::{Cholesky, Matrix3, SymmetricEigen, Vector3, U3};

use crate::error::{Error, Result};
use crate::mvnt::{self, Record};

pub type Vec3 = [f64; 3];

pub fn dot(a: Vec3, b: Vec3) -> f64 {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}

pub fn norm(a: Vec3) -> f64 {
    dot(a, a).sqrt()
}

/// Angle between two nonzero vectors, in radians.
pub fn angle_between(a: Vec3, b: Vec3) -> f64 {
    // atan2 form keeps precision for nearly parallel vectors
    let c = [
        a[1] * b[2] - a[2] * b[1],
        a[2] * b[0] - a[0] * b[2],
        a[0] * b[1] - a[1] * b[0],
    ];
    norm(c).atan2(dot(a, b))
}

#[derive(Debug, Clone, PartialEq)]
pub struct LightRig {
    pub name: String,
    directions: Vec<Vec3>,
}

impl LightRig {
    pub fn new(name: impl Into<String>, directions: Vec<Vec3>) -> Result<Self> {
        let name = name.into();
        if directions.len() < 3 {
            return Err(Error::invalid(format!(
                "light rig `{name}` has {} lights, at least 3 are needed",
                directions.len()
            )));
        }
        for (i, d) in directions.iter().enumerate() {
            if (norm(*d) - 1.0).abs() > 1e-9 {
                return Err(Error::invalid(format!(
                    "light rig `{name}`: direction {i} is not unit length (|L| = {})",
                    norm(*d)
                )));
            }
        }
        Ok(Self { name, directions })
    }

    /// Six lights at 45 degrees elevation, azimuths every 60 degrees.
    pub fn standard_six() -> Self {
        let el = 45f64.to_radians();
        let dirs = (0..6)
            .map(|i| {
                let az = (60.0 * i as f64).to_radians();
                [el.cos() * az.cos(), el.cos() * az.sin(), el.sin()]
            })
            .collect();
        Self::new("standard-6", dirs).expect("standard rig is valid")
    }

    pub fn directions(&self) -> &[Vec3] {
        &self.directions
    }

    pub fn len(&self) -> usize {
        self.directions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.directions.is_empty()
    }

    /// Parses the plain-text rig format: one light per line as three
    /// whitespace-separated floats, `#` starts a comment. Rows within 1e-6
    /// of unit length are renormalized; anything further off is rejected.
    pub fn parse(name: &str, text: &str) -> Result<Self> {
        let mut dirs = Vec::new();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let vals: Vec<f64> = line
                .split_whitespace()
                .map(str::parse)
                .collect::<std::result::Result<_, _>>()
                .map_err(|e| Error::invalid(format!("{name}:{}: {e}", lineno + 1)))?;
            if vals.len() != 3 {
                return Err(Error::invalid(format!(
                    "{name}:{}: expected 3 values, found {}",
                    lineno + 1,
                    vals.len()
                )));
            }
            let v = [vals[0], vals[1], vals[2]];
            let n = norm(v);
            if (n - 1.0).abs() > 1e-6 {
                return Err(Error::invalid(format!(
                    "{name}:{}: light direction is not unit length (|L| = {n})",
                    lineno + 1
                )));
            }
            dirs.push([v[0] / n, v[1] / n, v[2] / n]);
        }
        Self::new(name, dirs)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&path.display().to_string(), &text)
    }

    pub fn to_text(&self) -> String {
        let mut s = String::from("# light directions (x y z), one per line\n");
        for d in &self.directions {
            s.push_str(&format!("{:.17e} {:.17e} {:.17e}\n", d[0], d[1], d[2]));
        }
        s
    }

    fn gram(&self, skip: Option<usize>) -> Matrix3<f64> {
        let mut m = Matrix3::zeros();
        for (k, d) in self.directions.iter().enumerate() {
            if Some(k) == skip {
                continue;
            }
            let v = Vector3::from(*d);
            m += v * v.transpose();
        }
        m
    }
}

/// `K x H x W` observed intensities, light-major.
#[derive(Debug, Clone, PartialEq)]
pub struct IntensityStack {
    pub lights: usize,
    pub height: usize,
    pub width: usize,
    pub data: Vec<f64>,
}

impl IntensityStack {
    pub fn new(lights: usize, height: usize, width: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != lights * height * width {
            return Err(Error::invalid(format!(
                "intensity stack {lights}x{height}x{width} needs {} values, got {}",
                lights * height * width,
                data.len()
            )));
        }
        if data.iter().any(|v| !v.is_finite() || *v < 0.0) {
            return Err(Error::invalid("intensities must be finite and nonnegative"));
        }
        Ok(Self {
            lights,
            height,
            width,
            data,
        })
    }

    pub fn image(&self, k: usize) -> &[f64] {
        let n = self.height * self.width;
        &self.data[k * n..(k + 1) * n]
    }

    pub fn to_record(&self) -> Record {
        Record::f32(
            [self.lights, self.height, self.width],
            self.data.iter().map(|&v| v as f32).collect(),
        )
    }

    pub fn from_record(rec: &Record) -> Result<Self> {
        let t = rec.to_tensor()?;
        match *t.shape() {
            [k, h, w] => Self::new(k, h, w, t.into_data()),
            ref other => Err(Error::invalid(format!("intensity stack must be K x H x W, got {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct NormalMap {
    pub height: usize,
    pub width: usize,
    pub normals: Vec<Vec3>,
    pub valid: Vec<bool>,
}

impl NormalMap {
    pub fn new(height: usize, width: usize, normals: Vec<Vec3>, valid: Vec<bool>) -> Result<Self> {
        let n = height * width;
        if normals.len() != n || valid.len() != n {
            return Err(Error::invalid(format!(
                "normal map {height}x{width} needs {n} normals and flags"
            )));
        }
        Ok(Self {
            height,
            width,
            normals,
            valid,
        })
    }

    pub fn flat(height: usize, width: usize) -> Self {
        Self {
            height,
            width,
            normals: vec![[0.0, 0.0, 1.0]; height * width],
            valid: vec![true; height * width],
        }
    }

    pub fn get(&self, row: usize, col: usize) -> Vec3 {
        self.normals[row * self.width + col]
    }

    /// Channels-first `3 x H x W` values for feature extraction.
    pub fn to_chw(&self) -> Vec<f64> {
        let n = self.height * self.width;
        let mut out = vec![0.0; 3 * n];
        for (i, v) in self.normals.iter().enumerate() {
            for c in 0..3 {
                out[c * n + i] = v[c];
            }
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AlbedoMap {
    pub height: usize,
    pub width: usize,
    pub data: Vec<f64>,
}

impl AlbedoMap {
    pub fn uniform(height: usize, width: usize, rho: f64) -> Self {
        Self {
            height,
            width,
            data: vec![rho; height * width],
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SolveOptions {
    /// Number of dimmest observations dropped per pixel: 0 or 1.
    pub shadow_trim: usize,
    pub min_albedo: f64,
    pub max_cond: f64,
}

impl Default for SolveOptions {
    fn default() -> Self {
        Self {
            shadow_trim: 0,
            min_albedo: 1e-8,
            max_cond: 1e8,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PsSolution {
    pub normals: NormalMap,
    pub albedo: AlbedoMap,
    /// Per-pixel `|L g - I|` over the observations used.
    pub residual: Vec<f64>,
}

fn factor(rig: &LightRig, skip: Option<usize>, max_cond: f64) -> Result<Cholesky<f64, U3>> {
    let gram = rig.gram(skip);
    let eig = SymmetricEigen::new(gram).eigenvalues;
    let (lo, hi) = (eig.min(), eig.max());
    let cond = if lo <= 0.0 { f64::INFINITY } else { hi / lo };
    if !(cond <= max_cond) {
        return Err(Error::RankDeficient {
            rig: rig.name.clone(),
            cond,
            max_cond,
        });
    }
    Cholesky::new(gram).ok_or_else(|| Error::RankDeficient {
        rig: rig.name.clone(),
        cond,
        max_cond,
    })
}

pub fn solve_normals(rig: &LightRig, stack: &IntensityStack, opts: &SolveOptions) -> Result<PsSolution> {
    let k = rig.len();
    if stack.lights != k {
        return Err(Error::invalid(format!(
            "light rig `{}` has {k} lights but the intensity stack has {}",
            rig.name, stack.lights
        )));
    }
    if opts.shadow_trim > 1 {
        return Err(Error::invalid("shadow_trim must be 0 or 1"));
    }
    let trim = opts.shadow_trim == 1 && k >= 4;
    if opts.shadow_trim == 1 && !trim {
        return Err(Error::invalid(format!(
            "shadow trimming needs at least 4 lights, rig `{}` has {k}",
            rig.name
        )));
    }
    let full = factor(rig, None, opts.max_cond)?;
    let trimmed: Vec<Cholesky<f64, U3>> = if trim {
        (0..k)
            .map(|s| factor(rig, Some(s), opts.max_cond))
            .collect::<Result<_>>()?
    } else {
        Vec::new()
    };

    let (h, w) = (stack.height, stack.width);
    let n = h * w;
    let mut normals = vec![[0.0; 3]; n];
    let mut valid = vec![false; n];
    let mut albedo = vec![0.0; n];
    let mut residual = vec![0.0; n];
    let dirs = rig.directions();
    let mut obs = vec![0.0; k];
    for p in 0..n {
        for (kk, o) in obs.iter_mut().enumerate() {
            *o = stack.data[kk * n + p];
        }
        let skip = if trim {
            // first index of the minimum keeps the choice deterministic
            let mut best = 0;
            for kk in 1..k {
                if obs[kk] < obs[best] {
                    best = kk;
                }
            }
            Some(best)
        } else {
            None
        };
        let mut rhs = Vector3::zeros();
        for kk in 0..k {
            if Some(kk) == skip {
                continue;
            }
            rhs += Vector3::from(dirs[kk]) * obs[kk];
        }
        let chol = skip.map_or(&full, |s| &trimmed[s]);
        let g = chol.solve(&rhs);
        let mut r2 = 0.0;
        for kk in 0..k {
            if Some(kk) == skip {
                continue;
            }
            let e = dot(dirs[kk], [g[0], g[1], g[2]]) - obs[kk];
            r2 += e * e;
        }
        residual[p] = r2.sqrt();
        let rho = g.norm();
        albedo[p] = rho;
        if rho >= opts.min_albedo {
            valid[p] = true;
            normals[p] = [g[0] / rho, g[1] / rho, g[2] / rho];
        }
    }
    Ok(PsSolution {
        normals: NormalMap::new(h, w, normals, valid)?,
        albedo: AlbedoMap {
            height: h,
            width: w,
            data: albedo,
        },
        residual,
    })
}

/// Renders `rho * max(0, L . n)`; invalid pixels render 0.
pub fn render_lambertian(normals: &NormalMap, albedo: &AlbedoMap, light: Vec3) -> Result<Vec<f64>> {
    if (norm(light) - 1.0).abs() > 1e-9 {
        return Err(Error::invalid(format!(
            "light direction must be unit length (|L| = {})",
            norm(light)
        )));
    }
    if albedo.height != normals.height || albedo.width != normals.width {
        return Err(Error::shape(
            "render_lambertian",
            &[normals.height, normals.width],
            &[albedo.height, albedo.width],
        ));
    }
    Ok(normals
        .normals
        .iter()
        .zip(&normals.valid)
        .zip(&albedo.data)
        .map(|((n, &ok), &rho)| if ok { rho * dot(light, *n).max(0.0) } else { 0.0 })
        .collect())
}

pub fn render_stack(rig: &LightRig, normals: &NormalMap, albedo: &AlbedoMap) -> Result<IntensityStack> {
    let mut data = Vec::with_capacity(rig.len() * normals.normals.len());
    for &l in rig.directions() {
        data.extend(render_lambertian(normals, albedo, l)?);
    }
    IntensityStack::new(rig.len(), normals.height, normals.width, data)
}

/// Mean angular error in radians over pixels valid in both maps.
pub fn mean_angular_error(a: &NormalMap, b: &NormalMap) -> f64 {
    let mut total = 0.0;
    let mut count = 0usize;
    for i in 0..a.normals.len() {
        if a.valid[i] && b.valid[i] {
            total += angle_between(a.normals[i], b.normals[i]);
            count += 1;
        }
    }
    if count == 0 {
        0.0
    } else {
        total / count as f64
    }
}

/// Encodes a normal map as an `H x W x 3` float32 record plus an `H x W`
/// uint8 validity sidecar.
pub fn encode_normals(map: &NormalMap) -> (Record, Record) {
    let data = map
        .normals
        .iter()
        .flat_map(|n| n.iter().map(|&v| v as f32))
        .collect();
    (
        Record::f32([map.height, map.width, 3], data),
        Record::u8([map.height, map.width], map.valid.iter().map(|&v| v as u8).collect()),
    )
}

pub fn decode_normals(normals: &Record, valid: &Record) -> Result<NormalMap> {
    let t = normals.to_tensor()?;
    let (h, w) = match *t.shape() {
        [h, w, 3] => (h, w),
        ref other => return Err(Error::Mvnt(format!("normal map must be H x W x 3, got {other:?}"))),
    };
    let (vshape, vdata) = valid.clone().into_u8()?;
    if vshape != [h, w] {
        return Err(Error::Mvnt(format!("validity sidecar shape {vshape:?} does not match {h}x{w}")));
    }
    let normals = t.data().chunks_exact(3).map(|c| [c[0], c[1], c[2]]).collect();
    NormalMap::new(h, w, normals, vdata.iter().map(|&v| v != 0).collect())
}

pub fn write_normals(map: &NormalMap, normals_path: &Path, valid_path: &Path) -> Result<()> {
    let (n, v) = encode_normals(map);
    mvnt::write_file(normals_path, &n)?;
    mvnt::write_file(valid_path, &v)
}

pub fn read_normals(normals_path: &Path, valid_path: &Path) -> Result<NormalMap> {
    decode_normals(&mvnt::read_file(normals_path)?, &mvnt::read_file(valid_path)?)
}
