//! Seeded multi-view synthetic samples: heightfields, defects, shading, and
//! the on-disk dataset layout.
//!
//! ```text
//! <root>/manifest.txt
//! <root>/<category>/{train,test}/<sample_id>/view_<v>/
//!     rgb.mvnt nv.mvnt nv_valid.mvnt [mask.mvnt] [lights.txt stack.mvnt]
//! ```

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};

use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::mvnt::{self, Record};
use crate::photometric::{self, AlbedoMap, IntensityStack, LightRig, NormalMap};
use crate::rng::{mix_seed, Rng};

pub const NUM_VIEWS: usize = 5;
const NUM_WAVES: usize = 8;

#[derive(Debug, Clone, PartialEq)]
pub struct SurfaceSpec {
    pub height: usize,
    pub width: usize,
    pub base_roughness: f64,
    pub albedo_palette: [[f64; 3]; 3],
    /// Strength of the smooth blend between palette colors; 0 gives the
    /// palette mean everywhere.
    pub albedo_variation: f64,
    pub pixel_pitch: f64,
    pub category_seed: u64,
}

impl SurfaceSpec {
    pub fn validate(&self) -> Result<()> {
        if self.height < 32 || self.width < 32 {
            return Err(Error::invalid(format!(
                "surface resolution {}x{} is below the 32x32 minimum",
                self.height, self.width
            )));
        }
        if !(self.base_roughness.is_finite() && self.base_roughness >= 0.0) {
            return Err(Error::invalid("base_roughness must be finite and nonnegative"));
        }
        if !(self.pixel_pitch.is_finite() && self.pixel_pitch > 0.0) {
            return Err(Error::invalid("pixel_pitch must be positive"));
        }
        if !(self.albedo_variation.is_finite() && self.albedo_variation >= 0.0) {
            return Err(Error::invalid("albedo_variation must be finite and nonnegative"));
        }
        if self.albedo_palette.iter().flatten().any(|&c| !(0.0..=1.0).contains(&c)) {
            return Err(Error::invalid("albedo palette entries must lie in [0, 1]"));
        }
        Ok(())
    }
}

impl Default for SurfaceSpec {
    fn default() -> Self {
        Self {
            height: 64,
            width: 64,
            base_roughness: 0.02,
            albedo_palette: [[0.72, 0.70, 0.66], [0.62, 0.64, 0.70], [0.68, 0.60, 0.56]],
            albedo_variation: 0.5,
            pixel_pitch: 1.0,
            category_seed: 0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum DefectKind {
    None,
    Dent,
    Scratch,
    Stain,
    Combined,
}

impl DefectKind {
    pub const ALL: [DefectKind; 5] = [
        DefectKind::None,
        DefectKind::Dent,
        DefectKind::Scratch,
        DefectKind::Stain,
        DefectKind::Combined,
    ];

    pub fn name(self) -> &'static str {
        match self {
            DefectKind::None => "none",
            DefectKind::Dent => "dent",
            DefectKind::Scratch => "scratch",
            DefectKind::Stain => "stain",
            DefectKind::Combined => "combined",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| Error::invalid(format!("unknown defect kind `{s}`")))
    }

    fn geometric(self) -> bool {
        matches!(self, DefectKind::Dent | DefectKind::Scratch | DefectKind::Combined)
    }

    fn photometric(self) -> bool {
        matches!(self, DefectKind::Stain | DefectKind::Combined)
    }
}

impl fmt::Display for DefectKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DefectSpec {
    pub kind: DefectKind,
    pub view: usize,
    /// `(row, col)` in pixels.
    pub center: (f64, f64),
    /// Dent and stain radius in pixels.
    pub radius: f64,
    /// Scratch length and width in pixels.
    pub length: f64,
    pub width: f64,
    /// Scratch axis angle in radians, measured from the column axis.
    pub angle: f64,
    /// Depth in height units for dents and scratches.
    pub magnitude: f64,
    /// Albedo multiplier for stains.
    pub albedo_factor: f64,
}

impl DefectSpec {
    pub fn none(view: usize) -> Self {
        Self {
            kind: DefectKind::None,
            view,
            center: (0.0, 0.0),
            radius: 0.0,
            length: 0.0,
            width: 0.0,
            angle: 0.0,
            magnitude: 0.0,
            albedo_factor: 1.0,
        }
    }

    pub fn dent(view: usize, center: (f64, f64), radius: f64, magnitude: f64) -> Self {
        Self {
            kind: DefectKind::Dent,
            radius,
            center,
            magnitude,
            ..Self::none(view)
        }
    }

    pub fn stain(view: usize, center: (f64, f64), radius: f64, albedo_factor: f64) -> Self {
        Self {
            kind: DefectKind::Stain,
            radius,
            center,
            albedo_factor,
            ..Self::none(view)
        }
    }

    /// Half-extent of the footprint in pixels.
    fn extent(&self) -> f64 {
        match self.kind {
            DefectKind::None => 0.0,
            DefectKind::Dent | DefectKind::Stain | DefectKind::Combined => self.radius * 1.1,
            DefectKind::Scratch => 0.5 * self.length + self.width,
        }
    }
}

/// Sum of eight low-frequency sinusoids. Orientations, wavelengths and
/// amplitudes come from the category seed; phases come from `view_seed`.
pub fn gen_heightfield(spec: &SurfaceSpec, view_seed: u64) -> Vec<f64> {
    let (h, w) = (spec.height, spec.width);
    let mut shape_rng = Rng::new(spec.category_seed, 11);
    let mut phase_rng = Rng::new(view_seed, 12);
    let mut out = vec![0.0; h * w];
    if spec.base_roughness == 0.0 {
        return out;
    }
    for _ in 0..NUM_WAVES {
        let theta = shape_rng.uniform_range(0.0, std::f64::consts::PI);
        let wavelength = shape_rng.uniform_range(w as f64 / 4.0, w as f64);
        let amplitude = spec.base_roughness * shape_rng.uniform_range(0.5, 1.0);
        let phase = phase_rng.uniform_range(0.0, std::f64::consts::TAU);
        let (kx, ky) = (
            std::f64::consts::TAU * theta.cos() / wavelength,
            std::f64::consts::TAU * theta.sin() / wavelength,
        );
        for r in 0..h {
            for c in 0..w {
                out[r * w + c] += amplitude * (kx * c as f64 + ky * r as f64 + phase).sin();
            }
        }
    }
    out
}

/// Normals of a heightfield, `n ∝ (-dh/dx, -dh/dy, 1)`, with x along columns
/// and y along rows, both in height units via `pitch`.
pub fn height_to_normals(height: &[f64], rows: usize, cols: usize, pitch: f64) -> Result<NormalMap> {
    if !(pitch > 0.0) {
        return Err(Error::invalid("pixel pitch must be positive"));
    }
    if height.len() != rows * cols || rows < 2 || cols < 2 {
        return Err(Error::invalid(format!("height grid does not match {rows}x{cols}")));
    }
    let at = |r: usize, c: usize| height[r * cols + c];
    let diff = |lo: f64, hi: f64, span: usize| (hi - lo) / (span as f64 * pitch);
    let mut normals = Vec::with_capacity(rows * cols);
    for r in 0..rows {
        for c in 0..cols {
            let dx = match c {
                0 => diff(at(r, 0), at(r, 1), 1),
                c if c == cols - 1 => diff(at(r, c - 1), at(r, c), 1),
                c => diff(at(r, c - 1), at(r, c + 1), 2),
            };
            let dy = match r {
                0 => diff(at(0, c), at(1, c), 1),
                r if r == rows - 1 => diff(at(r - 1, c), at(r, c), 1),
                r => diff(at(r - 1, c), at(r + 1, c), 2),
            };
            let n = (dx * dx + dy * dy + 1.0).sqrt();
            normals.push([-dx / n, -dy / n, 1.0 / n]);
        }
    }
    NormalMap::new(rows, cols, normals, vec![true; rows * cols])
}

/// Applies one defect in place and returns its mask.
pub fn apply_defect(
    height: &mut [f64],
    albedo: &mut [[f64; 3]],
    rows: usize,
    cols: usize,
    d: &DefectSpec,
) -> Result<Vec<bool>> {
    let mut mask = vec![false; rows * cols];
    if d.kind == DefectKind::None {
        return Ok(mask);
    }
    let ext = d.extent();
    let (cr, cc) = d.center;
    if !(ext > 0.0 && ext.is_finite())
        || cr - ext < 0.0
        || cc - ext < 0.0
        || cr + ext > (rows - 1) as f64
        || cc + ext > (cols - 1) as f64
    {
        return Err(Error::invalid(format!(
            "{} footprint (center {:?}, half-extent {ext:.2}) leaves the {rows}x{cols} grid",
            d.kind, d.center
        )));
    }
    if d.kind.geometric() && !(d.magnitude > 0.0 && d.magnitude.is_finite()) {
        return Err(Error::invalid(format!("{} magnitude must be positive", d.kind)));
    }
    if d.kind.photometric() && !(d.albedo_factor > 0.0 && d.albedo_factor.is_finite()) {
        return Err(Error::invalid("stain albedo factor must be positive"));
    }
    let (sin, cos) = d.angle.sin_cos();
    for r in 0..rows {
        for c in 0..cols {
            let i = r * cols + c;
            let (dr, dc) = (r as f64 - cr, c as f64 - cc);
            if d.kind.geometric() {
                let bump = match d.kind {
                    DefectKind::Scratch => {
                        let along = dc * cos + dr * sin;
                        let across = -dc * sin + dr * cos;
                        let (sa, sx) = (0.5 * d.length, 0.5 * d.width);
                        (-0.5 * ((along / sa).powi(2) + (across / sx).powi(2))).exp()
                    }
                    _ => {
                        let sigma = 0.5 * d.radius;
                        (-(dr * dr + dc * dc) / (2.0 * sigma * sigma)).exp()
                    }
                };
                let delta = d.magnitude * bump;
                height[i] -= delta;
                if delta > 0.1 * d.magnitude {
                    mask[i] = true;
                }
            }
            if d.kind.photometric() {
                let dist = (dr * dr + dc * dc).sqrt();
                let weight = 1.0 / (1.0 + ((dist - d.radius) / 1.0).exp());
                let factor = 1.0 + (d.albedo_factor - 1.0) * weight;
                for ch in &mut albedo[i] {
                    *ch *= factor;
                }
                if (factor - 1.0).abs() > 0.01 {
                    mask[i] = true;
                }
            }
        }
    }
    Ok(mask)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Label {
    Normal,
    Anomalous,
}

impl Label {
    pub fn name(self) -> &'static str {
        match self {
            Label::Normal => "normal",
            Label::Anomalous => "anomalous",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "normal" => Ok(Label::Normal),
            "anomalous" => Ok(Label::Anomalous),
            other => Err(Error::invalid(format!("unknown label `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ViewData {
    pub height: usize,
    pub width: usize,
    /// `H x W x 3` row-major, values in `[0, 1]`.
    pub rgb: Vec<f64>,
    pub nv: NormalMap,
    pub mask: Vec<bool>,
}

impl ViewData {
    pub fn mask_is_empty(&self) -> bool {
        !self.mask.iter().any(|&m| m)
    }

    /// Channels-first `3 x H x W` RGB.
    pub fn rgb_chw(&self) -> Vec<f64> {
        let n = self.height * self.width;
        let mut out = vec![0.0; 3 * n];
        for i in 0..n {
            for c in 0..3 {
                out[c * n + i] = self.rgb[3 * i + c];
            }
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MvSample {
    pub sample_id: String,
    pub label: Label,
    pub views: Vec<ViewData>,
}

pub fn view_seed(seed: u64, view: usize) -> u64 {
    mix_seed(seed, 0x7669_6577_0000 + view as u64)
}

fn albedo_field(spec: &SurfaceSpec, view_seed: u64) -> Vec<[f64; 3]> {
    let (h, w) = (spec.height, spec.width);
    let mut shape_rng = Rng::new(spec.category_seed, 21);
    let mut phase_rng = Rng::new(view_seed, 22);
    let waves: Vec<(f64, f64, f64)> = (0..3)
        .map(|_| {
            let theta = shape_rng.uniform_range(0.0, std::f64::consts::PI);
            let wavelength = shape_rng.uniform_range(w as f64 / 2.0, 2.0 * w as f64);
            let phase = phase_rng.uniform_range(0.0, std::f64::consts::TAU);
            let k = std::f64::consts::TAU / wavelength;
            (k * theta.cos(), k * theta.sin(), phase)
        })
        .collect();
    let mut out = Vec::with_capacity(h * w);
    for r in 0..h {
        for c in 0..w {
            let logits: Vec<f64> = waves
                .iter()
                .map(|&(kx, ky, p)| spec.albedo_variation * (kx * c as f64 + ky * r as f64 + p).sin())
                .collect();
            let weights: Vec<f64> = logits.iter().map(|l| l.exp()).collect();
            let total: f64 = weights.iter().sum();
            let mut px = [0.0; 3];
            for (wk, color) in weights.iter().zip(&spec.albedo_palette) {
                for ch in 0..3 {
                    px[ch] += wk / total * color[ch];
                }
            }
            out.push(px);
        }
    }
    out
}

/// Renders all five views of one sample. Each view gets an independent
/// heightfield; at most one defect per view.
pub fn render_sample(
    spec: &SurfaceSpec,
    defects: &[DefectSpec],
    seed: u64,
    sample_id: &str,
    rig: &LightRig,
) -> Result<(MvSample, Vec<IntensityStack>)> {
    spec.validate()?;
    let mut per_view: [Option<&DefectSpec>; NUM_VIEWS] = [None; NUM_VIEWS];
    for d in defects {
        if d.view >= NUM_VIEWS {
            return Err(Error::invalid(format!("defect view {} out of range 0..{NUM_VIEWS}", d.view)));
        }
        if d.kind == DefectKind::None {
            continue;
        }
        if per_view[d.view].replace(d).is_some() {
            return Err(Error::invalid(format!("conflicting defects on view {}", d.view)));
        }
    }
    let (h, w) = (spec.height, spec.width);
    let mut views = Vec::with_capacity(NUM_VIEWS);
    let mut stacks = Vec::with_capacity(NUM_VIEWS);
    for (v, defect) in per_view.iter().enumerate() {
        let vs = view_seed(seed, v);
        let mut height = gen_heightfield(spec, vs);
        let mut albedo = albedo_field(spec, vs);
        let mask = match defect {
            Some(d) => apply_defect(&mut height, &mut albedo, h, w, d)?,
            None => vec![false; h * w],
        };
        let nv = height_to_normals(&height, h, w, spec.pixel_pitch)?;
        let rgb = albedo
            .iter()
            .zip(&nv.normals)
            .flat_map(|(a, n)| {
                let shade = 0.5 + 0.5 * n[2];
                a.map(|ch| (ch * shade).clamp(0.0, 1.0))
            })
            .collect();
        let gray = AlbedoMap {
            height: h,
            width: w,
            data: albedo.iter().map(|a| (a[0] + a[1] + a[2]) / 3.0).collect(),
        };
        stacks.push(photometric::render_stack(rig, &nv, &gray)?);
        views.push(ViewData {
            height: h,
            width: w,
            rgb,
            nv,
            mask,
        });
    }
    let label = if views.iter().all(ViewData::mask_is_empty) {
        Label::Normal
    } else {
        Label::Anomalous
    };
    Ok((
        MvSample {
            sample_id: sample_id.to_string(),
            label,
            views,
        },
        stacks,
    ))
}

/// Sampling ranges for randomly placed defects.
#[derive(Debug, Clone, PartialEq)]
pub struct DefectRanges {
    pub radius: (f64, f64),
    /// Peak surface tilt introduced by a dent or scratch, in degrees. The
    /// depth is derived from it so the geometric cue is scale-free.
    pub tilt_deg: (f64, f64),
    pub albedo_factor: (f64, f64),
    pub scratch_length: (f64, f64),
    pub scratch_width: (f64, f64),
}

impl Default for DefectRanges {
    fn default() -> Self {
        Self {
            radius: (5.0, 8.0),
            tilt_deg: (9.0, 12.0),
            albedo_factor: (0.6, 0.8),
            scratch_length: (14.0, 22.0),
            scratch_width: (2.0, 3.0),
        }
    }
}

/// Depth of a Gaussian profile with standard deviation `sigma_px` whose
/// steepest slope makes an angle of `tilt_deg` with the base plane.
pub fn depth_for_tilt(tilt_deg: f64, sigma_px: f64, pitch: f64) -> f64 {
    // max |d/dr exp(-r^2 / 2 s^2)| = exp(-1/2) / s
    tilt_deg.to_radians().tan() * sigma_px * pitch * 0.5f64.exp()
}

pub fn random_defect(
    kind: DefectKind,
    view: usize,
    spec: &SurfaceSpec,
    ranges: &DefectRanges,
    rng: &mut Rng,
) -> DefectSpec {
    let draw = |rng: &mut Rng, r: (f64, f64)| rng.uniform_range(r.0, r.1);
    let radius = draw(rng, ranges.radius);
    let tilt = draw(rng, ranges.tilt_deg);
    let factor = draw(rng, ranges.albedo_factor);
    let length = draw(rng, ranges.scratch_length);
    let width = draw(rng, ranges.scratch_width);
    let angle = draw(rng, (0.0, std::f64::consts::PI));
    let mut d = DefectSpec {
        kind,
        view,
        center: (0.0, 0.0),
        radius,
        length,
        width,
        angle,
        magnitude: 0.0,
        albedo_factor: factor,
    };
    d.magnitude = match kind {
        DefectKind::Scratch => depth_for_tilt(tilt, 0.5 * width, spec.pixel_pitch),
        DefectKind::Dent | DefectKind::Combined => depth_for_tilt(tilt, 0.5 * radius, spec.pixel_pitch),
        _ => 0.0,
    };
    let ext = d.extent().ceil() + 1.0;
    d.center = (
        draw(rng, (ext, spec.height as f64 - 1.0 - ext)),
        draw(rng, (ext, spec.width as f64 - 1.0 - ext)),
    );
    d
}

#[derive(Debug, Clone, PartialEq)]
pub struct CategorySpec {
    pub name: String,
    pub surface: SurfaceSpec,
    pub train: usize,
    pub test_normal: usize,
    pub test_anomalous: usize,
    pub defect_mix: Vec<(DefectKind, f64)>,
    /// Views a defect may be placed on.
    pub defect_views: Vec<usize>,
    pub ranges: DefectRanges,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DatasetManifest {
    pub master_seed: u64,
    pub categories: Vec<CategorySpec>,
    /// Also write the six-light intensity stack and rig per view.
    pub write_stacks: bool,
    /// Extra `key=value` lines for the manifest header.
    pub header: Vec<(String, String)>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Split {
    Train,
    Test,
}

impl Split {
    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Test => "test",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "test" => Ok(Split::Test),
            other => Err(Error::invalid(format!("unknown split `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SampleEntry {
    pub category: String,
    pub sample_id: String,
    pub split: Split,
    pub label: Label,
    pub defect_kind: DefectKind,
    /// `None` when the sample has no defect.
    pub defect_view: Option<usize>,
}

impl SampleEntry {
    pub fn dir(&self, root: &Path) -> PathBuf {
        root.join(&self.category).join(self.split.name()).join(&self.sample_id)
    }

    pub fn view_dir(&self, root: &Path, view: usize) -> PathBuf {
        self.dir(root).join(format!("view_{view}"))
    }
}

/// Parsed `manifest.txt`.
#[derive(Debug, Clone, PartialEq)]
pub struct DatasetIndex {
    pub header: BTreeMap<String, String>,
    pub categories: Vec<String>,
    pub samples: Vec<SampleEntry>,
}

/// 64-bit digest of a sample id; seeds derive from ids, never from order.
pub fn id_hash(id: &str) -> u64 {
    let digest = Sha256::digest(id.as_bytes());
    u64::from_le_bytes(digest[..8].try_into().expect("digest has 32 bytes"))
}

pub fn sample_seed(master_seed: u64, sample_id: &str) -> u64 {
    mix_seed(master_seed, id_hash(sample_id))
}

fn check_category_name(name: &str) -> Result<()> {
    let ok = !name.is_empty()
        && name
            .chars()
            .all(|c| c.is_ascii_lowercase() || c.is_ascii_digit() || c == '_');
    if ok {
        Ok(())
    } else {
        Err(Error::invalid(format!(
            "category name `{name}` must be nonempty and use only [a-z0-9_]"
        )))
    }
}

/// Plans every sample of a category: ids, labels and drawn defects.
pub fn plan_category(master_seed: u64, cat: &CategorySpec) -> Result<Vec<(SampleEntry, Option<DefectSpec>)>> {
    check_category_name(&cat.name)?;
    if cat.test_anomalous > 0 {
        if cat.defect_mix.is_empty() || cat.defect_mix.iter().any(|(_, w)| !(*w >= 0.0)) {
            return Err(Error::invalid(format!("category `{}`: invalid defect mix", cat.name)));
        }
        if cat.defect_mix.iter().any(|(k, w)| *k == DefectKind::None && *w > 0.0) {
            return Err(Error::invalid("defect mix may not contain `none`"));
        }
        if cat.defect_views.is_empty() || cat.defect_views.iter().any(|&v| v >= NUM_VIEWS) {
            return Err(Error::invalid(format!("category `{}`: invalid defect views", cat.name)));
        }
    }
    let total_weight: f64 = cat.defect_mix.iter().map(|(_, w)| w).sum();
    let mut out = Vec::new();
    let mut push = |split: Split, idx: usize, anomalous: bool| -> Result<()> {
        let sample_id = format!("{}_{}_{idx:04}", cat.name, split.name());
        let mut entry = SampleEntry {
            category: cat.name.clone(),
            sample_id,
            split,
            label: Label::Normal,
            defect_kind: DefectKind::None,
            defect_view: None,
        };
        let mut defect = None;
        if anomalous {
            let mut rng = Rng::new(sample_seed(master_seed, &entry.sample_id), 0xdefec7);
            let mut pick = rng.uniform() * total_weight;
            let mut kind = cat.defect_mix.last().expect("nonempty mix").0;
            for &(k, w) in &cat.defect_mix {
                if pick < w {
                    kind = k;
                    break;
                }
                pick -= w;
            }
            let view = cat.defect_views[rng.below(cat.defect_views.len())];
            let d = random_defect(kind, view, &cat.surface, &cat.ranges, &mut rng);
            entry.label = Label::Anomalous;
            entry.defect_kind = kind;
            entry.defect_view = Some(view);
            defect = Some(d);
        }
        out.push((entry, defect));
        Ok(())
    };
    for i in 0..cat.train {
        push(Split::Train, i, false)?;
    }
    for i in 0..cat.test_normal + cat.test_anomalous {
        push(Split::Test, i, i >= cat.test_normal)?;
    }
    Ok(out)
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn create_dir(path: &Path) -> Result<()> {
    fs::create_dir_all(path).map_err(|e| Error::io(path, e))
}

pub fn rgb_record(view: &ViewData) -> Record {
    Record::f32(
        [view.height, view.width, 3],
        view.rgb.iter().map(|&v| v as f32).collect(),
    )
}

pub fn mask_record(height: usize, width: usize, mask: &[bool]) -> Record {
    Record::u8([height, width], mask.iter().map(|&m| m as u8).collect())
}

/// Writes the full dataset. Fails if `out_dir` exists and is not empty.
pub fn generate_dataset(manifest: &DatasetManifest, out_dir: &Path) -> Result<DatasetIndex> {
    if out_dir.exists() {
        let mut entries = fs::read_dir(out_dir).map_err(|e| Error::io(out_dir, e))?;
        if entries.next().is_some() {
            return Err(Error::invalid(format!(
                "output directory {} exists and is not empty",
                out_dir.display()
            )));
        }
    }
    let mut names: Vec<&str> = manifest.categories.iter().map(|c| c.name.as_str()).collect();
    names.sort_unstable();
    if names.windows(2).any(|w| w[0] == w[1]) {
        return Err(Error::invalid("duplicate category names"));
    }
    create_dir(out_dir)?;
    let rig = LightRig::standard_six();
    let mut samples = Vec::new();
    for cat in &manifest.categories {
        cat.surface.validate()?;
        for (entry, defect) in plan_category(manifest.master_seed, cat)? {
            let seed = sample_seed(manifest.master_seed, &entry.sample_id);
            let defects: Vec<DefectSpec> = defect.into_iter().collect();
            let (sample, stacks) = render_sample(&cat.surface, &defects, seed, &entry.sample_id, &rig)?;
            if sample.label != entry.label {
                return Err(Error::invalid(format!(
                    "sample {}: defect produced an empty mask",
                    entry.sample_id
                )));
            }
            for (v, (view, stack)) in sample.views.iter().zip(&stacks).enumerate() {
                let dir = entry.view_dir(out_dir, v);
                create_dir(&dir)?;
                mvnt::write_file(&dir.join("rgb.mvnt"), &rgb_record(view))?;
                photometric::write_normals(&view.nv, &dir.join("nv.mvnt"), &dir.join("nv_valid.mvnt"))?;
                if !view.mask_is_empty() {
                    mvnt::write_file(&dir.join("mask.mvnt"), &mask_record(view.height, view.width, &view.mask))?;
                }
                if manifest.write_stacks {
                    write_text(&dir.join("lights.txt"), &rig.to_text())?;
                    mvnt::write_file(&dir.join("stack.mvnt"), &stack.to_record())?;
                }
            }
            samples.push(entry);
        }
    }
    let mut header = BTreeMap::new();
    header.insert("format".to_string(), "mvnad-dataset".to_string());
    header.insert("version".to_string(), "1".to_string());
    header.insert("master_seed".to_string(), manifest.master_seed.to_string());
    header.insert("views".to_string(), NUM_VIEWS.to_string());
    header.insert(
        "categories".to_string(),
        manifest.categories.iter().map(|c| c.name.as_str()).collect::<Vec<_>>().join(";"),
    );
    for (k, v) in &manifest.header {
        header.insert(k.clone(), v.clone());
    }
    let index = DatasetIndex {
        header,
        categories: manifest.categories.iter().map(|c| c.name.clone()).collect(),
        samples,
    };
    write_text(&out_dir.join("manifest.txt"), &index.to_text())?;
    Ok(index)
}

impl DatasetIndex {
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for (k, v) in &self.header {
            out.push_str(&format!("{k}={v}\n"));
        }
        for s in &self.samples {
            let view = s.defect_view.map(|v| v.to_string()).unwrap_or_else(|| "-".into());
            out.push_str(&format!(
                "{},{},{},{},{}\n",
                s.sample_id,
                s.split.name(),
                s.label.name(),
                s.defect_kind,
                view
            ));
        }
        out
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut header = BTreeMap::new();
        let mut raw = Vec::new();
        for (n, line) in text.lines().enumerate() {
            let bad = |msg: &str| Error::invalid(format!("manifest line {}: {msg}", n + 1));
            if line.trim().is_empty() {
                continue;
            }
            if line.contains(',') {
                let f: Vec<&str> = line.split(',').collect();
                if f.len() != 5 {
                    return Err(bad("expected sample_id,split,label,defect_kind,defect_view"));
                }
                raw.push((n + 1, f));
            } else if let Some((k, v)) = line.split_once('=') {
                if !raw.is_empty() {
                    return Err(bad("header line after sample records"));
                }
                header.insert(k.trim().to_string(), v.trim().to_string());
            } else {
                return Err(bad("unrecognized line"));
            }
        }
        let categories: Vec<String> = header
            .get("categories")
            .ok_or_else(|| Error::invalid("manifest header lacks `categories`"))?
            .split(';')
            .filter(|s| !s.is_empty())
            .map(str::to_string)
            .collect();
        let mut samples = Vec::with_capacity(raw.len());
        for (n, f) in raw {
            let bad = |msg: String| Error::invalid(format!("manifest line {n}: {msg}"));
            let category = categories
                .iter()
                .filter(|c| f[0].starts_with(&format!("{c}_")))
                .max_by_key(|c| c.len())
                .ok_or_else(|| bad(format!("sample `{}` matches no category", f[0])))?;
            let defect_view = match f[4] {
                "-" => None,
                v => Some(v.parse::<usize>().map_err(|_| bad(format!("bad defect view `{v}`")))?),
            };
            samples.push(SampleEntry {
                category: category.clone(),
                sample_id: f[0].to_string(),
                split: Split::parse(f[1]).map_err(|e| bad(e.to_string()))?,
                label: Label::parse(f[2]).map_err(|e| bad(e.to_string()))?,
                defect_kind: DefectKind::parse(f[3]).map_err(|e| bad(e.to_string()))?,
                defect_view,
            });
        }
        Ok(Self {
            header,
            categories,
            samples,
        })
    }

    pub fn load(root: &Path) -> Result<Self> {
        let path = root.join("manifest.txt");
        let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        Self::parse(&text).map_err(|e| Error::Format {
            path,
            msg: e.to_string(),
        })
    }

    pub fn select<'a>(&'a self, category: &'a str, split: Split) -> impl Iterator<Item = &'a SampleEntry> + 'a {
        self.samples
            .iter()
            .filter(move |s| s.category == category && s.split == split)
    }
}

/// Reads one view from disk. A missing mask file means an empty mask.
pub fn load_view(root: &Path, entry: &SampleEntry, view: usize) -> Result<ViewData> {
    let dir = entry.view_dir(root, view);
    let rgb = mvnt::read_file(&dir.join("rgb.mvnt"))?.to_tensor()?;
    let (h, w) = match *rgb.shape() {
        [h, w, 3] => (h, w),
        ref other => {
            return Err(Error::Format {
                path: dir.join("rgb.mvnt"),
                msg: format!("rgb must be H x W x 3, got {other:?}"),
            })
        }
    };
    let nv = photometric::read_normals(&dir.join("nv.mvnt"), &dir.join("nv_valid.mvnt"))?;
    if (nv.height, nv.width) != (h, w) {
        return Err(Error::Format {
            path: dir.join("nv.mvnt"),
            msg: format!("normal map {}x{} does not match rgb {h}x{w}", nv.height, nv.width),
        });
    }
    let mask_path = dir.join("mask.mvnt");
    let mask = if mask_path.exists() {
        let (shape, data) = mvnt::read_file(&mask_path)?.into_u8()?;
        if shape != [h, w] {
            return Err(Error::Format {
                path: mask_path,
                msg: format!("mask shape {shape:?} does not match {h}x{w}"),
            });
        }
        data.iter().map(|&m| m != 0).collect()
    } else {
        vec![false; h * w]
    };
    Ok(ViewData {
        height: h,
        width: w,
        rgb: rgb.into_data(),
        nv,
        mask,
    })
}

pub fn load_sample(root: &Path, entry: &SampleEntry) -> Result<MvSample> {
    let views = (0..NUM_VIEWS)
        .map(|v| load_view(root, entry, v))
        .collect::<Result<Vec<_>>>()?;
    Ok(MvSample {
        sample_id: entry.sample_id.clone(),
        label: entry.label,
        views,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::photometric::angle_between;

    fn spec() -> SurfaceSpec {
        SurfaceSpec {
            category_seed: 5,
            ..SurfaceSpec::default()
        }
    }

    #[test]
    fn heightfield_basics() {
        let flat = SurfaceSpec {
            base_roughness: 0.0,
            ..spec()
        };
        assert!(gen_heightfield(&flat, 3).iter().all(|&h| h == 0.0));
        assert_eq!(gen_heightfield(&spec(), 3), gen_heightfield(&spec(), 3));
        assert_ne!(gen_heightfield(&spec(), 3), gen_heightfield(&spec(), 4));
        for seed in 0..100 {
            let s = SurfaceSpec {
                category_seed: seed,
                ..spec()
            };
            let bound = 8.0 * s.base_roughness;
            assert!(gen_heightfield(&s, seed * 7).iter().all(|h| h.abs() <= bound));
        }
    }

    #[test]
    fn plane_normals() {
        let (rows, cols, a, pitch) = (8, 9, 0.3, 0.5);
        let h: Vec<f64> = (0..rows * cols).map(|i| a * (i % cols) as f64 * pitch).collect();
        let nv = height_to_normals(&h, rows, cols, pitch).unwrap();
        let expect = [-a / (1.0 + a * a).sqrt(), 0.0, 1.0 / (1.0 + a * a).sqrt()];
        for n in &nv.normals {
            assert!(angle_between(*n, expect) < 1e-12);
        }
        let flat = height_to_normals(&vec![2.0; 16], 4, 4, 1.0).unwrap();
        assert!(flat.normals.iter().all(|n| *n == [0.0, 0.0, 1.0]));
    }

    #[test]
    fn none_defect_is_identity() {
        let mut h = vec![1.0; 32 * 32];
        let mut a = vec![[0.5; 3]; 32 * 32];
        let m = apply_defect(&mut h, &mut a, 32, 32, &DefectSpec::none(0)).unwrap();
        assert!(m.iter().all(|&x| !x));
        assert!(h.iter().all(|&x| x == 1.0) && a.iter().all(|x| *x == [0.5; 3]));
    }

    #[test]
    fn footprint_out_of_bounds() {
        let mut h = vec![0.0; 32 * 32];
        let mut a = vec![[0.5; 3]; 32 * 32];
        let d = DefectSpec::dent(0, (3.0, 16.0), 8.0, 1.0);
        assert!(apply_defect(&mut h, &mut a, 32, 32, &d).is_err());
    }

    #[test]
    fn conflicting_defects_rejected() {
        let d = DefectSpec::dent(1, (32.0, 32.0), 6.0, 0.5);
        let rig = LightRig::standard_six();
        assert!(render_sample(&spec(), &[d, d], 1, "x", &rig).is_err());
    }
}
