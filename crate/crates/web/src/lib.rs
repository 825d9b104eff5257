//! WebAssembly bindings for the static demo page in `www/`.
//!
//! A [`Scene`] is one synthetic view with an optional defect plus its
//! defect-free twin. From it the page can re-solve photometric stereo under
//! noise and compare how visible the defect is in each modality.

use mvnad::metrics::{pixel_auroc, LabeledMap};
use mvnad::photometric::{
    angle_between, mean_angular_error, solve_normals, IntensityStack, LightRig, NormalMap, SolveOptions,
};
use mvnad::rng::Rng;
use mvnad::synth::{random_defect, render_sample, DefectKind, DefectRanges, SurfaceSpec, ViewData};
use wasm_bindgen::prelude::*;

const SIZE: usize = 128;

fn js(e: mvnad::Error) -> JsError {
    JsError::new(&e.to_string())
}

fn rgba(values: impl Iterator<Item = [f64; 3]>) -> Vec<u8> {
    values
        .flat_map(|c| {
            let q = |v: f64| (v.clamp(0.0, 1.0) * 255.0).round() as u8;
            [q(c[0]), q(c[1]), q(c[2]), 255]
        })
        .collect()
}

fn normals_rgba(nv: &NormalMap) -> Vec<u8> {
    rgba(nv.normals.iter().map(|n| [0.5 + 0.5 * n[0], 0.5 + 0.5 * n[1], 0.5 + 0.5 * n[2]]))
}

/// Heat colors with `full_scale` mapped to the top of the ramp.
fn heat_rgba(map: &[f64], full_scale: f64) -> Vec<u8> {
    rgba(map.iter().map(|&v| {
        let t = (v / full_scale).min(1.0);
        [t, t * t, 0.2 * (1.0 - t)]
    }))
}

#[wasm_bindgen]
pub struct Scene {
    view: ViewData,
    twin: ViewData,
    stack: IntensityStack,
    rig: LightRig,
    kind: DefectKind,
}

#[wasm_bindgen]
impl Scene {
    /// Renders view 0 of a seeded sample with a defect of `kind`
    /// (`none`, `dent`, `scratch`, `stain` or `combined`) and its twin.
    #[wasm_bindgen(constructor)]
    pub fn new(seed: u32, kind: &str, roughness: f64) -> Result<Scene, JsError> {
        let kind = DefectKind::parse(kind).map_err(js)?;
        let spec = SurfaceSpec {
            height: SIZE,
            width: SIZE,
            base_roughness: roughness,
            category_seed: u64::from(seed) ^ 0x5eed,
            ..SurfaceSpec::default()
        };
        let rig = LightRig::standard_six();
        let mut rng = Rng::new(u64::from(seed), 3);
        let defects: Vec<_> = (kind != DefectKind::None)
            .then(|| random_defect(kind, 0, &spec, &DefectRanges::default(), &mut rng))
            .into_iter()
            .collect();
        let (sample, mut stacks) = render_sample(&spec, &defects, u64::from(seed), "demo", &rig).map_err(js)?;
        let (twin, _) = render_sample(&spec, &[], u64::from(seed), "demo", &rig).map_err(js)?;
        Ok(Scene {
            view: sample.views.into_iter().next().expect("five views"),
            twin: twin.views.into_iter().next().expect("five views"),
            stack: stacks.swap_remove(0),
            rig,
            kind,
        })
    }

    pub fn width(&self) -> usize {
        self.view.width
    }

    pub fn height(&self) -> usize {
        self.view.height
    }

    pub fn defect_kind(&self) -> String {
        self.kind.name().to_string()
    }

    pub fn rgb_image(&self) -> Vec<u8> {
        rgba(self.view.rgb.chunks_exact(3).map(|c| [c[0], c[1], c[2]]))
    }

    pub fn normal_image(&self) -> Vec<u8> {
        normals_rgba(&self.view.nv)
    }

    pub fn mask_image(&self) -> Vec<u8> {
        rgba(self.view.mask.iter().map(|&m| if m { [1.0, 0.2, 0.2] } else { [0.1, 0.1, 0.1] }))
    }

    /// Solves the six-light stack after multiplying every intensity by
    /// `1 + noise * N(0, 1)`.
    pub fn solve(&self, noise: f64, seed: u32) -> Result<Solution, JsError> {
        let mut rng = Rng::new(u64::from(seed), 9);
        let data = self
            .stack
            .data
            .iter()
            .map(|&v| (v * (1.0 + noise * rng.gaussian())).max(0.0))
            .collect();
        let stack = IntensityStack::new(self.stack.lights, self.stack.height, self.stack.width, data).map_err(js)?;
        let sol = solve_normals(&self.rig, &stack, &SolveOptions::default()).map_err(js)?;
        Ok(Solution {
            image: normals_rgba(&sol.normals),
            mean_error_deg: mean_angular_error(&sol.normals, &self.view.nv).to_degrees(),
        })
    }

    /// Per-pixel difference from the defect-free twin in one modality:
    /// RGB distance for `rgb`, normal angle in degrees for `nv`. Both are
    /// drawn on a fixed scale (0.1 and 10 degrees) so the two are comparable.
    pub fn difference(&self, modality: &str) -> Result<Difference, JsError> {
        let (map, full_scale) = match modality {
            "rgb" => (
                self.view
                    .rgb
                    .chunks_exact(3)
                    .zip(self.twin.rgb.chunks_exact(3))
                    .map(|(a, b)| a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt())
                    .collect::<Vec<_>>(),
                0.1,
            ),
            "nv" => (
                self.view
                    .nv
                    .normals
                    .iter()
                    .zip(&self.twin.nv.normals)
                    .map(|(a, b)| angle_between(*a, *b).to_degrees())
                    .collect(),
                10.0,
            ),
            other => return Err(JsError::new(&format!("unknown modality `{other}`, expected rgb or nv"))),
        };
        let image = heat_rgba(&map, full_scale);
        let peak = map.iter().copied().fold(0.0, f64::max);
        let p_auroc = if self.view.mask_is_empty() {
            // Undefined without defect pixels.
            f64::NAN
        } else {
            let labeled = LabeledMap::new(self.view.height, self.view.width, map, self.view.mask.clone()).map_err(js)?;
            pixel_auroc(&[labeled]).map_err(js)?
        };
        Ok(Difference { image, peak, p_auroc })
    }
}

#[wasm_bindgen]
pub struct Solution {
    image: Vec<u8>,
    mean_error_deg: f64,
}

#[wasm_bindgen]
impl Solution {
    pub fn image(&self) -> Vec<u8> {
        self.image.clone()
    }

    pub fn mean_error_deg(&self) -> f64 {
        self.mean_error_deg
    }
}

#[wasm_bindgen]
pub struct Difference {
    image: Vec<u8>,
    peak: f64,
    p_auroc: f64,
}

#[wasm_bindgen]
impl Difference {
    pub fn image(&self) -> Vec<u8> {
        self.image.clone()
    }

    pub fn p_auroc(&self) -> f64 {
        self.p_auroc
    }

    /// Largest per-pixel change, in the modality's units.
    pub fn peak(&self) -> f64 {
        self.peak
    }
}
