//! Flat `section.key = value` configuration and its typed view.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use mvnad::cprn::{
    Ablation, DecoderResidual, EncoderConfig, InferConfig, MapSource, ModalityMode, ModelConfig, ScoreMode,
    TrainConfig,
};
use mvnad::metrics::DEFAULT_FPR_LIMIT;
use mvnad::optim::AdamWConfig;
use mvnad::rng::mix_seed;
use mvnad::synth::{id_hash, CategorySpec, DefectKind, DefectRanges, SurfaceSpec, NUM_VIEWS};
use sha2::{Digest, Sha256};

use crate::error::{invalid, io_err, CliResult};

const KEYS: &[&str] = &[
    "run.seed",
    "run.categories",
    "data.root",
    "synth.categories",
    "synth.write_stacks",
    "encoder.patch",
    "encoder.dim",
    "encoder.levels",
    "encoder.heads",
    "encoder.ffn_mult",
    "encoder.seed",
    "model.prototypes",
    "model.heads",
    "model.ffn_mult",
    "model.tied_branches",
    "model.mode",
    "model.ablation",
    "model.decoder_residual",
    "model.rgb_output_norm",
    "model.nv_output_norm",
    "model.normalize_inputs",
    "train.steps",
    "train.batch_size",
    "train.lr",
    "train.beta1",
    "train.beta2",
    "train.adam_eps",
    "train.weight_decay",
    "train.lambda_p",
    "train.eps_entropy",
    "infer.sigma",
    "infer.score_mode",
    "infer.map_source",
    "eval.fpr_limit",
];

const CATEGORY_KEYS: &[&str] = &[
    "train",
    "test_normal",
    "test_anomalous",
    "defect_mix",
    "defect_views",
    "size",
    "roughness",
    "albedo_variation",
    "pixel_pitch",
    "category_seed",
    "radius",
    "tilt_deg",
    "albedo_factor",
    "scratch_length",
    "scratch_width",
];

/// Raw key/value pairs, unique keys.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Config {
    values: BTreeMap<String, String>,
}

fn known_key(key: &str) -> bool {
    if KEYS.contains(&key) {
        return true;
    }
    match key.strip_prefix("category.").and_then(|r| r.rsplit_once('.')) {
        Some((name, field)) => !name.is_empty() && !name.contains('.') && CATEGORY_KEYS.contains(&field),
        None => false,
    }
}

impl Config {
    pub fn parse(text: &str) -> CliResult<Self> {
        let mut values = BTreeMap::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| invalid(format!("config line {}: expected `key = value`", i + 1)))?;
            let (k, v) = (k.trim(), v.trim());
            if !known_key(k) {
                return Err(invalid(format!("config line {}: unknown key `{k}`", i + 1)));
            }
            if values.insert(k.to_string(), v.to_string()).is_some() {
                return Err(invalid(format!("config line {}: duplicate key `{k}`", i + 1)));
            }
        }
        Ok(Self { values })
    }

    pub fn load(path: &Path) -> CliResult<Self> {
        let text = fs::read_to_string(path).map_err(|e| io_err(path, e))?;
        Self::parse(&text).map_err(|e| e.context(path.display()))
    }

    pub fn set(&mut self, key: &str, value: impl ToString) -> CliResult<()> {
        if !known_key(key) {
            return Err(invalid(format!("unknown key `{key}`")));
        }
        self.values.insert(key.to_string(), value.to_string());
        Ok(())
    }

    pub fn get_raw(&self, key: &str) -> Option<&str> {
        self.values.get(key).map(String::as_str)
    }

    /// Sorted `key=value` lines.
    pub fn canonical(&self) -> String {
        self.values.iter().map(|(k, v)| format!("{k}={v}\n")).collect()
    }

    /// SHA-256 of [`Config::canonical`], hex encoded.
    pub fn hash(&self) -> String {
        format!("{:x}", Sha256::digest(self.canonical().as_bytes()))
    }

    fn get<T: FromStr>(&self, key: &str, default: T) -> CliResult<T> {
        match self.values.get(key) {
            None => Ok(default),
            Some(v) => v
                .parse()
                .map_err(|_| invalid(format!("`{key}`: cannot parse `{v}`"))),
        }
    }

    fn get_bool(&self, key: &str, default: bool) -> CliResult<bool> {
        match self.values.get(key).map(String::as_str) {
            None => Ok(default),
            Some("true") => Ok(true),
            Some("false") => Ok(false),
            Some(v) => Err(invalid(format!("`{key}`: expected true or false, got `{v}`"))),
        }
    }

    fn get_list(&self, key: &str) -> Vec<String> {
        self.values
            .get(key)
            .map(|v| {
                v.split(',')
                    .map(str::trim)
                    .filter(|s| !s.is_empty())
                    .map(String::from)
                    .collect()
            })
            .unwrap_or_default()
    }

    fn get_range(&self, key: &str, default: (f64, f64)) -> CliResult<(f64, f64)> {
        let Some(v) = self.values.get(key) else {
            return Ok(default);
        };
        let bad = || invalid(format!("`{key}`: expected `lo:hi`, got `{v}`"));
        let (lo, hi) = v.split_once(':').ok_or_else(bad)?;
        let lo: f64 = lo.trim().parse().map_err(|_| bad())?;
        let hi: f64 = hi.trim().parse().map_err(|_| bad())?;
        if !(lo <= hi) {
            return Err(bad());
        }
        Ok((lo, hi))
    }
}

/// Everything a command needs, validated.
#[derive(Debug, Clone)]
pub struct RunConfig {
    pub raw: Config,
    pub seed: u64,
    pub data_root: Option<PathBuf>,
    /// Categories to train or evaluate; empty means every dataset category.
    pub categories: Vec<String>,
    pub synth_categories: Vec<CategorySpec>,
    pub write_stacks: bool,
    pub model: ModelConfig,
    pub normalize_inputs: bool,
    pub train: TrainConfig,
    pub infer: InferConfig,
    pub fpr_limit: f64,
}

fn parse_mix(key: &str, text: &str) -> CliResult<Vec<(DefectKind, f64)>> {
    let mut mix = Vec::new();
    for part in text.split(',').map(str::trim).filter(|s| !s.is_empty()) {
        let (k, w) = part
            .split_once(':')
            .ok_or_else(|| invalid(format!("`{key}`: expected `kind:weight`, got `{part}`")))?;
        let kind = DefectKind::parse(k.trim())?;
        let w: f64 = w
            .trim()
            .parse()
            .map_err(|_| invalid(format!("`{key}`: bad weight `{w}`")))?;
        if !(w >= 0.0) || kind == DefectKind::None {
            return Err(invalid(format!("`{key}`: invalid entry `{part}`")));
        }
        mix.push((kind, w));
    }
    let total: f64 = mix.iter().map(|(_, w)| w).sum();
    if !mix.is_empty() && (total - 1.0).abs() > 1e-9 {
        return Err(invalid(format!("`{key}`: defect mix weights sum to {total}, expected 1")));
    }
    Ok(mix)
}

fn category(cfg: &Config, name: &str) -> CliResult<CategorySpec> {
    let key = |f: &str| format!("category.{name}.{f}");
    let size: usize = cfg.get(&key("size"), 64)?;
    let surface = SurfaceSpec {
        height: size,
        width: size,
        base_roughness: cfg.get(&key("roughness"), SurfaceSpec::default().base_roughness)?,
        albedo_variation: cfg.get(&key("albedo_variation"), SurfaceSpec::default().albedo_variation)?,
        pixel_pitch: cfg.get(&key("pixel_pitch"), 1.0)?,
        category_seed: cfg.get(&key("category_seed"), id_hash(name))?,
        ..SurfaceSpec::default()
    };
    surface.validate()?;
    let d = DefectRanges::default();
    let ranges = DefectRanges {
        radius: cfg.get_range(&key("radius"), d.radius)?,
        tilt_deg: cfg.get_range(&key("tilt_deg"), d.tilt_deg)?,
        albedo_factor: cfg.get_range(&key("albedo_factor"), d.albedo_factor)?,
        scratch_length: cfg.get_range(&key("scratch_length"), d.scratch_length)?,
        scratch_width: cfg.get_range(&key("scratch_width"), d.scratch_width)?,
    };
    let mix_key = key("defect_mix");
    let defect_mix = parse_mix(&mix_key, cfg.get_raw(&mix_key).unwrap_or("dent:1"))?;
    let views_key = key("defect_views");
    let defect_views = match cfg.get_raw(&views_key) {
        None => (0..NUM_VIEWS).collect(),
        Some(v) => v
            .split(',')
            .map(|s| s.trim().parse::<usize>())
            .collect::<Result<Vec<_>, _>>()
            .map_err(|_| invalid(format!("`{views_key}`: expected view indices")))?,
    };
    if defect_views.is_empty() || defect_views.iter().any(|&v| v >= NUM_VIEWS) {
        return Err(invalid(format!("`{views_key}`: views must lie in 0..{NUM_VIEWS}")));
    }
    Ok(CategorySpec {
        name: name.to_string(),
        surface,
        train: cfg.get(&key("train"), 20)?,
        test_normal: cfg.get(&key("test_normal"), 10)?,
        test_anomalous: cfg.get(&key("test_anomalous"), 10)?,
        defect_mix,
        defect_views,
        ranges,
    })
}

impl RunConfig {
    /// Validates `cfg`. `--seed` should already be applied as `run.seed`.
    pub fn from_config(cfg: Config) -> CliResult<Self> {
        let seed: u64 = cfg.get("run.seed", 0)?;
        let synth_names = cfg.get_list("synth.categories");
        let synth_categories = synth_names
            .iter()
            .map(|n| category(&cfg, n))
            .collect::<CliResult<Vec<_>>>()?;
        for key in cfg.values.keys() {
            if let Some(rest) = key.strip_prefix("category.") {
                let name = rest.rsplit_once('.').map_or(rest, |(n, _)| n);
                if !synth_names.iter().any(|s| s == name) {
                    return Err(invalid(format!("`{key}` refers to category `{name}` not listed in synth.categories")));
                }
            }
        }
        let d = EncoderConfig::default();
        let encoder = EncoderConfig {
            patch: cfg.get("encoder.patch", d.patch)?,
            dim: cfg.get("encoder.dim", d.dim)?,
            levels: cfg.get("encoder.levels", d.levels)?,
            heads: cfg.get("encoder.heads", d.heads)?,
            ffn_mult: cfg.get("encoder.ffn_mult", d.ffn_mult)?,
            seed: cfg.get("encoder.seed", d.seed)?,
            output_norm: true,
        };
        encoder.validate()?;
        let dm = ModelConfig::default();
        let mode = match cfg.get_raw("model.mode") {
            Some(m) => ModalityMode::parse(m)?,
            None => dm.mode,
        };
        let mut model = ModelConfig {
            encoder,
            prototypes: cfg.get("model.prototypes", dm.prototypes)?,
            heads: cfg.get("model.heads", dm.heads)?,
            ffn_mult: cfg.get("model.ffn_mult", dm.ffn_mult)?,
            tied_branches: cfg.get_bool("model.tied_branches", dm.tied_branches)?,
            mode,
            residual: match cfg.get_raw("model.decoder_residual") {
                Some(r) => DecoderResidual::parse(r)?,
                None => dm.residual,
            },
            rgb_output_norm: cfg.get_bool("model.rgb_output_norm", dm.rgb_output_norm)?,
            nv_output_norm: cfg.get_bool("model.nv_output_norm", dm.nv_output_norm)?,
            init_seed: mix_seed(seed, 0x696e_6974),
        };
        let dt = TrainConfig::default();
        let da = AdamWConfig::default();
        let lambda_p = cfg.get("train.lambda_p", dt.lambda_p)?;
        let mut train = TrainConfig {
            lambda_p,
            eps_entropy: cfg.get("train.eps_entropy", dt.eps_entropy)?,
            optimizer: AdamWConfig {
                lr: cfg.get("train.lr", da.lr)?,
                beta1: cfg.get("train.beta1", da.beta1)?,
                beta2: cfg.get("train.beta2", da.beta2)?,
                eps: cfg.get("train.adam_eps", da.eps)?,
                weight_decay: cfg.get("train.weight_decay", da.weight_decay)?,
            },
            steps: cfg.get("train.steps", dt.steps)?,
            batch_size: cfg.get("train.batch_size", dt.batch_size)?,
            seed: mix_seed(seed, 0x7472_6169_6e),
        };
        if let Some(a) = cfg.get_raw("model.ablation") {
            Ablation::parse(a)?.apply(&mut model, &mut train, lambda_p);
        }
        train.validate()?;
        // Building a model validates the remaining shape constraints.
        mvnad::cprn::CprnModel::new(model.clone())?;
        let di = InferConfig::default();
        let infer = InferConfig {
            sigma: cfg.get("infer.sigma", di.sigma)?,
            score_mode: match cfg.get_raw("infer.score_mode") {
                Some(s) => ScoreMode::parse(s)?,
                None => di.score_mode,
            },
            map_source: match cfg.get_raw("infer.map_source") {
                Some(s) => MapSource::parse(s)?,
                None => di.map_source,
            },
        };
        if !(infer.sigma >= 0.0 && infer.sigma.is_finite()) {
            return Err(invalid("`infer.sigma` must be finite and nonnegative"));
        }
        let fpr_limit: f64 = cfg.get("eval.fpr_limit", DEFAULT_FPR_LIMIT)?;
        if !(fpr_limit > 0.0 && fpr_limit <= 1.0) {
            return Err(invalid("`eval.fpr_limit` must lie in (0, 1]"));
        }
        Ok(Self {
            seed,
            data_root: cfg.get_raw("data.root").map(PathBuf::from),
            categories: cfg.get_list("run.categories"),
            synth_categories,
            write_stacks: cfg.get_bool("synth.write_stacks", false)?,
            normalize_inputs: cfg.get_bool("model.normalize_inputs", true)?,
            model,
            train,
            infer,
            fpr_limit,
            raw: cfg,
        })
    }

    pub fn hash(&self) -> String {
        self.raw.hash()
    }

    /// `config_hash` and `seed` entries every artifact carries.
    pub fn provenance(&self) -> Vec<(String, String)> {
        vec![
            ("config_hash".to_string(), self.hash()),
            ("seed".to_string(), self.seed.to_string()),
        ]
    }

    /// Report label of the configured modality mode and entropy weight.
    pub fn ablation(&self) -> Ablation {
        match self.model.mode {
            ModalityMode::RgbOnly => Ablation::RgbOnly,
            ModalityMode::NvOnly => Ablation::NvOnly,
            ModalityMode::NaiveConcat => Ablation::NaiveConcat,
            ModalityMode::RgbNv if self.train.lambda_p == 0.0 => Ablation::UcpNoLp,
            ModalityMode::RgbNv => Ablation::Full,
        }
    }

    pub fn data_root(&self) -> CliResult<&Path> {
        let root = self
            .data_root
            .as_deref()
            .ok_or_else(|| invalid("`data.root` is required"))?;
        if !root.join("manifest.txt").is_file() {
            return Err(invalid(format!("dataset {} has no manifest.txt", root.display())));
        }
        Ok(root)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_comments_and_rejects_unknown_keys() {
        let c = Config::parse("# header\nrun.seed = 4 # inline\n\ntrain.steps=3\n").unwrap();
        assert_eq!(c.get_raw("run.seed"), Some("4"));
        assert!(Config::parse("train.stepz = 3").is_err());
        assert!(Config::parse("run.seed = 1\nrun.seed = 2").is_err());
        assert!(Config::parse("no equals sign").is_err());
    }

    #[test]
    fn hash_ignores_layout() {
        let a = Config::parse("run.seed=1\ntrain.steps=2").unwrap();
        let b = Config::parse("train.steps = 2\n\n# x\nrun.seed = 1").unwrap();
        assert_eq!(a.hash(), b.hash());
        let c = Config::parse("run.seed=2\ntrain.steps=2").unwrap();
        assert_ne!(a.hash(), c.hash());
    }

    #[test]
    fn defect_mix_must_sum_to_one() {
        let text = "synth.categories = a\ncategory.a.defect_mix = dent:0.7,stain:0.5\n";
        let err = RunConfig::from_config(Config::parse(text).unwrap()).unwrap_err();
        assert!(err.to_string().contains("sum to 1.2"), "{err}");
        let ok = "synth.categories = a\ncategory.a.defect_mix = dent:0.5,stain:0.5\n";
        let rc = RunConfig::from_config(Config::parse(ok).unwrap()).unwrap();
        assert_eq!(rc.synth_categories[0].defect_mix.len(), 2);
    }

    #[test]
    fn ablation_overrides_mode_and_weight() {
        let rc = RunConfig::from_config(Config::parse("model.ablation = ucp_no_lp\ntrain.lambda_p = 0.3").unwrap()).unwrap();
        assert_eq!(rc.model.mode, ModalityMode::RgbNv);
        assert_eq!(rc.train.lambda_p, 0.0);
        assert_eq!(rc.ablation(), Ablation::UcpNoLp);
        let full = RunConfig::from_config(Config::parse("model.ablation = full\ntrain.lambda_p = 0.3").unwrap()).unwrap();
        assert_eq!(full.train.lambda_p, 0.3);
    }

    #[test]
    fn orphan_category_keys_are_rejected() {
        assert!(RunConfig::from_config(Config::parse("category.b.train = 3").unwrap()).is_err());
    }
}
