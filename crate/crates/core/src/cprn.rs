//! Cross-modal prototype reconstruction network.
//!
//! Two frozen encoders turn an RGB image and a normal map into multi-level
//! token sequences. A bank of `M` learnable query tokens attends to the final
//! level of both streams and is fused into unified prototypes; a decoder of
//! `L` blocks then rebuilds each level of the target stream using its tokens
//! as queries and the prototypes as keys and values. Anomaly maps are the
//! per-patch cosine distance between features and their reconstruction.

use std::cell::Cell;
use std::fmt;
use std::fs;
use std::path::Path;

use sha2::{Digest, Sha256};

use crate::autodiff::{Graph, ParamId, ParamStore, Var};
use crate::error::{Error, Result};
use crate::mvnt::{self, Record};
use crate::nn::{
    self, AttentionParams, AttentionVars, AttentionWeights, FfnParams, FfnVars, FfnWeights, NormParams, NormVars,
};
use crate::optim::{AdamWConfig, OptimState};
use crate::rng::{mix_seed, Rng};
use crate::tensor::Tensor;

thread_local! {
    static UCP_EVALUATIONS: Cell<u64> = const { Cell::new(0) };
}

/// Number of prototype-fusion evaluations on this thread so far.
pub fn ucp_evaluations() -> u64 {
    UCP_EVALUATIONS.with(Cell::get)
}

#[derive(Debug, Clone, PartialEq)]
pub struct EncoderConfig {
    pub patch: usize,
    pub dim: usize,
    pub levels: usize,
    pub heads: usize,
    pub ffn_mult: usize,
    pub seed: u64,
    /// Record each level through a parameter-free LayerNorm, as a ViT's
    /// final norm does, instead of the raw residual stream. [`CprnModel`]
    /// overrides this per stream.
    pub output_norm: bool,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            patch: 8,
            dim: 32,
            levels: 2,
            heads: 2,
            ffn_mult: 2,
            seed: 0,
            output_norm: true,
        }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.patch == 0 || self.dim == 0 || self.levels == 0 || self.ffn_mult == 0 {
            return Err(Error::invalid("encoder patch, dim, levels and ffn_mult must be positive"));
        }
        if self.heads == 0 || self.dim % self.heads != 0 {
            return Err(Error::invalid(format!(
                "encoder dim {} not divisible by {} heads",
                self.dim, self.heads
            )));
        }
        Ok(())
    }
}

/// Per-level token features, each `N x D`.
#[derive(Debug, Clone, PartialEq)]
pub struct FeaturePyramid {
    levels: Vec<Tensor>,
}

impl FeaturePyramid {
    pub fn new(levels: Vec<Tensor>) -> Result<Self> {
        let first = levels
            .first()
            .ok_or_else(|| Error::invalid("feature pyramid needs at least one level"))?;
        let (n, d) = first.dims2()?;
        for (l, t) in levels.iter().enumerate() {
            if t.shape() != [n, d] {
                return Err(Error::shape("feature pyramid level", &[n, d], t.shape()));
            }
            if !t.is_finite() {
                return Err(Error::invalid(format!("feature level {} has non-finite entries", l + 1)));
            }
        }
        Ok(Self { levels })
    }

    pub fn levels(&self) -> &[Tensor] {
        &self.levels
    }

    pub fn final_level(&self) -> &Tensor {
        self.levels.last().expect("nonempty")
    }

    pub fn tokens(&self) -> usize {
        self.levels[0].shape()[0]
    }

    pub fn dim(&self) -> usize {
        self.levels[0].shape()[1]
    }

    /// Writes `level_<l>.mvnt` (l = 1..=L) into `dir`.
    pub fn export(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        for (l, t) in self.levels.iter().enumerate() {
            mvnt::write_file(&dir.join(format!("level_{}.mvnt", l + 1)), &Record::from_tensor(t))?;
        }
        Ok(())
    }

    /// Reads `level_1.mvnt`, `level_2.mvnt`, ... until the first gap.
    pub fn import(dir: &Path) -> Result<Self> {
        let mut levels = Vec::new();
        loop {
            let path = dir.join(format!("level_{}.mvnt", levels.len() + 1));
            if !path.exists() {
                break;
            }
            levels.push(mvnt::read_file(&path)?.to_tensor()?);
        }
        if levels.is_empty() {
            return Err(Error::invalid(format!("no level_<l>.mvnt files in {}", dir.display())));
        }
        Self::new(levels).map_err(|e| Error::Format {
            path: dir.to_path_buf(),
            msg: e.to_string(),
        })
    }
}

/// Splits a `3 x H x W` image into `N = (H/p)(W/p)` row-major patches of
/// `3p^2` values ordered channel, row, column.
pub fn patchify(image: &[f64], height: usize, width: usize, p: usize) -> Result<Tensor> {
    if p == 0 || height % p != 0 || width % p != 0 {
        return Err(Error::invalid(format!(
            "image {height}x{width} is not divisible into {p}x{p} patches"
        )));
    }
    if image.len() != 3 * height * width {
        return Err(Error::invalid(format!(
            "expected 3x{height}x{width} image, got {} values",
            image.len()
        )));
    }
    let (gh, gw) = (height / p, width / p);
    let mut out = Vec::with_capacity(3 * height * width);
    for pr in 0..gh {
        for pc in 0..gw {
            for c in 0..3 {
                for dy in 0..p {
                    let row = pr * p + dy;
                    let start = c * height * width + row * width + pc * p;
                    out.extend_from_slice(&image[start..start + p]);
                }
            }
        }
    }
    Tensor::new([gh * gw, 3 * p * p], out)
}

/// Fixed 1-D sinusoidal position codes, `n x d`.
pub fn sinusoidal_positions(n: usize, d: usize) -> Tensor {
    let mut out = vec![0.0; n * d];
    for pos in 0..n {
        for i in 0..d {
            let freq = 1.0 / 10000f64.powf((2 * (i / 2)) as f64 / d as f64);
            let angle = pos as f64 * freq;
            out[pos * d + i] = if i % 2 == 0 { angle.sin() } else { angle.cos() };
        }
    }
    Tensor::new([n, d], out).expect("shape matches")
}

#[derive(Debug, Clone)]
struct EncoderBlock {
    attn: AttentionWeights,
    ffn: FfnWeights,
}

/// Frozen seeded random-weight vision transformer.
#[derive(Debug, Clone)]
pub struct Encoder {
    config: EncoderConfig,
    embed: Tensor,
    blocks: Vec<EncoderBlock>,
}

impl Encoder {
    pub fn new(config: EncoderConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = Rng::new(config.seed, 0x656e63);
        let fan_in = 3 * config.patch * config.patch;
        let embed = nn::gaussian_tensor(&[fan_in, config.dim], 1.0 / (fan_in as f64).sqrt(), &mut rng);
        let blocks = (0..config.levels)
            .map(|_| EncoderBlock {
                attn: AttentionWeights::random(config.dim, &mut rng),
                ffn: FfnWeights::random(config.dim, config.ffn_mult, &mut rng),
            })
            .collect();
        Ok(Self { config, embed, blocks })
    }

    pub fn config(&self) -> &EncoderConfig {
        &self.config
    }

    /// Encodes a channels-first `3 x H x W` image, recording the tokens after
    /// every block.
    pub fn encode(&self, image: &[f64], height: usize, width: usize) -> Result<FeaturePyramid> {
        let d = self.config.dim;
        let patches = patchify(image, height, width, self.config.patch)?;
        let n = patches.shape()[0];
        let mut g = Graph::new();
        let x = g.constant(patches);
        let e = g.constant(self.embed.clone());
        let x = g.matmul(x, e)?;
        let pos = g.constant(sinusoidal_positions(n, d));
        let mut x = g.add(x, pos)?;
        let unit = NormVars::unit(&mut g, d);
        let mut levels = Vec::with_capacity(self.blocks.len());
        for block in &self.blocks {
            let w = AttentionVars::constants(&mut g, &block.attn);
            let h = nn::norm(&mut g, x, &unit)?;
            let a = nn::attention(&mut g, h, h, h, &w, self.config.heads)?;
            x = g.add(x, a.out)?;
            let f = FfnVars::constants(&mut g, &block.ffn);
            let h = nn::norm(&mut g, x, &unit)?;
            let h = nn::ffn(&mut g, h, &f)?;
            x = g.add(x, h)?;
            let recorded = if self.config.output_norm {
                nn::norm(&mut g, x, &unit)?
            } else {
                x
            };
            levels.push(g.value(recorded).clone());
        }
        FeaturePyramid::new(levels)
    }

    /// SHA-256 over all frozen weights.
    pub fn weight_digest(&self) -> String {
        let mut h = Sha256::new();
        let mut feed = |t: &Tensor| t.data().iter().for_each(|v| h.update(v.to_le_bytes()));
        feed(&self.embed);
        for b in &self.blocks {
            for t in [&b.attn.w_q, &b.attn.w_k, &b.attn.w_v, &b.attn.w_o] {
                feed(t);
            }
            for t in [&b.ffn.w1, &b.ffn.b1, &b.ffn.w2, &b.ffn.b2] {
                feed(t);
            }
        }
        format!("{:x}", h.finalize())
    }
}

/// Per-channel standardization applied before encoding.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct InputNorm {
    pub mean: [f64; 3],
    pub std: [f64; 3],
}

impl InputNorm {
    pub const IDENTITY: InputNorm = InputNorm {
        mean: [0.0; 3],
        std: [1.0; 3],
    };

    /// Channel statistics over channels-first images.
    pub fn fit<'a>(images: impl IntoIterator<Item = &'a [f64]>) -> Self {
        let mut sum = [0.0; 3];
        let mut sq = [0.0; 3];
        let mut count = 0usize;
        for img in images {
            let n = img.len() / 3;
            for c in 0..3 {
                for &v in &img[c * n..(c + 1) * n] {
                    sum[c] += v;
                    sq[c] += v * v;
                }
            }
            count += n;
        }
        if count == 0 {
            return Self::IDENTITY;
        }
        let mut out = Self::IDENTITY;
        for c in 0..3 {
            let mean = sum[c] / count as f64;
            let var = (sq[c] / count as f64 - mean * mean).max(0.0);
            out.mean[c] = mean;
            out.std[c] = var.sqrt().max(1e-6);
        }
        out
    }

    pub fn apply(&self, image: &[f64]) -> Vec<f64> {
        let n = image.len() / 3;
        image
            .iter()
            .enumerate()
            .map(|(i, &v)| {
                let c = i / n;
                (v - self.mean[c]) / self.std[c]
            })
            .collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ModalityMode {
    RgbNv,
    RgbOnly,
    NvOnly,
    NaiveConcat,
}

impl ModalityMode {
    pub fn name(self) -> &'static str {
        match self {
            ModalityMode::RgbNv => "rgb_nv",
            ModalityMode::RgbOnly => "rgb_only",
            ModalityMode::NvOnly => "nv_only",
            ModalityMode::NaiveConcat => "naive_concat",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        [
            ModalityMode::RgbNv,
            ModalityMode::RgbOnly,
            ModalityMode::NvOnly,
            ModalityMode::NaiveConcat,
        ]
        .into_iter()
        .find(|m| m.name() == s)
        .ok_or_else(|| Error::invalid(format!("unknown modality mode `{s}`")))
    }

    pub fn uses_rgb(self) -> bool {
        self != ModalityMode::NvOnly
    }

    pub fn uses_nv(self) -> bool {
        self != ModalityMode::RgbOnly
    }

    fn uses_bank(self) -> bool {
        self != ModalityMode::NaiveConcat
    }
}

/// Table-4 style configurations.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum Ablation {
    RgbOnly,
    NvOnly,
    NaiveConcat,
    UcpNoLp,
    Full,
}

impl Ablation {
    /// Fixed report order.
    pub const ORDER: [Ablation; 5] = [
        Ablation::RgbOnly,
        Ablation::NvOnly,
        Ablation::NaiveConcat,
        Ablation::UcpNoLp,
        Ablation::Full,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Ablation::RgbOnly => "rgb_only",
            Ablation::NvOnly => "nv_only",
            Ablation::NaiveConcat => "naive_concat",
            Ablation::UcpNoLp => "ucp_no_lp",
            Ablation::Full => "full",
        }
    }

    pub fn label(self) -> &'static str {
        match self {
            Ablation::RgbOnly => "RGB only",
            Ablation::NvOnly => "NV only",
            Ablation::NaiveConcat => "Concat",
            Ablation::UcpNoLp => "UCP",
            Ablation::Full => "UCP+L_p",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        Self::ORDER
            .into_iter()
            .find(|a| a.name() == s)
            .ok_or_else(|| Error::invalid(format!("unknown ablation mode `{s}`")))
    }

    /// Sets the modality mode and, for `ucp_no_lp`, zeroes the entropy weight.
    /// `full` restores `default_lambda_p`.
    pub fn apply(self, model: &mut ModelConfig, train: &mut TrainConfig, default_lambda_p: f64) {
        model.mode = match self {
            Ablation::RgbOnly => ModalityMode::RgbOnly,
            Ablation::NvOnly => ModalityMode::NvOnly,
            Ablation::NaiveConcat => ModalityMode::NaiveConcat,
            Ablation::UcpNoLp | Ablation::Full => ModalityMode::RgbNv,
        };
        train.lambda_p = match self {
            Ablation::UcpNoLp => 0.0,
            Ablation::Full => default_lambda_p,
            _ => train.lambda_p,
        };
    }
}

impl fmt::Display for Ablation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Where the decoder's residual path starts.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DecoderResidual {
    /// `F'' = E_l + F'`: the query tokens are added back before the FFN.
    Query,
    /// `F'' = F'`: the output is built from prototype attention alone.
    Prototype,
}

impl DecoderResidual {
    pub fn name(self) -> &'static str {
        match self {
            DecoderResidual::Query => "query",
            DecoderResidual::Prototype => "prototype",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "query" => Ok(DecoderResidual::Query),
            "prototype" => Ok(DecoderResidual::Prototype),
            other => Err(Error::invalid(format!("unknown decoder residual `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    pub encoder: EncoderConfig,
    pub prototypes: usize,
    pub heads: usize,
    pub ffn_mult: usize,
    /// Share one set of attention projections between the RGB and NV branches.
    pub tied_branches: bool,
    pub mode: ModalityMode,
    pub residual: DecoderResidual,
    /// Layer-normalize RGB features. Bounded token norms keep a few unusual
    /// tokens from dominating the prototype attention, so RGB maps stay local.
    pub rgb_output_norm: bool,
    /// Layer-normalize NV features. Raw features let strong geometric
    /// outliers pull the prototypes, which is the only route by which an
    /// RGB-invisible defect reaches the RGB reconstruction.
    pub nv_output_norm: bool,
    pub init_seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            encoder: EncoderConfig::default(),
            prototypes: 8,
            heads: 2,
            ffn_mult: 2,
            tied_branches: false,
            mode: ModalityMode::RgbNv,
            residual: DecoderResidual::Prototype,
            rgb_output_norm: true,
            nv_output_norm: false,
            init_seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub lambda_p: f64,
    pub eps_entropy: f64,
    pub optimizer: AdamWConfig,
    pub steps: usize,
    pub batch_size: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lambda_p: 0.1,
            eps_entropy: 1e-8,
            optimizer: AdamWConfig::default(),
            steps: 500,
            batch_size: 8,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda_p >= 0.0 && self.lambda_p.is_finite()) {
            return Err(Error::invalid("lambda_p must be finite and nonnegative"));
        }
        if !(self.eps_entropy > 0.0) {
            return Err(Error::invalid("eps_entropy must be positive"));
        }
        if self.batch_size == 0 {
            return Err(Error::invalid("batch_size must be positive"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ScoreMode {
    ReconLoss,
    MaxMap,
}

impl ScoreMode {
    pub fn name(self) -> &'static str {
        match self {
            ScoreMode::ReconLoss => "recon_loss",
            ScoreMode::MaxMap => "max_map",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "recon_loss" => Ok(ScoreMode::ReconLoss),
            "max_map" => Ok(ScoreMode::MaxMap),
            other => Err(Error::invalid(format!("unknown score mode `{other}`"))),
        }
    }
}

/// Which features the anomaly map compares.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MapSource {
    /// Final-level tokens against the final decoder block's output.
    FinalLevel,
    /// Level-averaged tokens against level-averaged reconstructions, the
    /// quantity the reconstruction loss constrains; the token mean of this
    /// map equals `L_r`.
    LevelMean,
}

impl MapSource {
    pub fn name(self) -> &'static str {
        match self {
            MapSource::FinalLevel => "final_level",
            MapSource::LevelMean => "level_mean",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "final_level" => Ok(MapSource::FinalLevel),
            "level_mean" => Ok(MapSource::LevelMean),
            other => Err(Error::invalid(format!("unknown map source `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct InferConfig {
    /// Gaussian smoothing sigma in pixels; 0 disables smoothing.
    pub sigma: f64,
    pub score_mode: ScoreMode,
    pub map_source: MapSource,
}

impl Default for InferConfig {
    fn default() -> Self {
        Self {
            sigma: 4.0,
            score_mode: ScoreMode::ReconLoss,
            map_source: MapSource::LevelMean,
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct BankParams {
    pub q_learn: ParamId,
    pub attn_rgb: Option<AttentionParams>,
    pub attn_nv: Option<AttentionParams>,
    pub norm: NormParams,
    pub ffn: FfnParams,
}

#[derive(Debug, Clone, Copy)]
pub struct CpgaParams {
    pub attn: AttentionParams,
    pub norm: NormParams,
    pub ffn: FfnParams,
}

#[derive(Debug, Clone)]
pub struct CprnModel {
    pub config: ModelConfig,
    pub enc_rgb: Encoder,
    pub enc_nv: Encoder,
    pub norm_rgb: InputNorm,
    pub norm_nv: InputNorm,
    pub params: ParamStore,
    pub bank: Option<BankParams>,
    pub decoder: Vec<CpgaParams>,
    pub steps_trained: u64,
}

/// Final-level features of whichever streams a mode needs.
#[derive(Debug, Clone, PartialEq)]
pub struct ViewFeatures {
    pub rgb: Option<FeaturePyramid>,
    pub nv: Option<FeaturePyramid>,
}

pub struct UcpOutput {
    pub p_ucmp: Var,
    pub p_rgb: Option<Var>,
    pub p_nv: Option<Var>,
}

pub struct CpgaOutput {
    pub out: Var,
    /// Head-averaged `N x M` attention from tokens to prototypes.
    pub weights: Var,
}

pub struct ForwardVars {
    pub targets: Vec<Var>,
    pub recon: Vec<Var>,
    pub q: Option<Var>,
    pub l_r: Var,
    pub l_p: Option<Var>,
    pub l_total: Var,
}

/// Eqs. of the prototype bank: each present branch attends from `Q_learn`
/// to its stream, the branch outputs are averaged, added to `Q_learn`, and
/// refined by `FFN(LayerNorm(.))`.
pub fn ucp_forward(
    g: &mut Graph,
    store: &ParamStore,
    bank: &BankParams,
    f_rgb: Option<Var>,
    f_nv: Option<Var>,
    heads: usize,
) -> Result<UcpOutput> {
    UCP_EVALUATIONS.with(|c| c.set(c.get() + 1));
    let q = g.param(store, bank.q_learn);
    let mut branch = |f: Option<Var>, w: Option<AttentionParams>| -> Result<Option<Var>> {
        match (f, w) {
            (Some(f), Some(w)) => {
                let w = w.bind(g, store);
                Ok(Some(nn::attention(g, q, f, f, &w, heads)?.out))
            }
            (None, _) => Ok(None),
            (Some(_), None) => Err(Error::invalid("prototype bank lacks weights for a supplied stream")),
        }
    };
    let p_rgb = branch(f_rgb, bank.attn_rgb)?;
    let p_nv = branch(f_nv, bank.attn_nv)?;
    let fused = match (p_rgb, p_nv) {
        (Some(a), Some(b)) => {
            let s = g.add(a, b)?;
            g.scale(s, 0.5)
        }
        (Some(a), None) | (None, Some(a)) => a,
        (None, None) => return Err(Error::invalid("prototype fusion needs at least one stream")),
    };
    let x = g.add(q, fused)?;
    let n = bank.norm.bind(g, store);
    let x = nn::norm(g, x, &n)?;
    let f = bank.ffn.bind(g, store);
    let p_ucmp = nn::ffn(g, x, &f)?;
    Ok(UcpOutput { p_ucmp, p_rgb, p_nv })
}

/// One decoder block: `F' = Attn(E_l, P, P)`, `F'' = E_l + F'` or `F'`
/// depending on `residual`, output `F'' + FFN(LayerNorm(F''))`.
pub fn cpga_forward(
    g: &mut Graph,
    store: &ParamStore,
    block: &CpgaParams,
    e_l: Var,
    prototypes: Var,
    heads: usize,
    residual: DecoderResidual,
) -> Result<CpgaOutput> {
    let w = block.attn.bind(g, store);
    let a = nn::attention(g, e_l, prototypes, prototypes, &w, heads)?;
    let weights = nn::mean_head_weights(g, &a.weights)?;
    let pre = match residual {
        DecoderResidual::Query => g.add(e_l, a.out)?,
        DecoderResidual::Prototype => a.out,
    };
    let n = block.norm.bind(g, store);
    let h = nn::norm(g, pre, &n)?;
    let f = block.ffn.bind(g, store);
    let h = nn::ffn(g, h, &f)?;
    let out = g.add(pre, h)?;
    Ok(CpgaOutput { out, weights })
}

/// Token-averaged prototype attention, `1 x M`.
pub fn assignment_distribution(g: &mut Graph, weights: Var) -> Result<Var> {
    g.mean_rows(weights)
}

fn level_mean(g: &mut Graph, levels: &[Var]) -> Result<Var> {
    let mut acc = levels[0];
    for &l in &levels[1..] {
        acc = g.add(acc, l)?;
    }
    Ok(g.scale(acc, 1.0 / levels.len() as f64))
}

/// `1 - mean_token cos(mean_l E_l, mean_l F~_l)`.
pub fn loss_recon(g: &mut Graph, targets: &[Var], recon: &[Var]) -> Result<Var> {
    if targets.is_empty() || targets.len() != recon.len() {
        return Err(Error::invalid(format!(
            "reconstruction loss needs matching level counts ({} vs {})",
            targets.len(),
            recon.len()
        )));
    }
    let t = level_mean(g, targets)?;
    let r = level_mean(g, recon)?;
    let cos = g.cosine_rows(t, r)?;
    let m = g.mean(cos);
    let neg = g.scale(m, -1.0);
    Ok(g.add_scalar(neg, 1.0))
}

/// `sum_j q_j log(q_j + eps)`.
pub fn loss_entropy(g: &mut Graph, q: Var, eps: f64) -> Result<Var> {
    if !(eps > 0.0) {
        return Err(Error::invalid("entropy epsilon must be positive"));
    }
    if g.value(q).data().iter().any(|&v| !(-1e-9..=1.0 + 1e-9).contains(&v)) {
        return Err(Error::invalid("assignment distribution entries must lie in [0, 1]"));
    }
    let shifted = g.add_scalar(q, eps);
    let logs = g.log(shifted)?;
    let prod = g.mul(q, logs)?;
    Ok(g.sum(prod))
}

impl CprnModel {
    pub fn new(config: ModelConfig) -> Result<Self> {
        config.encoder.validate()?;
        let d = config.encoder.dim;
        if config.prototypes == 0 {
            return Err(Error::invalid("prototype count must be positive"));
        }
        if config.heads == 0 || d % config.heads != 0 {
            return Err(Error::invalid(format!("model dim {d} not divisible by {} heads", config.heads)));
        }
        if config.ffn_mult == 0 {
            return Err(Error::invalid("ffn_mult must be positive"));
        }
        let enc_rgb = Encoder::new(EncoderConfig {
            output_norm: config.rgb_output_norm,
            ..config.encoder.clone()
        })?;
        let enc_nv = Encoder::new(EncoderConfig {
            seed: mix_seed(config.encoder.seed, 1),
            output_norm: config.nv_output_norm,
            ..config.encoder.clone()
        })?;
        let mut rng = Rng::new(config.init_seed, 0x70726f);
        let mut params = ParamStore::new();
        let bank = if config.mode.uses_bank() {
            let q_learn = params.add("bank.q_learn", nn::gaussian_tensor(&[config.prototypes, d], 1.0, &mut rng));
            let (attn_rgb, attn_nv) = if config.tied_branches {
                let shared = AttentionParams::register(&mut params, "bank.attn", AttentionWeights::random(d, &mut rng));
                (
                    config.mode.uses_rgb().then_some(shared),
                    config.mode.uses_nv().then_some(shared),
                )
            } else {
                let rgb = config
                    .mode
                    .uses_rgb()
                    .then(|| AttentionParams::register(&mut params, "bank.attn_rgb", AttentionWeights::random(d, &mut rng)));
                let nv = config
                    .mode
                    .uses_nv()
                    .then(|| AttentionParams::register(&mut params, "bank.attn_nv", AttentionWeights::random(d, &mut rng)));
                (rgb, nv)
            };
            let norm = NormParams::register(&mut params, "bank.norm", d);
            let ffn = FfnParams::register(&mut params, "bank.ffn", FfnWeights::random(d, config.ffn_mult, &mut rng));
            Some(BankParams {
                q_learn,
                attn_rgb,
                attn_nv,
                norm,
                ffn,
            })
        } else {
            None
        };
        let decoder = (0..config.encoder.levels)
            .map(|l| {
                let prefix = format!("decoder.{l}");
                CpgaParams {
                    attn: AttentionParams::register(
                        &mut params,
                        &format!("{prefix}.attn"),
                        AttentionWeights::random(d, &mut rng),
                    ),
                    norm: NormParams::register(&mut params, &format!("{prefix}.norm"), d),
                    ffn: FfnParams::register(
                        &mut params,
                        &format!("{prefix}.ffn"),
                        FfnWeights::random(d, config.ffn_mult, &mut rng),
                    ),
                }
            })
            .collect();
        Ok(Self {
            config,
            enc_rgb,
            enc_nv,
            norm_rgb: InputNorm::IDENTITY,
            norm_nv: InputNorm::IDENTITY,
            params,
            bank,
            decoder,
            steps_trained: 0,
        })
    }

    /// Encodes the streams the mode needs from channels-first images.
    pub fn encode_view(
        &self,
        rgb: Option<&[f64]>,
        nv: Option<&[f64]>,
        height: usize,
        width: usize,
    ) -> Result<ViewFeatures> {
        let mode = self.config.mode;
        let rgb = match (mode.uses_rgb(), rgb) {
            (true, Some(img)) => Some(self.enc_rgb.encode(&self.norm_rgb.apply(img), height, width)?),
            (true, None) => return Err(Error::invalid(format!("mode {} needs an RGB image", mode.name()))),
            (false, _) => None,
        };
        let nv = match (mode.uses_nv(), nv) {
            (true, Some(img)) => Some(self.enc_nv.encode(&self.norm_nv.apply(img), height, width)?),
            (true, None) => return Err(Error::invalid(format!("mode {} needs a normal map", mode.name()))),
            (false, _) => None,
        };
        Ok(ViewFeatures { rgb, nv })
    }

    fn check_features(&self, feats: &ViewFeatures) -> Result<()> {
        let mode = self.config.mode;
        let levels = self.decoder.len();
        let d = self.config.encoder.dim;
        for (used, p, name) in [(mode.uses_rgb(), &feats.rgb, "RGB"), (mode.uses_nv(), &feats.nv, "NV")] {
            match (used, p) {
                (true, None) => return Err(Error::invalid(format!("mode {} needs {name} features", mode.name()))),
                (true, Some(p)) if p.levels().len() != levels || p.dim() != d => {
                    return Err(Error::invalid(format!(
                        "{name} features have {} levels of width {}, model expects {levels} of width {d}",
                        p.levels().len(),
                        p.dim()
                    )))
                }
                _ => {}
            }
        }
        if let (Some(a), Some(b)) = (&feats.rgb, &feats.nv) {
            if a.tokens() != b.tokens() {
                return Err(Error::invalid("RGB and NV features have different token counts"));
            }
        }
        Ok(())
    }

    /// Builds the forward pass and losses for one view on `g`.
    pub fn forward(&self, g: &mut Graph, feats: &ViewFeatures, lambda_p: f64, eps: f64) -> Result<ForwardVars> {
        self.check_features(feats)?;
        let mode = self.config.mode;
        let heads = self.config.heads;
        let consts = |g: &mut Graph, p: &Option<FeaturePyramid>| -> Option<Vec<Var>> {
            p.as_ref()
                .map(|p| p.levels().iter().map(|t| g.constant(t.clone())).collect())
        };
        let rgb = consts(g, &feats.rgb);
        let nv = consts(g, &feats.nv);
        let last = |v: &Option<Vec<Var>>| v.as_ref().map(|l| *l.last().expect("nonempty"));
        let kv = match &self.bank {
            Some(bank) => ucp_forward(g, &self.params, bank, last(&rgb), last(&nv), heads)?.p_ucmp,
            None => {
                let (a, b) = (last(&rgb).expect("rgb present"), last(&nv).expect("nv present"));
                g.concat_rows(&[a, b])?
            }
        };
        let targets = if mode == ModalityMode::NvOnly { nv } else { rgb }.expect("target stream present");
        let mut recon = Vec::with_capacity(targets.len());
        let mut first_weights = None;
        for (block, &e) in self.decoder.iter().zip(&targets) {
            let out = cpga_forward(g, &self.params, block, e, kv, heads, self.config.residual)?;
            first_weights.get_or_insert(out.weights);
            recon.push(out.out);
        }
        let l_r = loss_recon(g, &targets, &recon)?;
        let (q, l_p, l_total) = if self.bank.is_some() {
            let q = assignment_distribution(g, first_weights.expect("at least one level"))?;
            let l_p = loss_entropy(g, q, eps)?;
            let weighted = g.scale(l_p, lambda_p);
            let total = g.add(l_r, weighted)?;
            (Some(q), Some(l_p), total)
        } else {
            (None, None, l_r)
        };
        Ok(ForwardVars {
            targets,
            recon,
            q,
            l_r,
            l_p,
            l_total,
        })
    }

    pub fn target_is_nv(&self) -> bool {
        self.config.mode == ModalityMode::NvOnly
    }

    /// Anomaly map and image score for one view.
    pub fn infer(&self, feats: &ViewFeatures, height: usize, width: usize, cfg: &InferConfig) -> Result<AnomalyResult> {
        if self.steps_trained == 0 {
            return Err(Error::Untrained);
        }
        self.infer_unchecked(feats, height, width, cfg)
    }

    /// [`CprnModel::infer`] without the trained-model guard.
    pub fn infer_unchecked(
        &self,
        feats: &ViewFeatures,
        height: usize,
        width: usize,
        cfg: &InferConfig,
    ) -> Result<AnomalyResult> {
        let mut g = Graph::new();
        let fw = self.forward(&mut g, feats, 0.0, 1e-8)?;
        let p = self.config.encoder.patch;
        if height % p != 0 || width % p != 0 {
            return Err(Error::invalid(format!("image {height}x{width} not divisible by patch {p}")));
        }
        let (gh, gw) = (height / p, width / p);
        let (target, recon) = match cfg.map_source {
            MapSource::FinalLevel => (*fw.targets.last().expect("levels"), *fw.recon.last().expect("levels")),
            MapSource::LevelMean => (level_mean(&mut g, &fw.targets)?, level_mean(&mut g, &fw.recon)?),
        };
        let (target, recon) = (g.value(target), g.value(recon));
        if target.shape()[0] != gh * gw {
            return Err(Error::invalid(format!(
                "features have {} tokens but a {height}x{width} image has {}",
                target.shape()[0],
                gh * gw
            )));
        }
        let patch_map = patch_distance_map(target, recon)?;
        let up = upsample_bilinear(&patch_map, gh, gw, height, width);
        let map = gaussian_smooth(&up, height, width, cfg.sigma);
        let score = match cfg.score_mode {
            ScoreMode::ReconLoss => g.scalar(fw.l_r),
            ScoreMode::MaxMap => map.iter().copied().fold(f64::NEG_INFINITY, f64::max),
        };
        if !score.is_finite() {
            return Err(Error::NonFinite { op: "infer" });
        }
        Ok(AnomalyResult {
            score,
            height,
            width,
            map,
            patch_map,
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AnomalyResult {
    pub score: f64,
    pub height: usize,
    pub width: usize,
    /// Smoothed `H x W` map.
    pub map: Vec<f64>,
    /// Unsmoothed per-token distances in `[0, 2]`.
    pub patch_map: Vec<f64>,
}

/// `1 - cos(target[t], recon[t])` per token.
pub fn patch_distance_map(target: &Tensor, recon: &Tensor) -> Result<Vec<f64>> {
    if target.shape() != recon.shape() {
        return Err(Error::shape("patch_distance_map", target.shape(), recon.shape()));
    }
    let n = target.dims2()?.0;
    (0..n)
        .map(|i| Ok(1.0 - crate::tensor::cosine_sim(target.row(i), recon.row(i))?))
        .collect()
}

/// Bilinear resize with pixel-center alignment and clamped borders.
pub fn upsample_bilinear(grid: &[f64], gh: usize, gw: usize, height: usize, width: usize) -> Vec<f64> {
    let coord = |dst: usize, src_len: usize, dst_len: usize| -> (usize, usize, f64) {
        let s = ((dst as f64 + 0.5) * src_len as f64 / dst_len as f64 - 0.5).clamp(0.0, (src_len - 1) as f64);
        let i0 = s.floor() as usize;
        let i1 = (i0 + 1).min(src_len - 1);
        (i0, i1, s - i0 as f64)
    };
    let mut out = Vec::with_capacity(height * width);
    for y in 0..height {
        let (y0, y1, fy) = coord(y, gh, height);
        for x in 0..width {
            let (x0, x1, fx) = coord(x, gw, width);
            let top = grid[y0 * gw + x0] * (1.0 - fx) + grid[y0 * gw + x1] * fx;
            let bottom = grid[y1 * gw + x0] * (1.0 - fx) + grid[y1 * gw + x1] * fx;
            out.push(top * (1.0 - fy) + bottom * fy);
        }
    }
    out
}

/// Separable Gaussian blur truncated at 4 sigma; weights are renormalized
/// over the in-bounds part of the kernel.
pub fn gaussian_smooth(img: &[f64], height: usize, width: usize, sigma: f64) -> Vec<f64> {
    if sigma <= 0.0 {
        return img.to_vec();
    }
    let radius = (4.0 * sigma).ceil() as isize;
    let kernel: Vec<f64> = (-radius..=radius)
        .map(|i| (-(i * i) as f64 / (2.0 * sigma * sigma)).exp())
        .collect();
    let pass = |src: &[f64], horizontal: bool| -> Vec<f64> {
        let mut out = vec![0.0; src.len()];
        for y in 0..height {
            for x in 0..width {
                let (mut acc, mut wsum) = (0.0, 0.0);
                for (k, &w) in kernel.iter().enumerate() {
                    let off = k as isize - radius;
                    let (yy, xx) = if horizontal {
                        (y as isize, x as isize + off)
                    } else {
                        (y as isize + off, x as isize)
                    };
                    if yy < 0 || xx < 0 || yy >= height as isize || xx >= width as isize {
                        continue;
                    }
                    acc += w * src[yy as usize * width + xx as usize];
                    wsum += w;
                }
                out[y * width + x] = acc / wsum;
            }
        }
        out
    };
    let h = pass(img, true);
    pass(&h, false)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepLog {
    pub step: usize,
    pub l_total: f64,
    pub l_r: f64,
    pub l_p: f64,
}

/// One optimizer step on the mean loss of `batch`.
pub fn train_step(
    model: &mut CprnModel,
    batch: &[&ViewFeatures],
    cfg: &TrainConfig,
    optim: &mut OptimState,
) -> Result<StepLog> {
    if batch.is_empty() {
        return Err(Error::invalid("empty training batch"));
    }
    let mut g = Graph::new();
    let mut totals = Vec::with_capacity(batch.len());
    let (mut l_r, mut l_p) = (0.0, 0.0);
    for feats in batch {
        let fw = model.forward(&mut g, feats, cfg.lambda_p, cfg.eps_entropy)?;
        l_r += g.scalar(fw.l_r);
        l_p += fw.l_p.map_or(0.0, |v| g.scalar(v));
        totals.push(fw.l_total);
    }
    let mut acc = totals[0];
    for &t in &totals[1..] {
        acc = g.add(acc, t)?;
    }
    let loss = g.scale(acc, 1.0 / totals.len() as f64);
    model.params.zero_grads();
    g.backward_into(loss, &mut model.params)?;
    optim.step(&mut model.params)?;
    model.steps_trained += 1;
    let b = batch.len() as f64;
    Ok(StepLog {
        step: optim.step as usize,
        l_total: g.scalar(loss),
        l_r: l_r / b,
        l_p: l_p / b,
    })
}

/// Runs `cfg.steps` steps over `data`, visiting samples in seeded shuffled
/// epochs. `on_step` sees every log entry as it is produced.
pub fn train(
    model: &mut CprnModel,
    data: &[ViewFeatures],
    cfg: &TrainConfig,
    mut on_step: impl FnMut(&StepLog),
) -> Result<Vec<StepLog>> {
    cfg.validate()?;
    if data.is_empty() && cfg.steps > 0 {
        return Err(Error::invalid("no training data"));
    }
    let mut optim = OptimState::new(&model.params, cfg.optimizer);
    let mut rng = Rng::new(cfg.seed, 0x747261);
    let mut order: Vec<usize> = Vec::new();
    let mut cursor = 0;
    let mut logs = Vec::with_capacity(cfg.steps);
    for _ in 0..cfg.steps {
        let mut batch = Vec::with_capacity(cfg.batch_size);
        while batch.len() < cfg.batch_size {
            if cursor == order.len() {
                order = (0..data.len()).collect();
                for i in (1..order.len()).rev() {
                    order.swap(i, rng.below(i + 1));
                }
                cursor = 0;
            }
            batch.push(&data[order[cursor]]);
            cursor += 1;
        }
        let log = train_step(model, &batch, cfg, &mut optim)?;
        on_step(&log);
        logs.push(log);
    }
    Ok(logs)
}

const CHECKPOINT_FORMAT: &str = "mvnad-checkpoint";

fn norm_tensor(n: &InputNorm) -> Tensor {
    Tensor::new([2, 3], n.mean.iter().chain(&n.std).copied().collect()).expect("2x3")
}

fn norm_from(t: &Tensor) -> Result<InputNorm> {
    if t.shape() != [2, 3] {
        return Err(Error::invalid("input normalization must be 2x3"));
    }
    let d = t.data();
    Ok(InputNorm {
        mean: [d[0], d[1], d[2]],
        std: [d[3], d[4], d[5]],
    })
}

impl CprnModel {
    fn config_lines(&self) -> Vec<(String, String)> {
        let c = &self.config;
        let e = &c.encoder;
        vec![
            ("format".into(), CHECKPOINT_FORMAT.into()),
            ("encoder.patch".into(), e.patch.to_string()),
            ("encoder.dim".into(), e.dim.to_string()),
            ("encoder.levels".into(), e.levels.to_string()),
            ("encoder.heads".into(), e.heads.to_string()),
            ("encoder.ffn_mult".into(), e.ffn_mult.to_string()),
            ("encoder.seed".into(), e.seed.to_string()),
            ("model.prototypes".into(), c.prototypes.to_string()),
            ("model.heads".into(), c.heads.to_string()),
            ("model.ffn_mult".into(), c.ffn_mult.to_string()),
            ("model.tied_branches".into(), c.tied_branches.to_string()),
            ("model.mode".into(), c.mode.name().into()),
            ("model.decoder_residual".into(), c.residual.name().into()),
            ("model.rgb_output_norm".into(), c.rgb_output_norm.to_string()),
            ("model.nv_output_norm".into(), c.nv_output_norm.to_string()),
            ("model.init_seed".into(), c.init_seed.to_string()),
            ("steps_trained".into(), self.steps_trained.to_string()),
        ]
    }

    /// Serializes the model as one MVNT stream: a `u8` record holding the
    /// text manifest, then every tensor listed in it, in order.
    pub fn to_checkpoint(&self, header: &[(String, String)]) -> Vec<u8> {
        let mut tensors: Vec<(String, Tensor)> = vec![
            ("input_norm.rgb".into(), norm_tensor(&self.norm_rgb)),
            ("input_norm.nv".into(), norm_tensor(&self.norm_nv)),
        ];
        for (_, p) in self.params.iter() {
            tensors.push((p.name.clone(), p.value.clone()));
        }
        let mut manifest = String::new();
        for (k, v) in self.config_lines().iter().chain(header) {
            manifest.push_str(&format!("{k}={v}\n"));
        }
        for (name, t) in &tensors {
            let dims: Vec<String> = t.shape().iter().map(|d| d.to_string()).collect();
            manifest.push_str(&format!("tensor={name}:{}\n", dims.join("x")));
        }
        let mut out = Record::u8([manifest.len()], manifest.into_bytes()).to_bytes();
        for (_, t) in &tensors {
            out.extend(Record::from_tensor(t).to_bytes());
        }
        out
    }

    /// Inverse of [`CprnModel::to_checkpoint`]; also returns the manifest
    /// header entries that are not model configuration.
    pub fn from_checkpoint(bytes: &[u8]) -> Result<(Self, Vec<(String, String)>)> {
        let mut rest = bytes;
        let (_, text) = mvnt::read_record(&mut rest)?.into_u8()?;
        let text = String::from_utf8(text).map_err(|_| Error::invalid("checkpoint manifest is not UTF-8"))?;
        let mut kv = std::collections::BTreeMap::new();
        let mut extra = Vec::new();
        let mut names = Vec::new();
        let own: Vec<String> = CprnModel::new(ModelConfig::default())
            .expect("default config is valid")
            .config_lines()
            .into_iter()
            .map(|(k, _)| k)
            .collect();
        for line in text.lines() {
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::invalid(format!("bad checkpoint manifest line `{line}`")))?;
            if k == "tensor" {
                let (name, _) = v.split_once(':').ok_or_else(|| Error::invalid(format!("bad tensor entry `{v}`")))?;
                names.push(name.to_string());
            } else if own.iter().any(|o| o == k) {
                kv.insert(k.to_string(), v.to_string());
            } else {
                extra.push((k.to_string(), v.to_string()));
            }
        }
        let get = |k: &str| -> Result<&String> {
            kv.get(k)
                .ok_or_else(|| Error::invalid(format!("checkpoint lacks `{k}`")))
        };
        let num = |k: &str| -> Result<u64> {
            get(k)?
                .parse()
                .map_err(|_| Error::invalid(format!("checkpoint `{k}` is not an integer")))
        };
        if get("format")? != CHECKPOINT_FORMAT {
            return Err(Error::invalid("not a model checkpoint"));
        }
        let config = ModelConfig {
            encoder: EncoderConfig {
                patch: num("encoder.patch")? as usize,
                dim: num("encoder.dim")? as usize,
                levels: num("encoder.levels")? as usize,
                heads: num("encoder.heads")? as usize,
                ffn_mult: num("encoder.ffn_mult")? as usize,
                seed: num("encoder.seed")?,
                output_norm: true,
            },
            prototypes: num("model.prototypes")? as usize,
            heads: num("model.heads")? as usize,
            ffn_mult: num("model.ffn_mult")? as usize,
            tied_branches: get("model.tied_branches")? == "true",
            mode: ModalityMode::parse(get("model.mode")?)?,
            residual: DecoderResidual::parse(get("model.decoder_residual")?)?,
            rgb_output_norm: get("model.rgb_output_norm")? == "true",
            nv_output_norm: get("model.nv_output_norm")? == "true",
            init_seed: num("model.init_seed")?,
        };
        let mut model = CprnModel::new(config)?;
        model.steps_trained = num("steps_trained")?;
        for name in names {
            let t = mvnt::read_record(&mut rest)?.to_tensor()?;
            match name.as_str() {
                "input_norm.rgb" => model.norm_rgb = norm_from(&t)?,
                "input_norm.nv" => model.norm_nv = norm_from(&t)?,
                _ => {
                    let id = model
                        .params
                        .find(&name)
                        .ok_or_else(|| Error::invalid(format!("checkpoint tensor `{name}` is not a model parameter")))?;
                    let p = model.params.get_mut(id);
                    if p.value.shape() != t.shape() {
                        return Err(Error::shape("checkpoint tensor", p.value.shape(), t.shape()));
                    }
                    p.value = t;
                }
            }
        }
        if !rest.is_empty() {
            return Err(Error::invalid("trailing bytes after checkpoint tensors"));
        }
        Ok((model, extra))
    }
}
