//! Random micro-models and the transcription comparison shared by the CPRN
//! tests and the acceptance suite.
#![allow(dead_code)]

use mvnad::autodiff::Graph;
use mvnad::cprn::{
    assignment_distribution, cpga_forward, loss_entropy, loss_recon, ucp_forward, CprnModel, DecoderResidual,
    EncoderConfig, FeaturePyramid, ModalityMode, ModelConfig, ViewFeatures,
};
use mvnad::rng::Rng;
use mvnad::Tensor;

use super::reference::{self as r, Mat};

pub fn mat(t: &Tensor) -> Mat {
    let (n, d) = t.dims2().unwrap();
    (0..n).map(|i| t.row(i)[..d].to_vec()).collect()
}

fn param(model: &CprnModel, name: &str) -> Tensor {
    let id = model.params.find(name).unwrap_or_else(|| panic!("no parameter {name}"));
    model.params.get(id).value.clone()
}

pub fn attn(model: &CprnModel, prefix: &str) -> r::Attn {
    let m = |s: &str| mat(&param(model, &format!("{prefix}.{s}")));
    r::Attn {
        wq: m("w_q"),
        wk: m("w_k"),
        wv: m("w_v"),
        wo: m("w_o"),
    }
}

pub fn norm(model: &CprnModel, prefix: &str) -> r::Norm {
    r::Norm {
        gamma: param(model, &format!("{prefix}.gamma")).data().to_vec(),
        beta: param(model, &format!("{prefix}.beta")).data().to_vec(),
    }
}

pub fn ffn(model: &CprnModel, prefix: &str) -> r::Ffn {
    r::Ffn {
        w1: mat(&param(model, &format!("{prefix}.w1"))),
        b1: param(model, &format!("{prefix}.b1")).data().to_vec(),
        w2: mat(&param(model, &format!("{prefix}.w2"))),
        b2: param(model, &format!("{prefix}.b2")).data().to_vec(),
    }
}

pub fn gaussian(rng: &mut Rng, shape: &[usize], std: f64) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| std * rng.gaussian()).collect()).unwrap()
}

pub fn random_pyramid(rng: &mut Rng, n: usize, d: usize, levels: usize) -> FeaturePyramid {
    FeaturePyramid::new((0..levels).map(|_| gaussian(rng, &[n, d], 1.0)).collect()).unwrap()
}

/// Micro-model with every parameter (including norms and biases) redrawn.
pub fn random_model(rng: &mut Rng, mode: ModalityMode, residual: DecoderResidual, dim: usize, heads: usize, m: usize, levels: usize, tied: bool) -> CprnModel {
    let mut model = CprnModel::new(ModelConfig {
        encoder: EncoderConfig {
            patch: 4,
            dim,
            levels,
            heads,
            ffn_mult: 2,
            seed: rng.next_u64(),
            output_norm: true,
        },
        prototypes: m,
        heads,
        ffn_mult: 2,
        tied_branches: tied,
        mode,
        residual,
        init_seed: rng.next_u64(),
        ..ModelConfig::default()
    })
    .unwrap();
    for p in model.params.iter_mut() {
        let shape = p.value.shape().to_vec();
        let base = if p.name.ends_with(".gamma") { 1.0 } else { 0.0 };
        let std = if shape.len() == 2 { 1.0 / (shape[0] as f64).sqrt() } else { 0.3 };
        let n = p.value.len();
        p.value = Tensor::new(shape, (0..n).map(|_| base + std * rng.gaussian()).collect()).unwrap();
    }
    model
}

/// Maximum absolute deviation from the transcriptions over `instances`
/// random cases, as `[ucp, cpga, loss_recon, loss_entropy]`.
pub fn transcription_errors(instances: usize, seed: u64) -> [f64; 4] {
    let mut rng = Rng::new(seed, 0);
    let mut worst = [0.0f64; 4];
    for i in 0..instances {
        let heads = 1 + rng.below(2);
        let dim = heads * (2 + rng.below(4));
        let m = 1 + rng.below(5);
        let n = 1 + rng.below(9);
        let levels = 1 + rng.below(2);
        let residual = if i % 2 == 0 { DecoderResidual::Prototype } else { DecoderResidual::Query };
        let mode = [ModalityMode::RgbNv, ModalityMode::RgbOnly, ModalityMode::NvOnly][i % 3];
        let model = random_model(&mut rng, mode, residual, dim, heads, m, levels, i % 5 == 4);
        let bank = model.bank.unwrap();
        let frgb = gaussian(&mut rng, &[n, dim], 1.5);
        let fnv = gaussian(&mut rng, &[n, dim], 1.5);

        // prototype fusion
        let mut g = Graph::new();
        let vr = mode.uses_rgb().then(|| g.constant(frgb.clone()));
        let vn = mode.uses_nv().then(|| g.constant(fnv.clone()));
        let p = ucp_forward(&mut g, &model.params, &bank, vr, vn, heads).unwrap().p_ucmp;
        let prefix = |branch: &str| if model.config.tied_branches { "bank.attn".to_string() } else { format!("bank.attn_{branch}") };
        let ar = mode.uses_rgb().then(|| attn(&model, &prefix("rgb")));
        let an = mode.uses_nv().then(|| attn(&model, &prefix("nv")));
        let (mr, mn) = (mat(&frgb), mat(&fnv));
        let mut streams: Vec<(&Mat, &r::Attn)> = Vec::new();
        if let Some(a) = &ar {
            streams.push((&mr, a));
        }
        if let Some(a) = &an {
            streams.push((&mn, a));
        }
        let q = mat(&param(&model, "bank.q_learn"));
        let expect = r::ucp(&q, &streams, &norm(&model, "bank.norm"), &ffn(&model, "bank.ffn"), heads);
        let p_val = mat(g.value(p));
        worst[0] = worst[0].max(r::max_diff(&p_val, &expect));

        // decoder blocks on the library prototypes
        let targets: Vec<Tensor> = (0..levels).map(|_| gaussian(&mut rng, &[n, dim], 1.0)).collect();
        let mut recon_vars = Vec::new();
        let mut target_vars = Vec::new();
        let mut recon_ref = Vec::new();
        let mut first_weights = None;
        for (l, t) in targets.iter().enumerate() {
            let e = g.constant(t.clone());
            let out = cpga_forward(&mut g, &model.params, &model.decoder[l], e, p, heads, residual).unwrap();
            let pre = format!("decoder.{l}");
            let (o, w) = r::cpga(
                &mat(t),
                &p_val,
                &attn(&model, &format!("{pre}.attn")),
                &norm(&model, &format!("{pre}.norm")),
                &ffn(&model, &format!("{pre}.ffn")),
                heads,
                residual == DecoderResidual::Query,
            );
            worst[1] = worst[1].max(r::max_diff(&mat(g.value(out.out)), &o));
            worst[1] = worst[1].max(r::max_diff(&mat(g.value(out.weights)), &w));
            first_weights.get_or_insert((out.weights, w));
            recon_vars.push(out.out);
            target_vars.push(e);
            recon_ref.push(mat(g.value(out.out)));
        }

        // losses on the library's reconstructions
        let lr = loss_recon(&mut g, &target_vars, &recon_vars).unwrap();
        let t_ref: Vec<Mat> = targets.iter().map(mat).collect();
        worst[2] = worst[2].max((g.scalar(lr) - r::loss_recon(&t_ref, &recon_ref)).abs());
        let (wv, wref) = first_weights.unwrap();
        let qv = assignment_distribution(&mut g, wv).unwrap();
        let q_ref = r::assignment(&wref);
        let lp = loss_entropy(&mut g, qv, 1e-8).unwrap();
        worst[3] = worst[3].max((g.scalar(lp) - r::loss_entropy(&q_ref, 1e-8)).abs());
    }
    worst
}

/// Features matching `model`'s mode with `n` tokens.
pub fn random_view(rng: &mut Rng, model: &CprnModel, n: usize) -> ViewFeatures {
    let (d, l) = (model.config.encoder.dim, model.config.encoder.levels);
    let mode = model.config.mode;
    ViewFeatures {
        rgb: mode.uses_rgb().then(|| random_pyramid(rng, n, d, l)),
        nv: mode.uses_nv().then(|| random_pyramid(rng, n, d, l)),
    }
}
