//! Straight-line transcriptions of the CPRN equations on nested `Vec`s.
//! Nothing here calls into the library's tensor or autodiff code.
#![allow(dead_code)]

pub type Mat = Vec<Vec<f64>>;

pub struct Attn {
    pub wq: Mat,
    pub wk: Mat,
    pub wv: Mat,
    pub wo: Mat,
}

pub struct Ffn {
    pub w1: Mat,
    pub b1: Vec<f64>,
    pub w2: Mat,
    pub b2: Vec<f64>,
}

pub struct Norm {
    pub gamma: Vec<f64>,
    pub beta: Vec<f64>,
}

pub fn matmul(a: &Mat, b: &Mat) -> Mat {
    let inner = b.len();
    let cols = b[0].len();
    a.iter()
        .map(|row| {
            (0..cols)
                .map(|j| {
                    let mut s = 0.0;
                    for k in 0..inner {
                        s += row[k] * b[k][j];
                    }
                    s
                })
                .collect()
        })
        .collect()
}

pub fn add(a: &Mat, b: &Mat) -> Mat {
    a.iter()
        .zip(b)
        .map(|(r, s)| r.iter().zip(s).map(|(x, y)| x + y).collect())
        .collect()
}

pub fn scale(a: &Mat, c: f64) -> Mat {
    a.iter().map(|r| r.iter().map(|x| x * c).collect()).collect()
}

fn cols(a: &Mat, start: usize, len: usize) -> Mat {
    a.iter().map(|r| r[start..start + len].to_vec()).collect()
}

/// Returns the attention output and each head's `n_q x n_k` weights.
pub fn attention(q: &Mat, k: &Mat, v: &Mat, w: &Attn, heads: usize) -> (Mat, Vec<Mat>) {
    let d = q[0].len();
    let dh = d / heads;
    let (qp, kp, vp) = (matmul(q, &w.wq), matmul(k, &w.wk), matmul(v, &w.wv));
    let mut concat: Mat = vec![Vec::with_capacity(d); q.len()];
    let mut all_weights = Vec::new();
    for h in 0..heads {
        let (qh, kh, vh) = (cols(&qp, h * dh, dh), cols(&kp, h * dh, dh), cols(&vp, h * dh, dh));
        let mut weights = Vec::new();
        for (i, qi) in qh.iter().enumerate() {
            let logits: Vec<f64> = kh
                .iter()
                .map(|kj| qi.iter().zip(kj).map(|(a, b)| a * b).sum::<f64>() / (dh as f64).sqrt())
                .collect();
            let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let e: Vec<f64> = logits.iter().map(|l| (l - m).exp()).collect();
            let z: f64 = e.iter().sum();
            let a: Vec<f64> = e.iter().map(|x| x / z).collect();
            for c in 0..dh {
                concat[i].push(a.iter().zip(&vh).map(|(aj, vj)| aj * vj[c]).sum());
            }
            weights.push(a);
        }
        all_weights.push(weights);
    }
    (matmul(&concat, &w.wo), all_weights)
}

pub fn layer_norm(x: &Mat, n: &Norm) -> Mat {
    x.iter()
        .map(|r| {
            let d = r.len() as f64;
            let mean = r.iter().sum::<f64>() / d;
            let var = r.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / d;
            let inv = 1.0 / (var + 1e-6).sqrt();
            r.iter()
                .enumerate()
                .map(|(j, v)| (v - mean) * inv * n.gamma[j] + n.beta[j])
                .collect()
        })
        .collect()
}

pub fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + ((2.0 / std::f64::consts::PI).sqrt() * (x + 0.044715 * x.powi(3))).tanh())
}

pub fn ffn(x: &Mat, f: &Ffn) -> Mat {
    let h: Mat = matmul(x, &f.w1)
        .into_iter()
        .map(|r| r.iter().zip(&f.b1).map(|(v, b)| gelu(v + b)).collect())
        .collect();
    matmul(&h, &f.w2)
        .into_iter()
        .map(|r| r.iter().zip(&f.b2).map(|(v, b)| v + b).collect())
        .collect()
}

/// `FFN(LN(Q + mean of present branch outputs))`.
pub fn ucp(q: &Mat, streams: &[(&Mat, &Attn)], norm: &Norm, f: &Ffn, heads: usize) -> Mat {
    let outs: Vec<Mat> = streams.iter().map(|(s, w)| attention(q, s, s, w, heads).0).collect();
    let fused = if outs.len() == 2 {
        scale(&add(&outs[0], &outs[1]), 0.5)
    } else {
        outs[0].clone()
    };
    ffn(&layer_norm(&add(q, &fused), norm), f)
}

/// Decoder block output and head-averaged weights.
pub fn cpga(e: &Mat, p: &Mat, w: &Attn, norm: &Norm, f: &Ffn, heads: usize, query_residual: bool) -> (Mat, Mat) {
    let (a, weights) = attention(e, p, p, w, heads);
    let pre = if query_residual { add(e, &a) } else { a };
    let out = add(&pre, &ffn(&layer_norm(&pre, norm), f));
    let mut mean = weights[0].clone();
    for hw in &weights[1..] {
        mean = add(&mean, hw);
    }
    (out, scale(&mean, 1.0 / heads as f64))
}

pub fn assignment(weights: &Mat) -> Vec<f64> {
    let n = weights.len() as f64;
    (0..weights[0].len())
        .map(|j| weights.iter().map(|r| r[j]).sum::<f64>() / n)
        .collect()
}

pub fn loss_recon(targets: &[Mat], recons: &[Mat]) -> f64 {
    let l = targets.len() as f64;
    let n = targets[0].len();
    let d = targets[0][0].len();
    let mut total = 0.0;
    for t in 0..n {
        let mut a = vec![0.0; d];
        let mut b = vec![0.0; d];
        for (et, rt) in targets.iter().zip(recons) {
            for c in 0..d {
                a[c] += et[t][c] / l;
                b[c] += rt[t][c] / l;
            }
        }
        let dot: f64 = a.iter().zip(&b).map(|(x, y)| x * y).sum();
        let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
        let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
        total += 1.0 - dot / (na * nb);
    }
    total / n as f64
}

pub fn loss_entropy(q: &[f64], eps: f64) -> f64 {
    q.iter().map(|&x| x * (x + eps).ln()).sum()
}

pub fn max_diff(a: &Mat, b: &Mat) -> f64 {
    a.iter()
        .flatten()
        .zip(b.iter().flatten())
        .map(|(x, y)| (x - y).abs())
        .fold(0.0, f64::max)
}
