//! Slow, literal reference implementations used as test oracles.
//!
//! Everything here works on plain slices with explicit row/column loops and
//! shares no code with the library.

#![allow(dead_code, clippy::manual_clamp, clippy::needless_range_loop)]

/// Binary cross-entropy (probabilities clamped to `[1e-7, 1 − 1e-7]`) plus
/// soft Dice loss with smoothing 1.
pub fn seg_loss(p: &[f64], t: &[f64], h: usize, w: usize) -> f64 {
    let mut bce = 0.0;
    let mut inter = 0.0;
    let mut sum_p = 0.0;
    let mut sum_t = 0.0;
    for r in 0..h {
        for c in 0..w {
            let i = r * w + c;
            let mut q = p[i];
            if q < 1e-7 {
                q = 1e-7;
            }
            if q > 1.0 - 1e-7 {
                q = 1.0 - 1e-7;
            }
            bce += -(t[i] * q.ln() + (1.0 - t[i]) * (1.0 - q).ln());
            inter += p[i] * t[i];
            sum_p += p[i];
            sum_t += t[i];
        }
    }
    bce /= (h * w) as f64;
    let dice = 1.0 - (2.0 * inter + 1.0) / (sum_p + sum_t + 1.0);
    bce + dice
}

pub fn sigmoid(z: f64) -> f64 {
    1.0 / (1.0 + (-z).exp())
}

/// Per-patch weighted feature means; `h` and `w` must be multiples of `ps`.
/// `f` is channel-major `d × h × w`.
pub fn patch_pool(f: &[f64], d: usize, h: usize, w: usize, weights: &[f64], ps: usize, eps: f64) -> Vec<Vec<f64>> {
    assert!(h.is_multiple_of(ps) && w.is_multiple_of(ps));
    let mut out = Vec::new();
    for pr in 0..h / ps {
        for pc in 0..w / ps {
            let mut num = vec![0.0; d];
            let mut den = 0.0;
            for r in pr * ps..(pr + 1) * ps {
                for c in pc * ps..(pc + 1) * ps {
                    let u = r * w + c;
                    den += weights[u];
                    for ch in 0..d {
                        num[ch] += f[ch * h * w + u] * weights[u];
                    }
                }
            }
            out.push(num.iter().map(|v| v / (den + eps)).collect());
        }
    }
    out
}

fn cosine(a: &[f64], b: &[f64], eps: f64) -> f64 {
    let mut dot = 0.0;
    let mut na = 0.0;
    let mut nb = 0.0;
    for i in 0..a.len() {
        dot += a[i] * b[i];
        na += a[i] * a[i];
        nb += b[i] * b[i];
    }
    dot / (na.sqrt().max(eps) * nb.sqrt().max(eps))
}

/// Mean over patches of `−ln(exp(s_jj/t) / Σ_k exp(s_jk/t))`.
pub fn info_nce(a: &[Vec<f64>], b: &[Vec<f64>], t: f64, eps: f64) -> f64 {
    let n = a.len();
    let mut total = 0.0;
    for j in 0..n {
        let pos = (cosine(&a[j], &b[j], eps) / t).exp();
        let mut all = 0.0;
        for k in 0..n {
            all += (cosine(&a[j], &b[k], eps) / t).exp();
        }
        total += -(pos / all).ln();
    }
    total / n as f64
}

/// Threshold, flip, pool and contrast, spelled out.
#[allow(clippy::too_many_arguments)]
pub fn aurcl(
    p: &[f64],
    f: &[f64],
    d: usize,
    h: usize,
    w: usize,
    ratio: f64,
    tau_fix: f64,
    ps: usize,
    t: f64,
    eps: f64,
) -> f64 {
    let conf: Vec<f64> = p.iter().map(|v| 1.0 - v).collect();
    let mut sorted = conf.clone();
    sorted.sort_by(|a, b| b.partial_cmp(a).unwrap());
    let mut k = (ratio * (h * w) as f64).round() as usize;
    if k < 1 {
        k = 1;
    }
    if k > h * w {
        k = h * w;
    }
    let tau = if sorted[k - 1] > tau_fix {
        sorted[k - 1]
    } else {
        tau_fix
    };
    let mut rev = p.to_vec();
    for i in 0..h * w {
        if conf[i] >= tau {
            rev[i] = 1.0 - p[i];
        }
    }
    let a = patch_pool(f, d, h, w, p, ps, eps);
    let b = patch_pool(f, d, h, w, &rev, ps, eps);
    info_nce(&a, &b, t, eps)
}

/// Fusion of two teachers at a single pixel (no spatial smoothing).
pub fn fuse_pixel(pa: f64, pb: f64, eps: f64) -> f64 {
    let entropy = |p: f64| -(p * (p + eps).ln() + (1.0 - p) * (1.0 - p + eps).ln());
    let wa = 1.0 / (entropy(pa) + eps);
    let wb = 1.0 / (entropy(pb) + eps);
    (wa * pa + wb * pb) / (wa + wb + eps)
}

/// Central difference of `f` around `x[i]`.
pub fn central_diff(x: &mut [f64], i: usize, step: f64, mut f: impl FnMut(&[f64]) -> f64) -> f64 {
    let keep = x[i];
    x[i] = keep + step;
    let up = f(x);
    x[i] = keep - step;
    let down = f(x);
    x[i] = keep;
    (up - down) / (2.0 * step)
}

/// `|a − b| / max(|a|, |b|, floor)`.
pub fn rel_err(a: f64, b: f64, floor: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(floor)
}
