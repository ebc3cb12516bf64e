//! Per-image tensor kernels with explicit backward passes.
//!
//! Activations are channel-major `C × H × W` slices.

/// `C ← A·B + beta·C` where `A` is `m×k`, `B` is `k×n`, `C` is `m×n`.
/// `a_t` / `b_t` mean the operand is stored transposed (`k×m` / `n×k`).
#[allow(clippy::too_many_arguments)]
pub fn gemm(m: usize, k: usize, n: usize, a: &[f64], a_t: bool, b: &[f64], b_t: bool, beta: f64, c: &mut [f64]) {
    assert!(
        a.len() >= m * k && b.len() >= k * n && c.len() >= m * n,
        "gemm operand too small"
    );
    let (rsa, csa) = if a_t { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if b_t { (1, k as isize) } else { (n as isize, 1) };
    // SAFETY: bounds checked above; strides describe dense row-major storage.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// 3×3, stride 1, zero padding 1.
pub fn im2col3(x: &[f64], cin: usize, h: usize, w: usize) -> Vec<f64> {
    let hw = h * w;
    let mut cols = vec![0.0; cin * 9 * hw];
    for ci in 0..cin {
        let plane = &x[ci * hw..(ci + 1) * hw];
        for ky in 0..3 {
            for kx in 0..3 {
                let row = &mut cols[((ci * 9) + ky * 3 + kx) * hw..][..hw];
                for y in 0..h {
                    let sy = y as isize + ky as isize - 1;
                    if sy < 0 || sy >= h as isize {
                        continue;
                    }
                    let src = &plane[sy as usize * w..][..w];
                    let dst = &mut row[y * w..][..w];
                    match kx {
                        0 => dst[1..].copy_from_slice(&src[..w - 1]),
                        1 => dst.copy_from_slice(src),
                        _ => dst[..w - 1].copy_from_slice(&src[1..]),
                    }
                }
            }
        }
    }
    cols
}

pub fn col2im3(cols: &[f64], cin: usize, h: usize, w: usize) -> Vec<f64> {
    let hw = h * w;
    let mut x = vec![0.0; cin * hw];
    for ci in 0..cin {
        let plane = &mut x[ci * hw..(ci + 1) * hw];
        for ky in 0..3 {
            for kx in 0..3 {
                let row = &cols[((ci * 9) + ky * 3 + kx) * hw..][..hw];
                for y in 0..h {
                    let sy = y as isize + ky as isize - 1;
                    if sy < 0 || sy >= h as isize {
                        continue;
                    }
                    let dst = &mut plane[sy as usize * w..][..w];
                    let src = &row[y * w..][..w];
                    match kx {
                        0 => dst[..w - 1].iter_mut().zip(&src[1..]).for_each(|(d, s)| *d += s),
                        1 => dst.iter_mut().zip(src).for_each(|(d, s)| *d += s),
                        _ => dst[1..].iter_mut().zip(&src[..w - 1]).for_each(|(d, s)| *d += s),
                    }
                }
            }
        }
    }
    x
}

/// `out = W·cols + b` with `W` of shape `cout × rows(cols)`.
pub fn conv_apply(cols: &[f64], rows: usize, hw: usize, weight: &[f64], bias: &[f64], cout: usize) -> Vec<f64> {
    let mut out = vec![0.0; cout * hw];
    for (o, b) in out.chunks_mut(hw).zip(bias) {
        o.fill(*b);
    }
    gemm(cout, rows, hw, weight, false, cols, false, 1.0, &mut out);
    out
}

/// Accumulates weight and bias gradients; returns the gradient w.r.t. `cols`
/// when `need_input` is set.
#[allow(clippy::too_many_arguments)]
pub fn conv_backward(
    cols: &[f64],
    rows: usize,
    hw: usize,
    weight: &[f64],
    cout: usize,
    d_out: &[f64],
    d_weight: &mut [f64],
    d_bias: &mut [f64],
    need_input: bool,
) -> Option<Vec<f64>> {
    gemm(cout, hw, rows, d_out, false, cols, true, 1.0, d_weight);
    for (db, g) in d_bias.iter_mut().zip(d_out.chunks(hw)) {
        *db += g.iter().sum::<f64>();
    }
    need_input.then(|| {
        let mut d_cols = vec![0.0; rows * hw];
        gemm(rows, cout, hw, weight, true, d_out, false, 0.0, &mut d_cols);
        d_cols
    })
}

pub const GN_EPS: f64 = 1e-5;

pub struct GroupNormTape {
    pub xhat: Vec<f64>,
    pub inv_std: Vec<f64>,
}

pub fn group_norm(
    x: &[f64],
    c: usize,
    hw: usize,
    groups: usize,
    gamma: &[f64],
    beta: &[f64],
) -> (Vec<f64>, GroupNormTape) {
    let per = c / groups;
    let n = (per * hw) as f64;
    let mut xhat = vec![0.0; x.len()];
    let mut inv_std = Vec::with_capacity(groups);
    for g in 0..groups {
        let range = g * per * hw..(g + 1) * per * hw;
        let seg = &x[range.clone()];
        let mean = seg.iter().sum::<f64>() / n;
        let var = seg.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
        let is = 1.0 / (var + GN_EPS).sqrt();
        for (o, v) in xhat[range].iter_mut().zip(seg) {
            *o = (v - mean) * is;
        }
        inv_std.push(is);
    }
    let mut y = vec![0.0; x.len()];
    for ch in 0..c {
        let (gm, bt) = (gamma[ch], beta[ch]);
        for (o, v) in y[ch * hw..(ch + 1) * hw].iter_mut().zip(&xhat[ch * hw..(ch + 1) * hw]) {
            *o = gm * v + bt;
        }
    }
    (y, GroupNormTape { xhat, inv_std })
}

#[allow(clippy::too_many_arguments)]
pub fn group_norm_backward(
    tape: &GroupNormTape,
    c: usize,
    hw: usize,
    groups: usize,
    gamma: &[f64],
    d_y: &[f64],
    d_gamma: &mut [f64],
    d_beta: &mut [f64],
) -> Vec<f64> {
    let mut d_xhat = vec![0.0; d_y.len()];
    for ch in 0..c {
        let r = ch * hw..(ch + 1) * hw;
        let (mut sg, mut sb) = (0.0, 0.0);
        for ((dx, dy), xh) in d_xhat[r.clone()].iter_mut().zip(&d_y[r.clone()]).zip(&tape.xhat[r]) {
            *dx = dy * gamma[ch];
            sg += dy * xh;
            sb += dy;
        }
        d_gamma[ch] += sg;
        d_beta[ch] += sb;
    }
    let per = c / groups;
    let n = (per * hw) as f64;
    let mut d_x = vec![0.0; d_y.len()];
    for g in 0..groups {
        let r = g * per * hw..(g + 1) * per * hw;
        let dxh = &d_xhat[r.clone()];
        let xh = &tape.xhat[r.clone()];
        let s1: f64 = dxh.iter().sum();
        let s2: f64 = dxh.iter().zip(xh).map(|(a, b)| a * b).sum();
        let k = tape.inv_std[g] / n;
        for ((o, a), b) in d_x[r].iter_mut().zip(dxh).zip(xh) {
            *o = k * (n * a - s1 - b * s2);
        }
    }
    d_x
}

pub fn relu_inplace(x: &mut [f64]) {
    for v in x {
        if *v < 0.0 {
            *v = 0.0;
        }
    }
}

/// Zero the gradient where the ReLU output was clipped.
pub fn relu_backward_inplace(out: &[f64], d: &mut [f64]) {
    for (g, o) in d.iter_mut().zip(out) {
        if *o <= 0.0 {
            *g = 0.0;
        }
    }
}

/// 2×2 average pooling, stride 2. `h` and `w` must be even.
pub fn avg_pool2(x: &[f64], c: usize, h: usize, w: usize) -> Vec<f64> {
    let (oh, ow) = (h / 2, w / 2);
    let mut out = vec![0.0; c * oh * ow];
    for ch in 0..c {
        let src = &x[ch * h * w..];
        let dst = &mut out[ch * oh * ow..];
        for y in 0..oh {
            for xx in 0..ow {
                let i = 2 * y * w + 2 * xx;
                dst[y * ow + xx] = 0.25 * (src[i] + src[i + 1] + src[i + w] + src[i + w + 1]);
            }
        }
    }
    out
}

pub fn avg_pool2_backward(d_out: &[f64], c: usize, h: usize, w: usize) -> Vec<f64> {
    let (oh, ow) = (h / 2, w / 2);
    let mut d_x = vec![0.0; c * h * w];
    for ch in 0..c {
        for y in 0..h {
            for xx in 0..w {
                d_x[ch * h * w + y * w + xx] = 0.25 * d_out[ch * oh * ow + (y / 2) * ow + xx / 2];
            }
        }
    }
    d_x
}

/// Nearest-neighbor ×2 upsampling of a `c × h × w` map.
pub fn upsample2(x: &[f64], c: usize, h: usize, w: usize) -> Vec<f64> {
    let (oh, ow) = (2 * h, 2 * w);
    let mut out = vec![0.0; c * oh * ow];
    for ch in 0..c {
        for y in 0..oh {
            for xx in 0..ow {
                out[ch * oh * ow + y * ow + xx] = x[ch * h * w + (y / 2) * w + xx / 2];
            }
        }
    }
    out
}

/// Backward of [`upsample2`]; `h × w` is the low-resolution size.
pub fn upsample2_backward(d_out: &[f64], c: usize, h: usize, w: usize) -> Vec<f64> {
    let (oh, ow) = (2 * h, 2 * w);
    let mut d_x = vec![0.0; c * h * w];
    for ch in 0..c {
        for y in 0..oh {
            for xx in 0..ow {
                d_x[ch * h * w + (y / 2) * w + xx / 2] += d_out[ch * oh * ow + y * ow + xx];
            }
        }
    }
    d_x
}
