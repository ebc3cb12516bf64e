//! Three-level U-Net with GroupNorm, in double precision.

use super::ops::{self, GroupNormTape};
use super::{NetOutput, OutputGrad, ParamSet, SegNet};
use crate::error::{Error, Result};
use crate::types::{FeatureGrid, GrayscaleImage};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct UNetConfig {
    /// Channel widths at full, half and quarter resolution.
    pub widths: [usize; 3],
    /// Upper bound on GroupNorm groups; each block uses `gcd(groups, width)`.
    pub groups: usize,
    pub seed: u64,
}

impl Default for UNetConfig {
    fn default() -> Self {
        Self {
            widths: [8, 16, 32],
            groups: 4,
            seed: 0,
        }
    }
}

fn gcd(a: usize, b: usize) -> usize {
    if b == 0 {
        a
    } else {
        gcd(b, a % b)
    }
}

/// conv3×3 → GroupNorm → ReLU.
#[derive(Clone, Debug)]
struct Block {
    cin: usize,
    cout: usize,
    groups: usize,
    weight: usize,
    gamma: usize,
    beta: usize,
}

struct BlockTape {
    h: usize,
    w: usize,
    cols: Vec<f64>,
    gn: GroupNormTape,
    out: Vec<f64>,
}

impl Block {
    fn new(params: &mut ParamSet, rng: &mut ChaCha8Rng, name: &str, cin: usize, cout: usize, groups: usize) -> Self {
        let std = (2.0 / (cin * 9) as f64).sqrt();
        let normal = Normal::new(0.0, std).expect("finite std");
        let w: Vec<f64> = (0..cout * cin * 9).map(|_| normal.sample(rng)).collect();
        let weight = params.push(format!("{name}.weight"), &[cout, cin, 3, 3], w);
        let gamma = params.push(format!("{name}.gn.gamma"), &[cout], vec![1.0; cout]);
        let beta = params.push(format!("{name}.gn.beta"), &[cout], vec![0.0; cout]);
        Self {
            cin,
            cout,
            groups: gcd(groups, cout).max(1),
            weight,
            gamma,
            beta,
        }
    }

    fn forward(&self, p: &ParamSet, x: &[f64], h: usize, w: usize) -> BlockTape {
        let hw = h * w;
        let cols = ops::im2col3(x, self.cin, h, w);
        let zero = vec![0.0; self.cout];
        let z = ops::conv_apply(&cols, self.cin * 9, hw, p.get(self.weight), &zero, self.cout);
        let (mut out, gn) = ops::group_norm(&z, self.cout, hw, self.groups, p.get(self.gamma), p.get(self.beta));
        ops::relu_inplace(&mut out);
        BlockTape { h, w, cols, gn, out }
    }

    fn backward(
        &self,
        p: &ParamSet,
        tape: &BlockTape,
        mut d_out: Vec<f64>,
        grad: &mut [f64],
        need_input: bool,
    ) -> Option<Vec<f64>> {
        let hw = tape.h * tape.w;
        ops::relu_backward_inplace(&tape.out, &mut d_out);
        let sg = &p.specs()[self.gamma];
        let (d_gamma, d_beta) = grad[sg.offset..sg.offset + 2 * self.cout].split_at_mut(self.cout);
        let d_z = ops::group_norm_backward(
            &tape.gn,
            self.cout,
            hw,
            self.groups,
            p.get(self.gamma),
            &d_out,
            d_gamma,
            d_beta,
        );
        let sw = &p.specs()[self.weight];
        let d_cols = ops::conv_backward(
            &tape.cols,
            self.cin * 9,
            hw,
            p.get(self.weight),
            self.cout,
            &d_z,
            &mut grad[sw.offset..sw.offset + sw.len],
            &mut [],
            need_input,
        );
        d_cols.map(|d| ops::col2im3(&d, self.cin, tape.h, tape.w))
    }
}

#[derive(Clone, Debug)]
pub struct TinyUNet {
    config: UNetConfig,
    params: ParamSet,
    enc1: Block,
    enc2: Block,
    mid: Block,
    dec2: Block,
    dec1: Block,
    head_w: usize,
    head_b: usize,
}

pub struct UNetTape {
    enc1: BlockTape,
    enc2: BlockTape,
    mid: BlockTape,
    dec2: BlockTape,
    dec1: BlockTape,
}

impl TinyUNet {
    pub fn new(config: UNetConfig) -> Result<Self> {
        if config.widths.contains(&0) || config.groups == 0 {
            return Err(Error::InvalidConfig("U-Net widths and groups must be positive".into()));
        }
        let [a, b, c] = config.widths;
        let g = config.groups;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mut params = ParamSet::new();
        let enc1 = Block::new(&mut params, &mut rng, "enc1", 1, a, g);
        let enc2 = Block::new(&mut params, &mut rng, "enc2", a, b, g);
        let mid = Block::new(&mut params, &mut rng, "mid", b, c, g);
        let dec2 = Block::new(&mut params, &mut rng, "dec2", c + b, b, g);
        let dec1 = Block::new(&mut params, &mut rng, "dec1", b + a, a, g);
        let normal = Normal::new(0.0, (1.0 / a as f64).sqrt()).expect("finite std");
        let hw: Vec<f64> = (0..a).map(|_| normal.sample(&mut rng)).collect();
        let head_w = params.push("head.weight", &[1, a], hw);
        let head_b = params.push("head.bias", &[1], vec![0.0]);
        Ok(Self {
            config,
            params,
            enc1,
            enc2,
            mid,
            dec2,
            dec1,
            head_w,
            head_b,
        })
    }

    pub fn config(&self) -> &UNetConfig {
        &self.config
    }
}

impl SegNet for TinyUNet {
    type Tape = UNetTape;

    fn params(&self) -> &ParamSet {
        &self.params
    }

    fn params_mut(&mut self) -> &mut ParamSet {
        &mut self.params
    }

    fn forward_train(&self, image: &GrayscaleImage) -> Result<(NetOutput, UNetTape)> {
        let (h, w) = image.shape();
        if h % 4 != 0 || w % 4 != 0 || h == 0 || w == 0 {
            return Err(Error::InvalidValue(format!(
                "U-Net input must have sides divisible by 4, got {h}x{w}"
            )));
        }
        let [a, b, c] = self.config.widths;
        let p = &self.params;
        let (h2, w2, h4, w4) = (h / 2, w / 2, h / 4, w / 4);

        let enc1 = self.enc1.forward(p, image.pixels(), h, w);
        let enc2 = self.enc2.forward(p, &ops::avg_pool2(&enc1.out, a, h, w), h2, w2);
        let mid = self.mid.forward(p, &ops::avg_pool2(&enc2.out, b, h2, w2), h4, w4);

        let mut cat2 = ops::upsample2(&mid.out, c, h4, w4);
        cat2.extend_from_slice(&enc2.out);
        let dec2 = self.dec2.forward(p, &cat2, h2, w2);

        let mut cat1 = ops::upsample2(&dec2.out, b, h2, w2);
        cat1.extend_from_slice(&enc1.out);
        let dec1 = self.dec1.forward(p, &cat1, h, w);

        let hw = h * w;
        let mut logits = vec![p.get(self.head_b)[0]; hw];
        for (ch, wt) in p.get(self.head_w).iter().enumerate() {
            for (l, f) in logits.iter_mut().zip(&dec1.out[ch * hw..(ch + 1) * hw]) {
                *l += wt * f;
            }
        }
        let features = FeatureGrid::new(a, h, w, dec1.out.clone())?;
        let out = NetOutput {
            height: h,
            width: w,
            logits,
            features,
        };
        Ok((
            out,
            UNetTape {
                enc1,
                enc2,
                mid,
                dec2,
                dec1,
            },
        ))
    }

    fn backward(&self, tape: &UNetTape, grad: &OutputGrad, param_grad: &mut [f64]) {
        let [a, b, c] = self.config.widths;
        let p = &self.params;
        let (h, w) = (tape.enc1.h, tape.enc1.w);
        let hw = h * w;
        let (h2, w2, h4, w4) = (h / 2, w / 2, h / 4, w / 4);

        let hw_spec = &p.specs()[self.head_w];
        let head_w = p.get(self.head_w);
        let mut d_feat = match &grad.features {
            Some(f) => f.clone(),
            None => vec![0.0; a * hw],
        };
        for ch in 0..a {
            let feat = &tape.dec1.out[ch * hw..(ch + 1) * hw];
            let mut gw = 0.0;
            for ((df, dl), f) in d_feat[ch * hw..(ch + 1) * hw].iter_mut().zip(&grad.logits).zip(feat) {
                *df += head_w[ch] * dl;
                gw += dl * f;
            }
            param_grad[hw_spec.offset + ch] += gw;
        }
        param_grad[p.specs()[self.head_b].offset] += grad.logits.iter().sum::<f64>();

        let d_cat1 = self
            .dec1
            .backward(p, &tape.dec1, d_feat, param_grad, true)
            .expect("input grad");
        let (d_up1, d_skip1) = d_cat1.split_at(b * hw);
        let d_dec2 = ops::upsample2_backward(d_up1, b, h2, w2);

        let d_cat2 = self
            .dec2
            .backward(p, &tape.dec2, d_dec2, param_grad, true)
            .expect("input grad");
        let (d_up2, d_skip2) = d_cat2.split_at(c * h2 * w2);
        let d_mid = ops::upsample2_backward(d_up2, c, h4, w4);

        let d_pool2 = self
            .mid
            .backward(p, &tape.mid, d_mid, param_grad, true)
            .expect("input grad");
        let mut d_enc2 = ops::avg_pool2_backward(&d_pool2, b, h2, w2);
        for (d, s) in d_enc2.iter_mut().zip(d_skip2) {
            *d += s;
        }

        let d_pool1 = self
            .enc2
            .backward(p, &tape.enc2, d_enc2, param_grad, true)
            .expect("input grad");
        let mut d_enc1 = ops::avg_pool2_backward(&d_pool1, a, h, w);
        for (d, s) in d_enc1.iter_mut().zip(d_skip1) {
            *d += s;
        }
        self.enc1.backward(p, &tape.enc1, d_enc1, param_grad, false);
    }
}
