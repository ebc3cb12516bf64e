//! Four-parameter pixelwise network: `f = tanh(a·x + b)`, `logit = c·f + d`.
//!
//! Small enough for exhaustive finite-difference checks of whole training
//! steps; any image size is accepted.

use super::{NetOutput, OutputGrad, ParamSet, SegNet};
use crate::error::Result;
use crate::types::{FeatureGrid, GrayscaleImage};

#[derive(Clone, Debug)]
pub struct MicroNet {
    params: ParamSet,
}

pub struct MicroTape {
    x: Vec<f64>,
    f: Vec<f64>,
}

impl MicroNet {
    pub fn new(a: f64, b: f64, c: f64, d: f64) -> Self {
        let mut params = ParamSet::new();
        params.push("a", &[1], vec![a]);
        params.push("b", &[1], vec![b]);
        params.push("c", &[1], vec![c]);
        params.push("d", &[1], vec![d]);
        Self { params }
    }
}

impl SegNet for MicroNet {
    type Tape = MicroTape;

    fn params(&self) -> &ParamSet {
        &self.params
    }

    fn params_mut(&mut self) -> &mut ParamSet {
        &mut self.params
    }

    fn forward_train(&self, image: &GrayscaleImage) -> Result<(NetOutput, MicroTape)> {
        let [a, b, c, d] = [0, 1, 2, 3].map(|i| self.params.data()[i]);
        let (h, w) = image.shape();
        let x = image.pixels().to_vec();
        let f: Vec<f64> = x.iter().map(|x| (a * x + b).tanh()).collect();
        let logits = f.iter().map(|f| c * f + d).collect();
        let out = NetOutput {
            height: h,
            width: w,
            logits,
            features: FeatureGrid::new(1, h, w, f.clone())?,
        };
        Ok((out, MicroTape { x, f }))
    }

    fn backward(&self, tape: &MicroTape, grad: &OutputGrad, param_grad: &mut [f64]) {
        let c = self.params.data()[2];
        let mut g = [0.0; 4];
        for (i, (x, f)) in tape.x.iter().zip(&tape.f).enumerate() {
            let dl = grad.logits[i];
            let df = c * dl + grad.features.as_ref().map_or(0.0, |q| q[i]);
            let dpre = df * (1.0 - f * f);
            g[0] += dpre * x;
            g[1] += dpre;
            g[2] += dl * f;
            g[3] += dl;
        }
        for (p, v) in param_grad.iter_mut().zip(g) {
            *p += v;
        }
    }
}
