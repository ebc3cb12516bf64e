//! Segmentation network contract and its realizations.
//!
//! A network maps one grayscale image to a logit map plus the feature grid
//! that produced it. Parameters live in one flat `f64` buffer described by a
//! named layout, which makes snapshots, EMA and optimizer updates plain
//! slice arithmetic.

pub mod checkpoint;
mod micro;
pub(crate) mod ops;
pub mod optim;
mod unet;

pub use micro::MicroNet;
pub use optim::{Adam, AdamConfig, PlateauConfig, PlateauScheduler};
pub use unet::{TinyUNet, UNetConfig};

use crate::error::{Error, Result};
use crate::types::{FeatureGrid, GrayscaleImage, ProbMap};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParamSpec {
    pub name: String,
    pub shape: Vec<usize>,
    pub offset: usize,
    pub len: usize,
}

/// Named views over a flat parameter buffer.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamSet {
    specs: Vec<ParamSpec>,
    data: Vec<f64>,
}

impl ParamSet {
    pub fn new() -> Self {
        Self {
            specs: Vec::new(),
            data: Vec::new(),
        }
    }

    /// Append a parameter and return its index.
    pub fn push(&mut self, name: impl Into<String>, shape: &[usize], values: Vec<f64>) -> usize {
        let len: usize = shape.iter().product();
        assert_eq!(len, values.len(), "parameter values do not match shape");
        self.specs.push(ParamSpec {
            name: name.into(),
            shape: shape.to_vec(),
            offset: self.data.len(),
            len,
        });
        self.data.extend(values);
        self.specs.len() - 1
    }

    pub fn specs(&self) -> &[ParamSpec] {
        &self.specs
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn get(&self, index: usize) -> &[f64] {
        let s = &self.specs[index];
        &self.data[s.offset..s.offset + s.len]
    }

    pub fn by_name(&self, name: &str) -> Option<&[f64]> {
        self.specs.iter().position(|s| s.name == name).map(|i| self.get(i))
    }

    pub fn same_layout(&self, other: &ParamSet) -> bool {
        self.specs == other.specs
    }

    /// SHA-256 over the little-endian parameter bytes.
    pub fn digest(&self) -> String {
        let mut h = Sha256::new();
        for v in &self.data {
            h.update(v.to_le_bytes());
        }
        hex::encode(h.finalize())
    }

    /// Replace all values, keeping the layout.
    pub fn load(&mut self, values: &[f64]) -> Result<()> {
        if values.len() != self.data.len() {
            return Err(Error::Checkpoint(format!(
                "expected {} parameter values, got {}",
                self.data.len(),
                values.len()
            )));
        }
        self.data.copy_from_slice(values);
        Ok(())
    }
}

impl Default for ParamSet {
    fn default() -> Self {
        Self::new()
    }
}

/// Logits and penultimate features for one image.
#[derive(Clone, Debug, PartialEq)]
pub struct NetOutput {
    pub height: usize,
    pub width: usize,
    pub logits: Vec<f64>,
    pub features: FeatureGrid,
}

impl NetOutput {
    pub fn probs(&self) -> Result<ProbMap> {
        ProbMap::from_logits(self.height, self.width, &self.logits)
    }
}

/// Upstream gradient for [`SegNet::backward`].
#[derive(Clone, Debug, PartialEq)]
pub struct OutputGrad {
    pub logits: Vec<f64>,
    pub features: Option<Vec<f64>>,
}

pub trait SegNet: Clone + Send + Sync {
    /// Activations retained by [`SegNet::forward_train`] for the backward pass.
    type Tape;

    fn params(&self) -> &ParamSet;

    fn params_mut(&mut self) -> &mut ParamSet;

    fn forward_train(&self, image: &GrayscaleImage) -> Result<(NetOutput, Self::Tape)>;

    /// Accumulate parameter gradients into `param_grad` (same layout as `params`).
    fn backward(&self, tape: &Self::Tape, grad: &OutputGrad, param_grad: &mut [f64]);

    /// There is no train/eval distinction (no dropout, no batch statistics).
    fn forward(&self, image: &GrayscaleImage) -> Result<NetOutput> {
        self.forward_train(image).map(|(out, _)| out)
    }
}

/// Bit-exact copy of a handle's parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamSnapshot(ParamSet);

impl ParamSnapshot {
    pub fn params(&self) -> &ParamSet {
        &self.0
    }
}

/// A network plus its frozen flag.
#[derive(Clone, Debug)]
pub struct BackboneHandle<N> {
    net: N,
    frozen: bool,
}

impl<N: SegNet> BackboneHandle<N> {
    pub fn new(net: N) -> Self {
        Self { net, frozen: false }
    }

    pub fn net(&self) -> &N {
        &self.net
    }

    pub fn params(&self) -> &ParamSet {
        self.net.params()
    }

    /// Mutable parameter access; refused once frozen.
    pub fn params_mut(&mut self) -> Result<&mut ParamSet> {
        if self.frozen {
            return Err(Error::InvalidValue("cannot modify a frozen network".into()));
        }
        Ok(self.net.params_mut())
    }

    pub fn freeze(&mut self) {
        self.frozen = true;
    }

    pub fn is_frozen(&self) -> bool {
        self.frozen
    }

    /// Unfrozen copy (e.g. to initialize a student from a frozen teacher).
    pub fn thawed_clone(&self) -> Self {
        Self {
            net: self.net.clone(),
            frozen: false,
        }
    }

    pub fn forward(&self, image: &GrayscaleImage) -> Result<NetOutput> {
        self.net.forward(image)
    }

    pub fn predict(&self, image: &GrayscaleImage) -> Result<ProbMap> {
        self.forward(image)?.probs()
    }

    pub fn snapshot(&self) -> ParamSnapshot {
        ParamSnapshot(self.net.params().clone())
    }

    pub fn restore(&mut self, snap: &ParamSnapshot) -> Result<()> {
        let params = self.params_mut()?;
        if !params.same_layout(&snap.0) {
            return Err(Error::Checkpoint("snapshot layout does not match network".into()));
        }
        params.load(snap.0.data())
    }

    /// SHA-256 of the logits on `images`, for frozen-output checks.
    pub fn output_digest(&self, images: &[&GrayscaleImage]) -> Result<String> {
        let mut h = Sha256::new();
        for img in images {
            for v in self.forward(img)?.logits {
                h.update(v.to_le_bytes());
            }
        }
        Ok(hex::encode(h.finalize()))
    }
}

/// `θ_T ← m·θ_T + (1−m)·θ_S`, elementwise.
pub fn ema_update<N: SegNet>(teacher: &mut BackboneHandle<N>, student: &BackboneHandle<N>, m: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&m) {
        return Err(Error::InvalidValue(format!("EMA momentum must be in [0, 1], got {m}")));
    }
    if !teacher.params().same_layout(student.params()) {
        return Err(Error::InvalidValue("EMA teacher and student layouts differ".into()));
    }
    let src = student.params().data();
    let dst = teacher.params_mut()?.data_mut();
    for (t, s) in dst.iter_mut().zip(src) {
        *t = m * *t + (1.0 - m) * s;
    }
    Ok(())
}
