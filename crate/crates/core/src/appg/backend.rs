//! Contracts for the box proposer and the box-to-mask generator.
//!
//! Implementations are queried through `&self` only; a backend carries no
//! state that a call could update.

use super::prompt::AppearancePrompt;
use crate::error::Result;
use crate::types::{BBox, BinaryMask, GrayscaleImage, ScoredBox};

/// Text-guided localization: image + appearance prompt to scored boxes.
pub trait BoxProposer: Send + Sync {
    fn name(&self) -> &str;

    /// An empty list is a legal answer (nothing found).
    fn propose(&self, image: &GrayscaleImage, prompt: &AppearancePrompt) -> Result<Vec<ScoredBox>>;
}

/// Promptable segmentation: image + box to a binary mask of the same extent.
pub trait MaskGenerator: Send + Sync {
    fn name(&self) -> &str;

    fn segment(&self, image: &GrayscaleImage, bbox: &BBox) -> Result<BinaryMask>;
}
