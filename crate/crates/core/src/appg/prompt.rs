use crate::error::{Error, Result};
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;

pub const PHRASE_SEPARATOR: &str = ".";
pub const DEFAULT_PROMPT_KEY: &str = "breast_ultrasound";

/// Appearance phrases handed to the box proposer, plus their rendered form.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct AppearancePrompt {
    pub phrases: Vec<String>,
    pub rendered: String,
}

/// Domain-level lesion descriptors and the plain appearance phrases derived
/// from them once, offline, per modality key.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TraitRegistry {
    pub med_common_traits: Vec<String>,
    pub appearance_phrases: BTreeMap<String, Vec<String>>,
}

impl Default for TraitRegistry {
    fn default() -> Self {
        let strings = |xs: &[&str]| xs.iter().map(|s| s.to_string()).collect::<Vec<_>>();
        let mut appearance_phrases = BTreeMap::new();
        appearance_phrases.insert(
            DEFAULT_PROMPT_KEY.to_string(),
            strings(&["dark oval", "dark round", "dark lobulated"]),
        );
        Self {
            med_common_traits: strings(&[
                "high density",
                "tumor",
                "heterogeneous hypoechoic texture",
                "spiculated margins",
            ]),
            appearance_phrases,
        }
    }
}

/// Look up the appearance phrases for `key` and render them with `.`.
pub fn compose_prompt(registry: &TraitRegistry, key: &str) -> Result<AppearancePrompt> {
    let phrases = registry
        .appearance_phrases
        .get(key)
        .ok_or_else(|| Error::UnknownPromptKey {
            key: key.to_string(),
            available: registry
                .appearance_phrases
                .keys()
                .cloned()
                .collect::<Vec<_>>()
                .join(", "),
        })?;
    if phrases.is_empty() {
        return Err(Error::InvalidValue(format!(
            "prompt key `{key}` has no appearance phrases"
        )));
    }
    for phrase in phrases {
        let trimmed = phrase.trim();
        if trimmed.is_empty() || trimmed.contains(PHRASE_SEPARATOR) {
            return Err(Error::InvalidValue(format!("malformed appearance phrase `{phrase}`")));
        }
        if phrase.chars().any(char::is_uppercase) {
            return Err(Error::InvalidValue(format!(
                "appearance phrase `{phrase}` must be lowercase"
            )));
        }
        let lower = phrase.to_lowercase();
        if let Some(term) = registry
            .med_common_traits
            .iter()
            .find(|t| lower.contains(&t.to_lowercase()))
        {
            return Err(Error::InvalidValue(format!(
                "appearance phrase `{phrase}` uses medical term `{term}`"
            )));
        }
    }
    Ok(AppearancePrompt {
        phrases: phrases.clone(),
        rendered: phrases.join(PHRASE_SEPARATOR),
    })
}
