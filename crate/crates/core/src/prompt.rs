//! Text prompts for class names, e.g. `this is a {class name}`.

use crate::error::{Error, Result};

pub const SLOT: &str = "{class name}";
pub const DEFAULT_TEMPLATE: &str = "this is a {class name}";

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PromptTemplate {
    template: String,
}

impl PromptTemplate {
    /// The template must contain the slot exactly once.
    pub fn new(template: impl Into<String>) -> Result<Self> {
        let template = template.into();
        match template.matches(SLOT).count() {
            1 => Ok(PromptTemplate { template }),
            n => Err(Error::param("template", format!("expected one {SLOT} slot, found {n}"))),
        }
    }

    pub fn as_str(&self) -> &str {
        &self.template
    }

    pub fn render(&self, class_name: &str) -> Result<String> {
        let out = self.template.replacen(SLOT, class_name, 1);
        if out.trim().is_empty() {
            return Err(Error::param("class_name", "prompt renders empty"));
        }
        Ok(out)
    }
}

impl Default for PromptTemplate {
    fn default() -> Self {
        PromptTemplate {
            template: DEFAULT_TEMPLATE.to_string(),
        }
    }
}
