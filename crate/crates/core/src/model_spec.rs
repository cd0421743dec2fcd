//! Declarative model description files.
//!
//! A model file is TOML with four sections:
//!
//! ```toml
//! [model]
//! family = "poisson"          # gaussian | poisson | binomial | bernoulli | coxph
//! fixed_precision = 0.001     # prior precision of intercept and linear effects
//!
//! [data]
//! response = "y"
//! offset = "log_e"            # or: exposure = "e"
//!
//! [[component]]
//! name = "intercept"
//! kind = "intercept"
//!
//! [[component]]
//! name = "age"
//! kind = "rw2"
//! column = "age_bin"
//! size = 40
//!
//! [priors]
//! age = { shape = 1.0, rate = 5e-5 }
//! ```
//!
//! Survival models use `family = "coxph"` with `time`/`event` bindings and
//! `bins`/`baseline` in `[model]`; they are rewritten to a Poisson model by
//! [`crate::coxph`].

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::lgm::{ComponentKind, GammaPrior};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SpecError {
    #[error("line {line}: syntax error: {msg}")]
    Syntax { line: usize, msg: String },
    #[error("line {line}: unknown field: {msg}")]
    UnknownField { line: usize, msg: String },
    #[error("line {line}: type mismatch: {msg}")]
    TypeMismatch { line: usize, msg: String },
    #[error("line {line}: missing field: {msg}")]
    MissingField { line: usize, msg: String },
    #[error("{}invalid model: {msg}", line.map(|l| format!("line {l}: ")).unwrap_or_default())]
    Invalid { line: Option<usize>, msg: String },
    #[error("cannot read model file: {0}")]
    Io(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FamilyName {
    Gaussian,
    Poisson,
    Binomial,
    Bernoulli,
    Coxph,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BinPlacement {
    Equal,
    Quantile,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSection {
    pub family: FamilyName,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub fixed_precision: Option<f64>,
    /// Number of baseline-hazard bins (coxph only).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub bins: Option<usize>,
    /// `rw1` or `rw2` baseline-hazard prior (coxph only).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub baseline: Option<ComponentKind>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub bin_placement: Option<BinPlacement>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataBindings {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub response: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub offset: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub exposure: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub trials: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub time: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub event: Option<String>,
}

impl DataBindings {
    fn is_empty(&self) -> bool {
        *self == Self::default()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ComponentEntry {
    pub name: String,
    pub kind: ComponentKind,
    /// Covariate (linear), group (iid) or index (rw1/rw2) column.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub column: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub size: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub scaled: Option<bool>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub constrained: Option<bool>,
    /// Constant multiplier of the component in every linear predictor.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub coef: Option<f64>,
    /// Starting log-precision for the optimizer.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub initial: Option<f64>,
}

impl ComponentEntry {
    pub fn new(name: impl Into<String>, kind: ComponentKind, column: Option<&str>) -> Self {
        Self {
            name: name.into(),
            kind,
            column: column.map(str::to_owned),
            size: None,
            scaled: None,
            constrained: None,
            coef: None,
            initial: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSpec {
    pub model: ModelSection,
    #[serde(default, skip_serializing_if = "DataBindings::is_empty")]
    pub data: DataBindings,
    #[serde(default, rename = "component", skip_serializing_if = "Vec::is_empty")]
    pub components: Vec<ComponentEntry>,
    /// Gamma priors on precisions, keyed by component name (`noise` for the
    /// Gaussian observation precision).
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub priors: BTreeMap<String, GammaPrior>,
}

/// Name of the Gaussian observation-precision hyperparameter.
pub const NOISE: &str = "noise";

impl ModelSpec {
    pub fn new(family: FamilyName) -> Self {
        Self {
            model: ModelSection { family, fixed_precision: None, bins: None, baseline: None, bin_placement: None },
            data: DataBindings::default(),
            components: Vec::new(),
            priors: BTreeMap::new(),
        }
    }

    pub fn with_response(mut self, column: &str) -> Self {
        self.data.response = Some(column.to_owned());
        self
    }

    pub fn with_component(mut self, entry: ComponentEntry) -> Self {
        self.components.push(entry);
        self
    }

    pub fn parse(text: &str) -> Result<Self, SpecError> {
        let spec: ModelSpec = toml::from_str(text).map_err(|e| classify(text, &e))?;
        spec.validate(text)?;
        Ok(spec)
    }

    pub fn from_file(path: impl AsRef<Path>) -> Result<Self, SpecError> {
        let text = std::fs::read_to_string(path).map_err(|e| SpecError::Io(e.to_string()))?;
        Self::parse(&text)
    }

    /// Canonical text form; `parse(to_canonical(s)) == s`.
    pub fn to_canonical(&self) -> String {
        toml::to_string(self).expect("model spec serializes")
    }

    fn validate(&self, text: &str) -> Result<(), SpecError> {
        let line_of = |needle: &str| {
            text.lines().position(|l| l.contains(needle)).map(|p| p + 1)
        };
        let invalid = |needle: &str, msg: String| SpecError::Invalid { line: line_of(needle), msg };

        match self.model.family {
            FamilyName::Coxph => {
                if self.data.time.is_none() || self.data.event.is_none() {
                    return Err(invalid("family", "coxph needs `time` and `event` bindings in [data]".into()));
                }
                if let Some(k) = self.model.baseline {
                    if !matches!(k, ComponentKind::Rw1 | ComponentKind::Rw2) {
                        return Err(invalid("baseline", format!("baseline must be rw1 or rw2, got {k:?}")));
                    }
                }
                if self.model.bins == Some(0) {
                    return Err(invalid("bins", "bins must be at least 1".into()));
                }
            }
            _ => {
                if self.data.response.is_none() {
                    return Err(invalid("[data]", "missing `response` binding".into()));
                }
            }
        }
        if self.data.offset.is_some() && self.data.exposure.is_some() {
            return Err(invalid("exposure", "give either `offset` or `exposure`, not both".into()));
        }
        if let Some(fp) = self.model.fixed_precision {
            if !(fp > 0.0 && fp.is_finite()) {
                return Err(invalid("fixed_precision", "fixed_precision must be positive".into()));
            }
        }

        let mut seen = std::collections::BTreeSet::new();
        for c in &self.components {
            let needle = format!("\"{}\"", c.name);
            if !seen.insert(c.name.as_str()) {
                return Err(invalid(&needle, format!("duplicate component `{}`", c.name)));
            }
            if c.name == NOISE {
                return Err(invalid(&needle, format!("`{NOISE}` is reserved")));
            }
            match (c.kind, &c.column) {
                (ComponentKind::Intercept, Some(_)) => {
                    return Err(invalid(&needle, format!("intercept `{}` takes no column", c.name)))
                }
                (ComponentKind::Intercept, None) => {}
                (_, None) => return Err(invalid(&needle, format!("component `{}` needs a column", c.name))),
                _ => {}
            }
            if let Some(size) = c.size {
                let min = c.kind.min_size();
                if size < min {
                    return Err(invalid(&needle, format!("{:?} `{}` needs size >= {min}", c.kind, c.name)));
                }
            }
        }
        for key in self.priors.keys() {
            let ok = (key == NOISE && self.model.family == FamilyName::Gaussian)
                || self.components.iter().any(|c| &c.name == key && c.kind.has_hyper())
                || (self.model.family == FamilyName::Coxph && key == crate::coxph::BASELINE);
            if !ok {
                return Err(SpecError::UnknownField {
                    line: line_of(key).unwrap_or(0),
                    msg: format!("prior for unknown hyperparameter `{key}`"),
                });
            }
        }
        Ok(())
    }
}

fn classify(text: &str, err: &toml::de::Error) -> SpecError {
    let line = err
        .span()
        .map(|s| text[..s.start.min(text.len())].matches('\n').count() + 1)
        .unwrap_or(0);
    let msg = err.message().to_owned();
    if msg.contains("unknown field") {
        SpecError::UnknownField { line, msg }
    } else if msg.contains("missing field") {
        SpecError::MissingField { line, msg }
    } else if msg.contains("invalid type") || msg.contains("invalid value") || msg.contains("unknown variant") {
        SpecError::TypeMismatch { line, msg }
    } else {
        SpecError::Syntax { line, msg }
    }
}
