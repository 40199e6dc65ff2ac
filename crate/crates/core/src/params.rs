//! Path-addressable parameter sets.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ParamKind {
    Kernel,
    Bias,
    /// BN γ.
    Scale,
    /// BN β.
    Shift,
    RunningMean,
    RunningVar,
}

impl ParamKind {
    pub fn is_learnable(self) -> bool {
        !matches!(self, ParamKind::RunningMean | ParamKind::RunningVar)
    }

    /// Whether weight decay applies (kernels and biases only).
    pub fn decays(self) -> bool {
        matches!(self, ParamKind::Kernel | ParamKind::Bias)
    }
}

/// Anything that owns named tensors. Paths are dot-separated and unique.
pub trait Parameterized {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Tensor, ParamKind));
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor, ParamKind));

    /// Total count of learnable scalars.
    fn count_parameters(&self) -> usize {
        let mut total = 0;
        self.visit("", &mut |_, t, kind| {
            if kind.is_learnable() {
                total += t.len();
            }
        });
        total
    }

    /// Learnable scalar count per path.
    fn parameter_breakdown(&self) -> BTreeMap<String, usize> {
        let mut out = BTreeMap::new();
        self.visit("", &mut |path, t, kind| {
            if kind.is_learnable() {
                out.insert(path.to_string(), t.len());
            }
        });
        out
    }

    fn learnable_paths(&self) -> Vec<String> {
        let mut out = Vec::new();
        self.visit("", &mut |path, _, kind| {
            if kind.is_learnable() {
                out.push(path.to_string());
            }
        });
        out
    }

    /// Overwrites the tensor at `path`; the shape must not change.
    fn set(&mut self, path: &str, value: Tensor) -> Result<()> {
        let mut value = Some(value);
        let mut outcome = Err(Error::Contract(format!("no parameter at {path}")));
        self.visit_mut("", &mut |p, t, _| {
            if p == path {
                if let Some(v) = value.take() {
                    outcome = if v.shape() == t.shape() {
                        *t = v;
                        Ok(())
                    } else {
                        Err(Error::Dimension(format!(
                            "{path}: cannot replace {} with {}",
                            t.shape(),
                            v.shape()
                        )))
                    };
                }
            }
        });
        outcome
    }
}

pub fn join(prefix: &str, name: &str) -> String {
    if prefix.is_empty() {
        name.to_string()
    } else {
        format!("{prefix}.{name}")
    }
}

/// A flat, ad hoc parameter set.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamMap {
    entries: BTreeMap<String, (Tensor, ParamKind)>,
}

impl ParamMap {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, path: impl Into<String>, value: Tensor, kind: ParamKind) {
        self.entries.insert(path.into(), (value, kind));
    }

    pub fn get(&self, path: &str) -> Option<&Tensor> {
        self.entries.get(path).map(|(t, _)| t)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
}

impl Parameterized for ParamMap {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Tensor, ParamKind)) {
        for (path, (t, kind)) in &self.entries {
            f(&join(prefix, path), t, *kind);
        }
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor, ParamKind)) {
        for (path, (t, kind)) in &mut self.entries {
            f(&join(prefix, path), t, *kind);
        }
    }
}
