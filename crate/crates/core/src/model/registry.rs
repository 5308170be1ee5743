use std::collections::BTreeMap;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use super::builtin::{Constant, ExpDecay, Linear, SaturatingExponential, ScaledShape, Shape};
use super::ModelFunction;
use crate::error::{Error, Result};

/// Serializable model selection: registry name plus shape options.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSpec {
    pub name: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub shape: Option<Shape>,
    /// Expected parameter count; checked against the constructed model.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub n_params: Option<usize>,
}

impl ModelSpec {
    pub fn named(name: impl Into<String>) -> Self {
        Self {
            name: name.into(),
            shape: None,
            n_params: None,
        }
    }
}

type Constructor = Arc<dyn Fn(&ModelSpec) -> Result<Arc<dyn ModelFunction>> + Send + Sync>;

/// Name → constructor table for mean functions.
#[derive(Clone)]
pub struct ModelRegistry {
    entries: BTreeMap<String, Constructor>,
}

impl Default for ModelRegistry {
    fn default() -> Self {
        Self::builtin()
    }
}

impl ModelRegistry {
    pub fn empty() -> Self {
        Self {
            entries: BTreeMap::new(),
        }
    }

    /// Registry holding the bundled models.
    pub fn builtin() -> Self {
        let mut reg = Self::empty();
        reg.register("constant", |_| {
            Ok(Arc::new(Constant) as Arc<dyn ModelFunction>)
        });
        reg.register("exp_decay", |_| {
            Ok(Arc::new(ExpDecay) as Arc<dyn ModelFunction>)
        });
        reg.register("linear", |_| Ok(Arc::new(Linear) as Arc<dyn ModelFunction>));
        reg.register("saturating_exponential", |_| {
            Ok(Arc::new(SaturatingExponential) as Arc<dyn ModelFunction>)
        });
        reg.register("scaled_shape", |spec| {
            let shape = spec.shape.ok_or_else(|| {
                Error::Invalid("model `scaled_shape` requires a `shape` option".into())
            })?;
            Ok(Arc::new(ScaledShape::new(shape)) as Arc<dyn ModelFunction>)
        });
        reg
    }

    pub fn register<F>(&mut self, name: impl Into<String>, ctor: F)
    where
        F: Fn(&ModelSpec) -> Result<Arc<dyn ModelFunction>> + Send + Sync + 'static,
    {
        self.entries.insert(name.into(), Arc::new(ctor));
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(String::as_str)
    }

    pub fn create(&self, spec: &ModelSpec) -> Result<Arc<dyn ModelFunction>> {
        let ctor = self
            .entries
            .get(&spec.name)
            .ok_or_else(|| Error::Invalid(format!("unknown model `{}`", spec.name)))?;
        let model = ctor(spec)?;
        if let Some(p) = spec.n_params {
            if p != model.n_params() {
                return Err(Error::Dimension {
                    expected: model.n_params(),
                    got: p,
                });
            }
        }
        Ok(model)
    }
}
