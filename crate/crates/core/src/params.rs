//! Named parameters, the freezing policy, and seeded initialization.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{derive_seed, Rng};
use crate::tensor::{Scalar, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Accounting bucket a parameter belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ParamGroup {
    /// Tokenizers, positional tables and encoder weights (frozen).
    Backbone,
    /// UT or bottleneck adapters.
    Adapter,
    /// Trainable normalization after adapter-augmented residual sums.
    AdapterNorm,
    Pavf,
    Classifier,
}

impl ParamGroup {
    pub const ALL: [ParamGroup; 5] = [
        ParamGroup::Backbone,
        ParamGroup::Adapter,
        ParamGroup::AdapterNorm,
        ParamGroup::Pavf,
        ParamGroup::Classifier,
    ];

    pub fn name(self) -> &'static str {
        match self {
            ParamGroup::Backbone => "backbone",
            ParamGroup::Adapter => "adapter",
            ParamGroup::AdapterNorm => "adapter_norm",
            ParamGroup::Pavf => "pavf",
            ParamGroup::Classifier => "classifier",
        }
    }
}

#[derive(Debug, Clone)]
pub struct Parameter<T> {
    pub name: String,
    pub tensor: Tensor<T>,
    pub trainable: bool,
    pub group: ParamGroup,
    /// Only ever allocated for trainable parameters.
    pub grad: Option<Tensor<T>>,
}

#[derive(Debug, Clone, Default)]
pub struct ParamStore<T> {
    params: Vec<Parameter<T>>,
    by_name: HashMap<String, ParamId>,
}

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        Self {
            params: Vec::new(),
            by_name: HashMap::new(),
        }
    }

    pub fn insert(
        &mut self,
        name: impl Into<String>,
        tensor: Tensor<T>,
        trainable: bool,
        group: ParamGroup,
    ) -> Result<ParamId> {
        let name = name.into();
        if self.by_name.contains_key(&name) {
            return Err(Error::Config(format!("duplicate parameter name `{name}`")));
        }
        let id = ParamId(self.params.len());
        self.by_name.insert(name.clone(), id);
        self.params.push(Parameter {
            name,
            tensor,
            trainable,
            group,
            grad: None,
        });
        Ok(id)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Parameter<T> {
        &self.params[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Parameter<T> {
        &mut self.params[id.0]
    }

    pub fn tensor(&self, id: ParamId) -> &Tensor<T> {
        &self.params[id.0].tensor
    }

    pub fn tensor_mut(&mut self, id: ParamId) -> &mut Tensor<T> {
        &mut self.params[id.0].tensor
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.by_name.get(name).copied()
    }

    pub fn by_name(&self, name: &str) -> Option<&Parameter<T>> {
        self.id(name).map(|id| self.get(id))
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Parameter<T>)> {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.params.len()).map(ParamId)
    }

    pub fn trainable_ids(&self) -> Vec<ParamId> {
        self.iter()
            .filter(|(_, p)| p.trainable)
            .map(|(id, _)| id)
            .collect()
    }

    pub fn set_trainable(&mut self, id: ParamId, trainable: bool) {
        let p = &mut self.params[id.0];
        p.trainable = trainable;
        if !trainable {
            p.grad = None;
        }
    }

    pub fn zero_grad(&mut self) {
        for p in &mut self.params {
            p.grad = None;
        }
    }

    /// Add `g` into the gradient buffer of `id`; ignored for frozen parameters.
    pub fn accumulate_grad(&mut self, id: ParamId, g: &Tensor<T>) {
        let p = &mut self.params[id.0];
        if !p.trainable {
            return;
        }
        match &mut p.grad {
            Some(acc) => acc.add_assign(g),
            None => p.grad = Some(g.clone()),
        }
    }

    pub fn scale_grads(&mut self, c: T) {
        for p in &mut self.params {
            if let Some(g) = &mut p.grad {
                g.scale_in_place(c);
            }
        }
    }

    /// Total scalar count, optionally restricted to trainable parameters.
    pub fn scalar_count(&self, trainable_only: bool) -> usize {
        self.params
            .iter()
            .filter(|p| !trainable_only || p.trainable)
            .map(|p| p.tensor.len())
            .sum()
    }

    pub fn cast<U: Scalar>(&self) -> ParamStore<U> {
        ParamStore {
            params: self
                .params
                .iter()
                .map(|p| Parameter {
                    name: p.name.clone(),
                    tensor: p.tensor.cast(),
                    trainable: p.trainable,
                    group: p.group,
                    grad: p.grad.as_ref().map(|g| g.cast()),
                })
                .collect(),
            by_name: self.by_name.clone(),
        }
    }
}

/// How a freshly built parameter is filled.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Init {
    Zeros,
    Ones,
    /// Uniform on `[-bound, bound]`.
    Uniform(f64),
    Normal(f64),
    /// He-style uniform, bound `sqrt(6 / fan_in)`.
    HeUniform { fan_in: usize },
    /// Glorot uniform, bound `sqrt(6 / (fan_in + fan_out))`.
    XavierUniform { fan_in: usize, fan_out: usize },
}

/// Creates parameters under a hierarchical name prefix.
///
/// Each parameter draws from its own stream derived from `(seed, full name)`,
/// so adding or removing modules never perturbs the values of the others.
pub struct ParamBuilder<'a, T> {
    store: &'a mut ParamStore<T>,
    seed: u64,
    prefix: String,
    group: ParamGroup,
    trainable: bool,
}

impl<'a, T: Scalar> ParamBuilder<'a, T> {
    pub fn new(store: &'a mut ParamStore<T>, seed: u64) -> Self {
        Self {
            store,
            seed,
            prefix: String::new(),
            group: ParamGroup::Backbone,
            trainable: false,
        }
    }

    /// A child builder with `segment` appended to the name prefix.
    pub fn scope<'b>(&'b mut self, segment: &str) -> ParamBuilder<'b, T> {
        let prefix = if self.prefix.is_empty() {
            segment.to_string()
        } else {
            format!("{}.{segment}", self.prefix)
        };
        ParamBuilder {
            store: self.store,
            seed: self.seed,
            prefix,
            group: self.group,
            trainable: self.trainable,
        }
    }

    pub fn with_group(mut self, group: ParamGroup, trainable: bool) -> Self {
        self.group = group;
        self.trainable = trainable;
        self
    }

    pub fn set_group(&mut self, group: ParamGroup, trainable: bool) {
        self.group = group;
        self.trainable = trainable;
    }

    pub fn param(&mut self, name: &str, shape: &[usize], init: Init) -> Result<ParamId> {
        let full = if self.prefix.is_empty() {
            name.to_string()
        } else {
            format!("{}.{name}", self.prefix)
        };
        let n: usize = shape.iter().product();
        let mut rng = Rng::new(derive_seed(self.seed, &full));
        let data: Vec<T> = match init {
            Init::Zeros => vec![T::ZERO; n],
            Init::Ones => vec![T::ONE; n],
            Init::Uniform(b) => (0..n).map(|_| T::from_f64(rng.uniform_range(-b, b))).collect(),
            Init::Normal(s) => (0..n).map(|_| T::from_f64(s * rng.normal())).collect(),
            Init::HeUniform { fan_in } => {
                let b = (6.0 / fan_in as f64).sqrt();
                (0..n).map(|_| T::from_f64(rng.uniform_range(-b, b))).collect()
            }
            Init::XavierUniform { fan_in, fan_out } => {
                let b = (6.0 / (fan_in + fan_out) as f64).sqrt();
                (0..n).map(|_| T::from_f64(rng.uniform_range(-b, b))).collect()
            }
        };
        let tensor = Tensor::new(shape.to_vec(), data)?;
        self.store.insert(full, tensor, self.trainable, self.group)
    }
}
