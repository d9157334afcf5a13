use std::collections::HashMap;
use std::sync::Arc;

use crate::error::{HwmError, Result};
use crate::numcore::tensor::Tensor;
use crate::scalar::Scalar;

/// Index of one parameter storage slot. Aliased names resolve to the same id.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ParamSpec {
    pub name: String,
    pub shape: Vec<usize>,
    /// Whether decoupled weight decay applies (false for norms, biases, modulation maps).
    pub decay: bool,
}

impl ParamSpec {
    pub fn numel(&self) -> usize {
        self.shape.iter().product()
    }
}

/// Declared parameter set of a model: storage specs plus alias names.
///
/// Counting works on the layout alone, so full-sized models can be
/// accounted for without allocating their weights.
#[derive(Clone, Debug, Default)]
pub struct ParamLayout {
    specs: Vec<ParamSpec>,
    names: HashMap<String, ParamId>,
    aliases: Vec<(String, ParamId)>,
}

/// One named parameter as seen through the layout, alias or canonical.
#[derive(Clone, Debug, PartialEq)]
pub struct ParameterRecord<'a> {
    pub name: &'a str,
    pub id: ParamId,
    pub shape: &'a [usize],
    /// Canonical path when this name is an alias.
    pub shared_with: Option<&'a str>,
}

impl ParamLayout {
    pub fn new() -> Self {
        Self::default()
    }

    /// Declares a fresh storage slot.
    ///
    /// Panics on a duplicate name: names are produced by model constructors,
    /// so a clash is a construction bug.
    pub fn declare(&mut self, name: impl Into<String>, shape: &[usize], decay: bool) -> ParamId {
        let name = name.into();
        assert!(!self.names.contains_key(&name), "duplicate parameter name `{name}`");
        let id = ParamId(self.specs.len());
        self.names.insert(name.clone(), id);
        self.specs.push(ParamSpec { name, shape: shape.to_vec(), decay });
        id
    }

    /// Registers `name` as another path onto existing storage.
    pub fn alias(&mut self, name: impl Into<String>, target: ParamId) -> ParamId {
        let name = name.into();
        assert!(!self.names.contains_key(&name), "duplicate parameter name `{name}`");
        self.names.insert(name.clone(), target);
        self.aliases.push((name, target));
        target
    }

    pub fn resolve(&self, name: &str) -> Option<ParamId> {
        self.names.get(name).copied()
    }

    pub fn spec(&self, id: ParamId) -> &ParamSpec {
        &self.specs[id.0]
    }

    pub fn specs(&self) -> &[ParamSpec] {
        &self.specs
    }

    pub fn aliases(&self) -> &[(String, ParamId)] {
        &self.aliases
    }

    /// Number of storage slots (aliases excluded).
    pub fn num_storage(&self) -> usize {
        self.specs.len()
    }

    /// Scalar parameter count over unique storage.
    pub fn count(&self) -> usize {
        self.specs.iter().map(ParamSpec::numel).sum()
    }

    /// Every name (canonical first, then aliases) with its storage id.
    pub fn records(&self) -> impl Iterator<Item = ParameterRecord<'_>> {
        let canonical = self.specs.iter().enumerate().map(|(i, s)| ParameterRecord {
            name: &s.name,
            id: ParamId(i),
            shape: &s.shape,
            shared_with: None,
        });
        let aliased = self.aliases.iter().map(|(name, id)| ParameterRecord {
            name,
            id: *id,
            shape: &self.specs[id.0].shape,
            shared_with: Some(self.specs[id.0].name.as_str()),
        });
        canonical.chain(aliased)
    }
}

/// Materialized parameters over a layout.
#[derive(Clone, Debug)]
pub struct ParamStore<T> {
    layout: Arc<ParamLayout>,
    tensors: Vec<Tensor<T>>,
}

impl<T: Scalar> ParamStore<T> {
    pub fn zeros(layout: ParamLayout) -> Self {
        let tensors = layout.specs.iter().map(|s| Tensor::zeros(&s.shape)).collect();
        Self { layout: Arc::new(layout), tensors }
    }

    pub fn layout(&self) -> &ParamLayout {
        &self.layout
    }

    pub fn get(&self, id: ParamId) -> &Tensor<T> {
        &self.tensors[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor<T> {
        &mut self.tensors[id.0]
    }

    pub fn by_name(&self, name: &str) -> Result<&Tensor<T>> {
        let id = self.id(name)?;
        Ok(&self.tensors[id.0])
    }

    pub fn by_name_mut(&mut self, name: &str) -> Result<&mut Tensor<T>> {
        let id = self.id(name)?;
        Ok(&mut self.tensors[id.0])
    }

    pub fn id(&self, name: &str) -> Result<ParamId> {
        self.layout
            .resolve(name)
            .ok_or_else(|| HwmError::Config(format!("unknown parameter `{name}`")))
    }

    pub fn set(&mut self, id: ParamId, value: Tensor<T>) -> Result<()> {
        if value.shape() != self.layout.specs[id.0].shape.as_slice() {
            return Err(HwmError::dim(
                "param set",
                format!(
                    "`{}` expects {:?}, got {:?}",
                    self.layout.specs[id.0].name,
                    self.layout.specs[id.0].shape,
                    value.shape()
                ),
            ));
        }
        self.tensors[id.0] = value;
        Ok(())
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.tensors.len()).map(ParamId)
    }

    pub fn count(&self) -> usize {
        self.layout.count()
    }

    /// Bytes held by unique parameter storage at this precision.
    pub fn bytes(&self) -> usize {
        self.count() * std::mem::size_of::<T>()
    }

    pub fn cast<U: Scalar>(&self) -> ParamStore<U> {
        ParamStore { layout: Arc::clone(&self.layout), tensors: self.tensors.iter().map(Tensor::cast).collect() }
    }

    /// Zeroes every storage slot whose canonical or alias name matches `pred`.
    pub fn zero_where(&mut self, pred: impl Fn(&str) -> bool) {
        let hits: Vec<ParamId> =
            self.layout.records().filter(|r| pred(r.name)).map(|r| r.id).collect();
        for id in hits {
            let shape = self.tensors[id.0].shape().to_vec();
            self.tensors[id.0] = Tensor::zeros(&shape);
        }
    }
}

/// Gradients keyed by storage slot; shared storage receives the sum over uses.
#[derive(Clone, Debug)]
pub struct ParamGrads<T> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Scalar> ParamGrads<T> {
    pub fn new(slots: usize) -> Self {
        Self { grads: vec![None; slots] }
    }

    pub fn accumulate(&mut self, id: ParamId, grad: Tensor<T>) {
        let slot = &mut self.grads[id.0];
        match slot {
            None => *slot = Some(grad),
            Some(existing) => {
                for (a, b) in existing.data_mut().iter_mut().zip(grad.data()) {
                    *a += *b;
                }
            }
        }
    }

    pub fn get(&self, id: ParamId) -> Option<&Tensor<T>> {
        self.grads.get(id.0).and_then(Option::as_ref)
    }

    pub fn get_mut(&mut self, id: ParamId) -> Option<&mut Tensor<T>> {
        self.grads.get_mut(id.0).and_then(Option::as_mut)
    }

    pub fn slots(&self) -> usize {
        self.grads.len()
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Tensor<T>)> {
        self.grads.iter().enumerate().filter_map(|(i, g)| g.as_ref().map(|g| (ParamId(i), g)))
    }

    pub fn global_norm(&self) -> f64 {
        self.iter()
            .flat_map(|(_, g)| g.data().iter())
            .map(|x| x.as_f64() * x.as_f64())
            .sum::<f64>()
            .sqrt()
    }

    pub fn all_finite(&self) -> bool {
        self.iter().all(|(_, g)| g.is_finite())
    }

    pub fn scale(&mut self, factor: T) {
        for g in self.grads.iter_mut().flatten() {
            for x in g.data_mut() {
                *x *= factor;
            }
        }
    }
}
