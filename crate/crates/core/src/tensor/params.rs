use std::collections::{BTreeSet, HashMap};

use super::{Float, Tensor};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// A named tensor with an optional gradient slot.
///
/// Frozen parameters (`trainable == false`) never receive a gradient and are
/// never touched by the optimizer.
#[derive(Clone, Debug)]
pub struct Parameter<T = f32> {
    pub name: String,
    pub group: String,
    pub value: Tensor<T>,
    pub grad: Option<Tensor<T>>,
    pub trainable: bool,
}

/// Group selector: an exact id such as `da:medical`, or a prefix wildcard
/// such as `la:*`.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct GroupPattern(String);

impl GroupPattern {
    pub fn new(pattern: impl Into<String>) -> Self {
        GroupPattern(pattern.into())
    }

    pub fn matches(&self, group: &str) -> bool {
        match self.0.strip_suffix('*') {
            Some(prefix) => group.starts_with(prefix),
            None => self.0 == group,
        }
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }
}

impl From<&str> for GroupPattern {
    fn from(s: &str) -> Self {
        GroupPattern::new(s)
    }
}

#[derive(Clone, Debug, Default)]
pub struct ParamStore<T = f32> {
    params: Vec<Parameter<T>>,
    by_name: HashMap<String, ParamId>,
}

impl<T: Float> ParamStore<T> {
    pub fn new() -> Self {
        ParamStore {
            params: Vec::new(),
            by_name: HashMap::new(),
        }
    }

    pub fn add(&mut self, name: impl Into<String>, group: impl Into<String>, value: Tensor<T>) -> ParamId {
        let name = name.into();
        assert!(
            !self.by_name.contains_key(&name),
            "duplicate parameter name {name}"
        );
        let id = ParamId(self.params.len());
        self.by_name.insert(name.clone(), id);
        self.params.push(Parameter {
            name,
            group: group.into(),
            value,
            grad: None,
            trainable: true,
        });
        id
    }

    pub fn get(&self, id: ParamId) -> &Parameter<T> {
        &self.params[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Parameter<T> {
        &mut self.params[id.0]
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.by_name.get(name).copied()
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Parameter<T>)> {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (ParamId, &mut Parameter<T>)> {
        self.params.iter_mut().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    pub fn groups(&self) -> BTreeSet<String> {
        self.params.iter().map(|p| p.group.clone()).collect()
    }

    fn check_patterns<'a>(&self, patterns: impl IntoIterator<Item = &'a GroupPattern>) -> Result<()> {
        let groups = self.groups();
        for pat in patterns {
            if !groups.iter().any(|g| pat.matches(g)) {
                return Err(Error::UnknownGroup(pat.as_str().to_string()));
            }
        }
        Ok(())
    }

    /// Makes exactly the matched groups trainable; everything else is frozen.
    pub fn set_trainable(&mut self, trainable: &[GroupPattern]) -> Result<()> {
        self.check_patterns(trainable)?;
        for p in &mut self.params {
            p.trainable = trainable.iter().any(|pat| pat.matches(&p.group));
            if !p.trainable {
                p.grad = None;
            }
        }
        Ok(())
    }

    /// Exact number of scalars in the matched groups.
    pub fn count(&self, groups: &[GroupPattern]) -> Result<usize> {
        if groups.is_empty() {
            return Err(Error::Config("parameter count needs at least one group".into()));
        }
        self.check_patterns(groups)?;
        Ok(self
            .params
            .iter()
            .filter(|p| groups.iter().any(|pat| pat.matches(&p.group)))
            .map(|p| p.value.numel())
            .sum())
    }

    pub fn trainable_count(&self) -> usize {
        self.params
            .iter()
            .filter(|p| p.trainable)
            .map(|p| p.value.numel())
            .sum()
    }

    pub fn zero_grads(&mut self) {
        for p in &mut self.params {
            p.grad = None;
        }
    }

    pub fn cast<U: Float>(&self) -> ParamStore<U> {
        ParamStore {
            params: self
                .params
                .iter()
                .map(|p| Parameter {
                    name: p.name.clone(),
                    group: p.group.clone(),
                    value: p.value.cast(),
                    grad: p.grad.as_ref().map(Tensor::cast),
                    trainable: p.trainable,
                })
                .collect(),
            by_name: self.by_name.clone(),
        }
    }

    /// Snapshot of every value in the matched groups, keyed by name.
    pub fn snapshot(&self, groups: &[GroupPattern]) -> Vec<(String, Tensor<T>)> {
        self.params
            .iter()
            .filter(|p| groups.iter().any(|pat| pat.matches(&p.group)))
            .map(|p| (p.name.clone(), p.value.clone()))
            .collect()
    }
}
