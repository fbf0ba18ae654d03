use indexmap::IndexMap;

use crate::error::{LabError, Result};
use crate::tensor::Tensor;

/// Named parameters in insertion order, with a parallel gradient map.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    entries: IndexMap<String, Tensor>,
    grads: IndexMap<String, Tensor>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor) -> Result<()> {
        let name = name.into();
        if self.entries.contains_key(&name) {
            return Err(LabError::Invalid(format!(
                "duplicate parameter name {name}"
            )));
        }
        self.grads
            .insert(name.clone(), Tensor::zeros(value.shape()));
        self.entries.insert(name, value);
        Ok(())
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.entries.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.entries.get_mut(name)
    }

    pub fn grad(&self, name: &str) -> Option<&Tensor> {
        self.grads.get(name)
    }

    pub fn contains(&self, name: &str) -> bool {
        self.entries.contains_key(name)
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(String::as_str)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.entries.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Tensor)> {
        self.entries.iter_mut().map(|(k, v)| (k.as_str(), v))
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn num_scalars(&self) -> usize {
        self.entries.values().map(Tensor::len).sum()
    }

    /// Replaces all gradients; names and shapes must match the entries.
    pub fn set_grads(&mut self, grads: IndexMap<String, Tensor>) -> Result<()> {
        for (name, value) in &self.entries {
            match grads.get(name) {
                Some(g) if g.shape() == value.shape() => {}
                Some(g) => {
                    return Err(LabError::Shape {
                        op: "set_grads",
                        lhs: value.shape().to_vec(),
                        rhs: g.shape().to_vec(),
                    })
                }
                None => return Err(LabError::Invalid(format!("missing gradient for {name}"))),
            }
        }
        self.grads = self
            .entries
            .keys()
            .map(|k| (k.clone(), grads[k].clone()))
            .collect();
        Ok(())
    }

    pub fn grads(&self) -> &IndexMap<String, Tensor> {
        &self.grads
    }

    pub fn zero_grads(&mut self) {
        for g in self.grads.values_mut() {
            g.data_mut().fill(0.0);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn insertion_order_and_grad_shapes() {
        let mut p = ParamStore::new();
        p.insert("b", Tensor::zeros(&[2, 3])).unwrap();
        p.insert("a", Tensor::zeros(&[4])).unwrap();
        assert_eq!(p.names().collect::<Vec<_>>(), vec!["b", "a"]);
        assert_eq!(p.grad("b").unwrap().shape(), &[2, 3]);
        assert!(p.insert("a", Tensor::zeros(&[1])).is_err());
    }
}
