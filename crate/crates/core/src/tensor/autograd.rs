//! Reverse-mode differentiation over recorded graphs.

use std::collections::{BTreeMap, HashMap, HashSet};

use super::{kernels, Element, Tensor};
use crate::error::{Error, Result};

/// Gradient of one named parameter.
#[derive(Debug, Clone, PartialEq)]
pub struct GradEntry<T> {
    pub shape: Vec<usize>,
    pub data: Vec<T>,
}

/// Gradients keyed by parameter name. Absent entries mean zero gradient.
#[derive(Debug, Default)]
pub struct GradientTable<T> {
    entries: BTreeMap<String, GradEntry<T>>,
}

impl<T: Element> GradientTable<T> {
    pub fn get(&self, name: &str) -> Option<&GradEntry<T>> {
        self.entries.get(name)
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &GradEntry<T>)> {
        self.entries.iter()
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.entries.keys()
    }
}

/// Tensors reachable from `root`, children before parents.
pub(crate) fn topo_order<T: Element>(root: &Tensor<T>) -> Vec<Tensor<T>> {
    let mut visited: HashSet<u64> = HashSet::new();
    let mut order: Vec<Tensor<T>> = Vec::new();
    let mut stack: Vec<(Tensor<T>, usize)> = vec![(root.clone(), 0)];
    visited.insert(root.id());
    while let Some((t, child)) = stack.pop() {
        let parents = &t.node().parents;
        if child < parents.len() {
            let p = parents[child].clone();
            stack.push((t, child + 1));
            if visited.insert(p.id()) {
                stack.push((p, 0));
            }
        } else {
            order.push(t);
        }
    }
    order.reverse();
    order
}

/// Backpropagates from a scalar loss, returning gradients for every
/// reachable named parameter with `requires_grad`. Contributions from
/// multiple uses of the same tensor accumulate additively.
pub fn backward<T: Element>(loss: &Tensor<T>) -> Result<GradientTable<T>> {
    if loss.len() != 1 {
        return Err(Error::Contract(format!(
            "backward requires a scalar loss, got shape {:?}",
            loss.shape()
        )));
    }
    let mut table: BTreeMap<String, GradEntry<T>> = BTreeMap::new();
    let order = topo_order(loss);
    let mut grads: HashMap<u64, Vec<T>> = HashMap::new();
    grads.insert(loss.id(), vec![T::ONE]);

    for t in &order {
        let Some(g) = grads.remove(&t.id()) else { continue };
        let node = t.node();
        if node.requires_grad {
            if let Some(name) = node.name.as_deref() {
                let entry = table.entry(name.to_string()).or_insert_with(|| GradEntry {
                    shape: node.shape.clone(),
                    data: vec![T::ZERO; node.data.len()],
                });
                for (acc, gv) in entry.data.iter_mut().zip(&g) {
                    *acc += *gv;
                }
            }
        }
        if node.grad_fn.is_none() {
            continue;
        }
        let parent_grads = kernels::backward_node(node, &g);
        for (p, pg) in node.parents.iter().zip(parent_grads) {
            let Some(pg) = pg else { continue };
            match grads.entry(p.id()) {
                std::collections::hash_map::Entry::Occupied(mut e) => {
                    for (acc, gv) in e.get_mut().iter_mut().zip(&pg) {
                        *acc += *gv;
                    }
                }
                std::collections::hash_map::Entry::Vacant(e) => {
                    e.insert(pg);
                }
            }
        }
    }
    Ok(GradientTable { entries: table })
}

impl<T: Element> Tensor<T> {
    /// See [`backward`].
    pub fn backward(&self) -> Result<GradientTable<T>> {
        backward(self)
    }
}
