//! Named parameter storage and the per-pass binding of parameters to a tape.

use std::collections::BTreeMap;

use crate::autograd::{Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::rng::fnv1a64;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(usize);

/// Ordered collection of named tensors. Insertion order is the canonical
/// order for checkpoints and optimizer state.
#[derive(Debug, Clone, Default)]
pub struct ParamStore {
    names: Vec<String>,
    tensors: Vec<Tensor>,
    index: BTreeMap<String, usize>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, tensor: Tensor) -> Result<ParamId> {
        let name = name.into();
        if self.index.contains_key(&name) {
            return Err(Error::Contract(format!("duplicate parameter name {name}")));
        }
        self.index.insert(name.clone(), self.tensors.len());
        self.names.push(name);
        self.tensors.push(tensor);
        Ok(ParamId(self.tensors.len() - 1))
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.tensors[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.tensors[id.0]
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).copied().map(ParamId)
    }

    pub fn by_name(&self, name: &str) -> Option<&Tensor> {
        self.id(name).map(|id| self.get(id))
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.tensors.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &str, &Tensor)> {
        self.names
            .iter()
            .zip(&self.tensors)
            .enumerate()
            .map(|(i, (n, t))| (ParamId(i), n.as_str(), t))
    }

    pub fn trainable_scalars(&self) -> usize {
        self.tensors.iter().filter(|t| t.requires_grad()).map(Tensor::len).sum()
    }

    pub fn frozen_scalars(&self) -> usize {
        self.tensors.iter().filter(|t| !t.requires_grad()).map(Tensor::len).sum()
    }

    pub fn total_scalars(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }

    /// Scalars held by parameters whose names start with `prefix`.
    pub fn scalars_with_prefix(&self, prefix: &str) -> usize {
        self.iter()
            .filter(|(_, n, _)| n.starts_with(prefix))
            .map(|(_, _, t)| t.len())
            .sum()
    }

    pub fn set_trainable_prefix(&mut self, prefix: &str, flag: bool) {
        for (name, t) in self.names.iter().zip(self.tensors.iter_mut()) {
            if name.starts_with(prefix) {
                t.set_requires_grad(flag);
            }
        }
    }

    pub fn zero_grads(&mut self) {
        self.tensors.iter_mut().for_each(Tensor::zero_grad);
    }

    /// FNV-1a over the names and little-endian values of every parameter
    /// whose name starts with `prefix` (empty prefix: everything).
    pub fn checksum(&self, prefix: &str) -> u64 {
        let mut bytes = Vec::new();
        for (_, name, t) in self.iter().filter(|(_, n, _)| n.starts_with(prefix)) {
            bytes.extend_from_slice(name.as_bytes());
            for v in t.data() {
                bytes.extend_from_slice(&v.to_le_bytes());
            }
        }
        fnv1a64(&bytes)
    }

    pub fn accumulate(&mut self, grads: ParamGrads) -> Result<()> {
        for (id, g) in grads.0 {
            self.tensors[id.0].accumulate_grad(&g)?;
        }
        Ok(())
    }

    pub(crate) fn tensors_mut(&mut self) -> impl Iterator<Item = &mut Tensor> {
        self.tensors.iter_mut()
    }
}

/// Gradients of one backward pass keyed by parameter.
#[derive(Debug, Default)]
pub struct ParamGrads(pub Vec<(ParamId, Vec<f64>)>);

/// One forward pass: a fresh tape plus lazily bound parameter leaves.
///
/// Each parameter is placed on the tape at most once per pass, so a
/// parameter used by several samples in a batch accumulates all of their
/// gradient contributions.
pub struct ForwardCtx<'s> {
    pub tape: Tape,
    store: &'s ParamStore,
    bound: Vec<Option<Var>>,
}

impl<'s> ForwardCtx<'s> {
    pub fn new(store: &'s ParamStore) -> Self {
        Self {
            tape: Tape::new(),
            store,
            bound: vec![None; store.len()],
        }
    }

    pub fn store(&self) -> &ParamStore {
        self.store
    }

    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(v) = self.bound[id.0] {
            return v;
        }
        let v = self.tape.leaf(self.store.get(id).clone());
        self.bound[id.0] = Some(v);
        v
    }

    pub fn constant(&mut self, t: Tensor) -> Var {
        self.tape.constant(t)
    }

    pub fn backward(&self, loss: Var) -> Result<ParamGrads> {
        let mut grads = self.tape.backward(loss)?;
        let mut out = Vec::new();
        for (i, slot) in self.bound.iter().enumerate() {
            if let Some(v) = slot {
                if let Some(g) = grads.take(*v) {
                    out.push((ParamId(i), g));
                }
            }
        }
        Ok(ParamGrads(out))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn shared_parameter_accumulates_over_uses() {
        let mut store = ParamStore::new();
        let w = store
            .add("w", Tensor::row(&[2.0, -1.0]).with_requires_grad(true))
            .unwrap();
        let frozen = store.add("f", Tensor::row(&[1.0, 1.0])).unwrap();
        let grads = {
            let mut ctx = ForwardCtx::new(&store);
            let a = ctx.param(w);
            let b = ctx.param(w);
            assert_eq!(a, b);
            let f = ctx.param(frozen);
            let p = ctx.tape.mul(a, f).unwrap();
            let s1 = ctx.tape.sum(p);
            let s2 = ctx.tape.sum(b);
            let l = ctx.tape.add(s1, s2).unwrap();
            ctx.backward(l).unwrap()
        };
        store.accumulate(grads).unwrap();
        assert_eq!(store.get(w).grad().unwrap(), &[2.0, 2.0]);
        assert!(store.get(frozen).grad().is_none());
    }

    #[test]
    fn duplicate_names_rejected_and_checksums_cover_prefix() {
        let mut store = ParamStore::new();
        store.add("a.x", Tensor::row(&[1.0])).unwrap();
        store.add("b.x", Tensor::row(&[2.0])).unwrap();
        assert!(store.add("a.x", Tensor::row(&[1.0])).is_err());
        let before = store.checksum("a.");
        store.get_mut(store.id("b.x").unwrap()).data_mut()[0] = 5.0;
        assert_eq!(before, store.checksum("a."));
        assert_ne!(store.checksum(""), {
            let mut s = store.clone();
            s.get_mut(s.id("a.x").unwrap()).data_mut()[0] = 9.0;
            s.checksum("")
        });
    }
}
