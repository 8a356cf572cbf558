use std::cell::RefCell;
use std::collections::HashMap;

use ndarray::ArrayD;

use super::tape::{Tape, Var};

/// Index of a parameter array inside its model's [`ParamStore`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ParamId(pub usize);

/// Flat registry of a model's trainable arrays. Layers hold [`ParamId`]s;
/// the optimizer and the checkpoint codec address parameters by index.
#[derive(Debug, Clone, Default)]
pub struct ParamStore {
    arrays: Vec<ArrayD<f32>>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, a: ArrayD<f32>) -> ParamId {
        self.arrays.push(a);
        ParamId(self.arrays.len() - 1)
    }

    pub fn get(&self, id: ParamId) -> &ArrayD<f32> {
        &self.arrays[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut ArrayD<f32> {
        &mut self.arrays[id.0]
    }

    pub fn len(&self) -> usize {
        self.arrays.len()
    }

    pub fn is_empty(&self) -> bool {
        self.arrays.is_empty()
    }

    pub fn arrays(&self) -> &[ArrayD<f32>] {
        &self.arrays
    }

    pub fn arrays_mut(&mut self) -> &mut [ArrayD<f32>] {
        &mut self.arrays
    }

    /// Total number of scalar parameters.
    pub fn num_scalars(&self) -> usize {
        self.arrays.iter().map(|a| a.len()).sum()
    }
}

/// Lazily interns a store's parameters onto a tape for one evaluation.
/// The binding decides whether the run treats them as trainable leaves
/// (their gradients are later collected) or as frozen constants.
pub struct TapeBinding<'s> {
    store: &'s ParamStore,
    map: RefCell<HashMap<usize, Var>>,
}

impl<'s> TapeBinding<'s> {
    pub fn new(store: &'s ParamStore) -> Self {
        Self { store, map: RefCell::new(HashMap::new()) }
    }

    pub fn var(&self, tape: &mut Tape, id: ParamId) -> Var {
        if let Some(&v) = self.map.borrow().get(&id.0) {
            return v;
        }
        let v = tape.leaf(self.store.get(id).clone());
        self.map.borrow_mut().insert(id.0, v);
        v
    }

    /// (param, tape var) pairs touched during the evaluation.
    pub fn bound(&self) -> Vec<(ParamId, Var)> {
        let mut v: Vec<(ParamId, Var)> =
            self.map.borrow().iter().map(|(&k, &var)| (ParamId(k), var)).collect();
        v.sort_by_key(|(id, _)| id.0);
        v
    }
}
