//! Learnable parameters and the arena that owns them for one training run.
//!
//! Parameters are referenced by index so graphs, optimizers, and checkpoints
//! can share them without aliasing. Sparse parameters (embedding tables) track
//! which rows received gradient this batch, keeping optimizer updates and
//! gradient clearing O(touched rows).

use std::collections::BTreeSet;

use super::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
pub struct Parameter {
    name: String,
    pub value: Tensor,
    /// Same shape as `value`. For sparse parameters only touched rows are
    /// ever nonzero.
    pub grad: Tensor,
    sparse: bool,
    touched: BTreeSet<usize>,
}

impl Parameter {
    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn is_sparse(&self) -> bool {
        self.sparse
    }

    /// Rows with gradient contributions since the last `zero_grads`.
    pub fn touched_rows(&self) -> impl Iterator<Item = usize> + '_ {
        self.touched.iter().copied()
    }

    pub(crate) fn touch(&mut self, row: usize) {
        if self.sparse {
            self.touched.insert(row);
        }
    }
}

#[derive(Clone, Debug, Default)]
pub struct ParamArena {
    params: Vec<Parameter>,
}

impl ParamArena {
    pub fn new() -> ParamArena {
        ParamArena::default()
    }

    pub fn add_dense(&mut self, name: impl Into<String>, value: Tensor) -> ParamId {
        self.add(name.into(), value, false)
    }

    pub fn add_sparse(&mut self, name: impl Into<String>, value: Tensor) -> ParamId {
        self.add(name.into(), value, true)
    }

    fn add(&mut self, name: String, value: Tensor, sparse: bool) -> ParamId {
        assert!(
            self.params.iter().all(|p| p.name != name),
            "duplicate parameter name {name:?}"
        );
        let grad = Tensor::zeros(value.rows(), value.cols());
        self.params.push(Parameter { name, value, grad, sparse, touched: BTreeSet::new() });
        ParamId(self.params.len() - 1)
    }

    pub fn get(&self, id: ParamId) -> &Parameter {
        &self.params[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Parameter {
        &mut self.params[id.0]
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.params.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Parameter)> {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    /// After this every gradient entry is exactly 0.
    pub fn zero_grads(&mut self) {
        for p in &mut self.params {
            if p.sparse {
                let rows: Vec<usize> = p.touched.iter().copied().collect();
                for r in rows {
                    p.grad.row_mut(r).fill(0.0);
                }
                p.touched.clear();
            } else {
                p.grad.fill(0.0);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn grad_matches_value_shape() {
        let mut arena = ParamArena::new();
        let id = arena.add_dense("w", Tensor::zeros(3, 4));
        assert_eq!(arena.get(id).grad.shape(), (3, 4));
        assert_eq!(arena.get(id).name(), "w");
    }

    #[test]
    #[should_panic(expected = "duplicate parameter name")]
    fn duplicate_names_rejected() {
        let mut arena = ParamArena::new();
        arena.add_dense("w", Tensor::zeros(1, 1));
        arena.add_dense("w", Tensor::zeros(1, 1));
    }

    #[test]
    fn zero_grads_clears_everything() {
        let mut arena = ParamArena::new();
        let d = arena.add_dense("dense", Tensor::zeros(2, 2));
        let s = arena.add_sparse("table", Tensor::zeros(4, 2));

        arena.get_mut(d).grad.fill(1.5);
        arena.get_mut(s).grad.row_mut(2).fill(3.0);
        arena.get_mut(s).touch(2);

        arena.zero_grads();
        assert!(arena.get(d).grad.data().iter().all(|&v| v == 0.0));
        assert!(arena.get(s).grad.data().iter().all(|&v| v == 0.0));
        assert_eq!(arena.get(s).touched_rows().count(), 0);
    }

    #[test]
    fn touched_rows_only_tracked_for_sparse() {
        let mut arena = ParamArena::new();
        let d = arena.add_dense("dense", Tensor::zeros(2, 2));
        arena.get_mut(d).touch(1);
        assert_eq!(arena.get(d).touched_rows().count(), 0);
    }
}
