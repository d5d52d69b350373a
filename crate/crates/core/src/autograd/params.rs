use rand::Rng;

use super::real::{lit, Real};

/// Handle to one parameter tensor inside a [`ParamStore`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Optimizer group. Grid tables train with a larger learning rate than the
/// networks.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ParamGroup {
    Network,
    Grid,
}

#[derive(Debug, Clone)]
pub struct Param<T> {
    pub name: String,
    pub rows: usize,
    pub cols: usize,
    pub group: ParamGroup,
    pub data: Vec<T>,
}

impl<T> Param<T> {
    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }
}

/// Flat registry of every learnable tensor, addressed by [`ParamId`] and by
/// dotted name (`head.density.0.weight`).
#[derive(Debug, Clone, Default)]
pub struct ParamStore<T> {
    params: Vec<Param<T>>,
}

impl<T: Real> ParamStore<T> {
    pub fn new() -> Self {
        Self { params: Vec::new() }
    }

    pub fn add(
        &mut self,
        name: impl Into<String>,
        rows: usize,
        cols: usize,
        group: ParamGroup,
        data: Vec<T>,
    ) -> ParamId {
        let name = name.into();
        assert_eq!(data.len(), rows * cols, "parameter {name} has wrong length");
        assert!(self.find(&name).is_none(), "duplicate parameter {name}");
        self.params.push(Param { name, rows, cols, group, data });
        ParamId(self.params.len() - 1)
    }

    pub fn add_zeros(
        &mut self,
        name: impl Into<String>,
        rows: usize,
        cols: usize,
        group: ParamGroup,
    ) -> ParamId {
        self.add(name, rows, cols, group, vec![T::zero(); rows * cols])
    }

    pub fn add_uniform<R: Rng>(
        &mut self,
        name: impl Into<String>,
        rows: usize,
        cols: usize,
        group: ParamGroup,
        bound: f64,
        rng: &mut R,
    ) -> ParamId {
        let data = (0..rows * cols)
            .map(|_| lit(rng.random_range(-bound..bound)))
            .collect();
        self.add(name, rows, cols, group, data)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Param<T> {
        &self.params[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Param<T> {
        &mut self.params[id.0]
    }

    pub fn value(&self, id: ParamId) -> &[T] {
        &self.params[id.0].data
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut [T] {
        &mut self.params[id.0].data
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.params.iter().position(|p| p.name == name).map(ParamId)
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> + '_ {
        (0..self.params.len()).map(ParamId)
    }

    /// Ids whose names start with `prefix`.
    pub fn ids_with_prefix<'a>(&'a self, prefix: &'a str) -> impl Iterator<Item = ParamId> + 'a {
        self.params
            .iter()
            .enumerate()
            .filter(move |(_, p)| p.name.starts_with(prefix))
            .map(|(i, _)| ParamId(i))
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Param<T>)> {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    pub fn total_elements(&self) -> usize {
        self.params.iter().map(|p| p.len()).sum()
    }

    /// Same layout, converted scalar type.
    pub fn cast<U: Real>(&self) -> ParamStore<U> {
        ParamStore {
            params: self
                .params
                .iter()
                .map(|p| Param {
                    name: p.name.clone(),
                    rows: p.rows,
                    cols: p.cols,
                    group: p.group,
                    data: p.data.iter().map(|&x| lit(super::real::to_f64(x))).collect(),
                })
                .collect(),
        }
    }
}

/// Gradient accumulators, allocated lazily for parameters the tape touched.
#[derive(Debug, Clone, Default)]
pub struct Grads<T> {
    slots: Vec<Option<Vec<T>>>,
}

impl<T: Real> Grads<T> {
    pub fn new() -> Self {
        Self { slots: Vec::new() }
    }

    pub fn get(&self, id: ParamId) -> Option<&[T]> {
        self.slots.get(id.0).and_then(|s| s.as_deref())
    }

    /// Accumulator for `id`, created zeroed with `len` entries on first use.
    pub fn slot(&mut self, id: ParamId, len: usize) -> &mut Vec<T> {
        if self.slots.len() <= id.0 {
            self.slots.resize_with(id.0 + 1, || None);
        }
        self.slots[id.0].get_or_insert_with(|| vec![T::zero(); len])
    }

    pub fn clear(&mut self) {
        self.slots.clear();
    }

    /// Adds `other` into `self`.
    pub fn merge(&mut self, other: &Grads<T>) {
        for (i, s) in other.slots.iter().enumerate() {
            if let Some(src) = s {
                let dst = self.slot(ParamId(i), src.len());
                for (d, &g) in dst.iter_mut().zip(src) {
                    *d += g;
                }
            }
        }
    }

    pub fn touched(&self) -> impl Iterator<Item = ParamId> + '_ {
        self.slots
            .iter()
            .enumerate()
            .filter(|(_, s)| s.is_some())
            .map(|(i, _)| ParamId(i))
    }
}
