use std::collections::HashMap;

use rand::Rng;
use rand_distr::{Distribution, Normal};

use super::scalar::Scalar;
use super::tape::{numel, Tape, TensorId};

/// Learning-rate group a parameter belongs to.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ParamGroup {
    Encoder,
    DecoderRenderer,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(pub usize);

#[derive(Clone, Debug)]
pub struct Param<T> {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<T>,
    pub group: ParamGroup,
    pub trainable: bool,
}

/// Flat store of named model parameters. Order is creation order and is the
/// canonical order for optimizer state and checkpoints.
#[derive(Clone, Debug, Default)]
pub struct ParamStore<T> {
    pub entries: Vec<Param<T>>,
}

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        ParamStore { entries: Vec::new() }
    }

    pub fn add(&mut self, name: &str, shape: &[usize], data: Vec<T>, group: ParamGroup) -> ParamId {
        assert_eq!(numel(shape), data.len(), "param {} data/shape mismatch", name);
        assert!(
            self.entries.iter().all(|p| p.name != name),
            "duplicate parameter name {}",
            name
        );
        self.entries.push(Param {
            name: name.to_string(),
            shape: shape.to_vec(),
            data,
            group,
            trainable: true,
        });
        ParamId(self.entries.len() - 1)
    }

    pub fn zeros(&mut self, name: &str, shape: &[usize], group: ParamGroup) -> ParamId {
        let data = vec![T::zero(); numel(shape)];
        self.add(name, shape, data, group)
    }

    pub fn normal<R: Rng>(
        &mut self,
        name: &str,
        shape: &[usize],
        std: f64,
        group: ParamGroup,
        rng: &mut R,
    ) -> ParamId {
        let dist = Normal::new(0.0, std).unwrap();
        let data: Vec<T> = (0..numel(shape)).map(|_| T::from_f64(dist.sample(rng))).collect();
        self.add(name, shape, data, group)
    }

    pub fn get(&self, id: ParamId) -> &Param<T> {
        &self.entries[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Param<T> {
        &mut self.entries[id.0]
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn total_scalars(&self) -> usize {
        self.entries.iter().map(|p| p.data.len()).sum()
    }

    pub fn set_trainable_group(&mut self, group: ParamGroup, trainable: bool) {
        for p in self.entries.iter_mut() {
            if p.group == group {
                p.trainable = trainable;
            }
        }
    }

    /// Precision conversion (f32 <-> f64) for gradient checking.
    pub fn convert<U: Scalar>(&self) -> ParamStore<U> {
        ParamStore {
            entries: self
                .entries
                .iter()
                .map(|p| Param {
                    name: p.name.clone(),
                    shape: p.shape.clone(),
                    data: p.data.iter().map(|&v| U::from_f64(v.to_f64())).collect(),
                    group: p.group,
                    trainable: p.trainable,
                })
                .collect(),
        }
    }
}

/// One forward/backward pass: owns the tape and remembers which tape leaf
/// each parameter was bound to, so gradients can be read back per parameter.
pub struct Session<T: Scalar> {
    pub tape: Tape<T>,
    bound: HashMap<usize, TensorId>,
}

impl<T: Scalar> Session<T> {
    pub fn new() -> Self {
        Session { tape: Tape::new(), bound: HashMap::new() }
    }

    /// Bind a parameter onto the tape as a leaf. Re-binding the same
    /// parameter returns the original leaf, so shared use accumulates
    /// gradients additively.
    pub fn param(&mut self, store: &ParamStore<T>, id: ParamId) -> TensorId {
        if let Some(&t) = self.bound.get(&id.0) {
            return t;
        }
        let p = store.get(id);
        let t = self.tape.leaf(&p.shape, p.data.clone(), p.trainable);
        self.bound.insert(id.0, t);
        t
    }

    /// Gradient of the last backward pass w.r.t. a bound parameter.
    /// Unbound or frozen parameters report zeros.
    pub fn param_grad(&self, store: &ParamStore<T>, id: ParamId) -> Vec<T> {
        match self.bound.get(&id.0) {
            Some(&t) => self.tape.grad(t),
            None => vec![T::zero(); store.get(id).data.len()],
        }
    }
}

impl<T: Scalar> Default for Session<T> {
    fn default() -> Self {
        Self::new()
    }
}
