use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::tensor::Tensor;
use crate::error::{PctError, Result};

/// How a parameter tensor is initialized.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Init {
    /// Uniform in `[-sqrt(6 / (fan_in + fan_out)), +sqrt(6 / (fan_in + fan_out))]`.
    Xavier { fan_in: usize, fan_out: usize },
    Zeros,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ParamSpec {
    pub name: String,
    pub rows: usize,
    pub cols: usize,
    pub init: Init,
}

/// Named parameter tensors, iterated in sorted-name order.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ParamStore {
    names: Vec<String>,
    tensors: Vec<Tensor>,
    index: BTreeMap<String, usize>,
}

impl ParamStore {
    pub fn from_map(map: BTreeMap<String, Tensor>) -> Self {
        let mut store = ParamStore::default();
        for (i, (name, t)) in map.into_iter().enumerate() {
            store.index.insert(name.clone(), i);
            store.names.push(name);
            store.tensors.push(t);
        }
        store
    }

    /// Seeded initialization; tensors are drawn in sorted-name order.
    pub fn initialize(specs: &[ParamSpec], seed: u64) -> Result<Self> {
        let mut sorted: BTreeMap<&str, &ParamSpec> = BTreeMap::new();
        for s in specs {
            if sorted.insert(&s.name, s).is_some() {
                return Err(PctError::Config(format!("duplicate parameter name `{}`", s.name)));
            }
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut map = BTreeMap::new();
        for (name, spec) in sorted {
            let t = match spec.init {
                Init::Zeros => Tensor::zeros(spec.rows, spec.cols),
                Init::Xavier { fan_in, fan_out } => {
                    let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
                    let data = (0..spec.rows * spec.cols)
                        .map(|_| rng.gen_range(-bound..=bound))
                        .collect();
                    Tensor::from_vec(spec.rows, spec.cols, data)
                }
            };
            map.insert(name.to_string(), t);
        }
        Ok(ParamStore::from_map(map))
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn id(&self, name: &str) -> Option<usize> {
        self.index.get(name).copied()
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.id(name).map(|i| &self.tensors[i])
    }

    /// Looks up a tensor and checks its shape.
    pub fn expect(&self, name: &str, rows: usize, cols: usize) -> Result<usize> {
        let id = self
            .id(name)
            .ok_or_else(|| PctError::Lookup(format!("parameter `{name}` not found")))?;
        let shape = self.tensors[id].shape();
        if shape != (rows, cols) {
            return Err(PctError::dim(name, format!("{rows}x{cols}"), format!("{}x{}", shape.0, shape.1)));
        }
        Ok(id)
    }

    #[inline]
    pub fn tensor(&self, id: usize) -> &Tensor {
        &self.tensors[id]
    }

    #[inline]
    pub fn tensor_mut(&mut self, id: usize) -> &mut Tensor {
        &mut self.tensors[id]
    }

    pub fn name(&self, id: usize) -> &str {
        &self.names[id]
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.names.iter().map(String::as_str).zip(&self.tensors)
    }

    pub fn scalar_count(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }

    pub fn zeros_like(&self) -> Grads {
        Grads {
            tensors: self.tensors.iter().map(|t| Tensor::zeros(t.rows(), t.cols())).collect(),
        }
    }
}

/// Gradients aligned with a [`ParamStore`] by id.
#[derive(Debug, Clone, PartialEq)]
pub struct Grads {
    pub tensors: Vec<Tensor>,
}

impl Grads {
    pub fn add_assign(&mut self, other: &Grads) {
        for (a, b) in self.tensors.iter_mut().zip(&other.tensors) {
            a.add_assign(b);
        }
    }

    pub fn scale(&mut self, s: f64) {
        for t in &mut self.tensors {
            t.scale_in_place(s);
        }
    }

    pub fn get(&self, id: usize) -> &Tensor {
        &self.tensors[id]
    }

    pub fn max_abs(&self) -> f64 {
        self.tensors.iter().fold(0.0, |m, t| m.max(t.max_abs()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn xavier_bounds_and_sorted_order() {
        let specs = vec![
            ParamSpec { name: "z.w".into(), rows: 8, cols: 4, init: Init::Xavier { fan_in: 8, fan_out: 4 } },
            ParamSpec { name: "a.b".into(), rows: 1, cols: 4, init: Init::Zeros },
        ];
        let store = ParamStore::initialize(&specs, 1).unwrap();
        let names: Vec<&str> = store.iter().map(|(n, _)| n).collect();
        assert_eq!(names, vec!["a.b", "z.w"]);
        let bound = (6.0f64 / 12.0).sqrt();
        assert!(store.get("z.w").unwrap().data().iter().all(|v| v.abs() <= bound));
        assert!(store.get("a.b").unwrap().data().iter().all(|&v| v == 0.0));
        assert_eq!(store, ParamStore::initialize(&specs, 1).unwrap());
        assert_ne!(store, ParamStore::initialize(&specs, 2).unwrap());
    }

    #[test]
    fn expect_reports_shape() {
        let specs = vec![ParamSpec { name: "w".into(), rows: 2, cols: 3, init: Init::Zeros }];
        let store = ParamStore::initialize(&specs, 0).unwrap();
        assert!(store.expect("w", 2, 3).is_ok());
        match store.expect("w", 3, 2).unwrap_err() {
            PctError::Dimension { name, .. } => assert_eq!(name, "w"),
            e => panic!("{e:?}"),
        }
        assert!(matches!(store.expect("nope", 1, 1), Err(PctError::Lookup(_))));
    }
}
