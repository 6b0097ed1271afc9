use std::cell::RefCell;
use std::collections::{BTreeMap, HashMap};
use std::path::Path;
use std::sync::Arc;

use safetensors::tensor::{Dtype as StDtype, SafeTensors, TensorView};
use sha2::{Digest, Sha256};

use crate::error::{Result, TensorError};
use crate::graph::{Grads, Graph, Var};
use crate::scalar::{DType, Scalar};
use crate::tensor::Tensor;

/// Named parameter tensors of one network.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore<T> {
    params: BTreeMap<String, Arc<Tensor<T>>>,
}

fn st_dtype(d: DType) -> StDtype {
    match d {
        DType::F32 => StDtype::F32,
        DType::F64 => StDtype::F64,
    }
}

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        Self { params: BTreeMap::new() }
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor<T>) {
        self.params.insert(name.into(), Arc::new(value));
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<T>> {
        self.params.get(name).map(|a| &**a)
    }

    pub fn get_shared(&self, name: &str) -> Option<Arc<Tensor<T>>> {
        self.params.get(name).cloned()
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor<T>> {
        self.params.get_mut(name).map(Arc::make_mut)
    }

    pub fn contains(&self, name: &str) -> bool {
        self.params.contains_key(name)
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.params.keys().map(String::as_str)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<T>)> {
        self.params.iter().map(|(k, v)| (k.as_str(), &**v))
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn num_elements(&self) -> usize {
        self.params.values().map(|t| t.len()).sum()
    }

    /// Adds all of `other`'s parameters, replacing same-named ones.
    pub fn merge(&mut self, other: ParamStore<T>) {
        self.params.extend(other.params);
    }

    /// Parameters whose names start with `prefix`.
    pub fn subset(&self, prefix: &str) -> ParamStore<T> {
        Self {
            params: self
                .params
                .iter()
                .filter(|(k, _)| k.starts_with(prefix))
                .map(|(k, v)| (k.clone(), v.clone()))
                .collect(),
        }
    }

    pub fn cast<U: Scalar>(&self) -> ParamStore<U> {
        ParamStore { params: self.params.iter().map(|(k, v)| (k.clone(), Arc::new(v.cast::<U>()))).collect() }
    }

    /// SHA-256 over names, shapes and little-endian values.
    pub fn checksum(&self) -> String {
        let mut h = Sha256::new();
        let mut buf = Vec::new();
        for (name, t) in &self.params {
            h.update(name.as_bytes());
            for &d in t.shape() {
                h.update((d as u64).to_le_bytes());
            }
            buf.clear();
            for &v in t.data() {
                v.write_le(&mut buf);
            }
            h.update(&buf);
        }
        hex::encode(h.finalize())
    }

    /// `self = decay * self + (1 - decay) * other`, parameter by parameter.
    pub fn ema_update(&mut self, other: &ParamStore<T>, decay: f64) {
        let d = T::lit(decay);
        let e = T::one() - d;
        for (name, v) in self.params.iter_mut() {
            if let Some(o) = other.params.get(name) {
                let t = Arc::make_mut(v);
                for (a, &b) in t.data_mut().iter_mut().zip(o.data()) {
                    *a = d * *a + e * b;
                }
            }
        }
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let bufs: Vec<(String, Vec<usize>, Vec<u8>)> = self
            .params
            .iter()
            .map(|(k, t)| {
                let mut b = Vec::with_capacity(t.len() * std::mem::size_of::<T>());
                for &v in t.data() {
                    v.write_le(&mut b);
                }
                (k.clone(), t.shape().to_vec(), b)
            })
            .collect();
        let views = bufs
            .iter()
            .map(|(k, s, b)| {
                TensorView::new(st_dtype(T::DTYPE), s.clone(), b)
                    .map(|v| (k.clone(), v))
                    .map_err(|e| TensorError::Format(e.to_string()))
            })
            .collect::<Result<Vec<_>>>()?;
        safetensors::tensor::serialize(views, &None).map_err(|e| TensorError::Format(e.to_string()))
    }

    /// Reads a store written by [`ParamStore::to_bytes`] with either element
    /// type, converting to `T`.
    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let st = SafeTensors::deserialize(bytes).map_err(|e| TensorError::Format(e.to_string()))?;
        let mut params = BTreeMap::new();
        for (name, view) in st.tensors() {
            let data: Vec<T> = match view.dtype() {
                StDtype::F32 => view.data().chunks_exact(4).map(|c| T::lit(f32::read_le(c) as f64)).collect(),
                StDtype::F64 => view.data().chunks_exact(8).map(|c| T::lit(f64::read_le(c))).collect(),
                other => return Err(TensorError::Format(format!("unsupported dtype {other:?} for `{name}`"))),
            };
            params.insert(name, Arc::new(Tensor::from_vec(view.shape(), data)?));
        }
        Ok(Self { params })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }

    /// Checks that `self` has exactly the names and shapes of `reference`.
    pub fn check_layout(&self, reference: &ParamStore<T>) -> Result<()> {
        for (name, t) in &reference.params {
            match self.params.get(name) {
                None => return Err(TensorError::MissingParam(name.clone())),
                Some(v) if v.shape() != t.shape() => {
                    return Err(TensorError::Shape(format!(
                        "`{name}`: stored {:?}, expected {:?}",
                        v.shape(),
                        t.shape()
                    )))
                }
                _ => {}
            }
        }
        if let Some(extra) = self.params.keys().find(|k| !reference.params.contains_key(*k)) {
            return Err(TensorError::Format(format!("unexpected parameter `{extra}`")));
        }
        Ok(())
    }
}

/// A [`ParamStore`] attached to a [`Graph`]; parameters become leaves on first use.
pub struct Bound<'g, 's, T: Scalar> {
    graph: &'g Graph<T>,
    store: &'s ParamStore<T>,
    trainable: bool,
    cache: RefCell<HashMap<String, Var<'g, T>>>,
}

impl<'g, 's, T: Scalar> Bound<'g, 's, T> {
    pub fn new(graph: &'g Graph<T>, store: &'s ParamStore<T>, trainable: bool) -> Self {
        Self { graph, store, trainable, cache: RefCell::new(HashMap::new()) }
    }

    pub fn graph(&self) -> &'g Graph<T> {
        self.graph
    }

    pub fn is_trainable(&self) -> bool {
        self.trainable
    }

    /// Leaf for parameter `name`. Panics when the store lacks it, which is a
    /// wiring error between a network and its own initializer.
    pub fn get(&self, name: &str) -> Var<'g, T> {
        if let Some(v) = self.cache.borrow().get(name) {
            return *v;
        }
        let value = self.store.get_shared(name).unwrap_or_else(|| panic!("parameter `{name}` not in store"));
        let v = if self.trainable { self.graph.param_shared(value) } else { self.graph.constant_shared(value) };
        self.cache.borrow_mut().insert(name.to_string(), v);
        v
    }

    /// Gradients for every parameter used on the graph, by name.
    pub fn grads(&self, grads: &mut Grads<T>) -> BTreeMap<String, Tensor<T>> {
        let mut out = BTreeMap::new();
        for (name, v) in self.cache.borrow().iter() {
            if let Some(g) = grads.take(*v) {
                out.insert(name.clone(), g);
            }
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn bytes_round_trip_and_cast() {
        let mut s = ParamStore::<f32>::new();
        s.insert("a.w", Tensor::from_vec(&[2, 2], vec![1.0, -2.5, 3.25, 0.0]).unwrap());
        s.insert("b", Tensor::scalar(7.0));
        let back = ParamStore::<f32>::from_bytes(&s.to_bytes().unwrap()).unwrap();
        assert_eq!(back, s);
        assert_eq!(back.checksum(), s.checksum());
        let wide = ParamStore::<f64>::from_bytes(&s.to_bytes().unwrap()).unwrap();
        assert_eq!(wide.get("a.w").unwrap().data(), &[1.0, -2.5, 3.25, 0.0]);
        assert!(back.check_layout(&s).is_ok());
    }

    #[test]
    fn checksum_sees_single_value_change() {
        let mut s = ParamStore::<f64>::new();
        s.insert("w", Tensor::zeros(&[3]));
        let before = s.checksum();
        s.get_mut("w").unwrap().data_mut()[1] = 1e-12;
        assert_ne!(before, s.checksum());
    }
}
