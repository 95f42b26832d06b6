//! Named parameter store and Adam, with exact (bit-preserving) checkpoint
//! serialization.

use base64::Engine;
use ndarray::{ArrayD, IxDyn};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::tape::{Tape, TensorId};

pub type ParamId = usize;

/// Flat list of named tensors; module definitions hold ParamIds into it.
#[derive(Default, Clone)]
pub struct ParamStore {
    names: Vec<String>,
    values: Vec<ArrayD<f64>>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn add(&mut self, name: impl Into<String>, value: ArrayD<f64>) -> ParamId {
        self.names.push(name.into());
        self.values.push(value);
        self.values.len() - 1
    }

    /// Kaiming-style uniform init scaled by fan-in.
    pub fn add_conv(
        &mut self,
        name: &str,
        shape: (usize, usize, usize, usize),
        rng: &mut ChaCha8Rng,
    ) -> (ParamId, ParamId) {
        let (f, c, kh, kw) = shape;
        let bound = (1.0 / (c * kh * kw) as f64).sqrt();
        let w = ArrayD::from_shape_fn(IxDyn(&[f, c, kh, kw]), |_| {
            rng.gen_range(-bound..bound)
        });
        let b = ArrayD::zeros(IxDyn(&[f]));
        (
            self.add(format!("{name}.w"), w),
            self.add(format!("{name}.b"), b),
        )
    }

    /// Zero-filled conv weights (identity-style initialization).
    pub fn add_conv_zero(
        &mut self,
        name: &str,
        shape: (usize, usize, usize, usize),
    ) -> (ParamId, ParamId) {
        let (f, c, kh, kw) = shape;
        let w = ArrayD::zeros(IxDyn(&[f, c, kh, kw]));
        let b = ArrayD::zeros(IxDyn(&[f]));
        (
            self.add(format!("{name}.w"), w),
            self.add(format!("{name}.b"), b),
        )
    }

    pub fn add_norm(&mut self, name: &str, channels: usize) -> (ParamId, ParamId) {
        let gamma = ArrayD::ones(IxDyn(&[channels]));
        let beta = ArrayD::zeros(IxDyn(&[channels]));
        (
            self.add(format!("{name}.gamma"), gamma),
            self.add(format!("{name}.beta"), beta),
        )
    }

    pub fn value(&self, id: ParamId) -> &ArrayD<f64> {
        &self.values[id]
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut ArrayD<f64> {
        &mut self.values[id]
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id]
    }

    /// Insert every parameter as a gradient-tracking leaf, in store order.
    /// The returned vector maps ParamId -> TensorId.
    pub fn leaves(&self, tape: &mut Tape) -> Vec<TensorId> {
        self.values
            .iter()
            .map(|v| tape.leaf(v.clone(), true))
            .collect()
    }

    /// Like [`ParamStore::leaves`] but frozen (no gradients collected).
    pub fn leaves_frozen(&self, tape: &mut Tape) -> Vec<TensorId> {
        self.values
            .iter()
            .map(|v| tape.leaf(v.clone(), false))
            .collect()
    }

    pub fn total_len(&self) -> usize {
        self.values.iter().map(|v| v.len()).sum()
    }
}

/// Serialized tensor: shape plus base64 little-endian f64 bytes, exact.
#[derive(Serialize, Deserialize)]
pub struct TensorBlob {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: String,
}

pub fn tensor_to_blob(name: &str, t: &ArrayD<f64>) -> TensorBlob {
    let mut bytes = Vec::with_capacity(t.len() * 8);
    for v in t.iter() {
        bytes.extend_from_slice(&v.to_le_bytes());
    }
    TensorBlob {
        name: name.to_string(),
        shape: t.shape().to_vec(),
        data: base64::engine::general_purpose::STANDARD.encode(&bytes),
    }
}

pub fn blob_to_tensor(blob: &TensorBlob) -> Result<ArrayD<f64>> {
    let bytes = base64::engine::general_purpose::STANDARD
        .decode(&blob.data)
        .map_err(|e| Error::Checkpoint(format!("bad tensor data for {}: {e}", blob.name)))?;
    if bytes.len() % 8 != 0 {
        return Err(Error::Checkpoint(format!(
            "tensor {} byte length {} not a multiple of 8",
            blob.name,
            bytes.len()
        )));
    }
    let vals: Vec<f64> = bytes
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect();
    ArrayD::from_shape_vec(IxDyn(&blob.shape), vals)
        .map_err(|e| Error::Checkpoint(format!("tensor {} shape error: {e}", blob.name)))
}

impl ParamStore {
    pub fn to_blobs(&self) -> Vec<TensorBlob> {
        self.names
            .iter()
            .zip(&self.values)
            .map(|(n, v)| tensor_to_blob(n, v))
            .collect()
    }

    pub fn load_blobs(&mut self, blobs: &[TensorBlob]) -> Result<()> {
        if blobs.len() != self.values.len() {
            return Err(Error::Checkpoint(format!(
                "checkpoint has {} tensors, model expects {}",
                blobs.len(),
                self.values.len()
            )));
        }
        for (i, blob) in blobs.iter().enumerate() {
            if blob.name != self.names[i] {
                return Err(Error::Checkpoint(format!(
                    "tensor {} name mismatch: {} vs {}",
                    i, blob.name, self.names[i]
                )));
            }
            let t = blob_to_tensor(blob)?;
            if t.shape() != self.values[i].shape() {
                return Err(Error::Checkpoint(format!(
                    "tensor {} shape mismatch: {:?} vs {:?}",
                    blob.name,
                    t.shape(),
                    self.values[i].shape()
                )));
            }
            self.values[i] = t;
        }
        Ok(())
    }
}

/// Adam over a subset of a [`ParamStore`].
#[derive(Clone)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    m: Vec<ArrayD<f64>>,
    v: Vec<ArrayD<f64>>,
    t: u64,
    param_ids: Vec<ParamId>,
}

impl Adam {
    pub fn new(store: &ParamStore, param_ids: Vec<ParamId>, lr: f64) -> Self {
        let m = param_ids
            .iter()
            .map(|&id| ArrayD::zeros(store.value(id).raw_dim()))
            .collect();
        let v = param_ids
            .iter()
            .map(|&id| ArrayD::zeros(store.value(id).raw_dim()))
            .collect();
        Adam {
            lr,
            beta1: 0.5,
            beta2: 0.999,
            eps: 1e-8,
            m,
            v,
            t: 0,
            param_ids,
        }
    }

    pub fn param_ids(&self) -> &[ParamId] {
        &self.param_ids
    }

    /// One update from gradients indexed by tape leaves (ParamId -> leaf).
    pub fn step(
        &mut self,
        store: &mut ParamStore,
        leaves: &[TensorId],
        grads: &[Option<ArrayD<f64>>],
    ) {
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        for (k, &pid) in self.param_ids.iter().enumerate() {
            let Some(g) = grads[leaves[pid]].as_ref() else {
                continue;
            };
            let m = &mut self.m[k];
            let v = &mut self.v[k];
            ndarray::Zip::from(&mut *m).and(g).for_each(|mi, &gi| {
                *mi = self.beta1 * *mi + (1.0 - self.beta1) * gi;
            });
            ndarray::Zip::from(&mut *v).and(g).for_each(|vi, &gi| {
                *vi = self.beta2 * *vi + (1.0 - self.beta2) * gi * gi;
            });
            let p = store.value_mut(pid);
            ndarray::Zip::from(p).and(&*m).and(&*v).for_each(|pi, &mi, &vi| {
                let mhat = mi / bc1;
                let vhat = vi / bc2;
                *pi -= self.lr * mhat / (vhat.sqrt() + self.eps);
            });
        }
    }

    /// Optimizer state for checkpointing.
    pub fn state_blobs(&self) -> (u64, Vec<TensorBlob>) {
        let mut blobs = Vec::new();
        for (k, id) in self.param_ids.iter().enumerate() {
            blobs.push(tensor_to_blob(&format!("m.{id}"), &self.m[k]));
            blobs.push(tensor_to_blob(&format!("v.{id}"), &self.v[k]));
        }
        (self.t, blobs)
    }

    pub fn load_state(&mut self, t: u64, blobs: &[TensorBlob]) -> Result<()> {
        if blobs.len() != 2 * self.param_ids.len() {
            return Err(Error::Checkpoint(format!(
                "optimizer state has {} tensors, expected {}",
                blobs.len(),
                2 * self.param_ids.len()
            )));
        }
        for (k, _) in self.param_ids.iter().enumerate() {
            self.m[k] = blob_to_tensor(&blobs[2 * k])?;
            self.v[k] = blob_to_tensor(&blobs[2 * k + 1])?;
        }
        self.t = t;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    #[test]
    fn adam_minimizes_quadratic() {
        let mut store = ParamStore::new();
        let x = store.add("x", ArrayD::from_elem(IxDyn(&[2]), 3.0));
        let mut adam = Adam::new(&store, vec![x], 0.1);
        for _ in 0..400 {
            let mut tape = Tape::new();
            let leaves = store.leaves(&mut tape);
            let xt = leaves[x];
            let sq = tape.mul(xt, xt);
            let loss = tape.mean_all(sq);
            let grads = tape.backward(loss);
            adam.step(&mut store, &leaves, &grads);
        }
        for &v in store.value(x).iter() {
            assert!(v.abs() < 1e-2, "did not converge: {v}");
        }
    }

    #[test]
    fn tensor_blob_round_trip_is_exact() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let t = ArrayD::from_shape_fn(IxDyn(&[3, 4]), |_| rng.gen_range(-10.0..10.0));
        let blob = tensor_to_blob("t", &t);
        let back = blob_to_tensor(&blob).unwrap();
        assert_eq!(t, back);
        // Bit-exactness, not approximate equality.
        for (a, b) in t.iter().zip(back.iter()) {
            assert_eq!(a.to_bits(), b.to_bits());
        }
    }

    #[test]
    fn param_store_leaf_ordering() {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let (w, b) = store.add_conv("c1", (2, 3, 3, 3), &mut rng);
        let (g, be) = store.add_norm("n1", 2);
        assert_eq!((w, b, g, be), (0, 1, 2, 3));
        assert_eq!(store.name(2), "n1.gamma");
        let mut tape = Tape::new();
        let leaves = store.leaves(&mut tape);
        assert_eq!(leaves.len(), 4);
    }
}
