//! Named parameter storage, initialisation, AdamW and checkpoint files.

use std::collections::HashMap;
use std::io::{Read, Write};

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand::SeedableRng;

use crate::tape::Gradients;
use crate::{Result, Tensor, TensorError};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub usize);

struct Param {
    name: String,
    value: Tensor,
    trainable: bool,
}

/// Flat registry of named tensors. Names are dotted paths such as
/// `motion_codec.enc.conv0.weight`; freezing works on name predicates.
pub struct ParamStore {
    params: Vec<Param>,
    by_name: HashMap<String, ParamId>,
    rng: ChaCha8Rng,
}

impl ParamStore {
    pub fn new(seed: u64) -> Self {
        ParamStore {
            params: Vec::new(),
            by_name: HashMap::new(),
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor) -> ParamId {
        let name = name.into();
        assert!(!self.by_name.contains_key(&name), "duplicate parameter {name}");
        let id = ParamId(self.params.len());
        self.by_name.insert(name.clone(), id);
        self.params.push(Param {
            name,
            value,
            trainable: true,
        });
        id
    }

    /// Uniform init with variance `gain² / fan_in`.
    pub fn add_uniform(&mut self, name: impl Into<String>, shape: &[usize], fan_in: usize, gain: f32) -> ParamId {
        let bound = gain * (3.0 / fan_in.max(1) as f32).sqrt();
        let t = if bound > 0.0 {
            Tensor::rand_uniform(shape, -bound, bound, &mut self.rng)
        } else {
            Tensor::zeros(shape)
        };
        self.add(name, t)
    }

    pub fn add_const(&mut self, name: impl Into<String>, shape: &[usize], value: f32) -> ParamId {
        self.add(name, Tensor::full(shape, value))
    }

    pub fn rng(&mut self) -> &mut ChaCha8Rng {
        &mut self.rng
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.by_name.get(name).copied()
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.params[id.0].name
    }

    pub fn value(&self, id: ParamId) -> &Tensor {
        &self.params[id.0].value
    }

    pub fn set_value(&mut self, id: ParamId, value: Tensor) {
        let p = &mut self.params[id.0];
        assert_eq!(p.value.shape(), value.shape(), "shape change for {}", p.name);
        p.value = value;
    }

    pub fn is_trainable(&self, id: ParamId) -> bool {
        self.params[id.0].trainable
    }

    /// Marks parameters trainable iff `pred(name)` holds.
    pub fn set_trainable_where(&mut self, pred: impl Fn(&str) -> bool) {
        for p in &mut self.params {
            p.trainable = pred(&p.name);
        }
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> + '_ {
        (0..self.params.len()).map(ParamId)
    }

    pub fn ids_with_prefix<'a>(&'a self, prefix: &'a str) -> impl Iterator<Item = ParamId> + 'a {
        self.ids().filter(move |&id| self.params[id.0].name.starts_with(prefix))
    }

    pub fn num_scalars(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }

    /// Bitwise snapshot of every parameter.
    pub fn snapshot(&self) -> Vec<Tensor> {
        self.params.iter().map(|p| p.value.clone()).collect()
    }

    pub fn write_to<W: Write>(&self, mut w: W) -> Result<()> {
        w.write_all(b"BVCP")?;
        w.write_all(&(self.params.len() as u32).to_le_bytes())?;
        for p in &self.params {
            let name = p.name.as_bytes();
            w.write_all(&(name.len() as u32).to_le_bytes())?;
            w.write_all(name)?;
            w.write_all(&(p.value.rank() as u32).to_le_bytes())?;
            for &d in p.value.shape() {
                w.write_all(&(d as u32).to_le_bytes())?;
            }
            for v in p.value.data() {
                w.write_all(&v.to_le_bytes())?;
            }
        }
        Ok(())
    }

    /// Loads values by name into an already constructed store. Every
    /// parameter of the store must be present with a matching shape.
    pub fn read_from<R: Read>(&mut self, mut r: R) -> Result<()> {
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic)?;
        if &magic != b"BVCP" {
            return Err(TensorError::Checkpoint("bad magic".into()));
        }
        let count = read_u32(&mut r)? as usize;
        let mut seen = 0usize;
        for _ in 0..count {
            let nlen = read_u32(&mut r)? as usize;
            let mut name = vec![0u8; nlen];
            r.read_exact(&mut name)?;
            let name = String::from_utf8(name).map_err(|_| TensorError::Checkpoint("non-utf8 name".into()))?;
            let rank = read_u32(&mut r)? as usize;
            let mut shape = Vec::with_capacity(rank);
            for _ in 0..rank {
                shape.push(read_u32(&mut r)? as usize);
            }
            let n: usize = shape.iter().product();
            let mut buf = vec![0u8; n * 4];
            r.read_exact(&mut buf)?;
            let data: Vec<f32> = buf
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                .collect();
            let id = self
                .id(&name)
                .ok_or_else(|| TensorError::Checkpoint(format!("unknown parameter {name}")))?;
            if self.value(id).shape() != shape.as_slice() {
                return Err(TensorError::Checkpoint(format!(
                    "shape mismatch for {name}: file {:?}, model {:?}",
                    shape,
                    self.value(id).shape()
                )));
            }
            self.params[id.0].value = Tensor::new(&shape, data);
            seen += 1;
        }
        if seen != self.params.len() {
            return Err(TensorError::Checkpoint(format!(
                "checkpoint has {seen} of {} parameters",
                self.params.len()
            )));
        }
        Ok(())
    }
}

fn read_u32<R: Read>(r: &mut R) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

/// AdamW with bias correction.
pub struct Adam {
    pub beta1: f32,
    pub beta2: f32,
    pub eps: f32,
    pub weight_decay: f32,
    /// Global-norm gradient clip; `None` disables clipping.
    pub clip_norm: Option<f32>,
    state: HashMap<ParamId, (Vec<f32>, Vec<f32>, u32)>,
}

impl Default for Adam {
    fn default() -> Self {
        Adam {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.0,
            clip_norm: Some(5.0),
            state: HashMap::new(),
        }
    }
}

impl Adam {
    pub fn new() -> Self {
        Self::default()
    }

    /// Applies one update to every trainable parameter with a gradient.
    /// Returns the pre-clip global gradient norm.
    pub fn step(&mut self, store: &mut ParamStore, grads: &Gradients, lr: f32) -> f32 {
        let mut ids: Vec<ParamId> = grads
            .params()
            .map(|(id, _)| id)
            .filter(|&id| store.is_trainable(id))
            .collect();
        ids.sort();
        let norm = ids
            .iter()
            .map(|&id| grads.param(id).unwrap().data().iter().map(|&g| (g as f64) * (g as f64)).sum::<f64>())
            .sum::<f64>()
            .sqrt() as f32;
        let clip = match self.clip_norm {
            Some(c) if norm > c && norm.is_finite() => c / norm,
            _ => 1.0,
        };
        if !norm.is_finite() {
            return norm;
        }
        for id in ids {
            let g = grads.param(id).unwrap();
            let value = store.value(id);
            let (m, v, t) = self
                .state
                .entry(id)
                .or_insert_with(|| (vec![0.0; value.len()], vec![0.0; value.len()], 0));
            *t += 1;
            let bc1 = 1.0 - self.beta1.powi(*t as i32);
            let bc2 = 1.0 - self.beta2.powi(*t as i32);
            let mut w = value.to_vec();
            for i in 0..w.len() {
                let gi = g.data()[i] * clip;
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * gi;
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * gi * gi;
                let mh = m[i] / bc1;
                let vh = v[i] / bc2;
                w[i] -= lr * (mh / (vh.sqrt() + self.eps) + self.weight_decay * w[i]);
            }
            store.set_value(id, Tensor::new(value.shape(), w));
        }
        norm
    }
}

/// Uniform random tensor helper for tests and data generation.
pub fn random_tensor<R: Rng>(shape: &[usize], rng: &mut R) -> Tensor {
    Tensor::rand_uniform(shape, -1.0, 1.0, rng)
}
