use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::{Gradients, NumArray, Result, TensorError};

/// Handle to a parameter inside a [`ParamStore`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Named parameters with their gradients and Adam moments.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore {
    names: Vec<String>,
    index: BTreeMap<String, usize>,
    values: Vec<NumArray>,
    grads: Vec<NumArray>,
    first_moment: Vec<NumArray>,
    second_moment: Vec<NumArray>,
    step: u64,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    /// Registers a parameter. Re-registering a name replaces its value and
    /// resets its gradient and moments.
    pub fn insert(&mut self, name: &str, value: NumArray) -> ParamId {
        let zeros = NumArray::zeros(value.dim());
        if let Some(&i) = self.index.get(name) {
            self.values[i] = value;
            self.grads[i] = zeros.clone();
            self.first_moment[i] = zeros.clone();
            self.second_moment[i] = zeros;
            return ParamId(i);
        }
        let i = self.values.len();
        self.names.push(name.to_string());
        self.index.insert(name.to_string(), i);
        self.values.push(value);
        self.grads.push(zeros.clone());
        self.first_moment.push(zeros.clone());
        self.second_moment.push(zeros);
        ParamId(i)
    }

    pub fn id(&self, name: &str) -> Result<ParamId> {
        self.index
            .get(name)
            .map(|&i| ParamId(i))
            .ok_or_else(|| TensorError::UnknownParam(name.to_string()))
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn value(&self, id: ParamId) -> &NumArray {
        &self.values[id.0]
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut NumArray {
        &mut self.values[id.0]
    }

    pub fn grad(&self, id: ParamId) -> &NumArray {
        &self.grads[id.0]
    }

    pub fn step(&self) -> u64 {
        self.step
    }

    pub fn num_scalars(&self) -> usize {
        self.values.iter().map(|v| v.len()).sum()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.values.len()).map(ParamId)
    }

    pub fn zero_grad(&mut self) {
        for g in &mut self.grads {
            g.fill(0.0);
        }
    }

    /// Adds `scale * grads` into the stored gradients.
    pub fn accumulate(&mut self, grads: &Gradients, scale: f64) {
        for (i, g) in grads.iter() {
            self.grads[i.0].scaled_add(scale, g);
        }
    }

    pub fn grad_norm(&self) -> f64 {
        self.grads
            .iter()
            .map(|g| g.iter().map(|v| v * v).sum::<f64>())
            .sum::<f64>()
            .sqrt()
    }

    /// Rescales gradients so their global L2 norm is at most `max_norm`.
    /// Returns the norm before clipping.
    pub fn clip_grad_norm(&mut self, max_norm: f64) -> f64 {
        let norm = self.grad_norm();
        if norm > max_norm && norm > 0.0 {
            let s = max_norm / norm;
            for g in &mut self.grads {
                g.mapv_inplace(|v| v * s);
            }
        }
        norm
    }

    /// One bias-corrected Adam update using the stored gradients.
    pub fn adam_step(&mut self, lr: f64, cfg: AdamConfig) {
        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - cfg.beta1.powi(t);
        let bc2 = 1.0 - cfg.beta2.powi(t);
        for i in 0..self.values.len() {
            let g = &self.grads[i];
            let m = &mut self.first_moment[i];
            let v = &mut self.second_moment[i];
            let p = &mut self.values[i];
            ndarray::Zip::from(p)
                .and(m)
                .and(v)
                .and(g)
                .for_each(|p, m, v, &g| {
                    *m = cfg.beta1 * *m + (1.0 - cfg.beta1) * g;
                    *v = cfg.beta2 * *v + (1.0 - cfg.beta2) * g * g;
                    let m_hat = *m / bc1;
                    let v_hat = *v / bc2;
                    *p -= lr * m_hat / (v_hat.sqrt() + cfg.eps);
                });
        }
    }

    /// Row-major snapshot of every parameter and the optimizer state.
    pub fn to_stored(&self) -> StoredParams {
        let pack = |arrays: &[NumArray]| -> BTreeMap<String, StoredArray> {
            self.names
                .iter()
                .zip(arrays)
                .map(|(n, a)| (n.clone(), StoredArray::from_array(a)))
                .collect()
        };
        StoredParams {
            params: pack(&self.values),
            first_moment: pack(&self.first_moment),
            second_moment: pack(&self.second_moment),
            step: self.step,
        }
    }

    /// Restores values and optimizer state into an already laid-out store.
    /// Every stored name must exist here with an identical shape, and vice
    /// versa.
    pub fn load_stored(&mut self, stored: &StoredParams) -> Result<()> {
        for name in stored.params.keys() {
            self.id(name)?;
        }
        for (i, name) in self.names.iter().enumerate() {
            let expected = self.values[i].dim();
            let fetch = |map: &BTreeMap<String, StoredArray>| -> Result<NumArray> {
                let s = map
                    .get(name)
                    .ok_or_else(|| TensorError::UnknownParam(name.clone()))?;
                let a = s.to_array()?;
                if a.dim() != expected {
                    return Err(TensorError::ParamShape {
                        name: name.clone(),
                        expected,
                        found: a.dim(),
                    });
                }
                Ok(a)
            };
            self.values[i] = fetch(&stored.params)?;
            self.first_moment[i] = fetch(&stored.first_moment)?;
            self.second_moment[i] = fetch(&stored.second_moment)?;
            self.grads[i] = NumArray::zeros(expected);
        }
        self.step = stored.step;
        Ok(())
    }
}

/// Shape plus row-major values.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StoredArray {
    pub shape: [usize; 2],
    pub values: Vec<f64>,
}

impl StoredArray {
    pub fn from_array(a: &NumArray) -> Self {
        let (r, c) = a.dim();
        Self {
            shape: [r, c],
            values: a.iter().copied().collect(),
        }
    }

    pub fn to_array(&self) -> Result<NumArray> {
        let [r, c] = self.shape;
        NumArray::from_shape_vec((r, c), self.values.clone()).map_err(|_| {
            TensorError::ShapeMismatch {
                op: "stored_array",
                left: (r, c),
                right: (1, self.values.len()),
            }
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StoredParams {
    pub params: BTreeMap<String, StoredArray>,
    pub first_moment: BTreeMap<String, StoredArray>,
    pub second_moment: BTreeMap<String, StoredArray>,
    pub step: u64,
}
