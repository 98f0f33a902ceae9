//! Named parameter tensors, initialization, and tape binding.
//!
//! Every trainable model is a flat list of named tensors. Binding a
//! [`ParamSet`] onto a [`Tape`](crate::autodiff::Tape) turns each
//! tensor into a leaf node; after `backward` the trainer collects one
//! gradient vector per tensor in the same order.

use std::collections::HashMap;

use rand::Rng as _;

use crate::autodiff::{GradStore, Tape, Var};
use crate::error::{CoreError, Result};
use crate::seeding::Rng;

#[derive(Debug, Clone)]
pub struct Tensor {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

impl Tensor {
    pub fn numel(&self) -> usize {
        self.data.len()
    }
}

/// Ordered, name-indexed collection of parameter tensors.
#[derive(Debug, Clone, Default)]
pub struct ParamSet {
    tensors: Vec<Tensor>,
    by_name: HashMap<String, usize>,
}

impl ParamSet {
    pub fn tensors(&self) -> &[Tensor] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor] {
        &mut self.tensors
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.by_name.get(name).copied()
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.index_of(name).map(|i| &self.tensors[i])
    }

    pub fn n_params(&self) -> usize {
        self.tensors.iter().map(Tensor::numel).sum()
    }

    pub fn push(&mut self, t: Tensor) -> usize {
        assert!(
            !self.by_name.contains_key(&t.name),
            "duplicate parameter name {}",
            t.name
        );
        let idx = self.tensors.len();
        self.by_name.insert(t.name.clone(), idx);
        self.tensors.push(t);
        idx
    }

    /// Puts every tensor on the tape as a leaf, in declaration order.
    pub fn bind(&self, tape: &mut Tape) -> Vec<Var> {
        self.tensors
            .iter()
            .map(|t| tape.leaf(t.data.clone()))
            .collect()
    }

    /// One gradient vector per tensor (zeros where no gradient flowed).
    pub fn collect_grads(&self, store: &GradStore, bound: &[Var]) -> Vec<Vec<f64>> {
        assert_eq!(bound.len(), self.tensors.len());
        self.tensors
            .iter()
            .zip(bound)
            .map(|(t, &v)| store.get_or_zeros(v, t.numel()))
            .collect()
    }

    /// Replaces tensor contents from a checkpoint, name and shape checked.
    pub fn load_values(&mut self, values: &[(String, Vec<f64>)]) -> Result<()> {
        if values.len() != self.tensors.len() {
            return Err(CoreError::format(format!(
                "parameter count mismatch: have {}, loading {}",
                self.tensors.len(),
                values.len()
            )));
        }
        for (name, data) in values {
            let idx = self.index_of(name).ok_or_else(|| {
                CoreError::format(format!("unknown parameter {name} in checkpoint"))
            })?;
            let t = &mut self.tensors[idx];
            if t.data.len() != data.len() {
                return Err(CoreError::format(format!(
                    "parameter {name}: expected {} values, got {}",
                    t.data.len(),
                    data.len()
                )));
            }
            t.data.copy_from_slice(data);
        }
        Ok(())
    }
}

/// Builds a [`ParamSet`] with the standard initializers.
pub struct ParamBuilder<'r> {
    rng: &'r mut Rng,
    set: ParamSet,
}

impl<'r> ParamBuilder<'r> {
    pub fn new(rng: &'r mut Rng) -> Self {
        ParamBuilder { rng, set: ParamSet::default() }
    }

    pub fn finish(self) -> ParamSet {
        self.set
    }

    /// Uniform on `[-1/sqrt(fan_in), 1/sqrt(fan_in)]`, the usual
    /// fan-in-scaled start for linear and convolutional weights.
    pub fn kaiming(&mut self, name: &str, shape: &[usize], fan_in: usize) -> usize {
        let bound = 1.0 / (fan_in.max(1) as f64).sqrt();
        let n: usize = shape.iter().product();
        let data: Vec<f64> = (0..n)
            .map(|_| (self.rng.gen::<f64>() * 2.0 - 1.0) * bound)
            .collect();
        self.set.push(Tensor { name: name.to_string(), shape: shape.to_vec(), data })
    }

    pub fn zeros(&mut self, name: &str, shape: &[usize]) -> usize {
        let n: usize = shape.iter().product();
        self.set.push(Tensor {
            name: name.to_string(),
            shape: shape.to_vec(),
            data: vec![0.0; n],
        })
    }

    pub fn constant(&mut self, name: &str, shape: &[usize], value: f64) -> usize {
        let n: usize = shape.iter().product();
        self.set.push(Tensor {
            name: name.to_string(),
            shape: shape.to_vec(),
            data: vec![value; n],
        })
    }

    /// Square orthogonal matrix (rows orthonormal), the standard start
    /// for recurrent state-to-state maps.
    pub fn orthogonal(&mut self, name: &str, dim: usize) -> usize {
        let data = orthogonal_matrix(self.rng, dim);
        self.set.push(Tensor {
            name: name.to_string(),
            shape: vec![dim, dim],
            data,
        })
    }
}

/// Gram-Schmidt on a Gaussian matrix; rows come out orthonormal.
pub fn orthogonal_matrix(rng: &mut Rng, dim: usize) -> Vec<f64> {
    loop {
        let mut m: Vec<Vec<f64>> = (0..dim)
            .map(|_| (0..dim).map(|_| gauss(rng)).collect())
            .collect();
        let mut ok = true;
        for i in 0..dim {
            for j in 0..i {
                let proj: f64 = (0..dim).map(|k| m[i][k] * m[j][k]).sum();
                for k in 0..dim {
                    m[i][k] -= proj * m[j][k];
                }
            }
            let norm: f64 = (0..dim).map(|k| m[i][k] * m[i][k]).sum::<f64>().sqrt();
            if norm < 1e-8 {
                // essentially never for Gaussian draws; redraw to be safe
                ok = false;
                break;
            }
            for k in 0..dim {
                m[i][k] /= norm;
            }
        }
        if ok {
            return m.into_iter().flatten().collect();
        }
    }
}

fn gauss(rng: &mut Rng) -> f64 {
    // Box-Muller, discarding the second deviate for simplicity
    let u1: f64 = rng.gen::<f64>().max(1e-12);
    let u2: f64 = rng.gen();
    (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
}

/// `ln(p / (1-p))`; used for gate biases that should start mostly open.
pub fn logit(p: f64) -> f64 {
    (p / (1.0 - p)).ln()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::seeding::stream_rng;

    #[test]
    fn orthogonal_rows_are_orthonormal() {
        let mut rng = stream_rng(3, 0);
        let d = 12;
        let m = orthogonal_matrix(&mut rng, d);
        for i in 0..d {
            for j in 0..d {
                let dot: f64 = (0..d).map(|k| m[i * d + k] * m[j * d + k]).sum();
                let want = if i == j { 1.0 } else { 0.0 };
                assert!((dot - want).abs() < 1e-10, "row {i} . row {j} = {dot}");
            }
        }
    }

    #[test]
    fn builder_counts_and_lookup() {
        let mut rng = stream_rng(4, 0);
        let mut b = ParamBuilder::new(&mut rng);
        b.kaiming("w", &[4, 3], 3);
        b.zeros("b", &[4]);
        b.constant("gate", &[1], logit(0.9));
        let set = b.finish();
        assert_eq!(set.n_params(), 12 + 4 + 1);
        assert_eq!(set.index_of("b"), Some(1));
        assert!(set.index_of("missing").is_none());
        let g = set.get("gate").unwrap();
        assert!((g.data[0] - (0.9f64 / 0.1).ln()).abs() < 1e-12);
    }

    #[test]
    fn load_values_checks_names_and_shapes() {
        let mut rng = stream_rng(5, 0);
        let mut b = ParamBuilder::new(&mut rng);
        b.zeros("a", &[2]);
        let mut set = b.finish();
        assert!(set
            .load_values(&[("a".to_string(), vec![1.0, 2.0])])
            .is_ok());
        assert_eq!(set.get("a").unwrap().data, vec![1.0, 2.0]);
        assert!(set.load_values(&[("x".to_string(), vec![0.0; 2])]).is_err());
        assert!(set.load_values(&[("a".to_string(), vec![0.0; 3])]).is_err());
    }
}
