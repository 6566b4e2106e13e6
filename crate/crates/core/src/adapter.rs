//! Gated residual MLP adapters over frozen embeddings.
//!
//! `out = gate ⊙ MLP(v) + (1 − gate) ⊙ v` with `MLP(v) = ReLU(v·W1)·W2`.
//! The gate is a per-dimension learnable vector rather than a fixed blend
//! scalar; at gate zero the adapter is exactly the identity, so a freshly
//! initialized adapter leaves the pipeline at its no-adapter baseline.
//!
//! One visual adapter and one text adapter are shared across all classes
//! (per-class adapters would be the alternative; nothing in the math here
//! precludes them).

use crate::encoder::{EmbeddingVector, Modality};
use crate::tensor::Matrix;
use crate::{real, Error, Result, Scalar};
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

/// How the gate vector is treated during training.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum GateMode {
    /// No refinement at all: gate pinned to zero, MLP weights frozen too.
    Off,
    /// Gate pinned to a constant blend value; only the MLP trains.
    Fixed(f64),
    /// Gate is a trained per-dimension vector.
    Learnable,
}

/// Two MLP weight matrices plus the per-dimension gate for one modality.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdapterParams<T> {
    /// `D × D_h`.
    pub w1: Matrix<T>,
    /// `D_h × D`.
    pub w2: Matrix<T>,
    /// Length `D`.
    pub gate: Vec<T>,
    pub modality: Modality,
}

/// Gradients in the same layout as [`AdapterParams`].
#[derive(Debug, Clone, PartialEq)]
pub struct AdapterGrads<T> {
    pub w1: Matrix<T>,
    pub w2: Matrix<T>,
    pub gate: Vec<T>,
}

impl<T: Scalar> AdapterGrads<T> {
    pub fn zeros(dim: usize, hidden: usize) -> Self {
        AdapterGrads {
            w1: Matrix::zeros(dim, hidden),
            w2: Matrix::zeros(hidden, dim),
            gate: vec![T::zero(); dim],
        }
    }

    pub fn accumulate(&mut self, other: &AdapterGrads<T>) {
        for (a, b) in self.w1.as_mut_slice().iter_mut().zip(other.w1.as_slice()) {
            *a += *b;
        }
        for (a, b) in self.w2.as_mut_slice().iter_mut().zip(other.w2.as_slice()) {
            *a += *b;
        }
        for (a, b) in self.gate.iter_mut().zip(other.gate.iter()) {
            *a += *b;
        }
    }

    pub fn scale(&mut self, factor: T) {
        for v in self.w1.as_mut_slice() {
            *v *= factor;
        }
        for v in self.w2.as_mut_slice() {
            *v *= factor;
        }
        for v in self.gate.iter_mut() {
            *v *= factor;
        }
    }
}

impl<T: Scalar> AdapterParams<T> {
    pub fn dim(&self) -> usize {
        self.w1.rows()
    }

    pub fn hidden(&self) -> usize {
        self.w1.cols()
    }

    pub fn num_params(&self) -> usize {
        self.dim() * self.hidden() * 2 + self.dim()
    }

    /// Flat layout: w1, then w2, then gate.
    pub fn params_flat(&self) -> Vec<T> {
        let mut out = Vec::with_capacity(self.num_params());
        out.extend_from_slice(self.w1.as_slice());
        out.extend_from_slice(self.w2.as_slice());
        out.extend_from_slice(&self.gate);
        out
    }

    pub fn set_params_flat(&mut self, flat: &[T]) {
        assert_eq!(flat.len(), self.num_params());
        let n1 = self.w1.as_slice().len();
        let n2 = self.w2.as_slice().len();
        self.w1.as_mut_slice().copy_from_slice(&flat[..n1]);
        self.w2.as_mut_slice().copy_from_slice(&flat[n1..n1 + n2]);
        self.gate.copy_from_slice(&flat[n1 + n2..]);
    }

    /// Overwrite the gate with a constant (the fixed-blend ablation).
    pub fn pin_gate(&mut self, value: T) {
        for g in self.gate.iter_mut() {
            *g = value;
        }
    }
}

/// Seeded uniform fan-in initialization; the gate starts at zero so the
/// adapter begins as the identity map.
pub fn init_adapter<T: Scalar>(
    dim: usize,
    hidden: usize,
    modality: Modality,
    seed: u64,
) -> Result<AdapterParams<T>> {
    if dim == 0 || hidden == 0 {
        return Err(Error::argument("adapter dims must be positive"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let b1 = 1.0 / (dim as f64).sqrt();
    let w1 = Matrix::from_fn(dim, hidden, |_, _| real::<T>(rng.gen_range(-b1..b1)));
    let b2 = 1.0 / (hidden as f64).sqrt();
    let w2 = Matrix::from_fn(hidden, dim, |_, _| real::<T>(rng.gen_range(-b2..b2)));
    Ok(AdapterParams {
        w1,
        w2,
        gate: vec![T::zero(); dim],
        modality,
    })
}

fn mlp_hidden<T: Scalar>(v: &[T], p: &AdapterParams<T>) -> Vec<T> {
    p.w1.vec_mul(v).into_iter().map(|h| h.max(T::zero())).collect()
}

/// `gate ⊙ MLP(v) + (1 − gate) ⊙ v`.
pub fn adapter_forward<T: Scalar>(
    v: &EmbeddingVector<T>,
    p: &AdapterParams<T>,
) -> Result<EmbeddingVector<T>> {
    if v.modality != p.modality {
        return Err(Error::argument("adapter/embedding modality mismatch"));
    }
    if v.dim() != p.dim() {
        return Err(Error::argument(format!(
            "adapter dim {} != embedding dim {}",
            p.dim(),
            v.dim()
        )));
    }
    let hidden = mlp_hidden(&v.values, p);
    let mlp = p.w2.vec_mul(&hidden);
    let one = T::one();
    let out = (0..v.dim())
        .map(|i| p.gate[i] * mlp[i] + (one - p.gate[i]) * v.values[i])
        .collect();
    EmbeddingVector::new(out, p.modality)
}

/// Backward of [`adapter_forward`]: gradients w.r.t. the parameters and the
/// input embedding, given the gradient on the output.
pub fn adapter_backward<T: Scalar>(
    v: &[T],
    p: &AdapterParams<T>,
    grad_out: &[T],
) -> (AdapterGrads<T>, Vec<T>) {
    let dim = p.dim();
    let hid = p.hidden();
    debug_assert_eq!(v.len(), dim);
    debug_assert_eq!(grad_out.len(), dim);
    let one = T::one();

    let pre = p.w1.vec_mul(v);
    let hidden: Vec<T> = pre.iter().map(|&h| h.max(T::zero())).collect();
    let mlp = p.w2.vec_mul(&hidden);

    let mut grads = AdapterGrads::zeros(dim, hid);
    // gate and the two blend branches
    let mut g_mlp = vec![T::zero(); dim];
    let mut g_v = vec![T::zero(); dim];
    for i in 0..dim {
        grads.gate[i] = grad_out[i] * (mlp[i] - v[i]);
        g_mlp[i] = grad_out[i] * p.gate[i];
        g_v[i] = grad_out[i] * (one - p.gate[i]);
    }
    // mlp = hidden · w2
    let mut g_hidden = vec![T::zero(); hid];
    for j in 0..hid {
        let row = p.w2.row(j);
        let mut acc = T::zero();
        for i in 0..dim {
            *grads.w2.at_mut(j, i) += hidden[j] * g_mlp[i];
            acc += row[i] * g_mlp[i];
        }
        // ReLU gate on the hidden preactivation
        g_hidden[j] = if pre[j] > T::zero() { acc } else { T::zero() };
    }
    // pre = v · w1
    for d in 0..dim {
        let mut acc = T::zero();
        for j in 0..hid {
            *grads.w1.at_mut(d, j) += v[d] * g_hidden[j];
            acc += p.w1.at(d, j) * g_hidden[j];
        }
        g_v[d] += acc;
    }
    (grads, g_v)
}
