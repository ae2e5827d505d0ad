use sha2::{Digest, Sha256};

/// A learnable array with its accumulated gradient.
#[derive(Debug, Clone, PartialEq)]
pub struct Param {
    pub name: String,
    pub shape: Vec<usize>,
    pub value: Vec<f64>,
    pub grad: Vec<f64>,
}

impl Param {
    pub fn new(name: impl Into<String>, shape: Vec<usize>, value: Vec<f64>) -> Self {
        debug_assert_eq!(shape.iter().product::<usize>(), value.len());
        let n = value.len();
        Self {
            name: name.into(),
            shape,
            value,
            grad: vec![0.0; n],
        }
    }

    pub fn zeros(name: impl Into<String>, shape: Vec<usize>) -> Self {
        let n = shape.iter().product();
        Self::new(name, shape, vec![0.0; n])
    }

    pub fn len(&self) -> usize {
        self.value.len()
    }

    pub fn is_empty(&self) -> bool {
        self.value.is_empty()
    }

    pub fn zero_grad(&mut self) {
        self.grad.iter_mut().for_each(|g| *g = 0.0);
    }

    pub(crate) fn accumulate(&mut self, g: &[f64]) {
        for (a, b) in self.grad.iter_mut().zip(g) {
            *a += b;
        }
    }
}

/// Anything that owns parameters, visited in a fixed order.
pub trait ParamSet {
    fn params(&self) -> Vec<&Param>;
    fn params_mut(&mut self) -> Vec<&mut Param>;

    fn zero_grad(&mut self) {
        self.params_mut().into_iter().for_each(Param::zero_grad);
    }

    fn num_params(&self) -> usize {
        self.params().iter().map(|p| p.len()).sum()
    }

    /// Concatenated parameter values in visit order.
    fn flat_values(&self) -> Vec<f64> {
        self.params().iter().flat_map(|p| p.value.iter().copied()).collect()
    }

    /// Concatenated gradients in visit order.
    fn flat_grads(&self) -> Vec<f64> {
        self.params().iter().flat_map(|p| p.grad.iter().copied()).collect()
    }

    fn set_flat_values(&mut self, flat: &[f64]) {
        let mut off = 0;
        for p in self.params_mut() {
            let n = p.len();
            p.value.copy_from_slice(&flat[off..off + n]);
            off += n;
        }
    }

    fn all_finite(&self) -> bool {
        self.params().iter().all(|p| p.value.iter().all(|v| v.is_finite()))
    }
}

/// SHA-256 over names, shapes and little-endian value bytes.
pub fn fingerprint<P: ParamSet + ?Sized>(set: &P) -> String {
    let mut h = Sha256::new();
    for p in set.params() {
        h.update(p.name.as_bytes());
        for d in &p.shape {
            h.update((*d as u64).to_le_bytes());
        }
        for v in &p.value {
            h.update(v.to_le_bytes());
        }
    }
    hex::encode(h.finalize())
}
