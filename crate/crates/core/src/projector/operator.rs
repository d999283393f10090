use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// A matrix-free linear map on flat `f64` buffers together with its transpose.
///
/// `apply` and `apply_adjoint` overwrite their output buffers.
pub trait LinearOperator {
    fn input_len(&self) -> usize;
    fn output_len(&self) -> usize;
    fn apply(&self, x: &[f64], out: &mut [f64]);
    fn apply_adjoint(&self, y: &[f64], out: &mut [f64]);

    fn apply_vec(&self, x: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.output_len()];
        self.apply(x, &mut out);
        out
    }

    fn apply_adjoint_vec(&self, y: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.input_len()];
        self.apply_adjoint(y, &mut out);
        out
    }
}

/// Identity map of a given length (turns the reconstruction solvers into denoisers).
#[derive(Clone, Copy, Debug)]
pub struct IdentityOperator(pub usize);

impl LinearOperator for IdentityOperator {
    fn input_len(&self) -> usize {
        self.0
    }
    fn output_len(&self) -> usize {
        self.0
    }
    fn apply(&self, x: &[f64], out: &mut [f64]) {
        out.copy_from_slice(x);
    }
    fn apply_adjoint(&self, y: &[f64], out: &mut [f64]) {
        out.copy_from_slice(y);
    }
}

/// Explicit row-major matrix. Used to assemble small reference operators.
#[derive(Clone, Debug)]
pub struct DenseOperator {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl DenseOperator {
    /// Materialize `op` column by column.
    pub fn assemble(op: &dyn LinearOperator) -> Self {
        let rows = op.output_len();
        let cols = op.input_len();
        let mut data = vec![0.0; rows * cols];
        let mut e = vec![0.0; cols];
        let mut col = vec![0.0; rows];
        for j in 0..cols {
            e[j] = 1.0;
            op.apply(&e, &mut col);
            e[j] = 0.0;
            for i in 0..rows {
                data[i * cols + j] = col[i];
            }
        }
        DenseOperator { rows, cols, data }
    }
}

impl LinearOperator for DenseOperator {
    fn input_len(&self) -> usize {
        self.cols
    }
    fn output_len(&self) -> usize {
        self.rows
    }
    fn apply(&self, x: &[f64], out: &mut [f64]) {
        for (i, o) in out.iter_mut().enumerate() {
            let row = &self.data[i * self.cols..(i + 1) * self.cols];
            *o = row.iter().zip(x).map(|(a, b)| a * b).sum();
        }
    }
    fn apply_adjoint(&self, y: &[f64], out: &mut [f64]) {
        out.iter_mut().for_each(|v| *v = 0.0);
        for (i, &yi) in y.iter().enumerate() {
            let row = &self.data[i * self.cols..(i + 1) * self.cols];
            for (o, a) in out.iter_mut().zip(row) {
                *o += a * yi;
            }
        }
    }
}

/// Largest eigenvalue magnitude of `op` estimated by `iters` power iterations
/// from a fixed pseudo-random positive start vector.
pub fn power_iteration<F>(len: usize, iters: usize, mut op: F) -> f64
where
    F: FnMut(&[f64], &mut [f64]),
{
    let mut rng = ChaCha8Rng::seed_from_u64(0x5eed);
    let mut v: Vec<f64> = (0..len).map(|_| rng.gen_range(0.5..1.5)).collect();
    let start = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    v.iter_mut().for_each(|x| *x /= start);
    let mut w = vec![0.0; len];
    let mut estimate = 0.0;
    for _ in 0..iters {
        op(&v, &mut w);
        let norm = w.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm == 0.0 || !norm.is_finite() {
            return norm;
        }
        estimate = norm;
        for (vi, wi) in v.iter_mut().zip(&w) {
            *vi = wi / norm;
        }
    }
    estimate
}

/// Power-iteration estimate of `||A^T A||_2` for any linear operator.
pub fn normal_operator_norm(op: &dyn LinearOperator, iters: usize) -> f64 {
    let mut tmp = vec![0.0; op.output_len()];
    power_iteration(op.input_len(), iters, |v, out| {
        op.apply(v, &mut tmp);
        op.apply_adjoint(&tmp, out);
    })
}
