//! Sparsifying transforms `H` / `H*` and the soft-thresholding kernel.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::Image;

/// One named 2D coefficient array, row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct Band {
    pub name: String,
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl Band {
    fn zeros(name: String, rows: usize, cols: usize) -> Self {
        Band {
            name,
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct CoefficientSet {
    pub bands: Vec<Band>,
}

impl CoefficientSet {
    pub fn iter(&self) -> impl Iterator<Item = &f64> {
        self.bands.iter().flat_map(|b| b.data.iter())
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut f64> {
        self.bands.iter_mut().flat_map(|b| b.data.iter_mut())
    }

    pub fn l1_norm(&self) -> f64 {
        self.iter().map(|v| v.abs()).sum()
    }

    pub fn l2_norm(&self) -> f64 {
        self.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    pub fn len(&self) -> usize {
        self.bands.iter().map(|b| b.data.len()).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn soft_threshold(&mut self, tau: f64) -> Result<()> {
        check_tau(tau)?;
        self.iter_mut().for_each(|v| *v = soft(*v, tau));
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum SparsifyingTransform {
    /// Orthonormal multi-level Haar wavelet.
    Haar { levels: usize },
    /// Forward differences along x and y.
    Gradient,
}

impl Default for SparsifyingTransform {
    fn default() -> Self {
        SparsifyingTransform::Haar { levels: 2 }
    }
}

impl SparsifyingTransform {
    pub fn forward(&self, x: &Image) -> Result<CoefficientSet> {
        match *self {
            SparsifyingTransform::Haar { levels } => haar_forward(x, levels),
            SparsifyingTransform::Gradient => Ok(grad_forward(x)),
        }
    }

    pub fn adjoint(&self, c: &CoefficientSet, pixel_size_mm: f64) -> Result<Image> {
        match *self {
            SparsifyingTransform::Haar { .. } => haar_adjoint(c, pixel_size_mm),
            SparsifyingTransform::Gradient => grad_adjoint(c, pixel_size_mm),
        }
    }

    /// Whether `H* H = H H* = I`, i.e. the soft-threshold formula is the
    /// exact proximal step.
    pub fn is_orthonormal(&self) -> bool {
        matches!(self, SparsifyingTransform::Haar { .. })
    }

    pub fn l1_of(&self, x: &Image) -> Result<f64> {
        Ok(self.forward(x)?.l1_norm())
    }
}

pub fn soft(u: f64, tau: f64) -> f64 {
    if u.abs() <= tau {
        0.0
    } else {
        u - u.signum() * tau
    }
}

fn check_tau(tau: f64) -> Result<()> {
    if tau >= 0.0 && tau.is_finite() {
        Ok(())
    } else {
        Err(Error::invalid(format!("threshold must be a finite value >= 0, got {tau}")))
    }
}

/// Elementwise shrinkage: zero when `|u| < tau`, otherwise `u - sgn(u) tau`.
pub fn soft_threshold(u: &[f64], tau: f64) -> Result<Vec<f64>> {
    check_tau(tau)?;
    Ok(u.iter().map(|&v| soft(v, tau)).collect())
}

pub fn haar_forward(x: &Image, levels: usize) -> Result<CoefficientSet> {
    let n = x.n();
    if levels == 0 || !n.is_multiple_of(1 << levels) {
        return Err(Error::invalid(format!(
            "image side {n} is not divisible by 2^{levels}"
        )));
    }
    let mut approx = x.as_slice().to_vec();
    let mut size = n;
    let mut details = Vec::with_capacity(3 * levels);
    for level in 1..=levels {
        let h = size / 2;
        let mut ll = vec![0.0; h * h];
        let mut bh = Band::zeros(format!("h{level}"), h, h);
        let mut bv = Band::zeros(format!("v{level}"), h, h);
        let mut bd = Band::zeros(format!("d{level}"), h, h);
        for i in 0..h {
            for j in 0..h {
                let a = approx[2 * i * size + 2 * j];
                let b = approx[2 * i * size + 2 * j + 1];
                let c = approx[(2 * i + 1) * size + 2 * j];
                let d = approx[(2 * i + 1) * size + 2 * j + 1];
                let k = i * h + j;
                ll[k] = 0.5 * (a + b + c + d);
                bh.data[k] = 0.5 * (a - b + c - d);
                bv.data[k] = 0.5 * (a + b - c - d);
                bd.data[k] = 0.5 * (a - b - c + d);
            }
        }
        details.push([bh, bv, bd]);
        approx = ll;
        size = h;
    }
    let mut bands = vec![Band {
        name: format!("a{levels}"),
        rows: size,
        cols: size,
        data: approx,
    }];
    for [h, v, d] in details.into_iter().rev() {
        bands.extend([h, v, d]);
    }
    Ok(CoefficientSet { bands })
}

pub fn haar_adjoint(c: &CoefficientSet, pixel_size_mm: f64) -> Result<Image> {
    let nb = c.bands.len();
    if nb < 4 || !(nb - 1).is_multiple_of(3) {
        return Err(Error::invalid(format!("{nb} bands is not a Haar decomposition")));
    }
    let levels = (nb - 1) / 3;
    let mut approx = c.bands[0].data.clone();
    let mut size = c.bands[0].rows;
    if c.bands[0].cols != size || approx.len() != size * size {
        return Err(Error::invalid("Haar approximation band must be square"));
    }
    for l in 0..levels {
        let [bh, bv, bd] = [&c.bands[1 + 3 * l], &c.bands[2 + 3 * l], &c.bands[3 + 3 * l]];
        for b in [bh, bv, bd] {
            if b.rows != size || b.cols != size || b.data.len() != size * size {
                return Err(Error::invalid(format!(
                    "band {} has shape {}x{}, expected {size}x{size}",
                    b.name, b.rows, b.cols
                )));
            }
        }
        let full = 2 * size;
        let mut out = vec![0.0; full * full];
        for i in 0..size {
            for j in 0..size {
                let k = i * size + j;
                let (ll, h, v, d) = (approx[k], bh.data[k], bv.data[k], bd.data[k]);
                out[2 * i * full + 2 * j] = 0.5 * (ll + h + v + d);
                out[2 * i * full + 2 * j + 1] = 0.5 * (ll - h + v - d);
                out[(2 * i + 1) * full + 2 * j] = 0.5 * (ll + h - v - d);
                out[(2 * i + 1) * full + 2 * j + 1] = 0.5 * (ll - h - v + d);
            }
        }
        approx = out;
        size = full;
    }
    Image::from_vec(size, pixel_size_mm, approx)
}

/// Forward differences `x[., j+1] - x[., j]` and `x[i+1, .] - x[i, .]`;
/// the last column/row difference is zero (replicated edge).
pub fn grad_forward(x: &Image) -> CoefficientSet {
    let n = x.n();
    let v = x.as_slice();
    let mut dx = Band::zeros("dx".into(), n, n);
    let mut dy = Band::zeros("dy".into(), n, n);
    grad_forward_flat(v, n, &mut dx.data, &mut dy.data);
    CoefficientSet { bands: vec![dx, dy] }
}

pub fn grad_adjoint(c: &CoefficientSet, pixel_size_mm: f64) -> Result<Image> {
    if c.bands.len() != 2 {
        return Err(Error::invalid("gradient coefficients need exactly two bands"));
    }
    let n = c.bands[0].rows;
    for b in &c.bands {
        if b.rows != n || b.cols != n || b.data.len() != n * n {
            return Err(Error::invalid("gradient bands must be square and equal in size"));
        }
    }
    let mut out = vec![0.0; n * n];
    grad_adjoint_flat(&c.bands[0].data, &c.bands[1].data, n, &mut out);
    Image::from_vec(n, pixel_size_mm, out)
}

pub(crate) fn grad_forward_flat(x: &[f64], n: usize, dx: &mut [f64], dy: &mut [f64]) {
    for i in 0..n {
        for j in 0..n {
            let k = i * n + j;
            dx[k] = if j + 1 < n { x[k + 1] - x[k] } else { 0.0 };
            dy[k] = if i + 1 < n { x[k + n] - x[k] } else { 0.0 };
        }
    }
}

/// Transpose of [`grad_forward_flat`] (a negative divergence).
pub(crate) fn grad_adjoint_flat(dx: &[f64], dy: &[f64], n: usize, out: &mut [f64]) {
    for i in 0..n {
        for j in 0..n {
            let k = i * n + j;
            let mut acc = 0.0;
            if j + 1 < n {
                acc -= dx[k];
            }
            if j > 0 {
                acc += dx[k - 1];
            }
            if i + 1 < n {
                acc -= dy[k];
            }
            if i > 0 {
                acc += dy[k - n];
            }
            out[k] = acc;
        }
    }
}

/// Anisotropic total variation `||grad x||_1`.
pub fn total_variation(x: &Image) -> f64 {
    grad_forward(x).l1_norm()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_image(n: usize, seed: u64) -> Image {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Image::from_vec(n, 1.0, (0..n * n).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
    }

    fn norm(x: &Image) -> f64 {
        x.values.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    #[test]
    fn soft_threshold_branches() {
        assert_eq!(soft(0.3, 0.5), 0.0);
        assert_eq!(soft(1.0, 0.5), 0.5);
        assert_eq!(soft(-2.0, 0.5), -1.5);
        assert_eq!(soft(0.5, 0.5), 0.0);
        assert_eq!(soft(-0.7, 0.0), -0.7);
        assert!(soft_threshold(&[1.0], -0.1).is_err());
        assert_eq!(soft_threshold(&[0.3, 1.0, -2.0], 0.5).unwrap(), vec![0.0, 0.5, -1.5]);
    }

    #[test]
    fn haar_constant_has_no_detail() {
        let c = 0.75;
        let mut x = Image::zeros(8, 1.0);
        x.values.fill(c);
        let coeffs = haar_forward(&x, 1).unwrap();
        assert!(coeffs.bands[0].data.iter().all(|&v| (v - 2.0 * c).abs() < 1e-15));
        assert!(coeffs.bands[1..].iter().all(|b| b.data.iter().all(|&v| v == 0.0)));
    }

    #[test]
    fn haar_round_trip_and_parseval_all_sizes() {
        for k in 4..=9 {
            let n = 1 << k;
            let x = random_image(n, k as u64);
            for levels in [1, 2, 3] {
                let c = haar_forward(&x, levels).unwrap();
                assert!((c.l2_norm() - norm(&x)).abs() <= 1e-10 * norm(&x));
                let back = haar_adjoint(&c, 1.0).unwrap();
                let err = back
                    .values
                    .iter()
                    .zip(x.values.iter())
                    .map(|(a, b)| (a - b).powi(2))
                    .sum::<f64>()
                    .sqrt();
                assert!(err <= 1e-10 * norm(&x));
            }
        }
    }

    #[test]
    fn haar_unit_coefficient_has_unit_norm() {
        let x = Image::zeros(16, 1.0);
        let mut c = haar_forward(&x, 2).unwrap();
        assert!(haar_adjoint(&c, 1.0).unwrap().values.iter().all(|&v| v == 0.0));
        c.bands[4].data[5] = 1.0;
        let img = haar_adjoint(&c, 1.0).unwrap();
        assert!((norm(&img) - 1.0).abs() < 1e-14);
    }

    #[test]
    fn haar_rejects_bad_shapes() {
        assert!(haar_forward(&Image::zeros(12, 1.0), 3).is_err());
        let mut c = haar_forward(&Image::zeros(16, 1.0), 2).unwrap();
        c.bands[2].data.pop();
        assert!(haar_adjoint(&c, 1.0).is_err());
        c.bands.pop();
        assert!(haar_adjoint(&c, 1.0).is_err());
    }

    #[test]
    fn gradient_of_constant_and_ramp() {
        let mut x = Image::zeros(10, 1.0);
        x.values.fill(3.0);
        assert_eq!(grad_forward(&x).l1_norm(), 0.0);
        let slope = 0.25;
        for i in 0..10 {
            for j in 0..10 {
                x.values[[i, j]] = slope * j as f64;
            }
        }
        let g = grad_forward(&x);
        for i in 0..10 {
            for j in 0..9 {
                assert!((g.bands[0].data[i * 10 + j] - slope).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn gradient_adjoint_dot_product() {
        let x = random_image(33, 4);
        let gx = grad_forward(&x);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut c = gx.clone();
        c.iter_mut().for_each(|v| *v = rng.gen_range(-1.0..1.0));
        let lhs: f64 = gx.iter().zip(c.iter()).map(|(a, b)| a * b).sum();
        let adj = grad_adjoint(&c, 1.0).unwrap();
        let rhs: f64 = x.values.iter().zip(adj.values.iter()).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() <= 1e-10 * lhs.abs().max(1.0));
    }

    #[test]
    fn gradient_adjoint_rejects_mismatch() {
        let mut c = grad_forward(&Image::zeros(8, 1.0));
        c.bands[1].rows = 4;
        assert!(grad_adjoint(&c, 1.0).is_err());
    }

    proptest! {
        #[test]
        fn soft_is_odd_and_nonexpansive(u in -10.0f64..10.0, v in -10.0f64..10.0, tau in 0.0f64..5.0) {
            prop_assert_eq!(soft(-u, tau), -soft(u, tau));
            prop_assert!((soft(u, tau) - soft(v, tau)).abs() <= (u - v).abs() + 1e-15);
        }
    }
}
