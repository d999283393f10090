use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, Poisson};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::Sinogram;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum NoiseKind {
    #[default]
    None,
    /// Additive N(0, level^2) on every line integral.
    Gaussian,
    /// Photon counting at incident intensity `level` per detector cell.
    PoissonCounts,
}

#[derive(Clone, Debug, PartialEq)]
pub struct NoisyData {
    pub sinogram: Sinogram,
    /// Cells whose Poisson draw was <= 0 and were clamped to one count.
    pub clamped: usize,
}

pub fn add_noise(s: &Sinogram, kind: NoiseKind, level: f64, seed: u64) -> Result<NoisyData> {
    if !(level >= 0.0 && level.is_finite()) {
        return Err(Error::invalid(format!("noise level must be >= 0, got {level}")));
    }
    let mut out = s.clone();
    let mut clamped = 0;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    match kind {
        NoiseKind::None => {}
        NoiseKind::Gaussian => {
            if level > 0.0 {
                let normal = Normal::new(0.0, level).map_err(|e| Error::invalid(e.to_string()))?;
                out.values.iter_mut().for_each(|v| *v += normal.sample(&mut rng));
            }
        }
        NoiseKind::PoissonCounts => {
            if level <= 0.0 {
                return Err(Error::invalid("Poisson noise needs a positive incident intensity"));
            }
            for v in out.values.iter_mut() {
                let mean = level * (-*v).exp();
                let mut counts = if mean > 0.0 {
                    Poisson::new(mean)
                        .map_err(|e| Error::invalid(e.to_string()))?
                        .sample(&mut rng)
                } else {
                    0.0
                };
                if counts <= 0.0 {
                    counts = 1.0;
                    clamped += 1;
                }
                *v = (level / counts).ln();
            }
        }
    }
    Ok(NoisyData {
        sinogram: out,
        clamped,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_gaussian_is_identity() {
        let mut s = Sinogram::zeros(4, 5);
        s.values.fill(2.5);
        let n = add_noise(&s, NoiseKind::Gaussian, 0.0, 1).unwrap();
        assert_eq!(n.sinogram, s);
        assert!(add_noise(&s, NoiseKind::Gaussian, -1.0, 1).is_err());
    }

    #[test]
    fn seeded_and_calibrated() {
        let s = Sinogram::zeros(100, 1000);
        let a = add_noise(&s, NoiseKind::Gaussian, 0.3, 42).unwrap();
        let b = add_noise(&s, NoiseKind::Gaussian, 0.3, 42).unwrap();
        assert_eq!(a, b);
        let n = s.values.len() as f64;
        let mean = a.sinogram.values.sum() / n;
        let var = a.sinogram.values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
        assert!((var.sqrt() - 0.3).abs() / 0.3 < 0.02);
    }

    #[test]
    fn poisson_clamps_starved_cells() {
        let mut s = Sinogram::zeros(2, 50);
        s.values.fill(50.0); // exp(-50) * 1e4 counts: essentially always zero
        let n = add_noise(&s, NoiseKind::PoissonCounts, 1e4, 3).unwrap();
        assert!(n.clamped > 90);
        assert!(n.sinogram.values.iter().all(|v| v.is_finite()));

        let mut s = Sinogram::zeros(2, 50);
        s.values.fill(0.5);
        let n = add_noise(&s, NoiseKind::PoissonCounts, 1e6, 3).unwrap();
        assert_eq!(n.clamped, 0);
        assert!(n.sinogram.values.iter().all(|v| (v - 0.5).abs() < 0.05));
    }
}
