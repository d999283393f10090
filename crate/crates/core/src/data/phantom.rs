use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::Image;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum PhantomKind {
    #[default]
    SheppLogan,
    RandomEllipses,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PhantomSpec {
    pub kind: PhantomKind,
    pub n: usize,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_ellipses")]
    pub n_ellipses: usize,
    /// Range of each random ellipse's additive intensity.
    #[serde(default = "default_intensity")]
    pub intensity: [f64; 2],
    /// Final values are clipped to this range.
    #[serde(default = "default_clip")]
    pub clip: [f64; 2],
}

fn default_ellipses() -> usize {
    5
}
fn default_intensity() -> [f64; 2] {
    [0.1, 0.6]
}
fn default_clip() -> [f64; 2] {
    [0.0, 1.0]
}

impl PhantomSpec {
    pub fn shepp_logan(n: usize) -> Self {
        PhantomSpec {
            kind: PhantomKind::SheppLogan,
            n,
            seed: 0,
            n_ellipses: 10,
            intensity: default_intensity(),
            clip: default_clip(),
        }
    }

    pub fn random(n: usize, seed: u64, n_ellipses: usize) -> Self {
        PhantomSpec {
            kind: PhantomKind::RandomEllipses,
            n,
            seed,
            n_ellipses,
            intensity: default_intensity(),
            clip: default_clip(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n < 16 {
            return Err(Error::invalid(format!("phantom size must be >= 16, got {}", self.n)));
        }
        let finite = self.intensity.iter().chain(&self.clip).all(|v| v.is_finite());
        if !finite || self.intensity[0] > self.intensity[1] || self.clip[0] > self.clip[1] {
            return Err(Error::invalid("phantom intensity and clip ranges must be finite and ordered"));
        }
        Ok(())
    }

    pub fn generate(&self, pixel_size_mm: f64) -> Result<Image> {
        self.validate()?;
        let mut img = match self.kind {
            PhantomKind::SheppLogan => shepp_logan(self.n)?,
            PhantomKind::RandomEllipses => random_ellipse_phantom(self)?,
        };
        img.pixel_size_mm = pixel_size_mm;
        Ok(img)
    }
}

/// Ellipse in normalized coordinates where the image spans [-1, 1]^2.
#[derive(Clone, Copy, Debug)]
struct Ellipse {
    value: f64,
    a: f64,
    b: f64,
    x0: f64,
    y0: f64,
    phi_deg: f64,
}

/// Ellipse with its rotation and bounding radius precomputed.
struct Prepared {
    e: Ellipse,
    sin: f64,
    cos: f64,
    reach: f64,
}

impl Prepared {
    fn new(e: &Ellipse) -> Self {
        let (sin, cos) = e.phi_deg.to_radians().sin_cos();
        Prepared {
            e: *e,
            sin,
            cos,
            reach: e.a.max(e.b),
        }
    }

    fn contains(&self, x: f64, y: f64) -> bool {
        let dx = x - self.e.x0;
        let dy = y - self.e.y0;
        if dx.abs() > self.reach || dy.abs() > self.reach {
            return false;
        }
        let u = dx * self.cos + dy * self.sin;
        let v = -dx * self.sin + dy * self.cos;
        (u / self.e.a).powi(2) + (v / self.e.b).powi(2) <= 1.0
    }
}

/// Modified (high-contrast) Shepp-Logan table.
const SHEPP_LOGAN: [Ellipse; 10] = [
    Ellipse { value: 1.0, a: 0.69, b: 0.92, x0: 0.0, y0: 0.0, phi_deg: 0.0 },
    Ellipse { value: -0.8, a: 0.6624, b: 0.874, x0: 0.0, y0: -0.0184, phi_deg: 0.0 },
    Ellipse { value: -0.2, a: 0.11, b: 0.31, x0: 0.22, y0: 0.0, phi_deg: -18.0 },
    Ellipse { value: -0.2, a: 0.16, b: 0.41, x0: -0.22, y0: 0.0, phi_deg: 18.0 },
    Ellipse { value: 0.1, a: 0.21, b: 0.25, x0: 0.0, y0: 0.35, phi_deg: 0.0 },
    Ellipse { value: 0.1, a: 0.046, b: 0.046, x0: 0.0, y0: 0.1, phi_deg: 0.0 },
    Ellipse { value: 0.1, a: 0.046, b: 0.046, x0: 0.0, y0: -0.1, phi_deg: 0.0 },
    Ellipse { value: 0.1, a: 0.046, b: 0.023, x0: -0.08, y0: -0.605, phi_deg: 0.0 },
    Ellipse { value: 0.1, a: 0.023, b: 0.023, x0: 0.0, y0: -0.606, phi_deg: 0.0 },
    Ellipse { value: 0.1, a: 0.023, b: 0.046, x0: 0.06, y0: -0.605, phi_deg: 0.0 },
];

/// Sub-samples per pixel side, chosen so that grids of different power-of-two
/// sizes share the same sample points and block averages agree exactly.
fn supersampling(n: usize) -> usize {
    (1024 / n).max(1)
}

fn rasterize(n: usize, ellipses: &[Ellipse]) -> Vec<f64> {
    let s = supersampling(n);
    let fine = n * s;
    let mut out = vec![0.0; n * n];
    let inv = 1.0 / (s * s) as f64;
    let ellipses: Vec<Prepared> = ellipses.iter().map(Prepared::new).collect();
    for fi in 0..fine {
        // Row 0 is the top of the image (y = +1).
        let y = 1.0 - (2.0 * fi as f64 + 1.0) / fine as f64;
        for fj in 0..fine {
            let x = (2.0 * fj as f64 + 1.0) / fine as f64 - 1.0;
            let v: f64 = ellipses.iter().filter(|e| e.contains(x, y)).map(|e| e.e.value).sum();
            if v != 0.0 {
                out[(fi / s) * n + fj / s] += v * inv;
            }
        }
    }
    out
}

/// Modified Shepp-Logan head phantom on an `n`x`n` grid, values in [0, 1].
pub fn shepp_logan(n: usize) -> Result<Image> {
    if n < 16 {
        return Err(Error::invalid(format!("phantom size must be >= 16, got {n}")));
    }
    let mut v = rasterize(n, &SHEPP_LOGAN);
    v.iter_mut().for_each(|p| *p = p.clamp(0.0, 1.0));
    Image::from_vec(n, 1.0, v)
}

/// Additive random ellipses inside the inscribed disk, clipped to `spec.clip`.
pub fn random_ellipse_phantom(spec: &PhantomSpec) -> Result<Image> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let ellipses: Vec<Ellipse> = (0..spec.n_ellipses)
        .map(|_| {
            let r = 0.6 * rng.gen::<f64>().sqrt();
            let t = rng.gen_range(0.0..std::f64::consts::TAU);
            Ellipse {
                value: rng.gen_range(spec.intensity[0]..=spec.intensity[1]),
                a: rng.gen_range(0.1..0.4),
                b: rng.gen_range(0.1..0.4),
                x0: r * t.cos(),
                y0: r * t.sin(),
                phi_deg: rng.gen_range(0.0..180.0),
            }
        })
        .collect();
    let mut v = rasterize(spec.n, &ellipses);
    v.iter_mut().for_each(|p| *p = p.clamp(spec.clip[0], spec.clip[1]));
    Image::from_vec(spec.n, 1.0, v)
}

/// Average over `factor`x`factor` blocks.
pub fn downsample_mean(x: &Image, factor: usize) -> Result<Image> {
    let n = x.n();
    if factor == 0 || !n.is_multiple_of(factor) || n / factor < 2 {
        return Err(Error::invalid(format!("cannot downsample {n} by {factor}")));
    }
    let m = n / factor;
    let mut out = Image::zeros(m, x.pixel_size_mm * factor as f64);
    let inv = 1.0 / (factor * factor) as f64;
    for i in 0..n {
        for j in 0..n {
            out.values[[i / factor, j / factor]] += x.values[[i, j]] * inv;
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn shepp_logan_range_and_corners() {
        let p = shepp_logan(128).unwrap();
        assert!(p.values.iter().all(|&v| (0.0..=1.0).contains(&v)));
        for (i, j) in [(0, 0), (0, 127), (127, 0), (127, 127)] {
            assert_eq!(p.values[[i, j]], 0.0);
        }
        assert!(p.values.iter().any(|&v| v > 0.9));
        assert!(shepp_logan(8).is_err());
    }

    #[test]
    fn rasterizer_is_mirror_exact_for_symmetric_tables() {
        // Ellipses 3/4 and 8/10 of the head table differ in size, so only the
        // mirror-symmetric subset is expected to rasterize symmetrically.
        let n = 128;
        let table: Vec<Ellipse> = [0, 1, 4, 5, 6, 8].iter().map(|&i| SHEPP_LOGAN[i]).collect();
        let v = rasterize(n, &table);
        for i in 0..n {
            for j in 0..n {
                assert!((v[i * n + j] - v[i * n + n - 1 - j]).abs() < 1e-10);
            }
        }
        let full = shepp_logan(n).unwrap();
        let asym = (0..n * n).any(|k| {
            let (i, j) = (k / n, k % n);
            (full.values[[i, j]] - full.values[[i, n - 1 - j]]).abs() > 1e-10
        });
        assert!(asym);
    }

    #[test]
    fn multi_resolution_consistency() {
        let fine = shepp_logan(128).unwrap();
        let coarse = shepp_logan(64).unwrap();
        let down = downsample_mean(&fine, 2).unwrap();
        let rmse = (down
            .values
            .iter()
            .zip(coarse.values.iter())
            .map(|(a, b)| (a - b).powi(2))
            .sum::<f64>()
            / (64.0 * 64.0))
            .sqrt();
        assert!(rmse < 0.02, "rmse {rmse}");
    }

    #[test]
    fn random_phantoms_are_seeded() {
        let a = random_ellipse_phantom(&PhantomSpec::random(32, 5, 5)).unwrap();
        let b = random_ellipse_phantom(&PhantomSpec::random(32, 5, 5)).unwrap();
        let c = random_ellipse_phantom(&PhantomSpec::random(32, 6, 5)).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, c);
        let empty = random_ellipse_phantom(&PhantomSpec::random(32, 5, 0)).unwrap();
        assert!(empty.values.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn random_phantom_support_is_reasonable() {
        for seed in 0..100 {
            let p = random_ellipse_phantom(&PhantomSpec::random(64, seed, 5)).unwrap();
            let frac = p.values.iter().filter(|&&v| v > 0.0).count() as f64 / (64.0 * 64.0);
            assert!((0.01..=0.95).contains(&frac), "seed {seed}: {frac}");
        }
    }
}
