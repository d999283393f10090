//! Fan-beam system matrix `A` (Joseph interpolation), its exact transpose, and
//! filtered backprojection.

mod fbp;
mod operator;

pub use fbp::{fbp, Fbp, FilterKind};
pub use operator::{
    normal_operator_norm, power_iteration, DenseOperator, IdentityOperator, LinearOperator,
};

use crate::error::{Error, Result};
use crate::geometry::FanBeamGeometry;
use crate::image::{Image, Sinogram};

/// On-the-fly ray-driven projector.
///
/// Each ray is sampled once per column (or row, whichever axis it travels
/// along faster) and the image is linearly interpolated across the other
/// axis. Forward and adjoint walk exactly the same weights.
#[derive(Clone, Debug)]
pub struct Projector {
    geometry: FanBeamGeometry,
    /// Source position and ray direction per (view, detector).
    rays: Vec<Ray>,
}

#[derive(Clone, Copy, Debug)]
struct Ray {
    sx: f64,
    sy: f64,
    dx: f64,
    dy: f64,
}

impl Projector {
    pub fn new(g: &FanBeamGeometry) -> Result<Self> {
        g.validate()?;
        let sid = g.source_to_isocenter_mm;
        let mut rays = Vec::with_capacity(g.n_views() * g.n_detectors);
        for &beta in &g.view_angles_rad {
            let (sb, cb) = beta.sin_cos();
            let (sx, sy) = (sid * cb, sid * sb);
            let (cx, cy) = (-cb, -sb);
            for i in 0..g.n_detectors {
                let (sg, cg) = g.detector_angle(i).sin_cos();
                rays.push(Ray {
                    sx,
                    sy,
                    dx: cx * cg - cy * sg,
                    dy: cx * sg + cy * cg,
                });
            }
        }
        Ok(Projector {
            geometry: g.clone(),
            rays,
        })
    }

    pub fn geometry(&self) -> &FanBeamGeometry {
        &self.geometry
    }

    pub fn forward_project(&self, x: &Image) -> Result<Sinogram> {
        if x.n() != self.geometry.image_n {
            return Err(Error::invalid(format!(
                "image is {}x{} but geometry expects {}",
                x.n(),
                x.n(),
                self.geometry.image_n
            )));
        }
        let mut s = Sinogram::for_geometry(&self.geometry);
        self.apply(x.as_slice(), s.as_slice_mut());
        Ok(s)
    }

    pub fn backproject(&self, s: &Sinogram) -> Result<Image> {
        s.check_matches(&self.geometry)?;
        let mut x = Image::for_geometry(&self.geometry);
        self.apply_adjoint(s.as_slice(), x.as_slice_mut());
        Ok(x)
    }

    /// Visit every (pixel index, weight) pair of ray `r`.
    #[inline(always)]
    fn walk_ray<F: FnMut(usize, f64)>(&self, r: &Ray, mut visit: F) {
        let n = self.geometry.image_n;
        let ps = self.geometry.pixel_size_mm;
        let half = (n as f64 - 1.0) / 2.0;
        let last = n as isize - 1;
        if r.dx.abs() >= r.dy.abs() {
            // March across columns, interpolate between rows.
            let step = ps / r.dx.abs();
            let slope = r.dy / r.dx;
            for j in 0..n {
                let x = (j as f64 - half) * ps;
                let y = r.sy + (x - r.sx) * slope;
                let row = half - y / ps;
                let r0 = row.floor();
                let w1 = row - r0;
                let r0 = r0 as isize;
                if r0 < -1 || r0 > last {
                    continue;
                }
                if r0 >= 0 {
                    visit(r0 as usize * n + j, step * (1.0 - w1));
                }
                if r0 < last {
                    visit((r0 + 1) as usize * n + j, step * w1);
                }
            }
        } else {
            let step = ps / r.dy.abs();
            let slope = r.dx / r.dy;
            for i in 0..n {
                let y = (half - i as f64) * ps;
                let x = r.sx + (y - r.sy) * slope;
                let col = x / ps + half;
                let c0 = col.floor();
                let w1 = col - c0;
                let c0 = c0 as isize;
                if c0 < -1 || c0 > last {
                    continue;
                }
                if c0 >= 0 {
                    visit(i * n + c0 as usize, step * (1.0 - w1));
                }
                if c0 < last {
                    visit(i * n + (c0 + 1) as usize, step * w1);
                }
            }
        }
    }
}

impl LinearOperator for Projector {
    fn input_len(&self) -> usize {
        self.geometry.image_n * self.geometry.image_n
    }

    fn output_len(&self) -> usize {
        self.rays.len()
    }

    fn apply(&self, x: &[f64], out: &mut [f64]) {
        for (r, o) in self.rays.iter().zip(out.iter_mut()) {
            let mut acc = 0.0;
            self.walk_ray(r, |p, w| acc += w * x[p]);
            *o = acc;
        }
    }

    fn apply_adjoint(&self, y: &[f64], out: &mut [f64]) {
        out.iter_mut().for_each(|v| *v = 0.0);
        for (r, &yi) in self.rays.iter().zip(y) {
            if yi == 0.0 {
                continue;
            }
            self.walk_ray(r, |p, w| out[p] += w * yi);
        }
    }
}

pub fn forward_project(x: &Image, g: &FanBeamGeometry) -> Result<Sinogram> {
    Projector::new(g)?.forward_project(x)
}

pub fn backproject(s: &Sinogram, g: &FanBeamGeometry) -> Result<Image> {
    Projector::new(g)?.backproject(s)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::make_desk_geometry;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_vec(rng: &mut ChaCha8Rng, len: usize) -> Vec<f64> {
        (0..len).map(|_| rng.gen_range(-1.0..1.0)).collect()
    }

    #[test]
    fn zero_in_zero_out() {
        let g = make_desk_geometry(32, 12, 360.0).unwrap();
        let p = Projector::new(&g).unwrap();
        let s = p.forward_project(&Image::for_geometry(&g)).unwrap();
        assert!(s.values.iter().all(|&v| v == 0.0));
        let b = p.backproject(&Sinogram::for_geometry(&g)).unwrap();
        assert!(b.values.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn dimension_mismatch_is_rejected() {
        let g = make_desk_geometry(32, 12, 360.0).unwrap();
        let p = Projector::new(&g).unwrap();
        assert!(p.forward_project(&Image::zeros(16, 1.0)).is_err());
        assert!(p.backproject(&Sinogram::zeros(11, g.n_detectors)).is_err());
    }

    #[test]
    fn disk_chord_through_center() {
        // Uniform disk at the isocenter; the ray through the center should
        // integrate to the diameter times the attenuation.
        let n = 256;
        let mut g = make_desk_geometry(n, 4, 360.0).unwrap();
        g.detector_angular_offset_rad = 0.0;
        g.n_detectors = 2 * (g.n_detectors / 2) + 1; // odd: center cell on the central ray
        let p = Projector::new(&g).unwrap();
        let radius = 100.0;
        let mu = 0.02;
        let mut x = Image::for_geometry(&g);
        let half = (n as f64 - 1.0) / 2.0;
        for i in 0..n {
            for j in 0..n {
                let xx = (j as f64 - half) * g.pixel_size_mm;
                let yy = (half - i as f64) * g.pixel_size_mm;
                if xx * xx + yy * yy <= radius * radius {
                    x.values[[i, j]] = mu;
                }
            }
        }
        let s = p.forward_project(&x).unwrap();
        let center = g.n_detectors / 2;
        for v in 0..g.n_views() {
            let got = s.values[[v, center]];
            let want = 2.0 * radius * mu;
            assert!((got - want).abs() / want < 0.02, "view {v}: {got} vs {want}");
        }
    }

    #[test]
    fn adjoint_dot_product() {
        let g = make_desk_geometry(64, 36, 151.875).unwrap();
        let p = Projector::new(&g).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..5 {
            let x = random_vec(&mut rng, p.input_len());
            let y = random_vec(&mut rng, p.output_len());
            let ax = p.apply_vec(&x);
            let aty = p.apply_adjoint_vec(&y);
            let lhs: f64 = ax.iter().zip(&y).map(|(a, b)| a * b).sum();
            let rhs: f64 = x.iter().zip(&aty).map(|(a, b)| a * b).sum();
            let scale = crate::image::norm2(&ax) * crate::image::norm2(&y);
            assert!((lhs - rhs).abs() / scale < 1e-12);
        }
    }

    #[test]
    fn linearity() {
        let g = make_desk_geometry(32, 10, 200.0).unwrap();
        let p = Projector::new(&g).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let x1 = random_vec(&mut rng, p.input_len());
        let x2 = random_vec(&mut rng, p.input_len());
        let (a, b) = (0.7, -2.3);
        let combo: Vec<f64> = x1.iter().zip(&x2).map(|(u, v)| a * u + b * v).collect();
        let lhs = p.apply_vec(&combo);
        let r1 = p.apply_vec(&x1);
        let r2 = p.apply_vec(&x2);
        let scale = crate::image::norm2(&lhs);
        for ((l, u), v) in lhs.iter().zip(&r1).zip(&r2) {
            assert!((l - (a * u + b * v)).abs() <= 1e-10 * scale);
        }
    }

    #[test]
    fn backprojected_ones_positive_inside_fov() {
        let g = make_desk_geometry(32, 60, 360.0).unwrap();
        let p = Projector::new(&g).unwrap();
        let mut s = Sinogram::for_geometry(&g);
        s.values.fill(1.0);
        let b = p.backproject(&s).unwrap();
        let half = 15.5;
        for i in 0..32 {
            for j in 0..32 {
                let r = ((i as f64 - half).powi(2) + (j as f64 - half).powi(2)).sqrt();
                if r < 15.0 {
                    assert!(b.values[[i, j]] > 0.0);
                }
            }
        }
    }

    #[test]
    fn deterministic() {
        let g = make_desk_geometry(32, 10, 200.0).unwrap();
        let p = Projector::new(&g).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = random_vec(&mut rng, p.input_len());
        let a = p.apply_vec(&x);
        let b = p.apply_vec(&x);
        assert_eq!(a, b);
        let c = p.apply_adjoint_vec(&a);
        let d = p.apply_adjoint_vec(&b);
        assert_eq!(c, d);
    }
}
