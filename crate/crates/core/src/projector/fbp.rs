use std::f64::consts::PI;
use std::sync::Arc;

use rustfft::num_complex::Complex64;
use rustfft::{Fft, FftPlanner};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::FanBeamGeometry;
use crate::image::{Image, Sinogram};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum FilterKind {
    #[default]
    Ramp,
    /// Ramp apodized with a Hann window reaching zero at Nyquist.
    HannRamp,
}

/// Above this many (view, pixel) pairs the interpolation weights are
/// recomputed on every call instead of being cached.
const TABLE_LIMIT: usize = 1 << 20;

/// Equiangular fan-beam FBP as an explicit linear operator
/// `B * C * W` (cosine weighting, ramp convolution, distance-weighted
/// pixel-driven backprojection), with its exact transpose `W * C * B^T`.
///
/// No short-scan weighting is applied. Each view contributes with weight
/// `2 pi / n_views`, so the DC level is preserved whatever the arc.
#[derive(Clone)]
pub struct Fbp {
    geometry: FanBeamGeometry,
    filter: FilterKind,
    /// `SID * cos(gamma_i)` per detector cell.
    cosine_weights: Vec<f64>,
    fft_len: usize,
    spectrum: Vec<Complex64>,
    fft: Arc<dyn Fft<f64>>,
    ifft: Arc<dyn Fft<f64>>,
    table: Option<Vec<Tap>>,
}

/// Backprojection tap: `w0 * q[bin] + w1 * q[bin + 1]`, with out-of-range
/// neighbours already zeroed.
#[derive(Clone, Copy, Debug, Default)]
struct Tap {
    bin: i32,
    w0: f64,
    w1: f64,
}

impl std::fmt::Debug for Fbp {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Fbp")
            .field("filter", &self.filter)
            .field("fft_len", &self.fft_len)
            .field("cached", &self.table.is_some())
            .finish()
    }
}

impl Fbp {
    pub fn new(g: &FanBeamGeometry, filter: FilterKind) -> Result<Self> {
        g.validate()?;
        if g.n_views() < 2 {
            return Err(Error::invalid("FBP needs at least 2 views"));
        }
        let nd = g.n_detectors;
        let dgamma = g.detector_angle_step();
        let cosine_weights = (0..nd)
            .map(|i| g.source_to_isocenter_mm * g.detector_angle(i).cos())
            .collect();

        let fft_len = (2 * nd).next_power_of_two();
        let mut kernel = vec![Complex64::new(0.0, 0.0); fft_len];
        for k in 0..nd as isize {
            let v = fan_ramp_tap(k, dgamma) * dgamma;
            kernel[k as usize].re = v;
            if k > 0 {
                kernel[fft_len - k as usize].re = v;
            }
        }
        let mut planner = FftPlanner::new();
        let fft = planner.plan_fft_forward(fft_len);
        let ifft = planner.plan_fft_inverse(fft_len);
        fft.process(&mut kernel);
        let scale = 1.0 / fft_len as f64;
        let spectrum = kernel
            .iter()
            .enumerate()
            .map(|(k, c)| {
                // Symmetric real kernel: keep the real part only.
                let f = k.min(fft_len - k) as f64 / fft_len as f64;
                let window = match filter {
                    FilterKind::Ramp => 1.0,
                    FilterKind::HannRamp => 0.5 * (1.0 + (2.0 * PI * f).cos()),
                };
                Complex64::new(c.re * window * scale, 0.0)
            })
            .collect();

        let mut op = Fbp {
            geometry: g.clone(),
            filter,
            cosine_weights,
            fft_len,
            spectrum,
            fft,
            ifft,
            table: None,
        };
        let pixels = g.image_n * g.image_n;
        if pixels * g.n_views() <= TABLE_LIMIT {
            let mut table = Vec::with_capacity(pixels * g.n_views());
            for v in 0..g.n_views() {
                for p in 0..pixels {
                    table.push(op.tap(v, p));
                }
            }
            op.table = Some(table);
        }
        Ok(op)
    }

    pub fn geometry(&self) -> &FanBeamGeometry {
        &self.geometry
    }

    pub fn filter(&self) -> FilterKind {
        self.filter
    }

    pub fn reconstruct(&self, s: &Sinogram) -> Result<Image> {
        s.check_matches(&self.geometry)?;
        let mut x = Image::for_geometry(&self.geometry);
        self.apply(s.as_slice(), x.as_slice_mut());
        Ok(x)
    }

    /// Exact transpose of [`Fbp::reconstruct`].
    pub fn transpose(&self, x: &Image) -> Result<Sinogram> {
        if x.n() != self.geometry.image_n {
            return Err(Error::invalid("image size does not match FBP geometry"));
        }
        let mut s = Sinogram::for_geometry(&self.geometry);
        self.apply_transpose(x.as_slice(), s.as_slice_mut());
        Ok(s)
    }

    /// Flat-buffer form of [`Fbp::reconstruct`].
    pub fn apply(&self, sino: &[f64], out: &mut [f64]) {
        let nd = self.geometry.n_detectors;
        let mut buf = vec![Complex64::new(0.0, 0.0); self.fft_len];
        let mut q = vec![0.0; nd];
        out.iter_mut().for_each(|v| *v = 0.0);
        for v in 0..self.geometry.n_views() {
            let row = &sino[v * nd..(v + 1) * nd];
            for ((b, &p), &w) in buf.iter_mut().zip(row).zip(&self.cosine_weights) {
                *b = Complex64::new(p * w, 0.0);
            }
            self.convolve(&mut buf, &mut q);
            self.backproject_view(v, &q, out);
        }
    }

    /// Flat-buffer form of [`Fbp::transpose`].
    pub fn apply_transpose(&self, img: &[f64], out: &mut [f64]) {
        let nd = self.geometry.n_detectors;
        let mut buf = vec![Complex64::new(0.0, 0.0); self.fft_len];
        let mut q = vec![0.0; nd];
        let mut filtered = vec![0.0; nd];
        for v in 0..self.geometry.n_views() {
            q.iter_mut().for_each(|x| *x = 0.0);
            self.scatter_view(v, img, &mut q);
            for (b, &x) in buf.iter_mut().zip(&q) {
                *b = Complex64::new(x, 0.0);
            }
            self.convolve(&mut buf, &mut filtered);
            let row = &mut out[v * nd..(v + 1) * nd];
            for ((o, &f), &w) in row.iter_mut().zip(&filtered).zip(&self.cosine_weights) {
                *o = f * w;
            }
        }
    }

    /// Linear convolution of the first `n_detectors` entries of `buf`
    /// (zero-padded) with the filter kernel; `buf` is clobbered.
    fn convolve(&self, buf: &mut [Complex64], out: &mut [f64]) {
        let nd = out.len();
        buf[nd..].iter_mut().for_each(|b| *b = Complex64::new(0.0, 0.0));
        self.fft.process(buf);
        for (b, h) in buf.iter_mut().zip(&self.spectrum) {
            *b *= h.re;
        }
        self.ifft.process(buf);
        for (o, b) in out.iter_mut().zip(buf.iter()) {
            *o = b.re;
        }
    }

    fn backproject_view(&self, v: usize, q: &[f64], out: &mut [f64]) {
        let pixels = out.len();
        let nd = q.len() as i32;
        let mut run = |p: usize, t: Tap| {
            let mut acc = 0.0;
            if t.bin >= 0 && t.bin < nd {
                acc += t.w0 * q[t.bin as usize];
            }
            if t.bin + 1 >= 0 && t.bin + 1 < nd {
                acc += t.w1 * q[(t.bin + 1) as usize];
            }
            out[p] += acc;
        };
        match &self.table {
            Some(table) => {
                for (p, &t) in table[v * pixels..(v + 1) * pixels].iter().enumerate() {
                    run(p, t);
                }
            }
            None => {
                for p in 0..pixels {
                    run(p, self.tap(v, p));
                }
            }
        }
    }

    fn scatter_view(&self, v: usize, img: &[f64], q: &mut [f64]) {
        let pixels = img.len();
        let nd = q.len() as i32;
        let mut run = |p: usize, t: Tap| {
            let x = img[p];
            if t.bin >= 0 && t.bin < nd {
                q[t.bin as usize] += t.w0 * x;
            }
            if t.bin + 1 >= 0 && t.bin + 1 < nd {
                q[(t.bin + 1) as usize] += t.w1 * x;
            }
        };
        match &self.table {
            Some(table) => {
                for (p, &t) in table[v * pixels..(v + 1) * pixels].iter().enumerate() {
                    run(p, t);
                }
            }
            None => {
                for p in 0..pixels {
                    run(p, self.tap(v, p));
                }
            }
        }
    }

    fn tap(&self, v: usize, p: usize) -> Tap {
        let g = &self.geometry;
        let n = g.image_n;
        let half = (n as f64 - 1.0) / 2.0;
        let (i, j) = (p / n, p % n);
        let x = (j as f64 - half) * g.pixel_size_mm;
        let y = (half - i as f64) * g.pixel_size_mm;
        let (sb, cb) = g.view_angles_rad[v].sin_cos();
        let sid = g.source_to_isocenter_mm;
        // Vector from source to pixel, expressed against the central ray.
        let (vx, vy) = (x - sid * cb, y - sid * sb);
        let along = -(vx * cb + vy * sb);
        let across = -cb * vy + sb * vx;
        let l2 = vx * vx + vy * vy;
        let gamma = across.atan2(along);
        let u = (gamma - g.detector_angular_offset_rad) / g.detector_angle_step()
            + (g.n_detectors as f64 - 1.0) / 2.0;
        let b = u.floor();
        let frac = u - b;
        let weight = 2.0 * PI / g.n_views() as f64 / l2;
        Tap {
            bin: b as i32,
            w0: weight * (1.0 - frac),
            w1: weight * frac,
        }
    }
}

/// Equiangular ramp kernel `0.5 * (g / sin g)^2 * h(g)` sampled at `k * dgamma`.
fn fan_ramp_tap(k: isize, dgamma: f64) -> f64 {
    if k == 0 {
        1.0 / (8.0 * dgamma * dgamma)
    } else if k % 2 == 0 {
        0.0
    } else {
        let gamma = k as f64 * dgamma;
        let ratio = gamma / gamma.sin();
        -0.5 * ratio * ratio / (PI * PI * gamma * gamma)
    }
}

pub fn fbp(s: &Sinogram, g: &FanBeamGeometry, filter: FilterKind) -> Result<Image> {
    Fbp::new(g, filter)?.reconstruct(s)
}
