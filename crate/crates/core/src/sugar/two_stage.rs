//! Low-resolution estimation followed by high-resolution refinement.

use super::{sugar_forward_with, EpochReport, SugarInit, SugarOps, SugarParams, SugarState};
use super::{train_sugar_with, TrainConfig, TrainSample};
use crate::data::downsample_mean;
use crate::error::{Error, Result};
use crate::geometry::FanBeamGeometry;
use crate::image::{Image, Sinogram};

/// Bilinear upsampling by an integer factor. Output pixel centres map to
/// `(i + 0.5) / factor - 0.5` in input coordinates; edges are clamped.
pub fn upsample(x: &Image, factor: usize) -> Result<Image> {
    if factor < 1 {
        return Err(Error::invalid("upsampling factor must be >= 1"));
    }
    if factor == 1 {
        return Ok(x.clone());
    }
    let n = x.n();
    let big = n * factor;
    let src = x.as_slice();
    let coord = |i: usize| {
        let s = ((i as f64 + 0.5) / factor as f64 - 0.5).clamp(0.0, (n - 1) as f64);
        let i0 = (s.floor() as usize).min(n - 1);
        let i1 = (i0 + 1).min(n - 1);
        (i0, i1, s - i0 as f64)
    };
    let taps: Vec<(usize, usize, f64)> = (0..big).map(coord).collect();
    let mut out = vec![0.0; big * big];
    for (i, &(r0, r1, wr)) in taps.iter().enumerate() {
        for (j, &(c0, c1, wc)) in taps.iter().enumerate() {
            let top = src[r0 * n + c0] * (1.0 - wc) + src[r0 * n + c1] * wc;
            let bot = src[r1 * n + c0] * (1.0 - wc) + src[r1 * n + c1] * wc;
            out[i * big + j] = top * (1.0 - wr) + bot * wr;
        }
    }
    Image::from_vec(big, x.pixel_size_mm / factor as f64, out)
}

#[derive(Clone, Debug)]
pub struct TwoStageOutput {
    pub le: Image,
    pub upsampled: Image,
    pub hr: Image,
}

fn le_factor(g: &FanBeamGeometry, le_n: usize) -> Result<usize> {
    if le_n == 0 || le_n > g.image_n || !g.image_n.is_multiple_of(le_n) {
        return Err(Error::invalid(format!(
            "low-resolution size {le_n} must divide the image size {}",
            g.image_n
        )));
    }
    Ok(g.image_n / le_n)
}

pub fn two_stage_recon(
    y: &Sinogram,
    g: &FanBeamGeometry,
    le_params: &SugarParams,
    hr_params: &SugarParams,
    le_n: usize,
) -> Result<Image> {
    Ok(two_stage_recon_detailed(y, g, le_params, hr_params, le_n)?.hr)
}

/// Two-stage reconstruction that also returns the intermediate images.
pub fn two_stage_recon_detailed(
    y: &Sinogram,
    g: &FanBeamGeometry,
    le_params: &SugarParams,
    hr_params: &SugarParams,
    le_n: usize,
) -> Result<TwoStageOutput> {
    let factor = le_factor(g, le_n)?;
    y.check_matches(g)?;
    let g_le = g.with_image_size(le_n)?;
    let le_ops = SugarOps::for_params(&g_le, le_params)?;
    let hr_ops = SugarOps::for_params(g, hr_params)?;
    run_two_stage(&le_ops, &hr_ops, y, le_params, hr_params, factor)
}

fn run_two_stage(
    le_ops: &SugarOps,
    hr_ops: &SugarOps,
    y: &Sinogram,
    le_params: &SugarParams,
    hr_params: &SugarParams,
    factor: usize,
) -> Result<TwoStageOutput> {
    let le_init = SugarState::from_image(le_ops.fbp().reconstruct(y)?);
    let le = sugar_forward_with(le_ops, y, le_params, &le_init, |_, _| {})?.x;
    let upsampled = upsample(&le, factor)?;
    let hr_init = SugarState::from_image(upsampled.clone());
    let hr = sugar_forward_with(hr_ops, y, hr_params, &hr_init, |_, _| {})?.x;
    Ok(TwoStageOutput { le, upsampled, hr })
}

/// Trained low- and high-resolution networks.
#[derive(Clone, Debug)]
pub struct TwoStageModel {
    pub le_n: usize,
    pub le: SugarParams,
    pub hr: SugarParams,
    pub le_history: Vec<f64>,
    pub hr_history: Vec<f64>,
}

impl TwoStageModel {
    pub fn reconstruct(&self, y: &Sinogram, g: &FanBeamGeometry) -> Result<TwoStageOutput> {
        two_stage_recon_detailed(y, g, &self.le, &self.hr, self.le_n)
    }

    /// Reconstruct many sinograms with one set of prepared operators.
    pub fn reconstruct_all(&self, ys: &[Sinogram], g: &FanBeamGeometry) -> Result<Vec<TwoStageOutput>> {
        let factor = le_factor(g, self.le_n)?;
        let g_le = g.with_image_size(self.le_n)?;
        let le_ops = SugarOps::for_params(&g_le, &self.le)?;
        let hr_ops = SugarOps::for_params(g, &self.hr)?;
        ys.iter()
            .map(|y| {
                y.check_matches(g)?;
                run_two_stage(&le_ops, &hr_ops, y, &self.le, &self.hr, factor)
            })
            .collect()
    }
}

/// Train the LE network on mean-downsampled truths, then the HR network
/// starting from the upsampled LE outputs. `progress` receives a stage tag
/// (`"le"` or `"hr"`) with every epoch report.
pub fn train_two_stage<F>(
    data: &[(Sinogram, Image)],
    g: &FanBeamGeometry,
    le_n: usize,
    le_init: &SugarInit,
    hr_init: &SugarInit,
    cfg: &TrainConfig,
    mut progress: F,
) -> Result<TwoStageModel>
where
    F: FnMut(&str, &EpochReport),
{
    let factor = le_factor(g, le_n)?;
    let g_le = g.with_image_size(le_n)?;
    let le_samples = data
        .iter()
        .map(|(y, t)| {
            Ok(TrainSample {
                y: y.clone(),
                truth: downsample_mean(t, factor)?,
                init: None,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let le0 = SugarParams::initialize(&g_le, le_init)?;
    let (le, le_history) = train_sugar_with(&le_samples, &g_le, cfg, le0, |r| progress("le", r))?;

    let le_ops = SugarOps::for_params(&g_le, &le)?;
    let hr_samples = data
        .iter()
        .map(|(y, t)| {
            let init = SugarState::from_image(le_ops.fbp().reconstruct(y)?);
            let x = sugar_forward_with(&le_ops, y, &le, &init, |_, _| {})?.x;
            Ok(TrainSample {
                y: y.clone(),
                truth: t.clone(),
                init: Some(upsample(&x, factor)?),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let hr0 = SugarParams::initialize(g, hr_init)?;
    let (hr, hr_history) = train_sugar_with(&hr_samples, g, cfg, hr0, |r| progress("hr", r))?;
    Ok(TwoStageModel {
        le_n,
        le,
        hr,
        le_history,
        hr_history,
    })
}
