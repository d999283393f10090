//! Synthetic datasets and the staged-vs-direct / HR ablation experiments.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::config::ExperimentConfig;
use crate::data::{add_noise, mse, psnr, PhantomKind};
use crate::error::Result;
use crate::geometry::FanBeamGeometry;
use crate::image::{Image, Sinogram};
use crate::projector::Projector;
use crate::sugar::{
    sugar_forward_with, train_two_stage, train_sugar_with, EpochReport, SugarInit, SugarOps,
    SugarParams, SugarState, TrainSample, TwoStageModel,
};

pub type Pair = (Sinogram, Image);

#[derive(Clone, Debug)]
pub struct Dataset {
    pub train: Vec<Pair>,
    pub test: Vec<Pair>,
}

/// Simulate one phantom and its (optionally noisy) sinogram.
pub fn simulate_pair(
    cfg: &ExperimentConfig,
    g: &FanBeamGeometry,
    proj: &Projector,
    kind: PhantomKind,
    seed: u64,
) -> Result<Pair> {
    let truth = cfg.phantom.spec(kind, g.image_n, seed).generate(g.pixel_size_mm)?;
    let clean = proj.forward_project(&truth)?;
    let noisy = add_noise(&clean, cfg.noise.kind, cfg.noise.level, seed ^ 0x006e_6f69_7365)?;
    Ok((noisy.sinogram, truth))
}

/// Random-ellipse training and held-out sets drawn from one master seed.
pub fn synthetic_dataset(cfg: &ExperimentConfig, g: &FanBeamGeometry, seed: u64) -> Result<Dataset> {
    let proj = Projector::new(g)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut draw = |count: usize| -> Result<Vec<Pair>> {
        let seeds: Vec<u64> = (0..count).map(|_| rng.gen::<u64>() >> 1).collect();
        seeds
            .into_iter()
            .map(|s| simulate_pair(cfg, g, &proj, PhantomKind::RandomEllipses, s))
            .collect()
    };
    let train = draw(cfg.sugar.n_train)?;
    let test = draw(cfg.sugar.n_test)?;
    Ok(Dataset { train, test })
}

/// Seeds of the network initializations and the shuffling order, offset by
/// the run seed so that `--seed` controls every random draw.
pub fn seeded(cfg: &ExperimentConfig, seed: u64) -> (SugarInit, SugarInit, crate::sugar::TrainConfig) {
    let mut le = cfg.sugar.le.clone();
    let mut hr = cfg.sugar.hr.clone();
    let mut train = cfg.sugar.train.clone();
    le.seed = le.seed.wrapping_add(seed);
    hr.seed = hr.seed.wrapping_add(seed);
    train.seed = train.seed.wrapping_add(seed);
    (le, hr, train)
}

pub fn train_staged<F>(cfg: &ExperimentConfig, g: &FanBeamGeometry, data: &[Pair], seed: u64, progress: F) -> Result<TwoStageModel>
where
    F: FnMut(&str, &EpochReport),
{
    let (le, hr, train) = seeded(cfg, seed);
    train_two_stage(data, g, cfg.sugar.le_n, &le, &hr, &train, progress)
}

/// Recipe for single-stage full-resolution training with the combined
/// block budget of both stages.
pub fn direct_init(cfg: &ExperimentConfig, seed: u64) -> SugarInit {
    let (le, hr, _) = seeded(cfg, seed);
    SugarInit {
        n_blocks: le.n_blocks + hr.n_blocks,
        ..hr
    }
}

pub fn train_direct<F>(cfg: &ExperimentConfig, g: &FanBeamGeometry, data: &[Pair], seed: u64, mut progress: F) -> Result<(SugarParams, Vec<f64>)>
where
    F: FnMut(&str, &EpochReport),
{
    let (_, _, train) = seeded(cfg, seed);
    let init = SugarParams::initialize(g, &direct_init(cfg, seed))?;
    let samples: Vec<TrainSample> = data
        .iter()
        .map(|(y, t)| TrainSample { y: y.clone(), truth: t.clone(), init: None })
        .collect();
    train_sugar_with(&samples, g, &train, init, |r| progress("direct", r))
}

/// Single-stage reconstructions from FBP initializations.
pub fn reconstruct_single(params: &SugarParams, g: &FanBeamGeometry, ys: &[Sinogram]) -> Result<Vec<Image>> {
    let ops = SugarOps::for_params(g, params)?;
    ys.iter()
        .map(|y| {
            let init = SugarState::from_image(ops.fbp().reconstruct(y)?);
            Ok(sugar_forward_with(&ops, y, params, &init, |_, _| {})?.x)
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HrRow {
    pub index: usize,
    pub mse_upsampled_le: f64,
    pub mse_hr: f64,
    pub psnr_upsampled_le_db: f64,
    pub psnr_hr_db: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HrAblation {
    pub rows: Vec<HrRow>,
    /// `mse_hr < mse_upsampled_le` for every held-out phantom.
    pub hr_improves_all: bool,
}

pub fn hr_ablation(model: &TwoStageModel, g: &FanBeamGeometry, test: &[Pair]) -> Result<HrAblation> {
    let ys: Vec<Sinogram> = test.iter().map(|(y, _)| y.clone()).collect();
    let outs = model.reconstruct_all(&ys, g)?;
    let rows = outs
        .iter()
        .zip(test)
        .enumerate()
        .map(|(index, (o, (_, t)))| {
            Ok(HrRow {
                index,
                mse_upsampled_le: mse(&o.upsampled, t)?,
                mse_hr: mse(&o.hr, t)?,
                psnr_upsampled_le_db: psnr(&o.upsampled, t)?,
                psnr_hr_db: psnr(&o.hr, t)?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let hr_improves_all = rows.iter().all(|r| r.mse_hr < r.mse_upsampled_le);
    Ok(HrAblation { rows, hr_improves_all })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DirectAblation {
    pub staged_psnr_db: Vec<f64>,
    pub direct_psnr_db: Vec<f64>,
    pub staged_mean_psnr_db: f64,
    pub direct_mean_psnr_db: f64,
    pub staged_params: usize,
    pub direct_params: usize,
    pub staged_ge_direct: bool,
}

pub fn direct_ablation(
    staged: &TwoStageModel,
    direct: &SugarParams,
    g: &FanBeamGeometry,
    test: &[Pair],
) -> Result<DirectAblation> {
    let ys: Vec<Sinogram> = test.iter().map(|(y, _)| y.clone()).collect();
    let s_out = staged.reconstruct_all(&ys, g)?;
    let d_out = reconstruct_single(direct, g, &ys)?;
    let staged_psnr_db = s_out
        .iter()
        .zip(test)
        .map(|(o, (_, t))| psnr(&o.hr, t))
        .collect::<Result<Vec<_>>>()?;
    let direct_psnr_db = d_out
        .iter()
        .zip(test)
        .map(|(x, (_, t))| psnr(x, t))
        .collect::<Result<Vec<_>>>()?;
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    let (sm, dm) = (mean(&staged_psnr_db), mean(&direct_psnr_db));
    Ok(DirectAblation {
        staged_mean_psnr_db: sm,
        direct_mean_psnr_db: dm,
        staged_params: staged.le.len() + staged.hr.len(),
        direct_params: direct.len(),
        staged_ge_direct: sm >= dm,
        staged_psnr_db,
        direct_psnr_db,
    })
}
