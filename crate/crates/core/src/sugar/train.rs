//! Reverse-mode gradients through the unrolled blocks and an Adam trainer.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::net::NetTape;
use super::{DmTransform, SugarOps, SugarParams, SugarState, SCALARS_PER_BLOCK};
use crate::error::{Error, Result};
use crate::geometry::FanBeamGeometry;
use crate::image::{dot, Image, Sinogram};
use crate::transforms::{haar_adjoint, haar_forward};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Precision {
    Single,
    #[default]
    Double,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub learning_rate: f64,
    /// Multiplier applied every `schedule_step_epochs`.
    pub lr_decay: f64,
    pub schedule_step_epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub precision: Precision,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 40,
            learning_rate: 2.5e-4,
            lr_decay: 0.8,
            schedule_step_epochs: 5,
            batch_size: 1,
            seed: 0,
            precision: Precision::Double,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.schedule_step_epochs == 0 || self.batch_size == 0 {
            return Err(Error::invalid("epochs, schedule_step_epochs and batch_size must be >= 1"));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::invalid("learning_rate must be > 0"));
        }
        if !(self.lr_decay > 0.0 && self.lr_decay <= 1.0) {
            return Err(Error::invalid("lr_decay must lie in (0, 1]"));
        }
        if self.precision == Precision::Single {
            return Err(Error::Config(
                "precision = single is not supported; training runs in double precision".into(),
            ));
        }
        Ok(())
    }

    pub fn learning_rate_at(&self, epoch: usize) -> f64 {
        self.learning_rate * self.lr_decay.powi((epoch / self.schedule_step_epochs) as i32)
    }
}

/// One training pair; `init` overrides the default FBP starting image.
#[derive(Clone, Debug)]
pub struct TrainSample {
    pub y: Sinogram,
    pub truth: Image,
    pub init: Option<Image>,
}

#[derive(Clone, Debug)]
pub struct EpochReport {
    pub epoch: usize,
    pub mean_loss: f64,
    pub learning_rate: f64,
}

struct BlockTape {
    x_in: Vec<f64>,
    z_in: Vec<f64>,
    f_in: Vec<f64>,
    m: Vec<f64>,
    x_out: Vec<f64>,
    z_out: Vec<f64>,
    u: Vec<f64>,
    net: Option<NetTape>,
}

fn forward_tape(
    ops: &SugarOps,
    params: &SugarParams,
    y: &[f64],
    init: &SugarState,
) -> Result<(Vec<f64>, Vec<BlockTape>)> {
    let n = init.x.n();
    let len = n * n;
    let mut x = init.x.as_slice().to_vec();
    let mut z = init.z.as_slice().to_vec();
    let mut f = init.f.as_slice().to_vec();
    let mut r = vec![0.0; y.len()];
    let k_last = params.n_blocks() - 1;
    let mut tapes = Vec::with_capacity(params.n_blocks());
    for (k, blk) in params.blocks.iter().enumerate() {
        let mut m = vec![0.0; len];
        ops.correction(&x, y, &mut r, &mut m);
        let x_out: Vec<f64> = (0..len)
            .map(|i| x[i] - blk.a * m[i] - blk.b * (x[i] - z[i] - f[i]))
            .collect();
        let mut tape = BlockTape {
            x_in: x,
            z_in: z,
            f_in: f,
            m,
            x_out,
            z_out: Vec::new(),
            u: Vec::new(),
            net: None,
        };
        // The final DM/EM pair cannot influence the returned image.
        if k < k_last {
            let u: Vec<f64> = tape.x_out.iter().zip(&tape.f_in).map(|(a, b)| a - b).collect();
            let z_out = match params.transform(k) {
                DmTransform::Learned(net) => {
                    let (out, nt) = net.forward_tape(&u, n, blk.threshold)?;
                    tape.net = Some(nt);
                    out
                }
                t => super::dm_apply(t, &u, n, blk.threshold)?,
            };
            tape.u = u;
            tape.z_out = z_out;
        }
        x = tape.x_out.clone();
        if k < k_last {
            z = tape.z_out.clone();
            f = (0..len).map(|i| tape.f_in[i] - blk.eta * (tape.x_out[i] - tape.z_out[i])).collect();
        } else {
            z = Vec::new();
            f = Vec::new();
        }
        tapes.push(tape);
    }
    Ok((x, tapes))
}

/// Gradient of DM w.r.t. its input and threshold for the analytic transforms.
fn dm_backward_analytic(t: &DmTransform, u: &[f64], n: usize, eps: f64, g_z: &[f64]) -> Result<(Vec<f64>, f64)> {
    match t {
        DmTransform::Identity => {
            let mut g_eps = 0.0;
            let g_u = u
                .iter()
                .zip(g_z)
                .map(|(&v, &g)| {
                    if v.abs() > eps {
                        g_eps -= v.signum() * g;
                        g
                    } else {
                        0.0
                    }
                })
                .collect();
            Ok((g_u, g_eps))
        }
        DmTransform::Haar { levels } => {
            let c = haar_forward(&Image::from_vec(n, 1.0, u.to_vec())?, *levels)?;
            let mut gc = haar_forward(&Image::from_vec(n, 1.0, g_z.to_vec())?, *levels)?;
            let mut g_eps = 0.0;
            for (g, &v) in gc.iter_mut().zip(c.iter()) {
                if v.abs() > eps {
                    g_eps -= v.signum() * *g;
                } else {
                    *g = 0.0;
                }
            }
            Ok((haar_adjoint(&gc, 1.0)?.as_slice().to_vec(), g_eps))
        }
        DmTransform::Learned(_) => unreachable!("learned transforms use the network tape"),
    }
}

/// Mean squared error of `sugar_forward` against `truth` and its gradient
/// with respect to the flattened parameters (see [`SugarParams::to_flat`]).
pub fn loss_and_gradient(
    ops: &SugarOps,
    params: &SugarParams,
    y: &Sinogram,
    init: &SugarState,
    truth: &Image,
) -> Result<(f64, Vec<f64>)> {
    params.validate()?;
    ops.check_state(init, y)?;
    init.x.check_same_shape(truth, "truth")?;
    params.transform(0).check_size(init.x.n())?;
    let n = init.x.n();
    let len = n * n;
    let (x_k, tapes) = forward_tape(ops, params, y.as_slice(), init)?;
    let t = truth.as_slice();
    let loss = x_k.iter().zip(t).map(|(a, b)| (a - b) * (a - b)).sum::<f64>() / len as f64;

    let mut grad = vec![0.0; params.len()];
    let mut g_x: Vec<f64> = x_k.iter().zip(t).map(|(a, b)| 2.0 * (a - b) / len as f64).collect();
    let mut g_z = vec![0.0; len];
    let mut g_f = vec![0.0; len];
    let mut s_buf = vec![0.0; y.as_slice().len()];
    let mut back = vec![0.0; len];
    let k_last = params.n_blocks() - 1;

    for k in (0..params.n_blocks()).rev() {
        let blk = params.blocks[k];
        let tp = &tapes[k];
        let base = SCALARS_PER_BLOCK * k;
        let mut g_xt = g_x.clone();
        let mut g_u = vec![0.0; len];
        if k < k_last {
            // EM: f' = f - eta (x' - z')
            grad[base + 2] = -(0..len)
                .map(|i| g_f[i] * (tp.x_out[i] - tp.z_out[i]))
                .sum::<f64>();
            let g_zt: Vec<f64> = (0..len).map(|i| g_z[i] + blk.eta * g_f[i]).collect();
            for i in 0..len {
                g_xt[i] -= blk.eta * g_f[i];
            }
            // DM: z' = Q*(g_eps(Q u)), u = x' - f
            let (gu, g_eps) = match params.transform(k) {
                DmTransform::Learned(net) => {
                    let ti = if params.transforms.len() == 1 { 0 } else { k };
                    let off = params.net_offset(ti);
                    let wl = net.weights().len();
                    let tape = tp.net.as_ref().expect("tape recorded for learned DM");
                    net.backward(tape, &g_zt, blk.threshold, &mut grad[off..off + wl])
                }
                t => dm_backward_analytic(t, &tp.u, n, blk.threshold, &g_zt)?,
            };
            if params.learn_threshold {
                grad[base + 3] = g_eps;
            }
            for i in 0..len {
                g_xt[i] += gu[i];
            }
            g_u = gu;
        }
        // RM: x' = x - a m - b (x - z - f), m = M (A x - y)
        grad[base] = -dot(&g_xt, &tp.m);
        grad[base + 1] = -(0..len)
            .map(|i| g_xt[i] * (tp.x_in[i] - tp.z_in[i] - tp.f_in[i]))
            .sum::<f64>();
        let scaled: Vec<f64> = g_xt.iter().map(|v| -blk.a * v).collect();
        ops.correction_adjoint(&scaled, &mut s_buf, &mut back);
        for i in 0..len {
            let gxt = g_xt[i];
            g_x[i] = (1.0 - blk.b) * gxt + back[i];
            g_z[i] = blk.b * gxt;
            g_f[i] = g_f[i] - g_u[i] + blk.b * gxt;
        }
    }
    if !loss.is_finite() || grad.iter().any(|g| !g.is_finite()) {
        return Err(Error::Numerical {
            message: "non-finite loss or gradient".into(),
            trace: None,
        });
    }
    Ok((loss, grad))
}

/// Per-coordinate step scales so that Adam moves each parameter relative to
/// its natural magnitude (the RM step `a` can be many orders below 1).
fn step_scales(params: &SugarParams) -> Vec<f64> {
    let mut s = vec![1.0; params.len()];
    for (k, b) in params.blocks.iter().enumerate() {
        let base = SCALARS_PER_BLOCK * k;
        s[base] = b.a.abs().max(1e-12);
        s[base + 1] = b.b.abs().max(1e-3);
        s[base + 2] = b.eta.abs().max(1e-3);
    }
    s
}

struct Adam {
    m: Vec<f64>,
    v: Vec<f64>,
    t: i32,
}

impl Adam {
    const B1: f64 = 0.9;
    const B2: f64 = 0.999;
    const EPS: f64 = 1e-8;

    fn new(len: usize) -> Self {
        Adam { m: vec![0.0; len], v: vec![0.0; len], t: 0 }
    }

    fn step(&mut self, theta: &mut [f64], grad: &[f64], scale: &[f64], lr: f64) {
        self.t += 1;
        let c1 = 1.0 - Self::B1.powi(self.t);
        let c2 = 1.0 - Self::B2.powi(self.t);
        for i in 0..theta.len() {
            // Gradient in the rescaled coordinate theta / scale.
            let g = grad[i] * scale[i];
            self.m[i] = Self::B1 * self.m[i] + (1.0 - Self::B1) * g;
            self.v[i] = Self::B2 * self.v[i] + (1.0 - Self::B2) * g * g;
            let mh = self.m[i] / c1;
            let vh = self.v[i] / c2;
            theta[i] -= scale[i] * lr * mh / (vh.sqrt() + Self::EPS);
        }
    }
}

pub fn train_sugar(
    dataset: &[TrainSample],
    g: &FanBeamGeometry,
    cfg: &TrainConfig,
    init: SugarParams,
) -> Result<(SugarParams, Vec<f64>)> {
    train_sugar_with(dataset, g, cfg, init, |_| {})
}

/// As [`train_sugar`], reporting each finished epoch to `progress`.
pub fn train_sugar_with<F>(
    dataset: &[TrainSample],
    g: &FanBeamGeometry,
    cfg: &TrainConfig,
    init: SugarParams,
    mut progress: F,
) -> Result<(SugarParams, Vec<f64>)>
where
    F: FnMut(&EpochReport),
{
    cfg.validate()?;
    init.validate()?;
    if dataset.is_empty() {
        return Err(Error::invalid("training set is empty"));
    }
    let ops = SugarOps::for_params(g, &init)?;
    let states = dataset
        .iter()
        .map(|s| {
            s.truth.check_same_shape(&Image::for_geometry(g), "truth")?;
            match &s.init {
                Some(x0) => Ok(SugarState::from_image(x0.clone())),
                None => Ok(SugarState::from_image(ops.fbp().reconstruct(&s.y)?)),
            }
        })
        .collect::<Result<Vec<_>>>()?;

    let mut params = init;
    let mut theta = params.to_flat();
    let scales = step_scales(&params);
    let mut adam = Adam::new(theta.len());
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = (0..dataset.len()).collect();
    let mut history = Vec::with_capacity(cfg.epochs);

    for epoch in 0..cfg.epochs {
        let lr = cfg.learning_rate_at(epoch);
        order.shuffle(&mut rng);
        let mut total = 0.0;
        for batch in order.chunks(cfg.batch_size) {
            let mut acc = vec![0.0; theta.len()];
            for &i in batch {
                let res = loss_and_gradient(&ops, &params, &dataset[i].y, &states[i], &dataset[i].truth);
                let (loss, grad) = match res {
                    Ok(v) => v,
                    Err(Error::Numerical { message, .. }) => {
                        return Err(Error::Training { message, history })
                    }
                    Err(e) => return Err(e),
                };
                total += loss;
                for (a, g) in acc.iter_mut().zip(&grad) {
                    *a += g / batch.len() as f64;
                }
            }
            adam.step(&mut theta, &acc, &scales, lr);
            for k in 0..params.n_blocks() {
                let t = &mut theta[SCALARS_PER_BLOCK * k + 3];
                *t = t.max(0.0);
            }
            params.set_flat(&theta)?;
        }
        let mean = total / dataset.len() as f64;
        history.push(mean);
        if !mean.is_finite() {
            return Err(Error::Training {
                message: format!("non-finite mean loss in epoch {epoch}"),
                history,
            });
        }
        progress(&EpochReport {
            epoch,
            mean_loss: mean,
            learning_rate: lr,
        });
    }
    Ok((params, history))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{random_ellipse_phantom, PhantomSpec};
    use crate::geometry::make_desk_geometry;
    use crate::projector::forward_project;
    use crate::sugar::{AdjointMode, SugarBlock, SugarInit, TransformSpec};
    use rand::Rng;

    fn sample(g: &FanBeamGeometry, seed: u64) -> TrainSample {
        let mut truth = random_ellipse_phantom(&PhantomSpec::random(g.image_n, seed, 4)).unwrap();
        truth.pixel_size_mm = g.pixel_size_mm;
        let y = forward_project(&truth, g).unwrap();
        TrainSample { y, truth, init: None }
    }

    fn perturbed(p: &SugarParams, seed: u64) -> SugarParams {
        let mut q = p.clone();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for b in &mut q.blocks {
            b.threshold = rng.gen_range(0.005..0.02);
            b.eta = rng.gen_range(0.6..1.2);
        }
        q
    }

    fn fd_check(p: &SugarParams, g: &FanBeamGeometry, idx: &[usize]) -> f64 {
        let s = sample(g, 3);
        let ops = SugarOps::for_params(g, p).unwrap();
        let init = SugarState::from_fbp(&s.y, g, p.filter).unwrap();
        let (_, grad) = loss_and_gradient(&ops, p, &s.y, &init, &s.truth).unwrap();
        let theta = p.to_flat();
        let mut worst: f64 = 0.0;
        for &i in idx {
            let h = 1e-5 * theta[i].abs().max(1e-2);
            let eval = |d: f64| {
                let mut t = theta.clone();
                t[i] += d;
                let mut q = p.clone();
                q.set_flat(&t).unwrap();
                loss_and_gradient(&ops, &q, &s.y, &init, &s.truth).unwrap().0
            };
            let fd = (eval(h) - eval(-h)) / (2.0 * h);
            let denom = grad[i].abs().max(fd.abs());
            if denom > 1e-12 {
                worst = worst.max((grad[i] - fd).abs() / denom);
            }
        }
        worst
    }

    #[test]
    fn gradients_match_finite_differences() {
        let g = make_desk_geometry(16, 12, 360.0).unwrap();
        for (mode, spec) in [
            (AdjointMode::Fbp, TransformSpec::Learned { channels: vec![2, 3], residual: true }),
            (AdjointMode::Exact, TransformSpec::Haar { levels: 2 }),
            (AdjointMode::Fbp, TransformSpec::Identity),
        ] {
            let init = SugarInit { n_blocks: 3, adjoint_mode: mode, transform: spec, seed: 4, ..Default::default() };
            let p = perturbed(&SugarParams::initialize(&g, &init).unwrap(), 8);
            let idx: Vec<usize> = (0..p.len()).step_by(7).chain(0..12).collect();
            let worst = fd_check(&p, &g, &idx);
            assert!(worst < 1e-4, "{mode:?}: {worst}");
        }
    }

    #[test]
    fn config_validation() {
        TrainConfig::default().validate().unwrap();
        for c in [
            TrainConfig { epochs: 0, ..Default::default() },
            TrainConfig { learning_rate: 0.0, ..Default::default() },
            TrainConfig { lr_decay: 1.5, ..Default::default() },
            TrainConfig { batch_size: 0, ..Default::default() },
        ] {
            assert!(c.validate().is_err());
        }
        let single = TrainConfig { precision: Precision::Single, ..Default::default() };
        assert!(matches!(single.validate(), Err(Error::Config(_))));
        let c = TrainConfig { learning_rate: 1.0, lr_decay: 0.5, schedule_step_epochs: 2, ..Default::default() };
        assert_eq!(c.learning_rate_at(0), 1.0);
        assert_eq!(c.learning_rate_at(3), 0.5);
        assert_eq!(c.learning_rate_at(4), 0.25);
    }

    fn small_setup() -> (FanBeamGeometry, SugarParams, Vec<TrainSample>) {
        let g = make_desk_geometry(16, 12, 360.0).unwrap();
        let init = SugarInit {
            n_blocks: 2,
            transform: TransformSpec::Learned { channels: vec![4, 4], residual: true },
            ..Default::default()
        };
        let p = SugarParams::initialize(&g, &init).unwrap();
        (g.clone(), p, vec![sample(&g, 1)])
    }

    #[test]
    fn overfits_one_sample() {
        let (g, p, data) = small_setup();
        let cfg = TrainConfig { epochs: 60, learning_rate: 3e-3, lr_decay: 1.0, ..Default::default() };
        let (_, hist) = train_sugar(&data, &g, &cfg, p).unwrap();
        assert!(hist[hist.len() - 1] <= 0.5 * hist[0], "{hist:?}");
    }

    #[test]
    fn training_is_deterministic() {
        let (g, p, data) = small_setup();
        let cfg = TrainConfig { epochs: 3, learning_rate: 1e-3, seed: 5, ..Default::default() };
        let (pa, ha) = train_sugar(&data, &g, &cfg, p.clone()).unwrap();
        let (pb, hb) = train_sugar(&data, &g, &cfg, p).unwrap();
        assert_eq!(ha, hb);
        assert_eq!(pa.to_flat(), pb.to_flat());
    }

    #[test]
    fn threshold_stays_nonnegative() {
        let (g, mut p, data) = small_setup();
        for b in &mut p.blocks {
            b.threshold = 0.0;
        }
        let cfg = TrainConfig { epochs: 5, learning_rate: 5e-2, lr_decay: 1.0, ..Default::default() };
        let (q, _) = train_sugar(&data, &g, &cfg, p).unwrap();
        assert!(q.blocks.iter().all(|b| b.threshold >= 0.0));
    }

    #[test]
    fn divergence_reports_history() {
        let (g, mut p, data) = small_setup();
        p.blocks = vec![SugarBlock { a: 1e150, b: 0.0, eta: 1.0, threshold: 0.0 }; 2];
        let cfg = TrainConfig { epochs: 2, ..Default::default() };
        match train_sugar(&data, &g, &cfg, p) {
            Err(Error::Training { .. }) => {}
            other => panic!("expected training failure, got {other:?}"),
        }
    }

    #[test]
    fn rejects_empty_dataset_and_single_precision() {
        let (g, p, _) = small_setup();
        assert!(train_sugar(&[], &g, &TrainConfig::default(), p.clone()).is_err());
        let cfg = TrainConfig { precision: Precision::Single, ..Default::default() };
        let data = vec![sample(&g, 2)];
        assert!(train_sugar(&data, &g, &cfg, p).is_err());
    }
}
