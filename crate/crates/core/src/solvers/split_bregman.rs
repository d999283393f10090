use serde::{Deserialize, Serialize};

use super::{check_divergence, check_operator, data_fidelity, SolverTrace, TvProx};
use crate::error::{Error, Result};
use crate::geometry::FanBeamGeometry;
use crate::image::{norm2, Image, Sinogram};
use crate::projector::{normal_operator_norm, Fbp, FilterKind, LinearOperator, Projector};
use crate::transforms::SparsifyingTransform;

/// Number of power iterations used to estimate `||A^T A||_2`.
pub const POWER_ITERS: usize = 50;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum X0Mode {
    Zero,
    #[default]
    Fbp,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SplitBregmanConfig {
    pub lambda: f64,
    pub lambda1: f64,
    pub eta: f64,
    pub n_iters: usize,
    pub transform: SparsifyingTransform,
    pub x0_mode: X0Mode,
    /// Inner dual iterations of the TV proximal step (gradient transform only).
    pub tv_inner_iters: usize,
}

/// Two-level Haar sparsity; weights tuned for the desk geometry with line
/// integrals in millimetres.
impl Default for SplitBregmanConfig {
    fn default() -> Self {
        SplitBregmanConfig {
            lambda: 3.0,
            lambda1: 1000.0,
            eta: 1.0,
            n_iters: 1500,
            transform: SparsifyingTransform::Haar { levels: 2 },
            x0_mode: X0Mode::Fbp,
            tv_inner_iters: 10,
        }
    }
}

impl SplitBregmanConfig {
    /// The anisotropic TV baseline: default weights with the gradient transform.
    pub fn tv() -> Self {
        SplitBregmanConfig {
            transform: SparsifyingTransform::Gradient,
            ..Default::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return Err(Error::invalid("lambda must be >= 0"));
        }
        if !(self.lambda1 > 0.0 && self.lambda1.is_finite()) {
            return Err(Error::invalid("lambda1 must be > 0"));
        }
        if !(self.eta > 0.0 && self.eta.is_finite()) {
            return Err(Error::invalid("eta must be > 0"));
        }
        if self.n_iters == 0 {
            return Err(Error::invalid("n_iters must be >= 1"));
        }
        if let SparsifyingTransform::Haar { levels } = self.transform {
            if levels == 0 {
                return Err(Error::invalid("Haar transform needs at least one level"));
            }
        }
        Ok(())
    }

    /// Shrinkage threshold `2 lambda / lambda1`.
    pub fn threshold(&self) -> f64 {
        2.0 * self.lambda / self.lambda1
    }
}

/// Scalar steps of the linearized x-update: `a = 1 / L`, `b = lambda1 / L`
/// with `L = ||A^T A||_2 + lambda1`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepSizes {
    pub a: f64,
    pub b: f64,
    pub lipschitz: f64,
}

pub fn split_bregman_steps(op: &dyn LinearOperator, lambda1: f64) -> StepSizes {
    let lipschitz = normal_operator_norm(op, POWER_ITERS) + lambda1;
    StepSizes {
        a: 1.0 / lipschitz,
        b: lambda1 / lipschitz,
        lipschitz,
    }
}

/// Iterates after one full x / z / f sweep.
pub struct SbIterate<'a> {
    pub x: &'a [f64],
    pub z: &'a [f64],
    pub f: &'a [f64],
}

pub fn split_bregman_recon(
    y: &Sinogram,
    g: &FanBeamGeometry,
    cfg: &SplitBregmanConfig,
) -> Result<(Image, SolverTrace)> {
    cfg.validate()?;
    y.check_matches(g)?;
    let proj = Projector::new(g)?;
    let x0 = match cfg.x0_mode {
        X0Mode::Zero => Image::for_geometry(g),
        X0Mode::Fbp => Fbp::new(g, FilterKind::Ramp)?.reconstruct(y)?,
    };
    let steps = split_bregman_steps(&proj, cfg.lambda1);
    split_bregman_solve(&proj, y.as_slice(), x0, cfg, steps, |_, _| {})
}

/// Split-Bregman on an arbitrary forward operator, starting from
/// `x = z = x0`, `f = 0`. `observer` sees the iterates after every sweep.
pub fn split_bregman_solve<F>(
    op: &dyn LinearOperator,
    y: &[f64],
    x0: Image,
    cfg: &SplitBregmanConfig,
    steps: StepSizes,
    mut observer: F,
) -> Result<(Image, SolverTrace)>
where
    F: FnMut(usize, SbIterate<'_>),
{
    cfg.validate()?;
    check_operator(op, y, &x0)?;
    let n = x0.n();
    let ps = x0.pixel_size_mm;
    if let SparsifyingTransform::Haar { levels } = cfg.transform {
        if !n.is_multiple_of(1 << levels) {
            return Err(Error::invalid(format!(
                "image side {n} not divisible by 2^{levels} for Haar transform"
            )));
        }
    }
    let tau = cfg.threshold();
    let len = n * n;

    let mut x = x0;
    let mut z = x.as_slice().to_vec();
    let mut f = vec![0.0; len];
    let mut ax = op.apply_vec(x.as_slice());
    let mut r = vec![0.0; y.len()];
    let mut grad = vec![0.0; len];
    let mut u = Image::zeros(n, ps);
    let mut tv = TvProx::new(n, cfg.tv_inner_iters);
    let reg = |img: &Image| cfg.transform.l1_of(img);

    let initial = data_fidelity(&ax, y) + cfg.lambda * reg(&x)?;
    let mut trace = SolverTrace::default();

    for it in 0..cfg.n_iters {
        // x-update: one gradient step on the augmented data term.
        for ((ri, &a), &b) in r.iter_mut().zip(&ax).zip(y) {
            *ri = a - b;
        }
        op.apply_adjoint(&r, &mut grad);
        for (k, xv) in x.as_slice_mut().iter_mut().enumerate() {
            *xv -= steps.a * grad[k] + steps.b * (*xv - z[k] - f[k]);
        }

        // z-update: shrinkage in the transform domain.
        for (k, uv) in u.as_slice_mut().iter_mut().enumerate() {
            *uv = x.as_slice()[k] - f[k];
        }
        if cfg.transform.is_orthonormal() {
            let mut c = cfg.transform.forward(&u)?;
            c.soft_threshold(tau)?;
            z.copy_from_slice(cfg.transform.adjoint(&c, ps)?.as_slice());
        } else {
            tv.apply(u.as_slice(), tau, &mut z);
        }

        // f-update: error feedback.
        for k in 0..len {
            f[k] -= cfg.eta * (x.as_slice()[k] - z[k]);
        }

        op.apply(x.as_slice(), &mut ax);
        let fid = data_fidelity(&ax, y);
        let obj = fid + cfg.lambda * reg(&x)?;
        let gap: Vec<f64> = x.as_slice().iter().zip(&z).map(|(a, b)| a - b).collect();
        trace.push(obj, fid, norm2(&gap));
        check_divergence(obj, initial, it, &trace)?;
        observer(
            it,
            SbIterate {
                x: x.as_slice(),
                z: &z,
                f: &f,
            },
        );
    }
    Ok((x, trace))
}
