//! Classical iterative reconstruction: the split-Bregman scheme and a
//! Chambolle-Pock primal-dual TV baseline.

mod cppd;
mod split_bregman;
mod tv_prox;

pub use cppd::{cppd_tv_recon, cppd_tv_solve, CppdConfig};
pub use split_bregman::{
    split_bregman_recon, split_bregman_solve, split_bregman_steps, SbIterate, SplitBregmanConfig,
    StepSizes, X0Mode, POWER_ITERS,
};
pub use tv_prox::TvProx;

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::FanBeamGeometry;
use crate::image::{Image, Sinogram};
use crate::projector::{LinearOperator, Projector};
use crate::transforms::SparsifyingTransform;

/// Per-iteration diagnostics. `residual` is `||x - z||_2` for split-Bregman
/// and the primal step length `||x_{k+1} - x_k||_2` for primal-dual.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct SolverTrace {
    pub objective: Vec<f64>,
    pub data_fidelity: Vec<f64>,
    pub residual: Vec<f64>,
}

impl SolverTrace {
    pub fn len(&self) -> usize {
        self.objective.len()
    }

    pub fn is_empty(&self) -> bool {
        self.objective.is_empty()
    }

    fn push(&mut self, objective: f64, fidelity: f64, residual: f64) {
        self.objective.push(objective);
        self.data_fidelity.push(fidelity);
        self.residual.push(residual);
    }

    pub fn write_csv<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        writeln!(w, "iteration,objective,data_fidelity,residual")?;
        for i in 0..self.len() {
            writeln!(
                w,
                "{},{:e},{:e},{:e}",
                i + 1,
                self.objective[i],
                self.data_fidelity[i],
                self.residual[i]
            )?;
        }
        Ok(())
    }
}

/// `0.5 ||y - A x||^2 + lambda ||H x||_1`.
pub fn objective(
    x: &Image,
    y: &Sinogram,
    g: &FanBeamGeometry,
    h: &SparsifyingTransform,
    lambda: f64,
) -> Result<f64> {
    y.check_matches(g)?;
    let ax = Projector::new(g)?.forward_project(x)?;
    let fid = data_fidelity(ax.as_slice(), y.as_slice());
    Ok(fid + lambda * h.l1_of(x)?)
}

pub(crate) fn data_fidelity(ax: &[f64], y: &[f64]) -> f64 {
    0.5 * ax.iter().zip(y).map(|(a, b)| (a - b) * (a - b)).sum::<f64>()
}

pub(crate) fn check_operator(op: &dyn LinearOperator, y: &[f64], x0: &Image) -> Result<()> {
    if y.len() != op.output_len() {
        return Err(Error::invalid(format!(
            "data has {} entries, operator range has {}",
            y.len(),
            op.output_len()
        )));
    }
    if x0.as_slice().len() != op.input_len() {
        return Err(Error::invalid("initial image does not match operator domain"));
    }
    Ok(())
}

fn divergence_error(message: String, trace: SolverTrace) -> Error {
    Error::Numerical {
        message,
        trace: Some(Box::new(trace)),
    }
}

/// Guard shared by both solvers: non-finite, or more than 1e6 times the
/// starting objective.
pub(crate) fn check_divergence(obj: f64, initial: f64, it: usize, trace: &SolverTrace) -> Result<()> {
    if !obj.is_finite() || (initial > 0.0 && obj > 1e6 * initial) {
        return Err(divergence_error(
            format!("objective {obj:e} at iteration {} (initial {initial:e})", it + 1),
            trace.clone(),
        ));
    }
    Ok(())
}
