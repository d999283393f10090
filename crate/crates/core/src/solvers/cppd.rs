use serde::{Deserialize, Serialize};

use super::{check_divergence, check_operator, data_fidelity, SolverTrace};
use crate::error::{Error, Result};
use crate::geometry::FanBeamGeometry;
use crate::image::{norm2, Image, Sinogram};
use crate::projector::{normal_operator_norm, power_iteration, LinearOperator, Projector};
use crate::transforms::{grad_adjoint_flat, grad_forward_flat};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CppdConfig {
    pub lambda: f64,
    pub n_iters: usize,
}

impl Default for CppdConfig {
    fn default() -> Self {
        CppdConfig {
            lambda: 6.0,
            n_iters: 500,
        }
    }
}

impl CppdConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return Err(Error::invalid("lambda must be >= 0"));
        }
        if self.n_iters == 0 {
            return Err(Error::invalid("n_iters must be >= 1"));
        }
        Ok(())
    }
}

/// Chambolle-Pock for `0.5 ||A x - y||^2 + lambda ||grad x||_1` from `x = 0`.
pub fn cppd_tv_recon(
    y: &Sinogram,
    g: &FanBeamGeometry,
    lambda: f64,
    n_iters: usize,
) -> Result<(Image, SolverTrace)> {
    y.check_matches(g)?;
    let proj = Projector::new(g)?;
    cppd_tv_solve(
        &proj,
        y.as_slice(),
        Image::for_geometry(g),
        &CppdConfig { lambda, n_iters },
    )
}

/// Primal-dual iterations with `K = [A; s grad]`, where `s = ||A|| / sqrt(8)`
/// balances the two blocks. Steps satisfy `sigma * tau * ||K||^2 <= 1` with
/// `||K||` from power iteration (plus a small safety margin).
pub fn cppd_tv_solve(
    op: &dyn LinearOperator,
    y: &[f64],
    x0: Image,
    cfg: &CppdConfig,
) -> Result<(Image, SolverTrace)> {
    cfg.validate()?;
    check_operator(op, y, &x0)?;
    let n = x0.n();
    let len = n * n;
    let m = y.len();

    let a_norm = normal_operator_norm(op, 100).sqrt();
    let s = if a_norm > 0.0 { a_norm / 8f64.sqrt() } else { 1.0 };
    let mut tmp_m = vec![0.0; m];
    let mut tmp_gx = vec![0.0; len];
    let mut tmp_gy = vec![0.0; len];
    let mut tmp_div = vec![0.0; len];
    let k_norm = power_iteration(len, 100, |v, out| {
        op.apply(v, &mut tmp_m);
        op.apply_adjoint(&tmp_m, out);
        grad_forward_flat(v, n, &mut tmp_gx, &mut tmp_gy);
        grad_adjoint_flat(&tmp_gx, &tmp_gy, n, &mut tmp_div);
        for (o, d) in out.iter_mut().zip(&tmp_div) {
            *o += s * s * d;
        }
    })
    .sqrt()
        * 1.01;
    let sigma = 1.0 / k_norm;
    let tau = 1.0 / k_norm;
    let bound = cfg.lambda / s;

    let mut x = x0;
    let mut xbar = x.as_slice().to_vec();
    let mut p = vec![0.0; m];
    let mut qx = vec![0.0; len];
    let mut qy = vec![0.0; len];
    let mut ax = vec![0.0; m];
    let mut atp = vec![0.0; len];
    let mut gx = vec![0.0; len];
    let mut gy = vec![0.0; len];
    let mut div = vec![0.0; len];
    let mut step = vec![0.0; len];

    let objective = |img: &[f64], ax: &[f64], gx: &mut [f64], gy: &mut [f64]| {
        grad_forward_flat(img, n, gx, gy);
        let tv: f64 = gx.iter().chain(gy.iter()).map(|v| v.abs()).sum();
        let fid = data_fidelity(ax, y);
        (fid + cfg.lambda * tv, fid)
    };
    op.apply(x.as_slice(), &mut ax);
    let (initial, _) = objective(x.as_slice(), &ax, &mut gx, &mut gy);
    let mut trace = SolverTrace::default();

    for it in 0..cfg.n_iters {
        // Dual ascent on the data block: prox of the conjugate of 0.5||. - y||^2.
        op.apply(&xbar, &mut ax);
        for ((pi, &a), &yi) in p.iter_mut().zip(&ax).zip(y) {
            *pi = (*pi + sigma * (a - yi)) / (1.0 + sigma);
        }
        // Dual ascent on the TV block: projection onto the box of radius lambda / s.
        grad_forward_flat(&xbar, n, &mut gx, &mut gy);
        for k in 0..len {
            qx[k] = (qx[k] + sigma * s * gx[k]).clamp(-bound, bound);
            qy[k] = (qy[k] + sigma * s * gy[k]).clamp(-bound, bound);
        }
        // Primal descent and extrapolation.
        op.apply_adjoint(&p, &mut atp);
        grad_adjoint_flat(&qx, &qy, n, &mut div);
        for k in 0..len {
            let old = x.as_slice()[k];
            let new = old - tau * (atp[k] + s * div[k]);
            x.as_slice_mut()[k] = new;
            xbar[k] = 2.0 * new - old;
            step[k] = new - old;
        }

        op.apply(x.as_slice(), &mut ax);
        let (obj, fid) = objective(x.as_slice(), &ax, &mut gx, &mut gy);
        trace.push(obj, fid, norm2(&step));
        check_divergence(obj, initial, it, &trace)?;
    }
    Ok((x, trace))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::make_desk_geometry;

    #[test]
    fn zero_data_gives_zero() {
        let g = make_desk_geometry(16, 8, 360.0).unwrap();
        let (x, trace) = cppd_tv_recon(&Sinogram::for_geometry(&g), &g, 0.1, 20).unwrap();
        assert!(x.values.iter().all(|&v| v == 0.0));
        assert_eq!(trace.len(), 20);
    }

    #[test]
    fn rejects_bad_config() {
        let g = make_desk_geometry(16, 8, 360.0).unwrap();
        assert!(cppd_tv_recon(&Sinogram::for_geometry(&g), &g, -1.0, 20).is_err());
        assert!(cppd_tv_recon(&Sinogram::for_geometry(&g), &g, 1.0, 0).is_err());
    }

    #[test]
    fn objective_decreases_overall() {
        let g = make_desk_geometry(16, 12, 360.0).unwrap();
        let mut truth = Image::for_geometry(&g);
        for i in 4..12 {
            for j in 5..11 {
                truth.values[[i, j]] = 1.0;
            }
        }
        let y = crate::projector::forward_project(&truth, &g).unwrap();
        let (_, trace) = cppd_tv_recon(&y, &g, 1.0, 200).unwrap();
        assert!(trace.objective.last().unwrap() < &(0.01 * trace.objective[0]));
    }
}
