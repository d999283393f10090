//! Unrolled SUGAR network: `K` blocks of reconstruction (RM), deep
//! estimation (DM) and error-correction (EM) updates, its trainer, and the
//! two-stage low-resolution / high-resolution pipeline.

mod io;
pub mod net;
mod train;
mod two_stage;

pub use io::{load_params, save_params, SUGR_MAGIC, SUGR_VERSION};
pub use net::{EncoderDecoder, NetConfig, NetTape};
pub use train::{
    loss_and_gradient, train_sugar, train_sugar_with, EpochReport, Precision, TrainConfig,
    TrainSample,
};
pub use two_stage::{
    train_two_stage, two_stage_recon, two_stage_recon_detailed, upsample, TwoStageModel,
    TwoStageOutput,
};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::FanBeamGeometry;
use crate::image::{Image, Sinogram};
use crate::projector::{
    normal_operator_norm, power_iteration, Fbp, FilterKind, LinearOperator, Projector,
};
use crate::solvers::POWER_ITERS;
use crate::transforms::{haar_adjoint, haar_forward};

/// Which back-mapping the RM step applies to the sinogram residual.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AdjointMode {
    /// The exact transpose `A^T`.
    Exact,
    /// Filtered backprojection used as an approximate inverse.
    #[default]
    Fbp,
}

/// Serializable description of the DM transform pair.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum TransformSpec {
    Identity,
    Haar { levels: usize },
    Learned {
        channels: Vec<usize>,
        #[serde(default = "residual_default")]
        residual: bool,
    },
}

fn residual_default() -> bool {
    true
}

impl Default for TransformSpec {
    fn default() -> Self {
        let c = NetConfig::default();
        TransformSpec::Learned {
            channels: c.channels,
            residual: c.residual,
        }
    }
}

/// Runtime DM transform pair `(Q, Q*)`.
#[derive(Clone, Debug)]
pub enum DmTransform {
    /// `Q = Q* = I`: DM reduces to pixelwise soft-thresholding.
    Identity,
    /// Orthonormal Haar analysis / synthesis.
    Haar { levels: usize },
    Learned(EncoderDecoder),
}

impl DmTransform {
    pub fn spec(&self) -> TransformSpec {
        match self {
            DmTransform::Identity => TransformSpec::Identity,
            DmTransform::Haar { levels } => TransformSpec::Haar { levels: *levels },
            DmTransform::Learned(net) => TransformSpec::Learned {
                channels: net.config().channels.clone(),
                residual: net.config().residual,
            },
        }
    }

    fn check_size(&self, n: usize) -> Result<()> {
        match self {
            DmTransform::Identity => Ok(()),
            DmTransform::Haar { levels } => {
                if *levels == 0 || !n.is_multiple_of(1 << levels) {
                    return Err(Error::invalid(format!(
                        "image side {n} not divisible by 2^{levels} for Haar transform"
                    )));
                }
                Ok(())
            }
            DmTransform::Learned(net) => net.config().check_size(n),
        }
    }

    fn weight_count(&self) -> usize {
        match self {
            DmTransform::Learned(net) => net.weights().len(),
            _ => 0,
        }
    }
}

/// Per-block learnable scalars.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SugarBlock {
    pub a: f64,
    pub b: f64,
    pub eta: f64,
    /// Soft threshold applied inside DM; kept `>= 0`.
    pub threshold: f64,
}

/// Number of scalars stored per block in flattened parameter vectors.
pub const SCALARS_PER_BLOCK: usize = 4;

#[derive(Clone, Debug)]
pub struct SugarParams {
    pub adjoint_mode: AdjointMode,
    pub filter: FilterKind,
    pub blocks: Vec<SugarBlock>,
    /// One transform shared by all blocks, or one per block.
    pub transforms: Vec<DmTransform>,
    pub learn_threshold: bool,
}

/// Initialization recipe for [`SugarParams`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SugarInit {
    pub n_blocks: usize,
    pub adjoint_mode: AdjointMode,
    pub filter: FilterKind,
    pub transform: TransformSpec,
    /// Reuse one transform pair in every block.
    pub shared_transform: bool,
    /// Coupling weight; sets `a = 1/L`, `b = lambda1/L` with `L = rho + lambda1`.
    pub lambda1: f64,
    pub threshold: f64,
    pub learn_threshold: bool,
    pub seed: u64,
}

impl Default for SugarInit {
    fn default() -> Self {
        SugarInit {
            n_blocks: 5,
            adjoint_mode: AdjointMode::Fbp,
            filter: FilterKind::Ramp,
            transform: TransformSpec::default(),
            shared_transform: false,
            lambda1: 0.5,
            threshold: 0.0,
            learn_threshold: true,
            seed: 0,
        }
    }
}

impl SugarParams {
    /// Build parameters from a recipe. The RM step sizes come from a power
    /// iteration estimate of the spectral norm of the operator `M A`.
    pub fn initialize(g: &FanBeamGeometry, init: &SugarInit) -> Result<Self> {
        if init.n_blocks == 0 {
            return Err(Error::invalid("n_blocks must be >= 1"));
        }
        if !(init.lambda1 >= 0.0 && init.lambda1.is_finite()) {
            return Err(Error::invalid("lambda1 must be >= 0"));
        }
        if !(init.threshold >= 0.0 && init.threshold.is_finite()) {
            return Err(Error::invalid("threshold must be >= 0"));
        }
        let ops = SugarOps::new(g, init.adjoint_mode, init.filter)?;
        let l = ops.spectral_norm() + init.lambda1;
        let block = SugarBlock {
            a: 1.0 / l,
            b: init.lambda1 / l,
            eta: 1.0,
            threshold: init.threshold,
        };
        let n_transforms = if init.shared_transform { 1 } else { init.n_blocks };
        let transforms = (0..n_transforms)
            .map(|k| match &init.transform {
                TransformSpec::Identity => Ok(DmTransform::Identity),
                TransformSpec::Haar { levels } => Ok(DmTransform::Haar { levels: *levels }),
                TransformSpec::Learned { channels, residual } => {
                    let cfg = NetConfig {
                        channels: channels.clone(),
                        residual: *residual,
                    };
                    let seed = init.seed.wrapping_mul(0x9e37_79b9).wrapping_add(k as u64);
                    Ok(DmTransform::Learned(EncoderDecoder::new(cfg, seed)?))
                }
            })
            .collect::<Result<Vec<_>>>()?;
        let p = SugarParams {
            adjoint_mode: init.adjoint_mode,
            filter: init.filter,
            blocks: vec![block; init.n_blocks],
            transforms,
            learn_threshold: init.learn_threshold,
        };
        p.validate()?;
        Ok(p)
    }

    pub fn n_blocks(&self) -> usize {
        self.blocks.len()
    }

    pub fn shared_transform(&self) -> bool {
        self.transforms.len() == 1 && self.blocks.len() > 1
    }

    pub fn transform(&self, k: usize) -> &DmTransform {
        &self.transforms[if self.transforms.len() == 1 { 0 } else { k }]
    }

    pub fn validate(&self) -> Result<()> {
        if self.blocks.is_empty() {
            return Err(Error::invalid("SUGAR needs at least one block"));
        }
        if self.transforms.len() != 1 && self.transforms.len() != self.blocks.len() {
            return Err(Error::invalid("need one shared transform or one per block"));
        }
        let kind = std::mem::discriminant(&self.transforms[0]);
        if self.transforms.iter().any(|t| std::mem::discriminant(t) != kind) {
            return Err(Error::invalid("all blocks must use the same transform kind"));
        }
        for (k, b) in self.blocks.iter().enumerate() {
            if ![b.a, b.b, b.eta, b.threshold].iter().all(|v| v.is_finite()) {
                return Err(Error::invalid(format!("block {k} has non-finite scalars")));
            }
            if b.threshold < 0.0 {
                return Err(Error::invalid(format!("block {k} threshold must be >= 0")));
            }
        }
        Ok(())
    }

    /// Total number of learnable values in flattened form.
    pub fn len(&self) -> usize {
        SCALARS_PER_BLOCK * self.blocks.len()
            + self.transforms.iter().map(|t| t.weight_count()).sum::<usize>()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Offset of transform `t`'s weights in the flattened vector.
    pub(crate) fn net_offset(&self, t: usize) -> usize {
        SCALARS_PER_BLOCK * self.blocks.len()
            + self.transforms[..t].iter().map(|t| t.weight_count()).sum::<usize>()
    }

    /// Flatten as `[a, b, eta, threshold]` per block followed by all
    /// transform weights in block order.
    pub fn to_flat(&self) -> Vec<f64> {
        let mut v = Vec::with_capacity(self.len());
        for b in &self.blocks {
            v.extend_from_slice(&[b.a, b.b, b.eta, b.threshold]);
        }
        for t in &self.transforms {
            if let DmTransform::Learned(net) = t {
                v.extend_from_slice(net.weights());
            }
        }
        v
    }

    pub fn set_flat(&mut self, v: &[f64]) -> Result<()> {
        if v.len() != self.len() {
            return Err(Error::invalid(format!(
                "expected {} parameters, got {}",
                self.len(),
                v.len()
            )));
        }
        for (b, c) in self.blocks.iter_mut().zip(v.chunks(SCALARS_PER_BLOCK)) {
            *b = SugarBlock {
                a: c[0],
                b: c[1],
                eta: c[2],
                threshold: c[3],
            };
        }
        let mut off = SCALARS_PER_BLOCK * self.blocks.len();
        for t in &mut self.transforms {
            if let DmTransform::Learned(net) = t {
                let w = net.weights_mut();
                let len = w.len();
                w.copy_from_slice(&v[off..off + len]);
                off += len;
            }
        }
        Ok(())
    }
}

/// `(x, z, f)` iterate of the unrolled scheme.
#[derive(Clone, Debug, PartialEq)]
pub struct SugarState {
    pub x: Image,
    pub z: Image,
    pub f: Image,
}

impl SugarState {
    /// `x = z = x0`, `f = 0`.
    pub fn from_image(x0: Image) -> Self {
        let f = Image::zeros(x0.n(), x0.pixel_size_mm);
        SugarState {
            z: x0.clone(),
            x: x0,
            f,
        }
    }

    /// Initial state from the filtered backprojection of `y`.
    pub fn from_fbp(y: &Sinogram, g: &FanBeamGeometry, filter: FilterKind) -> Result<Self> {
        Ok(Self::from_image(Fbp::new(g, filter)?.reconstruct(y)?))
    }

    pub fn validate(&self) -> Result<()> {
        if !self.x.same_shape(&self.z) || !self.x.same_shape(&self.f) {
            return Err(Error::invalid("x, z and f must have the same shape"));
        }
        if !(self.x.is_finite() && self.z.is_finite() && self.f.is_finite()) {
            return Err(Error::invalid("state contains non-finite values"));
        }
        Ok(())
    }
}

/// Precomputed projector and FBP for one geometry.
pub struct SugarOps {
    proj: Projector,
    fbp: Fbp,
    mode: AdjointMode,
}

impl SugarOps {
    pub fn new(g: &FanBeamGeometry, mode: AdjointMode, filter: FilterKind) -> Result<Self> {
        Ok(SugarOps {
            proj: Projector::new(g)?,
            fbp: Fbp::new(g, filter)?,
            mode,
        })
    }

    pub fn for_params(g: &FanBeamGeometry, p: &SugarParams) -> Result<Self> {
        Self::new(g, p.adjoint_mode, p.filter)
    }

    pub fn geometry(&self) -> &FanBeamGeometry {
        self.proj.geometry()
    }

    pub fn projector(&self) -> &Projector {
        &self.proj
    }

    pub fn fbp(&self) -> &Fbp {
        &self.fbp
    }

    pub fn mode(&self) -> AdjointMode {
        self.mode
    }

    /// `||M A||_2`; for the exact adjoint this is `||A^T A||_2`.
    pub fn spectral_norm(&self) -> f64 {
        match self.mode {
            AdjointMode::Exact => normal_operator_norm(&self.proj, POWER_ITERS),
            AdjointMode::Fbp => {
                let mut s = vec![0.0; self.proj.output_len()];
                let mut img = vec![0.0; self.proj.input_len()];
                power_iteration(self.proj.input_len(), POWER_ITERS, |v, out| {
                    self.proj.apply(v, &mut s);
                    self.fbp.apply(&s, &mut img);
                    self.fbp.apply_transpose(&img, &mut s);
                    self.proj.apply_adjoint(&s, out);
                })
                .sqrt()
            }
        }
    }

    /// `m = M (A x - y)`.
    pub(crate) fn correction(&self, x: &[f64], y: &[f64], r: &mut [f64], m: &mut [f64]) {
        self.proj.apply(x, r);
        for (ri, yi) in r.iter_mut().zip(y) {
            *ri -= yi;
        }
        match self.mode {
            AdjointMode::Exact => self.proj.apply_adjoint(r, m),
            AdjointMode::Fbp => self.fbp.apply(r, m),
        }
    }

    /// `out = A^T M^T g`.
    pub(crate) fn correction_adjoint(&self, g: &[f64], s: &mut [f64], out: &mut [f64]) {
        match self.mode {
            AdjointMode::Exact => self.proj.apply(g, s),
            AdjointMode::Fbp => self.fbp.apply_transpose(g, s),
        }
        self.proj.apply_adjoint(s, out);
    }

    fn check_state(&self, state: &SugarState, y: &Sinogram) -> Result<()> {
        state.validate()?;
        y.check_matches(self.geometry())?;
        if state.x.n() != self.geometry().image_n {
            return Err(Error::invalid(format!(
                "state is {}x{}, geometry expects {}x{}",
                state.x.n(),
                state.x.n(),
                self.geometry().image_n,
                self.geometry().image_n
            )));
        }
        Ok(())
    }

    /// RM step: `x - a M(Ax - y) - b (x - z - f)`.
    pub fn rm(&self, state: &SugarState, y: &Sinogram, a: f64, b: f64) -> Result<Image> {
        self.check_state(state, y)?;
        let mut r = vec![0.0; y.as_slice().len()];
        let mut m = vec![0.0; state.x.as_slice().len()];
        self.correction(state.x.as_slice(), y.as_slice(), &mut r, &mut m);
        let mut out = state.x.clone();
        let (z, f) = (state.z.as_slice(), state.f.as_slice());
        for (k, xv) in out.as_slice_mut().iter_mut().enumerate() {
            *xv -= a * m[k] + b * (*xv - z[k] - f[k]);
        }
        Ok(out)
    }
}

pub fn rm_update(
    state: &SugarState,
    y: &Sinogram,
    g: &FanBeamGeometry,
    a: f64,
    b: f64,
    adjoint_mode: AdjointMode,
) -> Result<Image> {
    SugarOps::new(g, adjoint_mode, FilterKind::Ramp)?.rm(state, y, a, b)
}

/// DM step on a flat `n x n` buffer: `Q*(g_eps(Q u))`.
pub(crate) fn dm_apply(t: &DmTransform, u: &[f64], n: usize, eps: f64) -> Result<Vec<f64>> {
    t.check_size(n)?;
    match t {
        DmTransform::Identity => Ok(u.iter().map(|&v| net::soft(v, eps)).collect()),
        DmTransform::Haar { levels } => {
            let img = Image::from_vec(n, 1.0, u.to_vec())?;
            let mut c = haar_forward(&img, *levels)?;
            c.iter_mut().for_each(|v| *v = net::soft(*v, eps));
            Ok(haar_adjoint(&c, 1.0)?.as_slice().to_vec())
        }
        DmTransform::Learned(net) => net.forward(u, n, eps),
    }
}

/// DM step: `z = Q*(g_eps(Q(x - f)))`.
pub fn dm_update(x: &Image, f: &Image, transform: &DmTransform, threshold: f64) -> Result<Image> {
    x.check_same_shape(f, "dm_update")?;
    if !(threshold >= 0.0 && threshold.is_finite()) {
        return Err(Error::invalid("threshold must be >= 0"));
    }
    let u: Vec<f64> = x.as_slice().iter().zip(f.as_slice()).map(|(a, b)| a - b).collect();
    let z = dm_apply(transform, &u, x.n(), threshold)?;
    Image::from_vec(x.n(), x.pixel_size_mm, z)
}

/// EM step: `f - eta (x - z)`.
pub fn em_update(f: &Image, x: &Image, z: &Image, eta: f64) -> Result<Image> {
    f.check_same_shape(x, "em_update")?;
    f.check_same_shape(z, "em_update")?;
    let mut out = f.clone();
    for ((o, xv), zv) in out.as_slice_mut().iter_mut().zip(x.as_slice()).zip(z.as_slice()) {
        *o -= eta * (xv - zv);
    }
    Ok(out)
}

/// Run every block and return the final `x`.
pub fn sugar_forward(
    y: &Sinogram,
    g: &FanBeamGeometry,
    params: &SugarParams,
    init: &SugarState,
) -> Result<Image> {
    let ops = SugarOps::for_params(g, params)?;
    Ok(sugar_forward_with(&ops, y, params, init, |_, _| {})?.x)
}

/// Run every block with prepared operators; `observer` sees the state after
/// each block.
pub fn sugar_forward_with<F>(
    ops: &SugarOps,
    y: &Sinogram,
    params: &SugarParams,
    init: &SugarState,
    mut observer: F,
) -> Result<SugarState>
where
    F: FnMut(usize, &SugarState),
{
    params.validate()?;
    ops.check_state(init, y)?;
    params.transform(0).check_size(init.x.n())?;
    let mut state = init.clone();
    for (k, blk) in params.blocks.iter().enumerate() {
        let x = ops.rm(&state, y, blk.a, blk.b)?;
        let z = dm_update(&x, &state.f, params.transform(k), blk.threshold)?;
        let f = em_update(&state.f, &x, &z, blk.eta)?;
        state = SugarState { x, z, f };
        if !state.x.is_finite() {
            return Err(Error::Numerical {
                message: format!("non-finite iterate after block {k}"),
                trace: None,
            });
        }
        observer(k, &state);
    }
    Ok(state)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::make_desk_geometry;
    use crate::projector::DenseOperator;
    use crate::solvers::{split_bregman_solve, split_bregman_steps, SplitBregmanConfig, X0Mode};
    use crate::transforms::SparsifyingTransform;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_image(n: usize, seed: u64, ps: f64) -> Image {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Image::from_vec(n, ps, (0..n * n).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
    }

    fn geometry(n: usize) -> FanBeamGeometry {
        make_desk_geometry(16, 12, 360.0).unwrap().with_image_size(n).unwrap()
    }

    fn random_state(n: usize, ps: f64, seed: u64) -> SugarState {
        SugarState {
            x: rand_image(n, seed, ps),
            z: rand_image(n, seed + 1, ps),
            f: rand_image(n, seed + 2, ps),
        }
    }

    #[test]
    fn rm_zero_steps_is_identity() {
        let g = geometry(8);
        let st = random_state(8, g.pixel_size_mm, 1);
        let y = Sinogram::for_geometry(&g);
        for mode in [AdjointMode::Exact, AdjointMode::Fbp] {
            assert_eq!(rm_update(&st, &y, &g, 0.0, 0.0, mode).unwrap(), st.x);
        }
    }

    #[test]
    fn rm_fixed_point() {
        let g = geometry(8);
        let mut st = random_state(8, g.pixel_size_mm, 2);
        let y = crate::projector::forward_project(&st.x, &g).unwrap();
        let z = st.z.clone();
        for (fv, (xv, zv)) in st.f.as_slice_mut().iter_mut().zip(st.x.as_slice().iter().zip(z.as_slice())) {
            *fv = xv - zv;
        }
        for mode in [AdjointMode::Exact, AdjointMode::Fbp] {
            let x = rm_update(&st, &y, &g, 0.7, 0.3, mode).unwrap();
            for (a, b) in x.as_slice().iter().zip(st.x.as_slice()) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    #[allow(clippy::needless_range_loop)]
    fn rm_matches_dense_matrix() {
        let g = geometry(8);
        let ops = SugarOps::new(&g, AdjointMode::Exact, FilterKind::Ramp).unwrap();
        let dense = DenseOperator::assemble(ops.projector());
        let st = random_state(8, g.pixel_size_mm, 3);
        let y = crate::projector::forward_project(&rand_image(8, 9, g.pixel_size_mm), &g).unwrap();
        let (a, b) = (1e-3, 0.4);
        let got = ops.rm(&st, &y, a, b).unwrap();
        let (rows, cols) = (dense.rows, dense.cols);
        let x = st.x.as_slice();
        let r: Vec<f64> = (0..rows)
            .map(|i| (0..cols).map(|j| dense.data[i * cols + j] * x[j]).sum::<f64>() - y.as_slice()[i])
            .collect();
        for j in 0..cols {
            let atr: f64 = (0..rows).map(|i| dense.data[i * cols + j] * r[i]).sum();
            let want = x[j] - a * atr - b * (x[j] - st.z.as_slice()[j] - st.f.as_slice()[j]);
            assert!((got.as_slice()[j] - want).abs() < 1e-10);
        }
    }

    #[test]
    fn rm_rejects_mismatch() {
        let g = geometry(8);
        let mut st = random_state(8, g.pixel_size_mm, 4);
        st.z = Image::zeros(4, 1.0);
        let y = Sinogram::for_geometry(&g);
        assert!(matches!(
            rm_update(&st, &y, &g, 1.0, 1.0, AdjointMode::Exact),
            Err(Error::InvalidArgument(_))
        ));
        let st = random_state(4, 1.0, 4);
        assert!(rm_update(&st, &y, &g, 1.0, 1.0, AdjointMode::Exact).is_err());
    }

    #[test]
    fn dm_identity_and_haar_are_exact_inverses() {
        let x = rand_image(16, 5, 1.0);
        let f = rand_image(16, 6, 1.0);
        let z = dm_update(&x, &f, &DmTransform::Identity, 0.0).unwrap();
        for ((zv, xv), fv) in z.as_slice().iter().zip(x.as_slice()).zip(f.as_slice()) {
            assert_eq!(*zv, xv - fv);
        }
        let z = dm_update(&x, &f, &DmTransform::Haar { levels: 2 }, 0.0).unwrap();
        for ((zv, xv), fv) in z.as_slice().iter().zip(x.as_slice()).zip(f.as_slice()) {
            assert!((zv - (xv - fv)).abs() < 1e-10);
        }
    }

    #[test]
    fn dm_rejects_bad_sizes() {
        let x = rand_image(12, 5, 1.0);
        let net = EncoderDecoder::new(NetConfig { channels: vec![2, 2, 2, 2], residual: true }, 0).unwrap();
        assert!(dm_update(&x, &x, &DmTransform::Learned(net), 0.0).is_err());
        assert!(dm_update(&x, &x, &DmTransform::Haar { levels: 3 }, 0.0).is_err());
        assert!(dm_update(&x, &x, &DmTransform::Identity, -1.0).is_err());
    }

    #[test]
    fn em_cases() {
        let x = rand_image(6, 1, 1.0);
        let z = rand_image(6, 2, 1.0);
        let f = rand_image(6, 3, 1.0);
        assert_eq!(em_update(&f, &x, &z, 0.0).unwrap(), f);
        assert_eq!(em_update(&f, &x, &x, 0.8).unwrap(), f);
        let zero = Image::zeros(6, 1.0);
        let out = em_update(&zero, &x, &z, 1.0).unwrap();
        for ((o, xv), zv) in out.as_slice().iter().zip(x.as_slice()).zip(z.as_slice()) {
            assert_eq!(*o, -(xv - zv));
        }
        assert!(em_update(&f, &Image::zeros(3, 1.0), &z, 1.0).is_err());
    }

    fn analytic_params(n_blocks: usize, t: DmTransform, blk: SugarBlock, mode: AdjointMode) -> SugarParams {
        SugarParams {
            adjoint_mode: mode,
            filter: FilterKind::Ramp,
            blocks: vec![blk; n_blocks],
            transforms: vec![t],
            learn_threshold: false,
        }
    }

    #[test]
    fn all_zero_steps_return_init() {
        let g = geometry(16);
        let y = crate::projector::forward_project(&rand_image(16, 1, g.pixel_size_mm), &g).unwrap();
        let p = analytic_params(1, DmTransform::Identity, SugarBlock { a: 0.0, b: 0.0, eta: 0.0, threshold: 0.0 }, AdjointMode::Fbp);
        let init = SugarState::from_fbp(&y, &g, FilterKind::Ramp).unwrap();
        assert_eq!(sugar_forward(&y, &g, &p, &init).unwrap(), init.x);
    }

    #[test]
    fn forward_is_deterministic() {
        let g = geometry(16);
        let y = crate::projector::forward_project(&rand_image(16, 1, g.pixel_size_mm), &g).unwrap();
        let init = SugarInit { n_blocks: 2, transform: TransformSpec::Learned { channels: vec![4, 4], residual: true }, ..Default::default() };
        let p = SugarParams::initialize(&g, &init).unwrap();
        let s0 = SugarState::from_fbp(&y, &g, FilterKind::Ramp).unwrap();
        let a = sugar_forward(&y, &g, &p, &s0).unwrap();
        let b = sugar_forward(&y, &g, &SugarParams::initialize(&g, &init).unwrap(), &s0).unwrap();
        assert_eq!(a.as_slice(), b.as_slice());
    }

    #[test]
    fn haar_blocks_reproduce_split_bregman() {
        let g = geometry(16);
        let truth = rand_image(16, 7, g.pixel_size_mm);
        let y = crate::projector::forward_project(&truth, &g).unwrap();
        let ops = SugarOps::new(&g, AdjointMode::Exact, FilterKind::Ramp).unwrap();
        let cfg = SplitBregmanConfig {
            lambda: 0.05,
            lambda1: 2.0,
            eta: 0.9,
            n_iters: 4,
            transform: SparsifyingTransform::Haar { levels: 2 },
            x0_mode: X0Mode::Fbp,
            tv_inner_iters: 20,
        };
        let steps = split_bregman_steps(ops.projector(), cfg.lambda1);
        let init = SugarState::from_fbp(&y, &g, FilterKind::Ramp).unwrap();
        let mut sb = Vec::new();
        split_bregman_solve(ops.projector(), y.as_slice(), init.x.clone(), &cfg, steps, |_, it| {
            sb.push((it.x.to_vec(), it.z.to_vec(), it.f.to_vec()));
        })
        .unwrap();
        let blk = SugarBlock { a: steps.a, b: steps.b, eta: cfg.eta, threshold: cfg.threshold() };
        let p = analytic_params(4, DmTransform::Haar { levels: 2 }, blk, AdjointMode::Exact);
        let mut worst: f64 = 0.0;
        sugar_forward_with(&ops, &y, &p, &init, |k, s| {
            for (a, b) in [(&s.x, &sb[k].0), (&s.z, &sb[k].1), (&s.f, &sb[k].2)] {
                for (u, v) in a.as_slice().iter().zip(b.iter()) {
                    worst = worst.max((u - v).abs());
                }
            }
        })
        .unwrap();
        assert!(worst < 1e-8, "{worst}");
    }

    #[test]
    fn flat_round_trip() {
        let g = geometry(16);
        let init = SugarInit { n_blocks: 3, transform: TransformSpec::Learned { channels: vec![2, 3], residual: true }, ..Default::default() };
        let p = SugarParams::initialize(&g, &init).unwrap();
        let v = p.to_flat();
        assert_eq!(v.len(), p.len());
        let mut q = SugarParams::initialize(&g, &SugarInit { seed: 9, ..init.clone() }).unwrap();
        assert_ne!(q.to_flat(), v);
        q.set_flat(&v).unwrap();
        assert_eq!(q.to_flat(), v);
        assert!(q.set_flat(&v[1..]).is_err());
        let shared = SugarParams::initialize(&g, &SugarInit { shared_transform: true, ..init }).unwrap();
        assert!(shared.shared_transform());
        assert_eq!(shared.transforms.len(), 1);
    }

    #[test]
    fn initialized_steps_follow_spectral_norm() {
        let g = geometry(16);
        let init = SugarInit { n_blocks: 1, adjoint_mode: AdjointMode::Exact, transform: TransformSpec::Identity, lambda1: 3.0, ..Default::default() };
        let p = SugarParams::initialize(&g, &init).unwrap();
        let ops = SugarOps::new(&g, AdjointMode::Exact, FilterKind::Ramp).unwrap();
        let steps = split_bregman_steps(ops.projector(), 3.0);
        assert!((p.blocks[0].a - steps.a).abs() < 1e-15);
        assert!((p.blocks[0].b - steps.b).abs() < 1e-15);
        assert!(SugarParams::initialize(&g, &SugarInit { n_blocks: 0, ..init }).is_err());
    }
}
