//! Phantoms, noise, image-quality metrics and on-disk formats.

mod io;
mod metrics;
mod noise;
mod phantom;
mod png;

pub use io::{
    load_image, load_sinogram, save_image, save_sinogram, ImageHeader, SinogramHeader, FORMAT_VERSION,
};
pub use metrics::{mse, psnr, ssim, MetricReport, PSNR_CAP_DB};
pub use noise::{add_noise, NoiseKind, NoisyData};
pub use phantom::{downsample_mean, random_ellipse_phantom, shepp_logan, PhantomKind, PhantomSpec};
pub use png::{save_png, Window};
