//! Image and sinogram containers.

use ndarray::Array2;

use crate::error::{Error, Result};
use crate::geometry::FanBeamGeometry;

/// Square 2D attenuation map. Rows run top to bottom (decreasing y), columns
/// left to right (increasing x).
#[derive(Clone, Debug, PartialEq)]
pub struct Image {
    pub pixel_size_mm: f64,
    pub values: Array2<f64>,
}

impl Image {
    pub fn zeros(n: usize, pixel_size_mm: f64) -> Self {
        Image {
            pixel_size_mm,
            values: Array2::zeros((n, n)),
        }
    }

    pub fn from_array(values: Array2<f64>, pixel_size_mm: f64) -> Result<Self> {
        let (r, c) = values.dim();
        if r != c || r < 2 {
            return Err(Error::invalid(format!("image must be square with side >= 2, got {r}x{c}")));
        }
        Ok(Image {
            pixel_size_mm,
            values: values.as_standard_layout().into_owned(),
        })
    }

    pub fn from_vec(n: usize, pixel_size_mm: f64, data: Vec<f64>) -> Result<Self> {
        let values = Array2::from_shape_vec((n, n), data)
            .map_err(|e| Error::invalid(format!("image data: {e}")))?;
        Self::from_array(values, pixel_size_mm)
    }

    /// Blank image on the reconstruction grid of `g`.
    pub fn for_geometry(g: &FanBeamGeometry) -> Self {
        Self::zeros(g.image_n, g.pixel_size_mm)
    }

    pub fn n(&self) -> usize {
        self.values.nrows()
    }

    pub fn as_slice(&self) -> &[f64] {
        self.values.as_slice().expect("image storage is contiguous")
    }

    pub fn as_slice_mut(&mut self) -> &mut [f64] {
        self.values.as_slice_mut().expect("image storage is contiguous")
    }

    pub fn is_finite(&self) -> bool {
        self.values.iter().all(|v| v.is_finite())
    }

    pub fn same_shape(&self, other: &Image) -> bool {
        self.n() == other.n()
    }

    pub(crate) fn check_same_shape(&self, other: &Image, what: &str) -> Result<()> {
        if self.same_shape(other) {
            Ok(())
        } else {
            Err(Error::invalid(format!(
                "{what}: image sizes differ ({} vs {})",
                self.n(),
                other.n()
            )))
        }
    }
}

/// Line integrals indexed by (view, detector).
#[derive(Clone, Debug, PartialEq)]
pub struct Sinogram {
    pub values: Array2<f64>,
}

impl Sinogram {
    pub fn zeros(n_views: usize, n_detectors: usize) -> Self {
        Sinogram {
            values: Array2::zeros((n_views, n_detectors)),
        }
    }

    pub fn for_geometry(g: &FanBeamGeometry) -> Self {
        Self::zeros(g.n_views(), g.n_detectors)
    }

    pub fn from_array(values: Array2<f64>) -> Self {
        Sinogram {
            values: values.as_standard_layout().into_owned(),
        }
    }

    pub fn n_views(&self) -> usize {
        self.values.nrows()
    }

    pub fn n_detectors(&self) -> usize {
        self.values.ncols()
    }

    pub fn as_slice(&self) -> &[f64] {
        self.values.as_slice().expect("sinogram storage is contiguous")
    }

    pub fn as_slice_mut(&mut self) -> &mut [f64] {
        self.values.as_slice_mut().expect("sinogram storage is contiguous")
    }

    pub fn check_matches(&self, g: &FanBeamGeometry) -> Result<()> {
        if self.n_views() != g.n_views() || self.n_detectors() != g.n_detectors {
            return Err(Error::invalid(format!(
                "sinogram is {}x{} but geometry expects {}x{}",
                self.n_views(),
                self.n_detectors(),
                g.n_views(),
                g.n_detectors
            )));
        }
        Ok(())
    }
}

pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub(crate) fn norm2(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}
