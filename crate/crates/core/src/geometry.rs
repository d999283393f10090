//! Fan-beam acquisition geometry with a curved (equiangular) detector.
//!
//! Coordinates are in millimetres with the isocenter at the origin. The source
//! for view angle `beta` sits at `SID * (cos beta, sin beta)`; detector cell `i`
//! subtends the fan angle `offset + (i - (n - 1) / 2) * pitch / SDD` measured
//! counterclockwise from the central ray.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const PAPER_SDD_MM: f64 = 1085.6;
pub const PAPER_SID_MM: f64 = 595.0;
pub const PAPER_N_DETECTORS: usize = 736;
pub const PAPER_DETECTOR_PITCH_MM: f64 = 1.2858;
pub const PAPER_DETECTOR_OFFSET_RAD: f64 = 0.0013;
pub const PAPER_N_VIEWS: usize = 946;
pub const PAPER_ARC_DEG: f64 = 151.875;
pub const PAPER_IMAGE_N: usize = 512;
pub const PAPER_PIXEL_MM: f64 = 0.9;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FanBeamGeometry {
    pub source_to_detector_mm: f64,
    pub source_to_isocenter_mm: f64,
    pub n_detectors: usize,
    /// Arc length of one detector cell on the curved detector.
    pub detector_pitch_mm: f64,
    pub detector_angular_offset_rad: f64,
    pub view_angles_rad: Vec<f64>,
    pub image_n: usize,
    pub pixel_size_mm: f64,
}

impl FanBeamGeometry {
    pub fn validate(&self) -> Result<()> {
        let sdd = self.source_to_detector_mm;
        let sid = self.source_to_isocenter_mm;
        if !(sid.is_finite() && sdd.is_finite() && sid > 0.0 && sdd > sid) {
            return Err(Error::invalid(format!(
                "need source_to_detector ({sdd}) > source_to_isocenter ({sid}) > 0"
            )));
        }
        if self.n_detectors == 0 {
            return Err(Error::invalid("n_detectors must be at least 1"));
        }
        if self.image_n < 2 {
            return Err(Error::invalid("image_n must be at least 2"));
        }
        if !(self.detector_pitch_mm > 0.0 && self.detector_pitch_mm.is_finite()) {
            return Err(Error::invalid("detector pitch must be positive"));
        }
        if !(self.pixel_size_mm > 0.0 && self.pixel_size_mm.is_finite()) {
            return Err(Error::invalid("pixel size must be positive"));
        }
        if !self.detector_angular_offset_rad.is_finite() {
            return Err(Error::invalid("detector offset must be finite"));
        }
        if self.view_angles_rad.is_empty() {
            return Err(Error::invalid("geometry has no views"));
        }
        if self.view_angles_rad.iter().any(|a| !a.is_finite()) {
            return Err(Error::invalid("view angles must be finite"));
        }
        if self.view_angles_rad.windows(2).any(|w| w[1] <= w[0]) {
            return Err(Error::invalid("view angles must be strictly increasing"));
        }
        Ok(())
    }

    pub fn n_views(&self) -> usize {
        self.view_angles_rad.len()
    }

    /// Angular width of one detector cell as seen from the source.
    pub fn detector_angle_step(&self) -> f64 {
        self.detector_pitch_mm / self.source_to_detector_mm
    }

    pub fn detector_angle(&self, i: usize) -> f64 {
        let center = (self.n_detectors as f64 - 1.0) / 2.0;
        self.detector_angular_offset_rad + (i as f64 - center) * self.detector_angle_step()
    }

    /// Half-width of the fan on its narrower side, accounting for the detector offset.
    pub fn fan_half_angle(&self) -> f64 {
        let half = self.n_detectors as f64 * self.detector_angle_step() / 2.0;
        half - self.detector_angular_offset_rad.abs()
    }

    /// Radius of the circle inscribed in the reconstruction grid.
    pub fn fov_radius_mm(&self) -> f64 {
        self.image_n as f64 * self.pixel_size_mm / 2.0
    }

    /// Last view angle minus first view angle.
    pub fn angular_span(&self) -> f64 {
        match (self.view_angles_rad.first(), self.view_angles_rad.last()) {
            (Some(a), Some(b)) => b - a,
            _ => 0.0,
        }
    }

    /// Same acquisition reconstructed on an `n`x`n` grid covering the same
    /// physical field of view.
    pub fn with_image_size(&self, n: usize) -> Result<Self> {
        if n < 2 {
            return Err(Error::invalid("image size must be at least 2"));
        }
        let mut g = self.clone();
        g.pixel_size_mm = self.pixel_size_mm * self.image_n as f64 / n as f64;
        g.image_n = n;
        Ok(g)
    }
}

/// `n` view angles starting at 0. A full 360 degree arc is sampled without
/// repeating the endpoint; shorter arcs include both endpoints so the span
/// equals the arc exactly.
pub fn uniform_view_angles(n: usize, arc_deg: f64) -> Vec<f64> {
    let arc = arc_deg.to_radians();
    if n == 1 {
        return vec![0.0];
    }
    let full = (arc_deg - 360.0).abs() < 1e-12;
    let step = if full { arc / n as f64 } else { arc / (n as f64 - 1.0) };
    (0..n).map(|i| i as f64 * step).collect()
}

pub fn make_paper_geometry() -> FanBeamGeometry {
    FanBeamGeometry {
        source_to_detector_mm: PAPER_SDD_MM,
        source_to_isocenter_mm: PAPER_SID_MM,
        n_detectors: PAPER_N_DETECTORS,
        detector_pitch_mm: PAPER_DETECTOR_PITCH_MM,
        detector_angular_offset_rad: PAPER_DETECTOR_OFFSET_RAD,
        view_angles_rad: uniform_view_angles(PAPER_N_VIEWS, PAPER_ARC_DEG),
        image_n: PAPER_IMAGE_N,
        pixel_size_mm: PAPER_PIXEL_MM,
    }
}

/// Keep `keep` views with stride `floor(total / keep)` starting at index 0.
pub fn subsample_views(g: &FanBeamGeometry, keep: usize) -> Result<FanBeamGeometry> {
    let total = g.n_views();
    if keep == 0 || keep > total {
        return Err(Error::invalid(format!(
            "cannot keep {keep} of {total} views"
        )));
    }
    let stride = total / keep;
    let mut out = g.clone();
    out.view_angles_rad = (0..keep).map(|k| g.view_angles_rad[k * stride]).collect();
    Ok(out)
}

/// Scaled-down scanner for desk experiments.
///
/// The physical field of view, source distances and fan angle match the
/// clinical scanner; the image grid and detector count shrink together.
pub fn make_desk_geometry(image_n: usize, n_views: usize, arc_deg: f64) -> Result<FanBeamGeometry> {
    if image_n < 16 {
        return Err(Error::invalid(format!("desk image_n must be >= 16, got {image_n}")));
    }
    if n_views == 0 {
        return Err(Error::invalid("n_views must be >= 1"));
    }
    if !(arc_deg > 0.0 && arc_deg <= 360.0) {
        return Err(Error::invalid(format!("arc must be in (0, 360] degrees, got {arc_deg}")));
    }
    let scale = image_n as f64 / PAPER_IMAGE_N as f64;
    let fan_angle = PAPER_N_DETECTORS as f64 * PAPER_DETECTOR_PITCH_MM / PAPER_SDD_MM;
    let pixel_size_mm = PAPER_PIXEL_MM / scale;
    let r_fov = image_n as f64 * pixel_size_mm / 2.0;
    let needed_half = (r_fov / PAPER_SID_MM).asin() + PAPER_DETECTOR_OFFSET_RAD;

    let mut n_detectors = ((PAPER_N_DETECTORS as f64 * scale).round() as usize).max(1);
    let pitch = fan_angle * PAPER_SDD_MM / n_detectors as f64;
    while (n_detectors as f64 * pitch / PAPER_SDD_MM) / 2.0 < needed_half {
        n_detectors += 2;
    }

    let g = FanBeamGeometry {
        source_to_detector_mm: PAPER_SDD_MM,
        source_to_isocenter_mm: PAPER_SID_MM,
        n_detectors,
        detector_pitch_mm: pitch,
        detector_angular_offset_rad: PAPER_DETECTOR_OFFSET_RAD,
        view_angles_rad: uniform_view_angles(n_views, arc_deg),
        image_n,
        pixel_size_mm,
    };
    g.validate()?;
    Ok(g)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn paper_geometry_values() {
        let g = make_paper_geometry();
        assert_eq!(g.source_to_detector_mm, 1085.6);
        assert_eq!(g.source_to_isocenter_mm, 595.0);
        assert_eq!(g.n_detectors, 736);
        assert_eq!(g.detector_pitch_mm, 1.2858);
        assert_eq!(g.detector_angular_offset_rad, 0.0013);
        assert_eq!(g.image_n, 512);
        assert_eq!(g.pixel_size_mm, 0.9);
        assert_eq!(g.n_views(), 946);
        assert!((g.angular_span() - 151.875f64.to_radians()).abs() < 1e-9);
        g.validate().unwrap();
    }

    #[test]
    fn subsample_paper_to_36() {
        let g = make_paper_geometry();
        let s = subsample_views(&g, 36).unwrap();
        assert_eq!(s.n_views(), 36);
        assert_eq!(s.view_angles_rad[0], g.view_angles_rad[0]);
        // stride floor(946 / 36) = 26
        assert_eq!(s.view_angles_rad[1], g.view_angles_rad[26]);
        assert_eq!(s.n_detectors, g.n_detectors);
    }

    #[test]
    fn subsample_stride_rule() {
        let mut g = make_desk_geometry(16, 8, 360.0).unwrap();
        g.view_angles_rad = (0..8).map(|i| i as f64).collect();
        let s = subsample_views(&g, 4).unwrap();
        assert_eq!(s.view_angles_rad, vec![0.0, 2.0, 4.0, 6.0]);
        assert_eq!(subsample_views(&g, 8).unwrap(), g);
        assert!(subsample_views(&g, 0).is_err());
        assert!(subsample_views(&g, 9).is_err());
    }

    #[test]
    fn desk_geometry_covers_fov() {
        let g = make_desk_geometry(128, 36, 151.875).unwrap();
        assert_eq!(g.n_views(), 36);
        assert!((g.angular_span() - 151.875f64.to_radians()).abs() < 1e-12);
        let r_fov = 64.0 * g.pixel_size_mm;
        assert!(g.fan_half_angle() >= (r_fov / g.source_to_isocenter_mm).asin());
        let ratio = g.source_to_detector_mm / g.source_to_isocenter_mm;
        assert!((ratio - PAPER_SDD_MM / PAPER_SID_MM).abs() < 1e-12);

        let full = make_desk_geometry(64, 360, 360.0).unwrap();
        assert_eq!(full.n_views(), 360);
        assert!((full.view_angles_rad[1] - full.view_angles_rad[0] - 1f64.to_radians()).abs() < 1e-12);
    }

    #[test]
    fn desk_geometry_rejects_bad_input() {
        assert!(make_desk_geometry(8, 36, 180.0).is_err());
        assert!(make_desk_geometry(64, 0, 180.0).is_err());
        assert!(make_desk_geometry(64, 10, 0.0).is_err());
        assert!(make_desk_geometry(64, 10, 361.0).is_err());
    }

    #[test]
    fn validate_catches_bad_fields() {
        let mut g = make_desk_geometry(32, 4, 90.0).unwrap();
        g.source_to_detector_mm = 100.0;
        assert!(g.validate().is_err());
        let mut g = make_desk_geometry(32, 4, 90.0).unwrap();
        g.view_angles_rad.swap(0, 1);
        assert!(g.validate().is_err());
    }

    #[test]
    fn with_image_size_keeps_fov() {
        let g = make_desk_geometry(128, 36, 151.875).unwrap();
        let le = g.with_image_size(64).unwrap();
        assert!((le.fov_radius_mm() - g.fov_radius_mm()).abs() < 1e-12);
        assert_eq!(le.n_detectors, g.n_detectors);
    }
}
