//! Pose errors, recall at error thresholds, and median errors.

use duoloc_core::geometry::Pose;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PoseError {
    pub translation_m: f64,
    pub rotation_deg: f64,
}

impl PoseError {
    /// Error assigned to failed localizations: misses every threshold.
    pub const FAILED: PoseError = PoseError { translation_m: f64::INFINITY, rotation_deg: f64::INFINITY };

    pub fn within(&self, t: &Threshold) -> bool {
        self.translation_m <= t.translation_m && self.rotation_deg <= t.rotation_deg
    }
}

/// Camera-center distance and relative rotation angle.
pub fn pose_error(est: &Pose, gt: &Pose) -> PoseError {
    let translation_m = (est.center() - gt.center()).norm();
    let cos = (((est.rotation * gt.rotation.transpose()).trace() - 1.0) / 2.0).clamp(-1.0, 1.0);
    PoseError { translation_m, rotation_deg: cos.acos().to_degrees() }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Threshold {
    pub translation_m: f64,
    pub rotation_deg: f64,
}

impl Threshold {
    pub const fn new(translation_m: f64, rotation_deg: f64) -> Self {
        Self { translation_m, rotation_deg }
    }

    pub fn label(&self) -> String {
        format!("{}m_{}deg", self.translation_m, self.rotation_deg)
    }
}

pub const DEFAULT_THRESHOLDS: [Threshold; 4] =
    [Threshold::new(0.10, 1.0), Threshold::new(0.25, 2.0), Threshold::new(0.5, 5.0), Threshold::new(5.0, 10.0)];

/// Fraction of errors within the threshold.
pub fn recall(errors: &[PoseError], t: &Threshold) -> f64 {
    if errors.is_empty() {
        return 0.0;
    }
    errors.iter().filter(|e| e.within(t)).count() as f64 / errors.len() as f64
}

/// Lower median; failed queries count as infinite error.
pub fn median(values: impl IntoIterator<Item = f64>) -> f64 {
    let mut v: Vec<f64> = values.into_iter().collect();
    if v.is_empty() {
        return f64::NAN;
    }
    v.sort_by(f64::total_cmp);
    v[(v.len() - 1) / 2]
}
