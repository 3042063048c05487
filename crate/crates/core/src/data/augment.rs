//! Training-time cloud augmentation: rotation about the gravity axis,
//! anisotropic scaling, translation, and clipped per-point jitter,
//! applied in that order. Deterministic in the seed; the drawn transform
//! parameters are returned so tests (and debugging) can invert them.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::geometry::PointCloud;

use std::f64::consts::TAU;

/// Per-axis random scale range.
pub const SCALE_RANGE: (f64, f64) = (0.8, 1.25);
/// Per-axis translation limit (uniform in ±this).
pub const TRANSLATE_LIMIT: f64 = 0.1;
/// Per-point jitter standard deviation.
pub const JITTER_SIGMA: f64 = 0.01;
/// Per-coordinate jitter clip bound.
pub const JITTER_CLIP: f64 = 0.05;

/// Which augmentation stages run.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct AugmentFlags {
    pub rotate: bool,
    pub scale: bool,
    pub translate: bool,
    pub jitter: bool,
}

impl AugmentFlags {
    pub fn all() -> Self {
        Self {
            rotate: true,
            scale: true,
            translate: true,
            jitter: true,
        }
    }

    pub fn none() -> Self {
        Self {
            rotate: false,
            scale: false,
            translate: false,
            jitter: false,
        }
    }
}

/// The transform an [`augment`] call actually drew. Disabled stages
/// record their identity (angle 0, scales 1, translation 0). Jitter is
/// per-point noise and is not recorded.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AugmentParams {
    /// Rotation angle about the z axis, in [0, 2π).
    pub angle: f64,
    /// Per-axis scale factors.
    pub scale: [f64; 3],
    /// Per-axis translation offsets.
    pub translation: [f64; 3],
}

/// Applies the enabled stages in order rotate → scale → translate →
/// jitter. Deterministic in `seed`.
pub fn augment(cloud: &PointCloud, seed: u64, flags: AugmentFlags) -> (PointCloud, AugmentParams) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let angle = if flags.rotate {
        rng.gen_range(0.0..TAU)
    } else {
        0.0
    };
    let scale = if flags.scale {
        [
            rng.gen_range(SCALE_RANGE.0..=SCALE_RANGE.1),
            rng.gen_range(SCALE_RANGE.0..=SCALE_RANGE.1),
            rng.gen_range(SCALE_RANGE.0..=SCALE_RANGE.1),
        ]
    } else {
        [1.0; 3]
    };
    let translation = if flags.translate {
        [
            rng.gen_range(-TRANSLATE_LIMIT..=TRANSLATE_LIMIT),
            rng.gen_range(-TRANSLATE_LIMIT..=TRANSLATE_LIMIT),
            rng.gen_range(-TRANSLATE_LIMIT..=TRANSLATE_LIMIT),
        ]
    } else {
        [0.0; 3]
    };

    let (sin, cos) = angle.sin_cos();
    let noise = Normal::new(0.0, JITTER_SIGMA).expect("positive sigma");
    let points = cloud
        .points()
        .iter()
        .map(|&[x, y, z]| {
            let rotated = if flags.rotate {
                [x * cos - y * sin, x * sin + y * cos, z]
            } else {
                [x, y, z]
            };
            let mut p = [
                rotated[0] * scale[0] + translation[0],
                rotated[1] * scale[1] + translation[1],
                rotated[2] * scale[2] + translation[2],
            ];
            if flags.jitter {
                for c in p.iter_mut() {
                    *c += noise
                        .sample(&mut rng)
                        .clamp(-JITTER_CLIP, JITTER_CLIP);
                }
            }
            p
        })
        .collect();
    let params = AugmentParams {
        angle,
        scale,
        translation,
    };
    (
        PointCloud::new(points).expect("augmentation preserves finiteness"),
        params,
    )
}
