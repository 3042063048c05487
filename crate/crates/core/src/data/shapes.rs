//! Area-uniform sampling of five parametric surfaces.
//!
//! Centrally symmetric shapes (sphere, box, torus, cylinder) are sampled
//! in antithetic pairs `p, -p`, which makes the sample centroid exactly
//! zero for even point counts. Normalisation then never shifts the
//! cloud, so surface-level facts survive it: sphere samples keep equal
//! norms, box samples keep a coordinate pinned to a face. The cone has
//! no such symmetry; it is sampled independently and shifted by its
//! analytic surface centroid instead.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::DataError;
use crate::geometry::PointCloud;

use std::f64::consts::{PI, TAU};

/// Number of shape categories (= classification classes).
pub const NUM_CATEGORIES: usize = 5;

/// The five synthetic shape classes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ShapeCategory {
    Sphere,
    Box,
    Torus,
    Cylinder,
    Cone,
}

impl ShapeCategory {
    pub const ALL: [ShapeCategory; NUM_CATEGORIES] = [
        ShapeCategory::Sphere,
        ShapeCategory::Box,
        ShapeCategory::Torus,
        ShapeCategory::Cylinder,
        ShapeCategory::Cone,
    ];

    pub fn name(self) -> &'static str {
        match self {
            ShapeCategory::Sphere => "sphere",
            ShapeCategory::Box => "box",
            ShapeCategory::Torus => "torus",
            ShapeCategory::Cylinder => "cylinder",
            ShapeCategory::Cone => "cone",
        }
    }

    /// Dense class label, matching the position in [`Self::ALL`].
    pub fn label(self) -> usize {
        Self::ALL.iter().position(|&c| c == self).expect("in ALL")
    }

    /// Canonical dimension parameters: aspect ratios chosen so the five
    /// classes stay geometrically distinguishable after unit-sphere
    /// normalisation.
    pub fn canonical_params(self) -> ShapeParams {
        match self {
            ShapeCategory::Sphere => ShapeParams::Sphere { radius: 1.0 },
            ShapeCategory::Box => ShapeParams::Box {
                edges: [1.6, 1.0, 0.7],
            },
            ShapeCategory::Torus => ShapeParams::Torus {
                major: 1.0,
                minor: 0.35,
            },
            ShapeCategory::Cylinder => ShapeParams::Cylinder {
                radius: 0.45,
                height: 1.7,
            },
            ShapeCategory::Cone => ShapeParams::Cone {
                radius: 0.8,
                height: 1.3,
            },
        }
    }
}

impl std::str::FromStr for ShapeCategory {
    type Err = DataError;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        ShapeCategory::ALL
            .iter()
            .copied()
            .find(|c| c.name() == s)
            .ok_or_else(|| DataError::UnknownCategory {
                name: s.to_string(),
            })
    }
}

/// Dimension parameters per category. All lengths must be positive; a
/// torus additionally needs `minor < major`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum ShapeParams {
    Sphere { radius: f64 },
    Box { edges: [f64; 3] },
    Torus { major: f64, minor: f64 },
    Cylinder { radius: f64, height: f64 },
    Cone { radius: f64, height: f64 },
}

impl ShapeParams {
    pub fn category(&self) -> ShapeCategory {
        match self {
            ShapeParams::Sphere { .. } => ShapeCategory::Sphere,
            ShapeParams::Box { .. } => ShapeCategory::Box,
            ShapeParams::Torus { .. } => ShapeCategory::Torus,
            ShapeParams::Cylinder { .. } => ShapeCategory::Cylinder,
            ShapeParams::Cone { .. } => ShapeCategory::Cone,
        }
    }

    fn validate(&self) -> Result<(), DataError> {
        let fail = |reason: String| Err(DataError::InvalidSpec { reason });
        let pos = |v: f64| v.is_finite() && v > 0.0;
        match *self {
            ShapeParams::Sphere { radius } => {
                if !pos(radius) {
                    return fail(format!("sphere radius {radius} must be positive"));
                }
            }
            ShapeParams::Box { edges } => {
                if !edges.iter().all(|&e| pos(e)) {
                    return fail(format!("box edges {edges:?} must all be positive"));
                }
            }
            ShapeParams::Torus { major, minor } => {
                if !pos(major) || !pos(minor) {
                    return fail(format!(
                        "torus radii ({major}, {minor}) must be positive"
                    ));
                }
                if minor >= major {
                    return fail(format!(
                        "torus minor radius {minor} must be below major radius {major}"
                    ));
                }
            }
            ShapeParams::Cylinder { radius, height } | ShapeParams::Cone { radius, height } => {
                if !pos(radius) || !pos(height) {
                    return fail(format!(
                        "radius {radius} and height {height} must be positive"
                    ));
                }
            }
        }
        Ok(())
    }

    /// Whether `-p` lies on the surface whenever `p` does.
    fn centrally_symmetric(&self) -> bool {
        !matches!(self, ShapeParams::Cone { .. })
    }
}

/// A fully specified synthetic cloud: surface, point count, jitter.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ShapeSpec {
    params: ShapeParams,
    n_points: usize,
    jitter: f64,
}

impl ShapeSpec {
    pub fn new(params: ShapeParams, n_points: usize, jitter: f64) -> Result<Self, DataError> {
        params.validate()?;
        if n_points == 0 {
            return Err(DataError::InvalidSpec {
                reason: "n_points must be at least 1".into(),
            });
        }
        if !jitter.is_finite() || jitter < 0.0 {
            return Err(DataError::InvalidSpec {
                reason: format!("jitter {jitter} must be finite and non-negative"),
            });
        }
        Ok(Self {
            params,
            n_points,
            jitter,
        })
    }

    /// The canonical spec for a category.
    pub fn canonical(
        category: ShapeCategory,
        n_points: usize,
        jitter: f64,
    ) -> Result<Self, DataError> {
        Self::new(category.canonical_params(), n_points, jitter)
    }

    pub fn params(&self) -> ShapeParams {
        self.params
    }

    pub fn category(&self) -> ShapeCategory {
        self.params.category()
    }

    pub fn n_points(&self) -> usize {
        self.n_points
    }

    pub fn jitter(&self) -> f64 {
        self.jitter
    }
}

/// One area-uniform surface point (before any centring shift).
fn sample_surface(params: &ShapeParams, rng: &mut ChaCha8Rng) -> [f64; 3] {
    match *params {
        ShapeParams::Sphere { radius } => {
            // Uniform on the sphere: z uniform in [-1, 1], angle uniform.
            let z: f64 = rng.gen_range(-1.0..=1.0);
            let theta: f64 = rng.gen_range(0.0..TAU);
            let ring = (1.0 - z * z).max(0.0).sqrt();
            [
                radius * ring * theta.cos(),
                radius * ring * theta.sin(),
                radius * z,
            ]
        }
        ShapeParams::Box { edges } => {
            // Pick an axis by face area, a sign uniformly, then a point
            // uniform on that face.
            let h = [edges[0] / 2.0, edges[1] / 2.0, edges[2] / 2.0];
            let areas = [
                edges[1] * edges[2],
                edges[0] * edges[2],
                edges[0] * edges[1],
            ];
            let total: f64 = areas.iter().sum();
            let mut pick = rng.gen_range(0.0..total);
            let mut axis = 2;
            for (i, &a) in areas.iter().enumerate() {
                if pick < a {
                    axis = i;
                    break;
                }
                pick -= a;
            }
            let sign = if rng.gen_bool(0.5) { 1.0 } else { -1.0 };
            let mut p = [0.0; 3];
            for i in 0..3 {
                p[i] = if i == axis {
                    sign * h[i]
                } else {
                    rng.gen_range(-h[i]..=h[i])
                };
            }
            p
        }
        ShapeParams::Torus { major, minor } => {
            // Area element scales with (major + minor cos v): rejection
            // against that density keeps the sampling area-uniform.
            loop {
                let u: f64 = rng.gen_range(0.0..TAU);
                let v: f64 = rng.gen_range(0.0..TAU);
                let accept: f64 = rng.gen_range(0.0..1.0);
                let density = (major + minor * v.cos()) / (major + minor);
                if accept <= density {
                    let ring = major + minor * v.cos();
                    return [ring * u.cos(), ring * u.sin(), minor * v.sin()];
                }
            }
        }
        ShapeParams::Cylinder { radius, height } => {
            // Closed cylinder: lateral wall with probability h/(h+r)
            // (the area ratio), otherwise one of the two caps.
            let lateral_prob = height / (height + radius);
            let theta: f64 = rng.gen_range(0.0..TAU);
            if rng.gen_range(0.0..1.0) < lateral_prob {
                let z = rng.gen_range(-height / 2.0..=height / 2.0);
                [radius * theta.cos(), radius * theta.sin(), z]
            } else {
                let sign = if rng.gen_bool(0.5) { 1.0 } else { -1.0 };
                let rho = radius * rng.gen_range(0.0f64..=1.0).sqrt();
                [rho * theta.cos(), rho * theta.sin(), sign * height / 2.0]
            }
        }
        ShapeParams::Cone { radius, height } => {
            // Base disk at z = 0, apex at z = height. Lateral area
            // π r √(r² + h²) vs base area π r².
            let slant = (radius * radius + height * height).sqrt();
            let lateral_prob = slant / (slant + radius);
            let theta: f64 = rng.gen_range(0.0..TAU);
            if rng.gen_range(0.0..1.0) < lateral_prob {
                // Fraction of the way down from the apex; the area of a
                // cone frustum grows with the square of that fraction.
                let t = rng.gen_range(0.0f64..=1.0).sqrt();
                let rho = radius * t;
                [rho * theta.cos(), rho * theta.sin(), height * (1.0 - t)]
            } else {
                let rho = radius * rng.gen_range(0.0f64..=1.0).sqrt();
                [rho * theta.cos(), rho * theta.sin(), 0.0]
            }
        }
    }
}

/// The height of the cone's surface centroid above its base: the
/// lateral surface sits at h/3, the base at 0, combined by area.
fn cone_surface_centroid_z(radius: f64, height: f64) -> f64 {
    let slant = (radius * radius + height * height).sqrt();
    let lateral_area = PI * radius * slant;
    let base_area = PI * radius * radius;
    lateral_area * (height / 3.0) / (lateral_area + base_area)
}

/// Per-cloud dimension parameters drawn uniformly from class-specific
/// ranges, wide enough that coarse silhouettes overlap between classes
/// (slab-like boxes vs squat cylinders, rod-like boxes vs long
/// cylinders vs sharp cones) while the local surface geometry stays
/// class-typical.
fn randomized_params(category: ShapeCategory, rng: &mut ChaCha8Rng) -> ShapeParams {
    match category {
        // A sphere is scale-free after normalisation; it has no shape
        // freedom to randomise.
        ShapeCategory::Sphere => ShapeParams::Sphere { radius: 1.0 },
        ShapeCategory::Box => ShapeParams::Box {
            edges: [
                rng.gen_range(0.5..=1.6),
                rng.gen_range(0.5..=1.6),
                rng.gen_range(0.5..=1.6),
            ],
        },
        ShapeCategory::Torus => ShapeParams::Torus {
            major: 1.0,
            minor: rng.gen_range(0.15..=0.55),
        },
        ShapeCategory::Cylinder => ShapeParams::Cylinder {
            radius: rng.gen_range(0.25..=0.8),
            height: rng.gen_range(0.5..=1.8),
        },
        ShapeCategory::Cone => ShapeParams::Cone {
            radius: rng.gen_range(0.3..=0.9),
            height: rng.gen_range(0.5..=1.6),
        },
    }
}

/// Uniform random rotation (unit-quaternion construction).
fn random_rotation(rng: &mut ChaCha8Rng) -> [[f64; 3]; 3] {
    let u1: f64 = rng.gen_range(0.0..1.0);
    let u2: f64 = rng.gen_range(0.0..TAU);
    let u3: f64 = rng.gen_range(0.0..TAU);
    let (a, b) = ((1.0 - u1).sqrt(), u1.sqrt());
    let (x, y, z, w) = (a * u2.sin(), a * u2.cos(), b * u3.sin(), b * u3.cos());
    [
        [
            1.0 - 2.0 * (y * y + z * z),
            2.0 * (x * y - z * w),
            2.0 * (x * z + y * w),
        ],
        [
            2.0 * (x * y + z * w),
            1.0 - 2.0 * (x * x + z * z),
            2.0 * (y * z - x * w),
        ],
        [
            2.0 * (x * z - y * w),
            2.0 * (y * z + x * w),
            1.0 - 2.0 * (x * x + y * y),
        ],
    ]
}

fn rotate(m: &[[f64; 3]; 3], p: [f64; 3]) -> [f64; 3] {
    [
        m[0][0] * p[0] + m[0][1] * p[1] + m[0][2] * p[2],
        m[1][0] * p[0] + m[1][1] * p[1] + m[1][2] * p[2],
        m[2][0] * p[0] + m[2][1] * p[1] + m[2][2] * p[2],
    ]
}

/// Area-uniform centred sample of `n` surface points (antithetic pairs
/// for centrally symmetric shapes, analytic centroid shift for the
/// cone).
fn sample_centred(params: &ShapeParams, n: usize, rng: &mut ChaCha8Rng) -> Vec<[f64; 3]> {
    let mut points = Vec::with_capacity(n);
    if params.centrally_symmetric() {
        while points.len() + 1 < n {
            let p = sample_surface(params, rng);
            points.push(p);
            points.push([-p[0], -p[1], -p[2]]);
        }
        if points.len() < n {
            points.push(sample_surface(params, rng));
        }
    } else {
        let shift = match *params {
            ShapeParams::Cone { radius, height } => cone_surface_centroid_z(radius, height),
            _ => 0.0,
        };
        for _ in 0..n {
            let mut p = sample_surface(params, rng);
            p[2] -= shift;
            points.push(p);
        }
    }
    points
}

fn jitter_points(points: &mut [[f64; 3]], jitter: f64, rng: &mut ChaCha8Rng) {
    if jitter > 0.0 {
        let noise = Normal::new(0.0, jitter).expect("validated jitter");
        for p in points.iter_mut() {
            for c in p.iter_mut() {
                *c += noise.sample(rng);
            }
        }
    }
}

/// Samples `spec.n_points` points uniformly by area on the spec's
/// surface, applies Gaussian jitter of `spec.jitter`, and normalises the
/// result to the unit sphere. Deterministic in `seed`.
pub fn generate_synthetic(spec: &ShapeSpec, seed: u64) -> PointCloud {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut points = sample_centred(&spec.params, spec.n_points, &mut rng);
    jitter_points(&mut points, spec.jitter, &mut rng);
    PointCloud::new(points)
        .expect("sampled coordinates are finite")
        .normalized()
        .expect("positive-dimension surfaces have non-zero extent")
}

/// A class instance rather than the canonical class surface: dimension
/// parameters drawn from class-specific ranges and a uniform random
/// pose, then sampled, jittered and normalised like
/// [`generate_synthetic`]. Everything — dimensions, pose, sample
/// positions — is deterministic in `seed`, so a `(category, seed)` pair
/// fully identifies the cloud.
pub fn generate_instance(
    category: ShapeCategory,
    n_points: usize,
    jitter: f64,
    seed: u64,
) -> Result<PointCloud, DataError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let params = randomized_params(category, &mut rng);
    let spec = ShapeSpec::new(params, n_points, jitter)?;
    let pose = random_rotation(&mut rng);
    let mut points = sample_centred(&params, n_points, &mut rng);
    for p in points.iter_mut() {
        *p = rotate(&pose, *p);
    }
    jitter_points(&mut points, spec.jitter, &mut rng);
    Ok(PointCloud::new(points)
        .expect("sampled coordinates are finite")
        .normalized()
        .expect("positive-dimension surfaces have non-zero extent"))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn generation_is_deterministic_per_seed() {
        let spec = ShapeSpec::canonical(ShapeCategory::Torus, 128, 0.01).unwrap();
        let a = generate_synthetic(&spec, 9);
        let b = generate_synthetic(&spec, 9);
        assert_eq!(a, b);
        let c = generate_synthetic(&spec, 10);
        assert_ne!(a, c);
    }

    #[test]
    fn unjittered_sphere_points_all_have_unit_norm() {
        let spec = ShapeSpec::new(ShapeParams::Sphere { radius: 1.0 }, 256, 0.0).unwrap();
        let cloud = generate_synthetic(&spec, 1);
        for p in cloud.points() {
            let norm = (p[0] * p[0] + p[1] * p[1] + p[2] * p[2]).sqrt();
            assert!(
                (norm - 1.0).abs() <= 1e-6,
                "sphere point has norm {norm} after normalisation"
            );
        }
    }

    #[test]
    fn unjittered_cube_points_all_sit_on_a_face() {
        let spec = ShapeSpec::new(ShapeParams::Box { edges: [2.0, 2.0, 2.0] }, 256, 0.0).unwrap();
        let cloud = generate_synthetic(&spec, 2);
        let max_extent = cloud
            .points()
            .iter()
            .flat_map(|p| p.iter())
            .fold(0.0f64, |m, &c| m.max(c.abs()));
        for p in cloud.points() {
            let largest = p.iter().fold(0.0f64, |m, &c| m.max(c.abs()));
            assert!(
                largest >= max_extent - 1e-6,
                "point {p:?} has no coordinate at the face extent {max_extent}"
            );
        }
    }

    #[test]
    fn cylinder_lateral_fraction_matches_area_ratio() {
        // Closed cylinder: lateral fraction of the total area is
        // h/(h+r). Count cap points (|z| at the extreme) over 10 seeds
        // and compare within 3σ binomial bounds.
        let (radius, height) = (0.45, 1.7);
        let n_per_seed = 2000;
        let spec = ShapeSpec::new(ShapeParams::Cylinder { radius, height }, n_per_seed, 0.0)
            .unwrap();
        let mut lateral = 0usize;
        let mut total = 0usize;
        for seed in 0..10 {
            let cloud = generate_synthetic(&spec, seed);
            let z_max = cloud
                .points()
                .iter()
                .fold(0.0f64, |m, p| m.max(p[2].abs()));
            for p in cloud.points() {
                total += 1;
                if p[2].abs() < z_max - 1e-6 {
                    lateral += 1;
                }
            }
        }
        let expected = height / (height + radius);
        let sigma = (expected * (1.0 - expected) / total as f64).sqrt();
        let observed = lateral as f64 / total as f64;
        assert!(
            (observed - expected).abs() <= 3.0 * sigma,
            "lateral fraction {observed} vs expected {expected} (3σ = {})",
            3.0 * sigma
        );
    }

    #[test]
    fn torus_samples_satisfy_the_tube_identity() {
        // On the raw surface (before normalisation rescales), the
        // distance from the ring circle equals the minor radius.
        let (major, minor) = (1.0, 0.35);
        let params = ShapeParams::Torus { major, minor };
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for _ in 0..200 {
            let p = sample_surface(&params, &mut rng);
            let ring = (p[0] * p[0] + p[1] * p[1]).sqrt() - major;
            let tube = (ring * ring + p[2] * p[2]).sqrt();
            assert!(
                (tube - minor).abs() <= 1e-12,
                "point {p:?} is off the tube: {tube}"
            );
        }
    }

    #[test]
    fn even_counts_give_exactly_centred_symmetric_shapes() {
        for cat in [
            ShapeCategory::Sphere,
            ShapeCategory::Box,
            ShapeCategory::Torus,
            ShapeCategory::Cylinder,
        ] {
            let spec = ShapeSpec::canonical(cat, 64, 0.0).unwrap();
            let cloud = generate_synthetic(&spec, 3);
            let c = cloud.centroid();
            for axis in 0..3 {
                assert!(
                    c[axis].abs() <= 1e-12,
                    "{} centroid {c:?} is not zero",
                    cat.name()
                );
            }
        }
    }

    #[test]
    fn invalid_specs_are_rejected() {
        assert!(ShapeSpec::new(ShapeParams::Sphere { radius: 0.0 }, 64, 0.0).is_err());
        assert!(ShapeSpec::new(
            ShapeParams::Torus {
                major: 0.3,
                minor: 0.5
            },
            64,
            0.0
        )
        .is_err());
        assert!(ShapeSpec::new(ShapeParams::Sphere { radius: 1.0 }, 0, 0.0).is_err());
        assert!(ShapeSpec::new(ShapeParams::Sphere { radius: 1.0 }, 64, -0.1).is_err());
    }

    #[test]
    fn instances_vary_in_pose_and_dimensions_but_not_in_seed() {
        let a = generate_instance(ShapeCategory::Box, 64, 0.0, 11).unwrap();
        let b = generate_instance(ShapeCategory::Box, 64, 0.0, 11).unwrap();
        assert_eq!(a, b);
        let c = generate_instance(ShapeCategory::Box, 64, 0.0, 12).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn instances_of_symmetric_shapes_stay_exactly_centred() {
        // Rotation maps antithetic pairs to antithetic pairs, so the
        // centroid is still exactly zero and normalisation never shifts.
        for cat in [
            ShapeCategory::Sphere,
            ShapeCategory::Box,
            ShapeCategory::Torus,
            ShapeCategory::Cylinder,
        ] {
            let cloud = generate_instance(cat, 64, 0.0, 3).unwrap();
            let c = cloud.centroid();
            for axis in 0..3 {
                assert!(
                    c[axis].abs() <= 1e-12,
                    "{} instance centroid {c:?} is not zero",
                    cat.name()
                );
            }
        }
    }

    #[test]
    fn instance_rotations_preserve_sphere_norms() {
        let cloud = generate_instance(ShapeCategory::Sphere, 128, 0.0, 21).unwrap();
        for p in cloud.points() {
            let norm = (p[0] * p[0] + p[1] * p[1] + p[2] * p[2]).sqrt();
            assert!((norm - 1.0).abs() <= 1e-6, "sphere norm {norm}");
        }
    }

    #[test]
    fn category_names_round_trip() {
        for cat in ShapeCategory::ALL {
            let parsed: ShapeCategory = cat.name().parse().unwrap();
            assert_eq!(parsed, cat);
            assert_eq!(ShapeCategory::ALL[cat.label()], cat);
        }
        assert!("pyramid".parse::<ShapeCategory>().is_err());
    }
}
