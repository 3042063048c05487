//! Point-cloud kernels: normalisation, farthest point sampling,
//! k-nearest-neighbour patch grouping, occlusion masks, Chamfer distance
//! and exact Earth Mover's Distance.
//!
//! Coordinates are `f64` throughout this module. [`PointCloud::normalized`]
//! additionally snaps coordinates to the `f32` grid (with a tiny
//! flush-to-zero threshold), which makes every later seed subtraction and
//! re-addition exact in `f64`: patches can be centralised and restored
//! bit-for-bit.

mod assignment;

pub use assignment::{emd_assignment, emd_exact, MAX_EXACT_EMD_POINTS};

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::scalar::Scalar;
use crate::tensor::{MatchPair, Tape, Tensor, TensorError};

/// Magnitudes below this (about 3e-8 at unit scale) are flushed to zero
/// during normalisation; together with the f32 snap this keeps every
/// coordinate on a common binary grid no finer than 2^-48, so
/// differences of coordinates are exactly representable.
const FLUSH_THRESHOLD: f64 = 2.9802322387695312e-8; // 2^-25

/// Headroom factor applied to the unit-sphere scale so the f32 snap
/// cannot push the maximum norm above 1.
const NORM_HEADROOM: f64 = 1.0 + 4e-7;

#[derive(Debug, Error)]
pub enum GeometryError {
    #[error("point cloud must contain at least one point")]
    EmptyCloud,
    #[error("non-finite coordinate at point {index}")]
    NonFiniteCoordinate { index: usize },
    #[error("cloud is degenerate: all points coincide, cannot normalise")]
    DegenerateCloud,
    #[error("{op}: requested {requested} of {available} points")]
    CountOutOfRange {
        op: &'static str,
        requested: usize,
        available: usize,
    },
    #[error("start index {index} out of range for {len} points")]
    StartOutOfRange { index: usize, len: usize },
    #[error("occlusion ratio {ratio} outside [0, 1)")]
    RatioOutOfRange { ratio: f64 },
    #[error("seed list length {seeds} does not match group count {groups}")]
    SeedCountMismatch { seeds: usize, groups: usize },
    #[error("anchor index {index} out of range for {len} seeds")]
    AnchorOutOfRange { index: usize, len: usize },
    #[error("group index {index} out of range for {groups} groups")]
    GroupIndexOutOfRange { index: usize, groups: usize },
    #[error("group index {index} listed twice in occlusion mask")]
    DuplicateGroupIndex { index: usize },
    #[error("point sets must be non-empty")]
    EmptyPointSet,
    #[error("exact EMD requires equal-size sets, got {left} and {right}")]
    UnequalSets { left: usize, right: usize },
    #[error("exact EMD limited to {limit} points, got {n}")]
    TooManyPointsForExactEmd { n: usize, limit: usize },
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

/// How farthest point sampling chooses its first seed.
#[derive(Debug, Clone, Copy)]
pub enum FpsStart {
    /// Deterministic start at a given point index.
    Index(usize),
    /// Uniformly drawn start from a seeded generator (used during
    /// training, where the extra variation acts as augmentation).
    Seeded(u64),
}

/// Which patches an occlusion mask hides.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OcclusionStrategy {
    /// Uniform draw of patches without replacement.
    Random,
    /// A spatially contiguous block: the patches whose seeds are nearest
    /// a randomly drawn anchor seed.
    Block,
}

impl OcclusionStrategy {
    pub fn name(self) -> &'static str {
        match self {
            OcclusionStrategy::Random => "random",
            OcclusionStrategy::Block => "block",
        }
    }
}

impl std::str::FromStr for OcclusionStrategy {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "random" => Ok(OcclusionStrategy::Random),
            "block" => Ok(OcclusionStrategy::Block),
            other => Err(format!("unknown occlusion strategy `{other}`")),
        }
    }
}

/// An `N x 3` point cloud.
#[derive(Debug, Clone, PartialEq)]
pub struct PointCloud {
    points: Vec<[f64; 3]>,
}

impl PointCloud {
    pub fn new(points: Vec<[f64; 3]>) -> Result<Self, GeometryError> {
        if points.is_empty() {
            return Err(GeometryError::EmptyCloud);
        }
        for (i, p) in points.iter().enumerate() {
            if p.iter().any(|c| !c.is_finite()) {
                return Err(GeometryError::NonFiniteCoordinate { index: i });
            }
        }
        Ok(Self { points })
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn points(&self) -> &[[f64; 3]] {
        &self.points
    }

    pub fn centroid(&self) -> [f64; 3] {
        let mut c = [0.0; 3];
        for p in &self.points {
            for a in 0..3 {
                c[a] += p[a];
            }
        }
        let n = self.points.len() as f64;
        [c[0] / n, c[1] / n, c[2] / n]
    }

    pub fn max_norm(&self) -> f64 {
        self.points
            .iter()
            .map(|p| (p[0] * p[0] + p[1] * p[1] + p[2] * p[2]).sqrt())
            .fold(0.0, f64::max)
    }

    /// Centres the cloud on its centroid and scales it into the unit
    /// sphere: afterwards the centroid is at the origin (within 1e-6)
    /// and the maximum point norm lies in `[1 - 1e-6, 1]`.
    ///
    /// Coordinates are then snapped to the nearest `f32` value and tiny
    /// magnitudes flushed to zero. Every surviving coordinate is an
    /// integer multiple of 2^-48 with magnitude at most 1, so later
    /// differences of points (patch centralisation) and their inverse
    /// are exact in `f64`.
    pub fn normalized(&self) -> Result<PointCloud, GeometryError> {
        let c = self.centroid();
        let mut shifted: Vec<[f64; 3]> = self
            .points
            .iter()
            .map(|p| [p[0] - c[0], p[1] - c[1], p[2] - c[2]])
            .collect();
        let max_norm = shifted
            .iter()
            .map(|p| (p[0] * p[0] + p[1] * p[1] + p[2] * p[2]).sqrt())
            .fold(0.0, f64::max);
        if max_norm == 0.0 {
            return Err(GeometryError::DegenerateCloud);
        }
        let scale = 1.0 / (max_norm * NORM_HEADROOM);
        for p in &mut shifted {
            for a in 0..3 {
                let snapped = (p[a] * scale) as f32 as f64;
                p[a] = if snapped.abs() < FLUSH_THRESHOLD {
                    0.0
                } else {
                    snapped
                };
            }
        }
        Ok(PointCloud { points: shifted })
    }
}

/// Farthest point sampling: greedily picks the point maximising the
/// minimum squared distance to the already chosen seeds. Ties resolve
/// toward the lowest index. The chosen seeds are existing points of the
/// cloud, identified by index, in selection order.
pub fn fps(
    points: &[[f64; 3]],
    count: usize,
    start: FpsStart,
) -> Result<Vec<usize>, GeometryError> {
    let n = points.len();
    if n == 0 {
        return Err(GeometryError::EmptyCloud);
    }
    if count == 0 || count > n {
        return Err(GeometryError::CountOutOfRange {
            op: "fps",
            requested: count,
            available: n,
        });
    }
    let first = match start {
        FpsStart::Index(i) => {
            if i >= n {
                return Err(GeometryError::StartOutOfRange { index: i, len: n });
            }
            i
        }
        FpsStart::Seeded(seed) => ChaCha8Rng::seed_from_u64(seed).gen_range(0..n),
    };

    let mut chosen = Vec::with_capacity(count);
    let mut min_d2 = vec![f64::INFINITY; n];
    let mut current = first;
    chosen.push(first);
    for _ in 1..count {
        let c = points[current];
        let mut best = f64::NEG_INFINITY;
        let mut best_ix = 0;
        for (i, p) in points.iter().enumerate() {
            let d2 = squared_distance(p, &c);
            if d2 < min_d2[i] {
                min_d2[i] = d2;
            }
            if min_d2[i] > best {
                best = min_d2[i];
                best_ix = i;
            }
        }
        chosen.push(best_ix);
        current = best_ix;
    }
    Ok(chosen)
}

/// Patches produced by [`knn_group_centralize`]: per seed, the offsets
/// of its `k` nearest neighbours (seed subtracted) plus the indices of
/// those neighbours in the parent cloud. Adding `seeds[i]` back to
/// `patches[i]` reproduces the parent points bit-exactly for normalised
/// clouds (see [`PointCloud::normalized`]).
#[derive(Debug, Clone)]
pub struct PatchSet {
    pub seeds: Vec<[f64; 3]>,
    pub patches: Vec<Vec<[f64; 3]>>,
    pub source_indices: Vec<Vec<usize>>,
}

impl PatchSet {
    pub fn groups(&self) -> usize {
        self.seeds.len()
    }

    pub fn patch_points(&self) -> usize {
        self.patches.first().map_or(0, Vec::len)
    }

    /// The absolute coordinates of patch `i` (offsets plus seed).
    pub fn absolute_patch(&self, i: usize) -> Vec<[f64; 3]> {
        let s = self.seeds[i];
        self.patches[i]
            .iter()
            .map(|o| [o[0] + s[0], o[1] + s[1], o[2] + s[2]])
            .collect()
    }
}

/// Groups the `k` nearest neighbours of every seed (the seed itself
/// included, at zero offset) and centralises each patch by subtracting
/// its seed. Neighbours are ordered by ascending distance, ties toward
/// the lower point index. Patches may overlap: a point can appear in
/// several patches.
pub fn knn_group_centralize(
    cloud: &PointCloud,
    seed_indices: &[usize],
    k: usize,
) -> Result<PatchSet, GeometryError> {
    let points = cloud.points();
    let n = points.len();
    if k == 0 || k > n {
        return Err(GeometryError::CountOutOfRange {
            op: "knn_group_centralize",
            requested: k,
            available: n,
        });
    }
    let mut seeds = Vec::with_capacity(seed_indices.len());
    let mut patches = Vec::with_capacity(seed_indices.len());
    let mut source_indices = Vec::with_capacity(seed_indices.len());
    let mut order: Vec<usize> = Vec::with_capacity(n);
    for &si in seed_indices {
        if si >= n {
            return Err(GeometryError::StartOutOfRange { index: si, len: n });
        }
        let s = points[si];
        order.clear();
        order.extend(0..n);
        order.sort_unstable_by(|&a, &b| {
            let da = squared_distance(&points[a], &s);
            let db = squared_distance(&points[b], &s);
            da.partial_cmp(&db)
                .expect("finite distances")
                .then(a.cmp(&b))
        });
        let nearest = &order[..k];
        let offsets: Vec<[f64; 3]> = nearest
            .iter()
            .map(|&i| {
                let p = points[i];
                [p[0] - s[0], p[1] - s[1], p[2] - s[2]]
            })
            .collect();
        seeds.push(s);
        patches.push(offsets);
        source_indices.push(nearest.to_vec());
    }
    Ok(PatchSet {
        seeds,
        patches,
        source_indices,
    })
}

/// Which patches of a grouped cloud are hidden from the encoder.
///
/// `visible` and `occluded` are disjoint, sorted index lists that
/// together cover `0..groups`.
#[derive(Debug, Clone)]
pub struct OcclusionMask {
    visible: Vec<usize>,
    occluded: Vec<usize>,
    strategy: OcclusionStrategy,
    ratio: f64,
}

impl OcclusionMask {
    fn build(
        groups: usize,
        mut occluded: Vec<usize>,
        strategy: OcclusionStrategy,
        ratio: f64,
    ) -> Self {
        occluded.sort_unstable();
        let mut is_occ = vec![false; groups];
        for &i in &occluded {
            is_occ[i] = true;
        }
        let visible = (0..groups).filter(|&i| !is_occ[i]).collect();
        Self {
            visible,
            occluded,
            strategy,
            ratio,
        }
    }

    /// Mask with an explicit occluded index set (each index unique and
    /// below `groups`). Mainly useful for constructing fixed scenarios
    /// in evaluations and tests; training code draws masks via
    /// [`occlude`].
    pub fn from_occluded(
        groups: usize,
        occluded: &[usize],
        strategy: OcclusionStrategy,
        ratio: f64,
    ) -> Result<Self, GeometryError> {
        let mut seen = vec![false; groups];
        for &i in occluded {
            if i >= groups {
                return Err(GeometryError::GroupIndexOutOfRange { index: i, groups });
            }
            if seen[i] {
                return Err(GeometryError::DuplicateGroupIndex { index: i });
            }
            seen[i] = true;
        }
        Ok(Self::build(groups, occluded.to_vec(), strategy, ratio))
    }

    pub fn groups(&self) -> usize {
        self.visible.len() + self.occluded.len()
    }

    /// Sorted indices of visible patches.
    pub fn visible(&self) -> &[usize] {
        &self.visible
    }

    /// Sorted indices of occluded patches.
    pub fn occluded(&self) -> &[usize] {
        &self.occluded
    }

    pub fn strategy(&self) -> OcclusionStrategy {
        self.strategy
    }

    pub fn ratio(&self) -> f64 {
        self.ratio
    }
}

/// Number of patches hidden at a given ratio: `round(ratio * groups)`.
pub fn occluded_count(groups: usize, ratio: f64) -> usize {
    (ratio * groups as f64).round() as usize
}

/// Draws an occlusion mask over `groups` patches. `ratio` must lie in
/// `[0, 1)`; the number of occluded patches is `round(ratio * groups)`.
/// `seeds` are the patch seed coordinates (used by the block strategy;
/// the random strategy only checks the length). Deterministic in
/// `rng_seed`.
pub fn occlude(
    groups: usize,
    ratio: f64,
    strategy: OcclusionStrategy,
    seeds: &[[f64; 3]],
    rng_seed: u64,
) -> Result<OcclusionMask, GeometryError> {
    if !(0.0..1.0).contains(&ratio) {
        return Err(GeometryError::RatioOutOfRange { ratio });
    }
    if seeds.len() != groups {
        return Err(GeometryError::SeedCountMismatch {
            seeds: seeds.len(),
            groups,
        });
    }
    let r = occluded_count(groups, ratio);
    let mut rng = ChaCha8Rng::seed_from_u64(rng_seed);
    match strategy {
        OcclusionStrategy::Random => {
            let occluded = rand::seq::index::sample(&mut rng, groups, r).into_vec();
            Ok(OcclusionMask::build(groups, occluded, strategy, ratio))
        }
        OcclusionStrategy::Block => {
            let anchor = rng.gen_range(0..groups);
            block_mask_with_anchor(groups, ratio, seeds, anchor)
        }
    }
}

/// Block occlusion around a fixed anchor: hides the `round(ratio*groups)`
/// seeds nearest the anchor seed (the anchor itself included; distance
/// ties resolve toward the lower index).
pub fn block_mask_with_anchor(
    groups: usize,
    ratio: f64,
    seeds: &[[f64; 3]],
    anchor: usize,
) -> Result<OcclusionMask, GeometryError> {
    if !(0.0..1.0).contains(&ratio) {
        return Err(GeometryError::RatioOutOfRange { ratio });
    }
    if seeds.len() != groups {
        return Err(GeometryError::SeedCountMismatch {
            seeds: seeds.len(),
            groups,
        });
    }
    if anchor >= groups {
        return Err(GeometryError::AnchorOutOfRange {
            index: anchor,
            len: groups,
        });
    }
    let r = occluded_count(groups, ratio);
    let a = seeds[anchor];
    let mut order: Vec<usize> = (0..groups).collect();
    order.sort_unstable_by(|&i, &j| {
        let di = squared_distance(&seeds[i], &a);
        let dj = squared_distance(&seeds[j], &a);
        di.partial_cmp(&dj)
            .expect("finite distances")
            .then(i.cmp(&j))
    });
    let occluded = order[..r].to_vec();
    Ok(OcclusionMask::build(
        groups,
        occluded,
        OcclusionStrategy::Block,
        ratio,
    ))
}

/// Symmetric Chamfer distance between a predicted point set (an `(m, 3)`
/// tensor, differentiable) and a fixed target set:
///
/// `(1/m) sum_p min_q |p - q| + (1/l) sum_q min_p |p - q|`
///
/// with unsquared Euclidean norms. The minimising matches are recorded
/// at forward time (ties toward the lowest index) and gradient flows to
/// the predicted points through both terms.
pub fn chamfer_distance<T: Scalar>(
    tape: &mut Tape<T>,
    predicted: &Tensor<T>,
    target: &[[T; 3]],
) -> Result<Tensor<T>, GeometryError> {
    if predicted.rank() != 2 || predicted.shape()[1] != 3 {
        return Err(GeometryError::Tensor(TensorError::InvalidShape {
            op: "chamfer_distance",
            shape: predicted.shape().to_vec(),
            reason: "expected an (m, 3) tensor of points",
        }));
    }
    if target.is_empty() {
        return Err(GeometryError::EmptyPointSet);
    }
    let m = predicted.shape()[0];
    let l = target.len();
    let pv = predicted.data();
    let point = |i: usize| -> [T; 3] { [pv[i * 3], pv[i * 3 + 1], pv[i * 3 + 2]] };

    let mut pairs = Vec::with_capacity(m + l);
    let w_pred = T::from_f64(1.0 / m as f64);
    for i in 0..m {
        let p = point(i);
        let mut best = T::infinity();
        let mut best_j = 0;
        for (j, q) in target.iter().enumerate() {
            let d2 = sq_dist3(&p, q);
            if d2 < best {
                best = d2;
                best_j = j;
            }
        }
        pairs.push(MatchPair {
            pred_row: i,
            target: target[best_j],
            weight: w_pred,
        });
    }
    let w_target = T::from_f64(1.0 / l as f64);
    for q in target {
        let mut best = T::infinity();
        let mut best_i = 0;
        for i in 0..m {
            let d2 = sq_dist3(&point(i), q);
            if d2 < best {
                best = d2;
                best_i = i;
            }
        }
        pairs.push(MatchPair {
            pred_row: best_i,
            target: *q,
            weight: w_target,
        });
    }
    Ok(tape.matched_distance(predicted, pairs)?)
}

fn sq_dist3<T: Scalar>(a: &[T; 3], b: &[T; 3]) -> T {
    let dx = a[0] - b[0];
    let dy = a[1] - b[1];
    let dz = a[2] - b[2];
    dx * dx + dy * dy + dz * dz
}

pub(crate) fn squared_distance(a: &[f64; 3], b: &[f64; 3]) -> f64 {
    let dx = a[0] - b[0];
    let dy = a[1] - b[1];
    let dz = a[2] - b[2];
    dx * dx + dy * dy + dz * dz
}

#[cfg(test)]
mod tests {
    use super::*;

    fn square_corners() -> Vec<[f64; 3]> {
        vec![
            [0.0, 0.0, 0.0],
            [1.0, 0.0, 0.0],
            [0.0, 1.0, 0.0],
            [1.0, 1.0, 0.0],
        ]
    }

    #[test]
    fn fps_on_square_picks_opposite_corners() {
        let picked = fps(&square_corners(), 2, FpsStart::Index(0)).unwrap();
        assert_eq!(picked, vec![0, 3]);
    }

    #[test]
    fn fps_with_count_equal_n_returns_all_indices() {
        let pts = square_corners();
        let picked = fps(&pts, 4, FpsStart::Index(0)).unwrap();
        let mut sorted = picked.clone();
        sorted.sort_unstable();
        assert_eq!(sorted, vec![0, 1, 2, 3]);
        assert_eq!(picked[0], 0);
    }

    #[test]
    fn fps_count_zero_is_rejected() {
        let err = fps(&square_corners(), 0, FpsStart::Index(0)).unwrap_err();
        assert!(matches!(err, GeometryError::CountOutOfRange { .. }));
    }

    #[test]
    fn fps_is_invariant_to_appended_duplicates() {
        let mut pts = square_corners();
        let base = fps(&pts, 3, FpsStart::Index(0)).unwrap();
        pts.push([0.0, 0.0, 0.0]); // duplicate of point 0, never selected
        pts.push([1.0, 1.0, 0.0]); // duplicate of point 3
        let with_dups = fps(&pts, 3, FpsStart::Index(0)).unwrap();
        assert_eq!(base, with_dups);
    }

    #[test]
    fn knn_includes_seed_at_zero_offset() {
        // Points on a line at 0, 1, 2, 4; seeds at indices 0 and 3.
        let pts = vec![
            [0.0, 0.0, 0.0],
            [1.0, 0.0, 0.0],
            [2.0, 0.0, 0.0],
            [4.0, 0.0, 0.0],
        ];
        let cloud = PointCloud::new(pts).unwrap();
        let ps = knn_group_centralize(&cloud, &[0, 3], 2).unwrap();
        assert_eq!(ps.source_indices[0], vec![0, 1]);
        assert_eq!(ps.patches[0][0], [0.0, 0.0, 0.0]);
        assert_eq!(ps.patches[0][1], [1.0, 0.0, 0.0]);
        assert_eq!(ps.source_indices[1], vec![3, 2]);
        assert_eq!(ps.patches[1][0], [0.0, 0.0, 0.0]);
        assert_eq!(ps.patches[1][1], [-2.0, 0.0, 0.0]);
    }

    #[test]
    fn knn_with_k_one_gives_all_zero_offsets() {
        let cloud = PointCloud::new(square_corners()).unwrap();
        let ps = knn_group_centralize(&cloud, &[0, 1, 2, 3], 1).unwrap();
        for (i, patch) in ps.patches.iter().enumerate() {
            assert_eq!(patch[0], [0.0, 0.0, 0.0], "patch {i}");
            assert_eq!(ps.source_indices[i], vec![i]);
        }
    }

    #[test]
    fn occlude_covers_exact_counts() {
        let seeds = vec![[0.0; 3]; 64];
        let mask = occlude(64, 0.75, OcclusionStrategy::Random, &seeds, 7).unwrap();
        assert_eq!(mask.occluded().len(), 48);
        assert_eq!(mask.visible().len(), 16);
    }

    #[test]
    fn occlude_ratio_zero_hides_nothing() {
        let seeds = vec![[0.0; 3]; 8];
        let mask = occlude(8, 0.0, OcclusionStrategy::Random, &seeds, 7).unwrap();
        assert!(mask.occluded().is_empty());
        assert_eq!(mask.visible(), (0..8).collect::<Vec<_>>());
    }

    #[test]
    fn occlude_rejects_ratio_one() {
        let seeds = vec![[0.0; 3]; 8];
        let err = occlude(8, 1.0, OcclusionStrategy::Random, &seeds, 7).unwrap_err();
        assert!(matches!(err, GeometryError::RatioOutOfRange { .. }));
    }

    #[test]
    fn occlude_is_reproducible() {
        let seeds: Vec<[f64; 3]> = (0..16).map(|i| [i as f64, 0.0, 0.0]).collect();
        for strategy in [OcclusionStrategy::Random, OcclusionStrategy::Block] {
            let a = occlude(16, 0.5, strategy, &seeds, 42).unwrap();
            let b = occlude(16, 0.5, strategy, &seeds, 42).unwrap();
            assert_eq!(a.occluded(), b.occluded());
            assert_eq!(a.visible(), b.visible());
        }
    }

    #[test]
    fn block_mask_hides_contiguous_run_on_a_line() {
        // Seeds on a line; anchor 0 must hide the nearest four: 0..=3.
        let seeds: Vec<[f64; 3]> = (0..8).map(|i| [i as f64, 0.0, 0.0]).collect();
        let mask = block_mask_with_anchor(8, 0.5, &seeds, 0).unwrap();
        assert_eq!(mask.occluded(), &[0, 1, 2, 3]);
    }

    #[test]
    fn chamfer_of_identical_sets_is_zero() {
        let mut tape = Tape::<f64>::new();
        let pts = square_corners();
        let pred = Tensor::from_rows3(&pts).unwrap();
        let d = chamfer_distance(&mut tape, &pred, &pts).unwrap();
        assert_eq!(d.scalar().unwrap(), 0.0);
    }

    #[test]
    fn chamfer_of_offset_singletons_is_twice_the_distance_mean() {
        // {(0,0,0)} vs {(3,4,0)}: both directed terms are 5, sum is 10.
        let mut tape = Tape::<f64>::new();
        let pred = Tensor::from_rows3(&[[0.0, 0.0, 0.0]]).unwrap();
        let d = chamfer_distance(&mut tape, &pred, &[[3.0, 4.0, 0.0]]).unwrap();
        assert!((d.scalar().unwrap() - 10.0).abs() <= 1e-12);
    }

    #[test]
    fn chamfer_rejects_empty_target() {
        let mut tape = Tape::<f64>::new();
        let pred = Tensor::from_rows3(&[[0.0; 3]]).unwrap();
        let err = chamfer_distance(&mut tape, &pred, &[]).unwrap_err();
        assert!(matches!(err, GeometryError::EmptyPointSet));
    }

    #[test]
    fn normalized_centres_and_scales() {
        let cloud = PointCloud::new(vec![
            [10.0, 0.0, 0.0],
            [12.0, 1.0, 0.0],
            [11.0, -3.0, 2.0],
            [9.5, 2.0, -1.0],
        ])
        .unwrap();
        let norm = cloud.normalized().unwrap();
        let c = norm.centroid();
        assert!(c.iter().all(|v| v.abs() <= 1e-6), "centroid {c:?}");
        let m = norm.max_norm();
        assert!((1.0 - 1e-6..=1.0).contains(&m), "max norm {m}");
    }

    #[test]
    fn normalized_rejects_degenerate_cloud() {
        let cloud = PointCloud::new(vec![[1.0, 2.0, 3.0]; 5]).unwrap();
        assert!(matches!(
            cloud.normalized().unwrap_err(),
            GeometryError::DegenerateCloud
        ));
    }

    #[test]
    fn centralisation_roundtrips_bit_exactly_after_normalisation() {
        use rand::Rng;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(9);
        let pts: Vec<[f64; 3]> = (0..128)
            .map(|_| {
                [
                    rng.gen_range(-1.0..1.0),
                    rng.gen_range(-1.0..1.0),
                    rng.gen_range(-1.0..1.0),
                ]
            })
            .collect();
        let cloud = PointCloud::new(pts).unwrap().normalized().unwrap();
        let seeds = fps(cloud.points(), 16, FpsStart::Index(0)).unwrap();
        let ps = knn_group_centralize(&cloud, &seeds, 8).unwrap();
        for i in 0..ps.groups() {
            let restored = ps.absolute_patch(i);
            for (k, &src) in ps.source_indices[i].iter().enumerate() {
                assert_eq!(
                    restored[k],
                    cloud.points()[src],
                    "patch {i} point {k} must restore bit-exactly"
                );
            }
        }
    }
}
