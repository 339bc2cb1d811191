//! Place recognition over local maps, rigid alignment of matched landmarks and closure
//! validation.

mod hbst;

pub use hbst::{HbstEntry, HbstMatch, HbstNode, HbstTree};

use std::collections::BTreeMap;

use nalgebra::{Matrix6, Vector3, Vector6};

use crate::geometry::{se3_exp, skew, Isometry3, Twist};
use crate::map::{transform_point, LandmarkId, LocalMapId, WorldMap};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RelocalizerConfig {
    pub max_leaf_size: usize,
    pub max_depth: usize,
    pub query_max_distance: u32,
    pub min_overlap: f64,
    pub temporal_gap: usize,
    pub icp_inlier_threshold: f64,
    pub icp_iterations: usize,
    pub min_inliers: usize,
    /// Mean squared inlier residual bound (m²).
    pub max_mean_error: f64,
}

impl Default for RelocalizerConfig {
    fn default() -> Self {
        Self {
            max_leaf_size: 100,
            max_depth: 16,
            query_max_distance: 25,
            min_overlap: 0.15,
            temporal_gap: 3,
            icp_inlier_threshold: 0.5,
            icp_iterations: 20,
            min_inliers: 25,
            max_mean_error: 0.25,
        }
    }
}

impl RelocalizerConfig {
    pub fn validate(&self) -> Result<(), String> {
        if self.max_leaf_size == 0 || self.icp_iterations == 0 {
            return Err("leaf size and ICP iterations must be positive".into());
        }
        if !(0.0..=1.0).contains(&self.min_overlap) {
            return Err("min_overlap must lie in [0, 1]".into());
        }
        if self.icp_inlier_threshold <= 0.0 || self.max_mean_error < 0.0 {
            return Err("ICP thresholds must be positive".into());
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ClosureCandidate {
    pub map: LocalMapId,
    pub overlap: f64,
    /// `(landmark in the current map, landmark in the candidate map)`, one per current landmark.
    pub correspondences: Vec<(LandmarkId, LandmarkId)>,
}

/// Validated relative transform between the current map `map_i` and an older map `map_j`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ClosureConstraint {
    pub map_i: LocalMapId,
    pub map_j: LocalMapId,
    /// Maps coordinates of `map_i` into `map_j`.
    pub t_i2j: Isometry3,
    pub inliers: usize,
    pub mean_error: f64,
}

/// Queries the tree with every descriptor of the current map's landmarks and scores past
/// maps at least `temporal_gap` older by the fraction of query descriptors they matched.
pub fn find_closure_candidates(
    tree: &HbstTree,
    world: &WorldMap,
    current: LocalMapId,
    cfg: &RelocalizerConfig,
) -> Vec<ClosureCandidate> {
    let Some(newest_allowed) = current.0.checked_sub(cfg.temporal_gap) else { return Vec::new() };
    let map = world.local_map(current);
    let mut total = 0usize;
    let mut matched: BTreeMap<LocalMapId, usize> = BTreeMap::new();
    // (map, query landmark) -> (distance, reference landmark)
    let mut best: BTreeMap<(LocalMapId, LandmarkId), (u32, LandmarkId)> = BTreeMap::new();

    for &l in &map.landmarks {
        for d in &world.landmark(l).descriptors {
            total += 1;
            let mut per_map: BTreeMap<LocalMapId, (u32, LandmarkId)> = BTreeMap::new();
            for (e, dist) in tree.query_all(d, cfg.query_max_distance) {
                if e.landmark == l || e.map.0 > newest_allowed {
                    continue;
                }
                let slot = per_map.entry(e.map).or_insert((dist, e.landmark));
                if dist < slot.0 {
                    *slot = (dist, e.landmark);
                }
            }
            for (m, hit) in per_map {
                *matched.entry(m).or_default() += 1;
                let slot = best.entry((m, l)).or_insert(hit);
                if hit.0 < slot.0 {
                    *slot = hit;
                }
            }
        }
    }
    if total == 0 {
        return Vec::new();
    }
    matched
        .into_iter()
        .map(|(m, count)| (m, count as f64 / total as f64))
        .filter(|&(_, overlap)| overlap >= cfg.min_overlap)
        .map(|(m, overlap)| ClosureCandidate {
            map: m,
            overlap,
            correspondences: best.range((m, LandmarkId(0))..=(m, LandmarkId(usize::MAX))).map(|(&(_, q), &(_, r))| (q, r)).collect(),
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq)]
pub struct Alignment {
    pub t_i2j: Isometry3,
    pub inliers: usize,
    /// Mean squared residual over inliers (m²).
    pub mean_error: f64,
    pub inlier_flags: Vec<bool>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, thiserror::Error)]
pub enum AlignError {
    #[error("alignment degenerate: {inliers} inliers")]
    Degenerate { inliers: usize },
}

const ICP_DAMPING: f64 = 1e-6;

/// One damped Gauss-Newton step on `Σ w‖T·p_i − p_j‖²` with left increments.
fn icp_step(t: &Isometry3, pairs: &[(Vector3<f64>, Vector3<f64>)], weights: &[f64]) -> Isometry3 {
    let mut h = Matrix6::<f64>::zeros();
    let mut b = Vector6::<f64>::zeros();
    for ((p_i, p_j), &w) in pairs.iter().zip(weights) {
        if w == 0.0 {
            continue;
        }
        let q = transform_point(t, p_i);
        let r = q - p_j;
        let mut j = nalgebra::Matrix3x6::<f64>::zeros();
        j.fixed_view_mut::<3, 3>(0, 0).copy_from(&nalgebra::Matrix3::identity());
        j.fixed_view_mut::<3, 3>(0, 3).copy_from(&(-skew(&q)));
        h += w * j.transpose() * j;
        b += w * j.transpose() * r;
    }
    h += Matrix6::identity() * ICP_DAMPING;
    let Some(ch) = h.cholesky() else { return *t };
    let mut dx: Twist = ch.solve(&(-b));
    let cost = |t: &Isometry3| -> f64 {
        pairs.iter().zip(weights).map(|((p_i, p_j), w)| w * (transform_point(t, p_i) - p_j).norm_squared()).sum()
    };
    let before = cost(t);
    // Backtrack so a large rotational step never increases the weighted cost.
    for _ in 0..20 {
        let candidate = se3_exp(&dx) * t;
        if cost(&candidate) <= before {
            return candidate;
        }
        dx *= 0.5;
    }
    *t
}

fn residuals(t: &Isometry3, pairs: &[(Vector3<f64>, Vector3<f64>)]) -> Vec<f64> {
    pairs.iter().map(|(p_i, p_j)| (transform_point(t, p_i) - p_j).norm()).collect()
}

/// Iteratively reweighted rigid alignment of known correspondences `(p_i, p_j)`.
///
/// Each round takes one step and then re-labels inliers as residual below `τ`. The first half
/// of the rounds down-weights current outliers by `τ²/r²` so a poor start can still pull
/// them in; the second half solves over inliers alone.
pub fn align_icp(pairs: &[(Vector3<f64>, Vector3<f64>)], inlier_threshold: f64, iterations: usize) -> Result<Alignment, AlignError> {
    if pairs.len() < 3 {
        return Err(AlignError::Degenerate { inliers: pairs.len() });
    }
    let tau2 = inlier_threshold * inlier_threshold;
    let mut t = Isometry3::identity();
    let mut flags = vec![true; pairs.len()];
    for round in 0..iterations {
        let hard = round >= iterations / 2;
        if hard && flags.iter().filter(|&&f| f).count() < 3 {
            return Err(AlignError::Degenerate { inliers: flags.iter().filter(|&&f| f).count() });
        }
        let r = residuals(&t, pairs);
        let weights: Vec<f64> = r
            .iter()
            .zip(&flags)
            .map(|(&r, &inl)| match (inl, hard) {
                (true, _) => 1.0,
                (false, true) => 0.0,
                (false, false) => tau2 / (r * r),
            })
            .collect();
        t = icp_step(&t, pairs, &weights);
        flags = residuals(&t, pairs).iter().map(|&r| r < inlier_threshold).collect();
    }
    let r = residuals(&t, pairs);
    let inliers = flags.iter().filter(|&&f| f).count();
    if inliers < 3 {
        return Err(AlignError::Degenerate { inliers });
    }
    let mean_error = r.iter().zip(&flags).filter(|(_, &f)| f).map(|(r, _)| r * r).sum::<f64>() / inliers as f64;
    Ok(Alignment { t_i2j: t, inliers, mean_error, inlier_flags: flags })
}

/// Rigid alignment over a fixed correspondence subset; returns the squared-residual sum
/// after every step.
pub fn align_fixed_set(pairs: &[(Vector3<f64>, Vector3<f64>)], iterations: usize) -> (Isometry3, Vec<f64>) {
    let weights = vec![1.0; pairs.len()];
    let mut t = Isometry3::identity();
    let mut history = Vec::with_capacity(iterations + 1);
    history.push(residuals(&t, pairs).iter().map(|r| r * r).sum());
    for _ in 0..iterations {
        t = icp_step(&t, pairs, &weights);
        history.push(residuals(&t, pairs).iter().map(|r| r * r).sum());
    }
    (t, history)
}

pub fn validate_closure(
    alignment: &Alignment,
    map_i: LocalMapId,
    map_j: LocalMapId,
    cfg: &RelocalizerConfig,
) -> Option<ClosureConstraint> {
    (alignment.inliers >= cfg.min_inliers && alignment.mean_error <= cfg.max_mean_error).then_some(ClosureConstraint {
        map_i,
        map_j,
        t_i2j: alignment.t_i2j,
        inliers: alignment.inliers,
        mean_error: alignment.mean_error,
    })
}

/// Owns the descriptor tree and turns each finished local map into validated closures.
#[derive(Clone, Debug, Default)]
pub struct Relocalizer {
    pub cfg: RelocalizerConfig,
    tree: HbstTree,
}

impl Relocalizer {
    pub fn new(cfg: RelocalizerConfig) -> Self {
        Self { cfg, tree: HbstTree::new(cfg.max_leaf_size, cfg.max_depth) }
    }

    pub fn tree(&self) -> &HbstTree {
        &self.tree
    }

    /// Searches past maps for `current`, aligns each candidate and validates the result.
    /// The current map's descriptors are added to the tree afterwards.
    pub fn process(&mut self, world: &WorldMap, current: LocalMapId) -> Vec<ClosureConstraint> {
        let mut closures = Vec::new();
        let map_i = world.local_map(current);
        for cand in find_closure_candidates(&self.tree, world, current, &self.cfg) {
            let map_j = world.local_map(cand.map);
            let pairs: Vec<_> = cand
                .correspondences
                .iter()
                .map(|&(q, r)| {
                    (
                        transform_point(&map_i.t_w2c(), &world.landmark(q).p_w),
                        transform_point(&map_j.t_w2c(), &world.landmark(r).p_w),
                    )
                })
                .collect();
            let Ok(alignment) = align_icp(&pairs, self.cfg.icp_inlier_threshold, self.cfg.icp_iterations) else {
                continue;
            };
            if let Some(c) = validate_closure(&alignment, current, cand.map, &self.cfg) {
                closures.push(c);
            }
        }
        let entries: Vec<HbstEntry> = map_i
            .landmarks
            .iter()
            .flat_map(|&l| {
                world.landmark(l).descriptors.iter().map(move |&d| HbstEntry { descriptor: d, landmark: l, map: current })
            })
            .collect();
        self.tree.insert(entries);
        closures
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::rotation_angle;
    use crate::rng::SplitMix64;

    fn cloud(rng: &mut SplitMix64, n: usize) -> Vec<Vector3<f64>> {
        (0..n).map(|_| Vector3::new(rng.uniform(-10.0, 10.0), rng.uniform(-3.0, 3.0), rng.uniform(2.0, 40.0))).collect()
    }

    fn rz90_t() -> Isometry3 {
        se3_exp(&Twist::new(0.0, 0.0, 0.0, 0.0, 0.0, std::f64::consts::FRAC_PI_2)) * Isometry3::translation(0.0, 0.0, 0.0)
    }

    fn transform_error(a: &Isometry3, b: &Isometry3) -> (f64, f64) {
        let d = a.inverse() * b;
        (d.translation.vector.norm(), rotation_angle(&d))
    }

    #[test]
    fn aligned_input_gives_identity() {
        let mut rng = SplitMix64::new(1);
        let pairs: Vec<_> = cloud(&mut rng, 30).into_iter().map(|p| (p, p)).collect();
        let a = align_icp(&pairs, 0.5, 20).unwrap();
        assert!(transform_error(&a.t_i2j, &Isometry3::identity()).0 < 1e-12);
        assert_eq!(a.inliers, 30);
        assert!(a.mean_error < 1e-20);
    }

    #[test]
    fn recovers_quarter_turn_exactly() {
        let mut rng = SplitMix64::new(2);
        let truth = Isometry3::translation(1.0, 0.0, 0.0) * rz90_t();
        let pairs: Vec<_> = cloud(&mut rng, 40).into_iter().map(|p| (p, transform_point(&truth, &p))).collect();
        let a = align_icp(&pairs, 0.5, 20).unwrap();
        let (dt, dr) = transform_error(&a.t_i2j, &truth);
        assert!(dt < 1e-9 && dr < 1e-9, "{dt} {dr}");
        assert_eq!(a.inliers, 40);
    }

    #[test]
    fn rejects_outliers() {
        let mut rng = SplitMix64::new(3);
        let truth = se3_exp(&Twist::new(0.5, -0.2, 1.0, 0.05, 0.3, -0.02));
        let mut pairs = Vec::new();
        let mut is_outlier = Vec::new();
        for p in cloud(&mut rng, 200) {
            let outlier = rng.bool(0.3);
            let q = if outlier {
                Vector3::new(rng.uniform(-10.0, 10.0), rng.uniform(-3.0, 3.0), rng.uniform(2.0, 40.0))
            } else {
                transform_point(&truth, &p)
            };
            pairs.push((p, q));
            is_outlier.push(outlier);
        }
        let a = align_icp(&pairs, 0.5, 20).unwrap();
        let (dt, dr) = transform_error(&a.t_i2j, &truth);
        assert!(dt < 1e-3 && dr < 1e-3, "{dt} {dr}");
        for ((flag, out), (p, q)) in a.inlier_flags.iter().zip(&is_outlier).zip(&pairs) {
            if *out && (transform_point(&truth, p) - q).norm() > 0.5 {
                assert!(!flag);
            }
        }
    }

    #[test]
    fn too_few_pairs_is_degenerate() {
        let p = Vector3::new(1.0, 2.0, 3.0);
        assert_eq!(align_icp(&[(p, p), (p, p)], 0.5, 20), Err(AlignError::Degenerate { inliers: 2 }));
        let far = vec![(p, p + Vector3::new(50.0, 0.0, 0.0)); 2];
        let mut all = far;
        all.push((Vector3::zeros(), Vector3::new(0.0, 80.0, 0.0)));
        all.push((Vector3::new(9.0, 0.0, 0.0), Vector3::new(0.0, 0.0, -70.0)));
        assert!(align_icp(&all, 0.5, 20).is_err());
    }

    #[test]
    fn fixed_set_residual_never_increases() {
        let mut rng = SplitMix64::new(4);
        for _ in 0..20 {
            let truth = se3_exp(&Twist::new(rng.gaussian(1.0), rng.gaussian(1.0), rng.gaussian(1.0), rng.gaussian(0.3), rng.gaussian(0.3), rng.gaussian(0.3)));
            let pairs: Vec<_> = cloud(&mut rng, 30)
                .into_iter()
                .map(|p| (p, transform_point(&truth, &p) + Vector3::new(rng.gaussian(0.05), rng.gaussian(0.05), rng.gaussian(0.05))))
                .collect();
            let (_, history) = align_fixed_set(&pairs, 20);
            for w in history.windows(2) {
                assert!(w[1] <= w[0] * (1.0 + 1e-12) + 1e-12, "{history:?}");
            }
        }
    }

    #[test]
    fn validation_thresholds() {
        let cfg = RelocalizerConfig::default();
        let base = Alignment { t_i2j: Isometry3::identity(), inliers: 100, mean_error: 0.01, inlier_flags: vec![] };
        assert!(validate_closure(&base, LocalMapId(9), LocalMapId(1), &cfg).is_some());
        assert!(validate_closure(&Alignment { inliers: 10, ..base.clone() }, LocalMapId(9), LocalMapId(1), &cfg).is_none());
        assert!(validate_closure(&Alignment { mean_error: 0.5, ..base }, LocalMapId(9), LocalMapId(1), &cfg).is_none());
    }
}
