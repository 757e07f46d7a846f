//! The anchored noise prior: a Gaussian mixture fitted to expert trajectory
//! deltas.
//!
//! Expert trajectories are converted to per-step displacement ("delta")
//! sequences, normalized per axis, flattened, and clustered with k-means.
//! Each cluster becomes an isotropic Gaussian component anchored at the
//! cluster centroid. Sampling draws once from *every* component in
//! parallel — the component weights are all fixed to 1 and are read as
//! "one draw per component", not as mixture proportions — which is what ties
//! each noise draw to a distinct trajectory mode.

use rand::Rng as _;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::rng::{rng_from, standard_normal, Rng};
use crate::synthworld::{Scenario, Trajectory};

/// Floor for per-axis normalization scales (guards all-identical datasets).
pub const NORM_EPS: f64 = 1e-8;
/// Floor for component standard deviations (guards single-point clusters).
pub const SIGMA_FLOOR: f64 = 1e-3;
/// Lloyd iteration cap used by [`build_gmn`].
pub const KMEANS_MAX_ITERS: usize = 100;
/// Centroid-shift convergence threshold used by [`build_gmn`].
pub const KMEANS_TOL: f64 = 1e-9;

#[derive(Debug, Error)]
pub enum GmnError {
    #[error("dataset has no expert trajectories")]
    EmptyDataset,
    #[error("k-means needs at least k={k} points, got {points}")]
    TooFewPoints { points: usize, k: usize },
    #[error("component index {index} out of range for k={k}")]
    IndexOutOfRange { index: usize, k: usize },
    #[error("sigma must be positive and finite, got {0}")]
    BadSigma(f64),
    #[error("mixture needs at least one component")]
    NoComponents,
    #[error("component {index} has dimension {got}, expected {expected}")]
    DimMismatch {
        index: usize,
        got: usize,
        expected: usize,
    },
    #[error("non-finite component mean at index {0}")]
    NonFiniteMean(usize),
}

/// Per-axis affine normalization for trajectory deltas: `(x − mean)/scale`
/// with `scale = max(max − mean, mean − min)`, so the dominating side of the
/// population maps to ±1.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NormalizationConstants {
    pub delta_mean: [f64; 2],
    pub scale: [f64; 2],
}

impl NormalizationConstants {
    /// Identity transform (mean 0, scale 1) — used by the standard-Gaussian
    /// ablation prior when no data statistics are wanted.
    pub fn identity() -> Self {
        Self {
            delta_mean: [0.0, 0.0],
            scale: [1.0, 1.0],
        }
    }

    pub fn normalize_delta(&self, d: [f64; 2]) -> [f64; 2] {
        [
            (d[0] - self.delta_mean[0]) / self.scale[0],
            (d[1] - self.delta_mean[1]) / self.scale[1],
        ]
    }

    pub fn denormalize_delta(&self, d: [f64; 2]) -> [f64; 2] {
        [
            d[0] * self.scale[0] + self.delta_mean[0],
            d[1] * self.scale[1] + self.delta_mean[1],
        ]
    }

    /// Normalize a delta sequence and flatten to `[x0, y0, x1, y1, …]`.
    pub fn normalize_flat(&self, deltas: &[[f64; 2]]) -> Vec<f64> {
        deltas
            .iter()
            .flat_map(|&d| self.normalize_delta(d))
            .collect()
    }

    /// Inverse of [`Self::normalize_flat`].
    pub fn denormalize_flat(&self, flat: &[f64]) -> Vec<[f64; 2]> {
        assert!(flat.len() % 2 == 0, "flattened deltas must pair up");
        flat.chunks_exact(2)
            .map(|c| self.denormalize_delta([c[0], c[1]]))
            .collect()
    }
}

/// Per-step displacements of a trajectory, with the ego origin prepended so
/// the sequence has the same length as the waypoint horizon.
pub fn trajectory_deltas(traj: &Trajectory) -> Vec<[f64; 2]> {
    let pts = traj.with_origin();
    pts.windows(2)
        .map(|w| [w[1][0] - w[0][0], w[1][1] - w[0][1]])
        .collect()
}

/// Cumulative-sum a delta sequence back into waypoints (exact inverse of
/// [`trajectory_deltas`]).
pub fn deltas_to_waypoints(deltas: &[[f64; 2]]) -> Vec<[f64; 2]> {
    let mut acc = [0.0, 0.0];
    deltas
        .iter()
        .map(|d| {
            acc = [acc[0] + d[0], acc[1] + d[1]];
            acc
        })
        .collect()
}

/// Flattened normalized delta vector for one expert — the space the prior,
/// the flow, and the decoder all operate in.
pub fn normalized_expert(traj: &Trajectory, consts: &NormalizationConstants) -> Vec<f64> {
    consts.normalize_flat(&trajectory_deltas(traj))
}

/// Decode a flattened normalized delta vector into a trajectory in meters.
pub fn flat_to_trajectory(flat: &[f64], consts: &NormalizationConstants, dt: f64) -> Trajectory {
    Trajectory::new(deltas_to_waypoints(&consts.denormalize_flat(flat)), dt)
}

/// Fit per-axis normalization over the full trajectory × timestep population
/// of deltas.
pub fn fit_normalization(
    all_deltas: &[Vec<[f64; 2]>],
) -> Result<NormalizationConstants, GmnError> {
    let mut n = 0usize;
    let mut sum = [0.0f64; 2];
    let mut lo = [f64::INFINITY; 2];
    let mut hi = [f64::NEG_INFINITY; 2];
    for seq in all_deltas {
        for d in seq {
            for a in 0..2 {
                sum[a] += d[a];
                lo[a] = lo[a].min(d[a]);
                hi[a] = hi[a].max(d[a]);
            }
            n += 1;
        }
    }
    if n == 0 {
        return Err(GmnError::EmptyDataset);
    }
    let mut delta_mean = [0.0; 2];
    let mut scale = [0.0; 2];
    for a in 0..2 {
        delta_mean[a] = sum[a] / n as f64;
        scale[a] = (hi[a] - delta_mean[a]).max(delta_mean[a] - lo[a]).max(NORM_EPS);
    }
    Ok(NormalizationConstants { delta_mean, scale })
}

/// Seeded k-means over flattened delta vectors: k-means++ initialization,
/// Lloyd iterations until the largest centroid shift drops below `tol`,
/// empty clusters re-seeded to the point farthest from its centroid.
pub fn kmeans(
    points: &[Vec<f64>],
    k: usize,
    seed: u64,
    max_iters: usize,
    tol: f64,
) -> Result<(Vec<Vec<f64>>, Vec<usize>), GmnError> {
    // Lloyd's algorithm only finds a local optimum, and a single unlucky
    // seeding can merge two real clusters while splitting another. Run a
    // fixed number of independent seeded attempts and keep the lowest
    // within-cluster sum of squares; everything stays a pure function of
    // `seed`.
    const RESTARTS: u64 = 8;
    let mut best: Option<(f64, Vec<Vec<f64>>, Vec<usize>)> = None;
    for r in 0..RESTARTS {
        let (centroids, assignments) =
            kmeans_once(points, k, crate::rng::derive_seed(seed, r), max_iters, tol)?;
        let inertia: f64 = points
            .iter()
            .zip(&assignments)
            .map(|(p, &a)| {
                p.iter()
                    .zip(&centroids[a])
                    .map(|(&x, &c)| (x - c) * (x - c))
                    .sum::<f64>()
            })
            .sum();
        if best.as_ref().is_none_or(|(b, _, _)| inertia < *b) {
            best = Some((inertia, centroids, assignments));
        }
    }
    let (_, centroids, assignments) = best.expect("at least one restart ran");
    Ok((centroids, assignments))
}

fn kmeans_once(
    points: &[Vec<f64>],
    k: usize,
    seed: u64,
    max_iters: usize,
    tol: f64,
) -> Result<(Vec<Vec<f64>>, Vec<usize>), GmnError> {
    if k == 0 {
        return Err(GmnError::NoComponents);
    }
    if points.len() < k {
        return Err(GmnError::TooFewPoints {
            points: points.len(),
            k,
        });
    }
    let dim = points[0].len();
    let mut rng = rng_from(seed);
    let dist2 = |a: &[f64], b: &[f64]| -> f64 {
        a.iter().zip(b).map(|(&p, &q)| (p - q) * (p - q)).sum()
    };

    // k-means++: first centroid uniform, then proportional to squared
    // distance from the nearest chosen centroid.
    let mut centroids: Vec<Vec<f64>> = Vec::with_capacity(k);
    centroids.push(points[rng.random_range(0..points.len())].clone());
    let mut d2: Vec<f64> = points.iter().map(|p| dist2(p, &centroids[0])).collect();
    while centroids.len() < k {
        let total: f64 = d2.iter().sum();
        let idx = if total <= 0.0 {
            rng.random_range(0..points.len())
        } else {
            let mut target = rng.random::<f64>() * total;
            let mut chosen = points.len() - 1;
            for (i, &w) in d2.iter().enumerate() {
                target -= w;
                if target <= 0.0 {
                    chosen = i;
                    break;
                }
            }
            chosen
        };
        centroids.push(points[idx].clone());
        let last = centroids.len() - 1;
        for (i, p) in points.iter().enumerate() {
            d2[i] = d2[i].min(dist2(p, &centroids[last]));
        }
    }

    let mut assignments = vec![0usize; points.len()];
    for _ in 0..max_iters {
        // assignment: nearest centroid, ties to the lowest index
        for (i, p) in points.iter().enumerate() {
            let mut best = 0;
            let mut best_d = dist2(p, &centroids[0]);
            for (c, centroid) in centroids.iter().enumerate().skip(1) {
                let d = dist2(p, centroid);
                if d < best_d {
                    best = c;
                    best_d = d;
                }
            }
            assignments[i] = best;
        }
        // update
        let mut sums = vec![vec![0.0f64; dim]; k];
        let mut counts = vec![0usize; k];
        for (p, &a) in points.iter().zip(&assignments) {
            counts[a] += 1;
            for (s, &v) in sums[a].iter_mut().zip(p) {
                *s += v;
            }
        }
        let mut shift: f64 = 0.0;
        for c in 0..k {
            let new = if counts[c] == 0 {
                // re-seed to the point currently farthest from its centroid
                let far = points
                    .iter()
                    .enumerate()
                    .max_by(|(i, p), (j, q)| {
                        let di = dist2(p, &centroids[assignments[*i]]);
                        let dj = dist2(q, &centroids[assignments[*j]]);
                        di.partial_cmp(&dj).expect("finite distances")
                    })
                    .map(|(i, _)| i)
                    .expect("points are non-empty");
                points[far].clone()
            } else {
                sums[c].iter().map(|s| s / counts[c] as f64).collect()
            };
            shift = shift.max(dist2(&new, &centroids[c]).sqrt());
            centroids[c] = new;
        }
        if shift < tol {
            break;
        }
    }
    // final assignment so the returned pair is consistent
    for (i, p) in points.iter().enumerate() {
        let mut best = 0;
        let mut best_d = dist2(p, &centroids[0]);
        for (c, centroid) in centroids.iter().enumerate().skip(1) {
            let d = dist2(p, centroid);
            if d < best_d {
                best = c;
                best_d = d;
            }
        }
        assignments[i] = best;
    }
    Ok((centroids, assignments))
}

/// The fitted noise prior: `k` isotropic Gaussians in normalized-delta
/// space, each with weight exactly 1 (one parallel draw per component).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GaussianMixtureNoise {
    pub k: usize,
    pub dim: usize,
    pub means: Vec<Vec<f64>>,
    pub sigmas: Vec<f64>,
    pub weights: Vec<f64>,
}

impl GaussianMixtureNoise {
    /// Validating constructor; sigmas are floored at [`SIGMA_FLOOR`].
    pub fn new(means: Vec<Vec<f64>>, sigmas: Vec<f64>) -> Result<Self, GmnError> {
        if means.is_empty() || means.len() != sigmas.len() {
            return Err(GmnError::NoComponents);
        }
        let dim = means[0].len();
        for (i, m) in means.iter().enumerate() {
            if m.len() != dim {
                return Err(GmnError::DimMismatch {
                    index: i,
                    got: m.len(),
                    expected: dim,
                });
            }
            if m.iter().any(|v| !v.is_finite()) {
                return Err(GmnError::NonFiniteMean(i));
            }
        }
        for &s in &sigmas {
            if !(s.is_finite() && s > 0.0) {
                return Err(GmnError::BadSigma(s));
            }
        }
        let k = means.len();
        Ok(Self {
            k,
            dim,
            means,
            sigmas: sigmas.into_iter().map(|s| s.max(SIGMA_FLOOR)).collect(),
            weights: vec![1.0; k],
        })
    }

    /// The standard-Gaussian ablation prior: all components at the origin
    /// with unit scale, so draws are plain `N(0, I)` noise.
    pub fn standard(k: usize, dim: usize) -> Self {
        Self {
            k,
            dim,
            means: vec![vec![0.0; dim]; k],
            sigmas: vec![1.0; k],
            weights: vec![1.0; k],
        }
    }

    /// One draw from component `index`: `μ_k + σ_k·η` with `η ~ N(0, I)`.
    pub fn sample_component(&self, index: usize, rng: &mut Rng) -> Result<Vec<f64>, GmnError> {
        if index >= self.k {
            return Err(GmnError::IndexOutOfRange { index, k: self.k });
        }
        let sigma = self.sigmas[index];
        Ok(self.means[index]
            .iter()
            .map(|&m| m + sigma * standard_normal(rng))
            .collect())
    }

    /// One draw from *every* component, in component order.
    pub fn sample_all(&self, rng: &mut Rng) -> Vec<Vec<f64>> {
        (0..self.k)
            .map(|c| self.sample_component(c, rng).expect("index in range"))
            .collect()
    }

    /// Index of the component whose mean is nearest to `x` in flattened
    /// Euclidean distance; ties break toward the lowest index.
    pub fn nearest_component(&self, x: &[f64]) -> usize {
        debug_assert_eq!(x.len(), self.dim);
        let mut best = 0;
        let mut best_d = f64::INFINITY;
        for (c, m) in self.means.iter().enumerate() {
            let d: f64 = m.iter().zip(x).map(|(&p, &q)| (p - q) * (p - q)).sum();
            if d < best_d {
                best = c;
                best_d = d;
            }
        }
        best
    }
}

/// Collect every expert of every scenario as a delta sequence.
fn dataset_deltas(dataset: &[Scenario]) -> Vec<Vec<[f64; 2]>> {
    dataset
        .iter()
        .flat_map(|s| s.experts.iter().map(trajectory_deltas))
        .collect()
}

/// Fit only the normalization constants from a dataset — used when the
/// mixture itself is replaced (e.g. the standard-Gaussian ablation keeps the
/// data-driven normalization but drops the fitted components).
pub fn fit_dataset_normalization(dataset: &[Scenario]) -> Result<NormalizationConstants, GmnError> {
    fit_normalization(&dataset_deltas(dataset))
}

/// Fit normalization and the mixture from a dataset: normalize every expert
/// delta vector, cluster with seeded k-means, and anchor one isotropic
/// component per cluster (σ = RMS deviation over all member coordinates).
pub fn build_gmn(
    dataset: &[Scenario],
    k: usize,
    seed: u64,
) -> Result<(GaussianMixtureNoise, NormalizationConstants), GmnError> {
    let deltas = dataset_deltas(dataset);
    let consts = fit_normalization(&deltas)?;
    let points: Vec<Vec<f64>> = deltas.iter().map(|d| consts.normalize_flat(d)).collect();
    let (means, assignments) = kmeans(&points, k, seed, KMEANS_MAX_ITERS, KMEANS_TOL)?;

    let dim = means[0].len();
    let mut sq = vec![0.0f64; k];
    let mut counts = vec![0usize; k];
    for (p, &a) in points.iter().zip(&assignments) {
        counts[a] += 1;
        sq[a] += p
            .iter()
            .zip(&means[a])
            .map(|(&x, &m)| (x - m) * (x - m))
            .sum::<f64>();
    }
    let sigmas: Vec<f64> = (0..k)
        .map(|c| {
            if counts[c] == 0 {
                SIGMA_FLOOR
            } else {
                (sq[c] / (counts[c] * dim) as f64).sqrt().max(SIGMA_FLOOR)
            }
        })
        .collect();
    let gmn = GaussianMixtureNoise::new(means, sigmas)?;
    Ok((gmn, consts))
}

/// Hand-designed mixture anchors: constant-speed straight or arcing motion.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum ManualTemplate {
    Straight { speed: f64 },
    /// Heading advances by `yaw_rate·dt` every step, starting along +x.
    Arc { speed: f64, yaw_rate: f64 },
}

impl ManualTemplate {
    fn deltas(&self, t_f: usize, dt: f64) -> Vec<[f64; 2]> {
        let (speed, yaw_rate) = match *self {
            ManualTemplate::Straight { speed } => (speed, 0.0),
            ManualTemplate::Arc { speed, yaw_rate } => (speed, yaw_rate),
        };
        (0..t_f)
            .map(|i| {
                let heading = yaw_rate * dt * i as f64;
                [speed * dt * heading.cos(), speed * dt * heading.sin()]
            })
            .collect()
    }
}

/// Build a mixture from hand-written motion templates with one unified σ.
/// Means are the templates' normalized flattened deltas, so the mixture
/// lives in the same space as a fitted one.
pub fn manual_gmn(
    templates: &[ManualTemplate],
    sigma: f64,
    t_f: usize,
    dt: f64,
    consts: &NormalizationConstants,
) -> Result<GaussianMixtureNoise, GmnError> {
    if templates.is_empty() {
        return Err(GmnError::NoComponents);
    }
    if !(sigma.is_finite() && sigma > 0.0) {
        return Err(GmnError::BadSigma(sigma));
    }
    let means: Vec<Vec<f64>> = templates
        .iter()
        .map(|t| consts.normalize_flat(&t.deltas(t_f, dt)))
        .collect();
    let sigmas = vec![sigma; templates.len()];
    GaussianMixtureNoise::new(means, sigmas)
}

/// Standalone export format for a fitted prior (`fit-gmn` writes this; a
/// later `train --gmn` run can load it).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GmnFile {
    pub gmn: GaussianMixtureNoise,
    pub normalization: NormalizationConstants,
}

/// Write atomically (sibling temp file + rename) so a crash never leaves a
/// half-written prior at the target path.
pub fn save_gmn(
    path: &std::path::Path,
    gmn: &GaussianMixtureNoise,
    consts: &NormalizationConstants,
) -> std::io::Result<()> {
    let file = GmnFile {
        gmn: gmn.clone(),
        normalization: consts.clone(),
    };
    let json = serde_json::to_string_pretty(&file).expect("gmn serializes");
    let mut name = path
        .file_name()
        .map(|n| n.to_os_string())
        .unwrap_or_else(|| "gmn".into());
    name.push(".tmp");
    let tmp = path.with_file_name(name);
    std::fs::write(&tmp, json)?;
    std::fs::rename(&tmp, path)
}

pub fn load_gmn(path: &std::path::Path) -> std::io::Result<GmnFile> {
    let text = std::fs::read_to_string(path)?;
    serde_json::from_str(&text).map_err(std::io::Error::other)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::derive_seed;
    use crate::synthworld::{generate_dataset, FamilyMix, GenConfig};

    fn straight_traj(step: f64, n: usize) -> Trajectory {
        Trajectory::new((1..=n).map(|i| [step * i as f64, 0.0]).collect(), 0.5)
    }

    #[test]
    fn deltas_prepend_origin_and_cumsum_inverts() {
        let t = Trajectory::new(vec![[1.0, 0.0], [2.0, 0.0], [3.0, 0.0]], 0.5);
        let d = trajectory_deltas(&t);
        assert_eq!(d, vec![[1.0, 0.0]; 3]);
        assert_eq!(deltas_to_waypoints(&d), t.waypoints);
        let stationary = Trajectory::new(vec![[0.0, 0.0]; 4], 0.5);
        assert!(trajectory_deltas(&stationary)
            .iter()
            .all(|d| *d == [0.0, 0.0]));
    }

    #[test]
    fn normalization_handles_degenerate_and_symmetric_data() {
        // all deltas identical → scale floored, normalized values 0
        let same = vec![vec![[2.0, -1.0]; 8]; 3];
        let c = fit_normalization(&same).unwrap();
        assert_eq!(c.scale, [NORM_EPS, NORM_EPS]);
        for v in c.normalize_flat(&same[0]) {
            assert_eq!(v, 0.0);
        }
        // symmetric {−1, 0, +1} on x → mean 0, scale 1
        let sym = vec![vec![[-1.0, 0.0], [0.0, 0.0], [1.0, 0.0]]];
        let c = fit_normalization(&sym).unwrap();
        assert_eq!(c.delta_mean[0], 0.0);
        assert_eq!(c.scale[0], 1.0);
        assert!(fit_normalization(&[]).is_err());
    }

    #[test]
    fn dominating_side_normalizes_to_exactly_one() {
        let cfg = GenConfig {
            n_scenarios: 50,
            ..GenConfig::default()
        };
        let data = generate_dataset(&cfg, 7).unwrap().scenarios;
        let deltas = dataset_deltas(&data);
        let c = fit_normalization(&deltas).unwrap();
        for axis in 0..2 {
            let extreme = deltas
                .iter()
                .flatten()
                .map(|d| (d[axis] - c.delta_mean[axis]) / c.scale[axis])
                .fold(0.0f64, |m, v| m.max(v.abs()));
            assert!(
                (extreme - 1.0).abs() < 1e-12,
                "axis {axis}: dominating side reaches {extreme}"
            );
        }
    }

    #[test]
    fn normalize_denormalize_round_trip() {
        let c = NormalizationConstants {
            delta_mean: [1.5, -0.25],
            scale: [3.0, 0.5],
        };
        let deltas = vec![[4.2, -1.1], [0.0, 0.0], [-2.5, 3.3]];
        let back = c.denormalize_flat(&c.normalize_flat(&deltas));
        for (a, b) in deltas.iter().zip(&back) {
            assert!((a[0] - b[0]).abs() < 1e-12 && (a[1] - b[1]).abs() < 1e-12);
        }
        assert_eq!(c.normalize_delta(c.delta_mean), [0.0, 0.0]);
    }

    #[test]
    fn kmeans_recovers_separated_blobs() {
        let mut rng = rng_from(3);
        let mut points = Vec::new();
        let blob_a = [5.0, 5.0];
        let blob_b = [-5.0, -5.0];
        for _ in 0..60 {
            points.push(vec![
                blob_a[0] + 0.01 * standard_normal(&mut rng),
                blob_a[1] + 0.01 * standard_normal(&mut rng),
            ]);
            points.push(vec![
                blob_b[0] + 0.01 * standard_normal(&mut rng),
                blob_b[1] + 0.01 * standard_normal(&mut rng),
            ]);
        }
        let (centroids, assignments) = kmeans(&points, 2, 0, 100, 1e-12).unwrap();
        // exact oracle: mean of each blob's members
        for (c, centroid) in centroids.iter().enumerate() {
            let members: Vec<&Vec<f64>> = points
                .iter()
                .zip(&assignments)
                .filter(|(_, &a)| a == c)
                .map(|(p, _)| p)
                .collect();
            assert!(!members.is_empty());
            for axis in 0..2 {
                let mean: f64 =
                    members.iter().map(|p| p[axis]).sum::<f64>() / members.len() as f64;
                assert!((centroid[axis] - mean).abs() < 1e-6);
            }
            let target = if centroid[0] > 0.0 { blob_a } else { blob_b };
            assert!((centroid[0] - target[0]).abs() < 0.1);
        }
    }

    #[test]
    fn kmeans_k1_is_exact_mean_and_seeding_is_deterministic() {
        let points: Vec<Vec<f64>> = (0..10).map(|i| vec![i as f64, 2.0 * i as f64]).collect();
        let (c, _) = kmeans(&points, 1, 9, 50, 1e-12).unwrap();
        assert!((c[0][0] - 4.5).abs() < 1e-12 && (c[0][1] - 9.0).abs() < 1e-12);
        let run1 = kmeans(&points, 3, 17, 50, 1e-12).unwrap();
        let run2 = kmeans(&points, 3, 17, 50, 1e-12).unwrap();
        assert_eq!(run1, run2);
        assert!(matches!(
            kmeans(&points[..2], 3, 0, 50, 1e-12),
            Err(GmnError::TooFewPoints { points: 2, k: 3 })
        ));
    }

    #[test]
    fn lloyd_objective_is_non_increasing() {
        let mut rng = rng_from(21);
        let points: Vec<Vec<f64>> = (0..200)
            .map(|_| vec![standard_normal(&mut rng) * 3.0, standard_normal(&mut rng)])
            .collect();
        let objective = |centroids: &[Vec<f64>]| -> f64 {
            points
                .iter()
                .map(|p| {
                    centroids
                        .iter()
                        .map(|c| {
                            p.iter().zip(c).map(|(&a, &b)| (a - b) * (a - b)).sum::<f64>()
                        })
                        .fold(f64::INFINITY, f64::min)
                })
                .sum()
        };
        // run Lloyd with increasing iteration caps; objective must not rise
        let mut prev = f64::INFINITY;
        for iters in 1..12 {
            let (c, _) = kmeans(&points, 4, 33, iters, 0.0).unwrap();
            let obj = objective(&c);
            assert!(
                obj <= prev + 1e-9,
                "objective rose from {prev} to {obj} at cap {iters}"
            );
            prev = obj;
        }
    }

    fn fork_dataset(n: usize, seed: u64) -> Vec<Scenario> {
        let cfg = GenConfig {
            n_scenarios: n,
            family_mix: FamilyMix::only_fork(),
            ..GenConfig::default()
        };
        generate_dataset(&cfg, seed).unwrap().scenarios
    }

    #[test]
    fn build_gmn_statistics_match_a_two_pass_oracle() {
        let data = fork_dataset(40, 11);
        let (gmn, consts) = build_gmn(&data, 4, 0).unwrap();
        assert_eq!(gmn.k, 4);
        assert_eq!(gmn.dim, 16);
        assert_eq!(gmn.weights, vec![1.0; 4]);
        // independent second pass: re-derive assignments from means, then
        // recompute σ as RMS deviation
        let points: Vec<Vec<f64>> = data
            .iter()
            .flat_map(|s| s.experts.iter().map(|e| normalized_expert(e, &consts)))
            .collect();
        for c in 0..gmn.k {
            let members: Vec<&Vec<f64>> = points
                .iter()
                .filter(|p| gmn.nearest_component(p) == c)
                .collect();
            if members.is_empty() {
                assert_eq!(gmn.sigmas[c], SIGMA_FLOOR);
                continue;
            }
            let sq: f64 = members
                .iter()
                .map(|p| {
                    p.iter()
                        .zip(&gmn.means[c])
                        .map(|(&x, &m)| (x - m) * (x - m))
                        .sum::<f64>()
                })
                .sum();
            let sigma = (sq / (members.len() * gmn.dim) as f64).sqrt().max(SIGMA_FLOOR);
            assert!(
                (sigma - gmn.sigmas[c]).abs() < 1e-10,
                "component {c}: {} vs oracle {}",
                gmn.sigmas[c],
                sigma
            );
        }
        // fitted means stay in normalized range
        for m in &gmn.means {
            for &v in m {
                assert!(v.abs() <= 1.0 + 3.0 * gmn.sigmas.iter().cloned().fold(0.0, f64::max));
            }
        }
    }

    #[test]
    fn single_point_clusters_get_the_sigma_floor() {
        // two identical experts and one far outlier, K=2 → outlier cluster
        // has a single point and zero spread
        let near = straight_traj(1.0, 8);
        let far = straight_traj(30.0, 8);
        let scenarios: Vec<Scenario> = [near.clone(), near, far]
            .into_iter()
            .enumerate()
            .map(|(i, e)| Scenario {
                scenario_id: format!("s{i}"),
                scene: crate::synthworld::SceneContext {
                    ego_speed: 2.0,
                    ego_accel: 0.0,
                    command: crate::synthworld::Command::Straight,
                    obstacles: vec![],
                    corridor: vec![[-50.0, -50.0], [300.0, -50.0], [300.0, 50.0], [-50.0, 50.0]],
                },
                experts: vec![e],
            })
            .collect();
        let (gmn, _) = build_gmn(&scenarios, 2, 1).unwrap();
        assert!(gmn.sigmas.iter().any(|&s| s == SIGMA_FLOOR));
    }

    #[test]
    fn component_sampling_matches_monte_carlo_moments() {
        let gmn = GaussianMixtureNoise::new(
            vec![vec![0.5, -1.0, 2.0], vec![-3.0, 0.0, 1.0]],
            vec![0.7, 0.2],
        )
        .unwrap();
        let mut rng = rng_from(99);
        let n = 100_000usize;
        let mut mean = vec![0.0f64; 3];
        for _ in 0..n {
            let x = gmn.sample_component(1, &mut rng).unwrap();
            for (m, v) in mean.iter_mut().zip(&x) {
                *m += v;
            }
        }
        let tol = 3.0 * 0.2 / (n as f64).sqrt();
        for (axis, m) in mean.iter().enumerate() {
            let m = m / n as f64;
            assert!(
                (m - gmn.means[1][axis]).abs() < tol,
                "axis {axis}: {m} vs {} (tol {tol})",
                gmn.means[1][axis]
            );
        }
        assert_eq!(gmn.sample_all(&mut rng).len(), 2);
        assert!(matches!(
            gmn.sample_component(2, &mut rng),
            Err(GmnError::IndexOutOfRange { index: 2, k: 2 })
        ));
    }

    #[test]
    fn nearest_component_agrees_with_brute_force() {
        let data = fork_dataset(30, 5);
        let (gmn, consts) = build_gmn(&data, 6, 2).unwrap();
        // exact mean → that index
        for (c, m) in gmn.means.iter().enumerate() {
            assert_eq!(gmn.nearest_component(m), c);
        }
        let mut rng = rng_from(8);
        for _ in 0..100 {
            let x: Vec<f64> = (0..gmn.dim).map(|_| standard_normal(&mut rng)).collect();
            let brute = gmn
                .means
                .iter()
                .enumerate()
                .map(|(c, m)| {
                    let d: f64 = m.iter().zip(&x).map(|(&p, &q)| (p - q) * (p - q)).sum();
                    (c, d)
                })
                .min_by(|a, b| a.1.partial_cmp(&b.1).unwrap().then(a.0.cmp(&b.0)))
                .unwrap()
                .0;
            assert_eq!(gmn.nearest_component(&x), brute);
        }
        // round-trip: experts land on a component whose mean is closer than
        // any other (sanity that fitting and lookup share the space)
        let e = normalized_expert(&data[0].experts[0], &consts);
        let _ = gmn.nearest_component(&e);
    }

    #[test]
    fn manual_straight_template_normalizes_the_constant_delta() {
        let consts = NormalizationConstants {
            delta_mean: [1.0, 0.0],
            scale: [2.0, 1.0],
        };
        let gmn = manual_gmn(
            &[ManualTemplate::Straight { speed: 6.0 }],
            0.5,
            8,
            0.5,
            &consts,
        )
        .unwrap();
        // speed 6, dt 0.5 → delta (3, 0) → normalized ((3−1)/2, 0) = (1, 0)
        for pair in gmn.means[0].chunks_exact(2) {
            assert!((pair[0] - 1.0).abs() < 1e-12 && pair[1].abs() < 1e-12);
        }
        assert_eq!(gmn.sigmas, vec![0.5]);
        assert!(matches!(
            manual_gmn(
                &[ManualTemplate::Straight { speed: 1.0 }],
                -0.1,
                8,
                0.5,
                &consts
            ),
            Err(GmnError::BadSigma(_))
        ));
    }

    #[test]
    fn arc_template_turns_and_preserves_speed() {
        let consts = NormalizationConstants::identity();
        let gmn = manual_gmn(
            &[ManualTemplate::Arc {
                speed: 4.0,
                yaw_rate: 0.3,
            }],
            0.2,
            8,
            0.5,
            &consts,
        )
        .unwrap();
        let deltas: Vec<[f64; 2]> = gmn.means[0]
            .chunks_exact(2)
            .map(|c| [c[0], c[1]])
            .collect();
        for d in &deltas {
            assert!((d[0].hypot(d[1]) - 2.0).abs() < 1e-12, "speed·dt preserved");
        }
        assert!(deltas.last().unwrap()[1] > 0.1, "arc bends left");
    }

    #[test]
    fn standard_prior_is_zero_mean_unit_sigma() {
        let gmn = GaussianMixtureNoise::standard(8, 16);
        assert_eq!(gmn.k, 8);
        assert!(gmn.means.iter().all(|m| m.iter().all(|&v| v == 0.0)));
        assert!(gmn.sigmas.iter().all(|&s| s == 1.0));
    }

    #[test]
    fn gmn_file_round_trips() {
        let data = fork_dataset(10, 3);
        let (gmn, consts) = build_gmn(&data, 3, 0).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("prior.json");
        save_gmn(&path, &gmn, &consts).unwrap();
        let loaded = load_gmn(&path).unwrap();
        assert_eq!(loaded.gmn, gmn);
        assert_eq!(loaded.normalization, consts);
    }

    #[test]
    fn per_scenario_seed_streams_are_independent() {
        let gmn = GaussianMixtureNoise::standard(2, 4);
        let a = gmn.sample_all(&mut rng_from(derive_seed(7, 0)));
        let b = gmn.sample_all(&mut rng_from(derive_seed(7, 1)));
        assert_ne!(a, b);
    }
}
