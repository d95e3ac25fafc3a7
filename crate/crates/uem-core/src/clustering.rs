//! Euclidean K-Means (Lloyd iterations from k-means++ seeding) and
//! Elbow-based cluster-count estimation.
//!
//! Everything is deterministic given (points, seed): restarts use derived
//! sub-streams, ties break toward the lowest index, and the best restart is
//! chosen by (wcss, restart index).

use rand::Rng;

use crate::diffkit::{euclidean, Tensor};
use crate::error::{Error, Result};
use crate::rng::substream;

pub const DEFAULT_RESTARTS: usize = 8;
const MAX_LLOYD_ITERS: usize = 100;
const CENTER_SHIFT_TOL: f64 = 1e-6;

#[derive(Clone, Debug)]
pub struct Clustering {
    /// Cluster centers, (k, d).
    pub centers: Tensor,
    /// Nearest-center index per point (ties toward the lowest center index).
    pub assignments: Vec<usize>,
    /// Within-cluster sum of squared Euclidean distances.
    pub wcss: f64,
}

/// Best-of-restarts Lloyd clustering.
pub fn kmeans(points: &Tensor, k: usize, seed: u64, restarts: usize) -> Result<Clustering> {
    if !points.is_matrix() {
        return Err(Error::shape_contract("kmeans", "a 2-D point matrix", points.shape()));
    }
    let n = points.rows();
    if k == 0 || k > n {
        return Err(Error::InvalidK { k, min: 1, max: n });
    }
    let restarts = restarts.max(1);
    let mut best: Option<Clustering> = None;
    for r in 0..restarts {
        let mut rng = substream(seed, "kmeans-restart", &[r as u64]);
        let run = lloyd(points, k, &mut rng);
        let better = match &best {
            None => true,
            Some(b) => run.wcss < b.wcss,
        };
        if better {
            best = Some(run);
        }
    }
    Ok(best.unwrap())
}

fn lloyd(points: &Tensor, k: usize, rng: &mut rand_chacha::ChaCha8Rng) -> Clustering {
    let (n, d) = (points.rows(), points.cols());
    let mut centers = seed_plus_plus(points, k, rng);
    let mut assignments = vec![0usize; n];

    for _ in 0..MAX_LLOYD_ITERS {
        assign(points, &centers, &mut assignments);

        // Mean update with empty-cluster reseeding.
        let mut sums = vec![0.0; k * d];
        let mut counts = vec![0usize; k];
        for i in 0..n {
            let c = assignments[i];
            counts[c] += 1;
            for (s, &v) in sums[c * d..(c + 1) * d].iter_mut().zip(points.row(i)) {
                *s += v;
            }
        }
        let mut new_centers = centers.clone();
        let empties: Vec<usize> = (0..k).filter(|&c| counts[c] == 0).collect();
        for c in 0..k {
            if counts[c] > 0 {
                for j in 0..d {
                    new_centers[c * d + j] = sums[c * d + j] / counts[c] as f64;
                }
            }
        }
        // An empty cluster reseeds at the point farthest from its assigned
        // center; each reseed consumes its point for this round.
        let mut used: Vec<usize> = Vec::new();
        for &c in &empties {
            let mut far_idx = 0usize;
            let mut far_dist = -1.0;
            for i in 0..n {
                if used.contains(&i) {
                    continue;
                }
                let cur = &new_centers[assignments[i] * d..(assignments[i] + 1) * d];
                let dist = euclidean(points.row(i), cur);
                if dist > far_dist {
                    far_dist = dist;
                    far_idx = i;
                }
            }
            new_centers[c * d..(c + 1) * d].copy_from_slice(points.row(far_idx));
            used.push(far_idx);
        }

        let mut max_shift = 0.0f64;
        for c in 0..k {
            let shift = euclidean(&centers[c * d..(c + 1) * d], &new_centers[c * d..(c + 1) * d]);
            if shift > max_shift {
                max_shift = shift;
            }
        }
        centers = new_centers;
        if max_shift < CENTER_SHIFT_TOL {
            break;
        }
    }

    // Final pass so assignments point at the final centers.
    assign(points, &centers, &mut assignments);
    let mut wcss = 0.0;
    for i in 0..n {
        let c = assignments[i];
        let dist = euclidean(points.row(i), &centers[c * d..(c + 1) * d]);
        wcss += dist * dist;
    }
    Clustering {
        centers: Tensor::matrix(k, d, centers).expect("centers are finite"),
        assignments,
        wcss,
    }
}

fn assign(points: &Tensor, centers: &[f64], assignments: &mut [usize]) {
    let (n, d) = (points.rows(), points.cols());
    let k = centers.len() / d;
    for i in 0..n {
        let p = points.row(i);
        let mut best_c = 0usize;
        let mut best_d = f64::INFINITY;
        for c in 0..k {
            let dist = euclidean(p, &centers[c * d..(c + 1) * d]);
            if dist < best_d {
                best_d = dist;
                best_c = c;
            }
        }
        assignments[i] = best_c;
    }
}

/// k-means++ seeding: first center uniform, then D^2-weighted draws. All
/// weights zero (duplicate cloud) falls back to the lowest unused index.
fn seed_plus_plus(points: &Tensor, k: usize, rng: &mut rand_chacha::ChaCha8Rng) -> Vec<f64> {
    let (n, d) = (points.rows(), points.cols());
    let mut centers = Vec::with_capacity(k * d);
    let first = rng.gen_range(0..n);
    centers.extend_from_slice(points.row(first));
    let mut chosen = vec![first];

    let mut dist2 = vec![0.0f64; n];
    while chosen.len() < k {
        let mut total = 0.0;
        for i in 0..n {
            let mut best = f64::INFINITY;
            let c_count = centers.len() / d;
            for c in 0..c_count {
                let dd = euclidean(points.row(i), &centers[c * d..(c + 1) * d]);
                let dd2 = dd * dd;
                if dd2 < best {
                    best = dd2;
                }
            }
            dist2[i] = best;
            total += best;
        }
        let next = if total > 0.0 {
            let mut target = rng.gen_range(0.0..total);
            let mut pick = n - 1;
            for i in 0..n {
                if dist2[i] > 0.0 {
                    if target < dist2[i] {
                        pick = i;
                        break;
                    }
                    target -= dist2[i];
                }
            }
            pick
        } else {
            (0..n).find(|i| !chosen.contains(i)).unwrap_or(0)
        };
        centers.extend_from_slice(points.row(next));
        chosen.push(next);
    }
    centers
}

/// Estimate the cluster count by the Elbow rule: compute wcss(k) over the
/// range and return the k whose point lies farthest below the line joining
/// the range endpoints (ties toward the smaller k).
pub fn estimate_k_elbow(points: &Tensor, k_min: usize, k_max: usize, seed: u64) -> Result<usize> {
    estimate_k_elbow_with(points, k_min, k_max, seed, DEFAULT_RESTARTS)
}

pub fn estimate_k_elbow_with(
    points: &Tensor,
    k_min: usize,
    k_max: usize,
    seed: u64,
    restarts: usize,
) -> Result<usize> {
    let n = points.rows();
    if k_min < 2 || k_min >= k_max || k_max > n {
        return Err(Error::InvalidK {
            k: k_max,
            min: k_min,
            max: n,
        });
    }
    let ks: Vec<usize> = (k_min..=k_max).collect();
    let mut wcss = Vec::with_capacity(ks.len());
    for &k in &ks {
        let c = kmeans(points, k, seed.wrapping_add(k as u64), restarts)?;
        wcss.push(c.wcss);
    }

    // Signed distance below the chord; the perpendicular distance to the
    // line shares its argmax because the line is common to all points.
    let (k0, w0) = (ks[0] as f64, wcss[0]);
    let (k1, w1) = (*ks.last().unwrap() as f64, *wcss.last().unwrap());
    let mut best_k = ks[0];
    let mut best_gap = f64::NEG_INFINITY;
    for (i, &k) in ks.iter().enumerate() {
        let kf = k as f64;
        let line = if k1 > k0 {
            w0 + (w1 - w0) * (kf - k0) / (k1 - k0)
        } else {
            w0
        };
        let gap = line - wcss[i];
        if gap > best_gap {
            best_gap = gap;
            best_k = k;
        }
    }
    Ok(best_k)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn points_1d(vals: &[f64]) -> Tensor {
        Tensor::matrix(vals.len(), 1, vals.to_vec()).unwrap()
    }

    /// Exhaustive optimum over all assignments for tiny point sets.
    fn exhaustive_wcss(points: &Tensor, k: usize) -> f64 {
        let (n, d) = (points.rows(), points.cols());
        let mut best = f64::INFINITY;
        let total = k.pow(n as u32);
        'outer: for code in 0..total {
            let mut assign = vec![0usize; n];
            let mut c = code;
            for a in assign.iter_mut() {
                *a = c % k;
                c /= k;
            }
            let mut counts = vec![0usize; k];
            for &a in &assign {
                counts[a] += 1;
            }
            for &cc in &counts {
                if cc == 0 {
                    continue 'outer;
                }
            }
            let mut centers = vec![0.0; k * d];
            for i in 0..n {
                for j in 0..d {
                    centers[assign[i] * d + j] += points.row(i)[j];
                }
            }
            for c in 0..k {
                for j in 0..d {
                    centers[c * d + j] /= counts[c] as f64;
                }
            }
            let mut wcss = 0.0;
            for i in 0..n {
                let dist = euclidean(points.row(i), &centers[assign[i] * d..(assign[i] + 1) * d]);
                wcss += dist * dist;
            }
            if wcss < best {
                best = wcss;
            }
        }
        best
    }

    #[test]
    fn four_point_fixture_matches_exhaustive_optimum() {
        let pts = points_1d(&[0.0, 0.1, 10.0, 10.1]);
        let c = kmeans(&pts, 2, 5, 8).unwrap();
        let oracle = exhaustive_wcss(&pts, 2);
        assert!((c.wcss - oracle).abs() <= 1e-9);
        assert!((c.wcss - 0.01).abs() <= 1e-9);
        let mut centers: Vec<f64> = c.centers.data().to_vec();
        centers.sort_by(f64::total_cmp);
        assert!((centers[0] - 0.05).abs() <= 1e-9);
        assert!((centers[1] - 10.05).abs() <= 1e-9);
    }

    #[test]
    fn k_equals_n_gives_zero_wcss() {
        let pts = points_1d(&[1.0, 2.0, 5.0]);
        let c = kmeans(&pts, 3, 1, 4).unwrap();
        assert_eq!(c.wcss, 0.0);
        let mut centers: Vec<f64> = c.centers.data().to_vec();
        centers.sort_by(f64::total_cmp);
        assert_eq!(centers, vec![1.0, 2.0, 5.0]);
    }

    #[test]
    fn single_cluster_center_is_the_mean() {
        let pts = Tensor::matrix(4, 2, vec![1.0, 1.0, 1.0, 1.0, 3.0, 5.0, 3.0, 5.0]).unwrap();
        let c = kmeans(&pts, 1, 2, 3).unwrap();
        assert_eq!(c.centers.data(), &[2.0, 3.0]);
    }

    #[test]
    fn k_larger_than_n_is_an_error() {
        let pts = points_1d(&[1.0, 2.0]);
        assert!(kmeans(&pts, 3, 1, 1).is_err());
    }

    fn blobs(centers: &[f64], per: usize, sigma: f64, seed: u64) -> Tensor {
        let mut rng = crate::rng::stream(seed, "blobs");
        let mut rows = Vec::new();
        for &c in centers {
            for _ in 0..per {
                // Box-Muller from two uniforms.
                let u1: f64 = rng.gen_range(1e-12..1.0);
                let u2: f64 = rng.gen_range(0.0..1.0);
                let z = (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos();
                rows.push(vec![c + sigma * z]);
            }
        }
        Tensor::from_rows(&rows).unwrap()
    }

    #[test]
    fn elbow_recovers_three_blobs() {
        let pts = blobs(&[0.0, 10.0, 20.0], 30, 0.1, 40);
        let k = estimate_k_elbow(&pts, 2, 8, 11).unwrap();
        assert_eq!(k, 3);
    }

    #[test]
    fn elbow_recovers_five_blobs_on_most_seeds() {
        let mut hits = 0;
        for s in 0..20u64 {
            let pts = blobs(&[0.0, 12.0, 24.0, 36.0, 48.0], 25, 0.2, 100 + s);
            let k = estimate_k_elbow(&pts, 2, 9, s).unwrap();
            if k == 5 {
                hits += 1;
            }
        }
        assert!(hits >= 18, "recovered 5 blobs in {hits}/20 seeds");
    }

    #[test]
    fn elbow_on_identical_points_returns_k_min() {
        let pts = points_1d(&[3.0; 12]);
        let k = estimate_k_elbow(&pts, 2, 6, 9).unwrap();
        assert_eq!(k, 2);
    }

    #[test]
    fn elbow_range_validation() {
        let pts = points_1d(&[0.0, 1.0, 2.0]);
        assert!(estimate_k_elbow(&pts, 1, 3, 0).is_err());
        assert!(estimate_k_elbow(&pts, 2, 2, 0).is_err());
        assert!(estimate_k_elbow(&pts, 2, 4, 0).is_err());
    }

    #[test]
    fn wcss_is_nonincreasing_in_k() {
        let pts = blobs(&[0.0, 6.0, 14.0, 25.0], 20, 0.8, 77);
        let mut prev = f64::INFINITY;
        for k in 2..=8 {
            let c = kmeans(&pts, k, 55, 8).unwrap();
            assert!(
                c.wcss <= prev + 1e-9,
                "wcss({}) = {} > wcss({}) = {}",
                k,
                c.wcss,
                k - 1,
                prev
            );
            prev = c.wcss;
        }
    }

    #[test]
    fn result_is_invariant_under_row_permutation() {
        let pts = blobs(&[0.0, 15.0, 30.0], 15, 0.3, 13);
        let c1 = kmeans(&pts, 3, 21, 8).unwrap();

        let n = pts.rows();
        let perm: Vec<usize> = (0..n).rev().collect();
        let rows: Vec<Vec<f64>> = perm.iter().map(|&i| pts.row(i).to_vec()).collect();
        let shuffled = Tensor::from_rows(&rows).unwrap();
        let c2 = kmeans(&shuffled, 3, 21, 8).unwrap();

        let mut a: Vec<f64> = c1.centers.data().to_vec();
        let mut b: Vec<f64> = c2.centers.data().to_vec();
        a.sort_by(f64::total_cmp);
        b.sort_by(f64::total_cmp);
        for (x, y) in a.iter().zip(b.iter()) {
            assert!((x - y).abs() <= 1e-6);
        }
    }

    #[test]
    fn assignments_point_to_nearest_center() {
        let pts = blobs(&[0.0, 9.0], 20, 0.5, 3);
        let c = kmeans(&pts, 2, 7, 4).unwrap();
        let d = pts.cols();
        for i in 0..pts.rows() {
            let mut best = 0;
            let mut best_d = f64::INFINITY;
            for cc in 0..2 {
                let dist = euclidean(pts.row(i), &c.centers.data()[cc * d..(cc + 1) * d]);
                if dist < best_d {
                    best_d = dist;
                    best = cc;
                }
            }
            assert_eq!(c.assignments[i], best);
        }
        // wcss agrees with a recomputation.
        let mut w = 0.0;
        for i in 0..pts.rows() {
            let cc = c.assignments[i];
            let dist = euclidean(pts.row(i), &c.centers.data()[cc * d..(cc + 1) * d]);
            w += dist * dist;
        }
        assert!((w - c.wcss).abs() <= 1e-9);
    }
}
