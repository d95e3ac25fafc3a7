//! The retrieval contract, open-set (null) detection, and evaluation
//! metrics: mAP over the full ranking and open-set detection accuracy.

use serde::Serialize;

use crate::diffkit::{cosine, euclidean, Tensor};
use crate::error::{Error, Result};
use crate::protostruct::UnifiedPrototypeStructure;
use crate::stage2::MatchScore;

pub const DEFAULT_ETA_PERCENTILE: f64 = 95.0;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DistanceMetric {
    Euclidean,
    Cosine,
}

impl DistanceMetric {
    pub fn distance(&self, a: &[f64], b: &[f64]) -> Result<f64> {
        Ok(match self {
            DistanceMetric::Euclidean => euclidean(a, b),
            DistanceMetric::Cosine => 1.0 - cosine(a, b)?,
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum Verdict {
    /// Private-label query: no answer.
    Null,
    /// Ranked retrieval ids with ascending distances.
    Ranked(Vec<(usize, f64)>),
}

#[derive(Clone, Debug)]
pub struct RetrievalOutcome {
    pub query_id: usize,
    pub verdict: Verdict,
    /// Detector score of the query (minimum over unified prototypes).
    pub detector_score: Option<f64>,
}

/// Open-set detector: a query is private when its best score against the
/// retrieval domain's unified prototypes exceeds eta.
#[derive(Clone, Debug)]
pub struct PrivateDetector {
    pub prototypes: Vec<Vec<f64>>,
    pub eta: f64,
    pub score_rule: MatchScore,
}

impl PrivateDetector {
    /// Minimum score over prototypes.
    pub fn score(&self, query: &[f64]) -> Result<f64> {
        if self.prototypes.is_empty() {
            return Err(Error::Empty {
                what: "detector prototype set".to_string(),
            });
        }
        let mut best = f64::INFINITY;
        for p in &self.prototypes {
            let s = self.score_rule.score(query, p)?;
            if s < best {
                best = s;
            }
        }
        Ok(best)
    }

    pub fn is_private(&self, query: &[f64]) -> Result<bool> {
        Ok(self.score(query)? > self.eta)
    }

    /// Calibrate eta as the q-th percentile (nearest-rank) of the retrieval
    /// domain's own instance-to-nearest-prototype scores.
    pub fn calibrate(
        structure: &UnifiedPrototypeStructure,
        retrieval_features: &Tensor,
        percentile: f64,
        score_rule: MatchScore,
    ) -> Result<Self> {
        if structure.is_empty() {
            return Err(Error::Empty {
                what: "unified retrieval structure".to_string(),
            });
        }
        let mut det = Self {
            prototypes: structure.prototypes.clone(),
            eta: 0.0,
            score_rule,
        };
        let mut scores = Vec::with_capacity(retrieval_features.rows());
        for i in 0..retrieval_features.rows() {
            scores.push(det.score(retrieval_features.row(i))?);
        }
        det.eta = percentile_nearest_rank(&mut scores, percentile);
        Ok(det)
    }
}

/// Nearest-rank percentile: sorted ascending, rank = ceil(q/100 * n).
pub fn percentile_nearest_rank(values: &mut [f64], q: f64) -> f64 {
    assert!(!values.is_empty());
    values.sort_by(f64::total_cmp);
    let n = values.len();
    let rank = ((q / 100.0) * n as f64).ceil().max(1.0).min(n as f64) as usize;
    values[rank - 1]
}

/// Rank the retrieval domain for one query, or return null when the
/// detector flags the query as private.
pub fn retrieve(
    query_id: usize,
    query_feature: &[f64],
    retrieval_features: &Tensor,
    k: usize,
    metric: DistanceMetric,
    detector: Option<&PrivateDetector>,
) -> Result<RetrievalOutcome> {
    if retrieval_features.rows() == 0 {
        return Err(Error::Empty {
            what: "retrieval domain".to_string(),
        });
    }
    let detector_score = match detector {
        Some(det) => Some(det.score(query_feature)?),
        None => None,
    };
    if let (Some(det), Some(score)) = (detector, detector_score) {
        if score > det.eta {
            return Ok(RetrievalOutcome {
                query_id,
                verdict: Verdict::Null,
                detector_score,
            });
        }
    }
    let n = retrieval_features.rows();
    let mut ranked: Vec<(usize, f64)> = Vec::with_capacity(n);
    for j in 0..n {
        ranked.push((j, metric.distance(retrieval_features.row(j), query_feature)?));
    }
    ranked.sort_by(|a, b| a.1.total_cmp(&b.1).then(a.0.cmp(&b.0)));
    ranked.truncate(k.min(n));
    Ok(RetrievalOutcome {
        query_id,
        verdict: Verdict::Ranked(ranked),
        detector_score,
    })
}

/// Thin contract wrapper: does the detector flag this query as private.
pub fn detect_private(
    query_feature: &[f64],
    structure: &UnifiedPrototypeStructure,
    eta: f64,
    score_rule: MatchScore,
) -> Result<bool> {
    let det = PrivateDetector {
        prototypes: structure.prototypes.clone(),
        eta,
        score_rule,
    };
    det.is_private(query_feature)
}

/// Mean average precision over shared-label queries on full rankings.
/// Outcomes must be ranked over the entire retrieval domain (detector
/// bypassed); private-label queries and shared-label queries with zero
/// relevant items are skipped (the latter with a logged warning).
pub fn map_all(
    outcomes: &[RetrievalOutcome],
    query_labels: &[u32],
    retrieval_labels: &[u32],
) -> Option<f64> {
    let mut aps = Vec::new();
    for outcome in outcomes {
        let q_label = query_labels[outcome.query_id];
        if !retrieval_labels.contains(&q_label) {
            continue;
        }
        let Verdict::Ranked(ranked) = &outcome.verdict else {
            continue;
        };
        let total_relevant = ranked
            .iter()
            .filter(|(j, _)| retrieval_labels[*j] == q_label)
            .count();
        if total_relevant == 0 {
            log::warn!(
                "query {} has label {} but no relevant retrieval items; skipped",
                outcome.query_id,
                q_label
            );
            continue;
        }
        let mut hits = 0usize;
        let mut ap = 0.0;
        for (rank, (j, _)) in ranked.iter().enumerate() {
            if retrieval_labels[*j] == q_label {
                hits += 1;
                ap += hits as f64 / (rank + 1) as f64;
            }
        }
        aps.push(ap / total_relevant as f64);
    }
    if aps.is_empty() {
        return None;
    }
    let mut sum = 0.0;
    for a in &aps {
        sum += a;
    }
    Some(sum / aps.len() as f64)
}

/// Fraction of private-label queries answered null; None when the query
/// domain has no private labels.
pub fn openset_accuracy(
    outcomes: &[RetrievalOutcome],
    query_labels: &[u32],
    retrieval_labels: &[u32],
) -> Option<f64> {
    let mut private = 0usize;
    let mut nulls = 0usize;
    for outcome in outcomes {
        let q_label = query_labels[outcome.query_id];
        if retrieval_labels.contains(&q_label) {
            continue;
        }
        private += 1;
        if outcome.verdict == Verdict::Null {
            nulls += 1;
        }
    }
    if private == 0 {
        None
    } else {
        Some(nulls as f64 / private as f64)
    }
}

/// Evaluation report; keys serialize in this fixed order.
#[derive(Clone, Debug, Serialize)]
pub struct Metrics {
    pub setting: String,
    pub map_all: Option<f64>,
    pub openset_accuracy: Option<f64>,
    pub num_queries: usize,
    pub num_private: usize,
    pub eta: f64,
    pub seed: u64,
    pub checkpoint_hash: String,
}

impl Metrics {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("metrics serialize")
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::membank::Domain;
    use crate::protostruct::{build_unified, PrototypeSet};
    use rand::Rng;

    fn ranked_outcome(query_id: usize, order: &[usize], dists: &[f64]) -> RetrievalOutcome {
        RetrievalOutcome {
            query_id,
            verdict: Verdict::Ranked(order.iter().copied().zip(dists.iter().copied()).collect()),
            detector_score: None,
        }
    }

    #[test]
    fn retrieve_orders_by_distance_with_id_ties() {
        let retrieval = Tensor::matrix(3, 1, vec![2.0, 1.0, 3.0]).unwrap();
        let got = retrieve(0, &[0.0], &retrieval, 2, DistanceMetric::Euclidean, None).unwrap();
        match got.verdict {
            Verdict::Ranked(r) => {
                assert_eq!(r.len(), 2);
                assert_eq!(r[0].0, 1);
                assert_eq!(r[1].0, 0);
            }
            _ => panic!("expected ranked"),
        }
    }

    #[test]
    fn zero_distance_item_ranks_first() {
        let retrieval = Tensor::matrix(3, 2, vec![5.0, 5.0, 1.0, 2.0, -3.0, 0.5]).unwrap();
        let got = retrieve(0, &[1.0, 2.0], &retrieval, 3, DistanceMetric::Euclidean, None).unwrap();
        match got.verdict {
            Verdict::Ranked(r) => {
                assert_eq!(r[0].0, 1);
                assert_eq!(r[0].1, 0.0);
            }
            _ => panic!("expected ranked"),
        }
    }

    #[test]
    fn detector_flag_yields_null() {
        let retrieval = Tensor::matrix(2, 2, vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        let det = PrivateDetector {
            prototypes: vec![vec![1.0, 0.0]],
            eta: 0.1,
            score_rule: MatchScore::CosTimesDist,
        };
        let far = retrieve(
            3,
            &[-50.0, 40.0],
            &retrieval,
            2,
            DistanceMetric::Euclidean,
            Some(&det),
        )
        .unwrap();
        assert_eq!(far.verdict, Verdict::Null);
        assert!(far.detector_score.unwrap() > det.eta);
    }

    #[test]
    fn empty_retrieval_domain_is_an_error() {
        // A 2-D tensor cannot be empty; guard the zero-row contract through
        // the tensor constructor instead.
        assert!(Tensor::matrix(0, 2, vec![]).is_err());
    }

    #[test]
    fn query_equal_to_prototype_scores_zero() {
        let det = PrivateDetector {
            prototypes: vec![vec![2.0, -1.0], vec![8.0, 8.0]],
            eta: 0.5,
            score_rule: MatchScore::CosTimesDist,
        };
        assert_eq!(det.score(&[2.0, -1.0]).unwrap(), 0.0);
        assert!(!det.is_private(&[2.0, -1.0]).unwrap());
    }

    #[test]
    fn orthogonal_far_query_is_private_for_small_eta() {
        let det = PrivateDetector {
            prototypes: vec![vec![10.0, 0.0]],
            eta: 1e-3,
            score_rule: MatchScore::CosTimesDist,
        };
        assert!(det.is_private(&[0.0, 50.0]).unwrap());
    }

    #[test]
    fn calibrated_eta_matches_percentile_oracle() {
        let mut rng = crate::rng::stream(12, "eta");
        let protos = vec![vec![3.0, 3.0], vec![10.0, 10.0]];
        let structure = {
            let a = PrototypeSet::new(protos.clone(), Domain::B);
            let far = PrototypeSet::new(
                vec![vec![100.0, 100.0], vec![130.0, 100.0]],
                Domain::A,
            );
            build_unified(&a, &far)
        };
        let rows: Vec<Vec<f64>> = (0..40)
            .map(|i| {
                let base = if i % 2 == 0 { 3.0 } else { 10.0 };
                vec![base + rng.gen_range(-1.0..1.0), base + rng.gen_range(-1.0..1.0)]
            })
            .collect();
        let feats = Tensor::from_rows(&rows).unwrap();
        let det = PrivateDetector::calibrate(&structure, &feats, 95.0, MatchScore::CosTimesDist)
            .unwrap();

        // Independent percentile computation.
        let mut scores: Vec<f64> = rows
            .iter()
            .map(|r| {
                structure
                    .prototypes
                    .iter()
                    .map(|p| MatchScore::CosTimesDist.score(r, p).unwrap())
                    .fold(f64::INFINITY, f64::min)
            })
            .collect();
        scores.sort_by(f64::total_cmp);
        let idx = ((0.95 * 40.0f64).ceil() as usize) - 1;
        assert_eq!(det.eta, scores[idx]);
    }

    #[test]
    fn ap_of_pattern_one_zero_one() {
        // Relevance [1, 0, 1]: AP = (1 + 2/3) / 2 = 5/6.
        let outcomes = vec![ranked_outcome(0, &[0, 1, 2], &[0.1, 0.2, 0.3])];
        let got = map_all(&outcomes, &[7], &[7, 3, 7]).unwrap();
        assert!((got - 5.0 / 6.0).abs() <= 1e-12);
        assert!((got - 0.83333).abs() <= 1e-5);
    }

    #[test]
    fn perfect_ranking_has_ap_one() {
        let outcomes = vec![ranked_outcome(0, &[2, 0, 1], &[0.1, 0.2, 0.3])];
        let got = map_all(&outcomes, &[1], &[1, 5, 1]).unwrap();
        assert_eq!(got, 1.0);
    }

    #[test]
    fn single_relevant_ranked_last_has_ap_one_over_n() {
        let n = 7;
        let order: Vec<usize> = (0..n).collect();
        let dists: Vec<f64> = (0..n).map(|i| i as f64).collect();
        let outcomes = vec![ranked_outcome(0, &order, &dists)];
        let mut retrieval_labels = vec![0u32; n];
        retrieval_labels[n - 1] = 9;
        let got = map_all(&outcomes, &[9], &retrieval_labels).unwrap();
        assert!((got - 1.0 / n as f64).abs() <= 1e-15);
    }

    #[test]
    fn map_skips_queries_without_relevant_items() {
        let outcomes = vec![
            ranked_outcome(0, &[0, 1], &[0.1, 0.2]),
            ranked_outcome(1, &[0, 1], &[0.1, 0.2]),
        ];
        // Query 1 has label 5 which appears in the retrieval space but on
        // no item; only query 0 contributes.
        let got = map_all(&outcomes, &[3, 5], &[3, 3]).unwrap();
        assert_eq!(got, 1.0);
    }

    #[test]
    fn map_matches_brute_force_on_random_fixtures() {
        for fixture in 0..100u64 {
            let mut rng = crate::rng::substream(500, "map-fixture", &[fixture]);
            let nq = rng.gen_range(2..8);
            let nr = rng.gen_range(3..50);
            let d = 3;
            let q_labels: Vec<u32> = (0..nq).map(|_| rng.gen_range(0..4)).collect();
            let r_labels: Vec<u32> = (0..nr).map(|_| rng.gen_range(0..4)).collect();
            let qf: Vec<Vec<f64>> = (0..nq)
                .map(|_| (0..d).map(|_| rng.gen_range(-3.0..3.0)).collect())
                .collect();
            let rf: Vec<Vec<f64>> = (0..nr)
                .map(|_| (0..d).map(|_| rng.gen_range(-3.0..3.0)).collect())
                .collect();
            let retrieval = Tensor::from_rows(&rf).unwrap();

            let outcomes: Vec<RetrievalOutcome> = (0..nq)
                .map(|qi| {
                    retrieve(qi, &qf[qi], &retrieval, nr, DistanceMetric::Euclidean, None).unwrap()
                })
                .collect();
            let got = map_all(&outcomes, &q_labels, &r_labels);

            // Brute-force oracle with its own sort and AP accumulation.
            let mut aps = Vec::new();
            for qi in 0..nq {
                if !r_labels.contains(&q_labels[qi]) {
                    continue;
                }
                let mut order: Vec<usize> = (0..nr).collect();
                order.sort_by(|&a, &b| {
                    let da = euclidean(&rf[a], &qf[qi]);
                    let db = euclidean(&rf[b], &qf[qi]);
                    da.total_cmp(&db).then(a.cmp(&b))
                });
                let relevant: Vec<bool> = order.iter().map(|&j| r_labels[j] == q_labels[qi]).collect();
                let total: usize = relevant.iter().filter(|&&r| r).count();
                if total == 0 {
                    continue;
                }
                let mut hits = 0;
                let mut ap = 0.0;
                for (rank, &rel) in relevant.iter().enumerate() {
                    if rel {
                        hits += 1;
                        ap += hits as f64 / (rank + 1) as f64;
                    }
                }
                aps.push(ap / total as f64);
            }
            let oracle = if aps.is_empty() {
                None
            } else {
                Some(aps.iter().sum::<f64>() / aps.len() as f64)
            };
            match (got, oracle) {
                (None, None) => {}
                (Some(g), Some(o)) => assert!((g - o).abs() <= 1e-12, "fixture {fixture}"),
                other => panic!("fixture {fixture}: {other:?}"),
            }
        }
    }

    #[test]
    fn openset_accuracy_ratios() {
        let null = |qid: usize| RetrievalOutcome {
            query_id: qid,
            verdict: Verdict::Null,
            detector_score: Some(9.0),
        };
        let ranked = |qid: usize| ranked_outcome(qid, &[0], &[0.0]);
        let q_labels = vec![5, 5, 5, 5];
        let r_labels = vec![1u32];

        let all_null: Vec<_> = (0..4).map(null).collect();
        assert_eq!(openset_accuracy(&all_null, &q_labels, &r_labels), Some(1.0));

        let none_null: Vec<_> = (0..4).map(ranked).collect();
        assert_eq!(openset_accuracy(&none_null, &q_labels, &r_labels), Some(0.0));

        let half: Vec<_> = vec![null(0), null(1), ranked(2), ranked(3)];
        assert_eq!(openset_accuracy(&half, &q_labels, &r_labels), Some(0.5));

        // No private labels: metric not applicable.
        assert_eq!(openset_accuracy(&none_null, &[1, 1, 1, 1], &r_labels), None);
    }

    #[test]
    fn verdicts_are_invariant_under_storage_permutation() {
        let mut rng = crate::rng::stream(42, "perm");
        let rows: Vec<Vec<f64>> = (0..12)
            .map(|_| (0..3).map(|_| rng.gen_range(-2.0..2.0)).collect())
            .collect();
        let retrieval = Tensor::from_rows(&rows).unwrap();
        let q = [0.2, -0.4, 1.0];
        let base = retrieve(0, &q, &retrieval, 12, DistanceMetric::Euclidean, None).unwrap();

        let perm: Vec<usize> = (0..12).rev().collect();
        let permuted_rows: Vec<Vec<f64>> = perm.iter().map(|&i| rows[i].clone()).collect();
        let permuted = Tensor::from_rows(&permuted_rows).unwrap();
        let other = retrieve(0, &q, &permuted, 12, DistanceMetric::Euclidean, None).unwrap();

        let (Verdict::Ranked(a), Verdict::Ranked(b)) = (&base.verdict, &other.verdict) else {
            panic!("expected ranked verdicts");
        };
        // Same distance sequence, and the same underlying item at each rank.
        for (x, y) in a.iter().zip(b.iter()) {
            assert_eq!(x.1.to_bits(), y.1.to_bits());
            assert_eq!(rows[x.0], permuted_rows[y.0]);
        }
    }

    #[test]
    fn raising_eta_never_turns_ranked_into_null() {
        // Verdict monotonicity in the threshold: the null set shrinks as
        // eta rises.
        let mut rng = crate::rng::stream(9, "eta-mono");
        let retrieval = Tensor::matrix(2, 2, vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        let protos = vec![vec![1.0, 0.0]];
        for _ in 0..50 {
            let q = [rng.gen_range(-3.0..3.0), rng.gen_range(-3.0..3.0)];
            if q == [0.0, 0.0] {
                continue;
            }
            let (lo, hi) = (0.05, 0.8);
            let verdict_at = |eta: f64| {
                let det = PrivateDetector {
                    prototypes: protos.clone(),
                    eta,
                    score_rule: MatchScore::CosTimesDist,
                };
                retrieve(0, &q, &retrieval, 2, DistanceMetric::Euclidean, Some(&det))
                    .unwrap()
                    .verdict
            };
            let v_lo = verdict_at(lo);
            let v_hi = verdict_at(hi);
            if v_lo != Verdict::Null {
                assert_ne!(v_hi, Verdict::Null);
            }
        }
    }

    #[test]
    fn metrics_json_has_fixed_key_order() {
        let m = Metrics {
            setting: "openset".to_string(),
            map_all: Some(0.5),
            openset_accuracy: None,
            num_queries: 10,
            num_private: 0,
            eta: 0.25,
            seed: 7,
            checkpoint_hash: "abc".to_string(),
        };
        let json = m.to_json();
        let keys: Vec<usize> = [
            "setting",
            "map_all",
            "openset_accuracy",
            "num_queries",
            "num_private",
            "eta",
            "seed",
            "checkpoint_hash",
        ]
        .iter()
        .map(|k| json.find(&format!("\"{k}\"")).unwrap())
        .collect();
        for w in keys.windows(2) {
            assert!(w[0] < w[1]);
        }
    }
}
