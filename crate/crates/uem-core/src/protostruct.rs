//! Prototype translation across domains, the spacing-gated merge of mutually
//! nearest prototypes, and the unified per-domain prototypical structures.

use std::io::Write;

use crate::diffkit::{euclidean, Tensor};
use crate::error::{Error, Result};
use crate::membank::Domain;

/// Cluster centers of one domain. Kept as plain rows so empty sets are
/// representable (a translated set can be empty when the source domain has
/// no prototypes yet).
#[derive(Clone, Debug)]
pub struct PrototypeSet {
    pub prototypes: Vec<Vec<f64>>,
    pub domain: Domain,
}

impl PrototypeSet {
    pub fn new(prototypes: Vec<Vec<f64>>, domain: Domain) -> Self {
        Self { prototypes, domain }
    }

    pub fn from_centers(centers: &Tensor, domain: Domain) -> Self {
        let rows = (0..centers.rows()).map(|i| centers.row(i).to_vec()).collect();
        Self {
            prototypes: rows,
            domain,
        }
    }

    pub fn len(&self) -> usize {
        self.prototypes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.prototypes.is_empty()
    }
}

/// Shift every prototype by (mean_dst - mean_src).
pub fn translate(set: &PrototypeSet, mean_src: &[f64], mean_dst: &[f64]) -> PrototypeSet {
    let shifted = set
        .prototypes
        .iter()
        .map(|p| {
            p.iter()
                .zip(mean_src.iter().zip(mean_dst.iter()))
                .map(|(&v, (&ms, &md))| v + (md - ms))
                .collect()
        })
        .collect();
    PrototypeSet {
        prototypes: shifted,
        domain: set.domain,
    }
}

/// Minimum Euclidean distance over distinct pairs; +inf for fewer than two
/// prototypes so the other set's spacing governs the merge threshold.
pub fn min_pairwise_distance(prototypes: &[Vec<f64>]) -> f64 {
    let n = prototypes.len();
    if n < 2 {
        return f64::INFINITY;
    }
    let mut best = f64::INFINITY;
    for i in 0..n {
        for j in (i + 1)..n {
            let d = euclidean(&prototypes[i], &prototypes[j]);
            if d < best {
                best = d;
            }
        }
    }
    best
}

/// Where a unified prototype came from.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Provenance {
    /// Destination-domain prototype kept as-is.
    Own { dst_id: usize },
    /// Translated source prototype kept as-is.
    Translated { src_id: usize },
    /// Average of a destination prototype and its merged translated partner.
    Merged { dst_id: usize, src_id: usize },
}

impl Provenance {
    pub fn label(&self) -> &'static str {
        match self {
            Provenance::Own { .. } => "own",
            Provenance::Translated { .. } => "translated",
            Provenance::Merged { .. } => "merged",
        }
    }
}

/// The unified prototypical structure of one destination domain: its own
/// prototypes plus the other domain's translated prototypes, with mutually
/// nearest pairs under the spacing condition merged by averaging.
#[derive(Clone, Debug)]
pub struct UnifiedPrototypeStructure {
    pub prototypes: Vec<Vec<f64>>,
    pub provenance: Vec<Provenance>,
    /// Pre-merge destination prototype id -> unified id.
    pub dst_to_unified: Vec<usize>,
    /// Pre-merge translated (source) prototype id -> unified id.
    pub src_to_unified: Vec<usize>,
    pub merged_pairs: usize,
    pub domain: Domain,
}

impl UnifiedPrototypeStructure {
    pub fn len(&self) -> usize {
        self.prototypes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.prototypes.is_empty()
    }

    /// Unified id for a pre-merge source prototype (the translated or merged
    /// image of the other domain's prototype).
    pub fn unified_of_src(&self, src_id: usize) -> Result<usize> {
        self.src_to_unified.get(src_id).copied().ok_or_else(|| Error::StaleStructure {
            msg: format!(
                "source prototype {src_id} not in the {} association table (len {})",
                self.domain,
                self.src_to_unified.len()
            ),
        })
    }

    pub fn unified_of_dst(&self, dst_id: usize) -> Result<usize> {
        self.dst_to_unified.get(dst_id).copied().ok_or_else(|| Error::StaleStructure {
            msg: format!(
                "destination prototype {dst_id} not in the {} association table (len {})",
                self.domain,
                self.dst_to_unified.len()
            ),
        })
    }

    pub fn as_tensor(&self) -> Result<Tensor> {
        if self.prototypes.is_empty() {
            return Err(Error::Empty {
                what: format!("unified structure for domain {}", self.domain),
            });
        }
        Tensor::from_rows(&self.prototypes)
    }

    /// Tabular dump for plotting: id, provenance, source ids, coordinates.
    pub fn write_csv<W: Write>(&self, w: &mut W) -> Result<()> {
        let dim = self.prototypes.first().map_or(0, |p| p.len());
        write!(w, "unified_id,provenance,dst_id,src_id")?;
        for j in 0..dim {
            write!(w, ",f{j}")?;
        }
        writeln!(w)?;
        for (i, p) in self.prototypes.iter().enumerate() {
            let (dst, src) = match self.provenance[i] {
                Provenance::Own { dst_id } => (dst_id.to_string(), String::new()),
                Provenance::Translated { src_id } => (String::new(), src_id.to_string()),
                Provenance::Merged { dst_id, src_id } => (dst_id.to_string(), src_id.to_string()),
            };
            write!(w, "{},{},{},{}", i, self.provenance[i].label(), dst, src)?;
            for v in p {
                write!(w, ",{v}")?;
            }
            writeln!(w)?;
        }
        Ok(())
    }
}

/// Build the unified structure with merging enabled.
pub fn build_unified(dst: &PrototypeSet, translated: &PrototypeSet) -> UnifiedPrototypeStructure {
    build(dst, translated, true)
}

/// Ablation variant: plain union, no merging.
pub fn build_union_no_merge(
    dst: &PrototypeSet,
    translated: &PrototypeSet,
) -> UnifiedPrototypeStructure {
    build(dst, translated, false)
}

fn build(dst: &PrototypeSet, translated: &PrototypeSet, merge: bool) -> UnifiedPrototypeStructure {
    let nd = dst.len();
    let ns = translated.len();

    // Greedy one-to-one matching: each translated prototype proposes its
    // nearest destination prototype; proposals are accepted in ascending
    // distance order while strictly below the spacing threshold.
    let mut partner_of_dst: Vec<Option<usize>> = vec![None; nd];
    let mut partner_of_src: Vec<Option<usize>> = vec![None; ns];
    let mut merged_pairs = 0usize;
    if merge && nd > 0 && ns > 0 {
        let threshold = f64::min(
            min_pairwise_distance(&dst.prototypes),
            min_pairwise_distance(&translated.prototypes),
        );
        let mut proposals: Vec<(f64, usize, usize)> = Vec::with_capacity(ns);
        for s in 0..ns {
            let mut best_d = f64::INFINITY;
            let mut best_j = 0usize;
            for j in 0..nd {
                let d = euclidean(&translated.prototypes[s], &dst.prototypes[j]);
                if d < best_d {
                    best_d = d;
                    best_j = j;
                }
            }
            proposals.push((best_d, s, best_j));
        }
        proposals.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
        for (d, s, j) in proposals {
            if d < threshold && partner_of_dst[j].is_none() && partner_of_src[s].is_none() {
                partner_of_dst[j] = Some(s);
                partner_of_src[s] = Some(j);
                merged_pairs += 1;
            }
        }
    }

    let mut prototypes = Vec::with_capacity(nd + ns - merged_pairs);
    let mut provenance = Vec::with_capacity(prototypes.capacity());
    let mut dst_to_unified = vec![usize::MAX; nd];
    let mut src_to_unified = vec![usize::MAX; ns];

    for j in 0..nd {
        let slot = prototypes.len();
        dst_to_unified[j] = slot;
        match partner_of_dst[j] {
            Some(s) => {
                let avg: Vec<f64> = dst.prototypes[j]
                    .iter()
                    .zip(translated.prototypes[s].iter())
                    .map(|(&a, &b)| (a + b) / 2.0)
                    .collect();
                prototypes.push(avg);
                provenance.push(Provenance::Merged { dst_id: j, src_id: s });
                src_to_unified[s] = slot;
            }
            None => {
                prototypes.push(dst.prototypes[j].clone());
                provenance.push(Provenance::Own { dst_id: j });
            }
        }
    }
    for s in 0..ns {
        if partner_of_src[s].is_none() {
            let slot = prototypes.len();
            src_to_unified[s] = slot;
            prototypes.push(translated.prototypes[s].clone());
            provenance.push(Provenance::Translated { src_id: s });
        }
    }

    UnifiedPrototypeStructure {
        prototypes,
        provenance,
        dst_to_unified,
        src_to_unified,
        merged_pairs,
        domain: dst.domain,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn set(domain: Domain, rows: &[&[f64]]) -> PrototypeSet {
        PrototypeSet::new(rows.iter().map(|r| r.to_vec()).collect(), domain)
    }

    #[test]
    fn translate_shifts_by_mean_offset() {
        let p = set(Domain::B, &[&[6.0, 6.0]]);
        let out = translate(&p, &[5.0, 5.0], &[1.0, 1.0]);
        assert_eq!(out.prototypes[0], vec![2.0, 2.0]);

        let same = translate(&p, &[3.0, 3.0], &[3.0, 3.0]);
        assert_eq!(same.prototypes, p.prototypes);

        let back = translate(&out, &[1.0, 1.0], &[5.0, 5.0]);
        for (a, b) in back.prototypes[0].iter().zip(p.prototypes[0].iter()) {
            assert!((a - b).abs() <= 1e-12);
        }
    }

    #[test]
    fn min_pairwise_examples() {
        assert_eq!(
            min_pairwise_distance(&[vec![0.0, 0.0], vec![3.0, 4.0]]),
            5.0
        );
        assert_eq!(min_pairwise_distance(&[vec![1.0]]), f64::INFINITY);
        assert_eq!(
            min_pairwise_distance(&[vec![0.0], vec![1.0], vec![3.0]]),
            1.0
        );
    }

    #[test]
    fn merge_example_with_one_accepted_pair() {
        let dst = set(Domain::A, &[&[0.0, 0.0], &[10.0, 0.0]]);
        let tr = set(Domain::B, &[&[0.2, 0.0], &[20.0, 0.0]]);
        let u = build_unified(&dst, &tr);
        // threshold = min(10, 19.8) = 10; pair (0.2) accepted, pair (10) is
        // not strictly below.
        assert_eq!(u.merged_pairs, 1);
        assert_eq!(u.len(), 3);
        assert_eq!(u.prototypes[0], vec![0.1, 0.0]);
        assert_eq!(u.prototypes[1], vec![10.0, 0.0]);
        assert_eq!(u.prototypes[2], vec![20.0, 0.0]);
        assert_eq!(u.provenance[0].label(), "merged");
        assert_eq!(u.unified_of_src(0).unwrap(), 0);
        assert_eq!(u.unified_of_src(1).unwrap(), 2);
        assert_eq!(u.unified_of_dst(1).unwrap(), 1);
    }

    #[test]
    fn far_sets_pass_through_unmerged() {
        let dst = set(Domain::A, &[&[0.0], &[1.0]]);
        let tr = set(Domain::B, &[&[100.0], &[101.0]]);
        let u = build_unified(&dst, &tr);
        assert_eq!(u.merged_pairs, 0);
        assert_eq!(u.len(), 4);
    }

    #[test]
    fn identical_sets_collapse_to_their_twins() {
        let dst = set(Domain::A, &[&[0.0, 1.0], &[5.0, -2.0], &[9.0, 9.0]]);
        let tr = set(Domain::B, &[&[0.0, 1.0], &[5.0, -2.0], &[9.0, 9.0]]);
        let u = build_unified(&dst, &tr);
        assert_eq!(u.merged_pairs, 3);
        assert_eq!(u.len(), 3);
        for (i, p) in u.prototypes.iter().enumerate() {
            assert_eq!(p, &dst.prototypes[i]);
        }
    }

    #[test]
    fn zero_translation_collapses_to_the_original_set() {
        let p = set(Domain::A, &[&[1.0, 0.0], &[4.0, 4.0], &[-3.0, 2.0]]);
        let tr = translate(&p, &[2.0, 2.0], &[2.0, 2.0]);
        let u = build_unified(&p, &tr);
        assert_eq!(u.len(), p.len());
        for (i, proto) in u.prototypes.iter().enumerate() {
            assert_eq!(proto, &p.prototypes[i]);
        }
    }

    #[test]
    fn empty_side_passes_through_the_other() {
        let dst = set(Domain::A, &[&[1.0], &[2.0]]);
        let empty = PrototypeSet::new(vec![], Domain::B);
        let u = build_unified(&dst, &empty);
        assert_eq!(u.len(), 2);
        assert_eq!(u.merged_pairs, 0);
        let u2 = build_unified(&PrototypeSet::new(vec![], Domain::A), &dst);
        assert_eq!(u2.len(), 2);
        assert!(u2.provenance.iter().all(|p| p.label() == "translated"));
    }

    #[test]
    fn no_merge_variant_is_a_plain_union() {
        let dst = set(Domain::A, &[&[0.0], &[10.0]]);
        let tr = set(Domain::B, &[&[0.1], &[10.1]]);
        let u = build_union_no_merge(&dst, &tr);
        assert_eq!(u.merged_pairs, 0);
        assert_eq!(u.len(), 4);
        assert_eq!(u.unified_of_dst(0).unwrap(), 0);
        assert_eq!(u.unified_of_src(0).unwrap(), 2);
    }

    /// Brute-force re-verification of the merge condition and matching
    /// structure on random prototype-set pairs.
    #[test]
    fn merges_satisfy_the_spacing_condition_post_hoc() {
        use rand::Rng;
        for fixture in 0..100u64 {
            let mut rng = crate::rng::substream(61, "merge-fixture", &[fixture]);
            let nd = rng.gen_range(1..6);
            let ns = rng.gen_range(1..6);
            let dim = 3;
            let gen_set = |rng: &mut rand_chacha::ChaCha8Rng, n: usize| -> Vec<Vec<f64>> {
                (0..n)
                    .map(|_| (0..dim).map(|_| rng.gen_range(-4.0..4.0)).collect())
                    .collect()
            };
            let dst = PrototypeSet::new(gen_set(&mut rng, nd), Domain::A);
            let tr = PrototypeSet::new(gen_set(&mut rng, ns), Domain::B);
            let u = build_unified(&dst, &tr);

            let threshold = f64::min(
                min_pairwise_distance(&dst.prototypes),
                min_pairwise_distance(&tr.prototypes),
            );
            let mut seen_dst = vec![false; nd];
            let mut seen_src = vec![false; ns];
            for prov in &u.provenance {
                if let Provenance::Merged { dst_id, src_id } = prov {
                    let d = euclidean(&dst.prototypes[*dst_id], &tr.prototypes[*src_id]);
                    assert!(d < threshold, "fixture {fixture}: merge at {d} >= {threshold}");
                    assert!(!seen_dst[*dst_id] && !seen_src[*src_id], "double merge");
                    seen_dst[*dst_id] = true;
                    seen_src[*src_id] = true;
                }
            }
            assert_eq!(nd + ns - u.len(), u.merged_pairs);

            // Association tables are total and consistent.
            for (j, &slot) in u.dst_to_unified.iter().enumerate() {
                match u.provenance[slot] {
                    Provenance::Own { dst_id } | Provenance::Merged { dst_id, .. } => {
                        assert_eq!(dst_id, j)
                    }
                    _ => panic!("dst mapped to a translated slot"),
                }
            }
            for (s, &slot) in u.src_to_unified.iter().enumerate() {
                match u.provenance[slot] {
                    Provenance::Translated { src_id } | Provenance::Merged { src_id, .. } => {
                        assert_eq!(src_id, s)
                    }
                    _ => panic!("src mapped to an own slot"),
                }
            }

            // Merged prototypes equal the pair mean.
            for (slot, prov) in u.provenance.iter().enumerate() {
                if let Provenance::Merged { dst_id, src_id } = prov {
                    for k in 0..dim {
                        let mean = (dst.prototypes[*dst_id][k] + tr.prototypes[*src_id][k]) / 2.0;
                        assert!((u.prototypes[slot][k] - mean).abs() <= 1e-12);
                    }
                }
            }
        }
    }

    #[test]
    fn csv_dump_has_one_row_per_prototype() {
        let dst = set(Domain::A, &[&[0.0, 0.0], &[10.0, 0.0]]);
        let tr = set(Domain::B, &[&[0.2, 0.0], &[20.0, 0.0]]);
        let u = build_unified(&dst, &tr);
        let mut buf = Vec::new();
        u.write_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert_eq!(text.lines().count(), 1 + u.len());
        assert!(text.lines().next().unwrap().starts_with("unified_id,provenance"));
    }
}
