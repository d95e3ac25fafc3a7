//! Stage-2 losses: the domain adversarial objective, the semantic-preserving
//! regulation against a frozen stage-1 snapshot, and the switchable
//! nearest-neighbor match with its reliability-gated contrastive loss.

use crate::diffkit::{cosine, euclidean, Tape, Tensor, Var};
use crate::encoder::{param_hash, DomainClassifierParams, EncoderParams};
use crate::error::{Error, Result};
use crate::protostruct::UnifiedPrototypeStructure;
use crate::stage1::LossConfig;

/// Classifier probabilities are clamped here before the logs.
pub const PROB_CLAMP: f64 = 1e-7;

/// Immutable copy of the encoder at the end of stage 1.
#[derive(Clone, Debug)]
pub struct FrozenSnapshot {
    params: EncoderParams,
    hash: String,
}

impl FrozenSnapshot {
    pub fn freeze(encoder: &EncoderParams) -> Self {
        Self {
            params: encoder.clone(),
            hash: encoder.param_hash(),
        }
    }

    pub fn encoder(&self) -> &EncoderParams {
        &self.params
    }

    pub fn hash(&self) -> &str {
        &self.hash
    }

    /// Recompute the digest; stays constant for the snapshot's lifetime.
    pub fn verify_hash(&self) -> bool {
        param_hash(&self.params.params()) == self.hash
    }
}

/// Domain adversarial cross-entropy over joint features with binary domain
/// labels (1 for the query domain, 0 for the retrieval domain).
///
/// Returns the loss node and the classifier parameter leaves so the caller
/// can update either parameter group from one backward pass.
pub fn loss_dal(
    tape: &mut Tape,
    features_joint: Var,
    domain_labels: &[f64],
    classifier: &DomainClassifierParams,
) -> Result<(Var, Vec<Var>)> {
    let n = tape.value(features_joint).rows();
    if domain_labels.len() != n {
        return Err(Error::shape_mismatch("loss_dal", &[n], &[domain_labels.len()]));
    }
    for (i, &y) in domain_labels.iter().enumerate() {
        if y != 0.0 && y != 1.0 {
            return Err(Error::NonBinaryLabel { value: y, index: i });
        }
    }
    let (probs, clf_vars) = classifier.classify_tape(tape, features_joint)?;
    let loss = domain_bce(tape, probs, domain_labels)?;
    Ok((loss, clf_vars))
}

/// Clamped binary cross-entropy over an (n, 1) probability column.
pub fn domain_bce(tape: &mut Tape, probs: Var, domain_labels: &[f64]) -> Result<Var> {
    let n = tape.value(probs).rows();
    let clamped = tape.clamp(probs, PROB_CLAMP, 1.0 - PROB_CLAMP);

    let y = Tensor::matrix(n, 1, domain_labels.to_vec())?;
    let one_minus_y = Tensor::matrix(n, 1, domain_labels.iter().map(|v| 1.0 - v).collect())?;
    let ones = tape.leaf(Tensor::matrix(n, 1, vec![1.0; n])?);
    let yl = tape.leaf(y);
    let oyl = tape.leaf(one_minus_y);

    let log_p = tape.ln(clamped)?;
    let one_minus_p = tape.sub(ones, clamped)?;
    let log_q = tape.ln(one_minus_p)?;
    let pos = tape.mul(yl, log_p)?;
    let neg = tape.mul(oyl, log_q)?;
    let both = tape.add(pos, neg)?;
    let total = tape.sum(both);
    Ok(tape.scale(total, -1.0))
}

/// Semantic-preserving regulation for one domain batch:
/// (1/B^2) sum_ij (cos_ij - cos'_ij)^2 + (d_ij - d'_ij)^2
/// where primed quantities come from the frozen snapshot. The double sum
/// runs over all ordered pairs including self-pairs (which contribute zero).
pub fn loss_spr(tape: &mut Tape, features: Var, frozen_features: &Tensor) -> Result<Var> {
    let f = tape.value(features);
    let b = f.rows();
    if frozen_features.shape() != f.shape() {
        return Err(Error::shape_mismatch(
            "loss_spr",
            f.shape(),
            frozen_features.shape(),
        ));
    }
    for i in 0..b {
        if f.row(i).iter().all(|&v| v == 0.0) {
            return Err(Error::ZeroNormFeature { instance: i });
        }
    }
    let frozen_cos = {
        let nr = frozen_features.normalize_rows()?;
        nr.matmul(&nr.transposed()?)?
    };
    let frozen_dist = frozen_features.pairwise_dist(frozen_features)?;

    let nr = tape.normalize_rows(features)?;
    let nrt = tape.transpose(nr)?;
    let cos = tape.matmul(nr, nrt)?;
    let dist = tape.pairwise_dist(features, features)?;

    let fc = tape.leaf(frozen_cos);
    let fd = tape.leaf(frozen_dist);
    let dc = tape.sub(cos, fc)?;
    let dd = tape.sub(dist, fd)?;
    let dc2 = tape.mul(dc, dc)?;
    let dd2 = tape.mul(dd, dd)?;
    let sums = {
        let a = tape.sum(dc2);
        let b2 = tape.sum(dd2);
        tape.add(a, b2)?
    };
    Ok(tape.scale(sums, 1.0 / (b * b) as f64))
}

/// Scoring rule for nearest-neighbor searches.
#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub enum MatchScore {
    /// (1 - cos(f, c)) * d(f, c), the reliability-aware product score.
    CosTimesDist,
    /// 1 - cos(f, c), the plain cosine matcher used as an ablation.
    CosineOnly,
}

impl MatchScore {
    pub fn score(&self, query: &[f64], candidate: &[f64]) -> Result<f64> {
        let c = cosine(query, candidate)?;
        Ok(match self {
            MatchScore::CosTimesDist => (1.0 - c) * euclidean(query, candidate),
            MatchScore::CosineOnly => 1.0 - c,
        })
    }
}

/// Argmin candidate under the match score. Ties resolve by smaller
/// Euclidean distance, then lower id.
pub fn snnm_search<'a, I>(query: &[f64], candidates: I, score: MatchScore) -> Result<usize>
where
    I: IntoIterator<Item = &'a [f64]>,
{
    let mut best: Option<(f64, f64, usize)> = None;
    let mut count = 0usize;
    for (id, cand) in candidates.into_iter().enumerate() {
        count += 1;
        let s = score.score(query, cand)?;
        let d = euclidean(query, cand);
        let key = (s, d, id);
        let better = match &best {
            None => true,
            Some((bs, bd, bid)) => {
                (key.0, key.1, key.2) < (*bs, *bd, *bid)
            }
        };
        if better {
            best = Some(key);
        }
    }
    if count == 0 {
        return Err(Error::Empty {
            what: "candidate set".to_string(),
        });
    }
    Ok(best.unwrap().2)
}

/// Search over the rows of a matrix.
pub fn snnm_search_rows(query: &[f64], candidates: &Tensor, score: MatchScore) -> Result<usize> {
    snnm_search(query, (0..candidates.rows()).map(|i| candidates.row(i)), score)
}

/// One query's match classification.
#[derive(Clone, Debug)]
pub struct MatchResult {
    /// Instance id of the query in its own domain.
    pub query_id: usize,
    /// Nearest own-domain (pre-merge) prototype id.
    pub own_prototype: usize,
    /// Matched instance id in the other domain's bank.
    pub matched_instance: usize,
    /// Unified id (in the other domain's structure) of the query's
    /// translated or merged prototype.
    pub translated_unified: usize,
    /// Unified id of the matched instance's nearest prototype.
    pub matched_nearest_unified: usize,
    /// True iff the two unified ids coincide.
    pub reliable: bool,
    /// Score of the matched instance under the active rule.
    pub match_score: f64,
}

/// Classify a match: map the query's own prototype through the other
/// domain's association table and compare with the matched instance's
/// nearest unified prototype.
pub fn snnm_classify(
    query_id: usize,
    query_feature: &[f64],
    own_prototypes: &[Vec<f64>],
    other_structure: &UnifiedPrototypeStructure,
    other_bank_entries: &Tensor,
    score: MatchScore,
) -> Result<MatchResult> {
    if own_prototypes.is_empty() {
        return Err(Error::Empty {
            what: "own prototype set".to_string(),
        });
    }
    let own_prototype = snnm_search(
        query_feature,
        own_prototypes.iter().map(|p| p.as_slice()),
        score,
    )?;
    let matched_instance = snnm_search_rows(query_feature, other_bank_entries, score)?;
    let match_score = score.score(query_feature, other_bank_entries.row(matched_instance))?;
    let translated_unified = other_structure.unified_of_src(own_prototype)?;
    let matched_nearest_unified = snnm_search(
        other_bank_entries.row(matched_instance),
        other_structure.prototypes.iter().map(|p| p.as_slice()),
        score,
    )?;
    Ok(MatchResult {
        query_id,
        own_prototype,
        matched_instance,
        translated_unified,
        matched_nearest_unified,
        reliable: matched_nearest_unified == translated_unified,
        match_score,
    })
}

/// Inputs of the switchable nearest-neighbor matched loss for one direction
/// (queries of one domain against the other domain's structure and bank).
pub struct SnnmBatch {
    /// Fresh query features on the tape, (B, d).
    pub features: Var,
    /// Match classification per query, len B.
    pub matches: Vec<MatchResult>,
    /// Unified prototypes of the other domain, (C, d), constants.
    pub other_prototypes: Tensor,
    /// The other domain's full memory bank, (N, d), constants.
    pub other_bank: Tensor,
}

/// (1/B) sum_i -log( Delta_i / (sum_c exp(<f_i,p_c>/tau) + sum_j exp(<f_i,m_j>/tau)) )
/// where Delta_i always contains the translated-prototype term and, when the
/// match is reliable, additionally the matched-instance term.
pub fn loss_snnm(tape: &mut Tape, batch: &SnnmBatch, cfg: &LossConfig) -> Result<Var> {
    let b = tape.value(batch.features).rows();
    if batch.matches.len() != b {
        return Err(Error::shape_mismatch("loss_snnm", &[b], &[batch.matches.len()]));
    }
    let c = batch.other_prototypes.rows();
    let n = batch.other_bank.rows();

    let ids: Vec<usize> = batch.matches.iter().map(|m| m.query_id).collect();
    let proto_logits = scaled_logits(tape, batch.features, &ids, &batch.other_prototypes, cfg)?;
    let bank_logits = scaled_logits(tape, batch.features, &ids, &batch.other_bank, cfg)?;
    let logits = tape.concat_cols(proto_logits, bank_logits)?;

    let den = tape.logsumexp_rows(logits, None)?;
    let mut mask = vec![false; b * (c + n)];
    for (i, m) in batch.matches.iter().enumerate() {
        if m.translated_unified >= c {
            return Err(Error::StaleStructure {
                msg: format!(
                    "translated prototype id {} outside the unified set (len {c})",
                    m.translated_unified
                ),
            });
        }
        if m.matched_instance >= n {
            return Err(Error::IndexOutOfRange {
                what: "matched instance".to_string(),
                index: m.matched_instance,
                len: n,
            });
        }
        mask[i * (c + n) + m.translated_unified] = true;
        if m.reliable {
            mask[i * (c + n) + c + m.matched_instance] = true;
        }
    }
    let num = tape.logsumexp_rows(logits, Some(mask))?;
    let per_query = tape.sub(den, num)?;
    let total = tape.sum(per_query);
    Ok(tape.scale(total, 1.0 / b as f64))
}

fn scaled_logits(
    tape: &mut Tape,
    features: Var,
    ids: &[usize],
    constants: &Tensor,
    cfg: &LossConfig,
) -> Result<Var> {
    let lhs = if cfg.normalize_dot {
        let f = tape.value(features);
        for i in 0..f.rows() {
            if f.row(i).iter().all(|&v| v == 0.0) {
                return Err(Error::ZeroNormFeature {
                    instance: ids.get(i).copied().unwrap_or(i),
                });
            }
        }
        tape.normalize_rows(features)?
    } else {
        features
    };
    let rhs = if cfg.normalize_dot {
        constants.normalize_rows()?
    } else {
        constants.clone()
    };
    let rl = tape.leaf(rhs.transposed()?);
    let prod = tape.matmul(lhs, rl)?;
    Ok(tape.scale(prod, 1.0 / cfg.tau))
}

/// Overall stage-2 objective value: DAL + SPR_A + SPR_B + SNNM_A + SNNM_B.
/// The trainer realizes the adversarial part with alternating updates; this
/// sum is the logged quantity.
pub fn loss_cdsm(
    tape: &mut Tape,
    dal: Var,
    spr_a: Option<Var>,
    spr_b: Option<Var>,
    snnm_a: Var,
    snnm_b: Var,
) -> Result<Var> {
    let mut total = dal;
    if let Some(s) = spr_a {
        total = tape.add(total, s)?;
    }
    if let Some(s) = spr_b {
        total = tape.add(total, s)?;
    }
    total = tape.add(total, snnm_a)?;
    tape.add(total, snnm_b)
}

/// The structure-deviation quantity of the regulation, measured off-tape:
/// mean over fixed batches of the SPR value between current and snapshot
/// features.
pub fn structure_deviation(
    encoder: &EncoderParams,
    snapshot: &FrozenSnapshot,
    inputs: &Tensor,
    batch_size: usize,
) -> Result<f64> {
    let n = inputs.rows();
    let mut total = 0.0;
    let mut batches = 0usize;
    let mut start = 0usize;
    while start < n {
        let end = usize::min(start + batch_size, n);
        let rows: Vec<Vec<f64>> = (start..end).map(|i| inputs.row(i).to_vec()).collect();
        let chunk = Tensor::from_rows(&rows)?;
        let cur = encoder.encode(&chunk)?;
        let froz = snapshot.encoder().encode(&chunk)?;
        let b = cur.rows();

        let cos_cur = cur.normalize_rows()?.matmul(&cur.normalize_rows()?.transposed()?)?;
        let cos_froz = froz.normalize_rows()?.matmul(&froz.normalize_rows()?.transposed()?)?;
        let d_cur = cur.pairwise_dist(&cur)?;
        let d_froz = froz.pairwise_dist(&froz)?;
        let mut s = 0.0;
        for idx in 0..b * b {
            let dc = cos_cur.data()[idx] - cos_froz.data()[idx];
            let dd = d_cur.data()[idx] - d_froz.data()[idx];
            s += dc * dc + dd * dd;
        }
        total += s / (b * b) as f64;
        batches += 1;
        start = end;
    }
    Ok(total / batches as f64)
}
