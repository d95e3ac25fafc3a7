//! Stage-1 losses: instance discrimination against the memory bank, the
//! prototypical contrastive term over the unified structure, the sigmoid
//! schedule that phases the prototype terms in, and the semantic-enhanced
//! loss that pulls features toward all prototypes with softmax weights.
//!
//! Temperature-scaled inner products use L2-normalized operands (bounded
//! logits); Euclidean terms use raw features. Bank entries and prototypes
//! are constants in every gradient.

use crate::diffkit::{Tape, Tensor, Var};
use crate::error::{Error, Result};

pub const DEFAULT_TAU: f64 = 0.07;
pub const DEFAULT_BATCH: usize = 64;

#[derive(Clone, Debug)]
pub struct LossConfig {
    pub tau: f64,
    pub batch_size: usize,
    /// Let gradients flow through the semantic-enhanced loss weights instead
    /// of treating them as constants.
    pub sel_weight_gradient: bool,
    /// L2-normalize both operands of temperature-scaled inner products.
    pub normalize_dot: bool,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            tau: DEFAULT_TAU,
            batch_size: DEFAULT_BATCH,
            sel_weight_gradient: false,
            normalize_dot: true,
        }
    }
}

/// Everything a batch needs for the stage-1 losses of one domain.
pub struct BatchContext {
    /// Instance ids (bank row indices) of the batch, used in diagnostics.
    pub instance_ids: Vec<usize>,
    /// Fresh features f(x_i) on the tape, (B, d).
    pub features: Var,
    /// Corresponding bank entries m_i, constants, (B, d).
    pub bank_entries: Tensor,
    /// Unified prototypes for this domain, constants, (C, d).
    pub prototypes: Tensor,
    /// Per-instance unified cluster assignment, len B.
    pub assignments: Vec<usize>,
}

impl BatchContext {
    fn batch_len(&self, tape: &Tape) -> usize {
        tape.value(self.features).rows()
    }
}

/// Zero-norm rows are errors when logits are normalized; name the instance.
fn check_feature_norms(tape: &Tape, features: Var, ids: &[usize]) -> Result<()> {
    let f = tape.value(features);
    for i in 0..f.rows() {
        if f.row(i).iter().all(|&v| v == 0.0) {
            return Err(Error::ZeroNormFeature {
                instance: ids.get(i).copied().unwrap_or(i),
            });
        }
    }
    Ok(())
}

/// Scaled similarity logits between taped features and constant rows:
/// (f_i . c_j) / tau, with both sides normalized when configured.
fn similarity_logits(
    tape: &mut Tape,
    features: Var,
    ids: &[usize],
    constants: &Tensor,
    cfg: &LossConfig,
) -> Result<Var> {
    let lhs = if cfg.normalize_dot {
        check_feature_norms(tape, features, ids)?;
        tape.normalize_rows(features)?
    } else {
        features
    };
    let rhs = if cfg.normalize_dot {
        constants.normalize_rows().map_err(|e| match e {
            Error::ZeroNormRow { row } => Error::ZeroNormFeature {
                instance: ids.get(row).copied().unwrap_or(row),
            },
            other => other,
        })?
    } else {
        constants.clone()
    };
    let rhs_t = rhs.transposed()?;
    let rl = tape.leaf(rhs_t);
    let prod = tape.matmul(lhs, rl)?;
    Ok(tape.scale(prod, 1.0 / cfg.tau))
}

/// Instance discrimination: each instance's own bank entry is the positive,
/// the batch's bank entries are the negatives.
///
/// sum_i -log( exp(<f_i, m_i>/tau) / sum_{j<=B} exp(<f_i, m_j>/tau) )
pub fn loss_ince(tape: &mut Tape, ctx: &BatchContext, cfg: &LossConfig) -> Result<Var> {
    let b = ctx.batch_len(tape);
    if ctx.bank_entries.rows() != b {
        return Err(Error::shape_mismatch(
            "loss_ince",
            &[b],
            &[ctx.bank_entries.rows()],
        ));
    }
    let logits = similarity_logits(tape, ctx.features, &ctx.instance_ids, &ctx.bank_entries, cfg)?;
    let den = tape.logsumexp_rows(logits, None)?;
    let mut diag = vec![false; b * b];
    for i in 0..b {
        diag[i * b + i] = true;
    }
    let num = tape.logsumexp_rows(logits, Some(diag))?;
    let per_instance = tape.sub(den, num)?;
    Ok(tape.sum(per_instance))
}

/// Prototypical contrast against the unified structure.
///
/// sum_i -log( exp(<f_i, p_{c_i}>/tau) / sum_{c<=C} exp(<f_i, p_c>/tau) )
pub fn loss_pnce(tape: &mut Tape, ctx: &BatchContext, cfg: &LossConfig) -> Result<Var> {
    let b = ctx.batch_len(tape);
    let c = ctx.prototypes.rows();
    if ctx.assignments.len() != b {
        return Err(Error::shape_mismatch("loss_pnce", &[b], &[ctx.assignments.len()]));
    }
    for (i, &a) in ctx.assignments.iter().enumerate() {
        if a >= c {
            return Err(Error::IndexOutOfRange {
                what: format!("unified assignment of instance {}", ctx.instance_ids[i]),
                index: a,
                len: c,
            });
        }
    }
    let logits = similarity_logits(tape, ctx.features, &ctx.instance_ids, &ctx.prototypes, cfg)?;
    let den = tape.logsumexp_rows(logits, None)?;
    let mut mask = vec![false; b * c];
    for (i, &a) in ctx.assignments.iter().enumerate() {
        mask[i * c + a] = true;
    }
    let num = tape.logsumexp_rows(logits, Some(mask))?;
    let per_instance = tape.sub(den, num)?;
    Ok(tape.sum(per_instance))
}

/// Schedule coefficient: alpha = 1 / (1 + exp(0.5 E - e)).
pub fn alpha(e: usize, total_epochs: usize) -> f64 {
    let x = e as f64 - 0.5 * total_epochs as f64;
    crate::diffkit::Tensor::scalar(x).sigmoid().data()[0]
}

/// Semantic-enhanced loss: softmax-weighted Euclidean pull toward all
/// unified prototypes.
///
/// (1/B) sum_i sum_c w_ic d(f_i, p_c), w = row-softmax of <f_i, p_c>/tau.
/// Weights are constants unless `sel_weight_gradient` is set.
pub fn loss_sel(tape: &mut Tape, ctx: &BatchContext, cfg: &LossConfig) -> Result<Var> {
    let b = ctx.batch_len(tape);
    if ctx.prototypes.rows() == 0 {
        return Err(Error::Empty {
            what: "unified prototype set".to_string(),
        });
    }
    let weights = if cfg.sel_weight_gradient {
        let logits = similarity_logits(tape, ctx.features, &ctx.instance_ids, &ctx.prototypes, cfg)?;
        tape.softmax_rows(logits)?
    } else {
        // Stop-gradient weights: evaluate the same softmax off-tape.
        let f = tape.value(ctx.features).clone();
        let lhs = if cfg.normalize_dot {
            check_feature_norms(tape, ctx.features, &ctx.instance_ids)?;
            f.normalize_rows()?
        } else {
            f
        };
        let rhs = if cfg.normalize_dot {
            ctx.prototypes.normalize_rows()?
        } else {
            ctx.prototypes.clone()
        };
        let logits = lhs.matmul(&rhs.transposed()?)?.scale(1.0 / cfg.tau);
        tape.leaf(logits.softmax_rows()?)
    };
    let protos = tape.leaf(ctx.prototypes.clone());
    let dists = tape.pairwise_dist(ctx.features, protos)?;
    let weighted = tape.mul(weights, dists)?;
    let total = tape.sum(weighted);
    Ok(tape.scale(total, 1.0 / b as f64))
}

/// Component handles and values of one IDSE evaluation.
pub struct IdseParts {
    pub alpha: f64,
    pub ince_a: Var,
    pub pnce_a: Option<Var>,
    pub sel_a: Option<Var>,
    pub ince_b: Var,
    pub pnce_b: Option<Var>,
    pub sel_b: Option<Var>,
    pub total: Var,
}

/// Combined stage-1 objective:
/// (INCE_A + alpha PNCE_A) + (INCE_B + alpha PNCE_B) + alpha (SEL_A + SEL_B).
pub fn loss_idse(
    tape: &mut Tape,
    ctx_a: &BatchContext,
    ctx_b: &BatchContext,
    cfg: &LossConfig,
    e: usize,
    total_epochs: usize,
) -> Result<IdseParts> {
    loss_idse_with(tape, ctx_a, ctx_b, cfg, e, total_epochs, &IdseToggles::default())
}

/// Ablation switches used by the trainer; the defaults reproduce the full
/// objective.
#[derive(Clone, Copy, Debug, Default)]
pub struct IdseToggles {
    pub disable_sel: bool,
    /// Instance discrimination only: drop the prototype terms entirely.
    pub instance_only: bool,
}

pub fn loss_idse_with(
    tape: &mut Tape,
    ctx_a: &BatchContext,
    ctx_b: &BatchContext,
    cfg: &LossConfig,
    e: usize,
    total_epochs: usize,
    toggles: &IdseToggles,
) -> Result<IdseParts> {
    let a = alpha(e, total_epochs);
    let ince_a = loss_ince(tape, ctx_a, cfg)?;
    let ince_b = loss_ince(tape, ctx_b, cfg)?;
    let mut total = tape.add(ince_a, ince_b)?;

    let mut pnce_a = None;
    let mut pnce_b = None;
    let mut sel_a = None;
    let mut sel_b = None;
    if !toggles.instance_only {
        let pa = loss_pnce(tape, ctx_a, cfg)?;
        let pb = loss_pnce(tape, ctx_b, cfg)?;
        let scaled_pa = tape.scale(pa, a);
        let scaled_pb = tape.scale(pb, a);
        total = tape.add(total, scaled_pa)?;
        total = tape.add(total, scaled_pb)?;
        pnce_a = Some(pa);
        pnce_b = Some(pb);
        if !toggles.disable_sel {
            let sa = loss_sel(tape, ctx_a, cfg)?;
            let sb = loss_sel(tape, ctx_b, cfg)?;
            let sel_sum = tape.add(sa, sb)?;
            let scaled_sel = tape.scale(sel_sum, a);
            total = tape.add(total, scaled_sel)?;
            sel_a = Some(sa);
            sel_b = Some(sb);
        }
    }

    Ok(IdseParts {
        alpha: a,
        ince_a,
        pnce_a,
        sel_a,
        ince_b,
        pnce_b,
        sel_b,
        total,
    })
}
