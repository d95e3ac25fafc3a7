//! Two-stage training orchestration: per-epoch prototype-structure refresh,
//! batch scheduling, optimizer steps, memory-bank updates, snapshotting, and
//! the adversarial alternation of stage 2. Deterministic for a fixed seed.

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::clustering::{estimate_k_elbow_with, kmeans};
use crate::diffkit::{Tape, Tensor, Var};
use crate::encoder::{hex_digest, DomainClassifierParams, EncoderParams, OptimizerState};
use crate::error::{Error, Result};
use crate::membank::{Domain, MemoryBank};
use crate::protostruct::{
    build_unified, build_union_no_merge, translate, PrototypeSet, UnifiedPrototypeStructure,
};
use crate::rng::{shuffled_indices, stream, substream};
use crate::stage1::{loss_idse_with, BatchContext, IdseToggles, LossConfig};
use crate::stage2::{
    domain_bce, loss_snnm, loss_spr, snnm_classify, structure_deviation, FrozenSnapshot,
    MatchResult, MatchScore, SnnmBatch,
};

fn default_batch() -> usize {
    64
}
fn default_lr0() -> f64 {
    2e-4
}
fn default_momentum() -> f64 {
    0.9
}
fn default_tau() -> f64 {
    0.07
}
fn default_beta() -> f64 {
    0.99
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EncoderConfig {
    pub hidden: Vec<usize>,
    pub feature_dim: usize,
    pub classifier_hidden: usize,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            hidden: vec![128, 128],
            feature_dim: 64,
            classifier_hidden: 64,
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Stage1Config {
    pub epochs: usize,
    pub k_min: usize,
    /// Elbow upper bound; defaults to min(20, N/10) per domain.
    pub k_max: Option<usize>,
    pub kmeans_restarts: usize,
    pub disable_prototype_merging: bool,
    pub disable_sel: bool,
    /// Train with the instance-discrimination term only.
    pub instance_discrimination_only: bool,
    pub sel_weight_gradient: bool,
    pub normalize_dot: bool,
}

impl Default for Stage1Config {
    fn default() -> Self {
        Self {
            epochs: 30,
            k_min: 2,
            k_max: None,
            kmeans_restarts: 8,
            disable_prototype_merging: false,
            disable_sel: false,
            instance_discrimination_only: false,
            sel_weight_gradient: false,
            normalize_dot: true,
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Stage2Config {
    pub epochs: usize,
    /// Drop the semantic-preserving regulation (plain adversarial training).
    pub plain_adversarial: bool,
    /// Replace the product-score matcher with a plain cosine matcher.
    pub cosine_only_matcher: bool,
}

impl Default for Stage2Config {
    fn default() -> Self {
        Self {
            epochs: 20,
            plain_adversarial: false,
            cosine_only_matcher: false,
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub seed: u64,
    pub batch_size: usize,
    pub lr0: f64,
    pub momentum: f64,
    pub tau: f64,
    pub beta: f64,
    pub encoder: EncoderConfig,
    pub stage1: Stage1Config,
    pub stage2: Stage2Config,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            batch_size: default_batch(),
            lr0: default_lr0(),
            momentum: default_momentum(),
            tau: default_tau(),
            beta: default_beta(),
            encoder: EncoderConfig::default(),
            stage1: Stage1Config::default(),
            stage2: Stage2Config::default(),
        }
    }
}

impl TrainConfig {
    pub fn loss_config(&self) -> LossConfig {
        LossConfig {
            tau: self.tau,
            batch_size: self.batch_size,
            sel_weight_gradient: self.stage1.sel_weight_gradient,
            normalize_dot: self.stage1.normalize_dot,
        }
    }

    pub fn match_score(&self) -> MatchScore {
        if self.stage2.cosine_only_matcher {
            MatchScore::CosineOnly
        } else {
            MatchScore::CosTimesDist
        }
    }

    /// Hex digest of the canonical JSON form.
    pub fn config_hash(&self) -> String {
        let json = serde_json::to_string(self).expect("config serialize");
        let mut h = Sha256::new();
        h.update(json.as_bytes());
        hex_digest(&h.finalize())
    }

    pub fn validate(&self) -> Result<()> {
        fn positive(v: f64, key: &str) -> Result<()> {
            if v <= 0.0 {
                return Err(Error::Config {
                    key: key.to_string(),
                    msg: format!("must be positive, got {v}"),
                });
            }
            Ok(())
        }
        if self.batch_size == 0 {
            return Err(Error::Config {
                key: "batch_size".to_string(),
                msg: "must be at least 1".to_string(),
            });
        }
        positive(self.lr0, "lr0")?;
        positive(self.tau, "tau")?;
        if !(0.0..=1.0).contains(&self.beta) {
            return Err(Error::Config {
                key: "beta".to_string(),
                msg: format!("must lie in [0, 1], got {}", self.beta),
            });
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::Config {
                key: "momentum".to_string(),
                msg: format!("must lie in [0, 1), got {}", self.momentum),
            });
        }
        if self.encoder.feature_dim == 0 || self.encoder.classifier_hidden == 0 {
            return Err(Error::Config {
                key: "encoder".to_string(),
                msg: "feature_dim and classifier_hidden must be positive".to_string(),
            });
        }
        Ok(())
    }
}

/// Shuffled batch index lists for one epoch of one domain; every instance
/// appears exactly once, the last partial batch is kept.
pub struct EpochPlan {
    pub batches: Vec<Vec<usize>>,
}

impl EpochPlan {
    pub fn new(n: usize, batch_size: usize, seed: u64, stage: u64, epoch: usize, domain: Domain) -> Self {
        let tag = match domain {
            Domain::A => 0u64,
            Domain::B => 1u64,
        };
        let mut rng = substream(seed, "shuffle", &[stage, epoch as u64, tag]);
        let order = shuffled_indices(n, &mut rng);
        let batches = order.chunks(batch_size).map(|c| c.to_vec()).collect();
        Self { batches }
    }
}

/// Per-epoch clustering artifacts of both domains.
pub struct StructureRefresh {
    pub proto_a: Vec<Vec<f64>>,
    pub proto_b: Vec<Vec<f64>>,
    pub structure_a: UnifiedPrototypeStructure,
    pub structure_b: UnifiedPrototypeStructure,
    /// Per-instance unified assignment in the own domain's structure.
    pub assign_a: Vec<usize>,
    pub assign_b: Vec<usize>,
}

impl StructureRefresh {
    pub fn tensor_a(&self) -> Result<Tensor> {
        self.structure_a.as_tensor()
    }

    pub fn tensor_b(&self) -> Result<Tensor> {
        self.structure_b.as_tensor()
    }
}

fn default_k_max(n: usize) -> usize {
    usize::min(20, n / 10)
}

fn estimate_k(points: &Tensor, cfg: &Stage1Config, seed: u64) -> Result<usize> {
    let n = points.rows();
    let k_min = cfg.k_min.max(2).min(n.max(1));
    let k_max = cfg.k_max.unwrap_or_else(|| default_k_max(n)).min(n);
    if k_max <= k_min {
        return Ok(k_min.min(n).max(1));
    }
    estimate_k_elbow_with(points, k_min, k_max, seed, cfg.kmeans_restarts)
}

/// Cluster both banks, translate both ways, and build both unified
/// structures plus per-instance unified assignments.
pub fn refresh_structures(
    cfg: &TrainConfig,
    bank_a: &MemoryBank,
    bank_b: &MemoryBank,
    stage: u64,
    epoch: usize,
) -> Result<StructureRefresh> {
    let s1 = &cfg.stage1;
    let seed_a = substream_seed(cfg.seed, "cluster", stage, epoch, 0);
    let seed_b = substream_seed(cfg.seed, "cluster", stage, epoch, 1);

    let k_a = estimate_k(bank_a.entries(), s1, seed_a)?;
    let k_b = estimate_k(bank_b.entries(), s1, seed_b)?;
    let clus_a = kmeans(bank_a.entries(), k_a, seed_a.wrapping_add(101), s1.kmeans_restarts)?;
    let clus_b = kmeans(bank_b.entries(), k_b, seed_b.wrapping_add(101), s1.kmeans_restarts)?;

    let set_a = PrototypeSet::from_centers(&clus_a.centers, Domain::A);
    let set_b = PrototypeSet::from_centers(&clus_b.centers, Domain::B);
    let mean_a = bank_a.mean();
    let mean_b = bank_b.mean();
    let b_to_a = translate(&set_b, &mean_b, &mean_a);
    let a_to_b = translate(&set_a, &mean_a, &mean_b);

    let (structure_a, structure_b) = if s1.disable_prototype_merging {
        (
            build_union_no_merge(&set_a, &b_to_a),
            build_union_no_merge(&set_b, &a_to_b),
        )
    } else {
        (build_unified(&set_a, &b_to_a), build_unified(&set_b, &a_to_b))
    };

    let assign_a = clus_a
        .assignments
        .iter()
        .map(|&c| structure_a.unified_of_dst(c))
        .collect::<Result<Vec<_>>>()?;
    let assign_b = clus_b
        .assignments
        .iter()
        .map(|&c| structure_b.unified_of_dst(c))
        .collect::<Result<Vec<_>>>()?;

    Ok(StructureRefresh {
        proto_a: set_a.prototypes,
        proto_b: set_b.prototypes,
        structure_a,
        structure_b,
        assign_a,
        assign_b,
    })
}

fn substream_seed(seed: u64, name: &str, stage: u64, epoch: usize, domain: u64) -> u64 {
    use rand::Rng;
    let mut rng = substream(seed, name, &[stage, epoch as u64, domain]);
    rng.gen()
}

#[derive(Clone, Debug, Serialize)]
pub struct Stage1EpochLog {
    pub epoch: usize,
    pub alpha: f64,
    pub lr: f64,
    pub ince_a: f64,
    pub pnce_a: Option<f64>,
    pub sel_a: Option<f64>,
    pub ince_b: f64,
    pub pnce_b: Option<f64>,
    pub sel_b: Option<f64>,
    pub total: f64,
}

#[derive(Clone, Debug, Serialize)]
pub struct Stage2EpochLog {
    pub epoch: usize,
    pub lr: f64,
    pub dal: f64,
    pub spr_a: Option<f64>,
    pub spr_b: Option<f64>,
    pub snnm_a: f64,
    pub snnm_b: f64,
    pub total: f64,
}

#[derive(Clone, Debug, Serialize)]
pub struct AuditRow {
    pub epoch: usize,
    pub direction: &'static str,
    pub query_id: usize,
    pub own_prototype: usize,
    pub matched_instance: usize,
    pub translated_unified: usize,
    pub matched_nearest_unified: usize,
    pub reliable: bool,
    pub match_score: f64,
}

pub struct Stage1Artifacts {
    pub encoder: EncoderParams,
    pub bank_a: MemoryBank,
    pub bank_b: MemoryBank,
    pub structure_a: UnifiedPrototypeStructure,
    pub structure_b: UnifiedPrototypeStructure,
    pub optimizer: OptimizerState,
    pub steps_per_epoch: usize,
    pub total_steps: usize,
    pub epoch_logs: Vec<Stage1EpochLog>,
    pub lr_trace: Vec<f64>,
}

pub struct Stage2Artifacts {
    pub encoder: EncoderParams,
    pub classifier: DomainClassifierParams,
    pub snapshot: FrozenSnapshot,
    pub bank_a: MemoryBank,
    pub bank_b: MemoryBank,
    pub structure_a: UnifiedPrototypeStructure,
    pub structure_b: UnifiedPrototypeStructure,
    pub epoch_logs: Vec<Stage2EpochLog>,
    pub audit: Vec<AuditRow>,
    /// Pairwise-structure deviation against the snapshot at end of training.
    pub structure_deviation_a: f64,
    pub structure_deviation_b: f64,
    pub lr_trace: Vec<f64>,
}

fn gather_rows(src: &Tensor, idx: &[usize]) -> Result<Tensor> {
    let rows: Vec<Vec<f64>> = idx.iter().map(|&i| src.row(i).to_vec()).collect();
    Tensor::from_rows(&rows)
}

fn ensure_finite(value: f64, term: &str, epoch: usize, batch: usize) -> Result<f64> {
    if !value.is_finite() {
        return Err(Error::NonFiniteLoss {
            what: "loss".to_string(),
            term: term.to_string(),
            epoch,
            batch,
        });
    }
    Ok(value)
}

fn steps_per_epoch(n_a: usize, n_b: usize, batch: usize) -> usize {
    usize::max(n_a.div_ceil(batch), n_b.div_ceil(batch))
}

struct MeanAcc {
    sum: f64,
    count: usize,
}

impl MeanAcc {
    fn new() -> Self {
        Self { sum: 0.0, count: 0 }
    }

    fn push(&mut self, v: f64) {
        self.sum += v;
        self.count += 1;
    }

    fn mean(&self) -> f64 {
        if self.count == 0 {
            0.0
        } else {
            self.sum / self.count as f64
        }
    }

    fn mean_opt(&self) -> Option<f64> {
        if self.count == 0 {
            None
        } else {
            Some(self.sum / self.count as f64)
        }
    }
}

/// Stage 1: instance-prototype-mixed contrastive training with per-epoch
/// structure refresh and momentum bank updates.
pub fn run_stage1(
    cfg: &TrainConfig,
    features_a: &Tensor,
    features_b: &Tensor,
) -> Result<Stage1Artifacts> {
    cfg.validate()?;
    if features_a.rows() == 0 || features_b.rows() == 0 {
        return Err(Error::Empty {
            what: "training domain".to_string(),
        });
    }
    if features_a.cols() != features_b.cols() {
        return Err(Error::shape_mismatch(
            "run_stage1",
            features_a.shape(),
            features_b.shape(),
        ));
    }
    let d_in = features_a.cols();
    let mut init_rng = stream(cfg.seed, "init");
    let mut encoder = EncoderParams::init(
        d_in,
        &cfg.encoder.hidden,
        cfg.encoder.feature_dim,
        &mut init_rng,
    );
    let mut bank_a = MemoryBank::init(&encoder, features_a, cfg.beta, Domain::A)?;
    let mut bank_b = MemoryBank::init(&encoder, features_b, cfg.beta, Domain::B)?;

    let spe = steps_per_epoch(features_a.rows(), features_b.rows(), cfg.batch_size);
    let total_steps = (cfg.stage1.epochs + cfg.stage2.epochs) * spe;
    let mut optimizer = OptimizerState::new(cfg.lr0, cfg.momentum, total_steps, &encoder.params());

    let loss_cfg = cfg.loss_config();
    let toggles = IdseToggles {
        disable_sel: cfg.stage1.disable_sel,
        instance_only: cfg.stage1.instance_discrimination_only,
    };

    let mut epoch_logs = Vec::with_capacity(cfg.stage1.epochs);
    let mut lr_trace = Vec::new();
    let mut last_refresh: Option<StructureRefresh> = None;

    for epoch in 1..=cfg.stage1.epochs {
        let refresh = if toggles.instance_only {
            None
        } else {
            Some(refresh_structures(cfg, &bank_a, &bank_b, 1, epoch)?)
        };
        let plan_a = EpochPlan::new(features_a.rows(), cfg.batch_size, cfg.seed, 1, epoch, Domain::A);
        let plan_b = EpochPlan::new(features_b.rows(), cfg.batch_size, cfg.seed, 1, epoch, Domain::B);

        let epoch_lr = optimizer.current_lr();
        let mut acc = [
            MeanAcc::new(), // ince_a
            MeanAcc::new(), // pnce_a
            MeanAcc::new(), // sel_a
            MeanAcc::new(), // ince_b
            MeanAcc::new(), // pnce_b
            MeanAcc::new(), // sel_b
            MeanAcc::new(), // total
        ];
        let mut alpha_logged = crate::stage1::alpha(epoch, cfg.stage1.epochs.max(1));

        for step in 0..spe {
            lr_trace.push(optimizer.current_lr());
            let batch_a = plan_a.batches.get(step);
            let batch_b = plan_b.batches.get(step);
            let mut tape = Tape::new();

            // One parameter leaf set per tape; both domains route through it
            // so their gradients accumulate.
            let mut fa: Option<(Var, &Vec<usize>)> = None;
            let mut fb: Option<(Var, &Vec<usize>)> = None;
            let mut param_vars: Option<Vec<Var>> = None;
            if let Some(idx) = batch_a {
                let x = tape.leaf(gather_rows(features_a, idx)?);
                let (f, p) = encoder.encode_tape(&mut tape, x)?;
                fa = Some((f, idx));
                param_vars = Some(p);
            }
            if let Some(idx) = batch_b {
                let x = tape.leaf(gather_rows(features_b, idx)?);
                let f = match &param_vars {
                    Some(p) => encoder.encode_with_vars(&mut tape, x, p)?,
                    None => {
                        let (f, p) = encoder.encode_tape(&mut tape, x)?;
                        param_vars = Some(p);
                        f
                    }
                };
                fb = Some((f, idx));
            }
            let Some(param_vars) = param_vars else { continue };

            let make_ctx = |f: Var, idx: &Vec<usize>, bank: &MemoryBank, refresh: Option<(&UnifiedPrototypeStructure, &Vec<usize>)>| -> Result<BatchContext> {
                let bank_entries = gather_rows(bank.entries(), idx)?;
                let (prototypes, assignments) = match refresh {
                    Some((s, assign)) => (
                        s.as_tensor()?,
                        idx.iter().map(|&i| assign[i]).collect::<Vec<_>>(),
                    ),
                    None => (
                        // Placeholder prototypes are never read by the
                        // instance-only path.
                        Tensor::zeros(vec![1, bank.dim()]),
                        vec![0; idx.len()],
                    ),
                };
                Ok(BatchContext {
                    instance_ids: idx.clone(),
                    features: f,
                    bank_entries,
                    prototypes,
                    assignments,
                })
            };

            let refresh_a = refresh
                .as_ref()
                .map(|r| (&r.structure_a, &r.assign_a));
            let refresh_b = refresh
                .as_ref()
                .map(|r| (&r.structure_b, &r.assign_b));

            let total_var;
            match (fa, fb) {
                (Some((f_a, idx_a)), Some((f_b, idx_b))) => {
                    let ctx_a = make_ctx(f_a, idx_a, &bank_a, refresh_a)?;
                    let ctx_b = make_ctx(f_b, idx_b, &bank_b, refresh_b)?;
                    let parts = loss_idse_with(
                        &mut tape,
                        &ctx_a,
                        &ctx_b,
                        &loss_cfg,
                        epoch,
                        cfg.stage1.epochs.max(1),
                        &toggles,
                    )?;
                    alpha_logged = parts.alpha;
                    acc[0].push(ensure_finite(tape.value(parts.ince_a).item(), "L_INCE^A", epoch, step)?);
                    acc[3].push(ensure_finite(tape.value(parts.ince_b).item(), "L_INCE^B", epoch, step)?);
                    if let Some(v) = parts.pnce_a {
                        acc[1].push(ensure_finite(tape.value(v).item(), "L_PNCE^A", epoch, step)?);
                    }
                    if let Some(v) = parts.pnce_b {
                        acc[4].push(ensure_finite(tape.value(v).item(), "L_PNCE^B", epoch, step)?);
                    }
                    if let Some(v) = parts.sel_a {
                        acc[2].push(ensure_finite(tape.value(v).item(), "L_SEL^A", epoch, step)?);
                    }
                    if let Some(v) = parts.sel_b {
                        acc[5].push(ensure_finite(tape.value(v).item(), "L_SEL^B", epoch, step)?);
                    }
                    acc[6].push(ensure_finite(tape.value(parts.total).item(), "L_IDSE", epoch, step)?);
                    total_var = parts.total;
                }
                (Some((f, idx)), None) => {
                    let ctx = make_ctx(f, idx, &bank_a, refresh_a)?;
                    let (v, parts) = single_domain_idse(&mut tape, &ctx, &loss_cfg, epoch, cfg, &toggles)?;
                    acc[0].push(ensure_finite(parts.0, "L_INCE^A", epoch, step)?);
                    if let Some(p) = parts.1 {
                        acc[1].push(p);
                    }
                    if let Some(s) = parts.2 {
                        acc[2].push(s);
                    }
                    acc[6].push(tape.value(v).item());
                    total_var = v;
                }
                (None, Some((f, idx))) => {
                    let ctx = make_ctx(f, idx, &bank_b, refresh_b)?;
                    let (v, parts) = single_domain_idse(&mut tape, &ctx, &loss_cfg, epoch, cfg, &toggles)?;
                    acc[3].push(ensure_finite(parts.0, "L_INCE^B", epoch, step)?);
                    if let Some(p) = parts.1 {
                        acc[4].push(p);
                    }
                    if let Some(s) = parts.2 {
                        acc[5].push(s);
                    }
                    acc[6].push(tape.value(v).item());
                    total_var = v;
                }
                (None, None) => continue,
            }

            let grads = tape.backward(total_var)?;
            let shapes: Vec<Vec<usize>> = encoder.params().iter().map(|p| p.shape().to_vec()).collect();
            let grad_tensors: Vec<Tensor> = param_vars
                .iter()
                .zip(shapes.iter())
                .map(|(v, s)| grads.take(*v, s))
                .collect();
            optimizer.sgd_step(&mut encoder.params_mut(), &grad_tensors)?;

            // Momentum bank refresh with the pre-step forward features.
            if let Some((f, idx)) = fa {
                let vals = tape.value(f).clone();
                for (r, &i) in idx.iter().enumerate() {
                    bank_a.momentum_update(i, vals.row(r))?;
                }
            }
            if let Some((f, idx)) = fb {
                let vals = tape.value(f).clone();
                for (r, &i) in idx.iter().enumerate() {
                    bank_b.momentum_update(i, vals.row(r))?;
                }
            }
        }

        epoch_logs.push(Stage1EpochLog {
            epoch,
            alpha: alpha_logged,
            lr: epoch_lr,
            ince_a: acc[0].mean(),
            pnce_a: acc[1].mean_opt(),
            sel_a: acc[2].mean_opt(),
            ince_b: acc[3].mean(),
            pnce_b: acc[4].mean_opt(),
            sel_b: acc[5].mean_opt(),
            total: acc[6].mean(),
        });
        log::info!(
            "stage1 epoch {epoch}/{}: total {:.4}, alpha {:.4}",
            cfg.stage1.epochs,
            epoch_logs.last().unwrap().total,
            alpha_logged
        );
        if let Some(r) = refresh {
            last_refresh = Some(r);
        }
    }

    // Downstream consumers always need structures, even for zero epochs or
    // instance-only training.
    let final_refresh = match last_refresh {
        Some(r) => r,
        None => refresh_structures(cfg, &bank_a, &bank_b, 1, cfg.stage1.epochs + 1)?,
    };

    Ok(Stage1Artifacts {
        encoder,
        bank_a,
        bank_b,
        structure_a: final_refresh.structure_a,
        structure_b: final_refresh.structure_b,
        optimizer,
        steps_per_epoch: spe,
        total_steps,
        epoch_logs,
        lr_trace,
    })
}

fn single_domain_idse(
    tape: &mut Tape,
    ctx: &BatchContext,
    loss_cfg: &LossConfig,
    epoch: usize,
    cfg: &TrainConfig,
    toggles: &IdseToggles,
) -> Result<(Var, (f64, Option<f64>, Option<f64>))> {
    let a = crate::stage1::alpha(epoch, cfg.stage1.epochs.max(1));
    let ince = crate::stage1::loss_ince(tape, ctx, loss_cfg)?;
    let mut total = ince;
    let mut pnce_val = None;
    let mut sel_val = None;
    if !toggles.instance_only {
        let pnce = crate::stage1::loss_pnce(tape, ctx, loss_cfg)?;
        let sp = tape.scale(pnce, a);
        total = tape.add(total, sp)?;
        pnce_val = Some(tape.value(pnce).item());
        if !toggles.disable_sel {
            let sel = crate::stage1::loss_sel(tape, ctx, loss_cfg)?;
            let ss = tape.scale(sel, a);
            total = tape.add(total, ss)?;
            sel_val = Some(tape.value(sel).item());
        }
    }
    Ok((total, (tape.value(ince).item(), pnce_val, sel_val)))
}

/// Stage 2: freeze the stage-1 encoder, then alternate domain-classifier
/// steps with encoder steps that fool the classifier while preserving
/// pairwise structure and matching cross-domain neighbors.
pub fn run_stage2(
    cfg: &TrainConfig,
    stage1: Stage1Artifacts,
    features_a: &Tensor,
    features_b: &Tensor,
) -> Result<Stage2Artifacts> {
    let Stage1Artifacts {
        mut encoder,
        mut bank_a,
        mut bank_b,
        structure_a,
        structure_b,
        optimizer: mut opt_theta,
        steps_per_epoch: spe,
        total_steps,
        ..
    } = stage1;

    let snapshot = FrozenSnapshot::freeze(&encoder);
    let mut clf_rng = stream(cfg.seed, "classifier-init");
    let mut classifier = DomainClassifierParams::init(
        cfg.encoder.feature_dim,
        cfg.encoder.classifier_hidden,
        &mut clf_rng,
    );
    let mut opt_omega = OptimizerState::with_start(
        cfg.lr0,
        cfg.momentum,
        total_steps,
        opt_theta.step,
        &classifier.params(),
    );

    let loss_cfg = cfg.loss_config();
    let score_rule = cfg.match_score();
    let mut epoch_logs = Vec::with_capacity(cfg.stage2.epochs);
    let mut audit: Vec<AuditRow> = Vec::new();
    let mut lr_trace = Vec::new();
    let mut structure_a = structure_a;
    let mut structure_b = structure_b;

    for epoch in 1..=cfg.stage2.epochs {
        let refresh = refresh_structures(cfg, &bank_a, &bank_b, 2, epoch)?;
        let plan_a = EpochPlan::new(features_a.rows(), cfg.batch_size, cfg.seed, 2, epoch, Domain::A);
        let plan_b = EpochPlan::new(features_b.rows(), cfg.batch_size, cfg.seed, 2, epoch, Domain::B);
        let unified_a = refresh.tensor_a()?;
        let unified_b = refresh.tensor_b()?;

        let epoch_lr = opt_theta.current_lr();
        let mut acc_dal = MeanAcc::new();
        let mut acc_spr_a = MeanAcc::new();
        let mut acc_spr_b = MeanAcc::new();
        let mut acc_snnm_a = MeanAcc::new();
        let mut acc_snnm_b = MeanAcc::new();
        let mut acc_total = MeanAcc::new();

        for step in 0..spe {
            lr_trace.push(opt_theta.current_lr());
            let batch_a = plan_a.batches.get(step);
            let batch_b = plan_b.batches.get(step);

            let input_a = batch_a.map(|idx| gather_rows(features_a, idx)).transpose()?;
            let input_b = batch_b.map(|idx| gather_rows(features_b, idx)).transpose()?;

            // Classifier step: minimize the adversarial cross-entropy on
            // current (constant) features.
            if let (Some(xa), Some(xb)) = (&input_a, &input_b) {
                let plain_a = encoder.encode(xa)?;
                let plain_b = encoder.encode(xb)?;
                let joint = plain_a.concat_rows(&plain_b)?;
                let mut labels = vec![1.0; plain_a.rows()];
                labels.extend(std::iter::repeat(0.0).take(plain_b.rows()));

                let mut tape = Tape::new();
                let features = tape.leaf(joint);
                let (probs, clf_vars) = classifier.classify_tape(&mut tape, features)?;
                let dal = domain_bce(&mut tape, probs, &labels)?;
                ensure_finite(tape.value(dal).item(), "L_DAL (classifier step)", epoch, step)?;
                let grads = tape.backward(dal)?;
                let shapes: Vec<Vec<usize>> =
                    classifier.params().iter().map(|p| p.shape().to_vec()).collect();
                let gt: Vec<Tensor> = clf_vars
                    .iter()
                    .zip(shapes.iter())
                    .map(|(v, s)| grads.take(*v, s))
                    .collect();
                opt_omega.sgd_step(&mut classifier.params_mut(), &gt)?;
            }

            // Encoder step: minimize -DAL + SPR + SNNM with the updated
            // classifier as a constant participant.
            let mut tape = Tape::new();
            let mut enc_vars: Option<Vec<Var>> = None;
            let mut f_a: Option<Var> = None;
            let mut f_b: Option<Var> = None;
            if let Some(xa) = &input_a {
                let x = tape.leaf(xa.clone());
                let (f, p) = encoder.encode_tape(&mut tape, x)?;
                f_a = Some(f);
                enc_vars = Some(p);
            }
            if let Some(xb) = &input_b {
                let x = tape.leaf(xb.clone());
                let f = match &enc_vars {
                    Some(p) => encoder.encode_with_vars(&mut tape, x, p)?,
                    None => {
                        let (f, p) = encoder.encode_tape(&mut tape, x)?;
                        enc_vars = Some(p);
                        f
                    }
                };
                f_b = Some(f);
            }
            let Some(enc_vars) = enc_vars else { continue };

            let mut objective: Option<Var> = None;
            let add_term = |tape: &mut Tape, term: Var, obj: &mut Option<Var>| -> Result<()> {
                *obj = Some(match obj.take() {
                    Some(o) => tape.add(o, term)?,
                    None => term,
                });
                Ok(())
            };

            // Adversarial term: the encoder maximizes the classifier loss.
            if let (Some(fa), Some(fb)) = (f_a, f_b) {
                let joint = tape.concat_rows(fa, fb)?;
                let mut labels = vec![1.0; tape.value(fa).rows()];
                labels.extend(std::iter::repeat(0.0).take(tape.value(fb).rows()));
                let (probs, _) = classifier.classify_tape(&mut tape, joint)?;
                let dal = domain_bce(&mut tape, probs, &labels)?;
                let dal_val = ensure_finite(tape.value(dal).item(), "L_DAL", epoch, step)?;
                acc_dal.push(dal_val);
                let neg = tape.scale(dal, -1.0);
                add_term(&mut tape, neg, &mut objective)?;
            }

            if !cfg.stage2.plain_adversarial {
                if let (Some(fa), Some(xa)) = (f_a, &input_a) {
                    let frozen = snapshot.encoder().encode(xa)?;
                    let spr = loss_spr(&mut tape, fa, &frozen)?;
                    acc_spr_a.push(ensure_finite(tape.value(spr).item(), "L_SPR^A", epoch, step)?);
                    add_term(&mut tape, spr, &mut objective)?;
                }
                if let (Some(fb), Some(xb)) = (f_b, &input_b) {
                    let frozen = snapshot.encoder().encode(xb)?;
                    let spr = loss_spr(&mut tape, fb, &frozen)?;
                    acc_spr_b.push(ensure_finite(tape.value(spr).item(), "L_SPR^B", epoch, step)?);
                    add_term(&mut tape, spr, &mut objective)?;
                }
            }

            // Switchable nearest-neighbor matched loss, both directions.
            if let (Some(fa), Some(idx_a)) = (f_a, batch_a) {
                let matches = classify_batch(
                    &tape, fa, idx_a, &refresh.proto_a, &refresh.structure_b, &bank_b, score_rule,
                )?;
                for m in &matches {
                    audit.push(audit_row(epoch, "A->B", m));
                }
                let batch = SnnmBatch {
                    features: fa,
                    matches,
                    other_prototypes: unified_b.clone(),
                    other_bank: bank_b.entries().clone(),
                };
                let snnm = loss_snnm(&mut tape, &batch, &loss_cfg)?;
                acc_snnm_a.push(ensure_finite(tape.value(snnm).item(), "L_SN2M^A", epoch, step)?);
                add_term(&mut tape, snnm, &mut objective)?;
            }
            if let (Some(fb), Some(idx_b)) = (f_b, batch_b) {
                let matches = classify_batch(
                    &tape, fb, idx_b, &refresh.proto_b, &refresh.structure_a, &bank_a, score_rule,
                )?;
                for m in &matches {
                    audit.push(audit_row(epoch, "B->A", m));
                }
                let batch = SnnmBatch {
                    features: fb,
                    matches,
                    other_prototypes: unified_a.clone(),
                    other_bank: bank_a.entries().clone(),
                };
                let snnm = loss_snnm(&mut tape, &batch, &loss_cfg)?;
                acc_snnm_b.push(ensure_finite(tape.value(snnm).item(), "L_SN2M^B", epoch, step)?);
                add_term(&mut tape, snnm, &mut objective)?;
            }

            let Some(objective) = objective else { continue };
            acc_total.push(tape.value(objective).item());
            let grads = tape.backward(objective)?;
            let shapes: Vec<Vec<usize>> = encoder.params().iter().map(|p| p.shape().to_vec()).collect();
            let gt: Vec<Tensor> = enc_vars
                .iter()
                .zip(shapes.iter())
                .map(|(v, s)| grads.take(*v, s))
                .collect();
            opt_theta.sgd_step(&mut encoder.params_mut(), &gt)?;

            if let (Some(f), Some(idx)) = (f_a, batch_a) {
                let vals = tape.value(f).clone();
                for (r, &i) in idx.iter().enumerate() {
                    bank_a.momentum_update(i, vals.row(r))?;
                }
            }
            if let (Some(f), Some(idx)) = (f_b, batch_b) {
                let vals = tape.value(f).clone();
                for (r, &i) in idx.iter().enumerate() {
                    bank_b.momentum_update(i, vals.row(r))?;
                }
            }
        }

        epoch_logs.push(Stage2EpochLog {
            epoch,
            lr: epoch_lr,
            dal: acc_dal.mean(),
            spr_a: if cfg.stage2.plain_adversarial { None } else { acc_spr_a.mean_opt() },
            spr_b: if cfg.stage2.plain_adversarial { None } else { acc_spr_b.mean_opt() },
            snnm_a: acc_snnm_a.mean(),
            snnm_b: acc_snnm_b.mean(),
            total: acc_total.mean(),
        });
        log::info!(
            "stage2 epoch {epoch}/{}: dal {:.4}, snnm {:.4}/{:.4}",
            cfg.stage2.epochs,
            acc_dal.mean(),
            acc_snnm_a.mean(),
            acc_snnm_b.mean()
        );

        structure_a = refresh.structure_a;
        structure_b = refresh.structure_b;
    }

    debug_assert!(snapshot.verify_hash());
    let dev_a = structure_deviation(&encoder, &snapshot, features_a, cfg.batch_size)?;
    let dev_b = structure_deviation(&encoder, &snapshot, features_b, cfg.batch_size)?;

    Ok(Stage2Artifacts {
        encoder,
        classifier,
        snapshot,
        bank_a,
        bank_b,
        structure_a,
        structure_b,
        epoch_logs,
        audit,
        structure_deviation_a: dev_a,
        structure_deviation_b: dev_b,
        lr_trace,
    })
}

fn classify_batch(
    tape: &Tape,
    features: Var,
    ids: &[usize],
    own_protos: &[Vec<f64>],
    other_structure: &UnifiedPrototypeStructure,
    other_bank: &MemoryBank,
    score_rule: MatchScore,
) -> Result<Vec<MatchResult>> {
    let vals = tape.value(features);
    let mut out = Vec::with_capacity(ids.len());
    for (r, &id) in ids.iter().enumerate() {
        out.push(snnm_classify(
            id,
            vals.row(r),
            own_protos,
            other_structure,
            other_bank.entries(),
            score_rule,
        )?);
    }
    Ok(out)
}

fn audit_row(epoch: usize, direction: &'static str, m: &MatchResult) -> AuditRow {
    AuditRow {
        epoch,
        direction,
        query_id: m.query_id,
        own_prototype: m.own_prototype,
        matched_instance: m.matched_instance,
        translated_unified: m.translated_unified,
        matched_nearest_unified: m.matched_nearest_unified,
        reliable: m.reliable,
        match_score: m.match_score,
    }
}

/// Write the stage-1 epoch log as CSV; columns for disabled components are
/// omitted.
pub fn write_stage1_log<W: std::io::Write>(w: &mut W, logs: &[Stage1EpochLog]) -> Result<()> {
    let has_pnce = logs.iter().any(|l| l.pnce_a.is_some() || l.pnce_b.is_some());
    let has_sel = logs.iter().any(|l| l.sel_a.is_some() || l.sel_b.is_some());
    write!(w, "epoch,alpha,lr,ince_a")?;
    if has_pnce {
        write!(w, ",pnce_a")?;
    }
    if has_sel {
        write!(w, ",sel_a")?;
    }
    write!(w, ",ince_b")?;
    if has_pnce {
        write!(w, ",pnce_b")?;
    }
    if has_sel {
        write!(w, ",sel_b")?;
    }
    writeln!(w, ",total")?;
    for l in logs {
        write!(w, "{},{},{},{}", l.epoch, l.alpha, l.lr, l.ince_a)?;
        if has_pnce {
            write!(w, ",{}", l.pnce_a.unwrap_or(f64::NAN))?;
        }
        if has_sel {
            write!(w, ",{}", l.sel_a.unwrap_or(f64::NAN))?;
        }
        write!(w, ",{}", l.ince_b)?;
        if has_pnce {
            write!(w, ",{}", l.pnce_b.unwrap_or(f64::NAN))?;
        }
        if has_sel {
            write!(w, ",{}", l.sel_b.unwrap_or(f64::NAN))?;
        }
        writeln!(w, ",{}", l.total)?;
    }
    Ok(())
}

pub fn write_stage2_log<W: std::io::Write>(w: &mut W, logs: &[Stage2EpochLog]) -> Result<()> {
    let has_spr = logs.iter().any(|l| l.spr_a.is_some() || l.spr_b.is_some());
    write!(w, "epoch,lr,dal")?;
    if has_spr {
        write!(w, ",spr_a,spr_b")?;
    }
    writeln!(w, ",snnm_a,snnm_b,total")?;
    for l in logs {
        write!(w, "{},{},{}", l.epoch, l.lr, l.dal)?;
        if has_spr {
            write!(w, ",{},{}", l.spr_a.unwrap_or(f64::NAN), l.spr_b.unwrap_or(f64::NAN))?;
        }
        writeln!(w, ",{},{},{}", l.snnm_a, l.snnm_b, l.total)?;
    }
    Ok(())
}

pub fn write_audit_log<W: std::io::Write>(w: &mut W, rows: &[AuditRow]) -> Result<()> {
    writeln!(
        w,
        "epoch,direction,query_id,own_prototype,matched_instance,translated_unified,matched_nearest_unified,reliable,match_score"
    )?;
    for r in rows {
        writeln!(
            w,
            "{},{},{},{},{},{},{},{},{}",
            r.epoch,
            r.direction,
            r.query_id,
            r.own_prototype,
            r.matched_instance,
            r.translated_unified,
            r.matched_nearest_unified,
            r.reliable,
            r.match_score
        )?;
    }
    Ok(())
}
