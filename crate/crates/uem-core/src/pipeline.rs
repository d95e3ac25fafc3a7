//! End-to-end run orchestration shared by the command-line tool and the
//! acceptance suite: train into a fixed output layout, evaluate a checkpoint
//! against labeled datasets, and emit per-query outcome dumps.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::checkpoint::{file_hash, Checkpoint};
use crate::datagen::DomainDataset;
use crate::diffkit::Tensor;
use crate::error::{Error, Result};
use crate::membank::Domain;
use crate::retrieval::{
    map_all, openset_accuracy, retrieve, DistanceMetric, Metrics, PrivateDetector,
    RetrievalOutcome, Verdict, DEFAULT_ETA_PERCENTILE,
};
use crate::stage2::MatchScore;
use crate::trainer::{
    run_stage1, run_stage2, write_audit_log, write_stage1_log, write_stage2_log, Stage1Artifacts,
    Stage2Artifacts, TrainConfig,
};

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    /// Answer length of dumped per-query rankings.
    pub k: usize,
    pub metric: DistanceMetric,
    /// Percentile of retrieval-domain self-scores used to calibrate eta.
    pub eta_percentile: f64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            k: 10,
            metric: DistanceMetric::Euclidean,
            eta_percentile: DEFAULT_ETA_PERCENTILE,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum StageSelection {
    All,
    Stage1Only,
    Stage2Only,
}

/// Fixed output layout under a run directory.
pub struct RunLayout {
    pub root: PathBuf,
}

impl RunLayout {
    pub fn new(root: &Path) -> Self {
        Self {
            root: root.to_path_buf(),
        }
    }

    pub fn checkpoint(&self, stage: u32) -> PathBuf {
        self.root.join("checkpoints").join(format!("stage{stage}.json"))
    }

    pub fn log(&self, name: &str) -> PathBuf {
        self.root.join("logs").join(name)
    }

    pub fn metrics(&self) -> PathBuf {
        self.root.join("metrics").join("metrics.json")
    }

    pub fn outcomes(&self) -> PathBuf {
        self.root.join("metrics").join("outcomes.csv")
    }

    pub fn manifest(&self) -> PathBuf {
        self.root.join("manifest.json")
    }

    fn ensure_dirs(&self) -> Result<()> {
        fs::create_dir_all(self.root.join("checkpoints"))?;
        fs::create_dir_all(self.root.join("logs"))?;
        fs::create_dir_all(self.root.join("metrics"))?;
        Ok(())
    }
}

pub struct TrainRun {
    pub stage1: Option<Stage1Artifacts>,
    pub stage2: Option<Stage2Artifacts>,
    pub final_checkpoint: PathBuf,
}

/// Train the selected stages and write checkpoints, logs, and structure
/// dumps into the run directory.
pub fn train_into(
    cfg: &TrainConfig,
    data_a: &DomainDataset,
    data_b: &DomainDataset,
    out: &Path,
    stages: StageSelection,
) -> Result<TrainRun> {
    let layout = RunLayout::new(out);
    layout.ensure_dirs()?;

    let stage1 = match stages {
        StageSelection::All | StageSelection::Stage1Only => {
            let art = run_stage1(cfg, &data_a.features, &data_b.features)?;
            let ck = Checkpoint::from_stage1(cfg, &art);
            ck.save(&layout.checkpoint(1))?;
            let mut f = fs::File::create(layout.log("stage1_log.csv"))?;
            write_stage1_log(&mut f, &art.epoch_logs)?;
            Some(art)
        }
        StageSelection::Stage2Only => {
            let path = layout.checkpoint(1);
            let ck = Checkpoint::load(&path)?;
            Some(resume_stage1(cfg, &ck, data_a, data_b)?)
        }
    };

    let mut final_checkpoint = layout.checkpoint(1);
    let stage2 = match stages {
        StageSelection::Stage1Only => None,
        StageSelection::All | StageSelection::Stage2Only => {
            let art1 = stage1.as_ref().expect("stage 1 artifacts present");
            let art1_owned = clone_stage1(art1);
            let total = art1_owned.total_steps;
            let art = run_stage2(cfg, art1_owned, &data_a.features, &data_b.features)?;
            let ck = Checkpoint::from_stage2(cfg, &art, total, total);
            ck.save(&layout.checkpoint(2))?;
            final_checkpoint = layout.checkpoint(2);

            let mut f = fs::File::create(layout.log("stage2_log.csv"))?;
            write_stage2_log(&mut f, &art.epoch_logs)?;
            let mut f = fs::File::create(layout.log("match_audit.csv"))?;
            write_audit_log(&mut f, &art.audit)?;
            let mut f = fs::File::create(layout.log("structure_a.csv"))?;
            art.structure_a.write_csv(&mut f)?;
            let mut f = fs::File::create(layout.log("structure_b.csv"))?;
            art.structure_b.write_csv(&mut f)?;
            Some(art)
        }
    };
    if stage2.is_none() {
        if let Some(art) = &stage1 {
            let mut f = fs::File::create(layout.log("structure_a.csv"))?;
            art.structure_a.write_csv(&mut f)?;
            let mut f = fs::File::create(layout.log("structure_b.csv"))?;
            art.structure_b.write_csv(&mut f)?;
        }
    }

    Ok(TrainRun {
        stage1,
        stage2,
        final_checkpoint,
    })
}

fn clone_stage1(art: &Stage1Artifacts) -> Stage1Artifacts {
    Stage1Artifacts {
        encoder: art.encoder.clone(),
        bank_a: art.bank_a.clone(),
        bank_b: art.bank_b.clone(),
        structure_a: art.structure_a.clone(),
        structure_b: art.structure_b.clone(),
        optimizer: art.optimizer.clone(),
        steps_per_epoch: art.steps_per_epoch,
        total_steps: art.total_steps,
        epoch_logs: art.epoch_logs.clone(),
        lr_trace: art.lr_trace.clone(),
    }
}

fn resume_stage1(
    cfg: &TrainConfig,
    ck: &Checkpoint,
    data_a: &DomainDataset,
    data_b: &DomainDataset,
) -> Result<Stage1Artifacts> {
    if ck.stage != 1 {
        return Err(Error::Config {
            key: "stage".to_string(),
            msg: format!("expected a stage-1 checkpoint, found stage {}", ck.stage),
        });
    }
    if ck.config_hash != cfg.config_hash() {
        log::warn!("resuming from a checkpoint with a different config hash");
    }
    let encoder = ck.encoder_params()?;
    let optimizer = ck.optimizer.clone().ok_or_else(|| Error::DataFormat {
        path: "checkpoint".to_string(),
        line: 0,
        msg: "stage-1 checkpoint is missing optimizer state".to_string(),
    })?;
    let spe = usize::max(
        data_a.features.rows().div_ceil(cfg.batch_size),
        data_b.features.rows().div_ceil(cfg.batch_size),
    );
    Ok(Stage1Artifacts {
        encoder,
        bank_a: ck.bank(Domain::A)?,
        bank_b: ck.bank(Domain::B)?,
        structure_a: ck.structure(Domain::A)?,
        structure_b: ck.structure(Domain::B)?,
        optimizer,
        steps_per_epoch: spe,
        total_steps: ck.total_steps,
        epoch_logs: Vec::new(),
        lr_trace: Vec::new(),
    })
}

pub struct EvalReport {
    pub metrics: Metrics,
    pub outcomes: Vec<RetrievalOutcome>,
    pub eta: f64,
}

/// Evaluate a checkpoint: full-ranking mAP over shared-label queries with
/// the detector bypassed, plus open-set accuracy with the calibrated
/// detector. Both datasets must carry labels.
pub fn evaluate_checkpoint(
    checkpoint_path: &Path,
    query: &DomainDataset,
    retrieval: &DomainDataset,
    ecfg: &EvalConfig,
    setting: &str,
) -> Result<EvalReport> {
    let ck = Checkpoint::load(checkpoint_path)?;
    let encoder = ck.encoder_params()?;
    let q_labels = query.require_labels("query dataset")?.to_vec();
    let r_labels = retrieval.require_labels("retrieval dataset")?.to_vec();

    let qf = encoder.encode(&query.features)?;
    let rf = encoder.encode(&retrieval.features)?;
    let structure_b = ck.structure(Domain::B)?;
    let detector =
        PrivateDetector::calibrate(&structure_b, &rf, ecfg.eta_percentile, MatchScore::CosTimesDist)?;

    // Detector-gated outcomes for the open-set metric and for dumps.
    let mut outcomes = Vec::with_capacity(qf.rows());
    for qi in 0..qf.rows() {
        outcomes.push(retrieve(
            qi,
            qf.row(qi),
            &rf,
            ecfg.k,
            ecfg.metric,
            Some(&detector),
        )?);
    }

    // Full rankings with the detector bypassed for mAP.
    let n_retrieval = rf.rows();
    let mut full = Vec::with_capacity(qf.rows());
    for qi in 0..qf.rows() {
        full.push(retrieve(qi, qf.row(qi), &rf, n_retrieval, ecfg.metric, None)?);
    }

    let map = map_all(&full, &q_labels, &r_labels);
    let open = openset_accuracy(&outcomes, &q_labels, &r_labels);
    let num_private = q_labels.iter().filter(|l| !r_labels.contains(l)).count();

    let metrics = Metrics {
        setting: setting.to_string(),
        map_all: map,
        openset_accuracy: open,
        num_queries: qf.rows(),
        num_private,
        eta: detector.eta,
        seed: ck.seed,
        checkpoint_hash: file_hash(checkpoint_path)?,
    };
    Ok(EvalReport {
        eta: detector.eta,
        metrics,
        outcomes,
    })
}

/// Write metrics JSON (and optionally per-query outcomes) into the layout.
pub fn write_eval_outputs(
    layout: &RunLayout,
    report: &EvalReport,
    dump_outcomes: bool,
) -> Result<PathBuf> {
    layout.ensure_dirs()?;
    let path = layout.metrics();
    fs::write(&path, report.metrics.to_json())?;
    if dump_outcomes {
        let mut f = fs::File::create(layout.outcomes())?;
        write_outcomes_csv(&mut f, &report.outcomes, report.eta)?;
    }
    Ok(path)
}

pub fn write_outcomes_csv<W: Write>(
    w: &mut W,
    outcomes: &[RetrievalOutcome],
    eta: f64,
) -> Result<()> {
    writeln!(w, "query_id,verdict,detector_score,eta,ranked_ids,ranked_distances")?;
    for o in outcomes {
        let score = o
            .detector_score
            .map(|s| s.to_string())
            .unwrap_or_default();
        match &o.verdict {
            Verdict::Null => writeln!(w, "{},null,{},{},,", o.query_id, score, eta)?,
            Verdict::Ranked(r) => {
                let ids: Vec<String> = r.iter().map(|(i, _)| i.to_string()).collect();
                let ds: Vec<String> = r.iter().map(|(_, d)| d.to_string()).collect();
                writeln!(
                    w,
                    "{},ranked,{},{},{},{}",
                    o.query_id,
                    score,
                    eta,
                    ids.join(";"),
                    ds.join(";")
                )?
            }
        }
    }
    Ok(())
}

/// Convenience wrapper: encode a dataset under a checkpointed encoder.
pub fn embed_dataset(checkpoint_path: &Path, data: &DomainDataset) -> Result<Tensor> {
    let ck = Checkpoint::load(checkpoint_path)?;
    let encoder = ck.encoder_params()?;
    encoder.encode(&data.features)
}
