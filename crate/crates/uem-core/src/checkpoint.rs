//! Checkpoint files: a single JSON document holding shapes and row-major
//! parameter arrays, the memory banks, the unified prototype structures,
//! seed and step counters, and the config hash. Keys serialize in fixed
//! struct order so identical runs produce identical bytes.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::diffkit::Tensor;
use crate::encoder::{hex_digest, DomainClassifierParams, EncoderParams, Layer};
use crate::error::{Error, Result};
use crate::membank::{Domain, MemoryBank};
use crate::protostruct::{Provenance, UnifiedPrototypeStructure};
use crate::trainer::{Stage1Artifacts, Stage2Artifacts, TrainConfig};

pub const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct TensorDump {
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

impl TensorDump {
    fn from_tensor(t: &Tensor) -> Self {
        Self {
            shape: t.shape().to_vec(),
            data: t.data().to_vec(),
        }
    }

    fn to_tensor(&self) -> Result<Tensor> {
        Tensor::new(self.shape.clone(), self.data.clone())
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct LayerDump {
    pub weight: TensorDump,
    pub bias: TensorDump,
    pub relu: bool,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ProvenanceDump {
    pub kind: String,
    pub dst_id: Option<usize>,
    pub src_id: Option<usize>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct StructureDump {
    pub domain: Domain,
    pub prototypes: Vec<Vec<f64>>,
    pub provenance: Vec<ProvenanceDump>,
    pub dst_to_unified: Vec<usize>,
    pub src_to_unified: Vec<usize>,
    pub merged_pairs: usize,
}

impl StructureDump {
    fn from_structure(s: &UnifiedPrototypeStructure) -> Self {
        Self {
            domain: s.domain,
            prototypes: s.prototypes.clone(),
            provenance: s
                .provenance
                .iter()
                .map(|p| match p {
                    Provenance::Own { dst_id } => ProvenanceDump {
                        kind: "own".to_string(),
                        dst_id: Some(*dst_id),
                        src_id: None,
                    },
                    Provenance::Translated { src_id } => ProvenanceDump {
                        kind: "translated".to_string(),
                        dst_id: None,
                        src_id: Some(*src_id),
                    },
                    Provenance::Merged { dst_id, src_id } => ProvenanceDump {
                        kind: "merged".to_string(),
                        dst_id: Some(*dst_id),
                        src_id: Some(*src_id),
                    },
                })
                .collect(),
            dst_to_unified: s.dst_to_unified.clone(),
            src_to_unified: s.src_to_unified.clone(),
            merged_pairs: s.merged_pairs,
        }
    }

    fn to_structure(&self) -> Result<UnifiedPrototypeStructure> {
        let provenance = self
            .provenance
            .iter()
            .map(|p| match (p.kind.as_str(), p.dst_id, p.src_id) {
                ("own", Some(d), _) => Ok(Provenance::Own { dst_id: d }),
                ("translated", _, Some(s)) => Ok(Provenance::Translated { src_id: s }),
                ("merged", Some(d), Some(s)) => Ok(Provenance::Merged { dst_id: d, src_id: s }),
                _ => Err(Error::DataFormat {
                    path: "checkpoint".to_string(),
                    line: 0,
                    msg: format!("bad provenance record kind `{}`", p.kind),
                }),
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(UnifiedPrototypeStructure {
            prototypes: self.prototypes.clone(),
            provenance,
            dst_to_unified: self.dst_to_unified.clone(),
            src_to_unified: self.src_to_unified.clone(),
            merged_pairs: self.merged_pairs,
            domain: self.domain,
        })
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct BankDump {
    pub domain: Domain,
    pub beta: f64,
    pub entries: TensorDump,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Checkpoint {
    pub version: u32,
    pub stage: u32,
    pub seed: u64,
    pub config_hash: String,
    pub step: usize,
    pub total_steps: usize,
    pub encoder: Vec<LayerDump>,
    pub classifier: Option<Vec<LayerDump>>,
    /// Hash of the frozen stage-1 snapshot, present on stage-2 checkpoints.
    pub snapshot_hash: Option<String>,
    /// Encoder optimizer state, kept so stage 2 can resume the schedule.
    pub optimizer: Option<crate::encoder::OptimizerState>,
    pub bank_a: BankDump,
    pub bank_b: BankDump,
    pub structure_a: StructureDump,
    pub structure_b: StructureDump,
}

fn dump_layers(params: &EncoderParams) -> Vec<LayerDump> {
    params
        .layers
        .iter()
        .map(|l| LayerDump {
            weight: TensorDump::from_tensor(&l.weight),
            bias: TensorDump::from_tensor(&l.bias),
            relu: l.relu,
        })
        .collect()
}

fn load_layers(dumps: &[LayerDump]) -> Result<Vec<Layer>> {
    dumps
        .iter()
        .map(|d| {
            Ok(Layer {
                weight: d.weight.to_tensor()?,
                bias: d.bias.to_tensor()?,
                relu: d.relu,
            })
        })
        .collect()
}

impl Checkpoint {
    pub fn from_stage1(cfg: &TrainConfig, art: &Stage1Artifacts) -> Self {
        Self {
            version: FORMAT_VERSION,
            stage: 1,
            seed: cfg.seed,
            config_hash: cfg.config_hash(),
            step: art.optimizer.step,
            total_steps: art.total_steps,
            encoder: dump_layers(&art.encoder),
            classifier: None,
            snapshot_hash: None,
            optimizer: Some(art.optimizer.clone()),
            bank_a: BankDump {
                domain: Domain::A,
                beta: art.bank_a.beta,
                entries: TensorDump::from_tensor(art.bank_a.entries()),
            },
            bank_b: BankDump {
                domain: Domain::B,
                beta: art.bank_b.beta,
                entries: TensorDump::from_tensor(art.bank_b.entries()),
            },
            structure_a: StructureDump::from_structure(&art.structure_a),
            structure_b: StructureDump::from_structure(&art.structure_b),
        }
    }

    pub fn from_stage2(cfg: &TrainConfig, art: &Stage2Artifacts, step: usize, total: usize) -> Self {
        Self {
            version: FORMAT_VERSION,
            stage: 2,
            seed: cfg.seed,
            config_hash: cfg.config_hash(),
            step,
            total_steps: total,
            encoder: dump_layers(&art.encoder),
            classifier: Some(vec![
                LayerDump {
                    weight: TensorDump::from_tensor(&art.classifier.hidden.weight),
                    bias: TensorDump::from_tensor(&art.classifier.hidden.bias),
                    relu: true,
                },
                LayerDump {
                    weight: TensorDump::from_tensor(&art.classifier.output.weight),
                    bias: TensorDump::from_tensor(&art.classifier.output.bias),
                    relu: false,
                },
            ]),
            snapshot_hash: Some(art.snapshot.hash().to_string()),
            optimizer: None,
            bank_a: BankDump {
                domain: Domain::A,
                beta: art.bank_a.beta,
                entries: TensorDump::from_tensor(art.bank_a.entries()),
            },
            bank_b: BankDump {
                domain: Domain::B,
                beta: art.bank_b.beta,
                entries: TensorDump::from_tensor(art.bank_b.entries()),
            },
            structure_a: StructureDump::from_structure(&art.structure_a),
            structure_b: StructureDump::from_structure(&art.structure_b),
        }
    }

    pub fn encoder_params(&self) -> Result<EncoderParams> {
        EncoderParams::new(load_layers(&self.encoder)?)
    }

    pub fn classifier_params(&self) -> Result<Option<DomainClassifierParams>> {
        match &self.classifier {
            None => Ok(None),
            Some(layers) => {
                if layers.len() != 2 {
                    return Err(Error::DataFormat {
                        path: "checkpoint".to_string(),
                        line: 0,
                        msg: format!("classifier must have 2 layers, found {}", layers.len()),
                    });
                }
                let l = load_layers(layers)?;
                let mut it = l.into_iter();
                Ok(Some(DomainClassifierParams {
                    hidden: it.next().unwrap(),
                    output: it.next().unwrap(),
                }))
            }
        }
    }

    pub fn bank(&self, domain: Domain) -> Result<MemoryBank> {
        let dump = match domain {
            Domain::A => &self.bank_a,
            Domain::B => &self.bank_b,
        };
        MemoryBank::from_entries(dump.entries.to_tensor()?, dump.beta, dump.domain)
    }

    pub fn structure(&self, domain: Domain) -> Result<UnifiedPrototypeStructure> {
        match domain {
            Domain::A => self.structure_a.to_structure(),
            Domain::B => self.structure_b.to_structure(),
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("checkpoint serialize")
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(parent) = path.parent() {
            fs::create_dir_all(parent)?;
        }
        fs::write(path, self.to_json())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::DataFormat {
            path: path.display().to_string(),
            line: 0,
            msg: e.to_string(),
        })?;
        serde_json::from_str(&text).map_err(|e| Error::DataFormat {
            path: path.display().to_string(),
            line: 0,
            msg: format!("not a valid checkpoint: {e}"),
        })
    }
}

/// Hex SHA-256 of a file's bytes (manifest entries, checkpoint identity).
pub fn file_hash(path: &Path) -> Result<String> {
    let bytes = fs::read(path)?;
    let mut h = Sha256::new();
    h.update(&bytes);
    Ok(hex_digest(&h.finalize()))
}
