//! Synthetic two-domain retrieval scenarios and feature-file ingestion.
//!
//! Scenarios place Gaussian class clusters around well-separated means, then
//! derive the second domain by an affine shift (rotation in a random 2-plane,
//! per-axis scaling, translation). Label spaces follow the setting: closet
//! shares all classes, partial gives the query domain half of the retrieval
//! space, open-set gives the retrieval domain half of the query space.
//!
//! File format: UTF-8 CSV with header `f0,...,f{d-1}[,label]`, '.' decimal,
//! row index = instance id. Labels are for evaluation only.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::diffkit::{euclidean, Tensor};
use crate::error::{Error, Result};
use crate::rng::{shuffled_indices, substream};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Setting {
    /// Identical label spaces.
    Closet,
    /// Query label space is half of the retrieval space.
    Partial,
    /// Retrieval label space is half of the query space; the rest of the
    /// query labels are private and must retrieve null.
    Openset,
}

impl std::fmt::Display for Setting {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Setting::Closet => write!(f, "closet"),
            Setting::Partial => write!(f, "partial"),
            Setting::Openset => write!(f, "openset"),
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ScenarioConfig {
    pub d_in: usize,
    /// Size of the larger label space (per the setting rule).
    pub classes: usize,
    pub samples_per_class: usize,
    /// Minimum pairwise distance between class means.
    pub separation: f64,
    pub noise_sigma: f64,
    pub setting: Setting,
    pub seed: u64,
    /// Rotation angle of the domain shift, degrees, in a random 2-plane.
    pub rotation_degrees: f64,
    /// Per-axis scale range of the domain shift.
    pub scale_min: f64,
    pub scale_max: f64,
    /// Norm of the shift translation; defaults to separation/2.
    pub translation_norm: Option<f64>,
    /// Multiplier on `separation` for the distance between non-shared class
    /// means and every shared mean (1.0 keeps a single spacing rule).
    pub private_separation_factor: f64,
}

impl Default for ScenarioConfig {
    fn default() -> Self {
        Self {
            d_in: 16,
            classes: 6,
            samples_per_class: 84,
            separation: 10.0,
            noise_sigma: 1.0,
            setting: Setting::Closet,
            seed: 0,
            rotation_degrees: 30.0,
            scale_min: 0.8,
            scale_max: 1.25,
            translation_norm: None,
            private_separation_factor: 1.0,
        }
    }
}

/// One domain: features plus quarantined evaluation labels. Trainer code
/// receives only the feature matrix.
#[derive(Clone, Debug)]
pub struct DomainDataset {
    pub features: Tensor,
    pub labels: Option<Vec<u32>>,
}

impl DomainDataset {
    pub fn len(&self) -> usize {
        self.features.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.features.rows() == 0
    }

    pub fn require_labels(&self, what: &str) -> Result<&[u32]> {
        self.labels.as_deref().ok_or_else(|| Error::MissingLabels {
            msg: format!("{what} has no label column; evaluation needs labeled data"),
        })
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ScenarioManifest {
    pub setting: Setting,
    pub seed: u64,
    pub label_space_a: Vec<u32>,
    pub label_space_b: Vec<u32>,
    pub shared_labels: Vec<u32>,
    pub private_query_labels: Vec<u32>,
    pub private_retrieval_labels: Vec<u32>,
    pub config: ScenarioConfig,
}

fn gaussian(rng: &mut ChaCha8Rng) -> f64 {
    // Box-Muller from two uniforms.
    let u1: f64 = rng.gen_range(f64::MIN_POSITIVE..1.0);
    let u2: f64 = rng.gen_range(0.0..1.0);
    (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
}

fn unit_direction(d: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    loop {
        let v: Vec<f64> = (0..d).map(|_| gaussian(rng)).collect();
        let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if n > 1e-9 {
            return v.iter().map(|x| x / n).collect();
        }
    }
}

/// Sample class means on growing spheres until the spacing constraints hold.
fn place_means(cfg: &ScenarioConfig, shared: &[u32], all: &[u32]) -> Result<Vec<Vec<f64>>> {
    let mut rng = substream(cfg.seed, "means", &[]);
    let phi = cfg.private_separation_factor.max(1.0);
    let mut means: Vec<Option<Vec<f64>>> = vec![None; all.len()];
    let shared_set: Vec<usize> = all
        .iter()
        .enumerate()
        .filter(|(_, c)| shared.contains(c))
        .map(|(i, _)| i)
        .collect();

    // Shared classes first, on a sphere of radius ~separation, then the
    // private ones at the factor-scaled distance.
    let mut radius = cfg.separation.max(1e-9);
    let mut placed: Vec<usize> = Vec::new();
    for round in 0.. {
        if round > 40 {
            return Err(Error::Config {
                key: "separation".to_string(),
                msg: format!(
                    "cannot place {} class means with separation {} in {} dims",
                    all.len(),
                    cfg.separation,
                    cfg.d_in
                ),
            });
        }
        means.iter_mut().for_each(|m| *m = None);
        placed.clear();
        let mut ok = true;
        'class: for idx in shared_set
            .iter()
            .copied()
            .chain((0..all.len()).filter(|i| !shared_set.contains(i)))
        {
            let is_private = !shared_set.contains(&idx);
            let r = if is_private { radius * phi } else { radius };
            for _attempt in 0..600 {
                let cand: Vec<f64> = unit_direction(cfg.d_in, &mut rng)
                    .into_iter()
                    .map(|x| x * r)
                    .collect();
                let mut fits = true;
                for &p in &placed {
                    let other = means[p].as_ref().unwrap();
                    let need = if is_private && shared_set.contains(&p) {
                        cfg.separation * phi
                    } else {
                        cfg.separation
                    };
                    if euclidean(&cand, other) < need {
                        fits = false;
                        break;
                    }
                }
                if fits {
                    means[idx] = Some(cand);
                    placed.push(idx);
                    continue 'class;
                }
            }
            ok = false;
            break;
        }
        if ok {
            break;
        }
        radius *= 1.25;
    }
    Ok(means.into_iter().map(|m| m.unwrap()).collect())
}

/// The domain shift: scale per axis, rotate in a random 2-plane, translate.
struct AffineShift {
    scales: Vec<f64>,
    plane_u: Vec<f64>,
    plane_v: Vec<f64>,
    angle: f64,
    translation: Vec<f64>,
}

impl AffineShift {
    fn sample(cfg: &ScenarioConfig) -> Self {
        let mut rng = substream(cfg.seed, "shift", &[]);
        let scales: Vec<f64> = (0..cfg.d_in)
            .map(|_| rng.gen_range(cfg.scale_min..cfg.scale_max))
            .collect();
        let u = unit_direction(cfg.d_in, &mut rng);
        // Gram-Schmidt a second direction against u.
        let v = loop {
            let w = unit_direction(cfg.d_in, &mut rng);
            let proj: f64 = w.iter().zip(u.iter()).map(|(a, b)| a * b).sum();
            let mut orth: Vec<f64> = w.iter().zip(u.iter()).map(|(a, b)| a - proj * b).collect();
            let n = orth.iter().map(|x| x * x).sum::<f64>().sqrt();
            if n > 1e-6 {
                orth.iter_mut().for_each(|x| *x /= n);
                break orth;
            }
        };
        let t_norm = cfg.translation_norm.unwrap_or(cfg.separation / 2.0);
        let translation: Vec<f64> = unit_direction(cfg.d_in, &mut rng)
            .into_iter()
            .map(|x| x * t_norm)
            .collect();
        Self {
            scales,
            plane_u: u,
            plane_v: v,
            angle: cfg.rotation_degrees.to_radians(),
            translation,
        }
    }

    fn apply(&self, x: &[f64]) -> Vec<f64> {
        let scaled: Vec<f64> = x.iter().zip(self.scales.iter()).map(|(a, s)| a * s).collect();
        let cu: f64 = scaled.iter().zip(self.plane_u.iter()).map(|(a, b)| a * b).sum();
        let cv: f64 = scaled.iter().zip(self.plane_v.iter()).map(|(a, b)| a * b).sum();
        let (sin, cos) = self.angle.sin_cos();
        let ru = cu * cos - cv * sin;
        let rv = cu * sin + cv * cos;
        scaled
            .iter()
            .enumerate()
            .map(|(i, &s)| {
                s - cu * self.plane_u[i] - cv * self.plane_v[i]
                    + ru * self.plane_u[i]
                    + rv * self.plane_v[i]
                    + self.translation[i]
            })
            .collect()
    }
}

fn half_of(space: &[u32], rng: &mut ChaCha8Rng) -> Vec<u32> {
    let take = space.len().div_ceil(2);
    let order = shuffled_indices(space.len(), rng);
    let mut chosen: Vec<u32> = order[..take].iter().map(|&i| space[i]).collect();
    chosen.sort_unstable();
    chosen
}

/// Generate both domains and the label-space manifest.
pub fn gen_scenario(cfg: &ScenarioConfig) -> Result<(DomainDataset, DomainDataset, ScenarioManifest)> {
    if cfg.classes == 0 || cfg.samples_per_class == 0 || cfg.d_in < 2 {
        return Err(Error::Config {
            key: "classes/samples_per_class/d_in".to_string(),
            msg: "scenario dimensions must be positive (d_in >= 2)".to_string(),
        });
    }
    if cfg.separation <= 0.0 {
        return Err(Error::Config {
            key: "separation".to_string(),
            msg: "separation must be positive".to_string(),
        });
    }
    let full: Vec<u32> = (0..cfg.classes as u32).collect();
    let mut space_rng = substream(cfg.seed, "labelspace", &[]);
    let (space_a, space_b) = match cfg.setting {
        Setting::Closet => (full.clone(), full.clone()),
        Setting::Partial => (half_of(&full, &mut space_rng), full.clone()),
        Setting::Openset => (full.clone(), half_of(&full, &mut space_rng)),
    };
    let shared: Vec<u32> = space_a.iter().copied().filter(|c| space_b.contains(c)).collect();
    let means = place_means(cfg, &shared, &full)?;
    let shift = AffineShift::sample(cfg);

    let build = |space: &[u32], domain_tag: &str, shifted: bool| -> Result<DomainDataset> {
        let mut rng = substream(cfg.seed, "samples", &[domain_tag.as_bytes()[0] as u64]);
        let mut rows: Vec<Vec<f64>> = Vec::with_capacity(space.len() * cfg.samples_per_class);
        let mut labels: Vec<u32> = Vec::with_capacity(rows.capacity());
        for &class in space {
            let mean = if shifted {
                shift.apply(&means[class as usize])
            } else {
                means[class as usize].clone()
            };
            for _ in 0..cfg.samples_per_class {
                let row: Vec<f64> = mean
                    .iter()
                    .map(|&m| m + cfg.noise_sigma * gaussian(&mut rng))
                    .collect();
                rows.push(row);
                labels.push(class);
            }
        }
        let mut shuffle_rng = substream(cfg.seed, "shuffle-rows", &[domain_tag.as_bytes()[0] as u64]);
        let order = shuffled_indices(rows.len(), &mut shuffle_rng);
        let rows: Vec<Vec<f64>> = order.iter().map(|&i| rows[i].clone()).collect();
        let labels: Vec<u32> = order.iter().map(|&i| labels[i]).collect();
        Ok(DomainDataset {
            features: Tensor::from_rows(&rows)?,
            labels: Some(labels),
        })
    };

    let a = build(&space_a, "a", false)?;
    let b = build(&space_b, "b", true)?;

    let private_query: Vec<u32> = space_a.iter().copied().filter(|c| !space_b.contains(c)).collect();
    let private_retrieval: Vec<u32> = space_b.iter().copied().filter(|c| !space_a.contains(c)).collect();
    let manifest = ScenarioManifest {
        setting: cfg.setting,
        seed: cfg.seed,
        label_space_a: space_a,
        label_space_b: space_b,
        shared_labels: shared,
        private_query_labels: private_query,
        private_retrieval_labels: private_retrieval,
        config: cfg.clone(),
    };
    Ok((a, b, manifest))
}

/// Write a domain to CSV with full f64 round-trip precision.
pub fn save_domain(ds: &DomainDataset, path: &Path) -> Result<()> {
    let file = File::create(path)?;
    let mut w = BufWriter::new(file);
    let d = ds.features.cols();
    for j in 0..d {
        if j > 0 {
            write!(w, ",")?;
        }
        write!(w, "f{j}")?;
    }
    if ds.labels.is_some() {
        write!(w, ",label")?;
    }
    writeln!(w)?;
    for i in 0..ds.features.rows() {
        for (j, v) in ds.features.row(i).iter().enumerate() {
            if j > 0 {
                write!(w, ",")?;
            }
            write!(w, "{v}")?;
        }
        if let Some(labels) = &ds.labels {
            write!(w, ",{}", labels[i])?;
        }
        writeln!(w)?;
    }
    w.flush()?;
    Ok(())
}

/// Load a domain CSV; malformed rows report their line number.
pub fn load_domain(path: &Path) -> Result<DomainDataset> {
    let display = path.display().to_string();
    let file = File::open(path).map_err(|e| Error::DataFormat {
        path: display.clone(),
        line: 0,
        msg: e.to_string(),
    })?;
    let reader = BufReader::new(file);
    let mut lines = reader.lines().enumerate();

    let header = match lines.next() {
        Some((_, Ok(h))) => h,
        Some((_, Err(e))) => {
            return Err(Error::DataFormat {
                path: display,
                line: 1,
                msg: e.to_string(),
            })
        }
        None => {
            return Err(Error::DataFormat {
                path: display,
                line: 1,
                msg: "empty file".to_string(),
            })
        }
    };
    let cols: Vec<&str> = header.trim_end().split(',').collect();
    let has_label = cols.last() == Some(&"label");
    let d = if has_label { cols.len() - 1 } else { cols.len() };
    for (j, c) in cols.iter().take(d).enumerate() {
        let expect = format!("f{j}");
        if *c != expect {
            return Err(Error::DataFormat {
                path: display,
                line: 1,
                msg: format!("expected header column `{expect}`, found `{c}`"),
            });
        }
    }

    let mut rows: Vec<Vec<f64>> = Vec::new();
    let mut labels: Vec<u32> = Vec::new();
    for (idx, line) in lines {
        let line_no = idx + 1;
        let line = line.map_err(|e| Error::DataFormat {
            path: display.clone(),
            line: line_no,
            msg: e.to_string(),
        })?;
        let trimmed = line.trim_end();
        if trimmed.is_empty() {
            continue;
        }
        let fields: Vec<&str> = trimmed.split(',').collect();
        let expected = if has_label { d + 1 } else { d };
        if fields.len() != expected {
            return Err(Error::DataFormat {
                path: display,
                line: line_no,
                msg: format!("expected {expected} fields, found {}", fields.len()),
            });
        }
        let mut row = Vec::with_capacity(d);
        for (j, f) in fields.iter().take(d).enumerate() {
            let v: f64 = f.parse().map_err(|_| Error::DataFormat {
                path: display.clone(),
                line: line_no,
                msg: format!("field f{j} is not a number: `{f}`"),
            })?;
            row.push(v);
        }
        if has_label {
            let l: u32 = fields[d].parse().map_err(|_| Error::DataFormat {
                path: display.clone(),
                line: line_no,
                msg: format!("label is not an unsigned integer: `{}`", fields[d]),
            })?;
            labels.push(l);
        }
        rows.push(row);
    }
    if rows.is_empty() {
        return Err(Error::DataFormat {
            path: display,
            line: 1,
            msg: "no data rows".to_string(),
        });
    }
    Ok(DomainDataset {
        features: Tensor::from_rows(&rows)?,
        labels: if has_label { Some(labels) } else { None },
    })
}
