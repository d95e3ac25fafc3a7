//! Command-line front end: scenario generation, two-stage training,
//! embedding dumps, retrieval, evaluation, and ablation sweeps.
//!
//! Exit codes: 0 success, 2 usage or config error, 3 data error,
//! 4 numeric failure.

mod config;
mod pca;

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand, ValueEnum};
use serde::Serialize;

use config::{resolve_config, AppConfig};
use uem_core::checkpoint::file_hash;
use uem_core::datagen::{gen_scenario, load_domain, save_domain, DomainDataset};
use uem_core::pipeline::{
    embed_dataset, evaluate_checkpoint, train_into, write_eval_outputs, write_outcomes_csv,
    EvalConfig, RunLayout, StageSelection,
};
use uem_core::retrieval::{retrieve, PrivateDetector};
use uem_core::stage2::MatchScore;
use uem_core::Error;

#[derive(Parser)]
#[command(
    name = "uem",
    version,
    about = "Unsupervised cross-domain retrieval: train, retrieve, evaluate"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum StageArg {
    All,
    #[value(name = "1")]
    One,
    #[value(name = "2")]
    Two,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic two-domain scenario (data_a.csv, data_b.csv).
    Gen {
        /// TOML config file; the [data] section drives generation.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Output directory.
        #[arg(long)]
        out: PathBuf,
        /// Seed override.
        #[arg(long)]
        seed: Option<u64>,
        /// Dotted-key config override, e.g. data.classes=8 (repeatable).
        #[arg(long = "set", value_name = "KEY=VALUE")]
        sets: Vec<String>,
    },
    /// Train the encoder on two feature CSVs.
    Train {
        #[arg(long)]
        config: Option<PathBuf>,
        /// Query-domain features (CSV).
        #[arg(long)]
        data_a: PathBuf,
        /// Retrieval-domain features (CSV).
        #[arg(long)]
        data_b: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Which stages to run.
        #[arg(long, value_enum, default_value = "all")]
        stage: StageArg,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long = "set", value_name = "KEY=VALUE")]
        sets: Vec<String>,
    },
    /// Dump encoder features of a dataset under a checkpoint.
    Embed {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// Output CSV file.
        #[arg(long)]
        out: PathBuf,
        /// Append a 2-D principal-component projection (p0, p1 columns).
        #[arg(long)]
        pca2: bool,
    },
    /// Rank retrieval answers per query, with open-set null verdicts.
    Retrieve {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        query: PathBuf,
        #[arg(long)]
        retrieval: PathBuf,
        /// Output CSV of per-query outcomes.
        #[arg(long)]
        out: PathBuf,
        /// Answers per query.
        #[arg(long, default_value = "10")]
        k: usize,
        /// Disable the open-set detector (always rank).
        #[arg(long)]
        no_detector: bool,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long = "set", value_name = "KEY=VALUE")]
        sets: Vec<String>,
    },
    /// Compute retrieval metrics against labeled datasets.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        query: PathBuf,
        #[arg(long)]
        retrieval: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Scenario label written into the metrics JSON.
        #[arg(long, default_value = "custom")]
        setting: String,
        /// Also dump per-query outcomes CSV.
        #[arg(long)]
        dump_outcomes: bool,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long = "set", value_name = "KEY=VALUE")]
        sets: Vec<String>,
    },
    /// Run the full pipeline plus the four ablation variants and compare.
    Ablate {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        /// Use existing feature CSVs instead of generating the scenario.
        #[arg(long)]
        data_a: Option<PathBuf>,
        #[arg(long)]
        data_b: Option<PathBuf>,
        #[arg(long = "set", value_name = "KEY=VALUE")]
        sets: Vec<String>,
    },
}

#[derive(Serialize)]
struct RunManifest {
    command: String,
    tool_version: String,
    seed: u64,
    config: AppConfig,
    input_hashes: BTreeMap<String, String>,
    outputs: Vec<String>,
}

fn write_manifest(
    path: &Path,
    command: &str,
    cfg: &AppConfig,
    inputs: &[(&str, &Path)],
    outputs: &[PathBuf],
) -> Result<(), Error> {
    let mut input_hashes = BTreeMap::new();
    for (name, p) in inputs {
        input_hashes.insert(name.to_string(), file_hash(p)?);
    }
    let manifest = RunManifest {
        command: command.to_string(),
        tool_version: env!("CARGO_PKG_VERSION").to_string(),
        seed: cfg.seed,
        config: cfg.clone(),
        input_hashes,
        outputs: outputs
            .iter()
            .map(|p| p.display().to_string())
            .collect(),
    };
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent)?;
    }
    fs::write(path, serde_json::to_string_pretty(&manifest).expect("manifest"))?;
    Ok(())
}

fn exit_code(err: &Error) -> i32 {
    match err {
        Error::Config { .. } => 2,
        Error::NonFiniteLoss { .. } | Error::NonFinite { .. } => 4,
        _ => 3,
    }
}

fn main() {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("UEM_LOG", "info"))
        .format_timestamp(None)
        .init();
    let cli = Cli::parse();
    match run(cli.command) {
        Ok(()) => {}
        Err(e) => {
            eprintln!("error: {e}");
            std::process::exit(exit_code(&e));
        }
    }
}

fn run(command: Command) -> Result<(), Error> {
    match command {
        Command::Gen {
            config,
            out,
            seed,
            sets,
        } => cmd_gen(config.as_deref(), &out, seed, &sets),
        Command::Train {
            config,
            data_a,
            data_b,
            out,
            stage,
            seed,
            sets,
        } => cmd_train(config.as_deref(), &data_a, &data_b, &out, stage, seed, &sets),
        Command::Embed {
            checkpoint,
            data,
            out,
            pca2,
        } => cmd_embed(&checkpoint, &data, &out, pca2),
        Command::Retrieve {
            checkpoint,
            query,
            retrieval,
            out,
            k,
            no_detector,
            config,
            sets,
        } => cmd_retrieve(&checkpoint, &query, &retrieval, &out, k, no_detector, config.as_deref(), &sets),
        Command::Eval {
            checkpoint,
            query,
            retrieval,
            out,
            setting,
            dump_outcomes,
            config,
            sets,
        } => cmd_eval(
            &checkpoint,
            &query,
            &retrieval,
            &out,
            &setting,
            dump_outcomes,
            config.as_deref(),
            &sets,
        ),
        Command::Ablate {
            config,
            out,
            seed,
            data_a,
            data_b,
            sets,
        } => cmd_ablate(config.as_deref(), &out, seed, data_a, data_b, &sets),
    }
}

fn cmd_gen(config: Option<&Path>, out: &Path, seed: Option<u64>, sets: &[String]) -> Result<(), Error> {
    let cfg = resolve_config(config, sets, seed)?;
    fs::create_dir_all(out)?;
    let scenario = cfg.scenario_config();
    let (a, b, manifest) = gen_scenario(&scenario)?;
    let path_a = out.join("data_a.csv");
    let path_b = out.join("data_b.csv");
    save_domain(&a, &path_a)?;
    save_domain(&b, &path_b)?;
    let scen_path = out.join("scenario.json");
    fs::write(&scen_path, serde_json::to_string_pretty(&manifest).expect("manifest"))?;
    write_manifest(
        &out.join("manifest.json"),
        "gen",
        &cfg,
        &[],
        &[path_a.clone(), path_b.clone(), scen_path],
    )?;
    println!(
        "generated {} ({} instances) and {} ({} instances), setting {}",
        path_a.display(),
        a.len(),
        path_b.display(),
        b.len(),
        manifest.setting
    );
    Ok(())
}

fn stage_selection(stage: StageArg) -> StageSelection {
    match stage {
        StageArg::All => StageSelection::All,
        StageArg::One => StageSelection::Stage1Only,
        StageArg::Two => StageSelection::Stage2Only,
    }
}

fn cmd_train(
    config: Option<&Path>,
    data_a: &Path,
    data_b: &Path,
    out: &Path,
    stage: StageArg,
    seed: Option<u64>,
    sets: &[String],
) -> Result<(), Error> {
    let cfg = resolve_config(config, sets, seed)?;
    let ds_a = load_domain(data_a)?;
    let ds_b = load_domain(data_b)?;
    let run = train_into(
        &cfg.train_config(),
        &ds_a,
        &ds_b,
        out,
        stage_selection(stage),
    )?;
    let layout = RunLayout::new(out);
    let mut outputs = vec![run.final_checkpoint.clone()];
    outputs.push(layout.log("stage1_log.csv"));
    if run.stage2.is_some() {
        outputs.push(layout.log("stage2_log.csv"));
        outputs.push(layout.log("match_audit.csv"));
    }
    write_manifest(
        &layout.manifest(),
        "train",
        &cfg,
        &[("data_a", data_a), ("data_b", data_b)],
        &outputs,
    )?;
    println!("trained; final checkpoint at {}", run.final_checkpoint.display());
    Ok(())
}

fn cmd_embed(checkpoint: &Path, data: &Path, out: &Path, pca2: bool) -> Result<(), Error> {
    let ds = load_domain(data)?;
    let features = embed_dataset(checkpoint, &ds)?;
    if let Some(parent) = out.parent() {
        fs::create_dir_all(parent)?;
    }
    let mut w = fs::File::create(out)?;
    let proj = if pca2 { Some(pca::project_2d(&features)) } else { None };
    write!(w, "id")?;
    for j in 0..features.cols() {
        write!(w, ",f{j}")?;
    }
    if proj.is_some() {
        write!(w, ",p0,p1")?;
    }
    writeln!(w)?;
    for i in 0..features.rows() {
        write!(w, "{i}")?;
        for v in features.row(i) {
            write!(w, ",{v}")?;
        }
        if let Some(p) = &proj {
            write!(w, ",{},{}", p[i].0, p[i].1)?;
        }
        writeln!(w)?;
    }
    println!("embedded {} instances into {}", features.rows(), out.display());
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn cmd_retrieve(
    checkpoint: &Path,
    query: &Path,
    retrieval: &Path,
    out: &Path,
    k: usize,
    no_detector: bool,
    config: Option<&Path>,
    sets: &[String],
) -> Result<(), Error> {
    let cfg = resolve_config(config, sets, None)?;
    let ck = uem_core::checkpoint::Checkpoint::load(checkpoint)?;
    let encoder = ck.encoder_params()?;
    let q = load_domain(query)?;
    let r = load_domain(retrieval)?;
    let qf = encoder.encode(&q.features)?;
    let rf = encoder.encode(&r.features)?;

    let detector = if no_detector {
        None
    } else {
        let structure = ck.structure(uem_core::membank::Domain::B)?;
        Some(PrivateDetector::calibrate(
            &structure,
            &rf,
            cfg.eval.eta_percentile,
            MatchScore::CosTimesDist,
        )?)
    };
    let mut outcomes = Vec::with_capacity(qf.rows());
    for qi in 0..qf.rows() {
        outcomes.push(retrieve(
            qi,
            qf.row(qi),
            &rf,
            k,
            cfg.eval.metric,
            detector.as_ref(),
        )?);
    }
    if let Some(parent) = out.parent() {
        fs::create_dir_all(parent)?;
    }
    let mut w = fs::File::create(out)?;
    let eta = detector.as_ref().map(|d| d.eta).unwrap_or(f64::INFINITY);
    write_outcomes_csv(&mut w, &outcomes, eta)?;
    println!("wrote {} outcomes to {}", outcomes.len(), out.display());
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn cmd_eval(
    checkpoint: &Path,
    query: &Path,
    retrieval: &Path,
    out: &Path,
    setting: &str,
    dump_outcomes: bool,
    config: Option<&Path>,
    sets: &[String],
) -> Result<(), Error> {
    let cfg = resolve_config(config, sets, None)?;
    let q = load_domain(query)?;
    let r = load_domain(retrieval)?;
    let report = evaluate_checkpoint(checkpoint, &q, &r, &cfg.eval, setting)?;
    let layout = RunLayout::new(out);
    let metrics_path = write_eval_outputs(&layout, &report, dump_outcomes)?;
    write_manifest(
        &layout.manifest(),
        "eval",
        &cfg,
        &[
            ("checkpoint", checkpoint),
            ("query", query),
            ("retrieval", retrieval),
        ],
        &[metrics_path.clone()],
    )?;
    println!("{}", report.metrics.to_json());
    println!("metrics written to {}", metrics_path.display());
    Ok(())
}

const ABLATION_VARIANTS: [(&str, fn(&mut AppConfig)); 5] = [
    ("full", |_| {}),
    ("no_prototype_merging", |c| {
        c.stage1.disable_prototype_merging = true
    }),
    ("no_sel", |c| c.stage1.disable_sel = true),
    ("no_spda", |c| c.stage2.plain_adversarial = true),
    ("cosine_matcher", |c| c.stage2.cosine_only_matcher = true),
];

fn cmd_ablate(
    config: Option<&Path>,
    out: &Path,
    seed: Option<u64>,
    data_a: Option<PathBuf>,
    data_b: Option<PathBuf>,
    sets: &[String],
) -> Result<(), Error> {
    let cfg = resolve_config(config, sets, seed)?;
    fs::create_dir_all(out)?;

    // One shared dataset for every variant.
    let (ds_a, ds_b, setting) = match (&data_a, &data_b) {
        (Some(a), Some(b)) => (load_domain(a)?, load_domain(b)?, "custom".to_string()),
        (None, None) => {
            let scenario = cfg.scenario_config();
            let (a, b, manifest) = gen_scenario(&scenario)?;
            let dir = out.join("data");
            fs::create_dir_all(&dir)?;
            save_domain(&a, &dir.join("data_a.csv"))?;
            save_domain(&b, &dir.join("data_b.csv"))?;
            fs::write(
                dir.join("scenario.json"),
                serde_json::to_string_pretty(&manifest).expect("manifest"),
            )?;
            (a, b, manifest.setting.to_string())
        }
        _ => {
            return Err(Error::Config {
                key: "data_a/data_b".to_string(),
                msg: "provide both data files or neither".to_string(),
            })
        }
    };
    if ds_a.labels.is_none() || ds_b.labels.is_none() {
        return Err(Error::MissingLabels {
            msg: "ablation comparison needs labeled datasets".to_string(),
        });
    }

    let mut rows: Vec<(String, Option<f64>, Option<f64>)> = Vec::new();
    for (name, tweak) in ABLATION_VARIANTS {
        let mut vcfg = cfg.clone();
        tweak(&mut vcfg);
        let vdir = out.join("variants").join(name);
        let run = train_into(&vcfg.train_config(), &ds_a, &ds_b, &vdir, StageSelection::All)?;
        let report = evaluate_checkpoint(&run.final_checkpoint, &ds_a, &ds_b, &vcfg.eval, &setting)?;
        write_eval_outputs(&RunLayout::new(&vdir), &report, false)?;
        log::info!(
            "ablation {name}: map_all {:?}, openset {:?}",
            report.metrics.map_all,
            report.metrics.openset_accuracy
        );
        rows.push((
            name.to_string(),
            report.metrics.map_all,
            report.metrics.openset_accuracy,
        ));
    }

    let table_path = out.join("ablation.csv");
    let mut w = fs::File::create(&table_path)?;
    writeln!(w, "variant,map_all,openset_accuracy")?;
    for (name, map, open) in &rows {
        writeln!(
            w,
            "{},{},{}",
            name,
            map.map(|v| v.to_string()).unwrap_or_default(),
            open.map(|v| v.to_string()).unwrap_or_default()
        )?;
    }

    println!("{:<24} {:>10} {:>10}", "variant", "map_all", "openset");
    for (name, map, open) in &rows {
        println!(
            "{:<24} {:>10} {:>10}",
            name,
            map.map(|v| format!("{v:.4}")).unwrap_or_else(|| "-".to_string()),
            open.map(|v| format!("{v:.4}")).unwrap_or_else(|| "-".to_string())
        );
    }
    write_manifest(
        &out.join("manifest.json"),
        "ablate",
        &cfg,
        &[],
        &[table_path],
    )?;
    Ok(())
}
