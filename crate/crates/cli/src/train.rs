use std::path::PathBuf;

use clap::Args;
use multisk::trainer::{
    ablation_suite, evaluate, generate_synthetic, run, split_holdout, Ablation, TrainConfig, TrainError,
};
use serde_json::{json, Value};

use crate::model_file::ModelFile;
use crate::{to_json, write_file, CliError};

#[derive(Args, Debug)]
pub struct TrainArgs {
    /// JSON training config; omitted fields take their defaults.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub out_dir: PathBuf,
    #[arg(long, value_parser = parse_ablation)]
    pub ablation: Option<Ablation>,
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Args, Debug)]
pub struct EvalArgs {
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// `model.json` written by `train`.
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct AblateArgs {
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub seed: Option<u64>,
}

fn parse_ablation(s: &str) -> Result<Ablation, String> {
    s.parse()
}

fn load_config(path: Option<&PathBuf>, seed: Option<u64>) -> Result<TrainConfig, CliError> {
    let mut cfg = match path {
        None => TrainConfig::default(),
        Some(p) => {
            let text = std::fs::read_to_string(p)
                .map_err(|e| CliError::Io(format!("cannot read config {}: {e}", p.display())))?;
            serde_json::from_str(&text)
                .map_err(|e| CliError::Io(format!("cannot parse config {}: {e}", p.display())))?
        }
    };
    if let Some(s) = seed {
        cfg.seed = s;
    }
    cfg.validate().map_err(train_error)?;
    Ok(cfg)
}

fn train_error(e: TrainError) -> CliError {
    match e {
        TrainError::InvalidConfig(m) => CliError::Usage(m),
        other => CliError::Numerical(other.to_string(), Value::Null),
    }
}

pub fn run_train(a: &TrainArgs) -> Result<Value, CliError> {
    let mut cfg = load_config(a.config.as_ref(), a.seed)?;
    if let Some(ab) = a.ablation {
        cfg.ablation = ab;
    }
    std::fs::create_dir_all(&a.out_dir)
        .map_err(|e| CliError::Io(format!("cannot create {}: {e}", a.out_dir.display())))?;
    let out = run(&cfg).map_err(train_error)?;

    let mut log = String::new();
    for m in &out.metrics {
        log.push_str(&to_json(m));
        log.push('\n');
    }
    write_file(&a.out_dir.join("metrics.jsonl"), &log)?;
    let report = json!({
        "config": cfg,
        "data_checksum": out.data_checksum,
        "steps": out.steps,
        "unconverged_solves": out.unconverged_solves,
        "eval": out.eval,
    });
    write_file(&a.out_dir.join("report.json"), &format!("{report:#}\n"))?;
    write_file(&a.out_dir.join("model.json"), &to_json(&ModelFile::from_model(&out.model)))?;

    let last = out.metrics.last().expect("at least one epoch");
    Ok(json!({
        "status": "ok",
        "command": "train",
        "ablation": cfg.ablation.name(),
        "epochs": out.metrics.len(),
        "final_loss": last.loss_total,
        "structure_score": out.eval.structure_score,
        "r_at_5": out.eval.retrieval.r_at_5,
        "data_checksum": out.data_checksum,
        "out_dir": a.out_dir.display().to_string(),
    }))
}

pub fn run_eval(a: &EvalArgs) -> Result<Value, CliError> {
    let cfg = load_config(a.config.as_ref(), a.seed)?;
    let text = std::fs::read_to_string(&a.model)
        .map_err(|e| CliError::Io(format!("cannot read model {}: {e}", a.model.display())))?;
    let file: ModelFile = serde_json::from_str(&text)
        .map_err(|e| CliError::Io(format!("cannot parse model {}: {e}", a.model.display())))?;
    let model = file.into_model(cfg.data.d_input, cfg.k)?;
    let data = generate_synthetic(&cfg.data).map_err(train_error)?;
    let (_, held_out) = split_holdout(&data, cfg.holdout_fraction, cfg.seed);
    let eval = evaluate(&model, &held_out).map_err(train_error)?;
    if let Some(out) = &a.out {
        write_file(out, &format!("{:#}\n", json!(eval)))?;
    }
    Ok(json!({
        "status": "ok",
        "command": "eval",
        "structure_score": eval.structure_score,
        "structure_scores": eval.structure_scores,
        "retrieval": eval.retrieval,
    }))
}

pub fn run_ablate(a: &AblateArgs) -> Result<Value, CliError> {
    let cfg = load_config(a.config.as_ref(), a.seed)?;
    let report = ablation_suite(&cfg).map_err(train_error)?;
    write_file(&a.out, &format!("{:#}\n", json!(report)))?;
    let row = |ab| report.row(ab).expect("suite trains every variant");
    let (full, none, modified) = (row(Ablation::Full), row(Ablation::NoSspc), row(Ablation::ModifiedSk));
    Ok(json!({
        "status": "ok",
        "command": "ablate",
        "data_checksum": report.data_checksum,
        "structure_gap_full_minus_no_sspc": full.structure_score - none.structure_score,
        "r_at_5_full": full.r_at_5,
        "r_at_5_modified_sk": modified.r_at_5,
        "out": a.out.display().to_string(),
    }))
}
