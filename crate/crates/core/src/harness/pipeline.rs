//! Stage orchestration.
//!
//! Stages run in the fixed order gen_data → train → attack → defend →
//! report, whatever order the config lists them in. Outputs go to the
//! configured directory:
//!
//! - `gen_data`: `dataset.csv`
//! - `train`: `checkpoint.bin`, `history.csv`
//! - `attack`: `attack.json` (the report without its defense section), `grid_heatmap.tsv`
//! - `defend`: `defense.json`
//! - `report`: see [`super::report`]
//!
//! A failing stage leaves earlier artifacts in place and writes the error
//! to `error.log`.

use std::io::Write;
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::deq::DeqModel;
use crate::error::{Error, Result};
use crate::metrics::{build_eval_report, EvalReport};
use crate::training::train_loop;

use super::checkpoint::{load_checkpoint, save_checkpoint, Checkpoint};
use super::config::{ExperimentConfig, Stage};
use super::dataset::Split;
use super::report::{emit_report, grid_heatmap_tsv, history_row, report_json, write, HISTORY_HEADER};

/// Command-line overrides applied on top of the file.
#[derive(Debug, Clone, Default)]
pub struct RunOptions {
    pub seed: Option<u64>,
    pub out: Option<PathBuf>,
    pub stages: Option<Vec<Stage>>,
}

#[derive(Debug, Clone, Default)]
pub struct RunSummary {
    pub stages: Vec<Stage>,
    pub artifacts: Vec<PathBuf>,
    pub report: Option<EvalReport>,
}

pub fn load_config(config_path: &Path, opts: &RunOptions) -> Result<ExperimentConfig> {
    let text = std::fs::read_to_string(config_path).map_err(|e| Error::io(config_path, e))?;
    let mut cfg: ExperimentConfig = toml::from_str(&text).map_err(|e| Error::Config(e.to_string()))?;
    if let Some(s) = opts.seed {
        cfg.seed = s;
    }
    if let Some(o) = &opts.out {
        cfg.output.dir = o.clone();
    }
    if let Some(st) = &opts.stages {
        cfg.stages = st.clone();
    }
    cfg.validate()?;
    Ok(cfg)
}

/// Loads, validates and runs a config file.
pub fn run_experiment(config_path: &Path, opts: &RunOptions) -> Result<RunSummary> {
    let cfg = load_config(config_path, opts)?;
    run_config(&cfg)
}

pub fn run_config(cfg: &ExperimentConfig) -> Result<RunSummary> {
    cfg.validate()?;
    if cfg.stages.is_empty() {
        return Ok(RunSummary::default());
    }
    let dir = cfg.output.dir.clone();
    std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    let log = dir.join("error.log");
    if log.exists() {
        std::fs::remove_file(&log).map_err(|e| Error::io(&log, e))?;
    }
    let mut summary = RunSummary::default();
    match run_stages(cfg, &dir, &mut summary) {
        Ok(()) => Ok(summary),
        Err((stage, e)) => {
            let msg = format!("stage {} failed: {e}\n", stage.as_str());
            // The original error matters more than a failure to log it.
            let _ = std::fs::write(&log, msg);
            Err(e)
        }
    }
}

fn to_json<T: Serialize>(v: &T) -> String {
    let mut s = serde_json::to_string_pretty(v).expect("serializable");
    s.push('\n');
    s
}

fn run_stages(
    cfg: &ExperimentConfig,
    dir: &Path,
    summary: &mut RunSummary,
) -> std::result::Result<(), (Stage, Error)> {
    let has = |s: Stage| cfg.stages.contains(&s);
    let first = Stage::ALL.into_iter().find(|&s| has(s)).expect("non-empty stages");
    let data = cfg.dataset().map_err(|e| (first, e))?;
    let budget = cfg.resolve_budget(&data).map_err(|e| (first, e))?;

    if has(Stage::GenData) {
        let p = dir.join("dataset.csv");
        write(&p, &data.to_csv()).map_err(|e| (Stage::GenData, e))?;
        summary.artifacts.push(p);
        summary.stages.push(Stage::GenData);
    }

    let mut model: Option<DeqModel<f64>> = None;
    if has(Stage::Train) {
        let stage = Stage::Train;
        let m = train_stage(cfg, &data, budget, dir, summary).map_err(|e| (stage, e))?;
        model = Some(m);
        summary.stages.push(stage);
    }

    let needs_eval = has(Stage::Attack) || has(Stage::Defend) || has(Stage::Report);
    if !needs_eval {
        return Ok(());
    }
    let eval_stage = [Stage::Attack, Stage::Defend, Stage::Report]
        .into_iter()
        .find(|&s| has(s))
        .expect("some evaluation stage");
    let model = match model {
        Some(m) => m,
        None => {
            let path = cfg.model.checkpoint.as_deref().expect("validated");
            load_checkpoint(path).map_err(|e| (eval_stage, e))?.model
        }
    };
    let mut eval = cfg.eval_config(budget, &data.domain);
    if !(has(Stage::Defend) || has(Stage::Report)) {
        eval.defense = None;
    }
    let test = data.batch(Split::Test);
    let val = data.batch(Split::Val);
    let report = build_eval_report(&model, &test, Some(&val), &eval).map_err(|e| (eval_stage, e))?;

    if has(Stage::Attack) {
        let attack_only = EvalReport {
            defense: None,
            ..report.clone()
        };
        for (name, text) in [
            ("attack.json", report_json(&attack_only)),
            ("grid_heatmap.tsv", grid_heatmap_tsv(&report.grid)),
        ] {
            let p = dir.join(name);
            write(&p, &text).map_err(|e| (Stage::Attack, e))?;
            summary.artifacts.push(p);
        }
        summary.stages.push(Stage::Attack);
    }
    if has(Stage::Defend) {
        let p = dir.join("defense.json");
        write(&p, &to_json(&report.defense)).map_err(|e| (Stage::Defend, e))?;
        summary.artifacts.push(p);
        summary.stages.push(Stage::Defend);
    }
    if has(Stage::Report) {
        let paths = emit_report(&report, dir).map_err(|e| (Stage::Report, e))?;
        summary.artifacts.extend(paths);
        summary.stages.push(Stage::Report);
    }
    summary.report = Some(report);
    Ok(())
}

fn train_stage(
    cfg: &ExperimentConfig,
    data: &super::dataset::Dataset,
    budget: super::config::ResolvedBudget,
    dir: &Path,
    summary: &mut RunSummary,
) -> Result<DeqModel<f64>> {
    let tcfg = cfg.train_config(budget);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x696e_6974);
    let init = DeqModel::init_random(
        data.input_dim(),
        cfg.model.hidden,
        data.classes,
        cfg.model.nonlinearity,
        cfg.model.gamma,
        &mut rng,
    )?;
    let hist_path = dir.join("history.csv");
    let mut hist = std::fs::File::create(&hist_path).map_err(|e| Error::io(&hist_path, e))?;
    writeln!(hist, "{HISTORY_HEADER}").map_err(|e| Error::io(&hist_path, e))?;
    summary.artifacts.push(hist_path.clone());
    let mut on_epoch = |r: &crate::training::EpochRecord| -> Result<()> {
        writeln!(hist, "{}", history_row(r))
            .and_then(|_| hist.flush())
            .map_err(|e| Error::io(&hist_path, e))
    };
    let out = train_loop(
        init,
        &data.batch(Split::Train),
        &data.batch(Split::Val),
        &tcfg,
        &cfg.solver,
        &data.domain,
        &mut on_epoch,
    )?;
    let ckpt = Checkpoint {
        model: out.model.clone(),
        config_snapshot: cfg.to_toml(),
        best_epoch: out.best_epoch,
        best_robust_acc: out.best_robust_acc,
    };
    let p = dir.join("checkpoint.bin");
    save_checkpoint(&p, &ckpt)?;
    summary.artifacts.push(p);
    Ok(out.model)
}
