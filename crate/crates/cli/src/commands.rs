use std::path::{Path, PathBuf};

use anyhow::{anyhow, bail, Context};

use cddm_core::config::KvDoc;
use cddm_core::dataset::{generate_dataset, Dataset, DatasetConfig};
use cddm_core::diffusion::{train_on_dataset, DenoiserModel, ModelConfig, ModelKind, StartStep, TrainConfig};
use cddm_core::experiment::{evaluate_sample, rows_to_csv, run_sweep, summarize, ExperimentSpec, Models};
use cddm_core::scenario::ScenarioConfig;

use crate::run_meta;
use crate::{Common, EvalArgs};

/// Exit-code class of a failed command.
#[derive(Debug)]
pub enum Failure {
    Usage(anyhow::Error),
    Runtime(anyhow::Error),
}

impl From<anyhow::Error> for Failure {
    fn from(e: anyhow::Error) -> Self {
        Failure::Runtime(e)
    }
}

impl From<cddm_core::Error> for Failure {
    fn from(e: cddm_core::Error) -> Self {
        Failure::Runtime(e.into())
    }
}

type Outcome = Result<(), Failure>;

const DATASET_SECTIONS: [&str; 4] = ["scenario", "knobs", "dataset", "data"];

struct Loaded {
    text: String,
    doc: KvDoc,
}

fn load_config(path: &Path) -> Result<Loaded, Failure> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| Failure::Usage(anyhow!("cannot read config {}: {e}", path.display())))?;
    let doc = KvDoc::parse(&text)
        .map_err(|e| Failure::Usage(anyhow!("config {}: {e}", path.display())))?;
    Ok(Loaded { text, doc })
}

fn check_keys(doc: &KvDoc, sections: &[&str]) -> Outcome {
    doc.finish_sections(sections).map_err(|e| Failure::Usage(e.into()))
}

fn create_out(dir: &Path) -> anyhow::Result<()> {
    std::fs::create_dir_all(dir).with_context(|| format!("creating output directory {}", dir.display()))
}

fn dataset_config(doc: &KvDoc, seed: Option<u64>) -> anyhow::Result<DatasetConfig> {
    let mut cfg = DatasetConfig::from_kv(doc, &ScenarioConfig::default())?;
    if let Some(s) = seed {
        cfg.scenario.seed = s;
    }
    Ok(cfg)
}

/// `data.dir` if set, otherwise a dataset generated from the config.
fn dataset_from(doc: &KvDoc, seed: Option<u64>) -> anyhow::Result<Dataset> {
    let dir: Option<PathBuf> = doc.get("data.dir")?;
    let cfg = dataset_config(doc, seed)?;
    match dir {
        Some(dir) => Dataset::load(&dir).with_context(|| format!("loading dataset from {}", dir.display())),
        None => Ok(generate_dataset(&cfg)?),
    }
}

pub fn generate(c: &Common) -> Outcome {
    let cfg_file = load_config(&c.config)?;
    let cfg = dataset_config(&cfg_file.doc, c.seed)?;
    check_keys(&cfg_file.doc, &DATASET_SECTIONS)?;
    let ds = generate_dataset(&cfg)?;
    create_out(&c.out)?;
    ds.save(&c.out)?;
    run_meta::write(&c.out, "generate", &c.config, &cfg_file.text, cfg.scenario.seed)?;
    println!(
        "wrote {} samples ({} train / {} validation / {} test) to {}",
        ds.samples.len(),
        ds.manifest.splits.train.len(),
        ds.manifest.splits.validation.len(),
        ds.manifest.splits.test.len(),
        c.out.display()
    );
    Ok(())
}

fn kv_pairs(doc: &KvDoc) -> Vec<(String, String)> {
    doc.to_text()
        .lines()
        .filter_map(|l| l.split_once(" = "))
        .map(|(k, v)| (k.to_string(), v.to_string()))
        .collect()
}

pub fn train(c: &Common) -> Outcome {
    let cfg_file = load_config(&c.config)?;
    let doc = &cfg_file.doc;
    let ds = dataset_from(doc, None)?;
    let sc = &ds.manifest.config.scenario;
    let base = ModelConfig {
        num_aps: sc.num_aps,
        num_receive_aps: sc.num_receive_aps,
        antennas: sc.antennas,
        ..ModelConfig::default()
    };
    let mut model_cfg = ModelConfig::from_kv(doc, &base)?;
    let mut train_cfg = TrainConfig::from_kv(doc, &TrainConfig::default())?;
    check_keys(doc, &["scenario", "knobs", "dataset", "data", "model", "train"])?;
    if let Some(s) = c.seed {
        train_cfg.seed = s;
        model_cfg.seed = s;
    }
    if (model_cfg.num_aps, model_cfg.num_receive_aps, model_cfg.antennas) != (sc.num_aps, sc.num_receive_aps, sc.antennas)
    {
        return Err(Failure::Runtime(anyhow!(
            "model dims (L, L_r, M) = ({}, {}, {}) do not match dataset ({}, {}, {})",
            model_cfg.num_aps,
            model_cfg.num_receive_aps,
            model_cfg.antennas,
            sc.num_aps,
            sc.num_receive_aps,
            sc.antennas
        )));
    }
    create_out(&c.out)?;
    let mut provenance = KvDoc::new();
    ds.manifest.config.write_kv(&mut provenance);
    train_cfg.write_kv(&mut provenance);
    let extra = kv_pairs(&provenance);
    for kind in [ModelKind::Cddm, ModelKind::Tddm] {
        let (model, log) = train_on_dataset(&ds, &model_cfg.with_kind(kind), &train_cfg)?;
        let name = kind.name();
        let ckpt = c.out.join(format!("{name}.ckpt"));
        model.save(&ckpt, &extra)?;
        let log_path = c.out.join(format!("{name}_log.csv"));
        std::fs::write(&log_path, log.to_csv()).with_context(|| format!("writing {}", log_path.display()))?;
        let last = log.last().expect("training runs at least one epoch");
        println!(
            "{name}: {} epochs, final train loss {:.4e}, val loss {:.4e} -> {}",
            log.epochs.len(),
            last.train_loss,
            last.val_loss,
            ckpt.display()
        );
    }
    run_meta::write(&c.out, "train", &c.config, &cfg_file.text, train_cfg.seed)?;
    Ok(())
}

fn load_models(paths: &[PathBuf]) -> anyhow::Result<Models> {
    let mut models = Models::default();
    for p in paths {
        let m = DenoiserModel::load(p).with_context(|| format!("loading checkpoint {}", p.display()))?;
        let slot = match m.kind() {
            ModelKind::Cddm => &mut models.cddm,
            ModelKind::Tddm => &mut models.tddm,
        };
        if slot.is_some() {
            bail!("two {} checkpoints given; the second is {}", m.kind().name(), p.display());
        }
        *slot = Some(m);
    }
    Ok(models)
}

pub fn eval(a: &EvalArgs) -> Outcome {
    let c = &a.common;
    let cfg_file = load_config(&c.config)?;
    let doc = &cfg_file.doc;
    let ds = dataset_from(doc, c.seed)?;
    let start = match a.start_step {
        Some(s) => s,
        None => doc.get_or("eval.start_step", StartStep::Full)?,
    };
    check_keys(doc, &["scenario", "knobs", "dataset", "data", "eval"])?;
    let models = if a.baseline_only {
        Models::default()
    } else {
        load_models(&a.checkpoint)?
    };
    models.check(&ds.manifest.config.scenario)?;
    let test = ds.test();
    if test.is_empty() {
        return Err(Failure::Runtime(anyhow!("dataset has an empty test split")));
    }
    let per_sample = test
        .iter()
        .map(|s| evaluate_sample(s, &models, start))
        .collect::<Result<Vec<_>, _>>()?;
    let mut csv = String::from("method,nmse_db,nmse_std_db,samples\n");
    for (k, method) in models.methods().into_iter().enumerate() {
        let vals: Vec<f64> = per_sample.iter().map(|r| r[k].1).collect();
        let row = summarize(f64::NAN, method, &vals);
        csv.push_str(&format!("{},{},{},{}\n", method.name(), row.nmse_db, row.nmse_std_db, row.trials));
    }
    create_out(&c.out)?;
    let path = c.out.join("eval.csv");
    std::fs::write(&path, &csv).with_context(|| format!("writing {}", path.display()))?;
    run_meta::write(&c.out, "eval", &c.config, &cfg_file.text, ds.manifest.seed())?;
    print!("{csv}");
    Ok(())
}

pub fn sweep(a: &EvalArgs) -> Outcome {
    let c = &a.common;
    let cfg_file = load_config(&c.config)?;
    let doc = &cfg_file.doc;
    let mut spec = ExperimentSpec::from_kv(doc, &ScenarioConfig::default())?;
    check_keys(doc, &["scenario", "sweep"])?;
    if let Some(s) = c.seed {
        spec.scenario.seed = s;
    }
    if let Some(s) = a.start_step {
        spec.start = s;
    }
    let models = if a.baseline_only {
        Models::default()
    } else if !a.checkpoint.is_empty() {
        load_models(&a.checkpoint)?
    } else {
        let paths: Vec<PathBuf> = [&spec.cddm_checkpoint, &spec.tddm_checkpoint]
            .into_iter()
            .flatten()
            .cloned()
            .collect();
        load_models(&paths)?
    };
    let rows = run_sweep(&spec, &models)?;
    let csv = rows_to_csv(&rows);
    create_out(&c.out)?;
    let path = spec.output.clone().unwrap_or_else(|| c.out.join("sweep.csv"));
    std::fs::write(&path, &csv).with_context(|| format!("writing {}", path.display()))?;
    run_meta::write(&c.out, "sweep", &c.config, &cfg_file.text, spec.scenario.seed)?;
    print!("{csv}");
    Ok(())
}
