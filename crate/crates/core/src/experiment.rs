//! Evaluation sweeps comparing LS, MMSE, TDDM and CDDM on fresh scenarios.

use std::fmt::Write as _;
use std::path::PathBuf;

use rand::Rng;
use rayon::prelude::*;

use crate::config::KvDoc;
use crate::dataset::{generate_sample, DatasetConfig, Sample};
use crate::diffusion::{DenoiserModel, ModelKind, StartStep};
use crate::error::{Error, Result};
use crate::estimators::{nmse, to_db};
use crate::rng::{stream_rng, streams};
use crate::scenario::ScenarioConfig;

pub const CSV_HEADER: &str = "grid,method,nmse_db,nmse_std_db,trials";

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SweepVariable {
    Snr,
    NumUes,
    Distance,
}

impl std::str::FromStr for SweepVariable {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "snr" => Ok(SweepVariable::Snr),
            "num_ues" | "U" => Ok(SweepVariable::NumUes),
            "distance" | "d" => Ok(SweepVariable::Distance),
            other => Err(Error::Config(format!(
                "unknown sweep variable `{other}` (snr, num_ues, distance)"
            ))),
        }
    }
}

impl SweepVariable {
    pub fn name(self) -> &'static str {
        match self {
            SweepVariable::Snr => "snr",
            SweepVariable::NumUes => "num_ues",
            SweepVariable::Distance => "distance",
        }
    }

    /// `base` with this variable set to `value`.
    pub fn apply(self, base: &ScenarioConfig, value: f64) -> Result<ScenarioConfig> {
        let mut s = base.clone();
        match self {
            SweepVariable::Snr => s.target_snr_db = value,
            SweepVariable::Distance => s.max_target_distance = value,
            SweepVariable::NumUes => {
                if value < 1.0 || value.fract() != 0.0 {
                    return Err(Error::Config(format!("U grid value {value} is not a positive integer")));
                }
                s.num_ues = value as usize;
            }
        }
        s.validate()?;
        Ok(s)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Method {
    Ls,
    Mmse,
    Tddm,
    Cddm,
}

impl Method {
    pub const ALL: [Method; 4] = [Method::Ls, Method::Mmse, Method::Tddm, Method::Cddm];

    pub fn name(self) -> &'static str {
        match self {
            Method::Ls => "LS",
            Method::Mmse => "MMSE",
            Method::Tddm => "TDDM",
            Method::Cddm => "CDDM",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ExperimentSpec {
    pub variable: SweepVariable,
    pub grid: Vec<f64>,
    /// Scenario every grid point starts from.
    pub scenario: ScenarioConfig,
    pub cddm_checkpoint: Option<PathBuf>,
    pub tddm_checkpoint: Option<PathBuf>,
    pub trials: usize,
    pub output: Option<PathBuf>,
    pub start: StartStep,
}

impl ExperimentSpec {
    pub fn validate(&self) -> Result<()> {
        if self.grid.is_empty() {
            return Err(Error::Config("sweep grid is empty".into()));
        }
        if self.trials == 0 {
            return Err(Error::Config("sweep needs at least one trial per point".into()));
        }
        for &g in &self.grid {
            self.variable.apply(&self.scenario, g)?;
        }
        Ok(())
    }

    /// Reads `sweep.*` keys; the scenario comes from `scenario.*` over `base`.
    pub fn from_kv(doc: &KvDoc, base: &ScenarioConfig) -> Result<Self> {
        let spec = ExperimentSpec {
            variable: doc.require("sweep.variable")?,
            grid: doc
                .get_list("sweep.grid")?
                .ok_or_else(|| Error::Config("missing required key `sweep.grid`".into()))?,
            scenario: ScenarioConfig::from_kv(doc, base)?,
            cddm_checkpoint: doc.get("sweep.cddm")?,
            tddm_checkpoint: doc.get("sweep.tddm")?,
            trials: doc.get_or("sweep.trials", 200)?,
            output: doc.get("sweep.output")?,
            start: doc.get_or("sweep.start_step", StartStep::Full)?,
        };
        spec.validate()?;
        Ok(spec)
    }

    /// Seed of grid point `index`, derived from the scenario seed.
    pub fn point_seed(&self, index: usize) -> u64 {
        stream_rng(self.scenario.seed, streams::SWEEP_BASE - index as u64).random()
    }
}

/// Trained denoisers available to an evaluation.
#[derive(Clone, Debug, Default)]
pub struct Models {
    pub cddm: Option<DenoiserModel>,
    pub tddm: Option<DenoiserModel>,
}

impl Models {
    pub fn get(&self, method: Method) -> Option<&DenoiserModel> {
        match method {
            Method::Cddm => self.cddm.as_ref(),
            Method::Tddm => self.tddm.as_ref(),
            _ => None,
        }
    }

    /// Errors if a model's kind or dims disagree with `scenario`.
    pub fn check(&self, scenario: &ScenarioConfig) -> Result<()> {
        for (method, kind) in [(Method::Cddm, ModelKind::Cddm), (Method::Tddm, ModelKind::Tddm)] {
            if let Some(m) = self.get(method) {
                if m.kind() != kind {
                    return Err(Error::Config(format!(
                        "{} slot holds a {} model",
                        method.name(),
                        m.kind().name()
                    )));
                }
                m.check_dims(scenario.num_aps, scenario.num_receive_aps, scenario.antennas)
                    .map_err(|e| Error::Config(e.to_string()))?;
            }
        }
        Ok(())
    }

    /// Methods evaluated: the baselines plus whichever models are present.
    pub fn methods(&self) -> Vec<Method> {
        Method::ALL
            .into_iter()
            .filter(|&m| matches!(m, Method::Ls | Method::Mmse) || self.get(m).is_some())
            .collect()
    }
}

/// Mean per-link NMSE (linear) of each available method on one sample.
pub fn evaluate_sample(sample: &Sample, models: &Models, start: StartStep) -> Result<Vec<(Method, f64)>> {
    let mut out = Vec::with_capacity(4);
    for method in models.methods() {
        let est = match method {
            Method::Ls => sample.h_ls.clone(),
            Method::Mmse => sample.mmse()?,
            Method::Tddm | Method::Cddm => {
                let model = models.get(method).expect("filtered by methods()");
                model.denoise_sample(sample, start)?
            }
        };
        out.push((method, nmse(&est, &sample.h_comm)?.mean));
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq)]
pub struct SweepRow {
    pub grid: f64,
    pub method: Method,
    /// dB of the mean linear NMSE over trials.
    pub nmse_db: f64,
    /// Standard deviation of per-trial NMSE in dB.
    pub nmse_std_db: f64,
    pub trials: usize,
}

/// Summary row from per-trial linear NMSE values.
pub fn summarize(grid: f64, method: Method, values: &[f64]) -> SweepRow {
    let n = values.len();
    let mean = values.iter().sum::<f64>() / n as f64;
    let dbs: Vec<f64> = values.iter().map(|&v| to_db(v)).collect();
    let mean_db = dbs.iter().sum::<f64>() / n as f64;
    let var = if n > 1 {
        dbs.iter().map(|d| (d - mean_db).powi(2)).sum::<f64>() / (n - 1) as f64
    } else {
        0.0
    };
    SweepRow {
        grid,
        method,
        nmse_db: to_db(mean),
        nmse_std_db: var.sqrt(),
        trials: n,
    }
}

/// Fresh scenarios for grid point `index` at `value`.
pub fn point_samples(spec: &ExperimentSpec, index: usize) -> Result<Vec<Sample>> {
    let mut scenario = spec.variable.apply(&spec.scenario, spec.grid[index])?;
    scenario.seed = spec.point_seed(index);
    let cfg = DatasetConfig::fixed(scenario, spec.trials.max(crate::dataset::MIN_SAMPLES));
    (0..spec.trials as u64)
        .into_par_iter()
        .map(|id| generate_sample(&cfg, id))
        .collect()
}

/// Rows in grid order, methods in [`Method::ALL`] order.
pub fn run_sweep(spec: &ExperimentSpec, models: &Models) -> Result<Vec<SweepRow>> {
    spec.validate()?;
    models.check(&spec.scenario)?;
    let methods = models.methods();
    let per_point = (0..spec.grid.len())
        .into_par_iter()
        .map(|i| {
            let samples = point_samples(spec, i)?;
            let per_trial = samples
                .par_iter()
                .map(|s| evaluate_sample(s, models, spec.start))
                .collect::<Result<Vec<_>>>()?;
            Ok(methods
                .iter()
                .enumerate()
                .map(|(k, &m)| {
                    let vals: Vec<f64> = per_trial.iter().map(|r| r[k].1).collect();
                    summarize(spec.grid[i], m, &vals)
                })
                .collect::<Vec<_>>())
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(per_point.into_iter().flatten().collect())
}

pub fn rows_to_csv(rows: &[SweepRow]) -> String {
    let mut s = format!("{CSV_HEADER}\n");
    for r in rows {
        let _ = writeln!(
            s,
            "{},{},{},{},{}",
            r.grid,
            r.method.name(),
            r.nmse_db,
            r.nmse_std_db,
            r.trials
        );
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffusion::ModelConfig;

    fn spec(variable: SweepVariable, grid: Vec<f64>) -> ExperimentSpec {
        ExperimentSpec {
            variable,
            grid,
            scenario: ScenarioConfig {
                num_ues: 4,
                pilot_length: 4,
                ..ScenarioConfig::desk()
            },
            cddm_checkpoint: None,
            tddm_checkpoint: None,
            trials: 6,
            output: None,
            start: StartStep::Full,
        }
    }

    #[test]
    fn baseline_sweep_without_models() {
        let s = spec(SweepVariable::Snr, vec![0.0, 10.0]);
        let rows = run_sweep(&s, &Models::default()).unwrap();
        assert_eq!(rows.len(), 4);
        assert_eq!(
            rows.iter().map(|r| (r.grid, r.method)).collect::<Vec<_>>(),
            vec![(0.0, Method::Ls), (0.0, Method::Mmse), (10.0, Method::Ls), (10.0, Method::Mmse)]
        );
        assert!(rows.iter().all(|r| r.trials == 6 && r.nmse_db.is_finite()));
        // Higher SNR, lower LS error.
        assert!(rows[2].nmse_db < rows[0].nmse_db, "{rows:?}");
        let csv = rows_to_csv(&rows);
        assert!(csv.starts_with("grid,method,nmse_db,nmse_std_db,trials\n0,LS,"));
        assert_eq!(run_sweep(&s, &Models::default()).unwrap(), rows);
    }

    #[test]
    fn grid_values_must_be_legal() {
        assert!(spec(SweepVariable::NumUes, vec![2.5]).validate().is_err());
        assert!(spec(SweepVariable::Distance, vec![-1.0]).validate().is_err());
        assert!(spec(SweepVariable::Snr, vec![]).validate().is_err());
    }

    #[test]
    fn model_dimension_mismatch_names_both() {
        let s = spec(SweepVariable::Snr, vec![0.0]);
        let cfg = ModelConfig {
            kind: ModelKind::Tddm,
            antennas: 8,
            steps: 2,
            hidden: 8,
            ..ModelConfig::default()
        };
        let models = Models {
            tddm: Some(DenoiserModel::new(&cfg, 1.0).unwrap()),
            cddm: None,
        };
        let err = run_sweep(&s, &models).unwrap_err();
        assert!(matches!(err, Error::Config(_)));
        let msg = err.to_string();
        assert!(msg.contains("[3, 2, 8]") && msg.contains("[3, 2, 4]"), "{msg}");
    }

    #[test]
    fn summary_statistics() {
        let r = summarize(1.0, Method::Ls, &[1.0, 100.0]);
        assert!((r.nmse_db - to_db(50.5)).abs() < 1e-12);
        assert!((r.nmse_std_db - 200f64.sqrt()).abs() < 1e-12);
    }
}
