//! Acceptance run: one `[PASS]`/`[FAIL]` line per criterion.
//!
//! Exits 0 once every criterion has been measured, whatever the verdicts;
//! `ACCEPTANCE_STRICT=1` turns any FAIL into a non-zero exit. Errors inside
//! the harness itself always abort with a non-zero exit.

use std::time::{Duration, Instant};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use cddm_core::carray::C64;
use cddm_core::channel::{generate_realization, received_pilots};
use cddm_core::dataset::{generate_dataset, Dataset, DatasetConfig, KnobRanges};
use cddm_core::diffusion::{
    forward_sample, forward_step, make_items, make_schedule, train, train_on_dataset, DenoiserModel,
    ModelConfig, ModelKind, StartStep, TrainConfig, TrainingLog,
};
use cddm_core::encoders::{
    ConditionEncoders, Fusion, FusionConfig, LocationEncoder, LocationEncoderConfig, SensingEncoder,
    SensingEncoderConfig,
};
use cddm_core::estimators::{ls_estimate, mmse_estimate};
use cddm_core::experiment::{evaluate_sample, run_sweep, ExperimentSpec, Method, Models, SweepRow, SweepVariable};
use cddm_core::numerics::{
    grad_check, BatchNorm, Conv2d, GradCheckOptions, FD_STEP, Linear, Mode, MultiHeadAttention, ParamStore, Tensor,
};
use cddm_core::rng::stream_rng;
use cddm_core::scenario::ScenarioConfig;
use cddm_core::Result;

const DESK_SAMPLES: usize = 2000;
const DESK_STEPS: usize = 20;
const DESK_EPOCHS: usize = 60;
const SWEEP_TRIALS: usize = 100;
const GRAD_SEEDS: u64 = 10;

struct Verdict {
    id: u32,
    title: &'static str,
    passed: bool,
    detail: String,
    elapsed: Duration,
    budget: Option<Duration>,
}

fn mins(m: u64) -> Option<Duration> {
    Some(Duration::from_secs(60 * m))
}

fn desk() -> ScenarioConfig {
    ScenarioConfig {
        seed: 2024,
        ..ScenarioConfig::desk()
    }
}

// ---------------------------------------------------------------- 1

fn estimator_identities() -> Result<(bool, String)> {
    let base = desk();
    let scen = |u, tau| ScenarioConfig {
        num_ues: u,
        pilot_length: tau,
        ..base.clone()
    };

    let cfg = scen(4, 4);
    let mut worst_ls = 0.0f64;
    for seed in 0..20 {
        let real = generate_realization(&cfg, &mut stream_rng(seed, 0))?;
        let obs = received_pilots(&real, 0.0, &mut stream_rng(seed, 1));
        let h = ls_estimate(&obs, &real.pilot_assignment, &real.powers)?;
        for (a, b) in h.data().iter().zip(real.h_comm.data()) {
            worst_ls = worst_ls.max((a - b).norm() / b.norm());
        }
    }

    let cfg = scen(2, 1);
    let mut worst_sum = 0.0f64;
    for seed in 0..20 {
        let mut real = generate_realization(&cfg, &mut stream_rng(100 + seed, 0))?;
        real.powers = vec![0.05, 0.05];
        let obs = received_pilots(&real, 0.0, &mut stream_rng(100 + seed, 1));
        let h = ls_estimate(&obs, &real.pilot_assignment, &real.powers)?;
        for l in 0..real.num_aps() {
            for ((e, a), b) in h.slice(&[l, 0]).iter().zip(real.channel(l, 0)).zip(real.channel(l, 1)) {
                worst_sum = worst_sum.max((e - (a + b)).norm() / (a + b).norm());
            }
        }
    }

    let cfg = ScenarioConfig {
        rician_k: 0.0,
        ..scen(4, 4)
    };
    let mut rng = stream_rng(7, 0);
    let (mut mse_ls, mut mse_mmse) = (0.0, 0.0);
    for _ in 0..10_000 {
        let real = generate_realization(&cfg, &mut rng)?;
        let obs = received_pilots(&real, cfg.noise_power_w, &mut rng);
        let ls = ls_estimate(&obs, &real.pilot_assignment, &real.powers)?;
        let mm = mmse_estimate(&obs, &real.pilot_assignment, &real.powers, &real.large_scale, cfg.noise_power_w)?;
        let t = real.h_comm.data();
        let sq = |x: &[C64]| x.iter().zip(t).map(|(a, b)| (a - b).norm_sqr()).sum::<f64>();
        mse_ls += sq(ls.data());
        mse_mmse += sq(mm.data());
    }
    let passed = worst_ls <= 1e-10 && worst_sum <= 1e-12 && mse_mmse <= mse_ls;
    Ok((
        passed,
        format!(
            "noiseless LS rel err {worst_ls:.1e} (<= 1e-10); shared-pilot h1+h2 rel err {worst_sum:.1e}; \
             MSE over 1e4 Rayleigh draws MMSE/LS = {:.4}",
            mse_mmse / mse_ls
        ),
    ))
}

// ---------------------------------------------------------------- 2

fn forward_process_oracle() -> Result<(bool, String)> {
    let steps = 20;
    let sched = make_schedule(steps)?;
    let mut prod_err = 0.0f64;
    let mut acc = 1.0f64;
    for i in 0..steps {
        acc *= 0.9999 - 0.0199 * (i as f64) / ((steps - 1) as f64);
        prod_err = prod_err.max((sched.alpha_bar(i + 1)? - acc).abs());
    }

    let x0 = [1.0, -0.5, 2.0, 0.3];
    let draws = 100_000;
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut worst = 0.0f64;
    let mut worst_oracle = 0.0f64;
    for t in [1, 5, 20] {
        let mut chain = [[0.0f64; 2]; 4];
        let mut marg = [[0.0f64; 2]; 4];
        for _ in 0..draws {
            let mut x = x0.to_vec();
            for s in 1..=t {
                x = forward_step(&x, s, &sched, &mut rng)?;
            }
            let y = forward_sample(&x0, t, &sched, &mut rng)?;
            for i in 0..4 {
                chain[i][0] += x[i];
                chain[i][1] += x[i] * x[i];
                marg[i][0] += y[i];
                marg[i][1] += y[i] * y[i];
            }
        }
        let ab = sched.alpha_bar(t)?;
        for i in 0..4 {
            let n = draws as f64;
            let oracle = [ab.sqrt() * x0[i], ab * x0[i] * x0[i] + 1.0 - ab];
            for k in 0..2 {
                let (c, m) = (chain[i][k] / n, marg[i][k] / n);
                worst = worst.max((c - m).abs() / m.abs());
                worst_oracle = worst_oracle.max((c - oracle[k]).abs() / oracle[k].abs());
            }
        }
    }
    Ok((
        prod_err <= 1e-15 && worst <= 0.02,
        format!(
            "schedule product err {prod_err:.1e} (<= 1e-15); chain vs marginal moments max rel diff {:.3}% \
             (<= 2%), chain vs closed form {:.3}%",
            100.0 * worst,
            100.0 * worst_oracle
        ),
    ))
}

// ---------------------------------------------------------------- 3

fn uniform(shape: &[usize], seed: u64) -> Tensor {
    Tensor::uniform(shape, 1.0, &mut ChaCha8Rng::seed_from_u64(seed))
}

fn grad_suite() -> Result<(bool, String)> {
    let opts = |seed| GradCheckOptions {
        max_coords_per_tensor: Some(8),
        seed,
        ..Default::default()
    };
    let mut results: Vec<(&str, usize, f64, usize)> = Vec::new();
    let mut tally = |name, report: cddm_core::numerics::GradCheckReport| {
        let failed = report.failures().count();
        let refined = report.checks.iter().filter(|c| c.step < FD_STEP).count();
        match results.iter_mut().find(|r| r.0 == name) {
            Some(r) => {
                r.1 += failed;
                r.2 = r.2.max(report.max_rel_error_significant());
                r.3 += refined;
            }
            None => results.push((name, failed, report.max_rel_error_significant(), refined)),
        }
    };

    for seed in 0..GRAD_SEEDS {
        let mut rng = stream_rng(seed, 0);

        let mut store = ParamStore::new();
        let lin = Linear::new(&mut store, "lin", 5, 3, &mut rng);
        let r = grad_check(|t, s, v| lin.forward(t, s, v[0]), &store, &[uniform(&[4, 5], seed)], &opts(seed))?;
        tally("linear", r);

        let mut store = ParamStore::new();
        let conv = Conv2d::new(&mut store, "conv", 2, 3, 3, 1, 1, &mut rng);
        let r = grad_check(|t, s, v| conv.forward(t, s, v[0]), &store, &[uniform(&[2, 2, 4, 4], seed)], &opts(seed))?;
        tally("conv2d", r);

        let mut store = ParamStore::new();
        let bn = BatchNorm::new(&mut store, "bn", 3);
        let r = grad_check(
            |t, s, v| bn.forward(t, s, v[0], Mode::Train),
            &store,
            &[uniform(&[4, 3, 2, 2], seed)],
            &opts(seed),
        )?;
        tally("batchnorm", r);

        let r = grad_check(|t, _, v| Ok(t.relu(v[0])), &store, &[uniform(&[6, 5], seed)], &opts(seed))?;
        tally("relu", r);

        let mut store = ParamStore::new();
        let conv = Conv2d::new(&mut store, "conv", 2, 4, 3, 1, 1, &mut rng);
        let bn = BatchNorm::new(&mut store, "bn", 4);
        let r = grad_check(
            |t, s, v| {
                let x = conv.forward(t, s, v[0])?;
                let x = bn.forward(t, s, x, Mode::Train)?;
                Ok(t.relu(x))
            },
            &store,
            &[uniform(&[3, 2, 4, 4], seed)],
            &opts(seed),
        )?;
        tally("conv-batchnorm-relu", r);

        let mut store = ParamStore::new();
        let mha = MultiHeadAttention::new(&mut store, "mha", 8, 4, &mut rng)?;
        let r = grad_check(
            |t, s, v| Ok(mha.forward(t, s, v[0], v[1], 2)?.output),
            &store,
            &[uniform(&[2, 8], seed), uniform(&[6, 8], seed + 100)],
            &opts(seed),
        )?;
        tally("multi-head attention", r);

        let mut store = ParamStore::new();
        let sens = SensingEncoder::new(&mut store, "s", &SensingEncoderConfig::default(), 2, 4, &mut rng)?;
        let r = grad_check(
            |t, s, v| sens.forward(t, s, v[0], Mode::Train),
            &store,
            &[uniform(&[4, 2, 4, 4], seed)],
            &opts(seed),
        )?;
        tally("sensing encoder", r);

        let mut store = ParamStore::new();
        let loc = LocationEncoder::new(&mut store, "l", &LocationEncoderConfig::default(), &mut rng);
        let r = grad_check(|t, s, v| loc.forward(t, s, v[0]), &store, &[uniform(&[3, 4], seed)], &opts(seed))?;
        tally("location encoder", r);

        let mut store = ParamStore::new();
        let fusion = Fusion::new(&mut store, "f", &FusionConfig::default(), 16, &mut rng)?;
        let r = grad_check(
            |t, s, v| Ok(fusion.forward(t, s, v[0], v[1], 2)?.output),
            &store,
            &[uniform(&[4, 16], seed), uniform(&[2, 16], seed + 100)],
            &opts(seed),
        )?;
        tally("fusion", r);

        let mut store = ParamStore::new();
        let enc = ConditionEncoders::new(
            &mut store,
            "enc",
            &SensingEncoderConfig::default(),
            &LocationEncoderConfig::default(),
            &FusionConfig::default(),
            2,
            4,
            &mut rng,
        )?;
        let r = grad_check(
            |t, s, v| Ok(enc.forward_vars(t, s, v[0], v[1], 2, Mode::Train)?.fusion.output),
            &store,
            &[uniform(&[4, 2, 4, 4], seed), uniform(&[2, 4], seed + 100)],
            &opts(seed),
        )?;
        tally("encoder stack", r);

        let cfg = ModelConfig {
            antennas: 4,
            steps: DESK_STEPS,
            hidden: 48,
            seed,
            ..ModelConfig::default()
        };
        let model = DenoiserModel::new(&cfg, 1.0)?;
        let enc = model.encoders().expect("conditioned model");
        let d = cfg.channel_dim();
        let steps = [1 + seed as usize % DESK_STEPS, DESK_STEPS - seed as usize % 7];
        let target = uniform(&[2, d], seed + 300);
        let r = grad_check(
            |t, s, v| {
                let cond = enc.forward_vars(t, s, v[0], v[1], 2, Mode::Train)?.fusion.output;
                let pred = model.predict_with(s, t, v[2], &steps, cond)?;
                t.nmse_loss(pred, &target)
            },
            &model.store,
            &[uniform(&[4, 2, 4, 4], seed), uniform(&[2, 4], seed + 100), uniform(&[2, d], seed + 200)],
            &opts(seed),
        )?;
        tally("encoder -> MLP -> loss", r);
    }
    let passed = results.iter().all(|r| r.1 == 0);
    let detail = results
        .iter()
        .map(|(n, f, e, k)| match (*f, *k) {
            (0, 0) => format!("{n} ok ({e:.0e})"),
            (0, k) => format!("{n} ok ({e:.0e}, {k} coords refined past a kink)"),
            (f, _) => format!("{n} {f} FAILED coords"),
        })
        .collect::<Vec<_>>()
        .join(", ");
    Ok((passed, format!("{GRAD_SEEDS} seeds at 1e-4: {detail}")))
}

trait SignificantMax {
    fn max_rel_error_significant(&self) -> f64;
}

impl SignificantMax for cddm_core::numerics::GradCheckReport {
    /// Largest relative error among coordinates whose derivative is not ~0.
    fn max_rel_error_significant(&self) -> f64 {
        self.checks
            .iter()
            .filter(|c| c.analytic.abs().max(c.numeric.abs()) >= 1e-6)
            .map(|c| c.rel_error)
            .fold(0.0, f64::max)
    }
}

// ---------------------------------------------------------------- training

struct Trained {
    dataset: Dataset,
    models: Models,
    cddm_log: TrainingLog,
    tddm_log: TrainingLog,
    elapsed: Duration,
}

fn desk_dataset() -> Result<Dataset> {
    let cfg = DatasetConfig {
        scenario: desk(),
        knobs: KnobRanges {
            num_ues: (3, 8),
            pilot_lengths: vec![4, 6],
            max_target_distance: (2.5, 20.0),
            target_snr_db: (0.0, 10.0),
        },
        num_samples: DESK_SAMPLES,
    };
    generate_dataset(&cfg)
}

fn train_desk() -> Result<Trained> {
    let t0 = Instant::now();
    let dataset = desk_dataset()?;
    let tcfg = TrainConfig {
        max_epochs: DESK_EPOCHS,
        seed: 1,
        ..TrainConfig::default()
    };
    let mut logs = Vec::new();
    let mut models = Models::default();
    for kind in [ModelKind::Cddm, ModelKind::Tddm] {
        let mcfg = ModelConfig {
            kind,
            antennas: 4,
            steps: DESK_STEPS,
            seed: 1,
            ..ModelConfig::default()
        };
        let t = Instant::now();
        let (model, log) = train_on_dataset(&dataset, &mcfg, &tcfg)?;
        let last = log.last().expect("at least one epoch");
        println!(
            "    trained {} in {:.0?}: {} epochs, train loss {:.4e} -> {:.4e}",
            kind.name(),
            t.elapsed(),
            log.epochs.len(),
            log.first().expect("at least one epoch").train_loss,
            last.train_loss
        );
        match kind {
            ModelKind::Cddm => models.cddm = Some(model),
            ModelKind::Tddm => models.tddm = Some(model),
        }
        logs.push(log);
    }
    let tddm_log = logs.pop().expect("two logs");
    let cddm_log = logs.pop().expect("two logs");
    Ok(Trained {
        dataset,
        models,
        cddm_log,
        tddm_log,
        elapsed: t0.elapsed(),
    })
}

fn sweep(variable: SweepVariable, grid: Vec<f64>, scenario: ScenarioConfig, models: &Models) -> Result<Vec<SweepRow>> {
    let spec = ExperimentSpec {
        variable,
        grid,
        scenario,
        cddm_checkpoint: None,
        tddm_checkpoint: None,
        trials: SWEEP_TRIALS,
        output: None,
        start: StartStep::Full,
    };
    run_sweep(&spec, models)
}

fn row(rows: &[SweepRow], grid: f64, method: Method) -> f64 {
    rows.iter()
        .find(|r| r.grid == grid && r.method == method)
        .map(|r| r.nmse_db)
        .expect("row present")
}

// ---------------------------------------------------------------- 4

fn snr_trend(tr: &Trained) -> Result<(bool, String)> {
    let scenario = ScenarioConfig {
        num_ues: 6,
        pilot_length: 6,
        max_target_distance: 10.0,
        target_snr_db: 0.0,
        seed: 77,
        ..desk()
    };
    let rows = sweep(SweepVariable::Snr, vec![0.0], scenario, &tr.models)?;
    let [ls, mmse, tddm, cddm] = [Method::Ls, Method::Mmse, Method::Tddm, Method::Cddm].map(|m| row(&rows, 0.0, m));
    let passed = cddm <= ls - 3.0 && cddm < mmse;
    Ok((
        passed,
        format!(
            "U=6 tau=6 0 dB, {SWEEP_TRIALS} held-out scenarios: LS {ls:.2} dB, MMSE {mmse:.2} dB, TDDM {tddm:.2} dB, \
             CDDM {cddm:.2} dB (need <= LS-3 = {:.2} and < MMSE)",
            ls - 3.0
        ),
    ))
}

// ---------------------------------------------------------------- 5

fn conditioning_benefit(tr: &Trained) -> Result<(bool, String)> {
    let near: Vec<_> = tr
        .dataset
        .test()
        .into_iter()
        .filter(|s| s.scenario.max_target_distance <= 10.0)
        .collect();
    let (mut c, mut t) = (0.0, 0.0);
    for s in &near {
        for (m, v) in evaluate_sample(s, &tr.models, StartStep::Full)? {
            match m {
                Method::Cddm => c += v,
                Method::Tddm => t += v,
                _ => {}
            }
        }
    }
    let n = near.len() as f64;
    let (c, t) = (c / n, t / n);
    Ok((
        c <= 0.95 * t,
        format!(
            "{} test samples with d <= 10 m: CDDM {c:.4} vs TDDM {t:.4} linear, ratio {:.3} (need <= 0.95)",
            near.len(),
            c / t
        ),
    ))
}

// ---------------------------------------------------------------- 6

fn contamination(tr: &Trained) -> Result<(bool, String)> {
    let scenario = ScenarioConfig {
        num_ues: 4,
        pilot_length: 4,
        max_target_distance: 10.0,
        target_snr_db: 0.0,
        seed: 78,
        ..desk()
    };
    let grid: Vec<f64> = (3..=8).map(f64::from).collect();
    let rows = sweep(SweepVariable::NumUes, grid.clone(), scenario, &tr.models)?;
    let lin = |db: f64| 10f64.powf(db / 10.0);
    let ratio = lin(row(&rows, 8.0, Method::Ls)) / lin(row(&rows, 4.0, Method::Ls));
    let below: Vec<bool> = grid
        .iter()
        .map(|&u| row(&rows, u, Method::Cddm) < row(&rows, u, Method::Mmse))
        .collect();
    let table = grid
        .iter()
        .map(|&u| {
            format!(
                "U={u}: LS {:.1}/MMSE {:.1}/CDDM {:.1}",
                row(&rows, u, Method::Ls),
                row(&rows, u, Method::Mmse),
                row(&rows, u, Method::Cddm)
            )
        })
        .collect::<Vec<_>>()
        .join("; ");
    Ok((
        ratio >= 5.0 && below.iter().all(|&b| b),
        format!(
            "tau=4 0 dB: LS(U=8)/LS(U=4) = {ratio:.2} (need >= 5); CDDM < MMSE at {}/{} U; {table}",
            below.iter().filter(|&&b| b).count(),
            below.len()
        ),
    ))
}

// ---------------------------------------------------------------- 7

fn spearman(x: &[f64], y: &[f64]) -> f64 {
    fn ranks(v: &[f64]) -> Vec<f64> {
        let mut idx: Vec<usize> = (0..v.len()).collect();
        idx.sort_by(|&a, &b| v[a].total_cmp(&v[b]));
        let mut r = vec![0.0; v.len()];
        let mut i = 0;
        while i < idx.len() {
            let mut j = i;
            while j + 1 < idx.len() && v[idx[j + 1]] == v[idx[i]] {
                j += 1;
            }
            for k in i..=j {
                r[idx[k]] = (i + j) as f64 / 2.0 + 1.0;
            }
            i = j + 1;
        }
        r
    }
    let (rx, ry) = (ranks(x), ranks(y));
    let n = x.len() as f64;
    let (mx, my) = (rx.iter().sum::<f64>() / n, ry.iter().sum::<f64>() / n);
    let cov: f64 = rx.iter().zip(&ry).map(|(a, b)| (a - mx) * (b - my)).sum();
    let vx: f64 = rx.iter().map(|a| (a - mx).powi(2)).sum();
    let vy: f64 = ry.iter().map(|b| (b - my).powi(2)).sum();
    cov / (vx * vy).sqrt()
}

fn distance_trend(tr: &Trained) -> Result<(bool, String)> {
    let scenario = ScenarioConfig {
        num_ues: 8,
        pilot_length: 4,
        target_snr_db: 0.0,
        seed: 79,
        ..desk()
    };
    let grid = vec![2.5, 5.0, 10.0, 15.0, 20.0];
    let rows = sweep(SweepVariable::Distance, grid.clone(), scenario, &tr.models)?;
    let curve = |m| grid.iter().map(|&d| row(&rows, d, m)).collect::<Vec<f64>>();
    let cddm = curve(Method::Cddm);
    let rho = spearman(&grid, &cddm);
    let spread = |v: &[f64]| {
        let mean = v.iter().sum::<f64>() / v.len() as f64;
        v.iter().map(|x| (x - mean).abs()).fold(0.0, f64::max)
    };
    let (ls, mmse) = (curve(Method::Ls), curve(Method::Mmse));
    let fmt = |v: &[f64]| v.iter().map(|x| format!("{x:.2}")).collect::<Vec<_>>().join("/");
    Ok((
        rho > 0.0 && spread(&ls) <= 0.5 && spread(&mmse) <= 0.5,
        format!(
            "d = 2.5/5/10/15/20: CDDM {} dB, Spearman {rho:.2} (need > 0); LS {} max dev {:.2} dB, \
             MMSE {} max dev {:.2} dB (need <= 0.5)",
            fmt(&cddm),
            fmt(&ls),
            spread(&ls),
            fmt(&mmse),
            spread(&mmse)
        ),
    ))
}

// ---------------------------------------------------------------- 8

fn reproducibility() -> Result<(bool, String)> {
    let cfg = DatasetConfig {
        knobs: KnobRanges {
            num_ues: (3, 8),
            pilot_lengths: vec![4, 6],
            max_target_distance: (2.5, 20.0),
            target_snr_db: (0.0, 10.0),
        },
        ..DatasetConfig::fixed(desk(), 60)
    };
    let (a, b) = (generate_dataset(&cfg)?, generate_dataset(&cfg)?);
    let data_same = a.samples_to_bytes() == b.samples_to_bytes() && a.manifest.to_text() == b.manifest.to_text();

    let mcfg = ModelConfig {
        antennas: 4,
        steps: DESK_STEPS,
        hidden: 64,
        seed: 9,
        ..ModelConfig::default()
    };
    let tcfg = TrainConfig {
        max_epochs: 2,
        batch_size: 16,
        seed: 9,
        ..TrainConfig::default()
    };
    let ckpt = || -> Result<(Vec<u8>, DenoiserModel)> {
        let mut model = DenoiserModel::new(&mcfg, a.manifest.normalization_scale)?;
        let items = make_items(&a.train(), &model)?;
        let val = make_items(&a.validation(), &model)?;
        train(&mut model, &items, &val, &tcfg)?;
        Ok((model.to_checkpoint().to_bytes(), model))
    };
    let ((c1, m1), (c2, _)) = (ckpt()?, ckpt()?);
    let ckpt_same = c1 == c2;

    let models = Models {
        cddm: Some(m1),
        tddm: None,
    };
    let spec = ExperimentSpec {
        variable: SweepVariable::Snr,
        grid: vec![0.0, 10.0],
        scenario: ScenarioConfig {
            num_ues: 4,
            pilot_length: 4,
            ..desk()
        },
        cddm_checkpoint: None,
        tddm_checkpoint: None,
        trials: 8,
        output: None,
        start: StartStep::Full,
    };
    let (r1, r2) = (run_sweep(&spec, &models)?, run_sweep(&spec, &models)?);
    let metric_diff = r1
        .iter()
        .zip(&r2)
        .map(|(x, y)| (x.nmse_db - y.nmse_db).abs().max((x.nmse_std_db - y.nmse_std_db).abs()))
        .fold(0.0, f64::max);
    Ok((
        data_same && ckpt_same && metric_diff <= 1e-12 && r1.len() == r2.len(),
        format!(
            "dataset bytes identical: {data_same}; checkpoint bytes identical: {ckpt_same}; \
             sweep rows max diff {metric_diff:.1e} (<= 1e-12)"
        ),
    ))
}

// ---------------------------------------------------------------- 9

fn training_curve(tr: &Trained) -> Result<(bool, String)> {
    let ends = |log: &TrainingLog| {
        (
            log.first().expect("epochs").train_loss,
            log.last().expect("epochs").train_loss,
        )
    };
    let (c0, c1) = ends(&tr.cddm_log);
    let t1 = ends(&tr.tddm_log).1;
    Ok((
        c1 <= 0.5 * c0 && c1 <= t1,
        format!(
            "CDDM train loss {c0:.4e} -> {c1:.4e} (ratio {:.3}, need <= 0.5); TDDM final {t1:.4e} \
             (need CDDM final <= TDDM final)",
            c1 / c0
        ),
    ))
}

// ---------------------------------------------------------------- driver

fn main() {
    let start = Instant::now();
    let mut verdicts: Vec<Verdict> = Vec::new();
    let mut run = |id, title, budget: Option<Duration>, f: &dyn Fn() -> Result<(bool, String)>| {
        let t = Instant::now();
        let (passed, detail) = f().unwrap_or_else(|e| panic!("criterion {id} errored: {e}"));
        let elapsed = t.elapsed();
        let v = Verdict {
            id,
            title,
            passed: passed && budget.is_none_or(|b| elapsed <= b),
            detail,
            elapsed,
            budget,
        };
        print_verdict(&v);
        verdicts.push(v);
    };

    run(1, "estimator identities", mins(2), &estimator_identities);
    run(2, "forward-process oracle", mins(2), &forward_process_oracle);
    run(3, "gradient suite", mins(5), &grad_suite);
    run(8, "reproducibility", None, &reproducibility);

    println!("    training desk CDDM and TDDM ({DESK_SAMPLES} samples, T = {DESK_STEPS}, <= {DESK_EPOCHS} epochs)");
    let trained = train_desk().unwrap_or_else(|e| panic!("desk training errored: {e}"));
    let train_time = trained.elapsed;
    let tr = &trained;
    run(4, "NMSE vs SNR trend", None, &|| {
        let t = Instant::now();
        let (ok, d) = snr_trend(tr)?;
        let total = train_time + t.elapsed();
        Ok((ok && total <= Duration::from_secs(30 * 60), format!("{d}; with training {total:.0?} (<= 30 min)")))
    });
    run(5, "conditioning benefit", None, &|| conditioning_benefit(tr));
    run(6, "pilot-contamination robustness", mins(10), &|| contamination(tr));
    run(7, "distance trend", None, &|| distance_trend(tr));
    run(9, "training-curve sanity", None, &|| training_curve(tr));

    verdicts.sort_by_key(|v| v.id);
    let failed: Vec<String> = verdicts.iter().filter(|v| !v.passed).map(|v| v.id.to_string()).collect();
    println!("---- acceptance summary ({:.0?})", start.elapsed());
    for v in &verdicts {
        println!("{} {}. {}", if v.passed { "[PASS]" } else { "[FAIL]" }, v.id, v.title);
    }
    if failed.is_empty() {
        println!("all {} criteria passed", verdicts.len());
    } else {
        println!("{} of {} criteria failed: {}", failed.len(), verdicts.len(), failed.join(", "));
        if std::env::var("ACCEPTANCE_STRICT").is_ok_and(|v| v == "1") {
            std::process::exit(1);
        }
    }
}

fn print_verdict(v: &Verdict) {
    let budget = v.budget.map(|b| format!(", budget {b:.0?}")).unwrap_or_default();
    println!(
        "{} {}. {} [{:.1?}{budget}]: {}",
        if v.passed { "[PASS]" } else { "[FAIL]" },
        v.id,
        v.title,
        v.elapsed,
        v.detail
    );
}
