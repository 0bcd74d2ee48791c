use std::fmt::Write as _;

use rand::seq::SliceRandom;
use rand::Rng;

use crate::config::KvDoc;
use crate::dataset::{ue_channels, Dataset, Sample};
use crate::encoders::Conditioning;
use crate::error::{Error, Result};
use crate::numerics::{Mode, OptimizerState, Rmsprop, Tape, Tensor};
use crate::rng::{stream_rng, streams};

use super::model::{conditioning_for, ls_error_variance, DenoiserModel, LossGranularity, ModelConfig};
use super::schedule::training_pair;

/// One `(sample, UE)` training example.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainItem {
    /// Normalized interleaved true channel, length `2·L·M`.
    pub x0: Vec<f64>,
    /// Per-AP scales dividing this item's channel.
    pub scales: Vec<f64>,
    pub conditioning: Conditioning,
    pub sample_id: u64,
    pub ue: usize,
}

/// Items for every UE of every sample, normalized as `model` expects.
pub fn make_items(samples: &[&Sample], model: &DenoiserModel) -> Result<Vec<TrainItem>> {
    let mut items = Vec::new();
    for s in samples {
        let sc = &s.scenario;
        model.check_dims(sc.num_aps, sc.num_receive_aps, sc.antennas)?;
        for u in 0..s.num_ues() {
            let scales = model.item_scales(&ue_channels(&s.h_ls, u), Some(ls_error_variance(s, u)))?;
            let x0 = model.normalize(&ue_channels(&s.h_comm, u), &scales);
            if !x0.iter().all(|x| x.is_finite()) {
                return Err(Error::Input(format!(
                    "sample {} UE {u}: non-finite normalized channel",
                    s.sample_id
                )));
            }
            items.push(TrainItem {
                x0,
                scales,
                conditioning: conditioning_for(s, u)?,
                sample_id: s.sample_id,
                ue: u,
            });
        }
    }
    Ok(items)
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub learning_rate: f64,
    pub decay_factor: f64,
    pub patience: usize,
    pub max_epochs: usize,
    /// Training stops once the learning rate drops below this.
    pub min_learning_rate: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            batch_size: 32,
            learning_rate: 1e-3,
            decay_factor: 0.5,
            patience: 5,
            max_epochs: 200,
            min_learning_rate: 1e-6,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn from_kv(doc: &KvDoc, base: &TrainConfig) -> Result<Self> {
        let b = base;
        let cfg = TrainConfig {
            batch_size: doc.get_or("train.batch_size", b.batch_size)?,
            learning_rate: doc.get_or("train.lr", b.learning_rate)?,
            decay_factor: doc.get_or("train.decay", b.decay_factor)?,
            patience: doc.get_or("train.patience", b.patience)?,
            max_epochs: doc.get_or("train.max_epochs", b.max_epochs)?,
            min_learning_rate: doc.get_or("train.min_lr", b.min_learning_rate)?,
            seed: doc.get_or("train.seed", b.seed)?,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn write_kv(&self, doc: &mut KvDoc) {
        use crate::config::fmt_f64;
        doc.set("train.batch_size", self.batch_size);
        doc.set("train.lr", fmt_f64(self.learning_rate));
        doc.set("train.decay", fmt_f64(self.decay_factor));
        doc.set("train.patience", self.patience);
        doc.set("train.max_epochs", self.max_epochs);
        doc.set("train.min_lr", fmt_f64(self.min_learning_rate));
        doc.set("train.seed", self.seed);
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 || self.max_epochs == 0 {
            return Err(Error::Config("batch size and max epochs must be positive".into()));
        }
        if !(self.learning_rate > 0.0) || !(self.decay_factor > 0.0 && self.decay_factor < 1.0) {
            return Err(Error::Config(format!(
                "need lr > 0 and decay in (0, 1), got {} and {}",
                self.learning_rate, self.decay_factor
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EpochLog {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
    /// Learning rate in effect during the epoch.
    pub lr: f64,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrainingLog {
    pub epochs: Vec<EpochLog>,
}

impl TrainingLog {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("epoch,train_loss,val_loss,lr\n");
        for e in &self.epochs {
            let _ = writeln!(s, "{},{:e},{:e},{:e}", e.epoch, e.train_loss, e.val_loss, e.lr);
        }
        s
    }

    pub fn first(&self) -> Option<&EpochLog> {
        self.epochs.first()
    }

    pub fn last(&self) -> Option<&EpochLog> {
        self.epochs.last()
    }
}

/// Prediction loss of one batch; returns the tape and loss variable so the
/// caller can back-propagate.
fn batch_loss<R: Rng + ?Sized>(
    model: &DenoiserModel,
    batch: &[&TrainItem],
    mode: Mode,
    rng: &mut R,
) -> Result<(Tape, crate::numerics::Var)> {
    let d = model.config.channel_dim();
    let b = batch.len();
    let mut steps = Vec::with_capacity(b);
    let mut x_t = Vec::with_capacity(b * d);
    let mut target = Vec::with_capacity(b * d);
    for item in batch {
        let t = rng.random_range(1..=model.config.steps);
        steps.push(t);
        let (prev, next) = training_pair(&item.x0, t, &model.schedule, rng)?;
        target.extend(prev);
        x_t.extend(next);
    }
    let mut tape = Tape::new();
    let conds: Vec<Option<&Conditioning>> = batch.iter().map(|i| Some(&i.conditioning)).collect();
    let cond = model.encode(&mut tape, &conds, mode)?;
    let x = tape.constant(Tensor::new(&[b, d], x_t)?);
    let pred = model.predict(&mut tape, x, &steps, cond)?;
    let rows = match model.config.loss {
        LossGranularity::Item => b,
        LossGranularity::Link => b * model.config.num_aps,
    };
    let pred = tape.reshape(pred, &[rows, b * d / rows])?;
    let loss = tape.nmse_loss(pred, &Tensor::new(&[rows, b * d / rows], target)?)?;
    Ok((tape, loss))
}

/// Mean per-item loss over `items` in eval mode with a fixed noise stream.
pub fn validation_loss(model: &DenoiserModel, items: &[TrainItem], batch_size: usize, seed: u64) -> Result<f64> {
    let mut rng = stream_rng(seed, streams::VALIDATION_NOISE);
    let refs: Vec<&TrainItem> = items.iter().collect();
    let mut total = 0.0;
    for chunk in refs.chunks(batch_size.max(1)) {
        let (tape, loss) = batch_loss(model, chunk, Mode::Eval, &mut rng)?;
        total += tape.value(loss).data()[0] * chunk.len() as f64;
    }
    Ok(total / items.len().max(1) as f64)
}

/// RMSprop on the one-step prediction loss with plateau learning-rate decay.
///
/// Batches come from a per-epoch shuffle of the train stream; every item
/// draws its own step `t` uniformly.
pub fn train(
    model: &mut DenoiserModel,
    train_items: &[TrainItem],
    val_items: &[TrainItem],
    cfg: &TrainConfig,
) -> Result<TrainingLog> {
    cfg.validate()?;
    if train_items.is_empty() || val_items.is_empty() {
        return Err(Error::Input("training and validation sets must be non-empty".into()));
    }
    let mut rng = stream_rng(cfg.seed, streams::TRAIN_ORDER);
    let mut sched = OptimizerState::new(cfg.learning_rate, cfg.decay_factor, cfg.patience);
    let optim = Rmsprop::default();
    let mut order: Vec<usize> = (0..train_items.len()).collect();
    let mut log = TrainingLog::default();
    for epoch in 1..=cfg.max_epochs {
        let lr = sched.learning_rate;
        order.shuffle(&mut rng);
        let mut total = 0.0;
        for (step, idx) in order.chunks(cfg.batch_size).enumerate() {
            // A lone trailing item cannot feed train-mode batch norm.
            let idx = if idx.len() == 1 && order.len() > 1 && model.encoders().is_some() {
                &order[order.len() - 2..]
            } else {
                idx
            };
            let batch: Vec<&TrainItem> = idx.iter().map(|&i| &train_items[i]).collect();
            let (mut tape, loss) = batch_loss(model, &batch, Mode::Train, &mut rng)?;
            let value = tape.value(loss).data()[0];
            if !value.is_finite() {
                return Err(Error::NonFiniteLoss { epoch, step });
            }
            total += value * batch.len() as f64;
            let grads = tape.backward(loss).param_grads(&tape);
            optim.step(&mut model.store, &grads, lr)?;
            model.store.apply_stat_updates(tape.take_stat_updates());
        }
        let train_loss = total / train_items.len() as f64;
        let val_loss = validation_loss(model, val_items, cfg.batch_size, cfg.seed)?;
        if !val_loss.is_finite() {
            return Err(Error::NonFiniteLoss { epoch, step: 0 });
        }
        log.epochs.push(EpochLog {
            epoch,
            train_loss,
            val_loss,
            lr,
        });
        sched.observe(val_loss);
        if sched.learning_rate < cfg.min_learning_rate {
            break;
        }
    }
    Ok(log)
}

/// Builds a model from `model_cfg` with the dataset's scale and trains it on
/// the dataset's train/validation splits.
pub fn train_on_dataset(
    dataset: &Dataset,
    model_cfg: &ModelConfig,
    train_cfg: &TrainConfig,
) -> Result<(DenoiserModel, TrainingLog)> {
    let mut model = DenoiserModel::new(model_cfg, dataset.manifest.normalization_scale)?;
    let train_items = make_items(&dataset.train(), &model)?;
    let val_items = make_items(&dataset.validation(), &model)?;
    let log = train(&mut model, &train_items, &val_items, train_cfg)?;
    Ok((model, log))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::{generate_dataset, DatasetConfig, KnobRanges};
    use crate::diffusion::ModelKind;
    use crate::scenario::ScenarioConfig;

    fn small_dataset(n: usize) -> Dataset {
        let scenario = ScenarioConfig {
            num_ues: 3,
            pilot_length: 3,
            ..ScenarioConfig::desk()
        };
        let mut cfg = DatasetConfig::fixed(scenario.clone(), n);
        cfg.knobs = KnobRanges {
            num_ues: (2, 4),
            ..KnobRanges::fixed(&scenario)
        };
        generate_dataset(&cfg).unwrap()
    }

    fn small_model(kind: ModelKind) -> ModelConfig {
        ModelConfig {
            kind,
            antennas: 4,
            steps: 10,
            hidden: 64,
            ..ModelConfig::default()
        }
    }

    #[test]
    fn loss_of_perfect_and_zero_predictors() {
        let mut tape = Tape::new();
        let target = Tensor::new(&[2, 3], vec![1.0, -2.0, 0.5, 3.0, 0.1, -1.0]).unwrap();
        let exact = tape.constant(target.clone());
        let zero = tape.constant(Tensor::zeros(&[2, 3]));
        let l0 = tape.nmse_loss(exact, &target).unwrap();
        let l1 = tape.nmse_loss(zero, &target).unwrap();
        assert_eq!(tape.value(l0).data()[0], 0.0);
        assert_eq!(tape.value(l1).data()[0], 1.0);
    }

    #[test]
    fn items_cover_every_ue_and_invert_normalization() {
        let ds = small_dataset(12);
        let model = DenoiserModel::new(&small_model(ModelKind::Cddm), ds.manifest.normalization_scale).unwrap();
        let train = ds.train();
        let items = make_items(&train, &model).unwrap();
        let total: usize = train.iter().map(|s| s.num_ues()).sum();
        assert_eq!(items.len(), total);
        let it = &items[1];
        let s = train.iter().find(|s| s.sample_id == it.sample_id).unwrap();
        let back = model.denormalize(&it.x0, &it.scales);
        for (a, b) in back.iter().zip(ue_channels(&s.h_comm, it.ue)) {
            assert!((a - b).norm() <= 1e-12 * b.norm().max(1e-30));
        }
    }

    #[test]
    fn training_is_deterministic() {
        let ds = small_dataset(12);
        let cfg = TrainConfig {
            batch_size: 4,
            max_epochs: 5,
            seed: 3,
            ..TrainConfig::default()
        };
        let run = || train_on_dataset(&ds, &small_model(ModelKind::Cddm), &cfg).unwrap().1;
        let (a, b) = (run(), run());
        assert_eq!(a.epochs.len(), 5);
        for (x, y) in a.epochs.iter().zip(&b.epochs) {
            assert!((x.train_loss - y.train_loss).abs() <= 1e-10);
            assert!((x.val_loss - y.val_loss).abs() <= 1e-10);
        }
        assert!(a.to_csv().starts_with("epoch,train_loss,val_loss,lr\n1,"));
    }

    #[test]
    fn empty_splits_are_rejected() {
        let ds = small_dataset(10);
        let mut model = DenoiserModel::new(&small_model(ModelKind::Tddm), 1.0).unwrap();
        let items = make_items(&ds.train(), &model).unwrap();
        assert!(matches!(
            train(&mut model, &items, &[], &TrainConfig::default()),
            Err(Error::Input(_))
        ));
    }

    #[test]
    fn short_training_reduces_loss() {
        let ds = small_dataset(25);
        let desk = ModelConfig {
            antennas: 4,
            steps: 20,
            residual: false,
            ..ModelConfig::default()
        };
        let mut model = DenoiserModel::new(&desk, ds.manifest.normalization_scale).unwrap();
        let mut items = make_items(&ds.samples.iter().collect::<Vec<_>>(), &model).unwrap();
        items.truncate(50);
        let cfg = TrainConfig {
            batch_size: 10,
            max_epochs: 40,
            seed: 1,
            ..TrainConfig::default()
        };
        let initial = validation_loss(&model, &items, 10, 7).unwrap();
        let log = train(&mut model, &items, &items, &cfg).unwrap();
        let last = log.last().unwrap().train_loss;
        let fin = validation_loss(&model, &items, 10, 7).unwrap();
        assert!(fin <= 0.7 * initial, "initial {initial}, final {fin}, last train {last}");
    }
}
