use std::path::Path;

use crate::carray::C64;
use crate::config::{fmt_f64, KvDoc};
use crate::encoders::{
    rms_scale, ConditionEncoders, Conditioning, FusionConfig, LocationEncoderConfig,
    SensingEncoderConfig,
};
use crate::error::{Error, Result};
use crate::numerics::{Checkpoint, Linear, Mode, ParamId, ParamStore, Tape, Tensor, Var};
use crate::rng::{stream_rng, streams};

use super::schedule::{make_schedule, DiffusionSchedule};

/// Rows over which the training NMSE is normalized.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LossGranularity {
    /// One ratio per UE vector.
    Item,
    /// One ratio per AP block, averaged.
    Link,
}

impl std::str::FromStr for LossGranularity {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "item" => Ok(LossGranularity::Item),
            "link" => Ok(LossGranularity::Link),
            other => Err(Error::Config(format!("unknown loss granularity `{other}`"))),
        }
    }
}

impl LossGranularity {
    pub fn name(self) -> &'static str {
        match self {
            LossGranularity::Item => "item",
            LossGranularity::Link => "link",
        }
    }
}

/// Conditioned (sensing + location) or unconditioned denoiser.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ModelKind {
    Cddm,
    Tddm,
}

impl ModelKind {
    pub fn name(self) -> &'static str {
        match self {
            ModelKind::Cddm => "cddm",
            ModelKind::Tddm => "tddm",
        }
    }
}

impl std::str::FromStr for ModelKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "cddm" => Ok(ModelKind::Cddm),
            "tddm" => Ok(ModelKind::Tddm),
            other => Err(Error::Config(format!("unknown model kind `{other}`"))),
        }
    }
}

/// How channel vectors are scaled before entering the network.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Normalization {
    /// Divide by the dataset-wide scale.
    Global,
    /// Divide by the RMS of the item's own LS estimate.
    PerItem,
    /// Divide each AP's block by the RMS of its LS estimate.
    PerLink,
    /// Scale each UE so its LS error matches the step-`T` forward noise.
    NoiseLevel,
    /// [`Normalization::PerLink`], floored at the [`Normalization::NoiseLevel`] scale.
    PerLinkFloor,
}

impl std::str::FromStr for Normalization {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "global" => Ok(Normalization::Global),
            "per_item" | "per-item" => Ok(Normalization::PerItem),
            "per_link" | "per-link" => Ok(Normalization::PerLink),
            "noise" => Ok(Normalization::NoiseLevel),
            "per_link_floor" => Ok(Normalization::PerLinkFloor),
            other => Err(Error::Config(format!("unknown normalization `{other}`"))),
        }
    }
}

impl Normalization {
    pub fn name(self) -> &'static str {
        match self {
            Normalization::Global => "global",
            Normalization::PerItem => "per_item",
            Normalization::PerLink => "per_link",
            Normalization::NoiseLevel => "noise",
            Normalization::PerLinkFloor => "per_link_floor",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub kind: ModelKind,
    pub num_aps: usize,
    pub num_receive_aps: usize,
    pub antennas: usize,
    /// Diffusion steps `T`.
    pub steps: usize,
    pub time_dim: usize,
    pub hidden: usize,
    pub sensing: SensingEncoderConfig,
    pub location: LocationEncoderConfig,
    pub fusion: FusionConfig,
    pub normalization: Normalization,
    /// Predict `x_t/√α_t + √(1−α_t)·MLP(·)` instead of `MLP(·)`.
    pub residual: bool,
    pub loss: LossGranularity,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            kind: ModelKind::Cddm,
            num_aps: 3,
            num_receive_aps: 2,
            antennas: 8,
            steps: 50,
            time_dim: 16,
            hidden: 512,
            sensing: SensingEncoderConfig::default(),
            location: LocationEncoderConfig::default(),
            fusion: FusionConfig::default(),
            normalization: Normalization::PerLinkFloor,
            residual: true,
            loss: LossGranularity::Link,
            seed: 0,
        }
    }
}

impl ModelConfig {
    /// Real length `2·L·M` of one UE's channel vector.
    pub fn channel_dim(&self) -> usize {
        2 * self.num_aps * self.antennas
    }

    pub fn cond_dim(&self) -> usize {
        self.fusion.output_dim
    }

    pub fn with_kind(&self, kind: ModelKind) -> Self {
        ModelConfig {
            kind,
            ..self.clone()
        }
    }

    /// Reads `model.*` keys over `base`.
    pub fn from_kv(doc: &KvDoc, base: &ModelConfig) -> Result<Self> {
        let b = base;
        let filters = doc
            .get_list("model.sensing_filters")?
            .unwrap_or_else(|| b.sensing.conv_filters.clone());
        let num_receive_aps = doc.get_or("model.L_r", b.num_receive_aps)?;
        Ok(ModelConfig {
            kind: doc.get_or("model.kind", b.kind)?,
            num_aps: num_receive_aps + 1,
            num_receive_aps,
            antennas: doc.get_or("model.M", b.antennas)?,
            steps: doc.get_or("model.T", b.steps)?,
            time_dim: doc.get_or("model.time_dim", b.time_dim)?,
            hidden: doc.get_or("model.hidden", b.hidden)?,
            sensing: SensingEncoderConfig {
                conv_filters: filters,
                kernel_size: doc.get_or("model.sensing_kernel", b.sensing.kernel_size)?,
                embedding_dim: doc.get_or("model.embedding_dim", b.sensing.embedding_dim)?,
            },
            location: LocationEncoderConfig {
                hidden: doc.get_or("model.location_hidden", b.location.hidden)?,
                embedding_dim: doc.get_or("model.embedding_dim", b.location.embedding_dim)?,
            },
            fusion: FusionConfig {
                layers: doc.get_or("model.fusion_layers", b.fusion.layers)?,
                heads: doc.get_or("model.heads", b.fusion.heads)?,
                feedforward_hidden: doc.get_or("model.ff_hidden", b.fusion.feedforward_hidden)?,
                output_dim: doc.get_or("model.cond_dim", b.fusion.output_dim)?,
            },
            normalization: doc.get_or("model.normalization", b.normalization)?,
            residual: doc.get_or("model.residual", b.residual)?,
            loss: doc.get_or("model.loss", b.loss)?,
            seed: doc.get_or("model.seed", b.seed)?,
        })
    }

    pub fn write_kv(&self, doc: &mut KvDoc) {
        doc.set("model.kind", self.kind.name());
        doc.set("model.L", self.num_aps);
        doc.set("model.L_r", self.num_receive_aps);
        doc.set("model.M", self.antennas);
        doc.set("model.T", self.steps);
        doc.set("model.time_dim", self.time_dim);
        doc.set("model.hidden", self.hidden);
        let f: Vec<String> = self.sensing.conv_filters.iter().map(|x| x.to_string()).collect();
        doc.set("model.sensing_filters", f.join(","));
        doc.set("model.sensing_kernel", self.sensing.kernel_size);
        doc.set("model.embedding_dim", self.sensing.embedding_dim);
        doc.set("model.location_hidden", self.location.hidden);
        doc.set("model.fusion_layers", self.fusion.layers);
        doc.set("model.heads", self.fusion.heads);
        doc.set("model.ff_hidden", self.fusion.feedforward_hidden);
        doc.set("model.cond_dim", self.fusion.output_dim);
        doc.set("model.normalization", self.normalization.name());
        doc.set("model.residual", self.residual);
        doc.set("model.loss", self.loss.name());
        doc.set("model.seed", self.seed);
    }
}

/// `[L·M]` complex block to `2·L·M` interleaved reals.
pub fn interleave(block: &[C64]) -> Vec<f64> {
    block.iter().flat_map(|z| [z.re, z.im]).collect()
}

pub fn deinterleave(x: &[f64]) -> Vec<C64> {
    x.chunks(2).map(|p| C64::new(p[0], p[1])).collect()
}

/// Reverse-step MLP `x_{t−1} = MLP(x_t ⊕ τ_t ⊕ R_MMT)` plus, for the
/// conditioned kind, the encoder stack producing `R_MMT`.
#[derive(Clone, Debug)]
pub struct DenoiserModel {
    pub config: ModelConfig,
    pub store: ParamStore,
    pub schedule: DiffusionSchedule,
    pub normalization_scale: f64,
    encoders: Option<ConditionEncoders>,
    time_embedding: ParamId,
    layers: Vec<Linear>,
}

impl DenoiserModel {
    /// Fresh parameters drawn from the model-init stream of `config.seed`.
    pub fn new(config: &ModelConfig, normalization_scale: f64) -> Result<Self> {
        if !(normalization_scale > 0.0 && normalization_scale.is_finite()) {
            return Err(Error::Config(format!(
                "normalization scale must be positive, got {normalization_scale}"
            )));
        }
        if config.num_aps != config.num_receive_aps + 1 || config.antennas == 0 {
            return Err(Error::Config(format!(
                "model dims L = {}, L_r = {}, M = {} are inconsistent",
                config.num_aps, config.num_receive_aps, config.antennas
            )));
        }
        let schedule = make_schedule(config.steps)?;
        let mut rng = stream_rng(config.seed, streams::MODEL_INIT);
        let mut store = ParamStore::new();
        let d = config.channel_dim();
        let time_embedding =
            store.add_fan_in("mlp.time_embedding", &[config.steps, config.time_dim], 1, &mut rng);
        let dims = [
            d + config.time_dim + config.cond_dim(),
            config.hidden,
            config.hidden,
            d,
        ];
        let layers = dims
            .windows(2)
            .enumerate()
            .map(|(i, w)| Linear::new(&mut store, &format!("mlp.layer{i}"), w[0], w[1], &mut rng))
            .collect();
        let encoders = match config.kind {
            ModelKind::Cddm => Some(ConditionEncoders::new(
                &mut store,
                "encoders",
                &config.sensing,
                &config.location,
                &config.fusion,
                config.num_receive_aps,
                config.antennas,
                &mut rng,
            )?),
            ModelKind::Tddm => None,
        };
        Ok(DenoiserModel {
            config: config.clone(),
            store,
            schedule,
            normalization_scale,
            encoders,
            time_embedding,
            layers,
        })
    }

    pub fn kind(&self) -> ModelKind {
        self.config.kind
    }

    pub fn mlp_layers(&self) -> &[Linear] {
        &self.layers
    }

    pub fn encoders(&self) -> Option<&ConditionEncoders> {
        self.encoders.as_ref()
    }

    /// Per-AP scales dividing a UE's `[L·M]` channel, from its LS estimate
    /// and per-entry LS error variance.
    pub fn item_scales(&self, ls_block: &[C64], ls_error_variance: Option<f64>) -> Result<Vec<f64>> {
        let l = self.config.num_aps;
        let rms = |v: &[C64]| {
            let s = (crate::carray::norm_sqr(v) / (2 * v.len()).max(1) as f64).sqrt();
            if s > 0.0 && s.is_finite() {
                s
            } else {
                self.normalization_scale
            }
        };
        let noise_scale = || -> Result<f64> {
            let v = ls_error_variance
                .filter(|v| *v > 0.0 && v.is_finite())
                .ok_or_else(|| Error::Input(format!("{} normalization needs a positive LS error variance", self.config.normalization.name())))?;
            let ab = self.schedule.alpha_bar(self.config.steps)?;
            Ok((v * ab / (2.0 * (1.0 - ab))).sqrt())
        };
        Ok(match self.config.normalization {
            Normalization::Global => vec![self.normalization_scale; l],
            Normalization::PerItem => vec![rms(ls_block); l],
            Normalization::PerLink => ls_block.chunks(self.config.antennas).map(rms).collect(),
            Normalization::NoiseLevel => vec![noise_scale()?; l],
            Normalization::PerLinkFloor => {
                let floor = noise_scale()?;
                ls_block
                    .chunks(self.config.antennas)
                    .map(|b| rms(b).max(floor))
                    .collect()
            }
        })
    }

    /// Interleaved reals of `block`, each AP's part divided by its scale.
    pub fn normalize(&self, block: &[C64], scales: &[f64]) -> Vec<f64> {
        let per_ap = 2 * self.config.antennas;
        interleave(block)
            .into_iter()
            .enumerate()
            .map(|(i, x)| x / scales[i / per_ap])
            .collect()
    }

    /// Inverse of [`Self::normalize`].
    pub fn denormalize(&self, x: &[f64], scales: &[f64]) -> Vec<C64> {
        let m = self.config.antennas;
        deinterleave(x)
            .into_iter()
            .enumerate()
            .map(|(i, z)| z * scales[i / m])
            .collect()
    }

    /// `R_MMT` rows `[B, cond_dim]`; zeros for the unconditioned kind.
    pub fn encode(
        &self,
        tape: &mut Tape,
        conditioning: &[Option<&Conditioning>],
        mode: Mode,
    ) -> Result<Var> {
        let b = conditioning.len();
        match &self.encoders {
            None => Ok(tape.constant(Tensor::zeros(&[b, self.config.cond_dim()]))),
            Some(enc) => {
                let items = conditioning
                    .iter()
                    .map(|c| {
                        c.ok_or_else(|| {
                            Error::Input("conditioned model needs sensing and location inputs".into())
                        })
                    })
                    .collect::<Result<Vec<_>>>()?;
                Ok(enc.forward(tape, &self.store, &items, mode)?.fusion.output)
            }
        }
    }

    /// Batched reverse-step prediction: `x_t [B, 2LM]`, one step per row,
    /// `cond [B, cond_dim]`.
    pub fn predict(&self, tape: &mut Tape, x_t: Var, steps: &[usize], cond: Var) -> Result<Var> {
        self.predict_with(&self.store, tape, x_t, steps, cond)
    }

    /// [`Self::predict`] reading parameters from `store`.
    pub fn predict_with(
        &self,
        store: &ParamStore,
        tape: &mut Tape,
        x_t: Var,
        steps: &[usize],
        cond: Var,
    ) -> Result<Var> {
        let d = self.config.channel_dim();
        let shape = tape.value(x_t).shape().to_vec();
        if shape.len() != 2 || shape[1] != d || shape[0] != steps.len() {
            return Err(Error::Dimension {
                op: "denoiser input",
                lhs: vec![steps.len(), d],
                rhs: shape,
            });
        }
        let mut idx = Vec::with_capacity(steps.len());
        for &t in steps {
            if t == 0 || t > self.config.steps {
                return Err(Error::StepOutOfRange {
                    step: t,
                    max: self.config.steps,
                });
            }
            idx.push(t - 1);
        }
        let table = tape.param(store, self.time_embedding);
        let tau = tape.gather_rows(table, &idx)?;
        let mut h = tape.concat_cols(&[x_t, tau, cond])?;
        let last = self.layers.len() - 1;
        for (i, layer) in self.layers.iter().enumerate() {
            h = layer.forward(tape, store, h)?;
            if i < last {
                h = tape.relu(h);
            }
        }
        if self.config.residual {
            let (mut skip, mut gain) = (Vec::with_capacity(steps.len() * d), Vec::with_capacity(steps.len() * d));
            for &t in steps {
                let a = self.schedule.alpha(t)?;
                skip.extend(std::iter::repeat_n(1.0 / a.sqrt(), d));
                gain.extend(std::iter::repeat_n((1.0 - a).sqrt(), d));
            }
            let skip = tape.constant(Tensor::new(&[steps.len(), d], skip)?);
            let gain = tape.constant(Tensor::new(&[steps.len(), d], gain)?);
            let carried = tape.mul(x_t, skip)?;
            let update = tape.mul(h, gain)?;
            h = tape.add(carried, update)?;
        }
        Ok(h)
    }

    /// Single-item deterministic reverse step on normalized reals.
    pub fn reverse_step(&self, x_t: &[f64], t: usize, r_mmt: &[f64]) -> Result<Vec<f64>> {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::new(&[1, x_t.len()], x_t.to_vec())?);
        let c = tape.constant(Tensor::new(&[1, r_mmt.len()], r_mmt.to_vec())?);
        let out = self.predict(&mut tape, x, &[t], c)?;
        Ok(tape.value(out).data().to_vec())
    }

    /// `R_MMT` for one item in eval mode.
    pub fn condition_vector(&self, conditioning: Option<&Conditioning>) -> Result<Vec<f64>> {
        let mut tape = Tape::new();
        let r = self.encode(&mut tape, &[conditioning], Mode::Eval)?;
        Ok(tape.value(r).data().to_vec())
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        let mut ck = Checkpoint::from_store(&self.store);
        let mut doc = KvDoc::new();
        self.config.write_kv(&mut doc);
        doc.set("normalization.scale", fmt_f64(self.normalization_scale));
        for line in doc.to_text().lines() {
            if let Some((k, v)) = line.split_once(" = ") {
                ck.meta.insert(k.to_string(), v.to_string());
            }
        }
        ck
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        let mut doc = KvDoc::new();
        for (k, v) in ck.meta.iter().filter(|(k, _)| k.starts_with("model.")) {
            doc.set(k, v);
        }
        let config = ModelConfig::from_kv(&doc, &ModelConfig::default())?;
        let declared_l: usize = ck.meta_parse("model.L")?;
        if declared_l != config.num_aps {
            return Err(Error::Config(format!(
                "checkpoint L = {declared_l} disagrees with L_r + 1 = {}",
                config.num_aps
            )));
        }
        let scale = ck.meta_parse("normalization.scale")?;
        let mut model = DenoiserModel::new(&config, scale)?;
        ck.restore_store(&mut model.store)?;
        Ok(model)
    }

    /// Adds `extra` metadata (e.g. training provenance) and writes to `path`.
    pub fn save(&self, path: &Path, extra: &[(String, String)]) -> Result<()> {
        let mut ck = self.to_checkpoint();
        for (k, v) in extra {
            ck.meta.insert(k.clone(), v.clone());
        }
        ck.save(path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let ck = Checkpoint::load(path)?;
        Self::from_checkpoint(&ck).map_err(|e| match e {
            Error::Config(m) => Error::format(path, m),
            other => other,
        })
    }

    /// Errors unless the model was built for `L`, `L_r`, `M`.
    pub fn check_dims(&self, num_aps: usize, num_receive_aps: usize, antennas: usize) -> Result<()> {
        let c = &self.config;
        if (c.num_aps, c.num_receive_aps, c.antennas) != (num_aps, num_receive_aps, antennas) {
            return Err(Error::Dimension {
                op: "model vs scenario (L, L_r, M)",
                lhs: vec![c.num_aps, c.num_receive_aps, c.antennas],
                rhs: vec![num_aps, num_receive_aps, antennas],
            });
        }
        Ok(())
    }
}

/// Per-entry error variance `σ²/(τ_p·p_u)` of UE `u`'s LS estimate.
pub fn ls_error_variance(sample: &crate::dataset::Sample, u: usize) -> f64 {
    sample.scenario.noise_power_w / (sample.scenario.pilot_length as f64 * sample.powers[u])
}

/// Conditioning inputs for UE `u` of a sample: per-sample normalized sensing
/// planes and location features relative to the transmitting AP.
pub fn conditioning_for(sample: &crate::dataset::Sample, u: usize) -> Result<Conditioning> {
    let scale = rms_scale(&sample.h_sens_est);
    Ok(Conditioning {
        sensing: crate::encoders::sensing_planes(&sample.h_sens_est, scale)?,
        location: crate::encoders::location_features(
            sample.geometry.ue_positions[u],
            sample.geometry.tx_ap_position,
        ),
    })
}
