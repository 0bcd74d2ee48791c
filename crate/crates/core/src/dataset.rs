//! Seeded dataset generation, splitting, normalization, and on-disk storage.
//!
//! A dataset directory holds `dataset.manifest` (key-value text) and
//! `dataset.bin`:
//!
//! ```text
//! b"CDDMDATA" | u32 version | u64 n_samples
//! per sample:
//!   u64 id | u64 U | u64 tau_p | f64 d | f64 snr_db
//!   f64 target.x f64 target.y | rx positions [L_r, 2] | ue positions [U, 2]
//!   u64 pilot index * U | powers [U] | beta [L, U]
//!   h_comm [L, U, M] | y_pilot [L, tau_p, M] | h_ls [L, U, M] | h_sens_est [L_r, M, M]
//! ```
//!
//! Real arrays carry a `u32 ndim | u64 dim*` header; complex arrays store
//! interleaved `(re, im)` pairs. Everything is little-endian.

use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use rayon::prelude::*;

use crate::binio::{put_carray, put_f64, put_reals, put_u32, put_u64, Reader};
use crate::carray::{CArray, C64};
use crate::channel::{
    generate_realization, radar_probe, received_pilots, received_radar, Geometry,
    PilotObservation,
};
use crate::config::{fmt_f64, KvDoc};
use crate::error::{Error, Result};
use crate::estimators::{ls_estimate, mmse_estimate, sensing_ls_all};
use crate::rng::{stream_rng, streams};
use crate::scenario::ScenarioConfig;

pub const DATASET_MAGIC: &[u8; 8] = b"CDDMDATA";
pub const DATASET_VERSION: u32 = 1;
pub const MANIFEST_FILE: &str = "dataset.manifest";
pub const SAMPLES_FILE: &str = "dataset.bin";
pub const MIN_SAMPLES: usize = 10;

/// Ranges from which each sample draws its own U, τ_p, d, and SNR.
#[derive(Clone, Debug, PartialEq)]
pub struct KnobRanges {
    /// Inclusive.
    pub num_ues: (usize, usize),
    pub pilot_lengths: Vec<usize>,
    pub max_target_distance: (f64, f64),
    pub target_snr_db: (f64, f64),
}

impl KnobRanges {
    /// Degenerate ranges that reproduce `cfg` exactly.
    pub fn fixed(cfg: &ScenarioConfig) -> Self {
        KnobRanges {
            num_ues: (cfg.num_ues, cfg.num_ues),
            pilot_lengths: vec![cfg.pilot_length],
            max_target_distance: (cfg.max_target_distance, cfg.max_target_distance),
            target_snr_db: (cfg.target_snr_db, cfg.target_snr_db),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if self.num_ues.0 == 0 || self.num_ues.0 > self.num_ues.1 {
            return bad("knobs.U must be a non-empty range of positive counts");
        }
        if self.pilot_lengths.is_empty() || self.pilot_lengths.contains(&0) {
            return bad("knobs.tau_p must list positive pilot lengths");
        }
        let (dl, dh) = self.max_target_distance;
        if !(dl > 0.0 && dl <= dh && dh.is_finite()) {
            return bad("knobs.d must be a positive, ordered range");
        }
        let (sl, sh) = self.target_snr_db;
        if !(sl <= sh && sl.is_finite() && sh.is_finite()) {
            return bad("knobs.snr_db must be an ordered finite range");
        }
        Ok(())
    }

    fn draw_real<R: Rng + ?Sized>((lo, hi): (f64, f64), rng: &mut R) -> f64 {
        if lo == hi {
            lo
        } else {
            rng.random_range(lo..=hi)
        }
    }

    /// Applies one random draw of every knob to `base`.
    pub fn draw<R: Rng + ?Sized>(&self, base: &ScenarioConfig, rng: &mut R) -> ScenarioConfig {
        let num_ues = rng.random_range(self.num_ues.0..=self.num_ues.1);
        let pilot_length = self.pilot_lengths[rng.random_range(0..self.pilot_lengths.len())];
        let max_target_distance = Self::draw_real(self.max_target_distance, rng);
        let target_snr_db = Self::draw_real(self.target_snr_db, rng);
        ScenarioConfig {
            num_ues,
            pilot_length,
            max_target_distance,
            target_snr_db,
            ..base.clone()
        }
    }

    pub fn from_kv(doc: &KvDoc, base: &ScenarioConfig) -> Result<Self> {
        let fixed = Self::fixed(base);
        let knobs = KnobRanges {
            num_ues: doc.get_range("knobs.U")?.unwrap_or(fixed.num_ues),
            pilot_lengths: doc.get_list("knobs.tau_p")?.unwrap_or(fixed.pilot_lengths),
            max_target_distance: doc.get_range("knobs.d")?.unwrap_or(fixed.max_target_distance),
            target_snr_db: doc.get_range("knobs.snr_db")?.unwrap_or(fixed.target_snr_db),
        };
        knobs.validate()?;
        Ok(knobs)
    }

    pub fn write_kv(&self, doc: &mut KvDoc) {
        doc.set("knobs.U", format!("{}..{}", self.num_ues.0, self.num_ues.1));
        let taus: Vec<String> = self.pilot_lengths.iter().map(|t| t.to_string()).collect();
        doc.set("knobs.tau_p", taus.join(","));
        let range = |(a, b): (f64, f64)| format!("{}..{}", fmt_f64(a), fmt_f64(b));
        doc.set("knobs.d", range(self.max_target_distance));
        doc.set("knobs.snr_db", range(self.target_snr_db));
    }
}

/// Everything needed to regenerate a dataset.
#[derive(Clone, Debug, PartialEq)]
pub struct DatasetConfig {
    /// Base scenario; `seed` is the dataset root seed.
    pub scenario: ScenarioConfig,
    pub knobs: KnobRanges,
    pub num_samples: usize,
}

impl DatasetConfig {
    pub fn fixed(scenario: ScenarioConfig, num_samples: usize) -> Self {
        DatasetConfig {
            knobs: KnobRanges::fixed(&scenario),
            scenario,
            num_samples,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.scenario.validate()?;
        self.knobs.validate()?;
        let max_u = self.knobs.num_ues.1;
        let min_tau = *self.knobs.pilot_lengths.iter().min().unwrap_or(&1);
        if max_u == 0 || min_tau == 0 {
            return Err(Error::Config("knob ranges produce empty scenarios".into()));
        }
        if self.num_samples < MIN_SAMPLES {
            return Err(Error::Config(format!(
                "dataset needs at least {MIN_SAMPLES} samples, got {}",
                self.num_samples
            )));
        }
        Ok(())
    }

    pub fn from_kv(doc: &KvDoc, base: &ScenarioConfig) -> Result<Self> {
        let scenario = ScenarioConfig::from_kv(doc, base)?;
        let knobs = KnobRanges::from_kv(doc, &scenario)?;
        let cfg = DatasetConfig {
            num_samples: doc.get_or("dataset.samples", 10_000)?,
            scenario,
            knobs,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn write_kv(&self, doc: &mut KvDoc) {
        self.scenario.write_kv(doc);
        self.knobs.write_kv(doc);
        doc.set("dataset.samples", self.num_samples);
    }
}

/// One stored multi-UE scenario with its receiver-side observations.
#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub sample_id: u64,
    /// Base scenario with this sample's knob draw applied.
    pub scenario: ScenarioConfig,
    pub geometry: Geometry,
    pub pilot_assignment: Vec<usize>,
    pub powers: Vec<f64>,
    /// `[l][u]`.
    pub large_scale: Vec<Vec<f64>>,
    /// `[L, U, M]`.
    pub h_comm: CArray,
    /// `[L, τ_p, M]`.
    pub y_pilot: CArray,
    /// `[L, U, M]`.
    pub h_ls: CArray,
    /// `[L_r, M, M]`.
    pub h_sens_est: CArray,
}

impl Sample {
    pub fn num_ues(&self) -> usize {
        self.scenario.num_ues
    }

    pub fn observation(&self) -> PilotObservation {
        PilotObservation {
            y_pilot: self.y_pilot.clone(),
            noise: CArray::zeros(self.y_pilot.shape()),
        }
    }

    pub fn ls(&self) -> Result<CArray> {
        ls_estimate(&self.observation(), &self.pilot_assignment, &self.powers)
    }

    pub fn mmse(&self) -> Result<CArray> {
        mmse_estimate(
            &self.observation(),
            &self.pilot_assignment,
            &self.powers,
            &self.large_scale,
            self.scenario.noise_power_w,
        )
    }

    /// Distance from UE `u` to the sensing target.
    pub fn target_distance(&self, u: usize) -> f64 {
        crate::channel::distance(self.geometry.ue_positions[u], self.geometry.target_position)
    }

    pub fn is_finite(&self) -> bool {
        self.h_comm.is_finite()
            && self.y_pilot.is_finite()
            && self.h_ls.is_finite()
            && self.h_sens_est.is_finite()
            && self.powers.iter().all(|p| p.is_finite())
    }
}

/// Draws sample `id` of a dataset rooted at `cfg.scenario.seed`.
///
/// Uses its own random stream so any sample regenerates independently.
pub fn generate_sample(cfg: &DatasetConfig, id: u64) -> Result<Sample> {
    let mut rng = stream_rng(cfg.scenario.seed, id);
    let scenario = cfg.knobs.draw(&cfg.scenario, &mut rng);
    scenario.validate()?;
    let real = generate_realization(&scenario, &mut rng)?;
    let obs = received_pilots(&real, scenario.noise_power_w, &mut rng);
    let probe = radar_probe(scenario.antennas, scenario.radar_snapshots);
    let echo = received_radar(&real, &probe, scenario.noise_power_w, &mut rng)?;
    let h_ls = ls_estimate(&obs, &real.pilot_assignment, &real.powers)?;
    let h_sens_est = sensing_ls_all(&echo, &probe)?;
    let sample = Sample {
        sample_id: id,
        scenario,
        geometry: real.geometry,
        pilot_assignment: real.pilot_assignment,
        powers: real.powers,
        large_scale: real.large_scale,
        h_comm: real.h_comm,
        y_pilot: obs.y_pilot,
        h_ls,
        h_sens_est,
    };
    if !sample.is_finite() {
        return Err(Error::Input(format!("sample {id} has non-finite entries")));
    }
    Ok(sample)
}

/// Disjoint sample-id lists.
#[derive(Clone, Debug, PartialEq)]
pub struct Splits {
    pub train: Vec<u64>,
    pub validation: Vec<u64>,
    pub test: Vec<u64>,
}

/// 60/20/20 contiguous blocks of a seeded permutation of `0..n`.
pub fn split_ids(n: usize, seed: u64) -> Splits {
    let mut ids: Vec<u64> = (0..n as u64).collect();
    ids.shuffle(&mut stream_rng(seed, streams::SPLIT_SHUFFLE));
    let n_train = (0.6 * n as f64).round() as usize;
    let n_val = (0.2 * n as f64).round() as usize;
    let test = ids.split_off(n_train + n_val);
    let validation = ids.split_off(n_train);
    Splits {
        train: ids,
        validation,
        test,
    }
}

/// RMS of every real and imaginary channel entry in `samples`.
pub fn normalization_scale<'a>(samples: impl IntoIterator<Item = &'a Sample>) -> Result<f64> {
    let (mut sum, mut count) = (0.0, 0usize);
    for s in samples {
        sum += s.h_comm.norm_sqr();
        count += 2 * s.h_comm.len();
    }
    if count == 0 {
        return Err(Error::DegenerateBatch(0));
    }
    let scale = (sum / count as f64).sqrt();
    if !(scale > 0.0 && scale.is_finite()) {
        return Err(Error::Input(format!(
            "training channels give a degenerate normalization scale {scale}"
        )));
    }
    Ok(scale)
}

#[derive(Clone, Debug, PartialEq)]
pub struct DatasetManifest {
    pub format_version: u32,
    pub config: DatasetConfig,
    pub splits: Splits,
    pub normalization_scale: f64,
}

impl DatasetManifest {
    pub fn seed(&self) -> u64 {
        self.config.scenario.seed
    }

    pub fn to_text(&self) -> String {
        let mut doc = KvDoc::new();
        doc.set("format_version", self.format_version);
        self.config.write_kv(&mut doc);
        let ids = |v: &[u64]| v.iter().map(u64::to_string).collect::<Vec<_>>().join(",");
        for (name, v) in [
            ("train", &self.splits.train),
            ("validation", &self.splits.validation),
            ("test", &self.splits.test),
        ] {
            doc.set(&format!("split.{name}.count"), v.len());
            doc.set(&format!("split.{name}.ids"), ids(v));
        }
        doc.set("normalization.scale", fmt_f64(self.normalization_scale));
        doc.to_text()
    }

    pub fn parse(text: &str, origin: &Path) -> Result<Self> {
        let wrap = |e: Error| match e {
            Error::Config(m) => Error::format(origin, m),
            other => other,
        };
        let doc = KvDoc::parse(text).map_err(wrap)?;
        let format_version: u32 = doc.require("format_version").map_err(wrap)?;
        if format_version != DATASET_VERSION {
            return Err(Error::format(
                origin,
                format!("unsupported dataset format version {format_version}"),
            ));
        }
        let config = DatasetConfig::from_kv(&doc, &ScenarioConfig::default()).map_err(wrap)?;
        let mut lists = Vec::new();
        for name in ["train", "validation", "test"] {
            let count: usize = doc.require(&format!("split.{name}.count")).map_err(wrap)?;
            let ids: Vec<u64> = if count == 0 {
                doc.raw(&format!("split.{name}.ids"));
                Vec::new()
            } else {
                doc.get_list(&format!("split.{name}.ids"))
                    .map_err(wrap)?
                    .unwrap_or_default()
            };
            if ids.len() != count {
                return Err(Error::format(
                    origin,
                    format!("split.{name} lists {} ids but count is {count}", ids.len()),
                ));
            }
            lists.push(ids);
        }
        let normalization_scale = doc.require("normalization.scale").map_err(wrap)?;
        doc.finish().map_err(wrap)?;
        let test = lists.pop().unwrap();
        let validation = lists.pop().unwrap();
        let train = lists.pop().unwrap();
        Ok(DatasetManifest {
            format_version,
            config,
            splits: Splits {
                train,
                validation,
                test,
            },
            normalization_scale,
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub manifest: DatasetManifest,
    /// Indexed by `sample_id`.
    pub samples: Vec<Sample>,
}

/// Generates every sample in parallel and assigns splits.
pub fn generate_dataset(cfg: &DatasetConfig) -> Result<Dataset> {
    cfg.validate()?;
    let samples = (0..cfg.num_samples as u64)
        .into_par_iter()
        .map(|id| generate_sample(cfg, id))
        .collect::<Result<Vec<_>>>()?;
    let splits = split_ids(cfg.num_samples, cfg.scenario.seed);
    let normalization_scale =
        normalization_scale(splits.train.iter().map(|&i| &samples[i as usize]))?;
    Ok(Dataset {
        manifest: DatasetManifest {
            format_version: DATASET_VERSION,
            config: cfg.clone(),
            splits,
            normalization_scale,
        },
        samples,
    })
}

fn put_points(out: &mut Vec<u8>, pts: &[(f64, f64)]) {
    let flat: Vec<f64> = pts.iter().flat_map(|&(x, y)| [x, y]).collect();
    put_reals(out, &[pts.len(), 2], &flat);
}

fn read_points(r: &mut Reader) -> Result<Vec<(f64, f64)>> {
    let (shape, data) = r.reals()?;
    if shape.len() != 2 || shape[1] != 2 {
        return Err(Error::format(r.origin, format!("expected [n, 2] points, got {shape:?}")));
    }
    Ok(data.chunks(2).map(|c| (c[0], c[1])).collect())
}

impl Dataset {
    pub fn split(&self, ids: &[u64]) -> Vec<&Sample> {
        ids.iter().map(|&i| &self.samples[i as usize]).collect()
    }

    pub fn train(&self) -> Vec<&Sample> {
        self.split(&self.manifest.splits.train)
    }

    pub fn validation(&self) -> Vec<&Sample> {
        self.split(&self.manifest.splits.validation)
    }

    pub fn test(&self) -> Vec<&Sample> {
        self.split(&self.manifest.splits.test)
    }

    pub fn samples_to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(DATASET_MAGIC);
        put_u32(&mut out, DATASET_VERSION);
        put_u64(&mut out, self.samples.len() as u64);
        for s in &self.samples {
            put_u64(&mut out, s.sample_id);
            put_u64(&mut out, s.scenario.num_ues as u64);
            put_u64(&mut out, s.scenario.pilot_length as u64);
            put_f64(&mut out, s.scenario.max_target_distance);
            put_f64(&mut out, s.scenario.target_snr_db);
            put_f64(&mut out, s.geometry.target_position.0);
            put_f64(&mut out, s.geometry.target_position.1);
            put_points(&mut out, &s.geometry.rx_ap_positions);
            put_points(&mut out, &s.geometry.ue_positions);
            for &p in &s.pilot_assignment {
                put_u64(&mut out, p as u64);
            }
            put_reals(&mut out, &[s.powers.len()], &s.powers);
            let beta: Vec<f64> = s.large_scale.iter().flatten().copied().collect();
            put_reals(
                &mut out,
                &[s.large_scale.len(), s.scenario.num_ues],
                &beta,
            );
            put_carray(&mut out, &s.h_comm);
            put_carray(&mut out, &s.y_pilot);
            put_carray(&mut out, &s.h_ls);
            put_carray(&mut out, &s.h_sens_est);
        }
        out
    }

    fn samples_from_bytes(
        bytes: &[u8],
        origin: &Path,
        manifest: &DatasetManifest,
    ) -> Result<Vec<Sample>> {
        let mut r = Reader::new(bytes, origin);
        if r.take(8)? != DATASET_MAGIC {
            return Err(Error::format(origin, "not a dataset file (bad magic)"));
        }
        let version = r.u32()?;
        if version != DATASET_VERSION {
            return Err(Error::format(origin, format!("unsupported dataset version {version}")));
        }
        let n = r.usize()?;
        if n != manifest.config.num_samples {
            return Err(Error::format(
                origin,
                format!("{n} samples on disk, manifest says {}", manifest.config.num_samples),
            ));
        }
        let base = &manifest.config.scenario;
        let mut samples = Vec::with_capacity(n);
        for expected in 0..n as u64 {
            let sample_id = r.u64()?;
            if sample_id != expected {
                return Err(Error::format(origin, format!("sample {expected} stored out of order")));
            }
            let num_ues = r.usize()?;
            let pilot_length = r.usize()?;
            let scenario = ScenarioConfig {
                num_ues,
                pilot_length,
                max_target_distance: r.f64()?,
                target_snr_db: r.f64()?,
                ..base.clone()
            };
            let target = (r.f64()?, r.f64()?);
            let rx = read_points(&mut r)?;
            let ues = read_points(&mut r)?;
            let pilot_assignment = (0..num_ues).map(|_| r.usize()).collect::<Result<Vec<_>>>()?;
            let (_, powers) = r.reals()?;
            let (beta_shape, beta) = r.reals()?;
            let h_comm = r.carray()?;
            let y_pilot = r.carray()?;
            let h_ls = r.carray()?;
            let h_sens_est = r.carray()?;
            let (l_n, m, l_r) = (base.num_aps, base.antennas, base.num_receive_aps);
            let consistent = rx.len() == l_r
                && ues.len() == num_ues
                && powers.len() == num_ues
                && beta_shape == [l_n, num_ues]
                && h_comm.shape() == [l_n, num_ues, m]
                && y_pilot.shape() == [l_n, pilot_length, m]
                && h_ls.shape() == [l_n, num_ues, m]
                && h_sens_est.shape() == [l_r, m, m]
                && pilot_assignment.iter().all(|&p| p < pilot_length);
            if !consistent {
                return Err(Error::format(
                    origin,
                    format!("sample {sample_id} shapes disagree with the manifest scenario"),
                ));
            }
            samples.push(Sample {
                sample_id,
                geometry: Geometry::new(base_tx(base), rx, ues, target),
                scenario,
                pilot_assignment,
                powers,
                large_scale: beta.chunks(num_ues).map(<[f64]>::to_vec).collect(),
                h_comm,
                y_pilot,
                h_ls,
                h_sens_est,
            });
        }
        r.finish()?;
        Ok(samples)
    }

    /// Writes `dataset.manifest` and `dataset.bin` into `dir`, creating it.
    pub fn save(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let manifest = dir.join(MANIFEST_FILE);
        std::fs::write(&manifest, self.manifest.to_text()).map_err(|e| Error::io(&manifest, e))?;
        let bin = dir.join(SAMPLES_FILE);
        std::fs::write(&bin, self.samples_to_bytes()).map_err(|e| Error::io(&bin, e))
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let mpath = dir.join(MANIFEST_FILE);
        let text = std::fs::read_to_string(&mpath).map_err(|e| Error::io(&mpath, e))?;
        let manifest = DatasetManifest::parse(&text, &mpath)?;
        let bpath = dir.join(SAMPLES_FILE);
        let bytes = std::fs::read(&bpath).map_err(|e| Error::io(&bpath, e))?;
        let samples = Self::samples_from_bytes(&bytes, &bpath, &manifest)?;
        Ok(Dataset { manifest, samples })
    }
}

fn base_tx(cfg: &ScenarioConfig) -> (f64, f64) {
    (0.0, cfg.area_m.1 / 2.0)
}

/// Complex `[L, M]` block for UE `u` out of an `[L, U, M]` array.
pub fn ue_channels(a: &CArray, u: usize) -> Vec<C64> {
    let [l_n, _, _] = *a.shape() else {
        panic!("expected [L, U, M]");
    };
    (0..l_n).flat_map(|l| a.slice(&[l, u]).iter().copied()).collect()
}
