use crate::config::{fmt_f64, KvDoc};
use crate::error::{Error, Result};

/// Physical and experimental parameters of one simulated deployment.
#[derive(Clone, Debug, PartialEq)]
pub struct ScenarioConfig {
    /// Deployment area (width, height) in meters.
    pub area_m: (f64, f64),
    /// Total APs `L`; always `num_receive_aps + 1`.
    pub num_aps: usize,
    pub num_receive_aps: usize,
    /// Antennas per AP array.
    pub antennas: usize,
    pub num_ues: usize,
    pub pilot_length: usize,
    /// Maximum UE distance from the sensing target, meters.
    pub max_target_distance: f64,
    pub carrier_freq_ghz: f64,
    /// Linear Rician K-factor.
    pub rician_k: f64,
    pub target_snr_db: f64,
    pub max_power_w: f64,
    pub noise_power_w: f64,
    pub rcs_variance: f64,
    /// Standard deviation of log-normal shadowing, dB.
    pub shadowing_std_db: f64,
    /// Radar probe snapshots used for sensing-channel estimation.
    pub radar_snapshots: usize,
    pub seed: u64,
}

impl Default for ScenarioConfig {
    fn default() -> Self {
        ScenarioConfig {
            area_m: (100.0, 100.0),
            num_aps: 3,
            num_receive_aps: 2,
            antennas: 8,
            num_ues: 8,
            pilot_length: 8,
            max_target_distance: 10.0,
            carrier_freq_ghz: 28.0,
            rician_k: 10.0,
            target_snr_db: 0.0,
            max_power_w: 0.2,
            noise_power_w: 1e-24,
            rcs_variance: 1.0,
            shadowing_std_db: 7.82,
            radar_snapshots: 16,
            seed: 0,
        }
    }
}

impl ScenarioConfig {
    /// Reduced-size deployment used for CPU runs: 4 antennas per AP.
    pub fn desk() -> Self {
        ScenarioConfig {
            antennas: 4,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.num_aps != self.num_receive_aps + 1 {
            return bad(format!(
                "L = {} must equal L_r + 1 = {}",
                self.num_aps,
                self.num_receive_aps + 1
            ));
        }
        if self.num_receive_aps == 0 {
            return bad("need at least one receiving AP".into());
        }
        if self.antennas == 0 {
            return bad("antenna count M must be at least 1".into());
        }
        if self.num_ues == 0 || self.pilot_length == 0 {
            return bad("U and tau_p must be at least 1".into());
        }
        if !(self.max_target_distance > 0.0) {
            return bad(format!("d = {} must be positive", self.max_target_distance));
        }
        for (name, v) in [
            ("P_max", self.max_power_w),
            ("noise power", self.noise_power_w),
            ("carrier frequency", self.carrier_freq_ghz),
            ("area width", self.area_m.0),
            ("area height", self.area_m.1),
        ] {
            if !(v > 0.0 && v.is_finite()) {
                return bad(format!("{name} must be positive, got {v}"));
            }
        }
        if !(self.rcs_variance >= 0.0) || !(self.rician_k >= 0.0) || !(self.shadowing_std_db >= 0.0)
        {
            return bad("RCS variance, K-factor and shadowing std must be non-negative".into());
        }
        if self.radar_snapshots < self.antennas {
            return bad(format!(
                "need at least M = {} radar snapshots, got {}",
                self.antennas, self.radar_snapshots
            ));
        }
        Ok(())
    }

    /// Reads `scenario.*` keys, starting from `base` for anything absent.
    pub fn from_kv(doc: &KvDoc, base: &ScenarioConfig) -> Result<Self> {
        let b = base;
        let num_receive_aps = doc.get_or("scenario.L_r", b.num_receive_aps)?;
        let cfg = ScenarioConfig {
            area_m: (
                doc.get_or("scenario.area_width", b.area_m.0)?,
                doc.get_or("scenario.area_height", b.area_m.1)?,
            ),
            num_aps: num_receive_aps + 1,
            num_receive_aps,
            antennas: doc.get_or("scenario.M", b.antennas)?,
            num_ues: doc.get_or("scenario.U", b.num_ues)?,
            pilot_length: doc.get_or("scenario.tau_p", b.pilot_length)?,
            max_target_distance: doc.get_or("scenario.d", b.max_target_distance)?,
            carrier_freq_ghz: doc.get_or("scenario.f_c_ghz", b.carrier_freq_ghz)?,
            rician_k: doc.get_or("scenario.rician_k", b.rician_k)?,
            target_snr_db: doc.get_or("scenario.snr_db", b.target_snr_db)?,
            max_power_w: doc.get_or("scenario.p_max_w", b.max_power_w)?,
            noise_power_w: doc.get_or("scenario.noise_power_w", b.noise_power_w)?,
            rcs_variance: doc.get_or("scenario.rcs_variance", b.rcs_variance)?,
            shadowing_std_db: doc.get_or("scenario.shadowing_std_db", b.shadowing_std_db)?,
            radar_snapshots: doc.get_or("scenario.snapshots", b.radar_snapshots)?,
            seed: doc.get_or("scenario.seed", b.seed)?,
        };
        if let Some(l) = doc.get::<usize>("scenario.L")? {
            if l != cfg.num_aps {
                return Err(Error::Config(format!(
                    "scenario.L = {l} disagrees with L_r + 1 = {}",
                    cfg.num_aps
                )));
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn write_kv(&self, doc: &mut KvDoc) {
        doc.set("scenario.area_width", fmt_f64(self.area_m.0));
        doc.set("scenario.area_height", fmt_f64(self.area_m.1));
        doc.set("scenario.L", self.num_aps);
        doc.set("scenario.L_r", self.num_receive_aps);
        doc.set("scenario.M", self.antennas);
        doc.set("scenario.U", self.num_ues);
        doc.set("scenario.tau_p", self.pilot_length);
        doc.set("scenario.d", fmt_f64(self.max_target_distance));
        doc.set("scenario.f_c_ghz", fmt_f64(self.carrier_freq_ghz));
        doc.set("scenario.rician_k", fmt_f64(self.rician_k));
        doc.set("scenario.snr_db", fmt_f64(self.target_snr_db));
        doc.set("scenario.p_max_w", fmt_f64(self.max_power_w));
        doc.set("scenario.noise_power_w", fmt_f64(self.noise_power_w));
        doc.set("scenario.rcs_variance", fmt_f64(self.rcs_variance));
        doc.set("scenario.shadowing_std_db", fmt_f64(self.shadowing_std_db));
        doc.set("scenario.snapshots", self.radar_snapshots);
        doc.set("scenario.seed", self.seed);
    }

    pub fn to_kv_text(&self) -> String {
        let mut doc = KvDoc::new();
        self.write_kv(&mut doc);
        doc.to_text()
    }
}
