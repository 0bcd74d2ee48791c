//! Multi-static ISAC world generation: AP/UE/target geometry, ULA steering
//! vectors, rank-one bistatic sensing channels, Rician access channels with
//! UMi path loss, pilot reuse, and the received pilot and radar signals.

use std::f64::consts::PI;

use rand::Rng;

use crate::carray::{CArray, C64};
use crate::error::{Error, Result};
use crate::rng::{complex_normal, std_normal};
use crate::scenario::ScenarioConfig;

pub type Point = (f64, f64);

/// Links shorter than this are evaluated at this distance.
pub const MIN_LINK_DISTANCE_M: f64 = 1.0;

pub fn distance(a: Point, b: Point) -> f64 {
    (a.0 - b.0).hypot(a.1 - b.1)
}

/// Angle of `to` seen from an array at `from` whose axis runs along y,
/// measured from broadside; `sin θ` is the y-component of the unit bearing.
pub fn bearing(from: Point, to: Point) -> f64 {
    (to.1 - from.1).atan2((to.0 - from.0).abs())
}

/// Half-wavelength ULA response: entry `m` is `exp(-jπ·m·sin θ)`.
pub fn steering_vector(theta: f64, antennas: usize) -> Result<Vec<C64>> {
    if antennas == 0 {
        return Err(Error::Config("steering vector needs M >= 1".into()));
    }
    let s = theta.sin();
    Ok((0..antennas)
        .map(|m| C64::from_polar(1.0, -PI * m as f64 * s))
        .collect())
}

/// `alpha · a(θ_r) · a(θ_t)^H` as a row-major `M×M` array.
pub fn sensing_channel(alpha: C64, theta_r: f64, theta_t: f64, antennas: usize) -> Result<CArray> {
    let ar = steering_vector(theta_r, antennas)?;
    let at = steering_vector(theta_t, antennas)?;
    let mut data = Vec::with_capacity(antennas * antennas);
    for r in &ar {
        for t in &at {
            data.push(alpha * r * t.conj());
        }
    }
    CArray::from_vec(&[antennas, antennas], data)
}

/// 3GPP UMi path loss in dB: `22.4 + 35.3·log10(dist) + 21.3·log10(f_c) + X`.
pub fn pathloss_umi(distance_m: f64, carrier_ghz: f64, shadow_db: f64) -> Result<f64> {
    if !(distance_m > 0.0) || !distance_m.is_finite() {
        return Err(Error::Input(format!(
            "path loss needs a positive distance, got {distance_m}"
        )));
    }
    if !(carrier_ghz > 0.0) {
        return Err(Error::Input(format!(
            "carrier frequency must be positive, got {carrier_ghz}"
        )));
    }
    let d = distance_m.max(MIN_LINK_DISTANCE_M);
    Ok(22.4 + 35.3 * d.log10() + 21.3 * carrier_ghz.log10() + shadow_db)
}

pub fn db_to_linear(db: f64) -> f64 {
    10f64.powf(db / 10.0)
}

pub fn linear_to_db(x: f64) -> f64 {
    10.0 * x.log10()
}

/// Linear large-scale power gain `10^(-PL/10)`.
pub fn large_scale_gain(distance_m: f64, carrier_ghz: f64, shadow_db: f64) -> Result<f64> {
    Ok(db_to_linear(-pathloss_umi(distance_m, carrier_ghz, shadow_db)?))
}

/// Positions of all actors plus the sensing angles derived from them.
#[derive(Clone, Debug, PartialEq)]
pub struct Geometry {
    pub tx_ap_position: Point,
    pub rx_ap_positions: Vec<Point>,
    pub ue_positions: Vec<Point>,
    pub target_position: Point,
    /// Departure angle from the transmitting AP toward the target.
    pub aod_to_target: f64,
    /// Arrival angle at each receiving AP from the target.
    pub aoa_from_target: Vec<f64>,
}

impl Geometry {
    pub fn new(
        tx_ap_position: Point,
        rx_ap_positions: Vec<Point>,
        ue_positions: Vec<Point>,
        target_position: Point,
    ) -> Self {
        let aod_to_target = bearing(tx_ap_position, target_position);
        let aoa_from_target = rx_ap_positions
            .iter()
            .map(|&p| bearing(p, target_position))
            .collect();
        Geometry {
            tx_ap_position,
            rx_ap_positions,
            ue_positions,
            target_position,
            aod_to_target,
            aoa_from_target,
        }
    }

    pub fn num_aps(&self) -> usize {
        self.rx_ap_positions.len() + 1
    }

    /// AP 0 transmits the sensing probe; APs `1..L` receive echoes.
    pub fn ap_position(&self, l: usize) -> Point {
        if l == 0 {
            self.tx_ap_position
        } else {
            self.rx_ap_positions[l - 1]
        }
    }

    /// Line-of-sight angle from AP `l` to UE `u`.
    pub fn los_angle(&self, l: usize, u: usize) -> f64 {
        bearing(self.ap_position(l), self.ue_positions[u])
    }
}

/// Draws receiving-AP, target, and UE positions.
///
/// The transmitting AP sits at the middle of the left edge; receiving APs are
/// uniform along the right edge; the target is uniform over the central 80%
/// of the area; UEs are uniform over the disk of radius `d` around the target,
/// clipped to the area by rejection.
pub fn generate_geometry<R: Rng + ?Sized>(cfg: &ScenarioConfig, rng: &mut R) -> Geometry {
    let (w, h) = cfg.area_m;
    let tx = (0.0, h / 2.0);
    let rx: Vec<Point> = (0..cfg.num_receive_aps)
        .map(|_| (w, rng.random_range(0.0..=h)))
        .collect();
    let target = (
        rng.random_range(0.1 * w..=0.9 * w),
        rng.random_range(0.1 * h..=0.9 * h),
    );
    let d = cfg.max_target_distance;
    let ues = (0..cfg.num_ues)
        .map(|_| loop {
            let r = d * rng.random::<f64>().sqrt();
            let phi = rng.random_range(0.0..2.0 * PI);
            let p = (target.0 + r * phi.cos(), target.1 + r * phi.sin());
            if (0.0..=w).contains(&p.0) && (0.0..=h).contains(&p.1) {
                break p;
            }
        })
        .collect();
    Geometry::new(tx, rx, ues, target)
}

/// `sqrt(β)·(sqrt(K/(K+1))·a(θ_LOS) + sqrt(1/(K+1))·g)` for AP `l`, UE `u`.
pub fn rician_channel<R: Rng + ?Sized>(
    geometry: &Geometry,
    ap: usize,
    ue: usize,
    k_factor: f64,
    beta: f64,
    antennas: usize,
    rng: &mut R,
) -> Result<Vec<C64>> {
    if !(k_factor >= 0.0) || !(beta > 0.0) {
        return Err(Error::Input(format!(
            "Rician channel needs K >= 0 and beta > 0, got K = {k_factor}, beta = {beta}"
        )));
    }
    let a = steering_vector(geometry.los_angle(ap, ue), antennas)?;
    let los = (k_factor / (k_factor + 1.0)).sqrt();
    let nlos = (1.0 / (k_factor + 1.0)).sqrt();
    let amp = beta.sqrt();
    Ok(a
        .into_iter()
        .map(|a_m| amp * (los * a_m + nlos * complex_normal(rng, 1.0)))
        .collect())
}

/// Variance `ζ²` of the bistatic sensing gain: shadow-free UMi gain on the
/// transmitter→target and target→receiver legs times the RCS variance.
pub fn sensing_gain_variance(
    geometry: &Geometry,
    rx_index: usize,
    rcs_variance: f64,
    carrier_ghz: f64,
) -> Result<f64> {
    const COLLOCATED_M: f64 = 1e-9;
    let target = geometry.target_position;
    let d_tx = distance(geometry.tx_ap_position, target);
    let d_rx = distance(geometry.rx_ap_positions[rx_index], target);
    if d_tx < COLLOCATED_M || d_rx < COLLOCATED_M {
        return Err(Error::DegenerateGeometry(format!(
            "target collocated with an AP (d_tx = {d_tx}, d_rx = {d_rx})"
        )));
    }
    Ok(large_scale_gain(d_tx, carrier_ghz, 0.0)?
        * large_scale_gain(d_rx, carrier_ghz, 0.0)?
        * rcs_variance)
}

/// Draws `α_{l_r} ~ CN(0, ζ²)`.
pub fn sensing_gain<R: Rng + ?Sized>(
    geometry: &Geometry,
    rx_index: usize,
    rcs_variance: f64,
    carrier_ghz: f64,
    rng: &mut R,
) -> Result<C64> {
    let var = sensing_gain_variance(geometry, rx_index, rcs_variance, carrier_ghz)?;
    Ok(complex_normal(rng, var))
}

/// Round-robin pilot reuse: UE `u` gets pilot `u mod τ_p`.
pub fn assign_pilots(num_ues: usize, pilot_length: usize) -> Vec<usize> {
    (0..num_ues).map(|u| u % pilot_length.max(1)).collect()
}

/// Per-UE pilot powers and whether each hit the `P_max` cap.
#[derive(Clone, Debug, PartialEq)]
pub struct PowerCalibration {
    pub powers: Vec<f64>,
    pub clipped: Vec<bool>,
}

/// Chooses `p_u` so the mean-over-APs received SNR hits `target_snr_db`,
/// capped at `max_power`. `beta` is indexed `[l][u]`.
pub fn calibrate_power(
    beta: &[Vec<f64>],
    target_snr_db: f64,
    noise_power: f64,
    max_power: f64,
) -> PowerCalibration {
    let num_ues = beta.first().map_or(0, Vec::len);
    let snr = db_to_linear(target_snr_db);
    let mut powers = Vec::with_capacity(num_ues);
    let mut clipped = Vec::with_capacity(num_ues);
    for u in 0..num_ues {
        let mean_beta = beta.iter().map(|row| row[u]).sum::<f64>() / beta.len() as f64;
        let p = noise_power * snr / mean_beta;
        clipped.push(p > max_power);
        powers.push(p.min(max_power));
    }
    PowerCalibration { powers, clipped }
}

/// One drawn world.
#[derive(Clone, Debug, PartialEq)]
pub struct ChannelRealization {
    /// `[L, U, M]`.
    pub h_comm: CArray,
    /// `[L_r, M, M]`.
    pub h_sens: CArray,
    pub sensing_gains: Vec<C64>,
    /// Linear large-scale gains indexed `[l][u]`.
    pub large_scale: Vec<Vec<f64>>,
    pub geometry: Geometry,
    pub pilot_length: usize,
    pub pilot_assignment: Vec<usize>,
    pub powers: Vec<f64>,
    pub power_clipped: Vec<bool>,
}

impl ChannelRealization {
    pub fn num_aps(&self) -> usize {
        self.h_comm.shape()[0]
    }

    pub fn num_ues(&self) -> usize {
        self.h_comm.shape()[1]
    }

    pub fn antennas(&self) -> usize {
        self.h_comm.shape()[2]
    }

    /// `h_{lu}`.
    pub fn channel(&self, ap: usize, ue: usize) -> &[C64] {
        self.h_comm.slice(&[ap, ue])
    }
}

/// Draws geometry, shadowing, fading, sensing gains, pilots, and powers.
pub fn generate_realization<R: Rng + ?Sized>(
    cfg: &ScenarioConfig,
    rng: &mut R,
) -> Result<ChannelRealization> {
    cfg.validate()?;
    let geometry = generate_geometry(cfg, rng);
    let (l_n, u_n, m) = (cfg.num_aps, cfg.num_ues, cfg.antennas);
    let mut large_scale = vec![vec![0.0; u_n]; l_n];
    for (l, row) in large_scale.iter_mut().enumerate() {
        for (u, beta) in row.iter_mut().enumerate() {
            let dist = distance(geometry.ap_position(l), geometry.ue_positions[u]);
            let shadow = cfg.shadowing_std_db * std_normal(rng);
            *beta = large_scale_gain(dist, cfg.carrier_freq_ghz, shadow)?;
        }
    }
    let mut h_comm = CArray::zeros(&[l_n, u_n, m]);
    for (l, row) in large_scale.iter().enumerate() {
        for (u, &beta) in row.iter().enumerate() {
            let h = rician_channel(&geometry, l, u, cfg.rician_k, beta, m, rng)?;
            h_comm.slice_mut(&[l, u]).copy_from_slice(&h);
        }
    }
    let mut h_sens = CArray::zeros(&[cfg.num_receive_aps, m, m]);
    let mut sensing_gains = Vec::with_capacity(cfg.num_receive_aps);
    for r in 0..cfg.num_receive_aps {
        let alpha = sensing_gain(&geometry, r, cfg.rcs_variance, cfg.carrier_freq_ghz, rng)?;
        let h = sensing_channel(alpha, geometry.aoa_from_target[r], geometry.aod_to_target, m)?;
        h_sens.slice_mut(&[r]).copy_from_slice(h.data());
        sensing_gains.push(alpha);
    }
    let pilot_assignment = assign_pilots(u_n, cfg.pilot_length);
    let cal = calibrate_power(
        &large_scale,
        cfg.target_snr_db,
        cfg.noise_power_w,
        cfg.max_power_w,
    );
    Ok(ChannelRealization {
        h_comm,
        h_sens,
        sensing_gains,
        large_scale,
        geometry,
        pilot_length: cfg.pilot_length,
        pilot_assignment,
        powers: cal.powers,
        power_clipped: cal.clipped,
    })
}

/// Despread uplink pilot observations.
#[derive(Clone, Debug, PartialEq)]
pub struct PilotObservation {
    /// `[L, τ_p, M]`.
    pub y_pilot: CArray,
    pub noise: CArray,
}

/// `y[l, s] = Σ_{i: s_i = s} sqrt(τ_p·p_i)·h_{il} + n_l` with `n ~ CN(0, σ²I)`.
pub fn received_pilots<R: Rng + ?Sized>(
    realization: &ChannelRealization,
    noise_power: f64,
    rng: &mut R,
) -> PilotObservation {
    let (l_n, u_n, m) = (
        realization.num_aps(),
        realization.num_ues(),
        realization.antennas(),
    );
    let tau = realization.pilot_length;
    let mut y = CArray::zeros(&[l_n, tau, m]);
    let mut noise = CArray::zeros(&[l_n, tau, m]);
    for l in 0..l_n {
        for s in 0..tau {
            let slot = y.slice_mut(&[l, s]);
            for u in (0..u_n).filter(|&u| realization.pilot_assignment[u] == s) {
                let amp = (tau as f64 * realization.powers[u]).sqrt();
                for (yv, h) in slot.iter_mut().zip(realization.channel(l, u)) {
                    *yv += amp * h;
                }
            }
        }
    }
    for (yv, nv) in y.data_mut().iter_mut().zip(noise.data_mut()) {
        *nv = complex_normal(rng, noise_power);
        *yv += *nv;
    }
    PilotObservation { y_pilot: y, noise }
}

/// Unit-power DFT probe `[M, N]`: column `n` is `exp(-j2π·m·n/N)/sqrt(M)`.
/// Rows are orthogonal whenever `N >= M`.
pub fn radar_probe(antennas: usize, snapshots: usize) -> CArray {
    let scale = 1.0 / (antennas as f64).sqrt();
    let data = (0..antennas)
        .flat_map(|m| {
            (0..snapshots).map(move |n| {
                C64::from_polar(scale, -2.0 * PI * (m * n) as f64 / snapshots as f64)
            })
        })
        .collect();
    CArray::from_vec(&[antennas, snapshots], data).expect("probe shape")
}

/// `y_{l_r} = H^sens_{l_r}·X + N` for every receiving AP; returns `[L_r, M, N]`.
pub fn received_radar<R: Rng + ?Sized>(
    realization: &ChannelRealization,
    snapshots: &CArray,
    noise_power: f64,
    rng: &mut R,
) -> Result<CArray> {
    let m = realization.antennas();
    let (rows, n) = match snapshots.shape() {
        [r, n] => (*r, *n),
        s => {
            return Err(Error::Dimension {
                op: "radar snapshots",
                lhs: vec![m, 0],
                rhs: s.to_vec(),
            })
        }
    };
    if rows != m || n == 0 {
        return Err(Error::Dimension {
            op: "radar snapshots",
            lhs: vec![m, n],
            rhs: vec![rows, n],
        });
    }
    let avg_power = snapshots.norm_sqr() / n as f64;
    if (avg_power - 1.0).abs() > 1e-6 {
        return Err(Error::Input(format!(
            "radar snapshots must have unit average power, got {avg_power}"
        )));
    }
    let l_r = realization.h_sens.shape()[0];
    let x = snapshots.data();
    let mut y = CArray::zeros(&[l_r, m, n]);
    for r in 0..l_r {
        let h = realization.h_sens.slice(&[r]);
        let out = y.slice_mut(&[r]);
        for i in 0..m {
            for j in 0..n {
                let mut acc = C64::new(0.0, 0.0);
                for k in 0..m {
                    acc += h[i * m + k] * x[k * n + j];
                }
                out[i * n + j] = acc + complex_normal(rng, noise_power);
            }
        }
    }
    Ok(y)
}
