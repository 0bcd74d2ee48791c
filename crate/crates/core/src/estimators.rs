//! LS, LMMSE, and sensing least-squares estimators plus the NMSE metric.

use nalgebra::DMatrix;

use crate::carray::{norm_sqr, CArray, C64};
use crate::channel::{ChannelRealization, PilotObservation};
use crate::error::{Error, Result};

/// Largest accepted condition number of `X·X^H` in [`sensing_ls`].
pub const MAX_PROBE_CONDITION: f64 = 1e8;

fn pilot_dims(obs: &PilotObservation, assignment: &[usize], powers: &[f64]) -> Result<(usize, usize, usize)> {
    let [l_n, tau, m] = obs.y_pilot.shape() else {
        return Err(Error::Input(format!(
            "pilot observation must be [L, tau_p, M], got {:?}",
            obs.y_pilot.shape()
        )));
    };
    if assignment.len() != powers.len() {
        return Err(Error::Dimension {
            op: "pilot assignment vs powers",
            lhs: vec![assignment.len()],
            rhs: vec![powers.len()],
        });
    }
    if let Some(&s) = assignment.iter().find(|&&s| s >= *tau) {
        return Err(Error::Input(format!("pilot index {s} out of range for tau_p = {tau}")));
    }
    Ok((*l_n, *tau, *m))
}

/// `ĥ_{lu} = y[l, s_u] / sqrt(τ_p·p_u)`; returns `[L, U, M]`.
pub fn ls_estimate(obs: &PilotObservation, assignment: &[usize], powers: &[f64]) -> Result<CArray> {
    let (l_n, tau, m) = pilot_dims(obs, assignment, powers)?;
    if let Some(u) = powers.iter().position(|&p| !(p > 0.0)) {
        return Err(Error::Input(format!(
            "LS estimate needs positive pilot power, UE {u} has {}",
            powers[u]
        )));
    }
    let u_n = powers.len();
    let mut out = CArray::zeros(&[l_n, u_n, m]);
    for l in 0..l_n {
        for u in 0..u_n {
            let inv = 1.0 / (tau as f64 * powers[u]).sqrt();
            let y = obs.y_pilot.slice(&[l, assignment[u]]).to_vec();
            for (o, yv) in out.slice_mut(&[l, u]).iter_mut().zip(y) {
                *o = yv * inv;
            }
        }
    }
    Ok(out)
}

/// Scalar LMMSE gain for link `(l, u)` under a zero-mean channel with known
/// large-scale gains of every UE sharing the pilot.
pub fn mmse_coefficient(
    l: usize,
    u: usize,
    assignment: &[usize],
    powers: &[f64],
    beta: &[Vec<f64>],
    noise_power: f64,
    tau: usize,
) -> f64 {
    let tau = tau as f64;
    let interference: f64 = (0..powers.len())
        .filter(|&i| assignment[i] == assignment[u])
        .map(|i| powers[i] * beta[l][i])
        .sum();
    (tau * powers[u]).sqrt() * beta[l][u] / (tau * interference + noise_power)
}

/// Per-link scalar LMMSE estimate; `beta` is indexed `[l][u]`.
pub fn mmse_estimate(
    obs: &PilotObservation,
    assignment: &[usize],
    powers: &[f64],
    beta: &[Vec<f64>],
    noise_power: f64,
) -> Result<CArray> {
    let (l_n, tau, m) = pilot_dims(obs, assignment, powers)?;
    let u_n = powers.len();
    if beta.len() != l_n || beta.iter().any(|r| r.len() != u_n) {
        return Err(Error::Dimension {
            op: "large-scale gains",
            lhs: vec![l_n, u_n],
            rhs: vec![beta.len(), beta.first().map_or(0, Vec::len)],
        });
    }
    if beta.iter().flatten().any(|&b| !(b > 0.0)) {
        return Err(Error::Input("MMSE estimate needs positive large-scale gains".into()));
    }
    let mut out = CArray::zeros(&[l_n, u_n, m]);
    for l in 0..l_n {
        for u in 0..u_n {
            let c = mmse_coefficient(l, u, assignment, powers, beta, noise_power, tau);
            let y = obs.y_pilot.slice(&[l, assignment[u]]).to_vec();
            for (o, yv) in out.slice_mut(&[l, u]).iter_mut().zip(y) {
                *o = yv * c;
            }
        }
    }
    Ok(out)
}

fn to_matrix(a: &CArray) -> Result<DMatrix<C64>> {
    match a.shape() {
        [r, c] => Ok(DMatrix::from_row_slice(*r, *c, a.data())),
        s => Err(Error::Input(format!("expected a matrix, got shape {s:?}"))),
    }
}

/// `Ĥ = Y·X^H·(X·X^H)^{-1}` for one receiving AP.
pub fn sensing_ls(y: &CArray, x: &CArray) -> Result<CArray> {
    let (ym, xm) = (to_matrix(y)?, to_matrix(x)?);
    if ym.shape() != xm.shape() {
        return Err(Error::Dimension {
            op: "sensing LS",
            lhs: y.shape().to_vec(),
            rhs: x.shape().to_vec(),
        });
    }
    let (m, n) = xm.shape();
    if n < m {
        return Err(Error::IllConditioned(f64::INFINITY));
    }
    let gram = &xm * xm.adjoint();
    let sv = gram.singular_values();
    let smax = sv.max();
    let smin = sv.min();
    let cond = if smin > 0.0 { smax / smin } else { f64::INFINITY };
    if !(cond < MAX_PROBE_CONDITION) {
        return Err(Error::IllConditioned(cond));
    }
    let inv = gram
        .try_inverse()
        .ok_or(Error::IllConditioned(f64::INFINITY))?;
    let h = ym * xm.adjoint() * inv;
    let data = (0..m)
        .flat_map(|i| (0..m).map(move |j| (i, j)))
        .map(|(i, j)| h[(i, j)])
        .collect();
    CArray::from_vec(&[m, m], data)
}

/// Sensing LS for every receiving AP of `[L_r, M, N]` echoes.
pub fn sensing_ls_all(y: &CArray, x: &CArray) -> Result<CArray> {
    let [l_r, m, n] = *y.shape() else {
        return Err(Error::Input(format!("radar echoes must be [L_r, M, N], got {:?}", y.shape())));
    };
    let mut out = CArray::zeros(&[l_r, m, m]);
    for r in 0..l_r {
        let yr = CArray::from_vec(&[m, n], y.slice(&[r]).to_vec())?;
        out.slice_mut(&[r]).copy_from_slice(sensing_ls(&yr, x)?.data());
    }
    Ok(out)
}

/// Mean and per-link normalized squared error.
#[derive(Clone, Debug, PartialEq)]
pub struct Nmse {
    pub mean: f64,
    /// `[l][u]`.
    pub per_link: Vec<Vec<f64>>,
}

impl Nmse {
    pub fn db(&self) -> f64 {
        to_db(self.mean)
    }
}

pub fn to_db(x: f64) -> f64 {
    10.0 * x.log10()
}

/// Normalized error of one link vector.
pub fn link_nmse(estimate: &[C64], truth: &[C64]) -> Option<f64> {
    let p = norm_sqr(truth);
    if p == 0.0 {
        return None;
    }
    let e: f64 = estimate.iter().zip(truth).map(|(a, b)| (a - b).norm_sqr()).sum();
    Some(e / p)
}

/// NMSE over `[L, U, M]` arrays.
pub fn nmse(estimate: &CArray, truth: &CArray) -> Result<Nmse> {
    let [l_n, u_n, _] = *truth.shape() else {
        return Err(Error::Input(format!("NMSE expects [L, U, M], got {:?}", truth.shape())));
    };
    if estimate.shape() != truth.shape() {
        return Err(Error::Dimension {
            op: "nmse",
            lhs: estimate.shape().to_vec(),
            rhs: truth.shape().to_vec(),
        });
    }
    let mut per_link = vec![vec![0.0; u_n]; l_n];
    let mut total = 0.0;
    for (l, row) in per_link.iter_mut().enumerate() {
        for (u, v) in row.iter_mut().enumerate() {
            *v = link_nmse(estimate.slice(&[l, u]), truth.slice(&[l, u]))
                .ok_or(Error::MetricUndefined { ap: l, ue: u })?;
            total += *v;
        }
    }
    Ok(Nmse {
        mean: total / (l_n * u_n) as f64,
        per_link,
    })
}

/// All receiver-side estimates for one realization.
#[derive(Clone, Debug, PartialEq)]
pub struct EstimateBundle {
    pub h_ls: CArray,
    pub h_mmse: CArray,
    pub h_sens_est: CArray,
    pub noise_power: f64,
}

impl EstimateBundle {
    pub fn compute(
        realization: &ChannelRealization,
        pilots: &PilotObservation,
        radar_echo: &CArray,
        probe: &CArray,
        noise_power: f64,
    ) -> Result<Self> {
        let h_ls = ls_estimate(pilots, &realization.pilot_assignment, &realization.powers)?;
        let h_mmse = mmse_estimate(
            pilots,
            &realization.pilot_assignment,
            &realization.powers,
            &realization.large_scale,
            noise_power,
        )?;
        let h_sens_est = sensing_ls_all(radar_echo, probe)?;
        let bundle = EstimateBundle {
            h_ls,
            h_mmse,
            h_sens_est,
            noise_power,
        };
        if !(bundle.h_ls.is_finite() && bundle.h_mmse.is_finite() && bundle.h_sens_est.is_finite()) {
            return Err(Error::Input("non-finite estimate".into()));
        }
        Ok(bundle)
    }
}
