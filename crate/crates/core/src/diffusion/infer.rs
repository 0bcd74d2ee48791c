use rayon::prelude::*;

use crate::carray::{CArray, C64};
use crate::dataset::{ue_channels, Sample};
use crate::encoders::Conditioning;
use crate::error::{Error, Result};
use crate::numerics::{Mode, Tape, Tensor};

use super::model::{conditioning_for, ls_error_variance, DenoiserModel};

/// Step the reverse chain starts from.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum StartStep {
    /// `t* = T`.
    #[default]
    Full,
    Fixed(usize),
    /// Step whose marginal noise level matches the LS error variance.
    NoiseMatched,
}

impl std::str::FromStr for StartStep {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "full" | "T" => Ok(StartStep::Full),
            "matched" => Ok(StartStep::NoiseMatched),
            n => n
                .parse()
                .map(StartStep::Fixed)
                .map_err(|_| Error::Config(format!("start step `{s}`: expected a number, `full` or `matched`"))),
        }
    }
}

/// One UE's LS estimate and side information.
#[derive(Clone, Debug)]
pub struct DenoiseRequest<'a> {
    /// `[L·M]`, AP-major.
    pub h_ls: &'a [C64],
    pub conditioning: Option<&'a Conditioning>,
    /// Per-entry complex LS error variance; needed only for
    /// [`StartStep::NoiseMatched`].
    pub ls_error_variance: Option<f64>,
}

impl DenoiserModel {
    fn resolve_start(&self, start: StartStep, scales: &[f64], req: &DenoiseRequest) -> Result<usize> {
        let t = match start {
            StartStep::Full => self.config.steps,
            StartStep::Fixed(t) => t,
            StartStep::NoiseMatched => {
                let v = req.ls_error_variance.ok_or_else(|| {
                    Error::Input("noise-matched start needs the LS error variance".into())
                })?;
                // Per real coordinate in normalized units, averaged over APs.
                let ratio = scales.iter().map(|s| v / (2.0 * s * s)).sum::<f64>() / scales.len() as f64;
                self.schedule.matched_step(ratio)
            }
        };
        if t == 0 || t > self.config.steps {
            return Err(Error::StepOutOfRange {
                step: t,
                max: self.config.steps,
            });
        }
        Ok(t)
    }

    /// Maps one LS estimate to a denoised channel `[L·M]`.
    pub fn denoise(&self, req: &DenoiseRequest, start: StartStep) -> Result<Vec<C64>> {
        let d = self.config.channel_dim();
        if 2 * req.h_ls.len() != d {
            return Err(Error::Dimension {
                op: "denoise input (2·L·M)",
                lhs: vec![d],
                rhs: vec![2 * req.h_ls.len()],
            });
        }
        let scales = self.item_scales(req.h_ls, req.ls_error_variance)?;
        let t_start = self.resolve_start(start, &scales, req)?;
        let mut tape = Tape::new();
        let cond = self.encode(&mut tape, &[req.conditioning], Mode::Eval)?;
        let cond = tape.value(cond).clone();
        let a = self.schedule.alpha_bar(t_start)?.sqrt();
        let mut x: Vec<f64> = self.normalize(req.h_ls, &scales).into_iter().map(|v| a * v).collect();
        for t in (1..=t_start).rev() {
            let mut tape = Tape::new();
            let xv = tape.constant(Tensor::new(&[1, d], x)?);
            let c = tape.constant(cond.clone());
            let out = self.predict(&mut tape, xv, &[t], c)?;
            x = tape.value(out).data().to_vec();
        }
        Ok(self.denormalize(&x, &scales))
    }

    /// Denoised `[L, U, M]` for every UE of `sample`, UEs in parallel.
    pub fn denoise_sample(&self, sample: &Sample, start: StartStep) -> Result<CArray> {
        let sc = &sample.scenario;
        self.check_dims(sc.num_aps, sc.num_receive_aps, sc.antennas)?;
        let (l, u_n, m) = (sc.num_aps, sample.num_ues(), sc.antennas);
        let per_ue = (0..u_n)
            .into_par_iter()
            .map(|u| {
                let ls = ue_channels(&sample.h_ls, u);
                let cond = match self.encoders() {
                    Some(_) => Some(conditioning_for(sample, u)?),
                    None => None,
                };
                let var = ls_error_variance(sample, u);
                self.denoise(
                    &DenoiseRequest {
                        h_ls: &ls,
                        conditioning: cond.as_ref(),
                        ls_error_variance: Some(var),
                    },
                    start,
                )
            })
            .collect::<Result<Vec<_>>>()?;
        let mut out = CArray::zeros(&[l, u_n, m]);
        for (u, h) in per_ue.iter().enumerate() {
            for ap in 0..l {
                out.slice_mut(&[ap, u]).copy_from_slice(&h[ap * m..(ap + 1) * m]);
            }
        }
        Ok(out)
    }
}
