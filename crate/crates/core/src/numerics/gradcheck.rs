//! Central finite-difference verification of tape gradients.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::params::ParamStore;
use super::tape::{Tape, Var};
use super::tensor::Tensor;
use crate::error::Result;

pub const FD_STEP: f64 = 1e-5;

/// A failing coordinate is re-measured at `FD_STEP / 10^k` for these `k`,
/// which separates kink crossings (ReLU, max-pool) from wrong gradients.
const REFINEMENTS: [i32; 2] = [1, 2];

#[derive(Clone, Debug)]
pub struct CoordinateCheck {
    /// `input[i]` or a parameter path.
    pub source: String,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_error: f64,
    pub passed: bool,
    /// Finite-difference step behind `numeric`.
    pub step: f64,
}

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub checks: Vec<CoordinateCheck>,
    pub tolerance: f64,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.checks.iter().all(|c| c.passed)
    }

    pub fn failures(&self) -> impl Iterator<Item = &CoordinateCheck> {
        self.checks.iter().filter(|c| !c.passed)
    }

    pub fn max_rel_error(&self) -> f64 {
        self.checks.iter().map(|c| c.rel_error).fold(0.0, f64::max)
    }
}

/// Options for [`grad_check`].
#[derive(Clone, Debug)]
pub struct GradCheckOptions {
    pub tolerance: f64,
    /// Differences below this absolute size pass regardless of relative error
    /// (both derivatives are numerically zero).
    pub abs_floor: f64,
    /// Coordinates sampled per tensor; `None` checks every coordinate.
    pub max_coords_per_tensor: Option<usize>,
    pub seed: u64,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        GradCheckOptions {
            tolerance: 1e-4,
            abs_floor: 1e-8,
            max_coords_per_tensor: None,
            seed: 0,
        }
    }
}

fn relative_error(a: f64, n: f64) -> f64 {
    let scale = a.abs().max(n.abs());
    if scale == 0.0 {
        0.0
    } else {
        (a - n).abs() / scale
    }
}

/// Compares analytic gradients with central differences for every input and
/// every trainable parameter in `store`.
///
/// `f` builds the function under test on a fresh tape; its (possibly
/// non-scalar) output is contracted with fixed random weights so the whole
/// Jacobian is exercised.
pub fn grad_check<F>(
    f: F,
    store: &ParamStore,
    inputs: &[Tensor],
    opts: &GradCheckOptions,
) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape, &ParamStore, &[Var]) -> Result<Var>,
{
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let probe = {
        let mut tape = Tape::new();
        let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone(), true)).collect();
        let out = f(&mut tape, store, &vars)?;
        Tensor::uniform(tape.value(out).shape(), 1.0, &mut rng)
    };
    let eval = |store: &ParamStore, inputs: &[Tensor]| -> Result<f64> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone(), true)).collect();
        let out = f(&mut tape, store, &vars)?;
        let s = tape.weighted_sum(out, probe.clone())?;
        Ok(tape.value(s).data()[0])
    };

    let (input_grads, param_grads) = {
        let mut tape = Tape::new();
        let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone(), true)).collect();
        let out = f(&mut tape, store, &vars)?;
        let s = tape.weighted_sum(out, probe.clone())?;
        let grads = tape.backward(s);
        let ig: Vec<Tensor> = vars
            .iter()
            .zip(inputs)
            .map(|(v, t)| grads.get(*v).cloned().unwrap_or_else(|| Tensor::zeros(t.shape())))
            .collect();
        (ig, grads.param_grads(&tape))
    };

    let pick = |len: usize, rng: &mut ChaCha8Rng| -> Vec<usize> {
        match opts.max_coords_per_tensor {
            Some(k) if k < len => (0..k).map(|_| rng.random_range(0..len)).collect(),
            _ => (0..len).collect(),
        }
    };

    let mut checks = Vec::new();
    let mut record = |source: String, index: usize, analytic: f64, numeric: &dyn Fn(f64) -> Result<f64>| -> Result<()> {
        let ok = |n: f64| relative_error(analytic, n) < opts.tolerance || (analytic - n).abs() < opts.abs_floor;
        let mut step = FD_STEP;
        let mut n = numeric(step)?;
        for k in REFINEMENTS {
            if ok(n) {
                break;
            }
            step = FD_STEP / 10f64.powi(k);
            n = numeric(step)?;
        }
        checks.push(CoordinateCheck {
            source,
            index,
            analytic,
            numeric: n,
            rel_error: relative_error(analytic, n),
            passed: ok(n),
            step,
        });
        Ok(())
    };

    for (i, t) in inputs.iter().enumerate() {
        for idx in pick(t.len(), &mut rng) {
            let numeric = |h: f64| -> Result<f64> {
                let mut plus = inputs.to_vec();
                plus[i].data_mut()[idx] += h;
                let mut minus = inputs.to_vec();
                minus[i].data_mut()[idx] -= h;
                Ok((eval(store, &plus)? - eval(store, &minus)?) / (2.0 * h))
            };
            record(format!("input[{i}]"), idx, input_grads[i].data()[idx], &numeric)?;
        }
    }

    for (id, p) in store.iter().filter(|(_, p)| p.trainable) {
        let analytic = param_grads
            .iter()
            .find(|(g, _)| *g == id)
            .map(|(_, g)| g.clone())
            .unwrap_or_else(|| Tensor::zeros(p.tensor.shape()));
        for idx in pick(p.tensor.len(), &mut rng) {
            let numeric = |h: f64| -> Result<f64> {
                let mut work = store.clone();
                let orig = p.tensor.data()[idx];
                work.get_mut(id).data_mut()[idx] = orig + h;
                let fp = eval(&work, inputs)?;
                work.get_mut(id).data_mut()[idx] = orig - h;
                let fm = eval(&work, inputs)?;
                Ok((fp - fm) / (2.0 * h))
            };
            record(p.path.clone(), idx, analytic.data()[idx], &numeric)?;
        }
    }

    Ok(GradCheckReport {
        checks,
        tolerance: opts.tolerance,
    })
}
