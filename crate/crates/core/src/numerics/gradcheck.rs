//! Central finite-difference verification of tape gradients.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{ParamStore, Tape, Var};
use crate::error::{Error, Result};

/// Finite-difference step at 64-bit precision.
pub const FD_STEP: f64 = 1e-5;

#[derive(Clone, Debug)]
pub struct GradcheckOptions {
    pub tolerance: f64,
    /// Check at most this many coordinates per parameter (seeded choice); `None` checks all.
    pub max_entries_per_param: Option<usize>,
    pub seed: u64,
    /// Denominator floor for the relative error, guarding coordinates whose gradient is ~0.
    pub abs_floor: f64,
}

impl Default for GradcheckOptions {
    fn default() -> Self {
        GradcheckOptions {
            tolerance: 1e-4,
            max_entries_per_param: None,
            seed: 0,
            abs_floor: 1e-6,
        }
    }
}

#[derive(Clone, Debug)]
pub struct ParamCheck {
    pub name: String,
    pub checked: usize,
    pub max_rel_err: f64,
    pub worst_analytic: f64,
    pub worst_numeric: f64,
}

#[derive(Clone, Debug)]
pub struct GradcheckReport {
    pub params: Vec<ParamCheck>,
    pub tolerance: f64,
}

impl GradcheckReport {
    pub fn max_rel_err(&self) -> f64 {
        self.params.iter().map(|p| p.max_rel_err).fold(0.0, f64::max)
    }

    pub fn failing(&self) -> Vec<&ParamCheck> {
        self.params.iter().filter(|p| p.max_rel_err >= self.tolerance).collect()
    }

    pub fn passed(&self) -> bool {
        self.failing().is_empty()
    }
}

pub fn relative_error(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

/// Compare the tape gradient of `forward` against central differences.
///
/// `forward` must record a scalar loss on the given tape and be a pure
/// function of the parameter values.
pub fn gradcheck<F>(params: &mut ParamStore, forward: F, opts: &GradcheckOptions) -> Result<GradcheckReport>
where
    F: Fn(&ParamStore, &mut Tape) -> Result<Var>,
{
    let eval = |store: &ParamStore| -> Result<f64> {
        let mut tape = Tape::new();
        let out = forward(store, &mut tape)?;
        Ok(tape.scalar(out))
    };

    params.zero_grads();
    let mut tape = Tape::new();
    let out = forward(params, &mut tape)?;
    let first = tape.scalar(out);
    let grads = tape.backward(out)?;
    grads.accumulate_into(params);
    drop(tape);

    let second = eval(params)?;
    if first.to_bits() != second.to_bits() {
        return Err(Error::NonDeterministic { first, second });
    }

    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let ids: Vec<_> = params.ids().collect();
    let mut report = Vec::with_capacity(ids.len());
    for id in ids {
        let n = params.get(id).value.len();
        let entries: Vec<usize> = match opts.max_entries_per_param {
            Some(m) if m < n => sample(&mut rng, n, m).into_vec(),
            _ => (0..n).collect(),
        };
        let analytic = params.get(id).grad.clone();
        let mut check = ParamCheck {
            name: params.get(id).name.clone(),
            checked: entries.len(),
            max_rel_err: 0.0,
            worst_analytic: 0.0,
            worst_numeric: 0.0,
        };
        for e in entries {
            let orig = params.get(id).value.data()[e];
            params.get_mut(id).value.data_mut()[e] = orig + FD_STEP;
            let plus = eval(params);
            params.get_mut(id).value.data_mut()[e] = orig - FD_STEP;
            let minus = eval(params);
            params.get_mut(id).value.data_mut()[e] = orig;
            let numeric = (plus? - minus?) / (2.0 * FD_STEP);
            let a = analytic.data()[e];
            let rel = relative_error(a, numeric, opts.abs_floor);
            if rel > check.max_rel_err || check.max_rel_err.is_nan() {
                check.max_rel_err = rel;
                check.worst_analytic = a;
                check.worst_numeric = numeric;
            }
        }
        report.push(check);
    }
    params.zero_grads();
    Ok(GradcheckReport {
        params: report,
        tolerance: opts.tolerance,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::Tensor;

    #[test]
    fn quadratic_loss_matches() {
        let mut store = ParamStore::new();
        let id = store.register("theta", Tensor::vector(vec![0.3, -1.2, 2.5])).unwrap();
        let report = gradcheck(
            &mut store,
            |s, tape| {
                let th = tape.param(s, id);
                let sq = tape.dot(th, th)?;
                Ok(tape.scale(sq, 0.5))
            },
            &GradcheckOptions {
                tolerance: 1e-9,
                ..Default::default()
            },
        )
        .unwrap();
        assert!(report.passed(), "{report:?}");
        assert!(report.max_rel_err() < 1e-9);
    }

    #[test]
    fn non_deterministic_forward_is_rejected() {
        use std::cell::Cell;
        let mut store = ParamStore::new();
        let id = store.register("theta", Tensor::vector(vec![1.0])).unwrap();
        let calls = Cell::new(0.0);
        let res = gradcheck(
            &mut store,
            |s, tape| {
                calls.set(calls.get() + 1.0);
                let th = tape.param(s, id);
                Ok(tape.scale(th, calls.get()))
            },
            &GradcheckOptions::default(),
        );
        assert!(matches!(res, Err(Error::NonDeterministic { .. })));
    }
}
