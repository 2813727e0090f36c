use rand::seq::index::sample;

use super::{seeded_rng, Gradients, ParamStore, Tape, Var};
use crate::error::Result;

/// Settings for comparing tape gradients against central differences.
#[derive(Clone, Debug)]
pub struct GradCheckOptions {
    pub step: f64,
    pub rtol: f64,
    /// Denominator floor of the relative error, so that gradients near zero
    /// are judged on an absolute scale of `rtol * abs_floor`.
    pub abs_floor: f64,
    /// Entries checked per parameter tensor; `None` checks every entry.
    pub samples_per_param: Option<usize>,
    pub seed: u64,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        Self {
            step: 1e-5,
            rtol: 1e-4,
            abs_floor: 1e-5,
            samples_per_param: None,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug)]
pub struct ParamCheck {
    pub name: String,
    pub checked: usize,
    pub max_rel_err: f64,
    pub worst_index: usize,
    pub analytic: f64,
    pub numeric: f64,
}

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub params: Vec<ParamCheck>,
    pub rtol: f64,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.params.iter().all(|p| p.max_rel_err <= self.rtol)
    }

    pub fn max_rel_err(&self) -> f64 {
        self.params.iter().map(|p| p.max_rel_err).fold(0.0, f64::max)
    }

    pub fn total_checked(&self) -> usize {
        self.params.iter().map(|p| p.checked).sum()
    }

    pub fn failures(&self) -> impl Iterator<Item = &ParamCheck> {
        self.params.iter().filter(|p| p.max_rel_err > self.rtol)
    }
}

/// Autodiff gradients of `f` at `store` versus central finite differences.
pub fn grad_check<F>(store: &ParamStore, f: F, opts: &GradCheckOptions) -> Result<GradCheckReport>
where
    F: for<'t> Fn(&'t Tape, &ParamStore) -> Result<Var<'t>>,
{
    let tape = Tape::new();
    let grads = f(&tape, store)?.backward()?;
    grad_check_against(store, f, &grads, opts)
}

/// Compares externally supplied gradients with central differences of `f`.
pub fn grad_check_against<F>(
    store: &ParamStore,
    f: F,
    grads: &Gradients,
    opts: &GradCheckOptions,
) -> Result<GradCheckReport>
where
    F: for<'t> Fn(&'t Tape, &ParamStore) -> Result<Var<'t>>,
{
    let eval = |s: &ParamStore| -> Result<f64> {
        let tape = Tape::new();
        let v = f(&tape, s)?.item();
        Ok(v)
    };
    let mut rng = seeded_rng(opts.seed);
    let mut work = store.clone();
    let mut report = Vec::new();
    for (id, p) in store.iter() {
        let n = p.value.numel();
        let indices: Vec<usize> = match opts.samples_per_param {
            Some(s) if s < n => {
                let mut v = sample(&mut rng, n, s).into_vec();
                v.sort_unstable();
                v
            }
            _ => (0..n).collect(),
        };
        let analytic = grads.param(id);
        let mut check = ParamCheck {
            name: p.name.clone(),
            checked: 0,
            max_rel_err: 0.0,
            worst_index: 0,
            analytic: 0.0,
            numeric: 0.0,
        };
        for idx in indices {
            let orig = p.value.data()[idx];
            work.data_mut(id)[idx] = orig + opts.step;
            let fp = eval(&work)?;
            work.data_mut(id)[idx] = orig - opts.step;
            let fm = eval(&work)?;
            work.data_mut(id)[idx] = orig;
            let numeric = (fp - fm) / (2.0 * opts.step);
            let a = analytic.map_or(0.0, |g| g.data()[idx]);
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(opts.abs_floor);
            check.checked += 1;
            if rel > check.max_rel_err || check.checked == 1 {
                check.max_rel_err = rel;
                check.worst_index = idx;
                check.analytic = a;
                check.numeric = numeric;
            }
        }
        report.push(check);
    }
    Ok(GradCheckReport {
        params: report,
        rtol: opts.rtol,
    })
}
