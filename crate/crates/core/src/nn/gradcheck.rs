//! Central-difference gradient checking in 64-bit precision.

use std::sync::Arc;

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{NnError, ParameterStore, Tape, Tensor, Var};

/// Relative error used throughout: `|a - n| / max(1e-8, |a| + |n|)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / (analytic.abs() + numeric.abs()).max(1e-8)
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckEntry {
    pub name: String,
    pub coords_checked: usize,
    pub max_rel_error: f64,
    /// Analytic and numeric values at the worst coordinate.
    pub worst: (f64, f64),
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct GradCheckReport {
    pub entries: Vec<GradCheckEntry>,
}

impl GradCheckReport {
    pub fn max_rel_error(&self) -> f64 {
        self.entries.iter().map(|e| e.max_rel_error).fold(0.0, f64::max)
    }

    /// Worst error per name prefix up to the first `.`, e.g. `wnet`, `encoder`.
    pub fn by_module(&self) -> Vec<(String, f64)> {
        let mut out: Vec<(String, f64)> = Vec::new();
        for e in &self.entries {
            let module = e.name.split('.').next().unwrap_or(&e.name).to_string();
            match out.iter_mut().find(|(m, _)| *m == module) {
                Some((_, worst)) => *worst = worst.max(e.max_rel_error),
                None => out.push((module, e.max_rel_error)),
            }
        }
        out
    }
}

/// Finite-difference formula used for the numeric derivative.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Stencil {
    /// `(f(x + h) - f(x - h)) / 2h`
    #[default]
    TwoPoint,
    /// `(-f(x + 2h) + 8 f(x + h) - 8 f(x - h) + f(x - 2h)) / 12h`, fourth order,
    /// which tolerates a larger `h` and so less cancellation error.
    FourPoint,
}

impl Stencil {
    fn offsets(self) -> &'static [(f64, f64)] {
        match self {
            Stencil::TwoPoint => &[(1.0, 0.5), (-1.0, -0.5)],
            Stencil::FourPoint => &[
                (2.0, -1.0 / 12.0),
                (1.0, 8.0 / 12.0),
                (-1.0, -8.0 / 12.0),
                (-2.0, 1.0 / 12.0),
            ],
        }
    }
}

/// Options for [`grad_check`].
#[derive(Debug, Clone)]
pub struct GradCheckOptions {
    pub eps: f64,
    pub stencil: Stencil,
    /// Check at most this many coordinates per tensor, sampled with `seed`.
    pub max_coords_per_tensor: Option<usize>,
    pub seed: u64,
    pub check_params: bool,
    /// Perturbed passes reuse the discrete choices of the unperturbed pass, so
    /// differences measure the piece of a piecewise-smooth function that the
    /// analytic gradient belongs to.
    pub freeze_decisions: bool,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        Self {
            eps: 1e-5,
            stencil: Stencil::TwoPoint,
            max_coords_per_tensor: None,
            seed: 0,
            check_params: true,
            freeze_decisions: false,
        }
    }
}

fn coords(len: usize, limit: Option<usize>, rng: &mut ChaCha8Rng) -> Vec<usize> {
    match limit {
        Some(k) if k < len => {
            let mut picked = sample(rng, len, k).into_vec();
            picked.sort_unstable();
            picked
        }
        _ => (0..len).collect(),
    }
}

fn eval<E, F>(
    store: &ParameterStore<f64>,
    inputs: &[Tensor<f64>],
    decisions: &Option<Arc<Vec<Vec<usize>>>>,
    f: &F,
) -> Result<f64, E>
where
    E: From<NnError>,
    F: Fn(&mut Tape<'_, f64>, &[Var]) -> Result<Var, E>,
{
    let mut tape = match decisions {
        Some(log) => Tape::replaying(store, Arc::clone(log)),
        None => Tape::new(store),
    };
    let vars = inputs
        .iter()
        .map(|t| tape.leaf(t.clone(), false))
        .collect::<Result<Vec<_>, _>>()?;
    let out = f(&mut tape, &vars)?;
    Ok(tape.value(out).item())
}

/// Compares reverse-mode gradients of the scalar `f` against central differences
/// for every input tensor and (optionally) every parameter in `store`.
pub fn grad_check<E, F>(
    store: &ParameterStore<f64>,
    inputs: &[Tensor<f64>],
    opts: &GradCheckOptions,
    f: F,
) -> Result<GradCheckReport, E>
where
    E: From<NnError>,
    F: Fn(&mut Tape<'_, f64>, &[Var]) -> Result<Var, E>,
{
    let (input_grads, param_grads, decisions) = {
        let mut tape = if opts.freeze_decisions {
            Tape::recording(store)
        } else {
            Tape::new(store)
        };
        let vars = inputs
            .iter()
            .map(|t| tape.leaf(t.clone(), true))
            .collect::<Result<Vec<_>, _>>()?;
        let out = f(&mut tape, &vars)?;
        let decisions = opts.freeze_decisions.then(|| Arc::new(tape.take_decisions()));
        let grads = tape.backward(out)?;
        let ig: Vec<Vec<f64>> = vars
            .iter()
            .zip(inputs)
            .map(|(&v, t)| grads.get(v).map(<[f64]>::to_vec).unwrap_or_else(|| vec![0.0; t.len()]))
            .collect();
        (ig, grads.into_params(), decisions)
    };

    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut report = GradCheckReport::default();
    let eps = opts.eps;

    let mut scratch_inputs = inputs.to_vec();
    for (k, analytic) in input_grads.iter().enumerate() {
        let mut worst = 0.0f64;
        let mut at = (0.0, 0.0);
        let picked = coords(inputs[k].len(), opts.max_coords_per_tensor, &mut rng);
        for &c in &picked {
            let orig = inputs[k].data()[c];
            let mut numeric = 0.0;
            for &(step, weight) in opts.stencil.offsets() {
                scratch_inputs[k].data_mut()[c] = orig + step * eps;
                numeric += weight * eval(store, &scratch_inputs, &decisions, &f)?;
            }
            scratch_inputs[k].data_mut()[c] = orig;
            numeric /= eps;
            let e = relative_error(analytic[c], numeric);
            if e >= worst {
                worst = e;
                at = (analytic[c], numeric);
            }
        }
        report.entries.push(GradCheckEntry {
            name: format!("input[{k}]"),
            coords_checked: picked.len(),
            max_rel_error: worst,
            worst: at,
        });
    }

    if opts.check_params {
        let mut scratch = store.clone();
        let names = store.names();
        for (idx, name) in names.iter().enumerate() {
            if !store.by_name(name).map(|p| p.requires_grad).unwrap_or(false) {
                continue;
            }
            let len = store.by_name(name).map(|p| p.value.len()).unwrap_or(0);
            let zeros = vec![0.0; len];
            let analytic = param_grads.get(idx).unwrap_or(&zeros).to_vec();
            let picked = coords(len, opts.max_coords_per_tensor, &mut rng);
            let mut worst = 0.0f64;
            let mut at = (0.0, 0.0);
            for &c in &picked {
                let orig = store.by_name(name).expect("present").value.data()[c];
                let mut numeric = 0.0;
                for &(step, weight) in opts.stencil.offsets() {
                    set(&mut scratch, name, c, orig + step * eps);
                    numeric += weight * eval(&scratch, inputs, &decisions, &f)?;
                }
                set(&mut scratch, name, c, orig);
                numeric /= eps;
                let e = relative_error(analytic[c], numeric);
                if e >= worst {
                    worst = e;
                    at = (analytic[c], numeric);
                }
            }
            report.entries.push(GradCheckEntry {
                name: name.clone(),
                coords_checked: picked.len(),
                max_rel_error: worst,
                worst: at,
            });
        }
    }
    Ok(report)
}

fn set(store: &mut ParameterStore<f64>, name: &str, coord: usize, value: f64) {
    if let Some(p) = store.by_name_mut(name) {
        p.value.data_mut()[coord] = value;
    }
}
