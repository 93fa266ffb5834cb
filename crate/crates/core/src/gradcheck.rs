//! Central finite-difference oracle for tape gradients.

use rayon::prelude::*;

use crate::autodiff::{OpKind, Tape, Var};
use crate::error::Result;
use crate::params::{ParamId, ParamStore};

/// Coordinate with the largest disagreement.
#[derive(Debug, Clone)]
pub struct WorstCoordinate {
    pub param: String,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
}

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub coordinates: usize,
    pub worst: Option<WorstCoordinate>,
}

/// Relative error with denominator `max(|a|, |b|, 1e-8)`.
pub fn relative_error(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-8)
}

/// Compares tape gradients of the scalar built by `f` against
/// `(f(θ+h) − f(θ−h)) / 2h` for every coordinate of every parameter.
///
/// `f` must be deterministic: fixed rng, inference-mode normalisation and dropout.
pub fn check_gradients<F>(store: &ParamStore<f64>, h: f64, f: F) -> Result<GradCheckReport>
where
    F: Fn(&ParamStore<f64>, &mut Tape<f64>) -> Result<Var> + Sync,
{
    check_gradients_with_fault(store, h, None, f)
}

/// As [`check_gradients`], with an optional deliberately broken backward rule.
pub fn check_gradients_with_fault<F>(
    store: &ParamStore<f64>,
    h: f64,
    fault: Option<OpKind>,
    f: F,
) -> Result<GradCheckReport>
where
    F: Fn(&ParamStore<f64>, &mut Tape<f64>) -> Result<Var> + Sync,
{
    let mut tape = Tape::new();
    if let Some(kind) = fault {
        tape.inject_fault(kind);
    }
    let root = f(store, &mut tape)?;
    let grads = tape.backward(root)?;
    drop(tape);

    let coords: Vec<(ParamId, usize)> = store
        .ids()
        .flat_map(|id| (0..store.value(id).len()).map(move |i| (id, i)))
        .collect();

    let eval = |s: &ParamStore<f64>| -> Result<f64> {
        let mut t = Tape::new();
        let r = f(s, &mut t)?;
        Ok(t.value(r).item())
    };

    let chunk = coords.len().div_ceil(rayon::current_num_threads().max(1)).max(1);
    let numeric: Vec<f64> = coords
        .par_chunks(chunk)
        .map(|part| -> Result<Vec<f64>> {
            let mut local = store.clone();
            let mut out = Vec::with_capacity(part.len());
            for &(id, i) in part {
                let orig = local.value(id).data()[i];
                local.get_mut(id).value.data_mut()[i] = orig + h;
                let plus = eval(&local)?;
                local.get_mut(id).value.data_mut()[i] = orig - h;
                let minus = eval(&local)?;
                local.get_mut(id).value.data_mut()[i] = orig;
                out.push((plus - minus) / (2.0 * h));
            }
            Ok(out)
        })
        .collect::<Result<Vec<_>>>()?
        .into_iter()
        .flatten()
        .collect();

    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        coordinates: coords.len(),
        worst: None,
    };
    for (&(id, i), &num) in coords.iter().zip(&numeric) {
        let analytic = grads.get(id).map_or(0.0, |g| g.data()[i]);
        let err = relative_error(analytic, num);
        if report.worst.is_none() || err > report.max_rel_error {
            report.max_rel_error = err;
            report.worst = Some(WorstCoordinate {
                param: store.name(id).to_string(),
                index: i,
                analytic,
                numeric: num,
            });
        }
    }
    Ok(report)
}
