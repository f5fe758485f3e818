use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::ParamStore;
use crate::error::{Error, Result};

pub const DEFAULT_STEP: f64 = 1e-4;

/// Denominator floor for the relative error, so coordinates whose true
/// gradient is numerically zero are judged on absolute error.
pub const REL_ERR_FLOOR: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq)]
pub struct CoordError {
    pub param: String,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_err: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub checked: usize,
    pub max_rel_err: f64,
    pub worst: Option<CoordError>,
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_ERR_FLOOR)
}

/// Compares analytic gradients (stored in each parameter's `tensor.grad`)
/// against central differences `(f(θ+h) − f(θ−h)) / 2h`.
///
/// At most `samples` coordinates are drawn uniformly over all trainable
/// values; `samples == 0` checks every coordinate.
pub fn finite_diff_check<F>(
    mut loss_fn: F,
    params: &ParamStore<f64>,
    h: f64,
    samples: usize,
    seed: u64,
) -> Result<GradCheckReport>
where
    F: FnMut(&ParamStore<f64>) -> Result<f64>,
{
    let mut coords = Vec::new();
    for p in params.iter().filter(|p| p.trainable) {
        let grad = p.tensor.grad.as_ref().ok_or_else(|| {
            Error::contract(
                "finite_diff_check",
                format!("parameter `{}` has no analytic gradient", p.name),
            )
        })?;
        for (i, &g) in grad.iter().enumerate() {
            coords.push((p.name.clone(), i, g));
        }
    }
    let picked: Vec<usize> = if samples == 0 || samples >= coords.len() {
        (0..coords.len()).collect()
    } else {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut idx = sample(&mut rng, coords.len(), samples).into_vec();
        idx.sort_unstable();
        idx
    };

    let mut probe = params.clone();
    let mut report = GradCheckReport {
        checked: 0,
        max_rel_err: 0.0,
        worst: None,
    };
    for ci in picked {
        let (name, index, analytic) = &coords[ci];
        let orig = probe.tensor(name).data()[*index];
        probe.get_mut(name).unwrap().tensor.data_mut()[*index] = orig + h;
        let up = loss_fn(&probe)?;
        probe.get_mut(name).unwrap().tensor.data_mut()[*index] = orig - h;
        let down = loss_fn(&probe)?;
        probe.get_mut(name).unwrap().tensor.data_mut()[*index] = orig;
        let numeric = (up - down) / (2.0 * h);
        let rel_err = relative_error(*analytic, numeric);
        if !rel_err.is_finite() {
            return Err(Error::Numeric(format!(
                "non-finite gradient comparison at {name}[{index}]"
            )));
        }
        report.checked += 1;
        if report.worst.is_none() || rel_err > report.max_rel_err {
            report.max_rel_err = rel_err;
            report.worst = Some(CoordError {
                param: name.clone(),
                index: *index,
                analytic: *analytic,
                numeric,
                rel_err,
            });
        }
    }
    Ok(report)
}
