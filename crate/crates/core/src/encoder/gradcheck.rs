use rand::seq::index;

use crate::error::{Error, Result};
use crate::params::ParamTree;
use crate::seed;

/// Outcome of a finite-difference gradient check.
#[derive(Debug, Clone, PartialEq)]
pub struct GradCheck {
    pub max_relative_error: f64,
    /// Tensor name and flat offset of the worst entry.
    pub worst: Option<(String, usize)>,
    pub checked: usize,
    /// Sampled entries whose analytic gradient was exactly zero.
    pub zero_gradients: usize,
}

/// Compares `analytic` against central differences of `loss` at
/// `sample_count` randomly chosen scalar parameters.
///
/// Relative error is `|a - n| / max(|a|, |n|, 1e-12)`.
pub fn finite_difference_check<P, F>(
    params: &P,
    analytic: &P,
    mut loss: F,
    epsilon: f64,
    sample_count: usize,
    seed: u64,
) -> Result<GradCheck>
where
    P: ParamTree + Clone,
    F: FnMut(&P) -> Result<f64>,
{
    if !(epsilon > 0.0 && epsilon.is_finite()) {
        return Err(Error::invalid("epsilon must be positive and finite"));
    }
    let layout: Vec<(String, usize)> = params.tensors().iter().map(|t| (t.name.clone(), t.data.len())).collect();
    let grads: Vec<f64> = analytic.tensors().iter().flat_map(|t| t.data.iter().copied()).collect();
    let total: usize = layout.iter().map(|l| l.1).sum();
    if grads.len() != total {
        return Err(Error::Shape("analytic gradient is not congruent with params".into()));
    }
    let mut rng = seed::rng(seed, &[seed::hash_str("gradcheck")]);
    let mut picks = index::sample(&mut rng, total, sample_count.min(total)).into_vec();
    picks.sort_unstable();

    let mut work = params.clone();
    let mut out = GradCheck { max_relative_error: 0.0, worst: None, checked: 0, zero_gradients: 0 };
    for flat in picks {
        let (tensor, offset) = locate(&layout, flat);
        let original = work.tensors_mut()[tensor][offset];
        work.tensors_mut()[tensor][offset] = original + epsilon;
        let plus = loss(&work)?;
        work.tensors_mut()[tensor][offset] = original - epsilon;
        let minus = loss(&work)?;
        work.tensors_mut()[tensor][offset] = original;
        if !plus.is_finite() || !minus.is_finite() {
            return Err(Error::NonFinite(format!("loss at {}[{offset}]", layout[tensor].0)));
        }
        let numeric = (plus - minus) / (2.0 * epsilon);
        let a = grads[flat];
        let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-12);
        out.checked += 1;
        if a == 0.0 {
            out.zero_gradients += 1;
        }
        if out.worst.is_none() || rel > out.max_relative_error {
            out.max_relative_error = rel;
            out.worst = Some((layout[tensor].0.clone(), offset));
        }
    }
    Ok(out)
}

fn locate(layout: &[(String, usize)], mut flat: usize) -> (usize, usize) {
    for (i, (_, len)) in layout.iter().enumerate() {
        if flat < *len {
            return (i, flat);
        }
        flat -= len;
    }
    unreachable!("index within total parameter count")
}
