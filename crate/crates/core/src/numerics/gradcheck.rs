//! Central finite differences over a parameter set, used to validate the
//! reverse-mode gradients.

use super::{Float, Parameters};

/// Magnitude below which agreement is judged on absolute error: with this
/// floor a relative bound of `1e-4` becomes an absolute bound of `1e-6`.
pub const MAGNITUDE_FLOOR: Float = 1e-2;

/// Central-difference gradient of `f` with respect to every parameter value.
pub fn numeric_gradient(
    params: &Parameters,
    eps: Float,
    mut f: impl FnMut(&Parameters) -> Float,
) -> Vec<Vec<Float>> {
    let mut probe = params.clone();
    (0..params.len())
        .map(|i| {
            (0..params.values(i).len())
                .map(|j| {
                    let orig = params.values(i)[j];
                    probe.values_mut(i)[j] = orig + eps;
                    let up = f(&probe);
                    probe.values_mut(i)[j] = orig - eps;
                    let down = f(&probe);
                    probe.values_mut(i)[j] = orig;
                    (up - down) / (2.0 * eps)
                })
                .collect()
        })
        .collect()
}

/// `|a - n| / max(|a|, |n|, MAGNITUDE_FLOOR)`
pub fn relative_error(analytic: Float, numeric: Float) -> Float {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(MAGNITUDE_FLOOR)
}

#[derive(Debug, Clone, PartialEq)]
pub struct Comparison {
    pub max_relative_error: Float,
    /// `(parameter name, element index)` of the worst element
    pub worst: Option<(String, usize)>,
    pub checked: usize,
    /// elements whose analytic gradient is nonzero
    pub nonzero: usize,
}

pub fn compare(params: &Parameters, analytic: &[Vec<Float>], numeric: &[Vec<Float>]) -> Comparison {
    let mut cmp = Comparison { max_relative_error: 0.0, worst: None, checked: 0, nonzero: 0 };
    for (i, (a, n)) in analytic.iter().zip(numeric).enumerate() {
        for (j, (&a, &n)) in a.iter().zip(n).enumerate() {
            let e = relative_error(a, n);
            cmp.checked += 1;
            cmp.nonzero += (a != 0.0) as usize;
            if e > cmp.max_relative_error || !e.is_finite() {
                cmp.max_relative_error = e;
                cmp.worst = Some((params.name(i).to_string(), j));
            }
        }
    }
    cmp
}
