//! Central-difference verification of analytic gradients.
//!
//! For a coordinate `w` the numeric derivative is the five-point central
//! stencil `(-L(w+2e) + 8 L(w+e) - 8 L(w-e) + L(w-2e)) / (12 e)`, and the
//! reported error is `|analytic - numeric| / max(|analytic|, |numeric|,
//! REL_FLOOR)`. The floor turns the criterion into an absolute one for
//! near-zero gradients, where a pure ratio would amplify oracle noise into
//! false alarms.
//!
//! The fourth-order stencil matters: the plain two-point scheme carries
//! O(eps^2 * f''') truncation error, which at eps = 1e-4 already exceeds a
//! 1e-5 relative tolerance on softmax cross-entropy landscapes — the oracle
//! would drown out the very errors it is meant to detect. At fourth order
//! the truncation term is negligible against double-precision roundoff, so
//! any reported discrepancy is the analytic gradient's fault.
//!
//! The loss closure must be pure: same parameters, same value, no internal
//! randomness. Callers freeze a batch (inputs, masks, noise) and close over
//! it.

use super::{ParamSet, Tensor};

/// Relative-error denominator floor; below this gradient magnitude the check
/// is effectively absolute at `tolerance * REL_FLOOR`.
pub const REL_FLOOR: f64 = 1e-2;

#[derive(Debug, Clone)]
pub struct TensorCheck {
    pub name: String,
    pub coords_checked: usize,
    pub max_rel_err: f64,
    /// Analytic and numeric values at the worst coordinate.
    pub worst_analytic: f64,
    pub worst_numeric: f64,
}

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub epsilon: f64,
    pub tolerance: f64,
    pub tensors: Vec<TensorCheck>,
}

impl GradCheckReport {
    pub fn pass(&self) -> bool {
        self.tensors.iter().all(|t| t.max_rel_err < self.tolerance)
    }

    /// The tensor with the largest error.
    pub fn worst(&self) -> &TensorCheck {
        self.tensors
            .iter()
            .max_by(|a, b| a.max_rel_err.total_cmp(&b.max_rel_err))
            .expect("report covers at least one tensor")
    }

    /// Names of tensors exceeding the tolerance.
    pub fn failing(&self) -> Vec<&str> {
        self.tensors
            .iter()
            .filter(|t| t.max_rel_err >= self.tolerance)
            .map(|t| t.name.as_str())
            .collect()
    }
}

/// Coordinates to probe: evenly strided over the tensor plus the coordinate
/// with the largest analytic gradient (the most informative one).
fn probe_coords(numel: usize, largest: usize, cap: usize) -> Vec<usize> {
    if numel <= cap {
        return (0..numel).collect();
    }
    let stride = numel / cap;
    let mut coords: Vec<usize> = (0..cap).map(|i| i * stride).collect();
    if !coords.contains(&largest) {
        coords.push(largest);
    }
    coords
}

/// Checks `analytic` against central differences of `loss` at a sample of
/// coordinates in every tensor. Parameters are restored bit-exactly.
pub fn grad_check<P: ParamSet>(
    params: &mut P,
    analytic: &P,
    loss: &mut dyn FnMut(&P) -> f64,
    epsilon: f64,
    tolerance: f64,
    coords_per_tensor: usize,
) -> GradCheckReport {
    let mut tensors = Vec::new();
    for name in params.tensor_names() {
        let grad: &Tensor = analytic
            .tensor(&name)
            .unwrap_or_else(|| panic!("analytic gradients missing tensor {name}"));
        let numel = grad.numel();
        let largest = grad
            .data
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.abs().total_cmp(&b.1.abs()))
            .map(|(i, _)| i)
            .unwrap_or(0);
        let coords = probe_coords(numel, largest, coords_per_tensor);

        let mut check = TensorCheck {
            name: name.clone(),
            coords_checked: coords.len(),
            max_rel_err: 0.0,
            worst_analytic: 0.0,
            worst_numeric: 0.0,
        };
        for &c in &coords {
            let original = params.tensor(&name).expect("declared tensor exists").data[c];
            let mut eval = |w: f64| {
                params.tensor_mut(&name).unwrap().data[c] = w;
                loss(params)
            };
            let up2 = eval(original + 2.0 * epsilon);
            let up1 = eval(original + epsilon);
            let down1 = eval(original - epsilon);
            let down2 = eval(original - 2.0 * epsilon);
            params.tensor_mut(&name).unwrap().data[c] = original;

            let numeric = (-up2 + 8.0 * up1 - 8.0 * down1 + down2) / (12.0 * epsilon);
            let a = grad.data[c];
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(REL_FLOOR);
            if rel > check.max_rel_err {
                check.max_rel_err = rel;
                check.worst_analytic = a;
                check.worst_numeric = numeric;
            }
        }
        tensors.push(check);
    }
    GradCheckReport {
        epsilon,
        tolerance,
        tensors,
    }
}
