use alloc::format;
use alloc::vec::Vec;

use super::{DiffError, Graph, Var};
use crate::tensor::{Real, Tensor};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GradCheck {
    pub max_relative_error: f64,
    pub coordinates: usize,
    /// `(parameter index, flat coordinate)` of the worst disagreement.
    pub worst: (usize, usize),
}

/// Compares reverse-mode gradients against central differences.
///
/// `build` must deterministically construct the scalar loss from the bound
/// parameter leaves. At most `max_coords` coordinates per parameter are
/// checked (evenly strided); `None` checks all of them. The relative error
/// per coordinate is `|ga - gn| / max(1e-8, |ga| + |gn|)`.
pub fn gradient_check<T, F>(
    params: &[Tensor<T>],
    epsilon: f64,
    max_coords: Option<usize>,
    mut build: F,
) -> Result<GradCheck, DiffError>
where
    T: Real,
    F: FnMut(&mut Graph<T>, &[Var]) -> Result<Var, DiffError>,
{
    if !(epsilon > 0.0) {
        return Err(DiffError::InvalidArgument { op: "gradient_check", detail: "epsilon must be > 0".into() });
    }
    let eval = |values: &[Tensor<T>], build: &mut F| -> Result<f64, DiffError> {
        let mut g = Graph::new();
        let vars: Vec<Var> = values.iter().map(|t| g.param(t.clone())).collect();
        let loss = build(&mut g, &vars)?;
        let v = g.value(loss).item().f64();
        if !v.is_finite() {
            return Err(DiffError::NonFinite(format!("loss = {v}")));
        }
        Ok(v)
    };

    let mut g = Graph::new();
    let vars: Vec<Var> = params.iter().map(|t| g.param(t.clone())).collect();
    let loss = build(&mut g, &vars)?;
    let analytic = g.backward(loss)?.collect(&vars);

    let mut work: Vec<Tensor<T>> = params.to_vec();
    let mut report = GradCheck { max_relative_error: 0.0, coordinates: 0, worst: (0, 0) };
    for (pi, ga) in analytic.iter().enumerate() {
        let n = ga.numel();
        let stride = match max_coords {
            Some(m) if m > 0 && n > m => n.div_ceil(m),
            _ => 1,
        };
        for ci in (0..n).step_by(stride) {
            let orig = work[pi].data()[ci];
            work[pi].data_mut()[ci] = T::of(orig.f64() + epsilon);
            let up = eval(&work, &mut build)?;
            work[pi].data_mut()[ci] = T::of(orig.f64() - epsilon);
            let down = eval(&work, &mut build)?;
            work[pi].data_mut()[ci] = orig;
            let numeric = (up - down) / (2.0 * epsilon);
            let a = ga.data()[ci].f64();
            let rel = (a - numeric).abs() / (a.abs() + numeric.abs()).max(1e-8);
            report.coordinates += 1;
            if rel > report.max_relative_error {
                report.max_relative_error = rel;
                report.worst = (pi, ci);
            }
        }
    }
    Ok(report)
}
