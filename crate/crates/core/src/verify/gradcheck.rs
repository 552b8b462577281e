use serde::Serialize;

use crate::error::Result;
use crate::model::Model;
use crate::params::Gradients;
use crate::tensor::Matrix;

/// Comparison of analytic and central-difference gradients on one parameter.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct BlockCheck {
    pub name: String,
    pub analytic_norm: f64,
    pub numeric_norm: f64,
    /// `‖a − n‖ / max(‖a‖, ‖n‖, floor)`.
    pub relative_error: f64,
}

/// Checks every parameter block of `model` against central differences of
/// `loss`. `analytic` must be the gradient of `loss` at the current weights.
pub fn check_gradients(
    model: &Model<f64>,
    analytic: &Gradients<f64>,
    loss: &dyn Fn(&Model<f64>) -> Result<f64>,
    eps: f64,
    floor: f64,
) -> Result<Vec<BlockCheck>> {
    let mut probe = model.clone();
    let mut out = Vec::new();
    for (id, name, t) in model.params.iter() {
        let mut numeric = Matrix::zeros(t.rows(), t.cols());
        for k in 0..t.len() {
            let orig = t.as_slice()[k];
            probe.params.get_mut(id).as_mut_slice()[k] = orig + eps;
            let up = loss(&probe)?;
            probe.params.get_mut(id).as_mut_slice()[k] = orig - eps;
            let down = loss(&probe)?;
            probe.params.get_mut(id).as_mut_slice()[k] = orig;
            numeric.as_mut_slice()[k] = (up - down) / (2.0 * eps);
        }
        let a = analytic.get(id).cloned().unwrap_or_else(|| Matrix::zeros(t.rows(), t.cols()));
        let diff = a.zip_map(&numeric, |x, y| x - y).norm();
        let (an, nn) = (a.norm(), numeric.norm());
        out.push(BlockCheck {
            name: name.to_string(),
            analytic_norm: an,
            numeric_norm: nn,
            relative_error: diff / an.max(nn).max(floor),
        });
    }
    Ok(out)
}
