//! Central finite-difference check of the training loss gradient.
//!
//! The numeric side evaluates the loss through the tensor-level forward
//! pass only, so it shares no code with reverse-mode differentiation.

use rand::seq::index::sample;
use rand::Rng;

use crate::autograd::Graph;
use crate::error::Result;
use crate::model::Dssr;
use crate::training::{loss, loss_graph, Batch};

#[derive(Clone, Debug, PartialEq)]
pub struct CoordCheck {
    pub name: String,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
}

impl CoordCheck {
    /// `|a - n| / max(|a|, |n|)`, zero when both vanish.
    pub fn rel_error(&self) -> f64 {
        let den = self.analytic.abs().max(self.numeric.abs());
        if den == 0.0 {
            0.0
        } else {
            (self.analytic - self.numeric).abs() / den
        }
    }
}

#[derive(Clone, Debug, Default)]
pub struct GradCheckReport {
    pub coords: Vec<CoordCheck>,
}

impl GradCheckReport {
    pub fn pass_rate(&self, tol: f64) -> f64 {
        if self.coords.is_empty() {
            return 0.0;
        }
        self.coords.iter().filter(|c| c.rel_error() <= tol).count() as f64 / self.coords.len() as f64
    }

    /// Coordinates exceeding `tol`, worst first.
    pub fn failures(&self, tol: f64) -> Vec<&CoordCheck> {
        let mut f: Vec<&CoordCheck> = self.coords.iter().filter(|c| c.rel_error() > tol).collect();
        f.sort_by(|a, b| b.rel_error().total_cmp(&a.rel_error()));
        f
    }
}

/// Analytic gradient of the total loss for every parameter.
pub fn analytic_gradients(model: &Dssr<f64>, batch: &Batch<f64>, alpha: f64) -> Result<Vec<(String, Vec<f64>)>> {
    let mut g = Graph::new();
    let bound = model.bind_trainable(&mut g);
    let lr = g.input(batch.lr.clone());
    let ihat = g.input(batch.ihat.clone());
    let hr = g.input(batch.hr.clone());
    let label = g.input(batch.detail_label.clone());
    let outs = model.forward(&mut g, &bound).unroll(lr, ihat, model.config().steps)?;
    let terms = loss_graph(&mut g, &outs, hr, label, alpha)?;
    let grads = g.backward(terms.total)?;
    Ok(model
        .params()
        .iter()
        .map(|(name, t)| {
            let grad = bound
                .get(name)
                .and_then(|v| grads.get(v))
                .map(|g| g.data().to_vec())
                .unwrap_or_else(|| vec![0.0; t.len()]);
            (name.to_string(), grad)
        })
        .collect())
}

/// Total loss through the tensor-level forward pass.
pub fn numeric_loss(model: &Dssr<f64>, batch: &Batch<f64>, alpha: f64) -> Result<f64> {
    let outs = model.unroll(&batch.lr, model.config().steps)?;
    Ok(loss(&outs, &batch.hr, &batch.detail_label, alpha)?.total)
}

/// Compares up to `per_tensor` random coordinates of every parameter
/// tensor against `(L(θ+h) - L(θ-h)) / 2h`.
pub fn gradcheck<R: Rng + ?Sized>(
    model: &Dssr<f64>,
    batch: &Batch<f64>,
    alpha: f64,
    h: f64,
    per_tensor: usize,
    rng: &mut R,
) -> Result<GradCheckReport> {
    let analytic = analytic_gradients(model, batch, alpha)?;
    let mut probe = model.clone();
    let mut coords = Vec::new();
    for (name, grad) in analytic {
        let n = grad.len();
        let picks = sample(rng, n, per_tensor.min(n)).into_vec();
        for index in picks {
            let orig = probe.params().get(&name).expect("layout").data()[index];
            let mut at = |v: f64| -> Result<f64> {
                probe.params_mut().get_mut(&name).expect("layout").data_mut()[index] = v;
                numeric_loss(&probe, batch, alpha)
            };
            let plus = at(orig + h)?;
            let minus = at(orig - h)?;
            probe.params_mut().get_mut(&name).expect("layout").data_mut()[index] = orig;
            coords.push(CoordCheck {
                name: name.clone(),
                index,
                analytic: grad[index],
                numeric: (plus - minus) / (2.0 * h),
            });
        }
    }
    Ok(GradCheckReport { coords })
}
