//! Finite-difference verification of reverse-mode gradients.
//!
//! Always double precision. The harness never aborts mid-scan: every
//! parameter tensor gets an entry in the report, failures and all.

use crate::error::Result;
use crate::tensor::graph::{Graph, NodeId};
use crate::tensor::Tensor;

pub const DEFAULT_FD_STEP: f64 = 1e-5;
pub const DEFAULT_GRAD_TOL: f64 = 1e-4;

#[derive(Debug, Clone)]
pub struct GradCheckEntry {
    pub name: String,
    pub max_rel_err: f64,
}

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub entries: Vec<GradCheckEntry>,
}

impl GradCheckReport {
    pub fn max_err(&self) -> f64 {
        self.entries.iter().fold(0.0, |m, e| m.max(e.max_rel_err))
    }

    pub fn passes(&self, tol: f64) -> bool {
        self.entries.iter().all(|e| e.max_rel_err < tol)
    }

    pub fn worst(&self) -> Option<&GradCheckEntry> {
        self.entries
            .iter()
            .max_by(|a, b| a.max_rel_err.partial_cmp(&b.max_rel_err).unwrap())
    }
}

/// Relative error with an absolute floor so finite-difference noise on
/// near-zero gradients does not register as failure.
fn rel_err(analytic: f64, numeric: f64) -> f64 {
    let denom = analytic.abs().max(numeric.abs()).max(1e-3);
    (analytic - numeric).abs() / denom
}

/// Compares the reverse-mode gradient of `build` against central finite
/// differences, per element of every named parameter.
///
/// `build` receives leaves in the same order as `params` and must return a
/// scalar loss. It is re-invoked on a fresh graph for every perturbed
/// evaluation, so it must be a pure function of the leaf values.
pub fn grad_check<F>(
    params: &[(String, Tensor<f64>)],
    build: F,
    step: f64,
) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph<f64>, &[NodeId]) -> Result<NodeId>,
{
    let eval = |tensors: &[Tensor<f64>]| -> Result<f64> {
        let mut g = Graph::new();
        let ids: Vec<NodeId> = tensors.iter().map(|t| g.constant(t.clone())).collect();
        let loss = build(&mut g, &ids)?;
        Ok(g.value(loss).item())
    };

    // Analytic pass.
    let mut g = Graph::new();
    let ids: Vec<NodeId> = params.iter().map(|(_, t)| g.param(t.clone())).collect();
    let loss = build(&mut g, &ids)?;
    g.backward(loss)?;
    let analytic: Vec<Vec<f64>> = ids
        .iter()
        .map(|&id| g.grad(id).map(|s| s.to_vec()).unwrap_or_default())
        .collect();

    let mut tensors: Vec<Tensor<f64>> = params.iter().map(|(_, t)| t.clone()).collect();
    let mut entries = Vec::with_capacity(params.len());
    for (pi, (name, _)) in params.iter().enumerate() {
        let mut max_err = 0.0f64;
        for ei in 0..tensors[pi].numel() {
            let orig = tensors[pi].data()[ei];
            tensors[pi].data_mut()[ei] = orig + step;
            let plus = eval(&tensors)?;
            tensors[pi].data_mut()[ei] = orig - step;
            let minus = eval(&tensors)?;
            tensors[pi].data_mut()[ei] = orig;
            let numeric = (plus - minus) / (2.0 * step);
            let a = analytic[pi].get(ei).copied().unwrap_or(0.0);
            max_err = max_err.max(rel_err(a, numeric));
        }
        entries.push(GradCheckEntry { name: name.clone(), max_rel_err: max_err });
    }
    Ok(GradCheckReport { entries })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn linear_layer_gradients_are_tight() {
        let params = vec![
            ("w".to_string(), Tensor::from_fn(&[3, 4], |i| 0.1 * (i as f64) - 0.5)),
            ("b".to_string(), Tensor::from_fn(&[3], |i| 0.2 * i as f64)),
        ];
        let x = Tensor::from_fn(&[2, 4], |i| (i as f64).sin());
        let report = grad_check(
            &params,
            |g, ids| {
                let xn = g.constant(x.clone());
                let y = g.linear(xn, ids[0], ids[1])?;
                let sq = g.square(y);
                Ok(g.sum(sq))
            },
            DEFAULT_FD_STEP,
        )
        .unwrap();
        assert!(report.max_err() < 1e-7, "max err {}", report.max_err());
    }

    #[test]
    fn softplus_chain_gradients() {
        let params = vec![("x".to_string(), Tensor::from_fn(&[6], |i| 0.7 * i as f64 - 2.0))];
        let report = grad_check(
            &params,
            |g, ids| {
                let a = g.softplus(ids[0]);
                let b = g.softplus(a);
                let c = g.sigmoid(b);
                Ok(g.sum(c))
            },
            DEFAULT_FD_STEP,
        )
        .unwrap();
        assert!(report.max_err() < 1e-6, "max err {}", report.max_err());
    }
}
