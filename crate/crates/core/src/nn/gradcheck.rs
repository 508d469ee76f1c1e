//! Central finite-difference gradient verification.
//!
//! The numeric side re-evaluates the loss through non-recording graphs, so it
//! is independent of the backward closures it checks.

use crate::error::Result;
use crate::nn::graph::{Graph, Tensor};

/// A parameter blob fed to the loss builder.
#[derive(Clone)]
pub struct CheckInput {
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

impl CheckInput {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Self {
        assert_eq!(shape.iter().product::<usize>(), data.len());
        CheckInput { shape, data }
    }
}

/// Worst observed deviation between analytic and numeric gradients.
#[derive(Debug, Clone)]
pub struct CheckReport {
    pub max_rel_err: f64,
    /// `(input index, element index)` of the worst deviation.
    pub worst: (usize, usize),
    pub analytic: f64,
    pub numeric: f64,
}

/// Compare tape gradients against central finite differences with step
/// `epsilon`. `build` must construct the scalar loss from leaf tensors
/// created on the given graph, one per input, in order.
pub fn compare<F>(inputs: &[CheckInput], epsilon: f64, build: F) -> Result<CheckReport>
where
    F: Fn(&Graph, &[Tensor]) -> Result<Tensor>,
{
    let eval = |blobs: &[CheckInput]| -> Result<f64> {
        let g = Graph::inference();
        let leaves: Vec<Tensor> = blobs
            .iter()
            .map(|b| g.tensor(b.shape.clone(), b.data.clone()))
            .collect();
        Ok(build(&g, &leaves)?.item())
    };

    // analytic gradients
    let g = Graph::training();
    let leaves: Vec<Tensor> = inputs
        .iter()
        .map(|b| g.tensor(b.shape.clone(), b.data.clone()))
        .collect();
    let loss = build(&g, &leaves)?;
    let grads = g.backward(&loss)?;
    let analytic: Vec<Vec<f64>> = leaves.iter().map(|t| grads.get(t).to_vec()).collect();

    let mut report = CheckReport {
        max_rel_err: 0.0,
        worst: (0, 0),
        analytic: 0.0,
        numeric: 0.0,
    };
    let mut blobs = inputs.to_vec();
    for i in 0..blobs.len() {
        for j in 0..blobs[i].data.len() {
            let orig = blobs[i].data[j];
            blobs[i].data[j] = orig + epsilon;
            let hi = eval(&blobs)?;
            blobs[i].data[j] = orig - epsilon;
            let lo = eval(&blobs)?;
            blobs[i].data[j] = orig;
            let numeric = (hi - lo) / (2.0 * epsilon);
            let a = analytic[i][j];
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-3);
            if rel > report.max_rel_err {
                report.max_rel_err = rel;
                report.worst = (i, j);
                report.analytic = a;
                report.numeric = numeric;
            }
        }
    }
    Ok(report)
}
