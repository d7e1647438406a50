//! Central finite-difference gradient oracle.
//!
//! Shared between unit tests (included by path) and integration tests. It only
//! evaluates forward passes, so it stays independent of the backward rules it
//! checks.

#![allow(dead_code)]

use prm_core::{Result, Tape, Tensor, Var};

/// Entries whose analytic and numeric gradients are both below this value are
/// compared in absolute rather than relative terms.
pub const REL_FLOOR: f64 = 1e-4;

#[derive(Clone, Debug, Default)]
pub struct GradReport {
    pub max_rel_err: f64,
    pub max_abs_err: f64,
    /// `(input index, flat entry, analytic, numeric)` of the worst entry.
    pub worst: Option<(usize, usize, f64, f64)>,
    pub per_input: Vec<f64>,
    pub entries_checked: usize,
}

pub fn random_tensor(rng: &mut impl rand::Rng, rows: usize, cols: usize, scale: f64) -> Tensor {
    let data = (0..rows * cols)
        .map(|_| (rng.random::<f64>() * 2.0 - 1.0) * scale)
        .collect();
    Tensor::from_vec(rows, cols, data).unwrap()
}

fn eval<F>(inputs: &[Tensor], f: &F) -> f64
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.param(t.clone())).collect();
    let loss = f(&mut tape, &vars).expect("forward pass");
    tape.value(loss).item()
}

/// Compares `backward` against central differences for every entry of every
/// input tensor.
pub fn check_gradients<F>(inputs: &[Tensor], eps: f64, f: F) -> GradReport
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.param(t.clone())).collect();
    let loss = f(&mut tape, &vars).expect("forward pass");
    tape.backward(loss).expect("backward");
    let analytic: Vec<Tensor> = vars
        .iter()
        .zip(inputs)
        .map(|(&v, t)| {
            tape.grad(v)
                .cloned()
                .unwrap_or_else(|| Tensor::zeros(t.rows(), t.cols()))
        })
        .collect();

    let mut report = GradReport::default();
    let mut perturbed = inputs.to_vec();
    for (k, input) in inputs.iter().enumerate() {
        let mut worst_here = 0.0f64;
        for e in 0..input.len() {
            let orig = input.data()[e];
            perturbed[k].data_mut()[e] = orig + eps;
            let up = eval(&perturbed, &f);
            perturbed[k].data_mut()[e] = orig - eps;
            let down = eval(&perturbed, &f);
            perturbed[k].data_mut()[e] = orig;
            let numeric = (up - down) / (2.0 * eps);
            let a = analytic[k].data()[e];
            let abs = (a - numeric).abs();
            let rel = abs / a.abs().max(numeric.abs()).max(REL_FLOOR);
            report.entries_checked += 1;
            report.max_abs_err = report.max_abs_err.max(abs);
            worst_here = worst_here.max(rel);
            if rel > report.max_rel_err || report.worst.is_none() {
                report.max_rel_err = report.max_rel_err.max(rel);
                report.worst = Some((k, e, a, numeric));
            }
        }
        report.per_input.push(worst_here);
    }
    report
}
