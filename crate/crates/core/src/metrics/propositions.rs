//! One-step weight-divergence checks for label flipping and soft-label boosting.
//!
//! Both checks take a single full-batch gradient-descent step from identical
//! weights under two labelings and compare the weight difference with the
//! closed form `eta * p(y=c) * mean_{x in c}(grad log f_r(x) - grad log f_c(x))`,
//! scaled by the soft-label coefficient in the boosted case.

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::nn::{Mode, Model, OptimizerSpec, OptimizerState, ParamVector, SoftLabel};

#[derive(Debug, Clone, PartialEq)]
pub struct DivergenceReport {
    pub empirical: ParamVector,
    pub analytic: ParamVector,
    pub max_abs_error: f64,
    /// `||empirical - analytic|| / max(||analytic||, 1e-12)`.
    pub rel_error: f64,
}

fn gd_step(model: &Model, data: &Dataset, eta: f64) -> Result<ParamVector> {
    let (x, y) = data.all();
    let g = model.loss_and_gradient(&x, &y, Mode::Eval)?;
    let mut params = model.params().clone();
    OptimizerState::new(OptimizerSpec::sgd(eta), params.len()).step(&mut params, &g.grad)?;
    Ok(params)
}

/// `grad_w log f_c(x)`.
fn grad_log_prob(model: &Model, x: &[f64], class: usize) -> Result<ParamVector> {
    let g = model.per_sample_loss_gradient(x, &SoftLabel::hard(class, model.num_classes()))?;
    Ok(g.scaled(-1.0))
}

/// `scale * eta * p(y=c) * mean over class-c samples of (grad log f_r - grad log f_c)`.
fn analytic(model: &Model, data: &Dataset, members: &[usize], c: usize, r: usize, eta: f64, scale: f64) -> Result<ParamVector> {
    let mut acc = model.params().zeros_like();
    if members.is_empty() || data.is_empty() {
        return Ok(acc);
    }
    for &i in members {
        let x = data.sample(i);
        acc.axpy(1.0, &grad_log_prob(model, x, r)?)?;
        acc.axpy(-1.0, &grad_log_prob(model, x, c)?)?;
    }
    let p = members.len() as f64 / data.len() as f64;
    Ok(acc.scaled(scale * eta * p / members.len() as f64))
}

fn report(empirical: ParamVector, analytic: ParamVector) -> DivergenceReport {
    let max_abs_error = empirical.max_abs_diff(&analytic);
    let diff = empirical.sub(&analytic).expect("same layout").norm();
    DivergenceReport {
        rel_error: diff / analytic.norm().max(1e-12),
        empirical,
        analytic,
        max_abs_error,
    }
}

fn hard_members(data: &Dataset, class: usize) -> Vec<usize> {
    (0..data.len())
        .filter(|&i| data.label(i).hard_class() == Some(class))
        .collect()
}

fn check_classes(model: &Model, classes: &[usize]) -> Result<()> {
    let k = model.num_classes();
    if let Some(&c) = classes.iter().find(|&&c| c >= k) {
        return Err(Error::invalid(format!("class {c} out of range for {k} classes")));
    }
    Ok(())
}

/// Divergence between a step on `source -> target` flipped labels and a step
/// on the labels as given.
pub fn check_proposition1(model: &Model, data: &Dataset, source: usize, target: usize, eta: f64) -> Result<DivergenceReport> {
    check_classes(model, &[source, target])?;
    let members = hard_members(data, source);
    let mut flipped = data.clone();
    for &i in &members {
        flipped.set_label(i, SoftLabel::hard(target, data.num_classes()))?;
    }
    let empirical = gd_step(model, &flipped, eta)?.sub(&gd_step(model, data, eta)?)?;
    let analytic = analytic(model, data, &members, source, target, eta, 1.0)?;
    Ok(report(empirical, analytic))
}

/// Divergence between a step where class-`z` samples carry the soft label
/// `lambda_z e_target + (1 - lambda_z) e_z` and a step on the labels as given.
pub fn check_proposition2(
    model: &Model,
    data: &Dataset,
    target: usize,
    z: usize,
    lambda_z: f64,
    eta: f64,
) -> Result<DivergenceReport> {
    check_classes(model, &[target, z])?;
    if z == target {
        return Err(Error::invalid("intermediate class equals the target"));
    }
    let k = data.num_classes();
    let mut probs = vec![0.0; k];
    probs[target] = lambda_z;
    probs[z] = 1.0 - lambda_z;
    let soft = SoftLabel::new(probs)?;
    let members = hard_members(data, z);
    let mut boosted = data.clone();
    for &i in &members {
        boosted.set_label(i, soft.clone())?;
    }
    let empirical = gd_step(model, &boosted, eta)?.sub(&gd_step(model, data, eta)?)?;
    let analytic = analytic(model, data, &members, z, target, eta, lambda_z)?;
    Ok(report(empirical, analytic))
}
