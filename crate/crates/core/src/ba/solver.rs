//! Levenberg-Marquardt over the block-sparse normal equations.

use alloc::vec::Vec;

use nalgebra::DVector;
#[allow(unused_imports)]
use num_traits::Float;
use serde::{Deserialize, Serialize};

use super::linear::BlockSystem;
use super::problem::{apply_step, evaluate, offsets, BaProblem, Evaluation, FamilyCosts, Layout, SolverConfig};
use crate::error::{Error, Result};

const DAMPING_FLOOR: f64 = 1e-6;
const DAMPING_LIMIT: f64 = 1e16;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Termination {
    GradientTolerance,
    RelativeCostTolerance,
    StepTolerance,
    MaxIterations,
    DampingLimit,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct IterationRecord {
    pub iter: usize,
    pub costs: FamilyCosts,
    pub total: f64,
    pub damping: f64,
    pub accepted: bool,
    /// Observations whose point sat behind the camera this iteration.
    pub skipped_depth: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SolveReport {
    pub iterations: Vec<IterationRecord>,
    pub termination: Termination,
    pub initial_cost: f64,
    pub final_cost: f64,
}

impl SolveReport {
    pub fn accepted_steps(&self) -> usize {
        self.iterations.iter().skip(1).filter(|r| r.accepted).count()
    }
}

fn assemble(layout: &Layout, eval: &Evaluation) -> BlockSystem {
    let mut sys = BlockSystem::new(layout.dims.clone(), layout.hub.clone());
    for b in &eval.blocks {
        sys.add_residual(&b.jac, &b.r, b.effective_weight());
    }
    sys
}

fn block_of(offs: &[usize], idx: usize) -> usize {
    match offs.binary_search(&idx) {
        Ok(b) => b,
        Err(b) => b - 1,
    }
}

/// Minimizes the problem's objective starting from its current state.
pub fn solve(problem: &BaProblem, config: &SolverConfig) -> Result<(BaProblem, SolveReport)> {
    config.validate()?;
    problem.validate()?;
    let layout = Layout::new(problem, config);
    let offs = offsets(&layout);
    let mut current = problem.clone();
    let mut eval = evaluate(&current, config, &layout, None, true)?;
    let mut cost = eval.costs.total();
    let mut mu = config.damping_init;
    let mut records = Vec::with_capacity(config.max_iters + 1);
    records.push(IterationRecord {
        iter: 0,
        costs: eval.costs,
        total: cost,
        damping: mu,
        accepted: true,
        skipped_depth: eval.skipped_depth,
    });
    let initial_cost = cost;
    if layout.dims.is_empty() {
        return Ok((
            current,
            SolveReport {
                iterations: records,
                termination: Termination::GradientTolerance,
                initial_cost,
                final_cost: cost,
            },
        ));
    }

    let mut sys = assemble(&layout, &eval);
    let mut termination = Termination::MaxIterations;
    for iter in 1..=config.max_iters {
        if sys.rhs().amax() < config.gradient_tol {
            termination = Termination::GradientTolerance;
            break;
        }
        let diag = sys.diagonal();
        let damping = diag.map(|d| mu * d.max(DAMPING_FLOOR));
        let mut damped = sys.clone();
        damped.add_diagonal(&damping);
        let step: DVector<f64> = match damped.solve() {
            Ok(x) => -x,
            Err(Error::NumericalFailure { .. }) => {
                // indefinite even with damping: increase it and retry
                mu *= config.damping_up;
                records.push(IterationRecord {
                    iter,
                    costs: eval.costs,
                    total: cost,
                    damping: mu,
                    accepted: false,
                    skipped_depth: eval.skipped_depth,
                });
                if mu > DAMPING_LIMIT {
                    termination = Termination::DampingLimit;
                    break;
                }
                continue;
            }
            Err(e) => return Err(e),
        };
        if let Some(i) = step.iter().position(|v| !v.is_finite()) {
            return Err(Error::NumericalFailure {
                block: layout.label(block_of(&offs, i)),
                what: "non-finite step",
            });
        }
        if step.amax() < config.step_tol {
            termination = Termination::StepTolerance;
            break;
        }
        let candidate = apply_step(&current, &layout, &offs, &step);
        let cand_eval = evaluate(&candidate, config, &layout, None, false)?;
        let new_cost = cand_eval.costs.total();
        if new_cost < cost {
            current = candidate;
            current.reproject_bounds(&config.delta);
            eval = evaluate(&current, config, &layout, None, true)?;
            let new_cost = eval.costs.total();
            let rel = (cost - new_cost) / cost.max(f64::MIN_POSITIVE);
            cost = new_cost;
            mu = (mu * config.damping_down).max(1e-15);
            records.push(IterationRecord {
                iter,
                costs: eval.costs,
                total: cost,
                damping: mu,
                accepted: true,
                skipped_depth: eval.skipped_depth,
            });
            if rel < config.relative_cost_tol {
                termination = Termination::RelativeCostTolerance;
                break;
            }
            sys = assemble(&layout, &eval);
        } else {
            mu *= config.damping_up;
            records.push(IterationRecord {
                iter,
                costs: eval.costs,
                total: cost,
                damping: mu,
                accepted: false,
                skipped_depth: eval.skipped_depth,
            });
            if mu > DAMPING_LIMIT {
                termination = Termination::DampingLimit;
                break;
            }
        }
    }
    Ok((
        current,
        SolveReport {
            iterations: records,
            termination,
            initial_cost,
            final_cost: cost,
        },
    ))
}
