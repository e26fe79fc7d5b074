//! Test-time entropy reduction along the neural dynamics, and early-state
//! selection.
//!
//! Every `T_f` solver steps the input is nudged by `R` projected gradient
//! descent steps on the prediction entropy of `f(z^[t+1]; x)` (with
//! `z^[t+1]` frozen), after which `z^[t+1]` is recomputed from the updated
//! input. The input never leaves the ε-ball around the received input.

use std::time::{Duration, Instant};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::attacks::{pgd_generate, AttackContext, AttackSpec, Batch, DomainBox, Predictor};
use crate::autodiff::{reverse_grad, ExprGraph, Tensor};
use crate::deq::{run_dynamics, solve_states, DeqModel, DynamicsTrace, SolverConfig};
use crate::error::{Error, Result};
use crate::scalar::Scalar;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DefenseConfig {
    /// Entropy-descent step size β.
    pub beta: f64,
    /// Descent steps per intervention.
    pub iterations: usize,
    /// Intervene after every `frequency`-th solver step.
    pub frequency: usize,
    /// ℓ∞ budget around the received input.
    pub eps: f64,
    pub enabled: bool,
}

impl Default for DefenseConfig {
    fn default() -> Self {
        Self {
            beta: 2.0 / 255.0,
            iterations: 10,
            frequency: 2,
            eps: 8.0 / 255.0,
            enabled: true,
        }
    }
}

impl DefenseConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.beta >= 0.0) || !self.beta.is_finite() {
            return Err(Error::Config(format!("defense beta = {} must be >= 0", self.beta)));
        }
        if self.iterations == 0 {
            return Err(Error::Config("defense iterations must be >= 1".into()));
        }
        if self.frequency == 0 {
            return Err(Error::Config("defense frequency must be >= 1".into()));
        }
        if !(self.eps >= 0.0) || !self.eps.is_finite() {
            return Err(Error::Config(format!("defense eps = {} must be >= 0", self.eps)));
        }
        Ok(())
    }
}

/// One input intervention at state `t`.
#[derive(Debug, Clone, PartialEq)]
pub struct InterventionRecord<T> {
    /// Index of the state that was recomputed.
    pub t: usize,
    /// `H(h(z^[t]))` before the input update.
    pub entropy_before: T,
    /// Same quantity at the recomputed `z^[t]`.
    pub entropy_after: T,
    /// Descent steps skipped because the entropy gradient was non-finite.
    pub flagged_steps: usize,
}

#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct WallTime {
    pub total: Duration,
    /// Time spent in entropy descent steps.
    pub descent: Duration,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DefenseTrace<T> {
    pub trace: DynamicsTrace<T>,
    pub interventions: Vec<InterventionRecord<T>>,
    pub wall_time: WallTime,
}

impl<T: Scalar> DefenseTrace<T> {
    /// Input active at each state.
    pub fn input_versions(&self) -> &[Tensor<T>] {
        &self.trace.inputs_used
    }
}

/// `H(h(f(z_next; x)))` and its gradient in `x` with `z_next` constant.
pub fn entropy_objective<T: Scalar>(
    model: &DeqModel<T>,
    z_next: &Tensor<T>,
    x: &Tensor<T>,
) -> Result<(T, Tensor<T>)> {
    let mut g = ExprGraph::new();
    let nodes = model.to_graph(&mut g, false)?;
    let xn = g.param(x.clone())?;
    let z = g.constant(z_next.clone())?;
    let f = nodes.layer(&mut g, z, xn)?;
    let logits = nodes.head(&mut g, f)?;
    let h = g.entropy(logits)?;
    let r = reverse_grad(&g, h)?;
    Ok((r.value.item(), r.grad(xn).clone()))
}

/// One projected descent step on the entropy objective. Returns the new
/// input and whether the step was skipped for a non-finite gradient (the
/// input is then returned unchanged).
pub fn input_update_step<T: Scalar>(
    model: &DeqModel<T>,
    z_next: &Tensor<T>,
    x_cur: &Tensor<T>,
    x_received: &Tensor<T>,
    beta: T,
    eps: T,
    domain: &DomainBox<T>,
) -> Result<(Tensor<T>, bool)> {
    let grad = match entropy_objective(model, z_next, x_cur) {
        Ok((_, g)) if g.all_finite() => g,
        Ok(_) | Err(Error::NonFinite(_)) => return Ok((x_cur.clone(), true)),
        Err(e) => return Err(e),
    };
    let stepped = x_cur.zip_map(&grad, |x, g| x - beta * g)?;
    Ok((domain.project(&stepped, x_received, eps), false))
}

/// The solve interleaved with input entropy reduction. Disabled defenses
/// (or `frequency > N`) run exactly the plain solver.
pub fn entropy_reduction_solve<T: Scalar>(
    model: &DeqModel<T>,
    x_received: &Tensor<T>,
    solver: &SolverConfig,
    defense: &DefenseConfig,
    domain: &DomainBox<T>,
) -> Result<DefenseTrace<T>> {
    defense.validate()?;
    let start = Instant::now();
    let mut descent = Duration::ZERO;
    let mut pending: Vec<(usize, T, usize)> = Vec::new();
    let (beta, eps) = (T::lit(defense.beta), T::lit(defense.eps));
    let (states, inputs) = if defense.enabled {
        let mut hook = |t: usize, z_next: &Tensor<T>, x_cur: &Tensor<T>| -> Result<Option<Tensor<T>>> {
            if !t.is_multiple_of(defense.frequency) {
                return Ok(None);
            }
            let began = Instant::now();
            let before = crate::autodiff::eval_pred_entropy(&model.head_apply(z_next)?)?;
            let mut x = x_cur.clone();
            let mut flagged = 0;
            for _ in 0..defense.iterations {
                let (next, skipped) = input_update_step(model, z_next, &x, x_received, beta, eps, domain)?;
                flagged += usize::from(skipped);
                x = next;
            }
            descent += began.elapsed();
            pending.push((t, before, flagged));
            Ok(if x == *x_cur { None } else { Some(x) })
        };
        run_dynamics(model, x_received, solver, &mut hook)?
    } else {
        run_dynamics(model, x_received, solver, &mut |_, _, _| Ok(None))?
    };
    let trace = DynamicsTrace::from_states(model, states, inputs)?;
    let interventions = pending
        .into_iter()
        .map(|(t, entropy_before, flagged_steps)| InterventionRecord {
            t,
            entropy_before,
            entropy_after: trace.entropies[t],
            flagged_steps,
        })
        .collect();
    Ok(DefenseTrace {
        trace,
        interventions,
        wall_time: WallTime {
            total: start.elapsed(),
            descent,
        },
    })
}

/// Prediction read from a state of the defended dynamics.
#[derive(Debug, Clone)]
pub struct DefendedPredictor<T> {
    pub solver: SolverConfig,
    pub defense: DefenseConfig,
    pub domain: DomainBox<T>,
    pub state: usize,
}

impl<T: Scalar> Predictor<T> for DefendedPredictor<T> {
    fn logits(&self, model: &DeqModel<T>, x: &Tensor<T>) -> Result<Tensor<T>> {
        let d = entropy_reduction_solve(model, x, &self.solver, &self.defense, &self.domain)?;
        let z = d.trace.states.get(self.state).ok_or(Error::Index {
            context: "prediction state",
            index: self.state,
            len: d.trace.states.len(),
        })?;
        model.head_apply(z)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EarlyStateSelection {
    pub state: usize,
    /// Robust accuracy at states `1..=N` (index 0 is state 1).
    pub accuracies: Vec<f64>,
}

/// State with the highest accuracy under the given attack; ties go to the
/// later state. `fixed_state` skips the search.
pub fn early_state_select<T: Scalar>(
    model: &DeqModel<T>,
    val: &Batch<T>,
    attack: &AttackSpec,
    ctx: &AttackContext<T>,
    fixed_state: Option<usize>,
) -> Result<EarlyStateSelection> {
    let n = ctx.solver.iterations;
    if let Some(s) = fixed_state {
        if s < 1 || s > n {
            return Err(Error::Index {
                context: "fixed early state",
                index: s,
                len: n + 1,
            });
        }
    }
    if val.is_empty() {
        return Err(Error::Contract("early-state selection needs validation data".into()));
    }
    let (adv, failed) = pgd_generate(model, val, attack, ctx)?;
    let per_example = (0..val.len())
        .into_par_iter()
        .map(|k| {
            if failed[k] {
                return Ok(None);
            }
            match solve_states(model, &adv[k], &ctx.solver) {
                Ok(states) => (1..=n)
                    .map(|t| Ok(model.head_apply(&states[t])?.argmax() == val.labels[k]))
                    .collect::<Result<Vec<_>>>()
                    .map(Some),
                Err(Error::Divergence { .. }) | Err(Error::NonFinite(_)) => Ok(None),
                Err(e) => Err(e),
            }
        })
        .collect::<Result<Vec<_>>>()?;
    let evaluated: Vec<&Vec<bool>> = per_example.iter().flatten().collect();
    let accuracies: Vec<f64> = (0..n)
        .map(|t| {
            if evaluated.is_empty() {
                0.0
            } else {
                evaluated.iter().filter(|c| c[t]).count() as f64 / evaluated.len() as f64
            }
        })
        .collect();
    let state = fixed_state.unwrap_or_else(|| {
        let mut best = n;
        for t in (1..=n).rev() {
            if accuracies[t - 1] > accuracies[best - 1] {
                best = t;
            }
        }
        best
    });
    Ok(EarlyStateSelection { state, accuracies })
}
