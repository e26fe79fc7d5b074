//! Forward fixed-point solvers that record the full neural dynamics.
//!
//! Every solver starts from `z⁰ = 0` and always yields `N + 1` states; an
//! early stop pads the tail with the converged state so state indexing is
//! total for the attack and defense code.

use std::collections::VecDeque;

use serde::{Deserialize, Serialize};

use crate::autodiff::{eval_pred_entropy, Tensor};
use crate::error::{Error, Result};
use crate::scalar::Scalar;

use super::model::DeqModel;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SolverMethod {
    Naive,
    Anderson,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SolverConfig {
    /// Number of solver iterations N.
    pub iterations: usize,
    pub method: SolverMethod,
    /// Damping λ_s of the naive iteration, in (0, 1].
    pub damping: f64,
    /// Anderson history size m.
    pub anderson_depth: usize,
    /// Anderson mixing coefficient β, in (0, 1].
    pub anderson_mix: f64,
    /// Early-stop threshold on the relative residual; 0 disables early stop.
    pub tol: f64,
}

impl Default for SolverConfig {
    fn default() -> Self {
        Self {
            iterations: 8,
            method: SolverMethod::Anderson,
            damping: 1.0,
            anderson_depth: 5,
            anderson_mix: 1.0,
            tol: 0.0,
        }
    }
}

impl SolverConfig {
    pub fn naive(iterations: usize) -> Self {
        Self {
            iterations,
            method: SolverMethod::Naive,
            ..Self::default()
        }
    }

    pub fn anderson(iterations: usize, depth: usize) -> Self {
        Self {
            iterations,
            method: SolverMethod::Anderson,
            anderson_depth: depth,
            ..Self::default()
        }
    }

    pub fn with_tol(mut self, tol: f64) -> Self {
        self.tol = tol;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.iterations < 1 {
            return Err(Error::Contract("solver needs at least one iteration".into()));
        }
        if !(self.damping > 0.0 && self.damping <= 1.0) {
            return Err(Error::Contract(format!("damping {} outside (0, 1]", self.damping)));
        }
        if self.method == SolverMethod::Anderson {
            if self.anderson_depth < 1 {
                return Err(Error::Contract("anderson_depth must be >= 1".into()));
            }
            if !(self.anderson_mix > 0.0 && self.anderson_mix <= 1.0) {
                return Err(Error::Contract(format!(
                    "anderson_mix {} outside (0, 1]",
                    self.anderson_mix
                )));
            }
        }
        if !(self.tol >= 0.0) {
            return Err(Error::Contract("tol must be non-negative".into()));
        }
        Ok(())
    }
}

/// Relative residual `‖f(z) − z‖ / ‖f(z)‖`, or the absolute residual when
/// `‖f(z)‖ < 1e-12` (flagged by `absolute`).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Residual<T> {
    pub value: T,
    pub absolute: bool,
}

pub fn rel_error<T: Scalar>(model: &DeqModel<T>, z: &Tensor<T>, x: &Tensor<T>) -> Result<Residual<T>> {
    let fz = model.layer_apply(z, x)?;
    Ok(residual_from(&fz, z))
}

fn residual_from<T: Scalar>(fz: &Tensor<T>, z: &Tensor<T>) -> Residual<T> {
    let num = fz.dist2(z);
    let den = fz.norm2();
    if den < T::lit(1e-12) {
        Residual {
            value: num,
            absolute: true,
        }
    } else {
        Residual {
            value: num / den,
            absolute: false,
        }
    }
}

/// States and per-state diagnostics of one forward solve.
#[derive(Debug, Clone, PartialEq)]
pub struct DynamicsTrace<T> {
    pub states: Vec<Tensor<T>>,
    pub residuals: Vec<Residual<T>>,
    pub logits: Vec<Tensor<T>>,
    pub entropies: Vec<T>,
    /// Input active when each state was produced; `inputs_used[0]` is the
    /// received input.
    pub inputs_used: Vec<Tensor<T>>,
}

impl<T: Scalar> DynamicsTrace<T> {
    pub fn from_states(
        model: &DeqModel<T>,
        states: Vec<Tensor<T>>,
        inputs_used: Vec<Tensor<T>>,
    ) -> Result<Self> {
        let mut residuals = Vec::with_capacity(states.len());
        let mut logits = Vec::with_capacity(states.len());
        let mut entropies = Vec::with_capacity(states.len());
        for (z, x) in states.iter().zip(&inputs_used) {
            residuals.push(rel_error(model, z, x)?);
            let l = model.head_apply(z)?;
            entropies.push(eval_pred_entropy(&l)?);
            logits.push(l);
        }
        Ok(Self {
            states,
            residuals,
            logits,
            entropies,
            inputs_used,
        })
    }

    /// Number of solver iterations N.
    pub fn iterations(&self) -> usize {
        self.states.len() - 1
    }

    pub fn final_state(&self) -> &Tensor<T> {
        self.states.last().expect("trace is never empty")
    }

    pub fn prediction(&self, state: usize) -> usize {
        self.logits[state].argmax()
    }
}

/// Anderson acceleration (difference form) over a bounded history.
#[derive(Debug, Clone)]
pub struct Anderson<T> {
    depth: usize,
    mix: T,
    zs: VecDeque<Tensor<T>>,
    gs: VecDeque<Tensor<T>>,
}

impl<T: Scalar> Anderson<T> {
    pub fn new(depth: usize, mix: T) -> Self {
        Self {
            depth,
            mix,
            zs: VecDeque::with_capacity(depth + 1),
            gs: VecDeque::with_capacity(depth + 1),
        }
    }

    pub fn reset(&mut self) {
        self.zs.clear();
        self.gs.clear();
    }

    /// Next iterate from the current state `z` and its image `fz = f(z)`.
    pub fn next(&mut self, z: &Tensor<T>, fz: &Tensor<T>) -> Result<Tensor<T>> {
        let g = fz.sub(z)?;
        self.zs.push_back(z.clone());
        self.gs.push_back(g.clone());
        if self.zs.len() > self.depth + 1 {
            self.zs.pop_front();
            self.gs.pop_front();
        }
        let beta = self.mix;
        let plain = z.zip_map(&g, |zi, gi| zi + beta * gi)?;
        let m = self.zs.len() - 1;
        if m == 0 {
            return Ok(plain);
        }
        let dz: Vec<Tensor<T>> = (0..m)
            .map(|j| self.zs[j + 1].sub(&self.zs[j]))
            .collect::<Result<_>>()?;
        let dg: Vec<Tensor<T>> = (0..m)
            .map(|j| self.gs[j + 1].sub(&self.gs[j]))
            .collect::<Result<_>>()?;
        let Some(coef) = least_squares(&dg, &g) else {
            return Ok(plain);
        };
        let mut out = plain;
        for (j, &cj) in coef.iter().enumerate() {
            for ((o, &a), &b) in out.data_mut().iter_mut().zip(dz[j].data()).zip(dg[j].data()) {
                *o -= cj * (a + beta * b);
            }
        }
        Ok(out)
    }
}

/// `argmin_c ‖rhs − Σ c_j cols_j‖` by modified Gram-Schmidt QR. `None` when
/// the columns are numerically rank deficient.
fn least_squares<T: Scalar>(cols: &[Tensor<T>], rhs: &Tensor<T>) -> Option<Vec<T>> {
    let m = cols.len();
    let mut q: Vec<Vec<T>> = cols.iter().map(|c| c.data().to_vec()).collect();
    let mut r = vec![vec![T::zero(); m]; m];
    for j in 0..m {
        let orig = q[j].iter().map(|&v| v * v).sum::<T>().sqrt();
        for k in 0..j {
            let proj: T = q[k].iter().zip(&q[j]).map(|(&a, &b)| a * b).sum();
            r[k][j] = proj;
            let qk = q[k].clone();
            for (a, b) in q[j].iter_mut().zip(qk) {
                *a -= proj * b;
            }
        }
        let norm = q[j].iter().map(|&v| v * v).sum::<T>().sqrt();
        if !(norm > T::lit(1e-10) * orig) || norm == T::zero() {
            return None;
        }
        r[j][j] = norm;
        for a in q[j].iter_mut() {
            *a /= norm;
        }
    }
    let qtb: Vec<T> = q
        .iter()
        .map(|qj| qj.iter().zip(rhs.data()).map(|(&a, &b)| a * b).sum())
        .collect();
    let mut c = vec![T::zero(); m];
    for j in (0..m).rev() {
        let mut s = qtb[j];
        for k in j + 1..m {
            s -= r[j][k] * c[k];
        }
        c[j] = s / r[j][j];
    }
    c.iter().all(|v| v.is_finite()).then_some(c)
}

/// Single-step driver shared by all solvers; cloning it snapshots the
/// solver memory.
#[derive(Debug, Clone)]
pub enum Stepper<T> {
    Naive { damping: T },
    Anderson(Anderson<T>),
}

impl<T: Scalar> Stepper<T> {
    pub fn new(cfg: &SolverConfig) -> Self {
        match cfg.method {
            SolverMethod::Naive => Stepper::Naive {
                damping: T::lit(cfg.damping),
            },
            SolverMethod::Anderson => Stepper::Anderson(Anderson::new(
                cfg.anderson_depth,
                T::lit(cfg.anderson_mix),
            )),
        }
    }

    pub fn step(&mut self, model: &DeqModel<T>, z: &Tensor<T>, x: &Tensor<T>) -> Result<Tensor<T>> {
        let fz = model.layer_apply(z, x)?;
        match self {
            Stepper::Naive { damping } => {
                if *damping == T::one() {
                    Ok(fz)
                } else {
                    let lam = *damping;
                    z.zip_map(&fz, |a, b| (T::one() - lam) * a + lam * b)
                }
            }
            Stepper::Anderson(acc) => acc.next(z, &fz),
        }
    }

    /// Forgets solver memory; used when the input changes mid-solve.
    pub fn reset(&mut self) {
        if let Stepper::Anderson(acc) = self {
            acc.reset();
        }
    }
}

/// Hook called after each solver step with `(t + 1, z^[t+1], x^[t])`.
/// Returning a new input makes the driver recompute `z^[t+1]` with it from
/// the solver memory as it was before the step.
pub(crate) type Intervention<'a, T> =
    dyn FnMut(usize, &Tensor<T>, &Tensor<T>) -> Result<Option<Tensor<T>>> + 'a;

/// States `z^[0..=N]` and the input used for each step.
pub(crate) type Dynamics<T> = (Vec<Tensor<T>>, Vec<Tensor<T>>);

pub(crate) fn run_dynamics<T: Scalar>(
    model: &DeqModel<T>,
    x: &Tensor<T>,
    cfg: &SolverConfig,
    intervene: &mut Intervention<'_, T>,
) -> Result<Dynamics<T>> {
    cfg.validate()?;
    if x.shape() != [model.input_dim()] {
        return Err(crate::error::dim_err(
            "solve",
            "x",
            x.shape(),
            format!("[{}]", model.input_dim()),
        ));
    }
    let n = cfg.iterations;
    let tol = T::lit(cfg.tol);
    let mut stepper = Stepper::new(cfg);
    let mut states = Vec::with_capacity(n + 1);
    let mut inputs = Vec::with_capacity(n + 1);
    states.push(Tensor::zeros(&[model.hidden_dim()]));
    inputs.push(x.clone());
    let diverged = |t: usize| move |e: Error| match e {
        Error::NonFinite(_) => Error::Divergence { iteration: t },
        other => other,
    };

    for t in 0..n {
        let z = states[t].clone();
        let x_cur = inputs[t].clone();
        let snapshot = stepper.clone();
        let mut z_next = stepper.step(model, &z, &x_cur).map_err(diverged(t + 1))?;
        let mut x_next = x_cur;
        if let Some(updated) = intervene(t + 1, &z_next, &x_next)? {
            stepper = snapshot;
            stepper.reset();
            z_next = stepper.step(model, &z, &updated).map_err(diverged(t + 1))?;
            x_next = updated;
        }
        if !z_next.all_finite() {
            return Err(Error::Divergence { iteration: t + 1 });
        }
        let converged = cfg.tol > 0.0 && {
            let r = rel_error(model, &z_next, &x_next).map_err(diverged(t + 1))?;
            r.value <= tol
        };
        states.push(z_next);
        inputs.push(x_next);
        if converged {
            while states.len() < n + 1 {
                states.push(states[states.len() - 1].clone());
                inputs.push(inputs[inputs.len() - 1].clone());
            }
            break;
        }
    }
    Ok((states, inputs))
}

/// States `z⁰..zᴺ` only, without per-state diagnostics.
pub fn solve_states<T: Scalar>(
    model: &DeqModel<T>,
    x: &Tensor<T>,
    cfg: &SolverConfig,
) -> Result<Vec<Tensor<T>>> {
    Ok(run_dynamics(model, x, cfg, &mut |_, _, _| Ok(None))?.0)
}

/// Full trace with whichever method `cfg` selects.
pub fn solve<T: Scalar>(
    model: &DeqModel<T>,
    x: &Tensor<T>,
    cfg: &SolverConfig,
) -> Result<DynamicsTrace<T>> {
    let (states, inputs) = run_dynamics(model, x, cfg, &mut |_, _, _| Ok(None))?;
    DynamicsTrace::from_states(model, states, inputs)
}

/// Damped naive iteration `z ← (1 − λ_s)·z + λ_s·f(z; x)`.
pub fn solve_naive<T: Scalar>(
    model: &DeqModel<T>,
    x: &Tensor<T>,
    cfg: &SolverConfig,
) -> Result<DynamicsTrace<T>> {
    if cfg.method != SolverMethod::Naive {
        return Err(Error::Contract("solve_naive needs method = naive".into()));
    }
    solve(model, x, cfg)
}

pub fn solve_anderson<T: Scalar>(
    model: &DeqModel<T>,
    x: &Tensor<T>,
    cfg: &SolverConfig,
) -> Result<DynamicsTrace<T>> {
    if cfg.method != SolverMethod::Anderson {
        return Err(Error::Contract("solve_anderson needs method = anderson".into()));
    }
    solve(model, x, cfg)
}
