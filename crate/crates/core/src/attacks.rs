//! White-box ℓ∞ attacks on the neural dynamics.
//!
//! Gradients are never taken through the solver. An attack picks an
//! intermediate state `z^[i]` of the forward solve, treats it as a constant,
//! and unrolls `K_a` damped layer applications
//! `z ← (1 − λ)·z + λ·f(z; x)` whose endpoint feeds the loss. The ready-made
//! attack is the special case anchored `K_p` steps before the final state.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::autodiff::{eval_kl, reverse_grad, ExprGraph, Tensor};
use crate::deq::{solve_states, DeqModel, SolverConfig};
use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Labelled inputs. `ids` identify examples independently of their
/// position, so per-example attack seeds survive reordering.
#[derive(Debug, Clone, PartialEq)]
pub struct Batch<T> {
    pub inputs: Vec<Tensor<T>>,
    pub labels: Vec<usize>,
    pub ids: Vec<usize>,
}

impl<T: Scalar> Batch<T> {
    pub fn new(inputs: Vec<Tensor<T>>, labels: Vec<usize>) -> Result<Self> {
        if inputs.len() != labels.len() {
            return Err(Error::Contract(format!(
                "batch has {} inputs but {} labels",
                inputs.len(),
                labels.len()
            )));
        }
        let ids = (0..inputs.len()).collect();
        Ok(Self { inputs, labels, ids })
    }

    pub fn with_ids(mut self, ids: Vec<usize>) -> Result<Self> {
        if ids.len() != self.inputs.len() {
            return Err(Error::Contract(format!(
                "batch has {} inputs but {} ids",
                self.inputs.len(),
                ids.len()
            )));
        }
        self.ids = ids;
        Ok(self)
    }

    pub fn len(&self) -> usize {
        self.inputs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.inputs.is_empty()
    }

    pub fn subset(&self, idx: &[usize]) -> Self {
        Self {
            inputs: idx.iter().map(|&i| self.inputs[i].clone()).collect(),
            labels: idx.iter().map(|&i| self.labels[i]).collect(),
            ids: idx.iter().map(|&i| self.ids[i]).collect(),
        }
    }
}

/// Axis-aligned data domain.
#[derive(Debug, Clone, PartialEq)]
pub struct DomainBox<T> {
    pub lo: Vec<T>,
    pub hi: Vec<T>,
}

impl<T: Scalar> DomainBox<T> {
    pub fn uniform(dim: usize, lo: T, hi: T) -> Self {
        Self {
            lo: vec![lo; dim],
            hi: vec![hi; dim],
        }
    }

    pub fn unbounded(dim: usize) -> Self {
        Self::uniform(dim, T::neg_infinity(), T::infinity())
    }

    pub fn clip(&self, x: &Tensor<T>) -> Tensor<T> {
        x.clamp_to(&self.lo, &self.hi)
    }

    pub fn contains(&self, x: &Tensor<T>) -> bool {
        x.data()
            .iter()
            .zip(self.lo.iter().zip(&self.hi))
            .all(|(&v, (&l, &h))| v >= l && v <= h)
    }

    /// Projection onto the intersection of the ε-ball around `center` and
    /// the box. Both sets are axis-aligned boxes, so one pass is exact.
    pub fn project(&self, x: &Tensor<T>, center: &Tensor<T>, eps: T) -> Tensor<T> {
        self.clip(&x.project_linf(center, eps))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AttackKind {
    ReadymadePgd,
    IntermediatePgd,
    TradesKlPgd,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttackSpec {
    pub kind: AttackKind,
    /// Anchor state index `i` (intermediate kind only).
    pub state: usize,
    /// Unroll steps `K_a` (intermediate kind only).
    pub unroll: usize,
    /// Unroll damping λ (intermediate kind only).
    pub damping: f64,
    pub steps: usize,
    /// Step size α.
    pub step_size: f64,
    /// ℓ∞ budget ε.
    pub eps: f64,
    pub random_start: bool,
    pub seed: u64,
}

impl AttackSpec {
    /// PGD-10 at the final state with step ε/4.
    pub fn readymade(eps: f64, seed: u64) -> Self {
        Self {
            kind: AttackKind::ReadymadePgd,
            state: 0,
            unroll: 0,
            damping: 1.0,
            steps: 10,
            step_size: eps / 4.0,
            eps,
            random_start: true,
            seed,
        }
    }

    pub fn intermediate(&self, state: usize, unroll: usize, damping: f64) -> Self {
        Self {
            kind: AttackKind::IntermediatePgd,
            state,
            unroll,
            damping,
            ..self.clone()
        }
    }

    pub fn trades(&self) -> Self {
        Self {
            kind: AttackKind::TradesKlPgd,
            ..self.clone()
        }
    }

    pub fn with_eps(&self, eps: f64, step_size: f64) -> Self {
        Self {
            eps,
            step_size,
            ..self.clone()
        }
    }

    /// Checks the spec against a solver with `iterations` states.
    pub fn validate(&self, iterations: usize) -> Result<()> {
        if !(self.eps >= 0.0) || !self.eps.is_finite() {
            return Err(Error::Contract(format!("attack budget {} must be >= 0", self.eps)));
        }
        if self.eps > 0.0 && self.steps > 0 && !(self.step_size > 0.0 && self.step_size <= self.eps) {
            return Err(Error::Contract(format!(
                "step size {} must lie in (0, eps = {}]",
                self.step_size, self.eps
            )));
        }
        if self.kind == AttackKind::IntermediatePgd {
            if self.state < 1 || self.state > iterations {
                return Err(Error::Contract(format!(
                    "intermediate state {} outside 1..={iterations}",
                    self.state
                )));
            }
            if !(1..=9).contains(&self.unroll) {
                return Err(Error::Contract(format!("unroll {} outside 1..=9", self.unroll)));
            }
            if !(self.damping > 0.0 && self.damping <= 1.0) {
                return Err(Error::Contract(format!("damping {} outside (0, 1]", self.damping)));
            }
        }
        Ok(())
    }

    /// `(i, K_a, λ)` actually used for the gradient given the solver length
    /// and the phantom unroll `k_p`.
    pub fn effective_unroll(&self, iterations: usize, k_p: usize) -> (usize, usize, f64) {
        match self.kind {
            AttackKind::IntermediatePgd => (self.state, self.unroll, self.damping),
            AttackKind::ReadymadePgd | AttackKind::TradesKlPgd => {
                (iterations.saturating_sub(k_p), k_p.min(iterations).max(1), 1.0)
            }
        }
    }
}

/// Solver, data domain and phantom unroll shared by all attacks.
#[derive(Debug, Clone)]
pub struct AttackContext<T> {
    pub solver: SolverConfig,
    pub domain: DomainBox<T>,
    /// Unrolled tail length of the ready-made attack.
    pub k_p: usize,
}

/// Anything that maps an input to class logits.
pub trait Predictor<T: Scalar>: Sync {
    fn logits(&self, model: &DeqModel<T>, x: &Tensor<T>) -> Result<Tensor<T>>;
}

/// Prediction from a fixed state of the plain forward solve.
#[derive(Debug, Clone)]
pub struct StatePredictor {
    pub solver: SolverConfig,
    pub state: usize,
}

impl<T: Scalar> Predictor<T> for StatePredictor {
    fn logits(&self, model: &DeqModel<T>, x: &Tensor<T>) -> Result<Tensor<T>> {
        let states = solve_states(model, x, &self.solver)?;
        let z = states.get(self.state).ok_or(Error::Index {
            context: "prediction state",
            index: self.state,
            len: states.len(),
        })?;
        model.head_apply(z)
    }
}

/// Per-example correctness; `None` marks a forward solve that failed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tally {
    pub correct: Vec<Option<bool>>,
}

impl Tally {
    pub fn evaluated(&self) -> usize {
        self.correct.iter().filter(|c| c.is_some()).count()
    }

    pub fn failed(&self) -> usize {
        self.correct.len() - self.evaluated()
    }

    pub fn num_correct(&self) -> usize {
        self.correct.iter().filter(|c| **c == Some(true)).count()
    }

    /// Fraction correct among evaluated examples (0 when none evaluated).
    pub fn accuracy(&self) -> f64 {
        match self.evaluated() {
            0 => 0.0,
            n => self.num_correct() as f64 / n as f64,
        }
    }
}

fn is_solver_failure(e: &Error) -> bool {
    matches!(e, Error::Divergence { .. } | Error::NonFinite(_))
}

/// Correctness of `predictor` on every input, in parallel.
pub fn evaluate<T: Scalar, P: Predictor<T> + ?Sized>(
    model: &DeqModel<T>,
    inputs: &[Tensor<T>],
    labels: &[usize],
    predictor: &P,
) -> Result<Tally> {
    let correct = inputs
        .par_iter()
        .zip(labels.par_iter())
        .map(|(x, &y)| match predictor.logits(model, x) {
            Ok(l) => Ok(Some(l.argmax() == y)),
            Err(e) if is_solver_failure(&e) => Ok(None),
            Err(e) => Err(e),
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(Tally { correct })
}

#[derive(Debug, Clone, PartialEq)]
pub struct AttackResult<T> {
    pub spec: AttackSpec,
    pub adversarial_inputs: Vec<Tensor<T>>,
    /// Whether the attack forward solve failed for each example.
    pub failed: Vec<bool>,
    pub tally: Tally,
}

impl<T: Scalar> AttackResult<T> {
    pub fn accuracy(&self) -> f64 {
        self.tally.accuracy()
    }

    /// The example is misclassified under attack.
    pub fn per_example_success(&self) -> Vec<bool> {
        self.tally.correct.iter().map(|c| *c == Some(false)).collect()
    }

    pub fn failed_count(&self) -> usize {
        self.failed.iter().filter(|&&f| f).count() + self.tally.failed()
    }
}

/// Final-state logits of the plain solve, used as the fixed clean
/// distribution of the KL attack.
pub fn clean_logits<T: Scalar>(model: &DeqModel<T>, x: &Tensor<T>, solver: &SolverConfig) -> Result<Tensor<T>> {
    let states = solve_states(model, x, solver)?;
    model.head_apply(&states[states.len() - 1])
}

/// `∇_x` of the attack loss at the unrolled endpoint.
///
/// `reference` holds the clean logits for the KL kind and is ignored
/// otherwise.
pub fn attack_gradient<T: Scalar>(
    model: &DeqModel<T>,
    x: &Tensor<T>,
    label: usize,
    spec: &AttackSpec,
    ctx: &AttackContext<T>,
    reference: Option<&Tensor<T>>,
) -> Result<Tensor<T>> {
    let n = ctx.solver.iterations;
    spec.validate(n)?;
    let (anchor, unroll, damping) = spec.effective_unroll(n, ctx.k_p);
    let states = solve_states(model, x, &ctx.solver)?;
    unrolled_loss_grad(model, &states[anchor], x, label, unroll, T::lit(damping), spec.kind, reference)
}

/// Gradient of the unrolled loss from a given anchor state.
#[allow(clippy::too_many_arguments)]
pub fn unrolled_loss_grad<T: Scalar>(
    model: &DeqModel<T>,
    anchor: &Tensor<T>,
    x: &Tensor<T>,
    label: usize,
    unroll: usize,
    damping: T,
    kind: AttackKind,
    reference: Option<&Tensor<T>>,
) -> Result<Tensor<T>> {
    let mut g = ExprGraph::new();
    let nodes = model.to_graph(&mut g, false)?;
    let xn = g.param(x.clone())?;
    let z0 = g.constant(anchor.clone())?;
    let z = nodes.unroll(&mut g, z0, xn, unroll, damping)?;
    let logits = nodes.head(&mut g, z)?;
    let loss = match kind {
        AttackKind::TradesKlPgd => {
            let r = reference.ok_or_else(|| {
                Error::Contract("KL attack needs the clean reference logits".into())
            })?;
            let q = g.constant(r.clone())?;
            g.kl(logits, q)?
        }
        _ => g.cross_entropy(logits, label)?,
    };
    let r = reverse_grad(&g, loss)?;
    Ok(r.grad(xn).clone())
}

fn example_seed(seed: u64, id: usize) -> u64 {
    seed ^ id as u64
}

/// Runs PGD on one example; `Ok(None)` when a forward solve fails.
fn pgd_single<T: Scalar>(
    model: &DeqModel<T>,
    x0: &Tensor<T>,
    label: usize,
    id: usize,
    spec: &AttackSpec,
    ctx: &AttackContext<T>,
) -> Result<Option<Tensor<T>>> {
    let eps = T::lit(spec.eps);
    let alpha = T::lit(spec.step_size);
    if spec.eps == 0.0 || spec.steps == 0 {
        return Ok(Some(x0.clone()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(example_seed(spec.seed, id));
    let mut x = x0.clone();
    if spec.random_start {
        let noise: Vec<T> = (0..x0.len())
            .map(|_| T::lit(rng.random_range(-spec.eps..=spec.eps)))
            .collect();
        let start = x0.zip_map(&Tensor::new(x0.shape().to_vec(), noise)?, |a, b| a + b)?;
        x = ctx.domain.project(&start, x0, eps);
    }
    let reference = match spec.kind {
        AttackKind::TradesKlPgd => match clean_logits(model, x0, &ctx.solver) {
            Ok(l) => Some(l),
            Err(e) if is_solver_failure(&e) => return Ok(None),
            Err(e) => return Err(e),
        },
        _ => None,
    };
    for _ in 0..spec.steps {
        let g = match attack_gradient(model, &x, label, spec, ctx, reference.as_ref()) {
            Ok(g) => g,
            Err(e) if is_solver_failure(&e) => return Ok(None),
            Err(e) => return Err(e),
        };
        let stepped = x.zip_map(&g, |xi, gi| xi + alpha * sign(gi))?;
        x = ctx.domain.project(&stepped, x0, eps);
    }
    Ok(Some(x))
}

fn sign<T: Scalar>(v: T) -> T {
    if v > T::zero() {
        T::one()
    } else if v < T::zero() {
        -T::one()
    } else {
        T::zero()
    }
}

/// Adversarial inputs for every example; a failed solve leaves the clean
/// input in place and sets the failure flag.
pub fn pgd_generate<T: Scalar>(
    model: &DeqModel<T>,
    batch: &Batch<T>,
    spec: &AttackSpec,
    ctx: &AttackContext<T>,
) -> Result<(Vec<Tensor<T>>, Vec<bool>)> {
    spec.validate(ctx.solver.iterations)?;
    let out = (0..batch.len())
        .into_par_iter()
        .map(|i| pgd_single(model, &batch.inputs[i], batch.labels[i], batch.ids[i], spec, ctx))
        .collect::<Result<Vec<_>>>()?;
    let failed = out.iter().map(Option::is_none).collect();
    let inputs = out
        .into_iter()
        .zip(&batch.inputs)
        .map(|(adv, clean)| adv.unwrap_or_else(|| clean.clone()))
        .collect();
    Ok((inputs, failed))
}

/// `x ← Proj(x + α·sign(∇_x L))` for `spec.steps` steps, evaluated with
/// `predictor`.
pub fn pgd_attack<T: Scalar, P: Predictor<T> + ?Sized>(
    model: &DeqModel<T>,
    batch: &Batch<T>,
    spec: &AttackSpec,
    ctx: &AttackContext<T>,
    predictor: &P,
) -> Result<AttackResult<T>> {
    let (adversarial_inputs, failed) = pgd_generate(model, batch, spec, ctx)?;
    let mut tally = evaluate(model, &adversarial_inputs, &batch.labels, predictor)?;
    for (c, &f) in tally.correct.iter_mut().zip(&failed) {
        if f {
            *c = None;
        }
    }
    Ok(AttackResult {
        spec: spec.clone(),
        adversarial_inputs,
        failed,
        tally,
    })
}

/// PGD ascent on `KL(p_adv ‖ p_clean)` at the final state with the clean
/// distribution held fixed.
pub fn trades_inner_max<T: Scalar>(
    model: &DeqModel<T>,
    batch: &Batch<T>,
    spec: &AttackSpec,
    ctx: &AttackContext<T>,
) -> Result<AttackResult<T>> {
    if spec.kind != AttackKind::TradesKlPgd {
        return Err(Error::Contract("trades_inner_max needs kind = trades_kl_pgd".into()));
    }
    let predictor = StatePredictor {
        solver: ctx.solver.clone(),
        state: ctx.solver.iterations,
    };
    pgd_attack(model, batch, spec, ctx, &predictor)
}

/// `KL(p_adv ‖ p_clean)` between final-state predictions.
pub fn trades_kl<T: Scalar>(
    model: &DeqModel<T>,
    x_clean: &Tensor<T>,
    x_adv: &Tensor<T>,
    solver: &SolverConfig,
) -> Result<T> {
    let p = clean_logits(model, x_adv, solver)?;
    let q = clean_logits(model, x_clean, solver)?;
    eval_kl(&p, &q)
}

/// All `N × 9 × 2` intermediate attacks sharing one base spec.
#[derive(Debug, Clone)]
pub struct AttackGrid<T> {
    pub results: Vec<AttackResult<T>>,
}

impl<T: Scalar> AttackGrid<T> {
    pub fn min_accuracy(&self) -> f64 {
        self.results
            .iter()
            .map(AttackResult::accuracy)
            .fold(f64::INFINITY, f64::min)
    }

    /// Strongest attack; ties keep the first in grid order.
    pub fn argmin(&self) -> &AttackResult<T> {
        let mut best = &self.results[0];
        for r in &self.results[1..] {
            if r.accuracy() < best.accuracy() {
                best = r;
            }
        }
        best
    }

    /// Same adversarial inputs judged by another predictor.
    pub fn reevaluate<P: Predictor<T> + ?Sized>(
        &self,
        model: &DeqModel<T>,
        labels: &[usize],
        predictor: &P,
    ) -> Result<AttackGrid<T>> {
        let results = self
            .results
            .iter()
            .map(|r| {
                let mut tally = evaluate(model, &r.adversarial_inputs, labels, predictor)?;
                for (c, &f) in tally.correct.iter_mut().zip(&r.failed) {
                    if f {
                        *c = None;
                    }
                }
                Ok(AttackResult {
                    spec: r.spec.clone(),
                    adversarial_inputs: r.adversarial_inputs.clone(),
                    failed: r.failed.clone(),
                    tally,
                })
            })
            .collect::<Result<_>>()?;
        Ok(AttackGrid { results })
    }
}

pub const GRID_MAX_UNROLL: usize = 9;
pub const GRID_DAMPINGS: [f64; 2] = [0.5, 1.0];

/// Every `(i, K_a, λ)` with `1 ≤ i ≤ N`, `1 ≤ K_a ≤ 9`, `λ ∈ {0.5, 1}`.
pub fn grid_specs(base: &AttackSpec, iterations: usize) -> Vec<AttackSpec> {
    let mut specs = Vec::with_capacity(iterations * GRID_MAX_UNROLL * 2);
    for i in 1..=iterations {
        for k in 1..=GRID_MAX_UNROLL {
            for lam in GRID_DAMPINGS {
                specs.push(base.intermediate(i, k, lam));
            }
        }
    }
    specs
}

pub fn run_attack_grid<T: Scalar, P: Predictor<T> + ?Sized>(
    model: &DeqModel<T>,
    batch: &Batch<T>,
    base: &AttackSpec,
    ctx: &AttackContext<T>,
    predictor: &P,
) -> Result<AttackGrid<T>> {
    let results = grid_specs(base, ctx.solver.iterations)
        .iter()
        .map(|spec| pgd_attack(model, batch, spec, ctx, predictor))
        .collect::<Result<_>>()?;
    Ok(AttackGrid { results })
}
