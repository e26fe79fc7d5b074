//! Adversarial training: PGD-AT, TRADES and the random-intermediate-state
//! loss, optimized with Adam under cosine learning-rate decay.
//!
//! Training gradients use the phantom path: the forward solve is treated as
//! a constant and `K_p` differentiable layer applications are appended
//! before the loss. With the random-intermediate loss the anchor is a state
//! `z^[i]` with `i` drawn uniformly from `1..=N` once per batch, instead of
//! the final state.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::attacks::{
    evaluate, pgd_generate, AttackContext, AttackKind, AttackSpec, Batch, DomainBox, StatePredictor,
};
use crate::autodiff::{reverse_grad, ExprGraph, Tensor};
use crate::deq::{solve_states, DeqModel, ModelGrads, ParamName, SolverConfig};
use crate::error::{Error, Result};
use crate::scalar::Scalar;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Framework {
    PgdAt,
    Trades,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub framework: Framework,
    pub random_intermediate: bool,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr0: f64,
    pub betas: [f64; 2],
    pub eps_adam: f64,
    pub eps: f64,
    pub alpha: f64,
    pub attack_steps: usize,
    pub random_start: bool,
    /// The `1/λ` multiplier of the TRADES regularizer.
    pub trades_weight: f64,
    pub k_p: usize,
    /// Rescale `W` to the model's contraction bound after every update.
    pub spectral_rescale: bool,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            framework: Framework::PgdAt,
            random_intermediate: false,
            epochs: 210,
            batch_size: 96,
            lr0: 1e-3,
            betas: [0.98, 0.999],
            eps_adam: 1e-8,
            eps: 8.0 / 255.0,
            alpha: 2.0 / 255.0,
            attack_steps: 10,
            random_start: true,
            trades_weight: 6.0,
            k_p: 5,
            spectral_rescale: true,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if !(self.lr0 > 0.0) {
            return bad(format!("lr0 = {} must be > 0", self.lr0));
        }
        if self.framework == Framework::Trades && !(self.trades_weight >= 0.0) {
            return bad(format!("trades_weight = {} must be >= 0", self.trades_weight));
        }
        if self.batch_size == 0 {
            return bad("batch_size must be >= 1".into());
        }
        if self.k_p == 0 {
            return bad("k_p must be >= 1".into());
        }
        if self.betas.iter().any(|b| !(0.0..1.0).contains(b)) {
            return bad(format!("betas {:?} must lie in [0, 1)", self.betas));
        }
        if !(self.eps_adam > 0.0) {
            return bad("eps_adam must be > 0".into());
        }
        Ok(())
    }

    /// Inner maximization used during training.
    pub fn inner_attack(&self, seed: u64) -> AttackSpec {
        let base = AttackSpec {
            steps: self.attack_steps,
            step_size: self.alpha,
            random_start: self.random_start,
            ..AttackSpec::readymade(self.eps, seed)
        };
        match self.framework {
            Framework::PgdAt => base,
            Framework::Trades => base.trades(),
        }
    }
}

/// Learning rate `0.5·lr0·(1 + cos(π·step/total))`; steps past the end give 0.
pub fn cosine_lr(step: usize, total_steps: usize, lr0: f64) -> f64 {
    if total_steps == 0 || step >= total_steps {
        return 0.0;
    }
    0.5 * lr0 * (1.0 + (std::f64::consts::PI * step as f64 / total_steps as f64).cos())
}

/// Adam moments for each model parameter.
#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerState<T> {
    pub m: Vec<Tensor<T>>,
    pub v: Vec<Tensor<T>>,
    pub step: u64,
}

impl<T: Scalar> OptimizerState<T> {
    pub fn new(model: &DeqModel<T>) -> Self {
        let zeros: Vec<_> = ParamName::ALL
            .iter()
            .map(|&n| Tensor::zeros(model.param(n).shape()))
            .collect();
        Self {
            m: zeros.clone(),
            v: zeros,
            step: 0,
        }
    }
}

/// One bias-corrected Adam step on a single tensor with step counter `t ≥ 1`.
#[allow(clippy::too_many_arguments)]
pub fn adam_tensor<T: Scalar>(
    param: &mut Tensor<T>,
    grad: &Tensor<T>,
    m: &mut Tensor<T>,
    v: &mut Tensor<T>,
    t: u64,
    lr: f64,
    betas: [f64; 2],
    eps_adam: f64,
) -> Result<()> {
    if param.shape() != grad.shape() || m.shape() != grad.shape() || v.shape() != grad.shape() {
        return Err(Error::Dimension {
            op: "adam",
            operand: "grad",
            got: grad.shape().to_vec(),
            expected: format!("{:?}", param.shape()),
        });
    }
    let (b1, b2) = (T::lit(betas[0]), T::lit(betas[1]));
    let c1 = T::one() - b1.powi(t as i32);
    let c2 = T::one() - b2.powi(t as i32);
    let (lr, eps) = (T::lit(lr), T::lit(eps_adam));
    let p = param.data_mut();
    let (md, vd) = (m.data_mut(), v.data_mut());
    for k in 0..p.len() {
        let g = grad.data()[k];
        md[k] = b1 * md[k] + (T::one() - b1) * g;
        vd[k] = b2 * vd[k] + (T::one() - b2) * g * g;
        let mhat = md[k] / c1;
        let vhat = vd[k] / c2;
        p[k] -= lr * mhat / (vhat.sqrt() + eps);
    }
    Ok(())
}

/// Adam update of every model parameter. A non-finite gradient aborts
/// before anything is modified.
pub fn adam_update<T: Scalar>(
    model: &mut DeqModel<T>,
    grads: &ModelGrads<T>,
    opt: &mut OptimizerState<T>,
    lr: f64,
    betas: [f64; 2],
    eps_adam: f64,
) -> Result<()> {
    for name in ParamName::ALL {
        if !grads.get(name).all_finite() {
            return Err(Error::NonFiniteGradient(name.as_str().to_string()));
        }
    }
    opt.step += 1;
    for (k, name) in ParamName::ALL.into_iter().enumerate() {
        adam_tensor(
            model.param_mut(name),
            grads.get(name),
            &mut opt.m[k],
            &mut opt.v[k],
            opt.step,
            lr,
            betas,
            eps_adam,
        )?;
    }
    Ok(())
}

/// Uniform draw of the loss state `i ∈ 1..=N`.
pub fn sample_state<R: Rng + ?Sized>(rng: &mut R, iterations: usize) -> usize {
    rng.random_range(1..=iterations)
}

/// Loss and parameter gradients for one example.
///
/// For PGD-AT the loss is CE at the unrolled endpoint of the adversarial
/// dynamics. For TRADES it is CE of the clean endpoint plus
/// `weight · KL(p_adv ‖ p_clean)`, differentiated through both branches.
/// `anchors` are `(clean, adversarial)` states the tails start from.
#[allow(clippy::too_many_arguments)]
pub fn example_loss_grad<T: Scalar>(
    model: &DeqModel<T>,
    framework: Framework,
    x_clean: &Tensor<T>,
    x_adv: &Tensor<T>,
    anchors: (&Tensor<T>, &Tensor<T>),
    label: usize,
    k_p: usize,
    trades_weight: f64,
) -> Result<(T, ModelGrads<T>)> {
    let mut g = ExprGraph::new();
    let nodes = model.to_graph(&mut g, true)?;
    let loss = match framework {
        Framework::PgdAt => {
            let x = g.constant(x_adv.clone())?;
            let z0 = g.constant(anchors.1.clone())?;
            let z = nodes.unroll(&mut g, z0, x, k_p, T::one())?;
            let logits = nodes.head(&mut g, z)?;
            g.cross_entropy(logits, label)?
        }
        Framework::Trades => {
            let xc = g.constant(x_clean.clone())?;
            let zc0 = g.constant(anchors.0.clone())?;
            let zc = nodes.unroll(&mut g, zc0, xc, k_p, T::one())?;
            let lc = nodes.head(&mut g, zc)?;
            let ce = g.cross_entropy(lc, label)?;
            let xa = g.constant(x_adv.clone())?;
            let za0 = g.constant(anchors.1.clone())?;
            let za = nodes.unroll(&mut g, za0, xa, k_p, T::one())?;
            let la = nodes.head(&mut g, za)?;
            let kl = g.kl(la, lc)?;
            let reg = g.scale(kl, T::lit(trades_weight))?;
            g.add(ce, reg)?
        }
    };
    let r = reverse_grad(&g, loss)?;
    Ok((r.value.item(), ModelGrads::from_result(&r, &nodes)))
}

/// Mean loss and gradients over a batch whose adversarial inputs are
/// already computed; the loss is anchored at state `loss_at`.
pub fn batch_loss_grad<T: Scalar>(
    model: &DeqModel<T>,
    cfg: &TrainConfig,
    solver: &SolverConfig,
    batch: &Batch<T>,
    adversarial: &[Tensor<T>],
    loss_at: usize,
) -> Result<(T, ModelGrads<T>)> {
    if batch.is_empty() {
        return Err(Error::Contract("empty training batch".into()));
    }
    let per_example = (0..batch.len())
        .into_par_iter()
        .map(|k| {
            let x = &batch.inputs[k];
            let xa = &adversarial[k];
            let za = solve_states(model, xa, solver)?;
            let zc = match cfg.framework {
                Framework::Trades => solve_states(model, x, solver)?,
                Framework::PgdAt => Vec::new(),
            };
            let anchor_clean = zc.get(loss_at).unwrap_or(&za[loss_at]);
            example_loss_grad(
                model,
                cfg.framework,
                x,
                xa,
                (anchor_clean, &za[loss_at]),
                batch.labels[k],
                cfg.k_p,
                cfg.trades_weight,
            )
        })
        .collect::<Result<Vec<_>>>()?;
    // Sequential reduction keeps the result independent of thread count.
    let inv = T::one() / T::from_usize_lossy(batch.len());
    let mut it = per_example.into_iter();
    let (mut loss, mut acc) = it.next().expect("non-empty batch");
    for (l, gr) in it {
        loss += l;
        for name in ParamName::ALL {
            let sum = acc.get(name).add(gr.get(name))?;
            *grads_mut(&mut acc, name) = sum;
        }
    }
    for name in ParamName::ALL {
        let scaled = acc.get(name).scale(inv);
        *grads_mut(&mut acc, name) = scaled;
    }
    Ok((loss * inv, acc))
}

fn grads_mut<T>(g: &mut ModelGrads<T>, name: ParamName) -> &mut Tensor<T> {
    match name {
        ParamName::W => &mut g.w,
        ParamName::U => &mut g.u,
        ParamName::B => &mut g.b,
        ParamName::V => &mut g.v,
        ParamName::C => &mut g.c,
    }
}

/// Everything a training step needs besides the model and optimizer.
#[derive(Debug, Clone)]
pub struct StepContext<'a, T> {
    pub cfg: &'a TrainConfig,
    pub solver: &'a SolverConfig,
    pub domain: &'a DomainBox<T>,
    pub lr: f64,
    /// Seed of the inner attack's random start.
    pub attack_seed: u64,
    /// State the outer loss is anchored at (`N` unless random-intermediate).
    pub loss_at: usize,
}

fn attack_ctx<T: Scalar>(s: &StepContext<'_, T>) -> AttackContext<T> {
    AttackContext {
        solver: s.solver.clone(),
        domain: s.domain.clone(),
        k_p: s.cfg.k_p,
    }
}

fn train_step<T: Scalar>(
    model: &DeqModel<T>,
    batch: &Batch<T>,
    opt: &mut OptimizerState<T>,
    s: &StepContext<'_, T>,
) -> Result<(DeqModel<T>, T)> {
    let spec = s.cfg.inner_attack(s.attack_seed);
    let adversarial = if spec.eps > 0.0 && spec.steps > 0 {
        let (adv, failed) = pgd_generate(model, batch, &spec, &attack_ctx(s))?;
        if failed.iter().any(|&f| f) {
            return Err(Error::NonFinite("inner attack forward solve".into()));
        }
        adv
    } else {
        batch.inputs.clone()
    };
    let (loss, grads) = batch_loss_grad(model, s.cfg, s.solver, batch, &adversarial, s.loss_at)?;
    if !loss.is_finite() {
        return Err(Error::NonFinite("training loss".into()));
    }
    let mut next = model.clone();
    adam_update(&mut next, &grads, opt, s.lr, s.cfg.betas, s.cfg.eps_adam)?;
    if s.cfg.spectral_rescale {
        next = next.spectral_rescale();
    }
    Ok((next, loss))
}

/// Inner PGD on cross-entropy, CE at the anchored state, one Adam update.
pub fn pgd_at_step<T: Scalar>(
    model: &DeqModel<T>,
    batch: &Batch<T>,
    opt: &mut OptimizerState<T>,
    s: &StepContext<'_, T>,
) -> Result<(DeqModel<T>, T)> {
    if s.cfg.framework != Framework::PgdAt {
        return Err(Error::Contract("pgd_at_step needs framework = pgd_at".into()));
    }
    train_step(model, batch, opt, s)
}

/// Inner KL maximization, clean CE plus weighted KL, one Adam update.
pub fn trades_step<T: Scalar>(
    model: &DeqModel<T>,
    batch: &Batch<T>,
    opt: &mut OptimizerState<T>,
    s: &StepContext<'_, T>,
) -> Result<(DeqModel<T>, T)> {
    if s.cfg.framework != Framework::Trades {
        return Err(Error::Contract("trades_step needs framework = trades".into()));
    }
    train_step(model, batch, opt, s)
}

/// Framework loss anchored at a uniformly drawn state `i`, returned with
/// that `i`.
pub fn random_intermediate_loss<T: Scalar, R: Rng + ?Sized>(
    model: &DeqModel<T>,
    batch: &Batch<T>,
    adversarial: &[Tensor<T>],
    cfg: &TrainConfig,
    solver: &SolverConfig,
    rng: &mut R,
) -> Result<(usize, T, ModelGrads<T>)> {
    if !cfg.random_intermediate {
        return Err(Error::Contract("random_intermediate is disabled".into()));
    }
    let i = sample_state(rng, solver.iterations);
    let (loss, grads) = batch_loss_grad(model, cfg, solver, batch, adversarial, i)?;
    Ok((i, loss, grads))
}

/// One row of the training history.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub lr: f64,
    pub train_loss: f64,
    pub clean_acc: f64,
    pub robust_acc: f64,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome<T> {
    /// Checkpoint with the best validation robust accuracy.
    pub model: DeqModel<T>,
    pub best_epoch: Option<usize>,
    pub best_robust_acc: f64,
    pub history: Vec<EpochRecord>,
}

/// Clean and ready-made PGD-10 accuracy at the final state.
pub fn validate_model<T: Scalar>(
    model: &DeqModel<T>,
    val: &Batch<T>,
    cfg: &TrainConfig,
    solver: &SolverConfig,
    domain: &DomainBox<T>,
) -> Result<(f64, f64)> {
    let pred = StatePredictor {
        solver: solver.clone(),
        state: solver.iterations,
    };
    let clean = evaluate(model, &val.inputs, &val.labels, &pred)?.accuracy();
    let mut spec = cfg.inner_attack(cfg.seed ^ 0x7661_6c69_6461_7465);
    spec.kind = AttackKind::ReadymadePgd;
    let robust = if spec.eps > 0.0 {
        let ctx = AttackContext {
            solver: solver.clone(),
            domain: domain.clone(),
            k_p: cfg.k_p,
        };
        crate::attacks::pgd_attack(model, val, &spec, &ctx, &pred)?.accuracy()
    } else {
        clean
    };
    Ok((clean, robust))
}

/// Full training with per-epoch validation. `on_epoch` sees every history
/// row as soon as it exists, so a caller can persist it before a later
/// failure aborts the loop.
#[allow(clippy::too_many_arguments)]
pub fn train_loop<T: Scalar>(
    init: DeqModel<T>,
    train: &Batch<T>,
    val: &Batch<T>,
    cfg: &TrainConfig,
    solver: &SolverConfig,
    domain: &DomainBox<T>,
    on_epoch: &mut dyn FnMut(&EpochRecord) -> Result<()>,
) -> Result<TrainOutcome<T>> {
    cfg.validate()?;
    solver.validate()?;
    if train.is_empty() && cfg.epochs > 0 {
        return Err(Error::Contract("empty training split".into()));
    }
    let mut model = if cfg.spectral_rescale {
        init.spectral_rescale()
    } else {
        init
    };
    let mut best = model.clone();
    let mut best_epoch = None;
    let mut best_robust = f64::NEG_INFINITY;
    let mut history = Vec::with_capacity(cfg.epochs);
    let mut opt = OptimizerState::new(&model);
    let mut shuffle_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut state_rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x0072_616e_645f_7374);
    let batches_per_epoch = train.len().div_ceil(cfg.batch_size);
    let total = cfg.epochs * batches_per_epoch;
    let mut step = 0usize;
    let mut recent = Vec::new();

    for epoch in 0..cfg.epochs {
        let mut order: Vec<usize> = (0..train.len()).collect();
        order.shuffle(&mut shuffle_rng);
        let mut loss_sum = 0.0;
        let mut lr = cfg.lr0;
        for (bi, chunk) in order.chunks(cfg.batch_size).enumerate() {
            let batch = train.subset(chunk);
            lr = cosine_lr(step, total, cfg.lr0);
            let loss_at = if cfg.random_intermediate {
                sample_state(&mut state_rng, solver.iterations)
            } else {
                solver.iterations
            };
            let s = StepContext {
                cfg,
                solver,
                domain,
                lr,
                attack_seed: cfg.seed.wrapping_add((step as u64) << 24),
                loss_at,
            };
            let out = train_step(&model, &batch, &mut opt, &s);
            let (next, loss) = match out {
                Ok(v) => v,
                Err(Error::NonFinite(_)) | Err(Error::NonFiniteGradient(_)) | Err(Error::Divergence { .. }) => {
                    recent.push(f64::NAN);
                    return Err(Error::TrainingAborted {
                        epoch,
                        batch: bi,
                        losses: recent,
                    });
                }
                Err(e) => return Err(e),
            };
            let l = loss.to_f64_lossy();
            recent.push(l);
            if recent.len() > 8 {
                recent.remove(0);
            }
            loss_sum += l;
            model = next;
            step += 1;
        }
        let (clean_acc, robust_acc) = validate_model(&model, val, cfg, solver, domain)?;
        let rec = EpochRecord {
            epoch,
            lr,
            train_loss: loss_sum / batches_per_epoch as f64,
            clean_acc,
            robust_acc,
        };
        on_epoch(&rec)?;
        history.push(rec);
        if robust_acc > best_robust {
            best_robust = robust_acc;
            best_epoch = Some(epoch);
            best = model.clone();
        }
    }
    Ok(TrainOutcome {
        model: best,
        best_epoch,
        best_robust_acc: if best_epoch.is_some() { best_robust } else { f64::NAN },
        history,
    })
}
