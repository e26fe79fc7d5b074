//! One property per listed invariant. Each runs a deterministic proptest
//! runner and reports the first failing case; the `invariants` and
//! `timing` targets wrap them as tests, `acceptance` runs them all.

use std::fmt::Debug;
use std::path::Path;
use std::time::Duration;

use deqr::attacks::{
    pgd_attack, pgd_generate, run_attack_grid, trades_inner_max, AttackKind, AttackSpec, Batch, DomainBox,
    StatePredictor,
};
use deqr::autodiff::{eval_pred_entropy, eval_softmax, finite_diff_grad, max_rel_error, reverse_grad};
use deqr::defense::{entropy_reduction_solve, DefendedPredictor, DefenseConfig};
use deqr::deq::{solve, spectral_norm, ParamName};
use deqr::harness::gradcheck::{FD_STEP, REL_FLOOR};
use deqr::harness::report::{history_row, HISTORY_HEADER};
use deqr::harness::{gen_dataset, run_config, DatasetKind, ExperimentConfig, Split};
use deqr::metrics::{
    build_eval_report, dynamics_deviation, metric_dh, metric_p, metric_p_geq, perturbation_decomposition, EntropyState,
    EvalConfig,
};
use deqr::training::{
    batch_loss_grad, pgd_at_step, random_intermediate_loss, train_loop, trades_step, EpochRecord, Framework,
    OptimizerState, StepContext, TrainConfig,
};
use deqr::{DeqModel, ExprGraph, Nonlinearity, NodeId, SolverConfig, Tensor};
use nalgebra::{DMatrix, DVector};
use proptest::prelude::*;
use proptest::test_runner::{Config, RngAlgorithm, TestCaseError, TestRng, TestRunner};
use rand::Rng;

use super::{assert_feasible, ctx, lively_model, random_batch, random_matrix, random_model, random_vec, rng};

pub type Property = fn() -> Result<(), String>;

/// Every property with its name, in the order of the modules.
pub const ALL: &[(&str, Property)] = &[
    ("autodiff: reverse_grad matches finite differences on random graphs", reverse_matches_fd),
    ("autodiff: softmax sums to one with entries in (0, 1)", softmax_is_a_distribution),
    ("autodiff: 0 <= entropy <= ln C", entropy_is_bounded),
    ("autodiff: entropy is shift invariant", entropy_is_shift_invariant),
    ("autodiff: reverse_grad is deterministic", reverse_grad_is_deterministic),
    ("deq_core: naive residuals decrease and reach 1e-6 at N = 50", naive_residuals_decrease),
    ("deq_core: Anderson agrees with converged naive iteration", anderson_matches_naive),
    ("deq_core: linear mode matches the direct solve", linear_mode_matches_direct_solve),
    ("deq_core: trace entropies match their definition", trace_entropies_are_consistent),
    ("deq_core: naive states equal nested layer applications", naive_states_are_nested_layers),
    ("attacks: adversarial inputs stay in the ball and the domain", adversarial_inputs_are_feasible),
    ("attacks: the seed fixes the adversarial batch", attacks_are_seeded),
    ("attacks: larger budgets never weaken the grid", grid_is_monotone_in_budget),
    ("attacks: perturbation decomposition bound holds", decomposition_bound_holds),
    ("training: train_loop is deterministic", train_loop_is_deterministic),
    ("training: random-intermediate loss is unbiased", random_intermediate_is_unbiased),
    ("training: updates stay finite and spectrally bounded", updates_stay_finite_and_bounded),
    ("training: history schema is complete", history_schema_is_complete),
    ("defense: parameters are never mutated", defense_keeps_parameters),
    ("defense: input versions stay in the ball and the domain", defense_inputs_are_feasible),
    ("defense: disabled defense is the plain solver path", disabled_defense_is_plain_solve),
    ("defense: defended predictions are deterministic", defense_is_deterministic),
    ("defense: wall time grows with R and shrinks with T_f", defense_wall_time_is_monotone),
    ("metrics: dH is antisymmetric", dh_is_antisymmetric),
    ("metrics: P and P_geq partition the pairs", p_partitions_pairs),
    ("metrics: deviation vanishes exactly for unperturbed inputs", deviation_vanishes_iff_unperturbed),
    ("metrics: reports are independent of batch order", report_is_order_independent),
    ("harness: artifacts are a pure function of config and seed", artifacts_are_reproducible),
    ("harness: stages read only declared files", stages_read_only_declared_files),
    ("harness: tables have headers and dot decimals", tables_are_self_describing),
];

fn check<S>(cases: u32, strategy: S, test: impl Fn(S::Value) -> Result<(), TestCaseError>) -> Result<(), String>
where
    S: Strategy,
    S::Value: Debug,
{
    let config = Config {
        cases,
        failure_persistence: None,
        ..Config::default()
    };
    let mut runner = TestRunner::new_with_rng(config, TestRng::deterministic_rng(RngAlgorithm::ChaCha));
    runner.run(&strategy, test).map_err(|e| e.to_string())
}

fn fail(e: impl std::fmt::Display) -> TestCaseError {
    TestCaseError::fail(e.to_string())
}

// ---------------------------------------------------------------- autodiff

/// Rebuilds the same random graph from `seed` for any leaf values:
/// leaves are `W: n×n`, `v1`, `v2`, `b` (all differentiable) plus a constant.
fn random_graph(seed: u64, n: usize, leaves: &[Tensor<f64>]) -> deqr::Result<(ExprGraph<f64>, NodeId, Vec<NodeId>)> {
    let mut r = rng(seed ^ 0x67_7261_7068);
    let mut g = ExprGraph::new();
    let ids = leaves
        .iter()
        .map(|t| g.param(t.clone()))
        .collect::<deqr::Result<Vec<_>>>()?;
    let (w, b) = (ids[0], ids[3]);
    let konst = g.constant(Tensor::vector((0..n).map(|k| 0.1 * k as f64 - 0.2).collect()))?;
    let mut pool = vec![ids[1], ids[2], konst];
    for _ in 0..r.random_range(2..=7) {
        let a = pool[r.random_range(0..pool.len())];
        let c = pool[r.random_range(0..pool.len())];
        let node = match r.random_range(0..10) {
            0 => g.affine(w, a, b)?,
            1 => g.tanh(a)?,
            2 => g.relu(a)?,
            3 => g.add(a, c)?,
            4 => g.sub(a, c)?,
            5 => g.mul(a, c)?,
            6 => g.scale(a, r.random_range(-1.5..1.5))?,
            7 => g.softmax(a)?,
            8 => g.log_softmax(a)?,
            _ => g.lerp(a, c, r.random_range(0.1..0.9))?,
        };
        pool.push(node);
    }
    let last = *pool.last().expect("non-empty pool");
    let other = pool[r.random_range(0..pool.len())];
    let out = match r.random_range(0..5) {
        0 => g.sum(last)?,
        1 => g.entropy(last)?,
        2 => g.cross_entropy(last, r.random_range(0..n))?,
        3 => g.kl(last, other)?,
        _ => g.pick(last, r.random_range(0..n))?,
    };
    Ok((g, out, ids))
}

fn graph_leaves(seed: u64, n: usize) -> Vec<Tensor<f64>> {
    let mut r = rng(seed);
    vec![
        random_matrix(&mut r, n, n, 2.0),
        random_vec(&mut r, n, 2.0),
        random_vec(&mut r, n, 2.0),
        random_vec(&mut r, n, 2.0),
    ]
}

pub fn reverse_matches_fd() -> Result<(), String> {
    check(120, (any::<u64>(), 2..=5usize), |(seed, n)| {
        let leaves = graph_leaves(seed, n);
        let (g, out, ids) = random_graph(seed, n, &leaves).map_err(fail)?;
        let grads = reverse_grad(&g, out).map_err(fail)?;
        for (k, &id) in ids.iter().enumerate() {
            let f = |t: &Tensor<f64>| {
                let mut probe = leaves.clone();
                probe[k] = t.clone();
                let (g, out, _) = random_graph(seed, n, &probe)?;
                Ok(g.value(out).item())
            };
            let fd = finite_diff_grad(f, &leaves[k], FD_STEP).map_err(fail)?;
            let err = max_rel_error(grads.grad(id), &fd, REL_FLOOR);
            prop_assert!(err <= 1e-4, "leaf {k}: relative error {err:e}");
        }
        Ok(())
    })
}

pub fn softmax_is_a_distribution() -> Result<(), String> {
    // Strictly inside (0, 1) is representable while logit gaps stay below
    // ~36 (beyond that the top entry rounds to 1); wider logits are checked
    // for the closed interval and the sum.
    check(256, prop::collection::vec(-15.0..15.0f64, 2..12), |logits| {
        let p = eval_softmax(&Tensor::vector(logits)).map_err(fail)?;
        prop_assert!((p.sum() - 1.0).abs() <= 1e-12, "sum {}", p.sum());
        prop_assert!(p.data().iter().all(|&v| v > 0.0 && v < 1.0), "{p:?}");
        Ok(())
    })?;
    check(256, prop::collection::vec(-1e3..1e3f64, 2..12), |logits| {
        let p = eval_softmax(&Tensor::vector(logits)).map_err(fail)?;
        prop_assert!((p.sum() - 1.0).abs() <= 1e-12, "sum {}", p.sum());
        prop_assert!(p.data().iter().all(|&v| (0.0..=1.0).contains(&v)), "{p:?}");
        Ok(())
    })
}

pub fn entropy_is_bounded() -> Result<(), String> {
    check(256, prop::collection::vec(-1e3..1e3f64, 2..12), |logits| {
        let c = logits.len() as f64;
        let h = eval_pred_entropy(&Tensor::vector(logits)).map_err(fail)?;
        // ln C itself carries one rounding.
        prop_assert!(h >= 0.0 && h <= c.ln() + 1e-12, "H = {h}, ln C = {}", c.ln());
        Ok(())
    })
}

pub fn entropy_is_shift_invariant() -> Result<(), String> {
    check(256, (prop::collection::vec(-20.0..20.0f64, 2..12), -100.0..100.0f64), |(logits, s)| {
        let a = eval_pred_entropy(&Tensor::vector(logits.clone())).map_err(fail)?;
        let b = eval_pred_entropy(&Tensor::vector(logits.iter().map(|v| v + s).collect())).map_err(fail)?;
        prop_assert!((a - b).abs() <= 1e-12, "{a} vs {b}");
        Ok(())
    })
}

pub fn reverse_grad_is_deterministic() -> Result<(), String> {
    check(64, (any::<u64>(), 2..=5usize), |(seed, n)| {
        let leaves = graph_leaves(seed, n);
        let (g1, o1, _) = random_graph(seed, n, &leaves).map_err(fail)?;
        let (g2, o2, _) = random_graph(seed, n, &leaves).map_err(fail)?;
        let r1 = reverse_grad(&g1, o1).map_err(fail)?;
        let r2 = reverse_grad(&g2, o2).map_err(fail)?;
        let r3 = reverse_grad(&g1, o1).map_err(fail)?;
        for r in [&r2, &r3] {
            for (id, t) in &r1.grads {
                let bits = |x: &Tensor<f64>| x.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
                prop_assert_eq!(bits(t), bits(&r.grads[id]));
            }
        }
        Ok(())
    })
}

// ---------------------------------------------------------------- deq_core

fn dims() -> impl Strategy<Value = (u64, usize, usize, usize)> {
    (any::<u64>(), 1..=8usize, 1..=8usize, 2..=8usize)
}

pub fn naive_residuals_decrease() -> Result<(), String> {
    // Each case is a batch of 40 pairs; the 95% rate is required per batch.
    check(10, (any::<u64>(), 0.1..0.7f64), |(seed, gamma)| {
        let mut r = rng(seed);
        let mut monotone = 0;
        let pairs = 40;
        for _ in 0..pairs {
            let (l, d, c) = (r.random_range(1..=8), r.random_range(1..=8), r.random_range(2..=8));
            let model = lively_model(&mut r, l, d, c, gamma);
            let x = random_vec(&mut r, l, 2.0);
            let trace = solve(&model, &x, &SolverConfig::naive(50)).map_err(fail)?;
            let res: Vec<f64> = trace.residuals.iter().map(|v| v.value).collect();
            prop_assert!(res[50] <= 1e-6, "final residual {:e}", res[50]);
            // Below 1e-12 the residual is rounding noise.
            if res[1..].windows(2).all(|w| w[0] <= 1e-12 || w[1] < w[0]) {
                monotone += 1;
            }
        }
        prop_assert!(monotone * 100 >= 95 * pairs, "{monotone}/{pairs} monotone");
        Ok(())
    })
}

pub fn anderson_matches_naive() -> Result<(), String> {
    check(100, (dims(), 0.3..0.9f64), |((seed, l, d, c), gamma)| {
        let mut r = rng(seed);
        let model = lively_model(&mut r, l, d, c, gamma);
        let x = random_vec(&mut r, l, 2.0);
        let naive = solve(&model, &x, &SolverConfig::naive(5000).with_tol(1e-10)).map_err(fail)?;
        let anderson = solve(&model, &x, &SolverConfig::anderson(60, 5)).map_err(fail)?;
        let dist = anderson.final_state().dist2(naive.final_state());
        prop_assert!(dist <= 1e-6, "distance {dist:e}");
        Ok(())
    })
}

pub fn linear_mode_matches_direct_solve() -> Result<(), String> {
    check(100, (any::<u64>(), 1..=6usize, 2..=6usize), |(seed, l, d)| {
        let mut r = rng(seed);
        let w = random_matrix(&mut r, d, d, 1.0);
        let u = random_matrix(&mut r, d, l, 1.0);
        let b = random_vec(&mut r, d, 1.0);
        let model = DeqModel::new(
            w,
            u,
            b,
            Tensor::identity(d),
            Tensor::zeros(&[d]),
            Nonlinearity::Identity,
            0.9,
        )
        .map_err(fail)?
        .spectral_rescale();
        let x = random_vec(&mut r, l, 1.0);
        let wm = DMatrix::from_row_slice(d, d, model.w.data());
        let um = DMatrix::from_row_slice(d, l, model.u.data());
        let rhs = um * DVector::from_column_slice(x.data()) + DVector::from_column_slice(model.b.data());
        let direct = (DMatrix::identity(d, d) - wm).lu().solve(&rhs).ok_or_else(|| fail("singular"))?;
        let direct = Tensor::vector(direct.iter().copied().collect());
        for cfg in [SolverConfig::naive(400), SolverConfig::anderson(60, d)] {
            let z = solve(&model, &x, &cfg).map_err(fail)?;
            let dist = z.final_state().dist2(&direct);
            prop_assert!(dist <= 1e-8, "{:?}: distance {dist:e}", cfg.method);
        }
        Ok(())
    })
}

pub fn trace_entropies_are_consistent() -> Result<(), String> {
    check(64, (dims(), any::<bool>()), |((seed, l, d, c), anderson)| {
        let mut r = rng(seed);
        let model = lively_model(&mut r, l, d, c, 0.9);
        let x = random_vec(&mut r, l, 2.0);
        let cfg = if anderson { SolverConfig::anderson(8, 3) } else { SolverConfig::naive(8) };
        let trace = solve(&model, &x, &cfg).map_err(fail)?;
        for (t, z) in trace.states.iter().enumerate() {
            let h = eval_pred_entropy(&model.head_apply(z).map_err(fail)?).map_err(fail)?;
            prop_assert_eq!(h.to_bits(), trace.entropies[t].to_bits(), "state {}", t);
        }
        Ok(())
    })
}

pub fn naive_states_are_nested_layers() -> Result<(), String> {
    check(64, (dims(), 1..=12usize), |((seed, l, d, c), k)| {
        let mut r = rng(seed);
        let model = lively_model(&mut r, l, d, c, 0.9);
        let x = random_vec(&mut r, l, 2.0);
        let trace = solve(&model, &x, &SolverConfig::naive(k)).map_err(fail)?;
        let mut z = Tensor::zeros(&[d]);
        for _ in 0..k {
            z = model.layer_apply(&z, &x).map_err(fail)?;
        }
        prop_assert_eq!(&trace.states[k], &z);
        prop_assert!(trace.states[k].data().iter().zip(z.data()).all(|(a, b)| a.to_bits() == b.to_bits()));
        Ok(())
    })
}

// ---------------------------------------------------------------- attacks

fn attack_case() -> impl Strategy<Value = (u64, usize, f64, usize, usize)> {
    (any::<u64>(), 0..3usize, 0.01..0.6f64, 1..=4usize, 2..=4usize)
}

fn spec_for(kind: usize, eps: f64, steps: usize, n: usize, r: &mut impl Rng) -> AttackSpec {
    let base = AttackSpec {
        steps,
        ..AttackSpec::readymade(eps, r.random())
    };
    match kind {
        0 => base,
        1 => base.intermediate(r.random_range(1..=n), r.random_range(1..=9), if r.random() { 0.5 } else { 1.0 }),
        _ => base.trades(),
    }
}

pub fn adversarial_inputs_are_feasible() -> Result<(), String> {
    check(40, attack_case(), |(seed, kind, eps, steps, n)| {
        let mut r = rng(seed);
        let (l, c) = (r.random_range(1..=4), r.random_range(2..=4));
        let model = lively_model(&mut r, l, 6, c, 0.9);
        let batch = random_batch(&mut r, 6, l, c, 1.0);
        // A tight box makes the domain clip active.
        let cx = ctx(l, -1.1, 1.1, SolverConfig::anderson(n, 3));
        let spec = spec_for(kind, eps, steps, n, &mut r);
        let adv = if spec.kind == AttackKind::TradesKlPgd {
            trades_inner_max(&model, &batch, &spec, &cx).map_err(fail)?
        } else {
            let pred = StatePredictor {
                solver: cx.solver.clone(),
                state: n,
            };
            pgd_attack(&model, &batch, &spec, &cx, &pred).map_err(fail)?
        };
        assert_feasible(&adv.adversarial_inputs, &batch.inputs, eps, &cx.domain);
        Ok(())
    })
}

pub fn attacks_are_seeded() -> Result<(), String> {
    check(24, attack_case(), |(seed, kind, eps, steps, n)| {
        let mut r = rng(seed);
        let model = lively_model(&mut r, 2, 6, 3, 0.9);
        let batch = random_batch(&mut r, 8, 2, 3, 1.0);
        let cx = ctx(2, -3.0, 3.0, SolverConfig::anderson(n, 3));
        let spec = spec_for(kind, eps, steps, n, &mut r);
        let (a, _) = pgd_generate(&model, &batch, &spec, &cx).map_err(fail)?;
        let (b, _) = pgd_generate(&model, &batch, &spec, &cx).map_err(fail)?;
        prop_assert_eq!(&a, &b);
        // Reordering the batch (ids travel with the examples) changes nothing.
        let order: Vec<usize> = (0..batch.len()).rev().collect();
        let (p, _) = pgd_generate(&model, &batch.subset(&order), &spec, &cx).map_err(fail)?;
        for (k, &o) in order.iter().enumerate() {
            prop_assert_eq!(&p[k], &a[o]);
        }
        assert_feasible(&a, &batch.inputs, eps, &cx.domain);
        Ok(())
    })
}

pub fn grid_is_monotone_in_budget() -> Result<(), String> {
    check(3, (any::<u64>(), 0.05..0.3f64), |(seed, eps1)| {
        let mut r = rng(seed);
        let model = lively_model(&mut r, 2, 6, 3, 0.9);
        let batch = random_batch(&mut r, 16, 2, 3, 1.0);
        let n = 4;
        let cx = ctx(2, -3.0, 3.0, SolverConfig::anderson(n, 3));
        let pred = StatePredictor {
            solver: cx.solver.clone(),
            state: n,
        };
        let base = AttackSpec {
            steps: 5,
            ..AttackSpec::readymade(eps1, seed)
        };
        let g1 = run_attack_grid(&model, &batch, &base, &cx, &pred).map_err(fail)?;
        let eps2 = 2.0 * eps1;
        let g2 = run_attack_grid(&model, &batch, &base.with_eps(eps2, eps2 / 4.0), &cx, &pred).map_err(fail)?;
        for (g, e) in [(&g1, eps1), (&g2, eps2)] {
            for res in &g.results {
                assert_feasible(&res.adversarial_inputs, &batch.inputs, e, &cx.domain);
            }
        }
        prop_assert!(
            g2.min_accuracy() <= g1.min_accuracy(),
            "grid min {} at 2ε above {} at ε",
            g2.min_accuracy(),
            g1.min_accuracy()
        );
        Ok(())
    })
}

pub fn decomposition_bound_holds() -> Result<(), String> {
    check(32, (dims(), 0.05..0.5f64), |((seed, l, d, c), eps)| {
        let mut r = rng(seed);
        let model = lively_model(&mut r, l, d, c, 0.9);
        let batch = random_batch(&mut r, 4, l, c, 1.0);
        let cx = ctx(l, -3.0, 3.0, SolverConfig::naive(8));
        let spec = AttackSpec {
            steps: 3,
            ..AttackSpec::readymade(eps, seed)
        };
        let (adv, _) = pgd_generate(&model, &batch, &spec, &cx).map_err(fail)?;
        assert_feasible(&adv, &batch.inputs, eps, &cx.domain);
        for (x, xa) in batch.inputs.iter().zip(&adv) {
            let tc = solve(&model, x, &cx.solver).map_err(fail)?;
            let ta = solve(&model, xa, &cx.solver).map_err(fail)?;
            let terms = perturbation_decomposition(&model, &tc, &ta, x, xa).map_err(fail)?;
            for (t, term) in terms.iter().enumerate() {
                prop_assert!(term.holds(1e-9), "t = {t}: {term:?}");
            }
        }
        Ok(())
    })
}

// ---------------------------------------------------------------- training

fn small_train_setup(seed: u64) -> (Batch<f64>, Batch<f64>, DomainBox<f64>) {
    let data = gen_dataset(DatasetKind::GaussianBlobs, 120, 0.4, 3, seed).unwrap();
    (data.batch(Split::Train), data.batch(Split::Val), data.domain.clone())
}

fn small_train_config(seed: u64, framework: Framework, epochs: usize) -> TrainConfig {
    TrainConfig {
        framework,
        epochs,
        batch_size: 16,
        lr0: 0.01,
        eps: 0.3,
        alpha: 0.1,
        attack_steps: 3,
        seed,
        ..TrainConfig::default()
    }
}

pub fn train_loop_is_deterministic() -> Result<(), String> {
    check(2, (any::<u64>(), any::<bool>()), |(seed, trades)| {
        let (train, val, domain) = small_train_setup(seed);
        let fw = if trades { Framework::Trades } else { Framework::PgdAt };
        let cfg = small_train_config(seed, fw, 2);
        let solver = SolverConfig::anderson(4, 3);
        let run = || {
            let init = random_model(&mut rng(seed), 2, 8, 3, Nonlinearity::Tanh, 0.9);
            train_loop(init, &train, &val, &cfg, &solver, &domain, &mut |_| Ok(()))
        };
        let a = run().map_err(fail)?;
        let b = run().map_err(fail)?;
        prop_assert_eq!(a.model.checksum(), b.model.checksum());
        prop_assert_eq!(format!("{:?}", a.history), format!("{:?}", b.history));
        Ok(())
    })
}

pub fn random_intermediate_is_unbiased() -> Result<(), String> {
    check(4, (any::<u64>(), any::<bool>()), |(seed, trades)| {
        let mut r = rng(seed);
        let model = lively_model(&mut r, 2, 6, 3, 0.9);
        let batch = random_batch(&mut r, 4, 2, 3, 1.0);
        let adversarial: Vec<_> = batch
            .inputs
            .iter()
            .map(|x| x.add(&random_vec(&mut r, 2, 0.2)).unwrap())
            .collect();
        let fw = if trades { Framework::Trades } else { Framework::PgdAt };
        let cfg = TrainConfig {
            random_intermediate: true,
            ..small_train_config(seed, fw, 1)
        };
        let solver = SolverConfig::naive(8);
        let per_i: Vec<f64> = (1..=8)
            .map(|i| batch_loss_grad(&model, &cfg, &solver, &batch, &adversarial, i).map(|v| v.0))
            .collect::<deqr::Result<_>>()
            .map_err(fail)?;
        let target = per_i.iter().sum::<f64>() / 8.0;
        let draws = 1500;
        let samples: Vec<f64> = (0..draws)
            .map(|_| random_intermediate_loss(&model, &batch, &adversarial, &cfg, &solver, &mut r).map(|v| v.1))
            .collect::<deqr::Result<_>>()
            .map_err(fail)?;
        let mean = samples.iter().sum::<f64>() / draws as f64;
        let var = samples.iter().map(|s| (s - mean).powi(2)).sum::<f64>() / (draws - 1) as f64;
        let se = (var / draws as f64).sqrt();
        prop_assert!((mean - target).abs() <= 3.0 * se, "mean {mean} target {target} se {se}");
        Ok(())
    })
}

pub fn updates_stay_finite_and_bounded() -> Result<(), String> {
    check(6, (any::<u64>(), any::<bool>(), 0.3..1.0f64), |(seed, trades, gamma)| {
        let mut r = rng(seed);
        let mut model = lively_model(&mut r, 2, 6, 3, gamma);
        let fw = if trades { Framework::Trades } else { Framework::PgdAt };
        let cfg = TrainConfig {
            lr0: 0.2,
            ..small_train_config(seed, fw, 1)
        };
        let solver = SolverConfig::anderson(4, 3);
        let domain = DomainBox::uniform(2, -3.0, 3.0);
        let mut opt = OptimizerState::new(&model);
        for step in 0..6 {
            let batch = random_batch(&mut r, 8, 2, 3, 1.0);
            let s = StepContext {
                cfg: &cfg,
                solver: &solver,
                domain: &domain,
                lr: cfg.lr0,
                attack_seed: step,
                loss_at: 4,
            };
            let (next, _) = if trades {
                trades_step(&model, &batch, &mut opt, &s)
            } else {
                pgd_at_step(&model, &batch, &mut opt, &s)
            }
            .map_err(fail)?;
            prop_assert!(super::all_finite(&next));
            let norm = spectral_norm(&next.w);
            prop_assert!(norm <= gamma + 1e-6, "step {step}: ‖W‖ = {norm}");
            model = next;
        }
        // The rescale itself never increases the norm.
        for scale in [0.1, 1.0, 5.0] {
            let mut m = model.clone();
            m.w = random_matrix(&mut r, 6, 6, scale);
            let before = spectral_norm(&m.w);
            let after = spectral_norm(&m.spectral_rescale().w);
            prop_assert!(after <= before + 1e-12 && after <= gamma + 1e-6);
        }
        Ok(())
    })
}

pub fn history_schema_is_complete() -> Result<(), String> {
    check(2, (any::<u64>(), 1..=3usize), |(seed, epochs)| {
        let (train, val, domain) = small_train_setup(seed);
        let cfg = small_train_config(seed, Framework::PgdAt, epochs);
        let init = random_model(&mut rng(seed), 2, 8, 3, Nonlinearity::Tanh, 0.9);
        let mut seen: Vec<EpochRecord> = Vec::new();
        let out = train_loop(init, &train, &val, &cfg, &SolverConfig::anderson(4, 3), &domain, &mut |rec| {
            seen.push(rec.clone());
            Ok(())
        })
        .map_err(fail)?;
        prop_assert_eq!(out.history.len(), epochs);
        prop_assert_eq!(format!("{:?}", out.history), format!("{seen:?}"));
        prop_assert_eq!(HISTORY_HEADER, "epoch,lr,train_loss,clean_acc,robust_acc");
        for (k, rec) in out.history.iter().enumerate() {
            prop_assert_eq!(rec.epoch, k);
            prop_assert!(rec.lr.is_finite() && rec.lr >= 0.0 && rec.lr <= cfg.lr0);
            prop_assert!(rec.train_loss.is_finite() && rec.train_loss >= 0.0);
            prop_assert!((0.0..=1.0).contains(&rec.clean_acc) && (0.0..=1.0).contains(&rec.robust_acc));
            let row = history_row(rec);
            let fields: Vec<&str> = row.split(',').collect();
            prop_assert_eq!(fields.len(), 5);
            prop_assert!(fields.iter().all(|f| f.parse::<f64>().is_ok()));
        }
        Ok(())
    })
}

// ---------------------------------------------------------------- defense

fn defense_case() -> impl Strategy<Value = (u64, f64, usize, usize, f64)> {
    (any::<u64>(), 0.001..0.3f64, 1..=5usize, 1..=8usize, 0.01..0.5f64)
}

fn defense_setup(seed: u64) -> (DeqModel<f64>, Tensor<f64>, DomainBox<f64>) {
    let mut r = rng(seed);
    let (l, c) = (r.random_range(1..=4), r.random_range(2..=5));
    let model = lively_model(&mut r, l, 8, c, 0.9);
    let x = random_vec(&mut r, l, 1.0);
    (model, x, DomainBox::uniform(l, -1.1, 1.1))
}

pub fn defense_keeps_parameters() -> Result<(), String> {
    check(24, defense_case(), |(seed, beta, iterations, frequency, eps)| {
        let (model, x, domain) = defense_setup(seed);
        let before = model.checksum();
        let defense = DefenseConfig {
            beta,
            iterations,
            frequency,
            eps,
            enabled: true,
        };
        let solver = SolverConfig::anderson(8, 3);
        entropy_reduction_solve(&model, &x, &solver, &defense, &domain).map_err(fail)?;
        let pred = DefendedPredictor {
            solver,
            defense,
            domain,
            state: 8,
        };
        deqr::attacks::evaluate(&model, std::slice::from_ref(&x), &[0], &pred).map_err(fail)?;
        prop_assert_eq!(before, model.checksum());
        Ok(())
    })
}

pub fn defense_inputs_are_feasible() -> Result<(), String> {
    check(48, defense_case(), |(seed, beta, iterations, frequency, eps)| {
        let (model, x, domain) = defense_setup(seed);
        let defense = DefenseConfig {
            beta: beta * 10.0,
            iterations,
            frequency,
            eps,
            enabled: true,
        };
        let d = entropy_reduction_solve(&model, &x, &SolverConfig::anderson(8, 3), &defense, &domain)
            .map_err(fail)?;
        prop_assert_eq!(d.interventions.len(), 8 / frequency);
        for v in d.input_versions() {
            prop_assert!(v.linf_dist(&x) <= eps + 1e-12, "left the ball: {}", v.linf_dist(&x));
            prop_assert!(domain.contains(v));
        }
        Ok(())
    })
}

pub fn disabled_defense_is_plain_solve() -> Result<(), String> {
    check(32, (defense_case(), any::<bool>()), |((seed, beta, iterations, frequency, eps), late)| {
        let (model, x, domain) = defense_setup(seed);
        let solver = SolverConfig::anderson(8, 3);
        // Either switched off, or a frequency that never fires.
        let defense = DefenseConfig {
            beta,
            iterations,
            frequency: if late { 9 + frequency } else { frequency },
            eps,
            enabled: !late,
        };
        let defense = if late { DefenseConfig { enabled: true, ..defense } } else { DefenseConfig { enabled: false, ..defense } };
        let plain = solve(&model, &x, &solver).map_err(fail)?;
        let d = entropy_reduction_solve(&model, &x, &solver, &defense, &domain).map_err(fail)?;
        prop_assert_eq!(format!("{:?}", d.trace), format!("{plain:?}"));
        prop_assert!(d.interventions.is_empty());
        let plain_pred = StatePredictor {
            solver: solver.clone(),
            state: 8,
        };
        let def_pred = DefendedPredictor {
            solver,
            defense,
            domain,
            state: 8,
        };
        use deqr::attacks::Predictor;
        let a = plain_pred.logits(&model, &x).map_err(fail)?;
        let b = def_pred.logits(&model, &x).map_err(fail)?;
        prop_assert!(a.data().iter().zip(b.data()).all(|(p, q)| p.to_bits() == q.to_bits()));
        Ok(())
    })
}

pub fn defense_is_deterministic() -> Result<(), String> {
    check(24, defense_case(), |(seed, beta, iterations, frequency, eps)| {
        let (model, x, domain) = defense_setup(seed);
        let defense = DefenseConfig {
            beta,
            iterations,
            frequency,
            eps,
            enabled: true,
        };
        let solver = SolverConfig::anderson(8, 3);
        let a = entropy_reduction_solve(&model, &x, &solver, &defense, &domain).map_err(fail)?;
        let b = entropy_reduction_solve(&model, &x, &solver, &defense, &domain).map_err(fail)?;
        prop_assert_eq!(format!("{:?}", a.trace), format!("{:?}", b.trace));
        prop_assert_eq!(format!("{:?}", a.interventions), format!("{:?}", b.interventions));
        Ok(())
    })
}

/// Mean wall time (over `runs` repetitions) of defending every input of a
/// fixed batch, for each `(R, T_f)` cell.
pub fn defense_timing_table(
    model: &DeqModel<f64>,
    inputs: &[Tensor<f64>],
    domain: &DomainBox<f64>,
    solver: &SolverConfig,
    rs: &[usize],
    tfs: &[usize],
    runs: usize,
) -> deqr::Result<Vec<Vec<Duration>>> {
    let mut table = vec![vec![Duration::ZERO; tfs.len()]; rs.len()];
    // Interleave the cells across runs so drift affects all of them alike.
    for _ in 0..runs {
        for (a, &r) in rs.iter().enumerate() {
            for (b, &tf) in tfs.iter().enumerate() {
                let defense = DefenseConfig {
                    beta: 0.05,
                    iterations: r,
                    frequency: tf,
                    eps: 0.3,
                    enabled: true,
                };
                for x in inputs {
                    table[a][b] += entropy_reduction_solve(model, x, solver, &defense, domain)?.wall_time.total;
                }
            }
        }
    }
    for row in &mut table {
        for cell in row {
            *cell /= runs as u32;
        }
    }
    Ok(table)
}

/// Checks the table: strictly increasing along R, non-increasing along T_f.
pub fn timing_is_monotone(table: &[Vec<Duration>]) -> Result<(), String> {
    for (a, row) in table.iter().enumerate() {
        for b in 0..row.len() {
            if a + 1 < table.len() && table[a + 1][b] <= row[b] {
                return Err(format!("R index {a}→{}: {:?} then {:?}", a + 1, row[b], table[a + 1][b]));
            }
            if b + 1 < row.len() && row[b + 1] > row[b] {
                return Err(format!("T_f index {b}→{}: {:?} then {:?}", b + 1, row[b], row[b + 1]));
            }
        }
    }
    Ok(())
}

pub fn timing_setup() -> (DeqModel<f64>, Vec<Tensor<f64>>, DomainBox<f64>) {
    let mut r = rng(7);
    let model = lively_model(&mut r, 2, 16, 4, 0.9);
    let inputs = (0..16).map(|_| random_vec(&mut r, 2, 1.0)).collect();
    (model, inputs, DomainBox::uniform(2, -3.0, 3.0))
}

/// Measured with the naive solver, whose steps all cost the same, so the
/// table isolates the defense. (With Anderson, each intervention also resets
/// the solver memory, which makes the following steps cheaper.)
pub fn defense_wall_time_is_monotone() -> Result<(), String> {
    let (model, inputs, domain) = timing_setup();
    let table = defense_timing_table(
        &model,
        &inputs,
        &domain,
        &SolverConfig::naive(8),
        &TIMING_R,
        &TIMING_TF,
        20,
    )
    .map_err(|e| e.to_string())?;
    timing_is_monotone(&table)
}

pub const TIMING_R: [usize; 4] = [1, 5, 10, 20];
pub const TIMING_TF: [usize; 4] = [1, 2, 4, 8];

// ---------------------------------------------------------------- metrics

pub fn dh_is_antisymmetric() -> Result<(), String> {
    check(256, prop::collection::vec((0.0..3.0f64, 0.0..3.0f64), 1..40), |pairs| {
        let (a, b): (Vec<f64>, Vec<f64>) = pairs.into_iter().unzip();
        let ab = metric_dh(&a, &b).map_err(fail)?;
        let ba = metric_dh(&b, &a).map_err(fail)?;
        prop_assert_eq!(ab.to_bits(), (-ba).to_bits());
        Ok(())
    })
}

pub fn p_partitions_pairs() -> Result<(), String> {
    // Small integer-valued entropies produce plenty of ties.
    check(256, prop::collection::vec((0..4u8, 0..4u8), 1..60), |pairs| {
        let a: Vec<f64> = pairs.iter().map(|p| p.0 as f64 * 0.5).collect();
        let b: Vec<f64> = pairs.iter().map(|p| p.1 as f64 * 0.5).collect();
        let total = metric_p(&a, &b).map_err(fail)? + metric_p_geq(&b, &a).map_err(fail)?;
        prop_assert_eq!(total, 100.0);
        Ok(())
    })
}

pub fn deviation_vanishes_iff_unperturbed() -> Result<(), String> {
    check(64, (dims(), any::<bool>(), 1e-6..0.5f64), |((seed, l, d, c), perturb, size)| {
        let mut r = rng(seed);
        let model = lively_model(&mut r, l, d, c, 0.9);
        let x = random_vec(&mut r, l, 1.0);
        let x_adv = if perturb {
            let mut v = x.clone();
            let k = r.random_range(0..l);
            v.data_mut()[k] += size;
            v
        } else {
            x.clone()
        };
        let cfg = SolverConfig::anderson(8, 3);
        let dev = dynamics_deviation(
            &solve(&model, &x, &cfg).map_err(fail)?,
            &solve(&model, &x_adv, &cfg).map_err(fail)?,
        )
        .map_err(fail)?;
        prop_assert_eq!(dev[0], 0.0);
        let all_zero = dev.iter().all(|&v| v == 0.0);
        prop_assert_eq!(all_zero, x_adv == x, "deviation {:?}", dev);
        Ok(())
    })
}

pub fn report_is_order_independent() -> Result<(), String> {
    check(3, any::<u64>(), |seed| {
        let mut r = rng(seed);
        let model = lively_model(&mut r, 2, 6, 3, 0.9);
        let test = random_batch(&mut r, 10, 2, 3, 1.0);
        let val = random_batch(&mut r, 6, 2, 3, 1.0);
        let cfg = EvalConfig {
            ctx: ctx(2, -3.0, 3.0, SolverConfig::anderson(3, 3)),
            attack: AttackSpec {
                steps: 2,
                ..AttackSpec::readymade(0.3, seed)
            },
            defense: Some(DefenseConfig {
                beta: 0.05,
                iterations: 2,
                frequency: 1,
                eps: 0.3,
                enabled: true,
            }),
            prediction_state: None,
            entropy_state: EntropyState::Final,
        };
        let a = build_eval_report(&model, &test, Some(&val), &cfg).map_err(fail)?;
        let mut order: Vec<usize> = (0..test.len()).collect();
        order.reverse();
        order.swap(0, 4);
        let b = build_eval_report(&model, &test.subset(&order), Some(&val), &cfg).map_err(fail)?;
        prop_assert_eq!(
            serde_json::to_string(&a).map_err(fail)?,
            serde_json::to_string(&b).map_err(fail)?
        );
        Ok(())
    })
}

// ---------------------------------------------------------------- harness

/// A pipeline small enough to run several times per test.
pub fn tiny_config(seed: u64, dir: &Path, stages: &str, checkpoint: Option<&Path>) -> deqr::Result<ExperimentConfig> {
    let checkpoint = checkpoint.map_or(String::new(), |p| format!("checkpoint = \"{}\"", p.display()));
    let text = format!(
        r#"
seed = {seed}
stages = [{stages}]

[dataset]
source = "gaussian_blobs"
n = 100
noise = 0.4
classes = 3

[model]
hidden = 6
{checkpoint}

[solver]
iterations = 3

[budget]
margin_fraction = 0.5

[training]
epochs = 1
batch_size = 32
attack_steps = 2
lr0 = 0.01

[attack]
steps = 2

[defense]
iterations = 2
frequency = 1

[output]
dir = "{}"
"#,
        dir.display()
    );
    ExperimentConfig::from_toml(&text)
}

fn dir_digest(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut files: Vec<(String, Vec<u8>)> = std::fs::read_dir(dir)
        .unwrap()
        .map(|e| {
            let p = e.unwrap().path();
            (p.file_name().unwrap().to_string_lossy().into_owned(), std::fs::read(&p).unwrap())
        })
        .collect();
    files.sort();
    files
}

/// Everything a full run writes, sorted by name.
pub const ARTIFACTS: [&str; 12] = [
    "attack.json",
    "checkpoint.bin",
    "dataset.csv",
    "defense.json",
    "deviation_profile.tsv",
    "deviation_profile_readymade.tsv",
    "entropy_profile.tsv",
    "entropy_profile_readymade.tsv",
    "grid_heatmap.tsv",
    "history.csv",
    "report.csv",
    "report.json",
];

const ALL_STAGES: &str = r#""gen_data", "train", "attack", "defend", "report""#;

pub fn artifacts_are_reproducible() -> Result<(), String> {
    check(2, any::<u64>(), |seed| {
        let tmp = tempfile::tempdir().map_err(fail)?;
        let dir = tmp.path().join("out");
        let cfg = tiny_config(seed, &dir, ALL_STAGES, None).map_err(fail)?;
        run_config(&cfg).map_err(fail)?;
        let a = dir_digest(&dir);
        std::fs::remove_dir_all(&dir).map_err(fail)?;
        run_config(&cfg).map_err(fail)?;
        let b = dir_digest(&dir);
        let names: Vec<&str> = a.iter().map(|f| f.0.as_str()).collect();
        prop_assert_eq!(names, ARTIFACTS.to_vec());
        for ((na, ba), (nb, bb)) in a.iter().zip(&b) {
            prop_assert_eq!(na, nb);
            prop_assert!(ba == bb, "{na} differs");
        }
        Ok(())
    })
}

pub fn stages_read_only_declared_files() -> Result<(), String> {
    check(2, any::<u64>(), |seed| {
        let tmp = tempfile::tempdir().map_err(fail)?;
        let clean = tmp.path().join("clean");
        run_config(&tiny_config(seed, &clean, r#""train", "report""#, None).map_err(fail)?).map_err(fail)?;
        // Decoys with artifact names in the output directory must be ignored.
        let dirty = tmp.path().join("dirty");
        std::fs::create_dir_all(&dirty).map_err(fail)?;
        for name in ["dataset.csv", "checkpoint.bin", "history.csv", "report.json"] {
            std::fs::write(dirty.join(name), b"decoy").map_err(fail)?;
        }
        run_config(&tiny_config(seed, &dirty, r#""train", "report""#, None).map_err(fail)?).map_err(fail)?;
        for name in ["report.json", "report.csv", "history.csv", "grid_heatmap.tsv"] {
            let a = std::fs::read(clean.join(name)).map_err(fail)?;
            let b = std::fs::read(dirty.join(name)).map_err(fail)?;
            prop_assert!(a == b, "{name} depends on undeclared files");
        }
        // An evaluation stage without a declared checkpoint is rejected
        // before anything is read.
        let eval_only = tmp.path().join("eval");
        std::fs::create_dir_all(&eval_only).map_err(fail)?;
        std::fs::copy(clean.join("checkpoint.bin"), eval_only.join("checkpoint.bin")).map_err(fail)?;
        prop_assert!(tiny_config(seed, &eval_only, r#""report""#, None).is_err());
        let ck = clean.join("checkpoint.bin");
        let cfg = tiny_config(seed, &eval_only, r#""report""#, Some(&ck)).map_err(fail)?;
        let out = run_config(&cfg).map_err(fail)?;
        prop_assert!(out.report.is_some());
        let a = std::fs::read(clean.join("report.json")).map_err(fail)?;
        let b = std::fs::read(eval_only.join("report.json")).map_err(fail)?;
        prop_assert!(a == b, "evaluating the declared checkpoint changed the report");
        Ok(())
    })
}

pub fn tables_are_self_describing() -> Result<(), String> {
    check(1, any::<u64>(), |seed| {
        let tmp = tempfile::tempdir().map_err(fail)?;
        let dir = tmp.path().join("out");
        run_config(&tiny_config(seed, &dir, ALL_STAGES, None).map_err(fail)?).map_err(fail)?;
        for (name, bytes) in dir_digest(&dir) {
            let sep = match name.rsplit('.').next() {
                Some("csv") => ',',
                Some("tsv") => '\t',
                _ => continue,
            };
            let text = String::from_utf8(bytes).map_err(fail)?;
            let mut lines = text.lines();
            let header: Vec<&str> = lines.next().unwrap_or_default().split(sep).collect();
            prop_assert!(
                header.iter().all(|h| !h.is_empty() && h.parse::<f64>().is_err()),
                "{name}: header {header:?}"
            );
            let mut rows = 0;
            for line in lines {
                let fields: Vec<&str> = line.split(sep).collect();
                prop_assert_eq!(fields.len(), header.len(), "{}: {}", name, line);
                for f in &fields {
                    let numeric = f.chars().next().is_some_and(|ch| ch.is_ascii_digit() || ch == '-');
                    if numeric && *f != "-" {
                        prop_assert!(f.parse::<f64>().is_ok(), "{name}: field `{f}` is not a dot-decimal number");
                    }
                }
                rows += 1;
            }
            prop_assert!(rows > 0, "{name} has no data rows");
        }
        Ok(())
    })
}

/// Ensures the parameter names cover the model (used by checksum tests).
pub fn param_count(model: &DeqModel<f64>) -> usize {
    ParamName::ALL.iter().map(|&n| model.param(n).len()).sum()
}

