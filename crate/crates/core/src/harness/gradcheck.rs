//! Reverse-mode versus finite-difference comparison on random small models,
//! for the three objectives that are differentiated in practice.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::autodiff::{finite_diff_grad, max_rel_error, Tensor};
use crate::defense::entropy_objective;
use crate::deq::{phantom_grad_from, solve_states, DeqModel, Nonlinearity, ParamName, SolverConfig, TailLoss};
use crate::error::Result;
use crate::training::{example_loss_grad, Framework};

pub const FD_STEP: f64 = 1e-5;
/// Central differences with step `FD_STEP` carry rounding noise of order
/// `ε_mach·|f| / FD_STEP ≈ 1e-11`; the floor keeps such noise on a vanishing
/// gradient from reading as a large relative error.
pub const REL_FLOOR: f64 = 1e-6;

#[derive(Debug, Clone, Copy, Default, Serialize)]
pub struct GradcheckSummary {
    pub instances: usize,
    pub unrolled_ce: f64,
    pub entropy: f64,
    pub trades: f64,
}

impl GradcheckSummary {
    pub fn worst(&self) -> f64 {
        self.unrolled_ce.max(self.entropy).max(self.trades)
    }
}

fn random_vec(rng: &mut ChaCha8Rng, n: usize, scale: f64) -> Tensor<f64> {
    Tensor::vector((0..n).map(|_| rng.random_range(-scale..=scale)).collect())
}

/// Error of the parameter and input gradients of the three objectives on
/// `instances` random tanh models with `l, d, C ≤ 8`.
pub fn gradcheck(seed: u64, instances: usize, k_p: usize) -> Result<GradcheckSummary> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut s = GradcheckSummary {
        instances,
        ..Default::default()
    };
    for _ in 0..instances {
        let l = rng.random_range(1..=8);
        let d = rng.random_range(1..=8);
        let c = rng.random_range(2..=8);
        let model = DeqModel::init_random(l, d, c, Nonlinearity::Tanh, 0.9, &mut rng)?.spectral_rescale();
        let x = random_vec(&mut rng, l, 1.0);
        let x_adv = x.add(&random_vec(&mut rng, l, 0.1))?;
        let y = rng.random_range(0..c);
        let solver = SolverConfig::naive(8);
        let zc = solve_states(&model, &x, &solver)?;
        let za = solve_states(&model, &x_adv, &solver)?;
        let anchor = rng.random_range(1..=8);

        let pg = phantom_grad_from(&model, &zc[anchor], &x, y, k_p, TailLoss::CrossEntropy)?;
        let ce_at = |m: &DeqModel<f64>, xi: &Tensor<f64>| {
            phantom_grad_from(m, &zc[anchor], xi, y, k_p, TailLoss::CrossEntropy).map(|p| p.loss())
        };
        let fd_x = finite_diff_grad(|xi| ce_at(&model, xi), &x, FD_STEP)?;
        s.unrolled_ce = s.unrolled_ce.max(max_rel_error(pg.input_grad(), &fd_x, REL_FLOOR));
        let grads = pg.params();
        for name in ParamName::ALL {
            let fd = finite_diff_grad(|p| ce_at(&with_param(&model, name, p), &x), model.param(name), FD_STEP)?;
            s.unrolled_ce = s.unrolled_ce.max(max_rel_error(grads.get(name), &fd, REL_FLOOR));
        }

        let z_next = &za[anchor];
        let (_, gx) = entropy_objective(&model, z_next, &x_adv)?;
        let fd = finite_diff_grad(|xi| Ok(entropy_objective(&model, z_next, xi)?.0), &x_adv, FD_STEP)?;
        s.entropy = s.entropy.max(max_rel_error(&gx, &fd, REL_FLOOR));

        let trades = |m: &DeqModel<f64>| {
            example_loss_grad(m, Framework::Trades, &x, &x_adv, (&zc[anchor], &za[anchor]), y, k_p, 6.0)
        };
        let (_, tg) = trades(&model)?;
        for name in ParamName::ALL {
            let fd = finite_diff_grad(|p| Ok(trades(&with_param(&model, name, p))?.0), model.param(name), FD_STEP)?;
            s.trades = s.trades.max(max_rel_error(tg.get(name), &fd, REL_FLOOR));
        }
    }
    Ok(s)
}

fn with_param(model: &DeqModel<f64>, name: ParamName, value: &Tensor<f64>) -> DeqModel<f64> {
    let mut m = model.clone();
    *m.param_mut(name) = value.clone();
    m
}
