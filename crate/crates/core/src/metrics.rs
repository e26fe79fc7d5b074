//! Diagnostics comparing clean and perturbed dynamics, and the evaluation
//! report that aggregates them.
//!
//! Every mean over examples is accumulated in sorted order so that reports
//! do not depend on the order of the test batch.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::attacks::{
    pgd_attack, run_attack_grid, AttackContext, AttackGrid, AttackSpec, Batch, Predictor, StatePredictor,
};
use crate::autodiff::Tensor;
use crate::defense::{early_state_select, DefenseConfig, DefendedPredictor, EarlyStateSelection};
use crate::deq::{solve, DeqModel, DynamicsTrace, SolverConfig};
use crate::error::{Error, Result};
use crate::scalar::Scalar;

fn paired<T>(a: &[T], b: &[T], op: &str) -> Result<()> {
    if a.len() != b.len() || a.is_empty() {
        return Err(Error::Contract(format!(
            "{op} needs equal non-empty lists, got {} and {}",
            a.len(),
            b.len()
        )));
    }
    Ok(())
}

/// Percentage of pairs whose clean entropy is strictly below the perturbed
/// one.
pub fn metric_p<T: Scalar>(clean: &[T], adv: &[T]) -> Result<f64> {
    paired(clean, adv, "metric_p")?;
    let n = clean.iter().zip(adv).filter(|(c, a)| c < a).count();
    Ok(100.0 * n as f64 / clean.len() as f64)
}

/// Like [`metric_p`] but counting ties: `adv ≥ clean`.
pub fn metric_p_geq<T: Scalar>(clean: &[T], adv: &[T]) -> Result<f64> {
    paired(clean, adv, "metric_p_geq")?;
    let n = clean.iter().zip(adv).filter(|(c, a)| a >= c).count();
    Ok(100.0 * n as f64 / clean.len() as f64)
}

/// Mean of `H(clean) − H(adv)`.
pub fn metric_dh<T: Scalar>(clean: &[T], adv: &[T]) -> Result<f64> {
    paired(clean, adv, "metric_dh")?;
    let diffs: Vec<f64> = clean
        .iter()
        .zip(adv)
        .map(|(&c, &a)| c.to_f64_lossy() - a.to_f64_lossy())
        .collect();
    Ok(ordered_mean(&diffs))
}

/// Mean summed in a canonical order (by `|v|`, then sign), so permuting the
/// input leaves the result unchanged and negating every entry negates it
/// exactly.
pub fn ordered_mean(values: &[f64]) -> f64 {
    if values.is_empty() {
        return f64::NAN;
    }
    let mut v = values.to_vec();
    v.sort_by(|a, b| a.abs().total_cmp(&b.abs()).then(a.total_cmp(b)));
    let mut pos = 0.0;
    let mut neg = 0.0;
    for x in v {
        if x >= 0.0 {
            pos += x;
        } else {
            neg += -x;
        }
    }
    (pos - neg) / values.len() as f64
}

/// `‖z̃^[t] − z^[t]‖₂ / max(‖z^[t]‖₂, 1e-12)` per state.
pub fn dynamics_deviation<T: Scalar>(clean: &DynamicsTrace<T>, adv: &DynamicsTrace<T>) -> Result<Vec<T>> {
    if clean.states.len() != adv.states.len() {
        return Err(Error::Contract(format!(
            "traces have {} and {} states",
            clean.states.len(),
            adv.states.len()
        )));
    }
    let floor = T::lit(1e-12);
    Ok(clean
        .states
        .iter()
        .zip(&adv.states)
        .map(|(z, za)| za.dist2(z) / z.norm2().max(floor))
        .collect())
}

/// Terms of the perturbation decomposition at one transition `t → t+1`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DecompositionTerm {
    /// `‖z̃^[t+1] − z^[t+1]‖`.
    pub deviation: f64,
    /// `‖f(z̃^[t]; x+Δx) − f(z̃^[t]; x)‖`: perturbation entering from the input.
    pub from_input: f64,
    /// `‖f(z̃^[t]; x) − f(z^[t]; x)‖`: deviation accumulated in the state.
    pub accumulated: f64,
}

impl DecompositionTerm {
    pub fn holds(&self, slack: f64) -> bool {
        self.deviation <= self.from_input + self.accumulated + slack
    }
}

/// Decomposition terms recomputed from two stored traces produced by
/// undamped plain iteration (`z^[t+1] = f(z^[t]; x)`).
pub fn perturbation_decomposition<T: Scalar>(
    model: &DeqModel<T>,
    clean: &DynamicsTrace<T>,
    adv: &DynamicsTrace<T>,
    x: &Tensor<T>,
    x_adv: &Tensor<T>,
) -> Result<Vec<DecompositionTerm>> {
    if clean.states.len() != adv.states.len() {
        return Err(Error::Contract("traces of different length".into()));
    }
    (0..clean.states.len() - 1)
        .map(|t| {
            let (z, zt) = (&clean.states[t], &adv.states[t]);
            let f_adv = model.layer_apply(zt, x_adv)?;
            let f_mixed = model.layer_apply(zt, x)?;
            let f_clean = model.layer_apply(z, x)?;
            Ok(DecompositionTerm {
                deviation: adv.states[t + 1].dist2(&clean.states[t + 1]).to_f64_lossy(),
                from_input: f_adv.dist2(&f_mixed).to_f64_lossy(),
                accumulated: f_mixed.dist2(&f_clean).to_f64_lossy(),
            })
        })
        .collect()
}

/// Per-state summary of a batch of entropy sequences.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EntropyProfile {
    pub mean: Vec<f64>,
    pub q10: Vec<f64>,
    pub q50: Vec<f64>,
    pub q90: Vec<f64>,
}

/// Nearest-rank percentile of sorted data: the `⌈p/100 · n⌉`-th smallest.
pub fn nearest_rank(sorted: &[f64], p: f64) -> f64 {
    let n = sorted.len();
    let rank = ((p / 100.0) * n as f64).ceil() as usize;
    sorted[rank.clamp(1, n) - 1]
}

pub fn entropy_profile<T: Scalar>(traces: &[DynamicsTrace<T>]) -> Result<EntropyProfile> {
    let rows: Vec<Vec<f64>> = traces
        .iter()
        .map(|tr| tr.entropies.iter().map(|h| h.to_f64_lossy()).collect())
        .collect();
    profile_of(&rows)
}

/// Profile of equal-length per-example sequences.
pub fn profile_of(rows: &[Vec<f64>]) -> Result<EntropyProfile> {
    let len = rows
        .first()
        .ok_or_else(|| Error::Contract("entropy profile of an empty batch".into()))?
        .len();
    if rows.iter().any(|r| r.len() != len) {
        return Err(Error::Contract("traces with different lengths".into()));
    }
    let mut p = EntropyProfile {
        mean: Vec::with_capacity(len),
        q10: Vec::with_capacity(len),
        q50: Vec::with_capacity(len),
        q90: Vec::with_capacity(len),
    };
    for t in 0..len {
        let mut col: Vec<f64> = rows.iter().map(|r| r[t]).collect();
        p.mean.push(if col.len() == 1 { col[0] } else { ordered_mean(&col) });
        col.sort_by(f64::total_cmp);
        p.q10.push(nearest_rank(&col, 10.0));
        p.q50.push(nearest_rank(&col, 50.0));
        p.q90.push(nearest_rank(&col, 90.0));
    }
    Ok(p)
}

/// Which state P and ΔH are measured at.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum EntropyState {
    #[default]
    Final,
    Prediction,
}

/// Everything [`build_eval_report`] needs besides the model and data.
#[derive(Debug, Clone)]
pub struct EvalConfig<T> {
    pub ctx: AttackContext<T>,
    /// Base of the ready-made attack and of the grid.
    pub attack: AttackSpec,
    pub defense: Option<DefenseConfig>,
    /// Fixed prediction state; `None` selects it on the validation batch
    /// (falling back to `N` without one).
    pub prediction_state: Option<usize>,
    pub entropy_state: EntropyState,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GridPoint {
    pub i: usize,
    pub k_a: usize,
    pub lambda: f64,
}

impl GridPoint {
    pub fn of(spec: &AttackSpec) -> Self {
        Self {
            i: spec.state,
            k_a: spec.unroll,
            lambda: spec.damping,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridCell {
    #[serde(flatten)]
    pub point: GridPoint,
    pub accuracy: f64,
    pub failed: usize,
}

/// Entropy statistics of one attack against the clean inputs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EntropyComparison {
    pub p_percent: f64,
    pub delta_h: f64,
    pub clean_profile: EntropyProfile,
    pub adv_profile: EntropyProfile,
    /// Mean relative state deviation per `t`.
    pub deviation_profile: Vec<f64>,
    /// Mean final relative residual of clean and attacked dynamics.
    pub final_rel_error_clean: f64,
    pub final_rel_error_adv: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DefenseReport {
    pub config: DefenseConfig,
    pub clean_accuracy: f64,
    pub readymade_pgd_accuracy: f64,
    pub grid_min_accuracy: f64,
    pub grid_argmin: GridPoint,
    /// Mean `H(z^[N])` under the strongest undefended grid attack, without
    /// and with the defense.
    pub mean_final_entropy_undefended: f64,
    pub mean_final_entropy_defended: f64,
    /// Mean per-state entropy change (defended − undefended) under that
    /// attack.
    pub entropy_change_profile: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub examples: usize,
    pub prediction_state: usize,
    pub early_state: Option<EarlyStateSelection>,
    pub clean_accuracy: f64,
    pub readymade_pgd_accuracy: f64,
    pub grid_min_accuracy: f64,
    pub grid_argmin: GridPoint,
    pub grid: Vec<GridCell>,
    /// Clean accuracy at states `1..=N`.
    pub per_state_clean_accuracy: Vec<f64>,
    /// Accuracy at states `1..=N` under the strongest grid attack.
    pub per_state_adv_accuracy: Vec<f64>,
    /// P and ΔH under the strongest grid attack.
    pub grid_entropy: EntropyComparison,
    /// P and ΔH under the ready-made attack.
    pub readymade_entropy: EntropyComparison,
    pub defense: Option<DefenseReport>,
    pub failed_solves: usize,
    pub table2_violation: bool,
    pub notes: Vec<String>,
}

fn traces_for<T: Scalar>(
    model: &DeqModel<T>,
    inputs: &[Tensor<T>],
    solver: &SolverConfig,
) -> Vec<Option<DynamicsTrace<T>>> {
    inputs.par_iter().map(|x| solve(model, x, solver).ok()).collect()
}

fn per_state_accuracy<T: Scalar>(traces: &[Option<DynamicsTrace<T>>], labels: &[usize], n: usize) -> Vec<f64> {
    let ok: Vec<(&DynamicsTrace<T>, usize)> = traces
        .iter()
        .zip(labels)
        .filter_map(|(t, &y)| t.as_ref().map(|t| (t, y)))
        .collect();
    (1..=n)
        .map(|t| {
            if ok.is_empty() {
                return 0.0;
            }
            ok.iter().filter(|(tr, y)| tr.prediction(t) == *y).count() as f64 / ok.len() as f64
        })
        .collect()
}

fn compare_entropy<T: Scalar>(
    model: &DeqModel<T>,
    clean: &[Option<DynamicsTrace<T>>],
    adv: &[Option<DynamicsTrace<T>>],
    inputs: &[Tensor<T>],
    adv_inputs: &[Tensor<T>],
    at: usize,
) -> Result<EntropyComparison> {
    let mut hc = Vec::new();
    let mut ha = Vec::new();
    let mut rows_c = Vec::new();
    let mut rows_a = Vec::new();
    let mut dev_rows = Vec::new();
    let mut res_c = Vec::new();
    let mut res_a = Vec::new();
    for k in 0..clean.len() {
        let (Some(c), Some(a)) = (&clean[k], &adv[k]) else {
            continue;
        };
        hc.push(c.entropies[at]);
        ha.push(a.entropies[at]);
        rows_c.push(c.entropies.iter().map(|h| h.to_f64_lossy()).collect());
        rows_a.push(a.entropies.iter().map(|h| h.to_f64_lossy()).collect());
        dev_rows.push(dynamics_deviation(c, a)?.iter().map(|v| v.to_f64_lossy()).collect::<Vec<_>>());
        let n = c.states.len() - 1;
        res_c.push(crate::deq::rel_error(model, &c.states[n], &inputs[k])?.value.to_f64_lossy());
        res_a.push(crate::deq::rel_error(model, &a.states[n], &adv_inputs[k])?.value.to_f64_lossy());
    }
    if hc.is_empty() {
        return Err(Error::Contract("no example survived both forward solves".into()));
    }
    let deviation = profile_of(&dev_rows)?.mean;
    Ok(EntropyComparison {
        p_percent: metric_p(&hc, &ha)?,
        delta_h: metric_dh(&hc, &ha)?,
        clean_profile: profile_of(&rows_c)?,
        adv_profile: profile_of(&rows_a)?,
        deviation_profile: deviation,
        final_rel_error_clean: ordered_mean(&res_c),
        final_rel_error_adv: ordered_mean(&res_a),
    })
}

fn grid_cells<T: Scalar>(grid: &AttackGrid<T>) -> Vec<GridCell> {
    grid.results
        .iter()
        .map(|r| GridCell {
            point: GridPoint::of(&r.spec),
            accuracy: r.accuracy(),
            failed: r.failed_count(),
        })
        .collect()
}

/// Runs clean evaluation, the ready-made attack, the full grid, the
/// optional defense, and the entropy diagnostics.
pub fn build_eval_report<T: Scalar>(
    model: &DeqModel<T>,
    test: &Batch<T>,
    val: Option<&Batch<T>>,
    cfg: &EvalConfig<T>,
) -> Result<EvalReport> {
    if test.is_empty() {
        return Err(Error::Contract("evaluation needs a non-empty test batch".into()));
    }
    let n = cfg.ctx.solver.iterations;
    let solver = &cfg.ctx.solver;
    let mut notes = Vec::new();

    let readymade = AttackSpec {
        kind: crate::attacks::AttackKind::ReadymadePgd,
        ..cfg.attack.clone()
    };
    let early_state = match (cfg.prediction_state, val) {
        (Some(s), _) if s < 1 || s > n => {
            return Err(Error::Index {
                context: "prediction state",
                index: s,
                len: n + 1,
            })
        }
        (Some(_), _) => None,
        (None, Some(v)) if !v.is_empty() => Some(early_state_select(model, v, &readymade, &cfg.ctx, None)?),
        (None, _) => None,
    };
    let prediction_state = cfg
        .prediction_state
        .or(early_state.as_ref().map(|e| e.state))
        .unwrap_or(n);
    let entropy_at = match cfg.entropy_state {
        EntropyState::Final => n,
        EntropyState::Prediction => prediction_state,
    };
    let predictor = StatePredictor {
        solver: solver.clone(),
        state: prediction_state,
    };

    let clean_traces = traces_for(model, &test.inputs, solver);
    let clean_tally = crate::attacks::evaluate(model, &test.inputs, &test.labels, &predictor)?;
    let ready = pgd_attack(model, test, &readymade, &cfg.ctx, &predictor)?;
    let grid = run_attack_grid(model, test, &cfg.attack, &cfg.ctx, &predictor)?;
    let strongest = grid.argmin();
    let grid_min = grid.min_accuracy();
    let table2_violation = grid_min > ready.accuracy();
    if table2_violation {
        notes.push(format!(
            "grid minimum {:.4} exceeds ready-made accuracy {:.4}",
            grid_min,
            ready.accuracy()
        ));
    }
    let adv_traces = traces_for(model, &strongest.adversarial_inputs, solver);
    let ready_traces = traces_for(model, &ready.adversarial_inputs, solver);
    let grid_entropy = compare_entropy(
        model,
        &clean_traces,
        &adv_traces,
        &test.inputs,
        &strongest.adversarial_inputs,
        entropy_at,
    )?;
    let readymade_entropy = compare_entropy(
        model,
        &clean_traces,
        &ready_traces,
        &test.inputs,
        &ready.adversarial_inputs,
        entropy_at,
    )?;
    let mut failed_solves = clean_tally.failed()
        + ready.failed_count()
        + grid.results.iter().map(|r| r.failed_count()).sum::<usize>();

    let defense = match &cfg.defense {
        Some(d) if d.enabled => {
            let dp = DefendedPredictor {
                solver: solver.clone(),
                defense: d.clone(),
                domain: cfg.ctx.domain.clone(),
                state: prediction_state,
            };
            let clean = crate::attacks::evaluate(model, &test.inputs, &test.labels, &dp)?;
            let ready_def = AttackGrid {
                results: vec![ready.clone()],
            }
            .reevaluate(model, &test.labels, &dp)?;
            let grid_def = grid.reevaluate(model, &test.labels, &dp)?;
            failed_solves += clean.failed()
                + ready_def.results[0].tally.failed()
                + grid_def.results.iter().map(|r| r.tally.failed()).sum::<usize>();
            let (h_plain, h_def, change) = defended_entropy(model, &strongest.adversarial_inputs, solver, d, &cfg.ctx)?;
            Some(DefenseReport {
                config: d.clone(),
                clean_accuracy: clean.accuracy(),
                readymade_pgd_accuracy: ready_def.results[0].accuracy(),
                grid_min_accuracy: grid_def.min_accuracy(),
                grid_argmin: GridPoint::of(&grid_def.argmin().spec),
                mean_final_entropy_undefended: h_plain,
                mean_final_entropy_defended: h_def,
                entropy_change_profile: change,
            })
        }
        _ => None,
    };

    Ok(EvalReport {
        examples: test.len(),
        prediction_state,
        early_state,
        clean_accuracy: clean_tally.accuracy(),
        readymade_pgd_accuracy: ready.accuracy(),
        grid_min_accuracy: grid_min,
        grid_argmin: GridPoint::of(&strongest.spec),
        grid: grid_cells(&grid),
        per_state_clean_accuracy: per_state_accuracy(&clean_traces, &test.labels, n),
        per_state_adv_accuracy: per_state_accuracy(&adv_traces, &test.labels, n),
        grid_entropy,
        readymade_entropy,
        defense,
        failed_solves,
        table2_violation,
        notes,
    })
}

/// Mean final entropy without and with the defense, and the mean per-state
/// entropy change, over the given (attacked) inputs.
pub fn defended_entropy<T: Scalar>(
    model: &DeqModel<T>,
    inputs: &[Tensor<T>],
    solver: &SolverConfig,
    defense: &DefenseConfig,
    ctx: &AttackContext<T>,
) -> Result<(f64, f64, Vec<f64>)> {
    let pairs: Vec<Option<(Vec<f64>, Vec<f64>)>> = inputs
        .par_iter()
        .map(|x| {
            let plain = solve(model, x, solver).ok()?;
            let def = crate::defense::entropy_reduction_solve(model, x, solver, defense, &ctx.domain).ok()?;
            Some((
                plain.entropies.iter().map(|h| h.to_f64_lossy()).collect(),
                def.trace.entropies.iter().map(|h| h.to_f64_lossy()).collect(),
            ))
        })
        .collect();
    let ok: Vec<_> = pairs.into_iter().flatten().collect();
    if ok.is_empty() {
        return Err(Error::Contract("no defended solve succeeded".into()));
    }
    let n = solver.iterations;
    let plain: Vec<f64> = ok.iter().map(|(p, _)| p[n]).collect();
    let def: Vec<f64> = ok.iter().map(|(_, d)| d[n]).collect();
    let change: Vec<Vec<f64>> = ok
        .iter()
        .map(|(p, d)| p.iter().zip(d).map(|(a, b)| b - a).collect())
        .collect();
    Ok((ordered_mean(&plain), ordered_mean(&def), profile_of(&change)?.mean))
}

/// Accuracy of `predictor` on clean data.
pub fn accuracy<T: Scalar, P: Predictor<T> + ?Sized>(
    model: &DeqModel<T>,
    batch: &Batch<T>,
    predictor: &P,
) -> Result<f64> {
    Ok(crate::attacks::evaluate(model, &batch.inputs, &batch.labels, predictor)?.accuracy())
}

/// One flat CSV row.
#[derive(Debug, Clone, PartialEq)]
pub struct CsvRow {
    pub metric: String,
    pub attack: String,
    pub point: Option<GridPoint>,
    pub value: f64,
}

pub const CSV_HEADER: &str = "metric,attack,i,k_a,lambda,value";

/// Renders a float with 17 significant digits.
pub fn fmt_f64(v: f64) -> String {
    if v.is_finite() {
        format!("{v:.16e}")
    } else {
        format!("{v}")
    }
}

impl CsvRow {
    pub fn render(&self) -> String {
        let (i, k, l) = match &self.point {
            Some(p) => (p.i.to_string(), p.k_a.to_string(), fmt_f64(p.lambda)),
            None => (String::new(), String::new(), String::new()),
        };
        format!("{},{},{},{},{},{}", self.metric, self.attack, i, k, l, fmt_f64(self.value))
    }

    pub fn parse(line: &str) -> Result<Self> {
        let f: Vec<&str> = line.split(',').collect();
        let bad = || Error::Contract(format!("malformed report row `{line}`"));
        if f.len() != 6 {
            return Err(bad());
        }
        let point = if f[2].is_empty() {
            None
        } else {
            Some(GridPoint {
                i: f[2].parse().map_err(|_| bad())?,
                k_a: f[3].parse().map_err(|_| bad())?,
                lambda: f[4].parse().map_err(|_| bad())?,
            })
        };
        Ok(Self {
            metric: f[0].to_string(),
            attack: f[1].to_string(),
            point,
            value: f[5].parse().map_err(|_| bad())?,
        })
    }
}

impl EvalReport {
    /// One row per (metric, attack) pair.
    pub fn csv_rows(&self) -> Vec<CsvRow> {
        let row = |metric: &str, attack: &str, point: Option<GridPoint>, value: f64| CsvRow {
            metric: metric.into(),
            attack: attack.into(),
            point,
            value,
        };
        let mut rows = vec![
            row("accuracy", "none", None, self.clean_accuracy),
            row("accuracy", "readymade_pgd", None, self.readymade_pgd_accuracy),
            row("grid_min_accuracy", "intermediate_pgd", Some(self.grid_argmin), self.grid_min_accuracy),
            row("p_percent", "intermediate_pgd", Some(self.grid_argmin), self.grid_entropy.p_percent),
            row("delta_h", "intermediate_pgd", Some(self.grid_argmin), self.grid_entropy.delta_h),
            row("p_percent", "readymade_pgd", None, self.readymade_entropy.p_percent),
            row("delta_h", "readymade_pgd", None, self.readymade_entropy.delta_h),
            row("failed_solves", "all", None, self.failed_solves as f64),
        ];
        for c in &self.grid {
            rows.push(row("accuracy", "intermediate_pgd", Some(c.point), c.accuracy));
        }
        if let Some(d) = &self.defense {
            rows.push(row("defended_accuracy", "none", None, d.clean_accuracy));
            rows.push(row("defended_accuracy", "readymade_pgd", None, d.readymade_pgd_accuracy));
            rows.push(row(
                "defended_grid_min_accuracy",
                "intermediate_pgd",
                Some(d.grid_argmin),
                d.grid_min_accuracy,
            ));
        }
        rows
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from(CSV_HEADER);
        s.push('\n');
        for r in self.csv_rows() {
            s.push_str(&r.render());
            s.push('\n');
        }
        s
    }
}
