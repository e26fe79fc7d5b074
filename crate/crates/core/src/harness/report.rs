//! Report and plot-data emission.
//!
//! | file | columns |
//! |------|---------|
//! | `report.json` | full [`EvalReport`] |
//! | `report.csv` | `metric,attack,i,k_a,lambda,value` |
//! | `entropy_profile.tsv` | `t, mean_clean, mean_adv, q10, q50, q90` (quantiles of the attacked entropies) |
//! | `deviation_profile.tsv` | `t, mean_rel_diff` |
//! | `grid_heatmap.tsv` | `i, K_a, λ, accuracy` |
//!
//! The profile files use the strongest grid attack; `*_readymade.tsv`
//! carry the same columns for the ready-made attack. Floats are written
//! with 17 significant digits and a dot decimal separator.

use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::metrics::{fmt_f64, EntropyComparison, EvalReport, GridCell};
use crate::training::EpochRecord;

pub const HISTORY_HEADER: &str = "epoch,lr,train_loss,clean_acc,robust_acc";

pub fn history_row(r: &EpochRecord) -> String {
    format!(
        "{},{},{},{},{}",
        r.epoch,
        fmt_f64(r.lr),
        fmt_f64(r.train_loss),
        fmt_f64(r.clean_acc),
        fmt_f64(r.robust_acc)
    )
}

pub fn report_json(report: &EvalReport) -> String {
    let mut s = serde_json::to_string_pretty(report).expect("report serializes");
    s.push('\n');
    s
}

pub fn parse_report_json(text: &str) -> Result<EvalReport> {
    serde_json::from_str(text).map_err(|e| Error::Contract(format!("malformed report: {e}")))
}

pub fn entropy_profile_tsv(cmp: &EntropyComparison) -> String {
    let mut s = String::from("t\tmean_clean\tmean_adv\tq10\tq50\tq90\n");
    let (c, a) = (&cmp.clean_profile, &cmp.adv_profile);
    for t in 0..a.mean.len() {
        s.push_str(&format!(
            "{t}\t{}\t{}\t{}\t{}\t{}\n",
            fmt_f64(c.mean[t]),
            fmt_f64(a.mean[t]),
            fmt_f64(a.q10[t]),
            fmt_f64(a.q50[t]),
            fmt_f64(a.q90[t])
        ));
    }
    s
}

pub fn deviation_profile_tsv(cmp: &EntropyComparison) -> String {
    let mut s = String::from("t\tmean_rel_diff\n");
    for (t, v) in cmp.deviation_profile.iter().enumerate() {
        s.push_str(&format!("{t}\t{}\n", fmt_f64(*v)));
    }
    s
}

pub fn grid_heatmap_tsv(cells: &[GridCell]) -> String {
    let mut s = String::from("i\tK_a\tλ\taccuracy\n");
    for c in cells {
        s.push_str(&format!(
            "{}\t{}\t{}\t{}\n",
            c.point.i,
            c.point.k_a,
            fmt_f64(c.point.lambda),
            fmt_f64(c.accuracy)
        ));
    }
    s
}

pub(crate) fn write(path: &Path, contents: &str) -> Result<()> {
    std::fs::write(path, contents).map_err(|e| Error::io(path, e))
}

/// Writes every report artifact into `dir` and returns their paths.
pub fn emit_report(report: &EvalReport, dir: &Path) -> Result<Vec<PathBuf>> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let files = [
        ("report.json", report_json(report)),
        ("report.csv", report.to_csv()),
        ("entropy_profile.tsv", entropy_profile_tsv(&report.grid_entropy)),
        ("deviation_profile.tsv", deviation_profile_tsv(&report.grid_entropy)),
        ("entropy_profile_readymade.tsv", entropy_profile_tsv(&report.readymade_entropy)),
        ("deviation_profile_readymade.tsv", deviation_profile_tsv(&report.readymade_entropy)),
        ("grid_heatmap.tsv", grid_heatmap_tsv(&report.grid)),
    ];
    let mut paths = Vec::with_capacity(files.len());
    for (name, contents) in files {
        let p = dir.join(name);
        write(&p, &contents)?;
        paths.push(p);
    }
    Ok(paths)
}
