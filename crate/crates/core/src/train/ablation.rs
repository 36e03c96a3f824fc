//! The four module-switch configurations trained on one corpus and seed,
//! compared at a fixed IoU and along a threshold sweep.

use std::fmt::Write as _;
use std::path::Path;

use serde::Serialize;

use super::config::TrainConfig;
use super::corpus::Sample;
use super::infer::{infer, InferConfig};
use super::trainer::{train, LogRecord};
use crate::error::Result;
use crate::eval::{format_pr_csv, CorpusEval, PrPoint};
use crate::network::Detector;
use crate::nn::ParamStore;

/// `(name, enable_fdr, enable_cla)` in table order.
pub const ABLATION_ROWS: [(&str, bool, bool); 4] = [
    ("baseline", false, false),
    ("+FDR", true, false),
    ("+CLA", false, true),
    ("+FDR+CLA", true, true),
];

pub const REPORT_IOU: f64 = 0.5;

/// Runs inference over `samples` and accumulates counts on `grid`.
pub fn evaluate_corpus(
    det: &Detector,
    store: &ParamStore,
    samples: &[Sample],
    cfg: &InferConfig,
    grid: &[f64],
) -> Result<Vec<PrPoint>> {
    let mut acc = CorpusEval::new(grid.to_vec());
    for s in samples {
        let r = infer(det, store, &s.image, cfg)?;
        let polys: Vec<_> = r.detections.into_iter().map(|d| d.polygon).collect();
        acc.add_image(&polys, &s.annots);
    }
    Ok(acc.curve())
}

#[derive(Clone, Debug, Serialize)]
pub struct AblationRow {
    pub name: String,
    pub enable_fdr: bool,
    pub enable_cla: bool,
    /// Scores at [`REPORT_IOU`].
    pub precision: f64,
    pub recall: f64,
    pub f_score: f64,
    /// Median total loss over the last tenth of training.
    pub final_loss: f64,
    pub seconds: f64,
    pub curve: Vec<PrPoint>,
}

fn tail_median(log: &[LogRecord]) -> f64 {
    let k = (log.len() / 10).max(1);
    let mut v: Vec<f64> = log[log.len().saturating_sub(k)..].iter().map(|r| r.loss.total).collect();
    v.sort_by(|a, b| a.total_cmp(b));
    v.get(v.len() / 2).copied().unwrap_or(f64::NAN)
}

/// Trains every row of [`ABLATION_ROWS`] from `base` and evaluates on
/// `eval`. `grid` must contain [`REPORT_IOU`]. With `out`, each row's PR
/// curve, the table and a JSON summary are written there.
pub fn run_ablation(
    base: &TrainConfig,
    train_set: &[Sample],
    eval_set: &[Sample],
    grid: &[f64],
    out: Option<&Path>,
    mut progress: impl FnMut(&str, &LogRecord),
) -> Result<Vec<AblationRow>> {
    let at = grid
        .iter()
        .position(|&t| (t - REPORT_IOU).abs() < 1e-9)
        .ok_or_else(|| crate::error::Error::Config(format!("IoU grid lacks {REPORT_IOU}")))?;
    let mut rows = Vec::new();
    for (name, fdr, cla) in ABLATION_ROWS {
        let mut cfg = base.clone();
        cfg.model = cfg.model.with_modules(fdr, cla);
        let t = std::time::Instant::now();
        let run = train(cfg, train_set, None, |r| progress(name, r))?;
        let tr = &run.trainer;
        let curve = evaluate_corpus(&tr.detector, &tr.store, eval_set, &tr.config.infer, grid)?;
        let p = curve[at];
        rows.push(AblationRow {
            name: name.to_string(),
            enable_fdr: fdr,
            enable_cla: cla,
            precision: p.precision,
            recall: p.recall,
            f_score: p.f_score,
            final_loss: tail_median(&run.log),
            seconds: t.elapsed().as_secs_f64(),
            curve,
        });
    }
    if let Some(dir) = out {
        std::fs::create_dir_all(dir)?;
        for r in &rows {
            let file = format!("pr_{}.csv", r.name.trim_start_matches('+').replace('+', "_").to_lowercase());
            std::fs::write(dir.join(file), format_pr_csv(&r.curve))?;
        }
        std::fs::write(dir.join("ablation.txt"), format_table(&rows))?;
        std::fs::write(dir.join("ablation.json"), serde_json::to_string_pretty(&rows)?)?;
    }
    Ok(rows)
}

/// Fixed-width comparison table; also reports the area under each PR
/// sweep (mean F over the grid).
pub fn format_table(rows: &[AblationRow]) -> String {
    let mut s = String::new();
    let _ = writeln!(s, "{:<10} {:>4} {:>4} {:>7} {:>7} {:>7} {:>7} {:>9} {:>8}", "config", "FDR", "CLA", "P", "R", "F", "meanF", "loss", "secs");
    for r in rows {
        let mean_f = r.curve.iter().map(|p| p.f_score).sum::<f64>() / r.curve.len().max(1) as f64;
        let yn = |b: bool| if b { "yes" } else { "no" };
        let _ = writeln!(
            s,
            "{:<10} {:>4} {:>4} {:>7.4} {:>7.4} {:>7.4} {:>7.4} {:>9.4} {:>8.1}",
            r.name,
            yn(r.enable_fdr),
            yn(r.enable_cla),
            r.precision,
            r.recall,
            r.f_score,
            mean_f,
            r.final_loss,
            r.seconds
        );
    }
    s
}
