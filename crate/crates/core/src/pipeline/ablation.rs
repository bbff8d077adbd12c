use std::fmt::Write as _;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use super::model::Model;
use super::train::{evaluate, Trainer};
use crate::config::ExperimentConfig;
use crate::data::{Dataset, Split};
use crate::error::Result;
use crate::metrics::MetricReport;

/// `(P, D, C)` toggles in table order: baseline, single components, pairs,
/// full model.
pub const ABLATION_ROWS: [(bool, bool, bool); 8] = [
    (false, false, false),
    (true, false, false),
    (false, true, false),
    (false, false, true),
    (true, true, false),
    (true, false, true),
    (false, true, true),
    (true, true, true),
];

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct AblationRow {
    pub row: usize,
    pub enable_p: bool,
    pub enable_d: bool,
    pub enable_c: bool,
    pub mean_pq: f64,
    pub trainable_params: usize,
    pub epochs_run: usize,
    pub seconds: f64,
    pub report: MetricReport,
}

pub fn ablation_configs(base: &ExperimentConfig) -> Vec<ExperimentConfig> {
    ABLATION_ROWS
        .iter()
        .map(|&(p, d, c)| ExperimentConfig {
            enable_p: p,
            enable_d: d,
            enable_c: c,
            ..base.clone()
        })
        .collect()
}

/// Trains each configuration from the same seed on the train split and
/// scores it on the test split.
pub fn run_ablation(base: &ExperimentConfig, data: &Dataset, mut on_row: impl FnMut(&AblationRow)) -> Result<Vec<AblationRow>> {
    let test = data.split(Split::Test);
    let mut rows = Vec::with_capacity(ABLATION_ROWS.len());
    for (i, cfg) in ablation_configs(base).into_iter().enumerate() {
        let start = Instant::now();
        let model = Model::new(&cfg)?;
        let trainable_params = model.store.iter().filter(|(_, p)| p.trainable).map(|(_, p)| p.value.numel()).sum();
        let mut trainer = Trainer::new(model);
        let history = trainer.fit(data, |_| true)?;
        let report = evaluate(&trainer.model, &test)?;
        let row = AblationRow {
            row: i + 1,
            enable_p: cfg.enable_p,
            enable_d: cfg.enable_d,
            enable_c: cfg.enable_c,
            mean_pq: report.mean_pq,
            trainable_params,
            epochs_run: history.len(),
            seconds: start.elapsed().as_secs_f64(),
            report,
        };
        on_row(&row);
        rows.push(row);
    }
    Ok(rows)
}

/// Markdown table with one row per configuration.
pub fn format_table(rows: &[AblationRow]) -> String {
    let mark = |b: bool| if b { "✓" } else { "–" };
    let mut s = String::from("| # | P | D | C | mean PQ | sem PQ | ins PQ | Dice | AJI | params |\n");
    s.push_str("|---|---|---|---|---|---|---|---|---|---|\n");
    for r in rows {
        let _ = writeln!(
            s,
            "| {} | {} | {} | {} | {:.4} | {:.4} | {:.4} | {:.4} | {:.4} | {} |",
            r.row,
            mark(r.enable_p),
            mark(r.enable_d),
            mark(r.enable_c),
            r.mean_pq,
            r.report.mean_pq_semantic,
            r.report.mean_pq_instance,
            r.report.mean_dice,
            r.report.binary_aji,
            r.trainable_params
        );
    }
    s
}
