use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{evaluate, report_table, MetricsReport, ModelPredictor, RunMeta, Table};
use crate::data::SampleWindow;
use crate::diffusion::ScheduleKind;
use crate::model::{ModelConfig, Variant};
use crate::training::{train, TrainConfig};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationGrid {
    pub variants: Vec<Variant>,
    pub k_grid: Vec<usize>,
    pub schedules: Vec<ScheduleKind>,
}

impl Default for AblationGrid {
    fn default() -> Self {
        Self { variants: Variant::ALL.to_vec(), k_grid: vec![200], schedules: vec![ScheduleKind::Linear] }
    }
}

impl AblationGrid {
    pub fn cells(&self) -> Vec<(Variant, usize, ScheduleKind)> {
        let mut out = Vec::new();
        for &v in &self.variants {
            for &k in &self.k_grid {
                for &s in &self.schedules {
                    out.push((v, k, s));
                }
            }
        }
        out
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationCell {
    pub variant: Variant,
    pub k: usize,
    pub schedule: ScheduleKind,
    pub reports: Vec<MetricsReport>,
    /// Per-epoch mean noise variance, one entry per epoch.
    pub sigma2: Vec<Vec<f64>>,
    pub error: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationResult {
    pub cells: Vec<AblationCell>,
}

impl AblationResult {
    pub fn table(&self) -> Table {
        let groups: Vec<(Vec<String>, Vec<MetricsReport>)> = self
            .cells
            .iter()
            .map(|c| {
                let status = c.error.clone().unwrap_or_else(|| "ok".into());
                (vec![c.variant.to_string(), c.k.to_string(), c.schedule.to_string(), status], c.reports.clone())
            })
            .collect();
        report_table(&["Variant", "K", "Schedule", "Status"], &groups)
    }
}

/// Trains and evaluates every cell of the grid. A failing cell is recorded
/// with its error and the remaining cells still run. With `out_dir`, each
/// cell trains into its own subdirectory.
pub fn ablation_run(
    base: &ModelConfig,
    train_config: &TrainConfig,
    grid: &AblationGrid,
    train_windows: &[SampleWindow],
    test_windows: &[SampleWindow],
    horizons_s: &[f64],
    eval_seed: u64,
    out_dir: Option<&Path>,
) -> AblationResult {
    let cells = grid
        .cells()
        .into_iter()
        .map(|(variant, k, schedule)| {
            let mut cfg = base.clone();
            cfg.variant = variant;
            cfg.diffusion.steps = k;
            cfg.diffusion.kind = schedule;
            let dir = out_dir.map(|d| d.join(format!("{variant}-k{k}-{schedule}")));
            let run = || -> crate::Result<(Vec<MetricsReport>, Vec<Vec<f64>>)> {
                let out = train(train_windows, &cfg, train_config, dir.as_deref())?;
                let meta = RunMeta {
                    scenario: train_config.scenario,
                    seed: eval_seed,
                    k,
                    schedule: schedule.to_string(),
                    variant: variant.to_string(),
                };
                let predictor = ModelPredictor { model: &out.model, seed: eval_seed, draws: 1 };
                let reports = evaluate(&predictor, test_windows, horizons_s, &meta, 1)?;
                Ok((reports, out.epochs.into_iter().map(|e| e.sigma2).collect()))
            };
            match run() {
                Ok((reports, sigma2)) => AblationCell { variant, k, schedule, reports, sigma2, error: None },
                Err(e) => AblationCell { variant, k, schedule, reports: Vec::new(), sigma2: Vec::new(), error: Some(e.to_string()) },
            }
        })
        .collect();
    AblationResult { cells }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate_idm_episodes, normalize_robust, window_samples, SynthesisSpec};
    use crate::denoiser::DenoiserConfig;
    use crate::encoder::EncoderConfig;
    use crate::interaction::InteractionConfig;
    use crate::model::DiffusionConfig;

    fn setup() -> (Vec<SampleWindow>, ModelConfig, TrainConfig) {
        let spec = SynthesisSpec { n: 3, horizon: 20, seed: 2, ..Default::default() };
        let windows = generate_idm_episodes(&spec)
            .unwrap()
            .iter()
            .flat_map(|e| window_samples(e, 6, 10, 4))
            .map(|w| normalize_robust(&w).unwrap())
            .collect();
        let cfg = ModelConfig {
            t_his: 6,
            t_fut: 10,
            encoder: EncoderConfig { hidden: 4, proj_width: 4, ..Default::default() },
            interaction: InteractionConfig { embed: 4, heads: 1, ffn: 4, stream_hidden: 4, ..Default::default() },
            denoiser: DenoiserConfig { channels: vec![2, 4], time_embed: 4, groups: 1, ..Default::default() },
            diffusion: DiffusionConfig { steps: 8, ..Default::default() },
            ..Default::default()
        };
        (windows, cfg, TrainConfig { epochs: 1, batch_size: 8, ..Default::default() })
    }

    #[test]
    fn single_cell_grid() {
        let (w, cfg, tc) = setup();
        let grid = AblationGrid { variants: vec![Variant::Full], k_grid: vec![8], schedules: vec![ScheduleKind::Linear] };
        let res = ablation_run(&cfg, &tc, &grid, &w, &w, &[0.5, 1.0], 1, None);
        assert_eq!(res.cells.len(), 1);
        assert!(res.cells[0].error.is_none());
        let table = res.table();
        assert_eq!(table.rows.len(), 1);
        assert_eq!(table.columns.len(), 4 + 8);
    }

    #[test]
    fn isotropic_variant_logs_unit_variance_and_failures_are_recorded() {
        let (w, cfg, tc) = setup();
        let grid = AblationGrid { variants: vec![Variant::NoNoiseScaling], k_grid: vec![8, 0], schedules: vec![ScheduleKind::Linear] };
        let res = ablation_run(&cfg, &tc, &grid, &w, &w, &[1.0], 1, None);
        let ok = &res.cells[0];
        assert!(ok.error.is_none());
        assert!(ok.sigma2.iter().flatten().all(|&s| s == 1.0));
        assert!(res.cells[1].error.is_some());
        assert_eq!(res.table().rows.len(), 2);
    }
}
