//! Ablation sweeps: one short training run plus held-out evaluation per configuration.

use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use texdiff_core::consistency::LossReport;
use texdiff_core::grad::{synth_scenes, train_toy, TrainRun};
use texdiff_core::metrics::{MetricsConfig, MetricsReport};
use texdiff_core::model::forward;
use texdiff_core::Result;

use crate::config::{RunConfig, SweepParam, SweepSpec};

/// Held-out scenes are generated from `seed + EVAL_SEED_OFFSET`.
pub const EVAL_SEED_OFFSET: u64 = 1_000_000;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub value: String,
    pub config: RunConfig,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub error: Option<String>,
    /// Training losses after the last update.
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub losses: Option<LossReport>,
    /// Mean metrics over the held-out scenes.
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub metrics: Option<MetricsReport>,
    pub wall_ms: f64,
}

impl SweepRow {
    pub fn ok(&self) -> bool {
        self.error.is_none()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepTable {
    pub parameter: SweepParam,
    pub rows: Vec<SweepRow>,
}

impl SweepTable {
    pub fn failures(&self) -> usize {
        self.rows.iter().filter(|r| !r.ok()).count()
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("value,status,l_sc,l_seg,l_total,mae,f_beta_max,miou,wall_ms\n");
        let num = |v: Option<f64>| v.map(|x| format!("{x:.6}")).unwrap_or_default();
        for r in &self.rows {
            let status = match &r.error {
                None => "ok".to_string(),
                Some(e) => format!("\"error: {}\"", e.replace('"', "'")),
            };
            let l = r.losses.as_ref();
            let m = r.metrics.as_ref();
            out.push_str(&format!(
                "{},{},{},{},{},{},{},{},{:.1}\n",
                r.value,
                status,
                num(l.map(|l| l.l_sc)),
                num(l.map(|l| l.l_seg)),
                num(l.map(|l| l.l_total)),
                num(m.map(|m| m.mae)),
                num(m.map(|m| m.f_beta_max)),
                num(m.and_then(|m| m.miou)),
                r.wall_ms
            ));
        }
        out
    }
}

/// Trains `cfg` on synthetic scenes and scores it on held-out ones.
pub fn run_config(cfg: &RunConfig) -> Result<(TrainRun, MetricsReport)> {
    let train = cfg.train_config()?;
    let run = train_toy(&train)?;
    let scenes = synth_scenes(
        cfg.seed.wrapping_add(EVAL_SEED_OFFSET),
        train.n_scenes,
        train.size,
    )?;
    let mut reports = Vec::with_capacity(scenes.len());
    for sc in &scenes {
        let out = forward(
            &sc.rgb,
            sc.depth.tensor(),
            Some(&sc.mask),
            &run.params,
            &train.model,
        )?;
        reports.push(MetricsReport::binary(
            &out.prediction.probabilities,
            &sc.mask,
            MetricsConfig::default(),
        )?);
    }
    let metrics = MetricsReport::mean(&reports)?;
    Ok((run, metrics))
}

fn run_row(spec: &SweepSpec, value: &str) -> SweepRow {
    let start = Instant::now();
    let mut row = SweepRow {
        value: value.to_string(),
        config: spec.base.clone(),
        error: None,
        losses: None,
        metrics: None,
        wall_ms: 0.0,
    };
    match spec.parameter.apply(&spec.base, value) {
        Ok(cfg) => {
            row.config = cfg;
            match run_config(&row.config) {
                Ok((run, metrics)) => {
                    row.losses = Some(*run.last());
                    row.metrics = Some(metrics);
                }
                Err(e) => row.error = Some(e.to_string()),
            }
        }
        Err(e) => row.error = Some(e.to_string()),
    }
    row.wall_ms = start.elapsed().as_secs_f64() * 1e3;
    row
}

/// One row per value, in order. Rows run one at a time unless `parallel > 1`;
/// a failing row is recorded and the sweep continues.
pub fn run_sweep(spec: &SweepSpec, parallel: usize) -> SweepTable {
    let rows = if parallel > 1 {
        match rayon::ThreadPoolBuilder::new()
            .num_threads(parallel)
            .build()
        {
            Ok(pool) => pool.install(|| spec.values.par_iter().map(|v| run_row(spec, v)).collect()),
            Err(_) => spec.values.iter().map(|v| run_row(spec, v)).collect(),
        }
    } else {
        spec.values.iter().map(|v| run_row(spec, v)).collect()
    };
    SweepTable {
        parameter: spec.parameter,
        rows,
    }
}
