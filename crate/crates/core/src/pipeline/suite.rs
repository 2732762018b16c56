use std::collections::BTreeMap;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::config::{Dataset, ExperimentConfig, HidingConfig};
use super::evaluate::{evaluate, EvalSettings, Evaluation, TrainedModel};
use super::train::{train, TrainOutcome};
use crate::error::{Error, Result};
use crate::numerics::PoolMode;

/// Epoch cap applied in quick mode.
pub const QUICK_EPOCHS: usize = 3;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Budget {
    Quick,
    #[default]
    Full,
}

/// One row of the comparison: overrides applied to the base config, or an
/// ensemble of other (non-ensemble) variants trained with the same seed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VariantSpec {
    pub name: String,
    #[serde(default)]
    pub hiding: Option<HidingConfig>,
    #[serde(default)]
    pub head: Option<PoolMode>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub ensemble: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SuiteConfig {
    pub base: ExperimentConfig,
    pub variants: Vec<VariantSpec>,
    #[serde(default)]
    pub budget: Budget,
}

impl SuiteConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }

    /// Resolved config of a non-ensemble variant.
    pub fn variant_config(&self, v: &VariantSpec) -> ExperimentConfig {
        let mut c = self.base.clone();
        c.name = v.name.clone();
        if let Some(h) = &v.hiding {
            c.hiding = h.clone();
        }
        if let Some(head) = v.head {
            c.network.head = head;
        }
        if self.budget == Budget::Quick {
            c.epochs = c.epochs.min(QUICK_EPOCHS);
        }
        c
    }

    pub fn validate(&self) -> Result<()> {
        self.base.validate()?;
        if self.variants.is_empty() {
            return Err(Error::Config("variants: need at least one".into()));
        }
        let mut seen = BTreeMap::new();
        for v in &self.variants {
            if seen.insert(v.name.as_str(), v).is_some() {
                return Err(Error::Config(format!("variants: duplicate name {:?}", v.name)));
            }
        }
        for v in &self.variants {
            for m in &v.ensemble {
                match seen.get(m.as_str()) {
                    None => {
                        return Err(Error::Config(format!(
                            "variants.{}: unknown ensemble member {m:?}",
                            v.name
                        )))
                    }
                    Some(mv) if !mv.ensemble.is_empty() => {
                        return Err(Error::Config(format!(
                            "variants.{}: ensemble member {m:?} is itself an ensemble",
                            v.name
                        )))
                    }
                    _ => {}
                }
            }
            if v.ensemble.is_empty() {
                self.variant_config(v)
                    .validate()
                    .map_err(|e| Error::Config(format!("variants.{}: {e}", v.name)))?;
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct MeanSd {
    pub mean: f64,
    /// Sample standard deviation; 0 for a single run.
    pub sd: f64,
    pub n: usize,
}

impl MeanSd {
    pub fn of(values: &[f64]) -> Option<Self> {
        if values.is_empty() {
            return None;
        }
        let n = values.len();
        let mean = values.iter().sum::<f64>() / n as f64;
        let sd = if n > 1 {
            (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64).sqrt()
        } else {
            0.0
        };
        Some(Self { mean, sd, n })
    }
}

/// Outcome of one (variant, seed) run.
#[derive(Debug, Clone)]
pub struct RunResult {
    pub variant: String,
    pub seed: u64,
    pub config: ExperimentConfig,
    /// `None` for ensemble rows.
    pub outcome: Option<TrainOutcome>,
    pub evaluation: Evaluation,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SuiteRow {
    pub variant: String,
    pub runs: usize,
    pub failures: Vec<String>,
    pub gt_known_loc: Option<MeanSd>,
    pub top1_loc: Option<MeanSd>,
    pub top1_clas: Option<MeanSd>,
    /// Temporal mAP (percent) per IoU threshold.
    pub map: Vec<(f64, MeanSd)>,
}

#[derive(Debug, Clone)]
pub struct SuiteReport {
    pub rows: Vec<SuiteRow>,
    pub runs: Vec<RunResult>,
}

impl SuiteReport {
    pub fn row(&self, variant: &str) -> Option<&SuiteRow> {
        self.rows.iter().find(|r| r.variant == variant)
    }

    /// Metrics in percent, mean and sd per column.
    pub fn to_csv(&self) -> String {
        let thresholds: Vec<f64> = self
            .rows
            .iter()
            .find(|r| !r.map.is_empty())
            .map(|r| r.map.iter().map(|m| m.0).collect())
            .unwrap_or_default();
        let mut s = String::from("variant,runs,failures");
        for col in ["gt_known_loc", "top1_loc", "top1_clas"] {
            s += &format!(",{col}_mean,{col}_sd");
        }
        for t in &thresholds {
            s += &format!(",map@{t}_mean,map@{t}_sd");
        }
        s.push('\n');
        let cell = |m: &Option<MeanSd>, scale: f64| match m {
            Some(m) => format!(",{:.4},{:.4}", m.mean * scale, m.sd * scale),
            None => ",,".into(),
        };
        for r in &self.rows {
            s += &format!("{},{},{}", r.variant, r.runs, r.failures.len());
            s += &cell(&r.gt_known_loc, 100.0);
            s += &cell(&r.top1_loc, 100.0);
            s += &cell(&r.top1_clas, 100.0);
            for t in &thresholds {
                let m = r.map.iter().find(|m| m.0 == *t).map(|m| m.1);
                s += &cell(&m, 1.0);
            }
            s.push('\n');
        }
        s
    }
}

fn summarize(variant: &str, runs: &[&RunResult], failures: Vec<String>) -> SuiteRow {
    let pick = |f: &dyn Fn(&Evaluation) -> Option<f64>| {
        MeanSd::of(&runs.iter().filter_map(|r| f(&r.evaluation)).collect::<Vec<_>>())
    };
    let thresholds: Vec<f64> = runs
        .iter()
        .find_map(|r| r.evaluation.temporal_report())
        .map(|t| t.thresholds.clone())
        .unwrap_or_default();
    let map = thresholds
        .iter()
        .enumerate()
        .filter_map(|(i, &t)| {
            pick(&|e: &Evaluation| e.temporal_report().map(|r| r.map[i])).map(|m| (t, m))
        })
        .collect();
    SuiteRow {
        variant: variant.to_string(),
        runs: runs.len(),
        failures,
        gt_known_loc: pick(&|e: &Evaluation| e.image_report().map(|r| r.overall.gt_known_loc)),
        top1_loc: pick(&|e: &Evaluation| e.image_report().map(|r| r.overall.top1_loc)),
        top1_clas: pick(&|e: &Evaluation| e.image_report().map(|r| r.overall.top1_clas)),
        map,
    }
}

/// Trains and evaluates every (variant, seed) pair, `jobs` at a time. A
/// failing run is recorded in its row and the suite carries on.
pub fn run_suite(cfg: &SuiteConfig, data: &Dataset, jobs: usize) -> Result<SuiteReport> {
    cfg.validate()?;
    let seeds = cfg.base.seeds.clone();
    let work: Vec<(&VariantSpec, u64)> = cfg
        .variants
        .iter()
        .filter(|v| v.ensemble.is_empty())
        .flat_map(|v| seeds.iter().map(move |&s| (v, s)))
        .collect();
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(jobs.max(1))
        .build()
        .map_err(|e| Error::InvalidArgument(format!("thread pool: {e}")))?;

    let run_one = |v: &VariantSpec, seed: u64| -> Result<RunResult> {
        let config = cfg.variant_config(v);
        let settings = EvalSettings::from_config(&config, data);
        let outcome = train(&config, data, seed, None)?;
        let model = TrainedModel::from_outcome(&outcome);
        let evaluation = evaluate(std::slice::from_ref(&model), data, &settings, None)?;
        Ok(RunResult {
            variant: v.name.clone(),
            seed,
            config,
            outcome: Some(outcome),
            evaluation,
        })
    };
    let results: Vec<(String, u64, Result<RunResult>)> = pool.install(|| {
        work.par_iter()
            .map(|&(v, s)| (v.name.clone(), s, run_one(v, s)))
            .collect()
    });

    let mut ok: Vec<RunResult> = Vec::new();
    let mut failed: BTreeMap<String, Vec<String>> = BTreeMap::new();
    for (name, seed, r) in results {
        match r {
            Ok(run) => ok.push(run),
            Err(e) => {
                log::error!("variant {name} seed {seed} failed: {e}");
                failed.entry(name).or_default().push(format!("seed {seed}: {e}"));
            }
        }
    }

    for v in cfg.variants.iter().filter(|v| !v.ensemble.is_empty()) {
        for &seed in &seeds {
            let members: Option<Vec<&RunResult>> = v
                .ensemble
                .iter()
                .map(|m| ok.iter().find(|r| r.variant == *m && r.seed == seed))
                .collect();
            let result = match members {
                None => Err(Error::InvalidArgument("an ensemble member failed".into())),
                Some(members) => {
                    let models: Vec<TrainedModel> = members
                        .iter()
                        .map(|r| TrainedModel::from_outcome(r.outcome.as_ref().expect("member trained")))
                        .collect();
                    let config = members[0].config.clone();
                    let settings = EvalSettings::from_config(&config, data);
                    pool.install(|| evaluate(&models, data, &settings, None)).map(|evaluation| RunResult {
                        variant: v.name.clone(),
                        seed,
                        config,
                        outcome: None,
                        evaluation,
                    })
                }
            };
            match result {
                Ok(run) => ok.push(run),
                Err(e) => {
                    log::error!("ensemble {} seed {seed} failed: {e}", v.name);
                    failed.entry(v.name.clone()).or_default().push(format!("seed {seed}: {e}"));
                }
            }
        }
    }

    let rows = cfg
        .variants
        .iter()
        .map(|v| {
            let runs: Vec<&RunResult> = ok.iter().filter(|r| r.variant == v.name).collect();
            summarize(&v.name, &runs, failed.remove(&v.name).unwrap_or_default())
        })
        .collect();
    ok.sort_by(|a, b| {
        let ia = cfg.variants.iter().position(|v| v.name == a.variant);
        let ib = cfg.variants.iter().position(|v| v.name == b.variant);
        ia.cmp(&ib).then(a.seed.cmp(&b.seed))
    });
    Ok(SuiteReport { rows, runs: ok })
}
