//! Experiment grids over trained checkpoints. Cells are independent jobs run
//! on a thread pool (size capped by `DTMERGE_THREADS`); rows are assembled in
//! cell order so reports do not depend on scheduling.

use std::path::PathBuf;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::checkpoint::Checkpoint;
use crate::dataset::OfflineDataset;
use crate::dt::{evaluate, DtModel, TrainConfig, DEFAULT_EPISODES};
use crate::merge::{average, incremental_merge, interpolate, l2_distance, merge_layer, perturb_attention, PerturbMode};
use crate::mff::{frozen_transfer, init_transfer, merge_freeze_finetune, size_report, CurveConfig, InitSource, MffConfig};
use crate::report::{pct_of, Baseline, EvalReport, ReportRow};
use crate::rng::derive_seed;
use crate::selector::LayerSelector;
use crate::transformer::layer_units;
use crate::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Experiment {
    SingleLayer,
    Incremental,
    AttentionSweep,
    Mff,
    Perturb,
    LmMerge,
    InitTransfer,
}

impl Experiment {
    pub fn name(self) -> &'static str {
        match self {
            Experiment::SingleLayer => "single_layer",
            Experiment::Incremental => "incremental",
            Experiment::AttentionSweep => "attention_sweep",
            Experiment::Mff => "mff",
            Experiment::Perturb => "perturb",
            Experiment::LmMerge => "lm_merge",
            Experiment::InitTransfer => "init_transfer",
        }
    }
}

impl std::str::FromStr for Experiment {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        serde_json::from_value(json!(s)).map_err(|_| Error::Config(format!("unknown experiment {s:?}")))
    }
}

/// Grid description, usually read from JSON. Empty lists fall back to the
/// experiment's defaults.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GridConfig {
    pub run_id: String,
    pub experiment: Experiment,
    /// Trained DT checkpoints, one per environment.
    pub models: Vec<PathBuf>,
    /// Datasets for experiments that train (`mff`, `lm_merge`, `init_transfer`), aligned with `models`.
    pub datasets: Vec<PathBuf>,
    pub coefficients: Vec<f32>,
    pub selectors: Vec<String>,
    pub perturb_modes: Vec<String>,
    pub episodes: usize,
    pub target_multiplier: f32,
    pub seed: u64,
    pub train: TrainConfig,
    pub epochs: usize,
}

impl Default for GridConfig {
    fn default() -> Self {
        GridConfig {
            run_id: "grid".into(),
            experiment: Experiment::AttentionSweep,
            models: Vec::new(),
            datasets: Vec::new(),
            coefficients: Vec::new(),
            selectors: Vec::new(),
            perturb_modes: Vec::new(),
            episodes: DEFAULT_EPISODES,
            target_multiplier: 1.0,
            seed: 0,
            train: TrainConfig {
                steps: 2_000,
                ..TrainConfig::default()
            },
            epochs: 5,
        }
    }
}

impl GridConfig {
    fn coefficients(&self) -> Vec<f32> {
        if !self.coefficients.is_empty() {
            return self.coefficients.clone();
        }
        match self.experiment {
            Experiment::SingleLayer => vec![0.5, 1.0],
            Experiment::Incremental => vec![0.5],
            _ => vec![0.0, 0.25, 0.5, 0.75, 1.0],
        }
    }

    fn selectors(&self) -> Result<Vec<LayerSelector>> {
        let names: Vec<&str> = if self.selectors.is_empty() {
            match self.experiment {
                Experiment::Mff => vec!["attention", "attention+mlp", "transformer"],
                _ => vec!["attention", "attention+mlp"],
            }
        } else {
            self.selectors.iter().map(String::as_str).collect()
        };
        names.into_iter().map(str::parse).collect()
    }

    fn perturb_modes(&self) -> Result<Vec<PerturbMode>> {
        if self.perturb_modes.is_empty() {
            return Ok(vec![
                PerturbMode::Random {
                    seed: crate::merge::DEFAULT_PERTURB_SEED,
                },
                PerturbMode::Identity,
                PerturbMode::Removed,
            ]);
        }
        self.perturb_modes.iter().map(|m| m.parse()).collect()
    }

    pub fn eval_seed(&self) -> u64 {
        derive_seed(self.seed, "eval")
    }
}

/// Thread pool sized by `DTMERGE_THREADS` (default: all cores).
pub fn thread_pool() -> Result<rayon::ThreadPool> {
    let threads = std::env::var("DTMERGE_THREADS")
        .ok()
        .and_then(|v| v.parse::<usize>().ok())
        .filter(|&n| n > 0)
        .unwrap_or(0);
    rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build()
        .map_err(|e| Error::Config(format!("thread pool: {e}")))
}

struct Slot {
    env: String,
    coordinate: String,
    p: Option<f64>,
}

type Job<'a> = Box<dyn Fn() -> Result<Vec<(f64, f64)>> + Send + Sync + 'a>;

/// One independent job producing one `(raw, normalized)` pair per slot.
struct Cell<'a> {
    slots: Vec<Slot>,
    job: Job<'a>,
}

fn slot(env: impl ToString, coordinate: impl Into<String>, p: Option<f32>) -> Slot {
    Slot {
        env: env.to_string(),
        coordinate: coordinate.into(),
        p: p.map(|v| v as f64),
    }
}

fn with_params(model: &DtModel, params: dtmerge_tensor::ParameterTree) -> DtModel {
    DtModel {
        arch: model.arch.clone(),
        binding: model.binding.clone(),
        params,
    }
}

/// `model` with the `sel` entries of its trunk taken from `merged`.
fn with_selection_of(model: &DtModel, merged: &dtmerge_tensor::ParameterTree, sel: &LayerSelector) -> DtModel {
    let mut params = model.params.clone();
    for name in sel.selected_names(merged, model.arch.n_layers) {
        params.set(&name, merged[name.as_str()].clone());
    }
    with_params(model, params)
}

fn load_all<T>(paths: &[PathBuf], load: impl Fn(&std::path::Path) -> Result<T>) -> Result<Vec<T>> {
    for p in paths {
        if !p.exists() {
            return Err(Error::MissingArtifact(p.clone()));
        }
    }
    paths.iter().map(|p| load(p)).collect()
}

fn pairs(n: usize) -> Vec<(usize, usize)> {
    (0..n).flat_map(|a| (a + 1..n).map(move |b| (a, b))).collect()
}

/// Runs the grid. Missing artifacts fail up front; a failing cell becomes a
/// row with an error marker and the remaining cells still run.
pub fn run_grid(config: &GridConfig) -> Result<EvalReport> {
    let models: Vec<DtModel> = load_all(&config.models, |p| Checkpoint::load(p)?.into_model())?;
    let datasets: Vec<OfflineDataset> = load_all(&config.datasets, OfflineDataset::load)?;
    let needs_data = matches!(
        config.experiment,
        Experiment::Mff | Experiment::LmMerge | Experiment::InitTransfer
    );
    if needs_data && datasets.len() != models.len() {
        return Err(Error::Config(format!(
            "{} needs one dataset per model ({} models, {} datasets)",
            config.experiment.name(),
            models.len(),
            datasets.len()
        )));
    }
    let min_models = if config.experiment == Experiment::Perturb { 1 } else { 2 };
    if models.len() < min_models {
        return Err(Error::Config(format!(
            "{} needs at least {min_models} models",
            config.experiment.name()
        )));
    }
    let pool = thread_pool()?;
    let eval_seed = config.eval_seed();
    let episodes = config.episodes;
    let mult = config.target_multiplier;
    let eval = move |m: &DtModel| -> Result<(f64, f64)> {
        let e = evaluate(m, mult, episodes, eval_seed)?;
        Ok((e.mean_return, e.normalized))
    };

    let baselines: Vec<Baseline> = pool.install(|| {
        models
            .par_iter()
            .map(|m| {
                let (raw, normalized) = eval(m)?;
                Ok(Baseline {
                    env: m.binding.env.to_string(),
                    raw_return: raw,
                    normalized,
                })
            })
            .collect::<Result<_>>()
    })?;

    let mut report = EvalReport {
        run_id: config.run_id.clone(),
        experiment: config.experiment.name().into(),
        seed: config.seed,
        baselines,
        ..Default::default()
    };
    let mut cells: Vec<Cell> = Vec::new();
    let coefficients = config.coefficients();

    match config.experiment {
        Experiment::SingleLayer => {
            let units = layer_units(models[0].arch.n_layers);
            for (a, b) in pairs(models.len()) {
                let d = l2_distance(&models[a].trunk(), &models[b].trunk())?;
                report.notes.insert(
                    format!("l2_distance/{}-{}", models[a].binding.env, models[b].binding.env),
                    serde_json::Value::Object(d.into_iter().map(|(k, v)| (k, json!(v))).collect()),
                );
            }
            for (t, s) in (0..models.len()).flat_map(|t| (0..models.len()).filter(move |&s| s != t).map(move |s| (t, s))) {
                for unit in &units {
                    for &p in &coefficients {
                        let (target, source) = (&models[t], &models[s]);
                        let sel = LayerSelector::unit(unit)?;
                        cells.push(Cell {
                            slots: vec![slot(target.binding.env, format!("{unit}<-{}", source.binding.env), Some(p))],
                            job: Box::new(move || {
                                let merged = merge_layer(&target.params, &source.params, &sel, p)?;
                                Ok(vec![eval(&with_params(target, merged))?])
                            }),
                        });
                    }
                }
            }
        }
        Experiment::Incremental => {
            for (t, s) in (0..models.len()).flat_map(|t| (0..models.len()).filter(move |&s| s != t).map(move |s| (t, s))) {
                for &p in &coefficients {
                    let (target, source) = (&models[t], &models[s]);
                    let steps = incremental_merge(&target.params, &source.params, p)?;
                    for (k, (_, tree)) in steps.into_iter().enumerate() {
                        cells.push(Cell {
                            slots: vec![slot(target.binding.env, format!("depth:{k}<-{}", source.binding.env), Some(p))],
                            job: Box::new(move || Ok(vec![eval(&with_params(target, tree.clone()))?])),
                        });
                    }
                }
            }
        }
        Experiment::AttentionSweep => {
            for (a, b) in pairs(models.len()) {
                for &lambda in &coefficients {
                    let (ma, mb) = (&models[a], &models[b]);
                    let pair = format!("attention:{}|{}", ma.binding.env, mb.binding.env);
                    cells.push(Cell {
                        slots: vec![
                            slot(ma.binding.env, pair.clone(), Some(lambda)),
                            slot(mb.binding.env, pair, Some(lambda)),
                        ],
                        job: Box::new(move || {
                            let merged = interpolate(&ma.trunk(), &mb.trunk(), lambda, &LayerSelector::AttentionAll)?;
                            let sel = LayerSelector::AttentionAll;
                            Ok(vec![eval(&with_selection_of(ma, &merged, &sel))?, eval(&with_selection_of(mb, &merged, &sel))?])
                        }),
                    });
                }
            }
        }
        Experiment::Perturb => {
            for m in &models {
                for mode in config.perturb_modes()? {
                    cells.push(Cell {
                        slots: vec![slot(m.binding.env, mode.to_string(), None)],
                        job: Box::new(move || {
                            let (arch, params) = perturb_attention(&m.arch, &m.params, mode)?;
                            Ok(vec![eval(&DtModel {
                                arch,
                                binding: m.binding.clone(),
                                params,
                            })?])
                        }),
                    });
                }
            }
        }
        Experiment::Mff | Experiment::LmMerge => {
            let mut groups = pairs(models.len())
                .into_iter()
                .map(|(a, b)| vec![a, b])
                .collect::<Vec<_>>();
            if models.len() >= 3 {
                groups.push((0..models.len()).collect());
            }
            for sel in config.selectors()? {
                for m in [2, models.len()] {
                    report
                        .notes
                        .insert(format!("size/{sel}/{m}"), json!(size_report(&sel, &models[0].arch, m)));
                }
                for group in &groups {
                    let names: Vec<String> = group.iter().map(|&i| models[i].binding.env.to_string()).collect();
                    let coef = 1.0 / group.len() as f32;
                    let members: Vec<&DtModel> = group.iter().map(|&i| &models[i]).collect();
                    let data: Vec<&OfflineDataset> = group.iter().map(|&i| &datasets[i]).collect();
                    let label = |kind: &str| format!("{sel} ({kind}) [{}]", names.join("+"));
                    let merge_slots = names.iter().map(|e| slot(e, label("M"), Some(coef))).collect();
                    let (sel_m, members_m) = (sel.clone(), members.clone());
                    cells.push(Cell {
                        slots: merge_slots,
                        job: Box::new(move || {
                            let trunks: Vec<_> = members_m.iter().map(|m| m.trunk()).collect();
                            let refs: Vec<_> = trunks.iter().collect();
                            let merged = average(&refs, &sel_m)?;
                            members_m.iter().map(|m| eval(&with_selection_of(m, &merged, &sel_m))).collect()
                        }),
                    });
                    let mff_slots = names.iter().map(|e| slot(e, label("MFF"), Some(coef))).collect();
                    let sel_f = sel.clone();
                    let mff = MffConfig {
                        finetune: config.train.clone(),
                        ..MffConfig::default()
                    };
                    cells.push(Cell {
                        slots: mff_slots,
                        job: Box::new(move || {
                            let out = merge_freeze_finetune(&members, &data, &sel_f, &mff)?;
                            (0..members.len()).map(|i| eval(&out.bundle.model(i)?)).collect()
                        }),
                    });
                }
            }
            if config.experiment == Experiment::Mff {
                for (s, source) in models.iter().enumerate() {
                    for (t, target) in datasets.iter().enumerate() {
                        if s == t {
                            continue;
                        }
                        let train = config.train.clone();
                        cells.push(Cell {
                            slots: vec![slot(target.env, format!("frozen transformer from {}", source.binding.env), None)],
                            job: Box::new(move || Ok(vec![eval(&frozen_transfer(source, target, &train)?)?])),
                        });
                    }
                }
            }
        }
        Experiment::InitTransfer => {
            let arch = models[0].arch.clone();
            let curve = CurveConfig {
                arch: arch.clone(),
                epochs: config.epochs,
                steps_per_epoch: config.train.steps / config.epochs.max(1) as u64,
                train: config.train.clone(),
                episodes,
                eval_seed,
            };
            for (t, target) in datasets.iter().enumerate() {
                let others: Vec<&DtModel> = models.iter().enumerate().filter(|(i, _)| *i != t).map(|(_, m)| m).collect();
                let trunks: Vec<_> = others.iter().map(|m| m.trunk()).collect();
                let refs: Vec<_> = trunks.iter().collect();
                let merged = average(&refs, &LayerSelector::TransformerAll)?;
                let mut sources = vec![("random".to_string(), InitSource::Random)];
                for m in &others {
                    sources.push((format!("from {}", m.binding.env), InitSource::Full(m.trunk())));
                }
                sources.push(("merged attention".into(), InitSource::AttentionOnly(merged.clone())));
                sources.push(("merged transformer".into(), InitSource::Full(merged)));
                for (name, source) in sources {
                    let curve = curve.clone();
                    let slots = (0..=config.epochs)
                        .map(|e| slot(target.env, format!("{name}@epoch{e}"), None))
                        .collect();
                    cells.push(Cell {
                        slots,
                        job: Box::new(move || {
                            Ok(init_transfer(&source, target, &curve)?
                                .into_iter()
                                .map(|p| (p.mean_return, p.normalized))
                                .collect())
                        }),
                    });
                }
            }
        }
    }

    let results: Vec<Result<Vec<(f64, f64)>>> = pool.install(|| cells.par_iter().map(|c| (c.job)()).collect());
    for (cell, result) in cells.iter().zip(results) {
        let values = result.and_then(|v| {
            if v.len() == cell.slots.len() {
                Ok(v)
            } else {
                Err(Error::Config(format!("cell returned {} values for {} slots", v.len(), cell.slots.len())))
            }
        });
        for (i, s) in cell.slots.iter().enumerate() {
            let mut row = ReportRow {
                experiment: config.experiment.name().into(),
                env: s.env.clone(),
                coordinate: s.coordinate.clone(),
                p_or_lambda: s.p,
                raw_return: None,
                normalized: None,
                pct_of_original: None,
                seed: config.seed,
                error: None,
            };
            match &values {
                Ok(v) => {
                    let (raw, norm) = v[i];
                    row.raw_return = Some(raw);
                    row.normalized = Some(norm);
                    row.pct_of_original = report.baseline(&s.env).map(|b| pct_of(norm, b.normalized));
                }
                Err(e) => row.error = Some(e.to_string()),
            }
            report.rows.push(row);
        }
    }
    if config.experiment == Experiment::SingleLayer {
        push_direction_means(&mut report, config);
    }
    Ok(report)
}

/// Appends one `env = "mean"` row per (layer unit, p) averaging every direction.
fn push_direction_means(report: &mut EvalReport, config: &GridConfig) {
    let mut groups: indexmap::IndexMap<(String, u64), Vec<&ReportRow>> = indexmap::IndexMap::new();
    for row in &report.rows {
        let unit = row.coordinate.split("<-").next().unwrap_or_default().to_string();
        let p = row.p_or_lambda.unwrap_or_default();
        groups.entry((unit, p.to_bits())).or_default().push(row);
    }
    let mean = |v: Vec<Option<f64>>| -> Option<f64> {
        let n = v.len() as f64;
        v.into_iter().sum::<Option<f64>>().map(|s| s / n)
    };
    let means: Vec<ReportRow> = groups
        .into_iter()
        .map(|((unit, p), rows)| {
            let failed = rows.iter().find_map(|r| r.error.clone());
            ReportRow {
                experiment: config.experiment.name().into(),
                env: "mean".into(),
                coordinate: unit,
                p_or_lambda: Some(f64::from_bits(p)),
                raw_return: None,
                normalized: mean(rows.iter().map(|r| r.normalized).collect()),
                pct_of_original: mean(rows.iter().map(|r| r.pct_of_original).collect()),
                seed: config.seed,
                error: failed,
            }
        })
        .collect();
    report.rows.extend(means);
}
