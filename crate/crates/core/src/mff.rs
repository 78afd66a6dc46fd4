//! Merge-Freeze-Finetune, frozen-transformer transfer, multi-task size
//! accounting and cross-environment initialization curves.

use std::collections::BTreeMap;
use std::ops::ControlFlow;
use std::path::{Path, PathBuf};

use dtmerge_tensor::ParameterTree;
use serde::{Deserialize, Serialize};

use crate::arch::ArchConfig;
use crate::checkpoint::{tree_hash, Checkpoint};
use crate::dataset::OfflineDataset;
use crate::dt::{evaluate, is_head_param, train, DtModel, EnvBinding, TrainConfig};
use crate::io::{read_file, write_atomic};
use crate::merge::average;
use crate::rng::{derive_seed, substream};
use crate::selector::LayerSelector;
use crate::transformer::{init_transformer, is_transformer_param, param_shapes};
use crate::{Error, Result};

/// Parameter sharing of a multi-task model that shares the selection.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SizeReport {
    pub selector: String,
    pub n_tasks: usize,
    pub total: usize,
    pub shared: usize,
    pub unique: usize,
    pub f_shared: f64,
    pub f_unique: f64,
    /// `100 * (f_shared + n_tasks * f_unique)`.
    pub size_percent: f64,
}

/// Transformer size of an `n_tasks` model sharing `sel`, relative to one
/// model's trunk. Input/output projections are not counted.
pub fn size_report(sel: &LayerSelector, arch: &ArchConfig, n_tasks: usize) -> SizeReport {
    let mut total = 0;
    let mut shared = 0;
    for (name, shape) in param_shapes(arch) {
        let n: usize = shape.iter().product();
        total += n;
        if sel.matches(&name, arch.n_layers) {
            shared += n;
        }
    }
    let unique = total - shared;
    let f_shared = shared as f64 / total as f64;
    let f_unique = unique as f64 / total as f64;
    SizeReport {
        selector: sel.to_string(),
        n_tasks,
        total,
        shared,
        unique,
        f_shared,
        f_unique,
        size_percent: 100.0 * (f_shared + n_tasks as f64 * f_unique),
    }
}

pub fn transformer_size_ratio(sel: &LayerSelector, arch: &ArchConfig, n_tasks: usize) -> f64 {
    size_report(sel, arch, n_tasks).size_percent
}

/// Unique parameters and binding of one task in a bundle.
#[derive(Clone, Debug)]
pub struct TaskPart {
    pub binding: EnvBinding,
    /// Unmerged trunk entries plus the task's heads.
    pub unique: ParameterTree,
}

#[derive(Clone, Debug)]
pub struct MultiTaskBundle {
    pub arch: ArchConfig,
    pub selector: LayerSelector,
    /// Merged, frozen entries shared by every task.
    pub shared: ParameterTree,
    pub tasks: Vec<TaskPart>,
    pub provenance: BTreeMap<String, String>,
}

impl MultiTaskBundle {
    /// Full model of task `i` (shared entries first, in canonical trunk order).
    pub fn model(&self, i: usize) -> Result<DtModel> {
        let part = self
            .tasks
            .get(i)
            .ok_or_else(|| Error::Config(format!("bundle has no task {i}")))?;
        let mut params = ParameterTree::new();
        for (name, _) in param_shapes(&self.arch) {
            let t = self
                .shared
                .get(&name)
                .or_else(|| part.unique.get(&name))
                .ok_or_else(|| Error::Incompatible(vec![format!("{name}: missing from bundle")]))?;
            params.insert(name, t.clone())?;
        }
        for (name, t) in part.unique.iter().filter(|(n, _)| !is_transformer_param(n)) {
            params.insert(name, t.clone())?;
        }
        Ok(DtModel {
            arch: self.arch.clone(),
            binding: part.binding.clone(),
            params,
        })
    }

    /// Distinct parameters held by the bundle's trunks (shared counted once).
    pub fn transformer_params(&self) -> usize {
        self.shared.num_params()
            + self
                .tasks
                .iter()
                .map(|t| t.unique.filter(is_transformer_param).num_params())
                .sum::<usize>()
    }

    /// Writes `shared.dtmc`, `task{i}.dtmc` and `manifest.json` under `dir`.
    pub fn save(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        let shared = Checkpoint::new(self.arch.clone(), None, self.shared.clone())
            .with_provenance("role", "shared")
            .with_provenance("selector", self.selector.to_string());
        shared.save(&dir.join("shared.dtmc"))?;
        let mut tasks = Vec::new();
        for (i, part) in self.tasks.iter().enumerate() {
            let file = format!("task{i}.dtmc");
            let ckpt = Checkpoint::new(self.arch.clone(), Some(part.binding.clone()), part.unique.clone())
                .with_provenance("role", "task");
            ckpt.save(&dir.join(&file))?;
            tasks.push(ManifestTask {
                env: part.binding.env.to_string(),
                file,
                content_hash: ckpt.content_hash(),
            });
        }
        let manifest = BundleManifest {
            selector: self.selector.to_string(),
            shared: ManifestTask {
                env: String::new(),
                file: "shared.dtmc".into(),
                content_hash: shared.content_hash(),
            },
            tasks,
            provenance: self.provenance.clone(),
        };
        write_atomic(&dir.join("manifest.json"), &serde_json::to_vec_pretty(&manifest)?)
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let manifest: BundleManifest = serde_json::from_slice(&read_file(&dir.join("manifest.json"))?)?;
        let load = |entry: &ManifestTask| -> Result<Checkpoint> {
            let path: PathBuf = dir.join(&entry.file);
            let ckpt = Checkpoint::load(&path)?;
            if ckpt.content_hash() != entry.content_hash {
                return Err(Error::Corrupt(format!("{} does not match the bundle manifest", path.display())));
            }
            Ok(ckpt)
        };
        let shared = load(&manifest.shared)?;
        let tasks = manifest
            .tasks
            .iter()
            .map(|t| {
                let c = load(t)?;
                Ok(TaskPart {
                    binding: c
                        .binding
                        .ok_or_else(|| Error::Corrupt(format!("{} lacks an env binding", t.file)))?,
                    unique: c.params,
                })
            })
            .collect::<Result<_>>()?;
        Ok(MultiTaskBundle {
            arch: shared.arch,
            selector: manifest.selector.parse()?,
            shared: shared.params,
            tasks,
            provenance: manifest.provenance,
        })
    }
}

#[derive(Serialize, Deserialize)]
struct ManifestTask {
    env: String,
    file: String,
    content_hash: String,
}

#[derive(Serialize, Deserialize)]
struct BundleManifest {
    selector: String,
    shared: ManifestTask,
    tasks: Vec<ManifestTask>,
    provenance: BTreeMap<String, String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MffConfig {
    pub finetune: TrainConfig,
    /// Steps between content-hash audits of the frozen selection.
    pub audit_every: u64,
}

impl Default for MffConfig {
    fn default() -> Self {
        MffConfig {
            finetune: TrainConfig {
                steps: 2_000,
                ..TrainConfig::default()
            },
            audit_every: 500,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HashAudit {
    pub task: usize,
    pub step: u64,
    pub hash: String,
    pub matches: bool,
}

pub struct MffOutcome {
    pub bundle: MultiTaskBundle,
    /// Hash of the merged selection when it was frozen.
    pub shared_hash: String,
    pub audits: Vec<HashAudit>,
}

fn check_compatible(models: &[&DtModel]) -> Result<()> {
    if models.len() < 2 {
        return Err(Error::Config(format!("merging needs at least 2 models, got {}", models.len())));
    }
    let arch = &models[0].arch;
    if let Some(m) = models.iter().find(|m| &m.arch != arch) {
        return Err(Error::Incompatible(vec![format!(
            "{} has architecture {:?}, expected {:?}",
            m.binding.env, m.arch, arch
        )]));
    }
    Ok(())
}

/// Model restricted to its trunk and DT heads (drops auxiliary heads such as the LM head).
fn dt_only(model: &DtModel) -> DtModel {
    DtModel {
        arch: model.arch.clone(),
        binding: model.binding.clone(),
        params: model.params.filter(|n| is_transformer_param(n) || is_head_param(n)),
    }
}

/// Merges the selection of every model with equal weights `1/m`, freezes it,
/// and finetunes each task's remaining parameters on its own dataset.
///
/// With an empty selection nothing is merged and the models come back unchanged.
pub fn merge_freeze_finetune(
    models: &[&DtModel],
    datasets: &[&OfflineDataset],
    sel: &LayerSelector,
    config: &MffConfig,
) -> Result<MffOutcome> {
    check_compatible(models)?;
    if datasets.len() != models.len() {
        return Err(Error::Config(format!(
            "{} datasets for {} models",
            datasets.len(),
            models.len()
        )));
    }
    for (m, d) in models.iter().zip(datasets) {
        if m.binding.env != d.env {
            return Err(Error::Config(format!("model for {} paired with {} data", m.binding.env, d.env)));
        }
    }
    let arch = models[0].arch.clone();
    let trunks: Vec<ParameterTree> = models.iter().map(|m| m.trunk()).collect();
    let shared = if sel.selected_names(&trunks[0], arch.n_layers).is_empty() {
        ParameterTree::new()
    } else {
        let refs: Vec<&ParameterTree> = trunks.iter().collect();
        sel.select(&average(&refs, sel)?, arch.n_layers)
    };
    let shared_hash = tree_hash(&shared);
    let frozen = |n: &str| shared.contains(n);
    let mut audits = Vec::new();
    let mut tasks = Vec::with_capacity(models.len());
    for (i, (model, ds)) in models.iter().zip(datasets).enumerate() {
        let mut m = dt_only(model);
        for (name, t) in shared.iter() {
            m.params.set(name, t.clone());
        }
        if !shared.is_empty() && config.finetune.steps > 0 {
            let finetune = TrainConfig {
                seed: derive_seed(config.finetune.seed, &format!("mff/task{i}")),
                ..config.finetune.clone()
            };
            let every = config.audit_every.max(1);
            train(&mut m, ds, &finetune, &frozen, |step, _, m| {
                if step % every == 0 || step == finetune.steps {
                    let hash = tree_hash(&sel.select(&m.params, arch.n_layers));
                    let ok = hash == shared_hash;
                    audits.push(HashAudit {
                        task: i,
                        step,
                        hash,
                        matches: ok,
                    });
                    if !ok {
                        return Err(Error::Corrupt(format!("task {i}: frozen parameters changed by step {step}")));
                    }
                }
                Ok(ControlFlow::Continue(()))
            })?;
        }
        tasks.push(TaskPart {
            binding: m.binding.clone(),
            unique: m.params.filter(|n| !shared.contains(n)),
        });
    }
    let mut provenance = BTreeMap::new();
    provenance.insert("finetune_steps".into(), config.finetune.steps.to_string());
    provenance.insert("coefficient".into(), format!("1/{}", models.len()));
    provenance.insert(
        "sources".into(),
        models.iter().map(|m| m.binding.env.to_string()).collect::<Vec<_>>().join(","),
    );
    Ok(MffOutcome {
        bundle: MultiTaskBundle {
            arch,
            selector: sel.clone(),
            shared,
            tasks,
            provenance,
        },
        shared_hash,
        audits,
    })
}

/// Copies `source`'s whole trunk into a fresh model for `target`'s environment,
/// freezes it and trains only the heads.
pub fn frozen_transfer(source: &DtModel, target: &OfflineDataset, config: &TrainConfig) -> Result<DtModel> {
    let binding = EnvBinding::from_dataset(target);
    let mut model = DtModel::with_trunk(
        source.arch.clone(),
        binding,
        &source.trunk(),
        derive_seed(config.seed, "transfer-heads"),
    )?;
    train(&mut model, target, config, &is_transformer_param, |_, _, _| Ok(ControlFlow::Continue(())))?;
    Ok(model)
}

/// Where the trunk of an initialization-transfer run comes from.
#[derive(Clone, Debug)]
pub enum InitSource {
    Random,
    /// Every trunk entry from this tree.
    Full(ParameterTree),
    /// Attention entries from this tree, everything else freshly initialized.
    AttentionOnly(ParameterTree),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CurvePoint {
    pub epoch: usize,
    pub step: u64,
    pub mean_return: f64,
    pub normalized: f64,
}

#[derive(Clone, Debug)]
pub struct CurveConfig {
    pub arch: ArchConfig,
    pub epochs: usize,
    pub steps_per_epoch: u64,
    pub train: TrainConfig,
    pub episodes: usize,
    pub eval_seed: u64,
}

/// Trains a fresh-headed model from `init` and evaluates before training and
/// after every epoch.
pub fn init_transfer(init: &InitSource, target: &OfflineDataset, config: &CurveConfig) -> Result<Vec<CurvePoint>> {
    let arch = &config.arch;
    let seed = config.train.seed;
    let mut trunk = init_transformer(arch, &mut substream(seed, "transfer-trunk"))?;
    match init {
        InitSource::Random => {}
        InitSource::Full(t) => trunk = t.filter(is_transformer_param),
        InitSource::AttentionOnly(t) => {
            for name in LayerSelector::AttentionAll.selected_names(t, arch.n_layers) {
                trunk.set(&name, t[name.as_str()].clone());
            }
        }
    }
    let binding = EnvBinding::from_dataset(target);
    let mut model = DtModel::with_trunk(arch.clone(), binding, &trunk, derive_seed(seed, "transfer-heads"))?;
    let mut curve = Vec::with_capacity(config.epochs + 1);
    let mut record = |epoch: usize, step: u64, model: &DtModel| -> Result<()> {
        let e = evaluate(model, 1.0, config.episodes, config.eval_seed)?;
        curve.push(CurvePoint {
            epoch,
            step,
            mean_return: e.mean_return,
            normalized: e.normalized,
        });
        Ok(())
    };
    record(0, 0, &model)?;
    let per_epoch = config.steps_per_epoch.max(1);
    let cfg = TrainConfig {
        steps: per_epoch * config.epochs as u64,
        ..config.train.clone()
    };
    train(&mut model, target, &cfg, &|_| false, |step, _, m| {
        if step % per_epoch == 0 {
            record((step / per_epoch) as usize, step, m)?;
        }
        Ok(ControlFlow::Continue(()))
    })?;
    Ok(curve)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn size_ratio_endpoints() {
        let arch = ArchConfig::default();
        assert_eq!(transformer_size_ratio(&LayerSelector::None, &arch, 2), 200.0);
        assert_eq!(transformer_size_ratio(&LayerSelector::TransformerAll, &arch, 2), 100.0);
        let r = size_report(&LayerSelector::AttentionAll, &arch, 2);
        assert_eq!(r.shared + r.unique, r.total);
        assert_eq!(r.total, 595_072);
    }
}
