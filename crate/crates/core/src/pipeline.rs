//! Offline training in stage order, with one seed driving every step.

use std::collections::BTreeMap;

use crate::classifier::{init_classifier, train_classifier, ClassifierParams};
use crate::config::PipelineConfig;
use crate::data::Dataset;
use crate::discovery::{iterative_cluster, DiscoveryResult};
use crate::error::Result;
use crate::inference::RouterState;
use crate::neural::{TrainReport, TrainSpec};
use crate::router::{init_router, train_base, train_task_adapters, AdapterReport, RouterDims, RouterParams};

fn train_spec(cfg: &PipelineConfig, epochs: usize, label: &str) -> TrainSpec {
    TrainSpec {
        learning_rate: cfg.learning_rate,
        epochs,
        batch_size: cfg.batch_size,
        seed: cfg.seed,
        shuffle: true,
    }
    .derived(label)
}

pub fn discover(ds: &Dataset, cfg: &PipelineConfig) -> Result<DiscoveryResult> {
    iterative_cluster(ds, cfg)
}

/// Trains the task classifier on discovery labels; Others prompts are
/// all-negative examples.
pub fn fit_classifier(
    ds: &Dataset,
    result: &DiscoveryResult,
    cfg: &PipelineConfig,
    overrides: Option<&BTreeMap<usize, Vec<f64>>>,
) -> Result<(ClassifierParams, TrainReport)> {
    cfg.validate()?;
    let init = init_classifier(result, ds.prompt_dim(), cfg.classifier_dim, overrides, cfg.seed)?;
    let data: Vec<(&[f64], Option<usize>)> = ds
        .records()
        .iter()
        .map(|r| {
            let label = result.assignment.get(&r.prompt_id).copied().flatten();
            (r.prompt_embedding.as_slice(), label)
        })
        .collect();
    train_classifier(&init, &data, &train_spec(cfg, cfg.classifier_epochs, "train/classifier"))
}

#[derive(Debug, Clone)]
pub struct RouterTraining {
    pub router: RouterParams,
    pub base: TrainReport,
    pub adapters: AdapterReport,
}

/// Phase 1 (trunk and general heads) then phase 2 (task adapters).
pub fn fit_router(
    ds: &Dataset,
    result: &DiscoveryResult,
    clf: &ClassifierParams,
    cfg: &PipelineConfig,
) -> Result<RouterTraining> {
    cfg.validate()?;
    let dims = RouterDims {
        prompt_dim: ds.prompt_dim(),
        proj_dim: cfg.prompt_proj_dim,
        model_dim: cfg.model_embed_dim,
        hidden_dim: cfg.adapter_hidden_dim,
    };
    let init = init_router(ds.pool_size(), result, dims, cfg.seed)?;
    let data: Vec<(&[f64], &[f64])> = ds
        .records()
        .iter()
        .map(|r| (r.prompt_embedding.as_slice(), r.quality.as_slice()))
        .collect();
    let (trunk, base) = train_base(&init, &data, &train_spec(cfg, cfg.base_epochs, "train/base"))?;
    let (router, adapters) = train_task_adapters(
        &trunk,
        &data,
        clf,
        cfg.classifier_threshold,
        &train_spec(cfg, cfg.adapter_epochs, "train/adapters"),
    )?;
    Ok(RouterTraining { router, base, adapters })
}

#[derive(Debug, Clone)]
pub struct PipelineOutput {
    pub discovery: DiscoveryResult,
    pub classifier: ClassifierParams,
    pub classifier_report: TrainReport,
    pub training: RouterTraining,
}

impl PipelineOutput {
    pub fn into_state(self, cfg: &PipelineConfig, ds: &Dataset) -> Result<RouterState> {
        RouterState::new(
            cfg.clone(),
            ds.pool().to_vec(),
            self.discovery,
            self.classifier,
            self.training.router,
        )
    }
}

pub fn run_pipeline(
    ds: &Dataset,
    cfg: &PipelineConfig,
    overrides: Option<&BTreeMap<usize, Vec<f64>>>,
) -> Result<PipelineOutput> {
    let discovery = discover(ds, cfg)?;
    let (classifier, classifier_report) = fit_classifier(ds, &discovery, cfg, overrides)?;
    let training = fit_router(ds, &discovery, &classifier, cfg)?;
    Ok(PipelineOutput {
        discovery,
        classifier,
        classifier_report,
        training,
    })
}
