use std::collections::BTreeMap;
use std::path::Path;

use hg_analytics::AnalyticError;
use hg_analytics::sts::{self, StsConfig};
use hg_analytics::tug::{self, AccelerometerTrace, TugConfig, TugModel, TugPrediction};
use hg_analytics::phq8;
use hg_core::model::{Dataset, Datapoint, TestKind};
use hg_core::payload::{AccelDocument, PoseDocument};
use hg_core::{DatapointId, HgError, SubjectId};
use hg_store::Job;
use serde_json::Value;

/// One datapoint of a claimed job with its payload bytes resolved.
#[derive(Debug, Clone)]
pub struct Item {
    pub datapoint: Datapoint,
    pub bytes: Vec<u8>,
}

#[derive(Debug, Clone)]
pub struct JobInput {
    pub job: Job,
    pub dataset: Dataset,
    pub items: Vec<Item>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ResultDoc {
    pub datapoint_id: DatapointId,
    pub body: Value,
}

/// A pure transformation from a job's payloads to result documents.
///
/// Implementations must be deterministic: the same input yields the same
/// bodies. An error fails the whole job.
pub trait Analytic: Send + Sync {
    fn run(&self, input: &JobInput) -> Result<Vec<ResultDoc>, AnalyticError>;
}

impl<F> Analytic for F
where
    F: Fn(&JobInput) -> Result<Vec<ResultDoc>, AnalyticError> + Send + Sync,
{
    fn run(&self, input: &JobInput) -> Result<Vec<ResultDoc>, AnalyticError> {
        self(input)
    }
}

fn schema_err(dp: &Datapoint, e: HgError) -> AnalyticError {
    AnalyticError::Schema(format!("datapoint {}: {}", dp.datapoint_id, e.message))
}

#[derive(Debug, Clone, Copy, Default)]
pub struct Phq8Analytic;

impl Analytic for Phq8Analytic {
    fn run(&self, input: &JobInput) -> Result<Vec<ResultDoc>, AnalyticError> {
        input
            .items
            .iter()
            .map(|it| {
                let (_, result) = phq8::score_document(&it.bytes)?;
                Ok(ResultDoc {
                    datapoint_id: it.datapoint.datapoint_id.clone(),
                    body: result.to_body(),
                })
            })
            .collect()
    }
}

#[derive(Debug, Clone, Default)]
pub struct TugAnalytic {
    pub cfg: TugConfig,
    pub model: TugModel,
}

impl TugAnalytic {
    pub fn with_model_file(path: impl AsRef<Path>) -> Result<Self, AnalyticError> {
        Ok(Self {
            cfg: TugConfig::default(),
            model: TugModel::load(path)?,
        })
    }
}

impl Analytic for TugAnalytic {
    /// Every datapoint's body carries the mean over all of that subject's
    /// predictions in the dataset, which is one test on one day.
    fn run(&self, input: &JobInput) -> Result<Vec<ResultDoc>, AnalyticError> {
        let mut per_item: Vec<Vec<TugPrediction>> = Vec::with_capacity(input.items.len());
        let mut by_subject: BTreeMap<&SubjectId, Vec<f64>> = BTreeMap::new();
        for it in &input.items {
            let doc = AccelDocument::parse(&it.bytes).map_err(|e| schema_err(&it.datapoint, e))?;
            let preds = tug::analyze_trace(&AccelerometerTrace::from(doc), &self.cfg, &self.model)?;
            by_subject
                .entry(&it.datapoint.subject_id)
                .or_default()
                .extend(preds.iter().map(|p| p.tug_seconds));
            per_item.push(preds);
        }
        let test_id = &input.dataset.test_id;
        Ok(input
            .items
            .iter()
            .zip(per_item)
            .map(|(it, preds)| {
                let subject = &it.datapoint.subject_id;
                let mean = tug::daily_summary(subject, test_id, &by_subject[subject]).mean;
                ResultDoc {
                    datapoint_id: it.datapoint.datapoint_id.clone(),
                    body: tug::result_body(&preds, mean),
                }
            })
            .collect())
    }
}

#[derive(Debug, Clone, Copy, Default)]
pub struct StsAnalytic {
    pub cfg: StsConfig,
}

impl Analytic for StsAnalytic {
    fn run(&self, input: &JobInput) -> Result<Vec<ResultDoc>, AnalyticError> {
        input
            .items
            .iter()
            .map(|it| {
                let doc = PoseDocument::parse(&it.bytes).map_err(|e| schema_err(&it.datapoint, e))?;
                let result = sts::analyze_pose(&doc, &self.cfg, None)?;
                Ok(ResultDoc {
                    datapoint_id: it.datapoint.datapoint_id.clone(),
                    body: result.to_body(),
                })
            })
            .collect()
    }
}

/// The shipped analytic for a worker kind, with default configuration.
pub fn standard_analytic(kind: TestKind) -> Box<dyn Analytic> {
    match kind {
        TestKind::Phq8 => Box::new(Phq8Analytic),
        TestKind::Tug => Box::new(TugAnalytic::default()),
        TestKind::SitToStand => Box::new(StsAnalytic::default()),
    }
}
