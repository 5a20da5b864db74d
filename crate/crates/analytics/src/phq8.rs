//! PHQ-8 depression questionnaire scoring.
//!
//! Eight items, each answered 0 ("not at all") to 3 ("nearly every day")
//! for the past two weeks. The total (0..=24) is banded into five severity
//! categories. Scoring depends only on item indices; the text below is
//! shipped for clients that render the questionnaire.

use chrono::NaiveDate;
use hg_core::payload::Phq8Document;
use hg_core::{SubjectId, Timestamp};
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::AnalyticError;

pub const RESULT_SCHEMA: &str = "phq8.result/v1";

pub const QUESTIONS: [&str; 8] = [
    "Little interest or pleasure in doing things",
    "Feeling down, depressed, or hopeless",
    "Trouble falling or staying asleep, or sleeping too much",
    "Feeling tired or having little energy",
    "Poor appetite or overeating",
    "Feeling bad about yourself, or that you are a failure or have let yourself or your family down",
    "Trouble concentrating on things, such as reading the newspaper or watching television",
    "Moving or speaking so slowly that other people could have noticed, or the opposite: being so fidgety or restless that you have been moving around a lot more than usual",
];

pub const ANSWER_LABELS: [&str; 4] = [
    "Not at all",
    "Several days",
    "More than half the days",
    "Nearly every day",
];

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Phq8Category {
    None,
    Mild,
    Moderate,
    ModeratelySevere,
    Severe,
}

impl Phq8Category {
    /// Severity band of a total score: 0-4, 5-9, 10-14, 15-19, 20-24.
    pub fn from_total(total: u8) -> Self {
        match total {
            0..=4 => Phq8Category::None,
            5..=9 => Phq8Category::Mild,
            10..=14 => Phq8Category::Moderate,
            15..=19 => Phq8Category::ModeratelySevere,
            _ => Phq8Category::Severe,
        }
    }

    pub fn ordinal(self) -> u8 {
        self as u8
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Phq8Category::None => "none",
            Phq8Category::Mild => "mild",
            Phq8Category::Moderate => "moderate",
            Phq8Category::ModeratelySevere => "moderately_severe",
            Phq8Category::Severe => "severe",
        }
    }
}

/// A validated set of eight answers, item 1 first.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Phq8Response {
    answers: [u8; 8],
}

impl Phq8Response {
    pub fn new(answers: [u8; 8]) -> Result<Self, AnalyticError> {
        if let Some((i, a)) = answers.iter().enumerate().find(|(_, a)| **a > 3) {
            return Err(AnalyticError::Schema(format!(
                "question {} answer {a} outside 0..=3",
                i + 1
            )));
        }
        Ok(Self { answers })
    }

    pub fn answers(&self) -> [u8; 8] {
        self.answers
    }
}

impl TryFrom<&Phq8Document> for Phq8Response {
    type Error = AnalyticError;

    fn try_from(doc: &Phq8Document) -> Result<Self, Self::Error> {
        doc.check().map_err(|e| AnalyticError::Schema(e.message))?;
        Self::new(doc.answers())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Phq8Result {
    pub total_score: u8,
    pub category: Phq8Category,
    pub per_item: [u8; 8],
}

impl Phq8Result {
    pub fn to_body(&self) -> Value {
        json!({
            "schema": RESULT_SCHEMA,
            "total_score": self.total_score,
            "category": self.category,
            "per_item": self.per_item,
        })
    }

    pub fn from_body(body: &Value) -> Result<Self, AnalyticError> {
        if body.get("schema").and_then(Value::as_str) != Some(RESULT_SCHEMA) {
            return Err(AnalyticError::Schema("not a phq8.result/v1 body".into()));
        }
        serde_json::from_value(body.clone()).map_err(|e| AnalyticError::Schema(e.to_string()))
    }
}

pub fn score_phq8(response: &Phq8Response) -> Phq8Result {
    let total_score = response.answers.iter().sum();
    Phq8Result {
        total_score,
        category: Phq8Category::from_total(total_score),
        per_item: response.answers,
    }
}

/// Parses and scores one `phq8/v1` upload.
pub fn score_document(bytes: &[u8]) -> Result<(Phq8Document, Phq8Result), AnalyticError> {
    let doc = Phq8Document::parse(bytes).map_err(|e| AnalyticError::Schema(e.message))?;
    let response = Phq8Response::try_from(&doc)?;
    Ok((doc, score_phq8(&response)))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeriesPoint {
    pub completed_at: Timestamp,
    pub date: NaiveDate,
    pub total: u8,
    pub category: Phq8Category,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Phq8Series {
    pub subject_id: SubjectId,
    pub points: Vec<SeriesPoint>,
}

/// Longitudinal series for one subject, ascending by completion time.
/// Same-day completions are all kept.
pub fn phq8_series(subject_id: SubjectId, results: &[(Timestamp, Phq8Result)]) -> Phq8Series {
    let mut points: Vec<SeriesPoint> = results
        .iter()
        .map(|(at, r)| SeriesPoint {
            completed_at: *at,
            date: at.date(),
            total: r.total_score,
            category: r.category,
        })
        .collect();
    points.sort_by_key(|p| p.completed_at);
    Phq8Series { subject_id, points }
}
