//! Upload payload schemas: `phq8/v1`, `accel/v1`, `pose2d/v1`, the upload
//! envelope, and the CSV-to-pose converter used for fixture authoring.
//!
//! Every parser here sees untrusted device input and must reject, never
//! panic on, malformed bytes.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{HgError, Result};
use crate::ids::{OccurrenceId, SubjectId, TestId};
use crate::time::Timestamp;

pub const PHQ8_SCHEMA: &str = "phq8/v1";
pub const ACCEL_SCHEMA: &str = "accel/v1";
pub const POSE_SCHEMA: &str = "pose2d/v1";

pub const MID_SHOULDER: &str = "mid_shoulder";
pub const MID_HIP: &str = "mid_hip";

fn json<'a, T: Deserialize<'a>>(bytes: &'a [u8], schema: &str) -> Result<T> {
    serde_json::from_slice(bytes).map_err(|e| HgError::schema(format!("{schema}: {e}")))
}

fn expect_schema(got: &str, want: &str) -> Result<()> {
    if got == want {
        Ok(())
    } else {
        Err(HgError::schema(format!("schema is {got:?}, expected {want:?}")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Phq8Item {
    pub question: u8,
    pub answer: u8,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Phq8Document {
    pub schema: String,
    pub subject_id: SubjectId,
    pub occurrence_id: OccurrenceId,
    pub completed_at: Timestamp,
    pub responses: Vec<Phq8Item>,
}

impl Phq8Document {
    pub fn parse(bytes: &[u8]) -> Result<Self> {
        let doc: Self = json(bytes, PHQ8_SCHEMA)?;
        doc.check()?;
        Ok(doc)
    }

    /// Exactly eight items, questions 1..=8 strictly ascending, answers 0..=3.
    pub fn check(&self) -> Result<()> {
        expect_schema(&self.schema, PHQ8_SCHEMA)?;
        if self.responses.len() != 8 {
            return Err(HgError::schema(format!(
                "phq8/v1: expected 8 responses, got {}",
                self.responses.len()
            )));
        }
        for (i, item) in self.responses.iter().enumerate() {
            if usize::from(item.question) != i + 1 {
                return Err(HgError::schema(format!(
                    "phq8/v1: response {} has question {}, expected {}",
                    i,
                    item.question,
                    i + 1
                )));
            }
            if item.answer > 3 {
                return Err(HgError::schema(format!(
                    "phq8/v1: question {} answer {} outside 0..=3",
                    item.question, item.answer
                )));
            }
        }
        Ok(())
    }

    pub fn answers(&self) -> [u8; 8] {
        let mut out = [0u8; 8];
        for (slot, item) in out.iter_mut().zip(&self.responses) {
            *slot = item.answer;
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AccelDocument {
    pub schema: String,
    pub subject_id: SubjectId,
    pub device_id: String,
    pub sample_rate_hz: f64,
    pub start_time: Timestamp,
    pub units: String,
    pub samples: Vec<[f64; 3]>,
}

impl AccelDocument {
    pub fn parse(bytes: &[u8]) -> Result<Self> {
        let doc: Self = json(bytes, ACCEL_SCHEMA)?;
        doc.check()?;
        Ok(doc)
    }

    pub fn check(&self) -> Result<()> {
        expect_schema(&self.schema, ACCEL_SCHEMA)?;
        if !(self.sample_rate_hz.is_finite() && self.sample_rate_hz > 0.0) {
            return Err(HgError::schema("accel/v1: sample_rate_hz must be > 0"));
        }
        if self.units != "m/s2" {
            return Err(HgError::schema(format!(
                "accel/v1: units must be \"m/s2\", got {:?}",
                self.units
            )));
        }
        if self.samples.iter().flatten().any(|v| !v.is_finite()) {
            return Err(HgError::schema("accel/v1: non-finite sample"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PoseFrame {
    pub t: f64,
    /// Keypoint name → `[x px, y px, confidence]`, y growing downward.
    pub keypoints: BTreeMap<String, [f64; 3]>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PoseDocument {
    pub schema: String,
    pub fps: f64,
    pub frames: Vec<PoseFrame>,
}

impl PoseDocument {
    pub fn parse(bytes: &[u8]) -> Result<Self> {
        let doc: Self = json(bytes, POSE_SCHEMA)?;
        doc.check()?;
        Ok(doc)
    }

    pub fn check(&self) -> Result<()> {
        expect_schema(&self.schema, POSE_SCHEMA)?;
        if !(self.fps.is_finite() && self.fps > 0.0) {
            return Err(HgError::schema("pose2d/v1: fps must be > 0"));
        }
        let mut prev = f64::NEG_INFINITY;
        for (i, f) in self.frames.iter().enumerate() {
            if !f.t.is_finite() || f.t <= prev {
                return Err(HgError::schema(format!(
                    "pose2d/v1: frame {i} time {} is not strictly increasing",
                    f.t
                )));
            }
            prev = f.t;
            for (name, [x, y, conf]) in &f.keypoints {
                if !(x.is_finite() && y.is_finite()) {
                    return Err(HgError::schema(format!(
                        "pose2d/v1: frame {i} keypoint {name} has non-finite coordinates"
                    )));
                }
                if !(0.0..=1.0).contains(conf) {
                    return Err(HgError::schema(format!(
                        "pose2d/v1: frame {i} keypoint {name} confidence {conf} outside [0,1]"
                    )));
                }
            }
        }
        Ok(())
    }
}

/// Converts a `t,shoulder_y,hip_y` CSV (header optional) into a pose
/// document with full-confidence keypoints at x = 0.
pub fn pose_from_csv(text: &str, fps: f64) -> Result<PoseDocument> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(false)
        .trim(csv::Trim::All)
        .comment(Some(b'#'))
        .from_reader(text.as_bytes());
    let mut frames = Vec::new();
    for (line, record) in reader.records().enumerate() {
        let record = record.map_err(|e| HgError::schema(format!("csv: {e}")))?;
        if record.len() != 3 {
            return Err(HgError::schema(format!(
                "csv line {}: expected 3 columns, got {}",
                line + 1,
                record.len()
            )));
        }
        let parsed: std::result::Result<Vec<f64>, _> =
            record.iter().map(str::parse::<f64>).collect();
        let values = match parsed {
            Ok(v) => v,
            Err(_) if line == 0 => continue,
            Err(e) => {
                return Err(HgError::schema(format!("csv line {}: {e}", line + 1)));
            }
        };
        let keypoints = BTreeMap::from([
            (MID_SHOULDER.to_owned(), [0.0, values[1], 1.0]),
            (MID_HIP.to_owned(), [0.0, values[2], 1.0]),
        ]);
        frames.push(PoseFrame {
            t: values[0],
            keypoints,
        });
    }
    if frames.is_empty() {
        return Err(HgError::schema("csv: no data rows"));
    }
    let doc = PoseDocument {
        schema: POSE_SCHEMA.to_owned(),
        fps,
        frames,
    };
    doc.check()?;
    Ok(doc)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case", deny_unknown_fields)]
pub enum UploadPayload {
    Scalar { value: f64 },
    Text { text: String },
    File { media_type: String, data_b64: String },
}

/// What a device sends for one completed test.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct UploadEnvelope {
    pub occurrence_id: OccurrenceId,
    pub test_id: TestId,
    pub idempotency_key: String,
    pub collected_at: Timestamp,
    /// Device clock minus server clock, from device metadata.
    #[serde(default)]
    pub clock_offset_ms: i64,
    pub payload: UploadPayload,
}

impl UploadEnvelope {
    pub fn parse(bytes: &[u8]) -> Result<Self> {
        let env: Self = json(bytes, "upload envelope")?;
        if env.idempotency_key.is_empty() || env.idempotency_key.len() > 200 {
            return Err(HgError::validation("idempotency_key must be 1..=200 bytes"));
        }
        Ok(env)
    }
}
