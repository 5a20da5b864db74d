use std::path::Path;

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use super::features::{FEATURE_COUNT, TugFeatures};
use crate::AnalyticError;

pub const DEFAULT_MODEL_ID: &str = "tug-linear-default";

/// `tug = c0 + c1 * mean_sd + c2 * p25_sd + c3 * p5_sd`
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LinearModel {
    pub c0: f64,
    pub c1: f64,
    pub c2: f64,
    pub c3: f64,
}

impl Default for LinearModel {
    fn default() -> Self {
        Self {
            c0: 0.0,
            c1: 20.0,
            c2: 0.0,
            c3: 0.0,
        }
    }
}

impl LinearModel {
    pub fn predict(&self, f: &TugFeatures) -> f64 {
        let sd = &f.step_durations;
        self.c0 + self.c1 * sd.mean + self.c2 * sd.p25 + self.c3 * sd.p5
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ForestParams {
    pub n_trees: usize,
    pub max_depth: usize,
    pub min_samples_leaf: usize,
    pub max_features: usize,
}

impl Default for ForestParams {
    fn default() -> Self {
        Self {
            n_trees: 60,
            max_depth: 10,
            min_samples_leaf: 2,
            max_features: 7,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Node {
    Split {
        feature: usize,
        threshold: f64,
        left: usize,
        right: usize,
    },
    Leaf {
        value: f64,
    },
}

/// Flat node list; the root is node 0.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tree {
    pub nodes: Vec<Node>,
}

impl Tree {
    pub fn predict(&self, x: &[f64; FEATURE_COUNT]) -> f64 {
        let mut i = 0;
        loop {
            match &self.nodes[i] {
                Node::Leaf { value } => return *value,
                Node::Split {
                    feature,
                    threshold,
                    left,
                    right,
                } => i = if x[*feature] <= *threshold { *left } else { *right },
            }
        }
    }

    fn check(&self) -> Result<(), AnalyticError> {
        let n = self.nodes.len();
        if n == 0 {
            return Err(AnalyticError::InvalidModel("empty tree".into()));
        }
        for (i, node) in self.nodes.iter().enumerate() {
            if let Node::Split {
                feature,
                left,
                right,
                threshold,
            } = node
            {
                // Children always follow their parent, which rules out cycles.
                if *feature >= FEATURE_COUNT
                    || *left <= i
                    || *right <= i
                    || *left >= n
                    || *right >= n
                    || !threshold.is_finite()
                {
                    return Err(AnalyticError::InvalidModel(format!("bad node {i}")));
                }
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Forest {
    pub params: ForestParams,
    pub trees: Vec<Tree>,
}

impl Forest {
    /// Bagged regression trees over all twenty features. Same inputs and
    /// seed give the same forest.
    pub fn fit(
        x: &[[f64; FEATURE_COUNT]],
        y: &[f64],
        params: ForestParams,
        seed: u64,
    ) -> Result<Self, AnalyticError> {
        if x.is_empty() || x.len() != y.len() {
            return Err(AnalyticError::EmptyInput("training set".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let trees = (0..params.n_trees.max(1))
            .map(|_| {
                let rows: Vec<usize> = (0..x.len()).map(|_| rng.random_range(0..x.len())).collect();
                let mut b = TreeBuilder {
                    x,
                    y,
                    params,
                    rng: &mut rng,
                    nodes: Vec::new(),
                };
                b.grow(rows, 0);
                Tree { nodes: b.nodes }
            })
            .collect();
        Ok(Self { params, trees })
    }

    pub fn predict(&self, x: &[f64; FEATURE_COUNT]) -> f64 {
        let sum: f64 = self.trees.iter().map(|t| t.predict(x)).sum();
        sum / self.trees.len() as f64
    }

    /// Number of splits on each feature across all trees.
    pub fn split_counts(&self) -> [usize; FEATURE_COUNT] {
        let mut counts = [0; FEATURE_COUNT];
        for node in self.trees.iter().flat_map(|t| &t.nodes) {
            if let Node::Split { feature, .. } = node {
                counts[*feature] += 1;
            }
        }
        counts
    }
}

struct TreeBuilder<'a, R> {
    x: &'a [[f64; FEATURE_COUNT]],
    y: &'a [f64],
    params: ForestParams,
    rng: &'a mut R,
    nodes: Vec<Node>,
}

impl<R: Rng> TreeBuilder<'_, R> {
    fn grow(&mut self, rows: Vec<usize>, depth: usize) -> usize {
        let id = self.nodes.len();
        let value = rows.iter().map(|&r| self.y[r]).sum::<f64>() / rows.len() as f64;
        self.nodes.push(Node::Leaf { value });
        if depth >= self.params.max_depth || rows.len() < 2 * self.params.min_samples_leaf.max(1) {
            return id;
        }
        let Some((feature, threshold)) = self.best_split(&rows) else {
            return id;
        };
        let (l, r): (Vec<usize>, Vec<usize>) =
            rows.iter().partition(|&&i| self.x[i][feature] <= threshold);
        let left = self.grow(l, depth + 1);
        let right = self.grow(r, depth + 1);
        self.nodes[id] = Node::Split {
            feature,
            threshold,
            left,
            right,
        };
        id
    }

    fn best_split(&mut self, rows: &[usize]) -> Option<(usize, f64)> {
        let k = self.params.max_features.clamp(1, FEATURE_COUNT);
        // Features constant within the node do not count toward `k`.
        let features = sample(self.rng, FEATURE_COUNT, FEATURE_COUNT).into_vec();
        let mut visited = 0;
        let min_leaf = self.params.min_samples_leaf.max(1);
        let n = rows.len() as f64;
        let total: f64 = rows.iter().map(|&r| self.y[r]).sum();
        let base = total * total / n;
        let mut best: Option<(f64, usize, f64)> = None;
        let mut order = rows.to_vec();
        for f in features {
            if visited == k {
                break;
            }
            let first = self.x[rows[0]][f];
            if rows.iter().all(|&r| self.x[r][f] == first) {
                continue;
            }
            visited += 1;
            order.sort_by(|&a, &b| self.x[a][f].total_cmp(&self.x[b][f]).then(a.cmp(&b)));
            let mut left_sum = 0.0;
            for i in 0..order.len() - 1 {
                left_sum += self.y[order[i]];
                let nl = i + 1;
                let nr = order.len() - nl;
                let (a, b) = (self.x[order[i]][f], self.x[order[i + 1]][f]);
                if nl < min_leaf || nr < min_leaf || a == b {
                    continue;
                }
                let right_sum = total - left_sum;
                // Maximizing this is equivalent to minimizing the summed SSE.
                let gain = left_sum * left_sum / nl as f64 + right_sum * right_sum / nr as f64 - base;
                if gain > 1e-12 && best.is_none_or(|(g, _, _)| gain > g) {
                    let mid = a + (b - a) / 2.0;
                    best = Some((gain, f, if mid < b { mid } else { a }));
                }
            }
        }
        best.map(|(_, f, t)| (f, t))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Predictor {
    Linear(LinearModel),
    Forest(Forest),
}

/// A loaded predictor plus its identity.
#[derive(Debug, Clone, PartialEq)]
pub struct TugModel {
    pub model_id: String,
    pub seed: u64,
    pub predictor: Predictor,
}

/// On-disk form.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelFile {
    pub model_id: String,
    #[serde(rename = "type")]
    pub kind: String,
    pub parameters: Value,
    #[serde(default)]
    pub seed: u64,
}

impl Default for TugModel {
    fn default() -> Self {
        Self::linear(DEFAULT_MODEL_ID, LinearModel::default())
    }
}

impl TugModel {
    pub fn linear(model_id: impl Into<String>, model: LinearModel) -> Self {
        Self {
            model_id: model_id.into(),
            seed: 0,
            predictor: Predictor::Linear(model),
        }
    }

    pub fn forest(model_id: impl Into<String>, forest: Forest, seed: u64) -> Self {
        Self {
            model_id: model_id.into(),
            seed,
            predictor: Predictor::Forest(forest),
        }
    }

    pub fn kind(&self) -> &'static str {
        match self.predictor {
            Predictor::Linear(_) => "linear",
            Predictor::Forest(_) => "forest",
        }
    }

    /// Raw model output, not clamped.
    pub fn raw_predict(&self, features: &TugFeatures) -> f64 {
        match &self.predictor {
            Predictor::Linear(m) => m.predict(features),
            Predictor::Forest(f) => f.predict(&features.to_array()),
        }
    }

    pub fn raw_predict_array(&self, x: &[f64; FEATURE_COUNT]) -> f64 {
        match &self.predictor {
            Predictor::Linear(m) => m.c0 + m.c1 * x[0] + m.c2 * x[6] + m.c3 * x[5],
            Predictor::Forest(f) => f.predict(x),
        }
    }

    pub fn to_file(&self) -> ModelFile {
        let parameters = match &self.predictor {
            Predictor::Linear(m) => serde_json::to_value(m),
            Predictor::Forest(f) => serde_json::to_value(f),
        }
        .expect("model serializes");
        ModelFile {
            model_id: self.model_id.clone(),
            kind: self.kind().into(),
            parameters,
            seed: self.seed,
        }
    }

    pub fn from_file(file: ModelFile) -> Result<Self, AnalyticError> {
        let invalid = |e: serde_json::Error| AnalyticError::InvalidModel(e.to_string());
        let predictor = match file.kind.as_str() {
            "linear" => {
                let m: LinearModel = serde_json::from_value(file.parameters).map_err(invalid)?;
                if ![m.c0, m.c1, m.c2, m.c3].iter().all(|c| c.is_finite()) {
                    return Err(AnalyticError::InvalidModel("non-finite coefficient".into()));
                }
                Predictor::Linear(m)
            }
            "forest" => {
                let f: Forest = serde_json::from_value(file.parameters).map_err(invalid)?;
                if f.trees.is_empty() {
                    return Err(AnalyticError::InvalidModel("forest has no trees".into()));
                }
                for t in &f.trees {
                    t.check()?;
                }
                Predictor::Forest(f)
            }
            other => {
                return Err(AnalyticError::InvalidModel(format!("unknown model type {other}")));
            }
        };
        Ok(Self {
            model_id: file.model_id,
            seed: file.seed,
            predictor,
        })
    }

    pub fn from_json(bytes: &[u8]) -> Result<Self, AnalyticError> {
        let file: ModelFile =
            serde_json::from_slice(bytes).map_err(|e| AnalyticError::InvalidModel(e.to_string()))?;
        Self::from_file(file)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(&self.to_file()).expect("model serializes")
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, AnalyticError> {
        let path = path.as_ref();
        let bytes = std::fs::read(path)
            .map_err(|e| AnalyticError::ModelNotFound(format!("{}: {e}", path.display())))?;
        Self::from_json(&bytes)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> std::io::Result<()> {
        std::fs::write(path, self.to_json())
    }
}
