//! Line-delimited graph datasets.
//!
//! Each non-empty line is one JSON object:
//!
//! ```text
//! {"num_nodes":3,"edges":[[0,1],[1,2]],"node_features":[[1.0],[0.0],[2.0]],"targets":{"lambda2":1.0}}
//! ```
//!
//! `node_features` and `targets` are optional. Unknown fields are kept and
//! written back unchanged.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use anyhow::Context;
use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};
use spectrain_core::{DenseMatrix, Graph};

#[derive(Debug, thiserror::Error)]
pub enum DatasetError {
    #[error("line {line}: {message}")]
    Malformed { line: usize, message: String },
    #[error("line {line}: {source}")]
    Graph {
        line: usize,
        #[source]
        source: spectrain_core::Error,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GraphRecord {
    pub num_nodes: usize,
    pub edges: Vec<[usize; 2]>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub node_features: Option<Vec<Vec<f64>>>,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub targets: BTreeMap<String, f64>,
    #[serde(flatten)]
    pub extra: Map<String, Value>,
}

impl GraphRecord {
    pub fn to_graph(&self) -> spectrain_core::Result<Graph> {
        let mut g = Graph::new(self.num_nodes, self.edges.iter().map(|&[u, v]| (u, v)))?;
        if let Some(rows) = &self.node_features {
            g.set_features(Some(DenseMatrix::from_rows(rows)?))?;
        }
        for (name, &value) in &self.targets {
            g.set_target(name.clone(), value);
        }
        Ok(g)
    }

    pub fn from_graph(g: &Graph) -> Self {
        Self {
            num_nodes: g.num_nodes(),
            edges: g.edges().iter().map(|&(u, v)| [u, v]).collect(),
            node_features: g.node_features().map(DenseMatrix::to_rows),
            targets: g.targets().clone(),
            extra: Map::new(),
        }
    }
}

/// A parsed dataset; `lines[i]` is the 1-based source line of `records[i]`.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Dataset {
    pub records: Vec<GraphRecord>,
    pub lines: Vec<usize>,
}

impl Dataset {
    pub fn parse(text: &str) -> Result<Self, DatasetError> {
        let mut ds = Dataset::default();
        for (i, raw) in text.split('\n').enumerate() {
            let line = raw.strip_suffix('\r').unwrap_or(raw);
            if line.trim().is_empty() {
                continue;
            }
            let record: GraphRecord = serde_json::from_str(line).map_err(|e| DatasetError::Malformed {
                line: i + 1,
                message: e.to_string(),
            })?;
            ds.records.push(record);
            ds.lines.push(i + 1);
        }
        Ok(ds)
    }

    pub fn read(path: &Path) -> anyhow::Result<Self> {
        let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        Self::parse(&text).with_context(|| format!("parsing {}", path.display()))
    }

    pub fn from_graphs(graphs: &[Graph]) -> Self {
        Self {
            records: graphs.iter().map(GraphRecord::from_graph).collect(),
            lines: (1..=graphs.len()).collect(),
        }
    }

    /// Validated graphs, with the source line in any error.
    pub fn graphs(&self) -> Result<Vec<Graph>, DatasetError> {
        self.records
            .iter()
            .zip(&self.lines)
            .map(|(r, &line)| r.to_graph().map_err(|source| DatasetError::Graph { line, source }))
            .collect()
    }

    /// Source line of the graph at dataset position `index`.
    pub fn line_of(&self, index: usize) -> usize {
        self.lines.get(index).copied().unwrap_or(index + 1)
    }

    /// One compact JSON object per line, LF-terminated.
    pub fn to_jsonl(&self) -> String {
        let mut out = String::new();
        for r in &self.records {
            out.push_str(&serde_json::to_string(r).expect("records serialize"));
            out.push('\n');
        }
        out
    }
}
