//! RB count datasets ("leakrb/dataset/v1"), shared by the simulator and the
//! ingestion path. Unknown fields are kept in `extra` maps and written back.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

use crate::error::{Error, Result};
use crate::io::Provenance;
use crate::simulate::{Protocol, RBProtocolConfig};

pub const DATASET_SCHEMA: &str = "leakrb/dataset/v1";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GadgetCount {
    pub outcome: String,
    /// Observed leak flags, one '0'/'1' per qubit.
    pub gadget: String,
    pub count: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CircuitRecord {
    pub length: usize,
    pub sequence_id: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub permutation: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub accepted_outcome: Option<String>,
    pub counts: BTreeMap<String, u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gadget_counts: Option<Vec<GadgetCount>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub shots: Option<u64>,
    #[serde(flatten)]
    pub extra: Map<String, Value>,
}

impl CircuitRecord {
    pub fn total(&self) -> u64 {
        self.counts.values().sum()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Metadata {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub system: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub date: Option<String>,
    pub d_c: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub protocol: Option<Protocol>,
    /// Ideal output bitstring of every sequence (defaults to all zeros).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub reference: Option<String>,
    #[serde(flatten)]
    pub extra: Map<String, Value>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RBDataset {
    pub schema: String,
    pub metadata: Metadata,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub config: Option<RBProtocolConfig>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub provenance: Option<Provenance>,
    pub circuits: Vec<CircuitRecord>,
    #[serde(flatten)]
    pub extra: Map<String, Value>,
}

impl RBDataset {
    pub fn n_qubits(&self) -> Result<usize> {
        match self.metadata.d_c {
            2 => Ok(1),
            4 => Ok(2),
            other => Err(Error::Schema { path: "metadata.d_c".into(), message: format!("unsupported d_c {other}") }),
        }
    }

    pub fn reference(&self) -> Result<String> {
        let n = self.n_qubits()?;
        Ok(self.metadata.reference.clone().unwrap_or_else(|| "0".repeat(n)))
    }

    pub fn has_gadget_data(&self) -> bool {
        !self.circuits.is_empty() && self.circuits.iter().all(|c| c.gadget_counts.is_some())
    }

    pub fn lengths(&self) -> Vec<usize> {
        let mut ls: Vec<usize> = self.circuits.iter().map(|c| c.length).collect();
        ls.sort_unstable();
        ls.dedup();
        ls
    }

    /// Structural checks beyond what deserialization enforces.
    pub fn validate(&self) -> Result<()> {
        if self.schema != DATASET_SCHEMA {
            return Err(Error::Schema { path: "schema".into(), message: format!("expected {DATASET_SCHEMA:?}, got {:?}", self.schema) });
        }
        let n = self.n_qubits()?;
        let bit_label = |s: &str| s.len() == n && s.chars().all(|ch| ch == '0' || ch == '1');
        if let Some(r) = &self.metadata.reference {
            if !bit_label(r) {
                return Err(Error::Schema { path: "metadata.reference".into(), message: format!("bad bitstring {r:?}") });
            }
        }
        for (i, rec) in self.circuits.iter().enumerate() {
            let path = |f: &str| format!("circuits[{i}].{f}");
            if rec.length == 0 {
                return Err(Error::Schema { path: path("length"), message: "length must be ≥ 1".into() });
            }
            if let Some(k) = rec.permutation {
                if k >= self.metadata.d_c {
                    return Err(Error::Schema { path: path("permutation"), message: format!("{k} ≥ d_c") });
                }
            }
            if let Some(a) = &rec.accepted_outcome {
                if !bit_label(a) {
                    return Err(Error::Schema { path: path("accepted_outcome"), message: format!("bad bitstring {a:?}") });
                }
            }
            let total = rec.total();
            if total == 0 {
                return Err(Error::Schema { path: path("counts"), message: "no shots recorded".into() });
            }
            if let Some(s) = rec.shots {
                if s != total {
                    return Err(Error::Schema { path: path("counts"), message: format!("counts sum to {total}, shots declares {s}") });
                }
            }
            if let Some(g) = &rec.gadget_counts {
                let gsum: u64 = g.iter().map(|x| x.count).sum();
                if gsum != total {
                    return Err(Error::Schema { path: path("gadget_counts"), message: format!("gadget counts sum to {gsum}, counts to {total}") });
                }
                for x in g {
                    if !bit_label(&x.gadget) {
                        return Err(Error::Schema { path: path("gadget_counts"), message: format!("bad gadget pattern {:?}", x.gadget) });
                    }
                }
            }
        }
        Ok(())
    }

    pub fn from_json_str(text: &str) -> Result<Self> {
        let ds: RBDataset = serde_json::from_str(text).map_err(|e| Error::Schema {
            path: format!("line {} column {}", e.line(), e.column()),
            message: e.to_string(),
        })?;
        ds.validate()?;
        Ok(ds)
    }

    pub fn to_json_string(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }
}

pub fn ingest(path: &Path) -> Result<RBDataset> {
    RBDataset::from_json_str(&std::fs::read_to_string(path)?)
}
