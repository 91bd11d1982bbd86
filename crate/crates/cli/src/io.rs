use std::fs;
use std::path::Path;

use anyhow::{bail, Context};
use capbound::model_spec::{parse_spec_document, SpecDocument};
use capbound::model_spec::NetworkSpec;
use capbound::{Data, Net};
use ndarray::Array2;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::ConfigError;

pub const MODEL_FORMAT: &str = "capbound-model";
pub const MODEL_VERSION: u32 = 1;

pub fn sha256_hex(bytes: &[u8]) -> String {
    format!("{:x}", Sha256::digest(bytes))
}

pub struct LoadedSpec {
    pub doc: SpecDocument,
    pub hash: String,
}

pub fn load_spec(path: &Path) -> anyhow::Result<LoadedSpec> {
    let text = fs::read_to_string(path)
        .map_err(|e| ConfigError::new(format!("cannot read spec {}: {e}", path.display())))?;
    let doc = parse_spec_document(&text)
        .map_err(|e| ConfigError::new(format!("{}: {e}", path.display())))?;
    Ok(LoadedSpec {
        doc,
        hash: sha256_hex(text.as_bytes()),
    })
}

fn parse_label(field: &str) -> Option<f64> {
    match field.parse::<f64>() {
        Ok(v) if v == 1.0 || v == -1.0 => Some(v),
        _ => None,
    }
}

/// Headerless CSV: feature columns, then a label in {−1, +1}.
pub fn read_dataset(path: &Path) -> anyhow::Result<Data> {
    let bad = |line: u64, msg: String| ConfigError::new(format!("{}:{line}: {msg}", path.display()));
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(false)
        .trim(csv::Trim::All)
        .from_path(path)
        .map_err(|e| ConfigError::new(format!("cannot read dataset {}: {e}", path.display())))?;
    let mut rows = Vec::new();
    let mut labels = Vec::new();
    for record in reader.records() {
        let record = record.map_err(|e| ConfigError::new(format!("{}: {e}", path.display())))?;
        let line = record.position().map_or(0, |p| p.line());
        if record.len() < 2 {
            return Err(bad(line, "need at least one feature and a label".into()).into());
        }
        let fields: Vec<&str> = record.iter().collect();
        let (feat, label) = fields.split_at(fields.len() - 1);
        let mut row = Vec::with_capacity(feat.len());
        for f in feat {
            let v: f64 = f
                .parse()
                .map_err(|_| bad(line, format!("`{f}` is not a number")))?;
            if !v.is_finite() {
                return Err(bad(line, format!("`{f}` is not finite")).into());
            }
            row.push(v);
        }
        let y = parse_label(label[0]).ok_or_else(|| bad(line, format!("label `{}` must be -1 or 1", label[0])))?;
        rows.push(row);
        labels.push(y);
    }
    if rows.is_empty() {
        return Err(ConfigError::new(format!("{}: dataset is empty", path.display())).into());
    }
    Data::from_rows(&rows, &labels).map_err(|e| ConfigError::new(format!("{}: {e}", path.display())).into())
}

#[derive(Debug, Serialize, Deserialize)]
pub struct ModelFile {
    pub format: String,
    pub version: u32,
    pub spec: NetworkSpec,
    /// Radius used for margin searches.
    pub data_radius: f64,
    /// `weights[k][i][j]`, row-major `W_{k,k+1}`.
    pub weights: Vec<Vec<Vec<f64>>>,
}

impl ModelFile {
    pub fn from_net(net: &Net, data_radius: f64) -> Self {
        Self {
            format: MODEL_FORMAT.into(),
            version: MODEL_VERSION,
            spec: net.spec.clone(),
            data_radius,
            weights: net
                .weights
                .iter()
                .map(|w| w.rows().into_iter().map(|r| r.to_vec()).collect())
                .collect(),
        }
    }

    pub fn to_net(&self) -> anyhow::Result<Net> {
        let mut mats = Vec::with_capacity(self.weights.len());
        for (k, rows) in self.weights.iter().enumerate() {
            let r = rows.len();
            let c = rows.first().map_or(0, Vec::len);
            if rows.iter().any(|row| row.len() != c) {
                bail!("weight matrix {k} is ragged");
            }
            let flat: Vec<f64> = rows.iter().flatten().copied().collect();
            mats.push(Array2::from_shape_vec((r, c), flat)?);
        }
        Ok(Net::from_weights(self.spec.clone(), mats)?)
    }

    pub fn spec_hash(&self) -> String {
        sha256_hex(&serde_json::to_vec(&self.spec).expect("spec serializes"))
    }
}

pub fn write_model(path: &Path, net: &Net, data_radius: f64) -> anyhow::Result<()> {
    let mut text = serde_json::to_string_pretty(&ModelFile::from_net(net, data_radius))?;
    text.push('\n');
    fs::write(path, text).with_context(|| format!("writing model {}", path.display()))
}

pub fn read_model(path: &Path) -> anyhow::Result<ModelFile> {
    let text = fs::read_to_string(path)
        .map_err(|e| ConfigError::new(format!("cannot read model {}: {e}", path.display())))?;
    let model: ModelFile = serde_json::from_str(&text)
        .map_err(|e| ConfigError::new(format!("{}: {e}", path.display())))?;
    if model.format != MODEL_FORMAT || model.version != MODEL_VERSION {
        return Err(ConfigError::new(format!(
            "{}: unsupported model format {} v{}",
            path.display(),
            model.format,
            model.version
        ))
        .into());
    }
    model
        .to_net()
        .map_err(|e| ConfigError::new(format!("{}: {e}", path.display())))?;
    Ok(model)
}
