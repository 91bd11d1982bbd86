//! Text configuration format for architecture specs.
//!
//! A TOML document with top-level keys and repeated `[[layer]]` sections:
//!
//! ```toml
//! input_dim = 2
//! output_max_norm = 1.0
//!
//! [[layer]]
//! width = 2
//! activation = "relu"
//! max_norm = 1.0
//! keep_prob = 0.5
//!
//! [data]
//! radius = 1.0
//! ```
//!
//! Residual specs set `kind = "resnet"` and use `[stem]`, `[[block]]` and
//! `[[fc]]` sections instead.

use serde::{Deserialize, Serialize};

use super::{
    ActivationKind, ConvStem, DataStats, LayerSpec, NetworkSpec, ResBlock, ResNetSpec,
    DEFAULT_LEAKY_SLOPE,
};
use crate::error::{Diagnostic, Error, Result};

#[derive(Debug, Deserialize, Serialize)]
#[serde(deny_unknown_fields)]
struct LayerDoc {
    width: usize,
    activation: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    slope: Option<f64>,
    max_norm: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    keep_prob: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    dc_keep_prob: Option<f64>,
}

#[derive(Debug, Deserialize, Serialize)]
#[serde(deny_unknown_fields)]
struct DataDoc {
    radius: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    noise_radius: Option<f64>,
}

#[derive(Debug, Deserialize, Serialize)]
#[serde(deny_unknown_fields)]
struct NetworkDoc {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    kind: Option<String>,
    input_dim: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    input_keep_prob: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    input_dc_keep_prob: Option<f64>,
    output_max_norm: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    data: Option<DataDoc>,
    #[serde(default)]
    layer: Vec<LayerDoc>,
}

#[derive(Debug, Deserialize, Serialize)]
#[serde(deny_unknown_fields)]
struct StemDoc {
    max_norm: f64,
    filters: usize,
    filter_size: usize,
}

#[derive(Debug, Deserialize, Serialize)]
#[serde(deny_unknown_fields)]
struct BlockDoc {
    units: usize,
    max_norm: f64,
    filters: usize,
    filter_size: usize,
    #[serde(default = "one_usize")]
    stride: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    keep_prob: Option<f64>,
}

#[derive(Debug, Deserialize, Serialize)]
#[serde(deny_unknown_fields)]
struct ResNetDoc {
    kind: String,
    activation: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    slope: Option<f64>,
    output_max_norm: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    data: Option<DataDoc>,
    stem: StemDoc,
    #[serde(default)]
    block: Vec<BlockDoc>,
    #[serde(default)]
    fc: Vec<LayerDoc>,
}

fn one_usize() -> usize {
    1
}

/// Either architecture, plus the optional `[data]` section.
#[derive(Debug, Clone, PartialEq)]
pub enum SpecDocument {
    Network {
        spec: NetworkSpec,
        data: Option<DataStats>,
    },
    ResNet {
        spec: ResNetSpec,
        data: Option<DataStats>,
    },
}

impl SpecDocument {
    pub fn data(&self) -> Option<DataStats> {
        match self {
            SpecDocument::Network { data, .. } | SpecDocument::ResNet { data, .. } => *data,
        }
    }
}

#[derive(Deserialize)]
struct KindProbe {
    #[serde(default)]
    kind: Option<String>,
}

/// Parse either kind of spec document, dispatching on the `kind` key.
pub fn parse_spec_document(text: &str) -> Result<SpecDocument> {
    let probe: KindProbe = toml::from_str(text).map_err(|e| parse_error(text, &e))?;
    match probe.kind.as_deref() {
        None | Some("mlp") => {
            let doc: NetworkDoc = toml::from_str(text).map_err(|e| parse_error(text, &e))?;
            let data = doc.data.as_ref().map(data_from_doc);
            let spec = network_from_doc(doc)?;
            Ok(SpecDocument::Network { spec, data })
        }
        Some("resnet") => {
            let doc: ResNetDoc = toml::from_str(text).map_err(|e| parse_error(text, &e))?;
            let data = doc.data.as_ref().map(data_from_doc);
            let spec = resnet_from_doc(doc)?;
            Ok(SpecDocument::ResNet { spec, data })
        }
        Some(other) => Err(Error::Parse {
            line: line_of_key(text, "kind"),
            column: 1,
            message: format!("unknown kind `{other}` (expected `mlp` or `resnet`)"),
        }),
    }
}

/// Parse a fully connected network spec.
pub fn parse_network_spec(text: &str) -> Result<NetworkSpec> {
    match parse_spec_document(text)? {
        SpecDocument::Network { spec, .. } => Ok(spec),
        SpecDocument::ResNet { .. } => Err(Error::Parse {
            line: line_of_key(text, "kind"),
            column: 1,
            message: "expected an mlp document, found kind = \"resnet\"".into(),
        }),
    }
}

/// Parse a residual network spec.
pub fn parse_resnet_spec(text: &str) -> Result<ResNetSpec> {
    match parse_spec_document(text)? {
        SpecDocument::ResNet { spec, .. } => Ok(spec),
        SpecDocument::Network { .. } => Err(Error::Parse {
            line: 1,
            column: 1,
            message: "expected kind = \"resnet\"".into(),
        }),
    }
}

pub fn network_spec_to_text(spec: &NetworkSpec, data: Option<DataStats>) -> String {
    let doc = NetworkDoc {
        kind: None,
        input_dim: spec.input_dim,
        input_keep_prob: Some(spec.input_keep_prob),
        input_dc_keep_prob: Some(spec.input_dc_keep_prob),
        output_max_norm: spec.output_max_norm,
        data: data.map(data_to_doc),
        layer: spec.hidden.iter().map(layer_to_doc).collect(),
    };
    toml::to_string(&doc).expect("network spec serializes")
}

pub fn resnet_spec_to_text(spec: &ResNetSpec, data: Option<DataStats>) -> String {
    let (activation, slope) = activation_to_doc(spec.activation);
    let doc = ResNetDoc {
        kind: "resnet".into(),
        activation,
        slope,
        output_max_norm: spec.output_max_norm,
        data: data.map(data_to_doc),
        stem: StemDoc {
            max_norm: spec.stem.max_norm,
            filters: spec.stem.filters,
            filter_size: spec.stem.filter_size,
        },
        block: spec
            .blocks
            .iter()
            .map(|b| BlockDoc {
                units: b.units,
                max_norm: b.max_norm,
                filters: b.filters,
                filter_size: b.filter_size,
                stride: b.stride,
                keep_prob: Some(b.keep_prob),
            })
            .collect(),
        fc: spec.fc_tail.iter().map(layer_to_doc).collect(),
    };
    toml::to_string(&doc).expect("resnet spec serializes")
}

fn network_from_doc(doc: NetworkDoc) -> Result<NetworkSpec> {
    let hidden = doc
        .layer
        .iter()
        .enumerate()
        .map(|(i, l)| layer_from_doc(l, &format!("layer[{i}]")))
        .collect::<Result<Vec<_>>>()?;
    let spec = NetworkSpec {
        input_dim: doc.input_dim,
        input_keep_prob: doc.input_keep_prob.unwrap_or(1.0),
        input_dc_keep_prob: doc.input_dc_keep_prob.unwrap_or(1.0),
        hidden,
        output_max_norm: doc.output_max_norm,
    };
    spec.validate_structure()?;
    Ok(spec)
}

fn resnet_from_doc(doc: ResNetDoc) -> Result<ResNetSpec> {
    let activation = activation_from_doc(&doc.activation, doc.slope, "activation")?;
    let fc_tail = doc
        .fc
        .iter()
        .enumerate()
        .map(|(i, l)| layer_from_doc(l, &format!("fc[{i}]")))
        .collect::<Result<Vec<_>>>()?;
    let spec = ResNetSpec {
        stem: ConvStem {
            max_norm: doc.stem.max_norm,
            filters: doc.stem.filters,
            filter_size: doc.stem.filter_size,
        },
        blocks: doc
            .block
            .iter()
            .map(|b| ResBlock {
                units: b.units,
                max_norm: b.max_norm,
                filters: b.filters,
                filter_size: b.filter_size,
                stride: b.stride,
                keep_prob: b.keep_prob.unwrap_or(1.0),
            })
            .collect(),
        activation,
        fc_tail,
        output_max_norm: doc.output_max_norm,
    };
    spec.validate()?;
    Ok(spec)
}

fn layer_from_doc(l: &LayerDoc, path: &str) -> Result<LayerSpec> {
    Ok(LayerSpec {
        width: l.width,
        activation: activation_from_doc(&l.activation, l.slope, path)?,
        max_norm: l.max_norm,
        keep_prob: l.keep_prob.unwrap_or(1.0),
        dc_keep_prob: l.dc_keep_prob.unwrap_or(1.0),
    })
}

fn layer_to_doc(l: &LayerSpec) -> LayerDoc {
    let (activation, slope) = activation_to_doc(l.activation);
    LayerDoc {
        width: l.width,
        activation,
        slope,
        max_norm: l.max_norm,
        keep_prob: Some(l.keep_prob),
        dc_keep_prob: Some(l.dc_keep_prob),
    }
}

fn activation_from_doc(name: &str, slope: Option<f64>, path: &str) -> Result<ActivationKind> {
    let a = match name {
        "relu" => ActivationKind::Relu,
        "leaky_relu" => ActivationKind::LeakyRelu {
            slope: slope.unwrap_or(DEFAULT_LEAKY_SLOPE),
        },
        "tanh" => ActivationKind::Tanh,
        "sigmoid" => ActivationKind::Sigmoid,
        other => {
            return Err(Error::Invalid(vec![Diagnostic::new(
                format!("{path}.activation"),
                format!("unknown activation `{other}` (relu, leaky_relu, tanh, sigmoid)"),
            )]))
        }
    };
    if slope.is_some() && !matches!(a, ActivationKind::LeakyRelu { .. }) {
        return Err(Error::Invalid(vec![Diagnostic::new(
            format!("{path}.slope"),
            "slope is only meaningful for leaky_relu",
        )]));
    }
    Ok(a)
}

fn activation_to_doc(a: ActivationKind) -> (String, Option<f64>) {
    match a {
        ActivationKind::LeakyRelu { slope } => ("leaky_relu".into(), Some(slope)),
        other => (other.name().into(), None),
    }
}

fn data_from_doc(d: &DataDoc) -> DataStats {
    DataStats {
        radius: d.radius,
        noise_radius: d.noise_radius.unwrap_or(0.0),
    }
}

fn data_to_doc(d: DataStats) -> DataDoc {
    DataDoc {
        radius: d.radius,
        noise_radius: Some(d.noise_radius),
    }
}

fn parse_error(text: &str, e: &toml::de::Error) -> Error {
    let (line, column) = match e.span() {
        Some(span) => line_col(text, span.start),
        None => (1, 1),
    };
    Error::Parse {
        line,
        column,
        message: e.message().to_string(),
    }
}

fn line_col(text: &str, offset: usize) -> (usize, usize) {
    let offset = offset.min(text.len());
    let before = &text[..offset];
    let line = before.matches('\n').count() + 1;
    let column = before.rfind('\n').map_or(offset, |i| offset - i - 1) + 1;
    (line, column)
}

fn line_of_key(text: &str, key: &str) -> usize {
    text.lines()
        .position(|l| l.trim_start().starts_with(key))
        .map_or(1, |i| i + 1)
}

#[cfg(test)]
mod tests {
    use super::*;

    const TWO_LAYER: &str = r#"
input_dim = 2
output_max_norm = 1.0

[[layer]]
width = 2
activation = "relu"
max_norm = 1.0

[[layer]]
width = 2
activation = "relu"
max_norm = 1.0
"#;

    #[test]
    fn minimal_document_gets_defaults() {
        let spec = parse_network_spec("input_dim = 3\noutput_max_norm = 2.0\n").unwrap();
        assert_eq!(spec.input_dim, 3);
        assert_eq!(spec.depth(), 0);
        assert_eq!(spec.input_keep_prob, 1.0);
        assert_eq!(spec.input_dc_keep_prob, 1.0);
    }

    #[test]
    fn two_relu_layers() {
        let spec = parse_network_spec(TWO_LAYER).unwrap();
        assert_eq!(spec.hidden.len(), 2);
        assert!(spec.hidden.iter().all(|l| l.keep_prob == 1.0 && l.dc_keep_prob == 1.0));
    }

    #[test]
    fn missing_input_dim_is_an_error() {
        let err = parse_network_spec("output_max_norm = 1.0\n").unwrap_err();
        match err {
            Error::Parse { message, .. } => assert!(message.contains("input_dim"), "{message}"),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn parse_error_carries_line() {
        let text = "input_dim = 2\noutput_max_norm = 1.0\n[[layer]]\nwidth = \"two\"\n";
        match parse_network_spec(text).unwrap_err() {
            Error::Parse { line, .. } => assert_eq!(line, 4),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn leaky_slope_defaults_and_overrides() {
        let text = "input_dim = 1\noutput_max_norm = 1.0\n[[layer]]\nwidth = 1\nactivation = \"leaky_relu\"\nmax_norm = 1.0\n[[layer]]\nwidth = 1\nactivation = \"leaky_relu\"\nslope = 0.2\nmax_norm = 1.0\n";
        let spec = parse_network_spec(text).unwrap();
        assert_eq!(spec.hidden[0].activation, ActivationKind::LeakyRelu { slope: 0.01 });
        assert_eq!(spec.hidden[1].activation, ActivationKind::LeakyRelu { slope: 0.2 });
    }

    #[test]
    fn zero_keep_prob_in_document() {
        let text = "input_dim = 1\ninput_keep_prob = 0.0\noutput_max_norm = 1.0\n";
        let Error::Invalid(d) = parse_network_spec(text).unwrap_err() else {
            panic!()
        };
        assert_eq!(d[0].message, "keep probability must be in (0,1]");
    }

    const ONE_BLOCK: &str = r#"
kind = "resnet"
activation = "relu"
output_max_norm = 1.0

[stem]
max_norm = 1.0
filters = 2
filter_size = 1

[[block]]
units = 1
max_norm = 1.0
filters = 2
filter_size = 1
keep_prob = 0.5

[[fc]]
width = 2
activation = "relu"
max_norm = 1.0
"#;

    #[test]
    fn one_block_resnet() {
        let spec = parse_resnet_spec(ONE_BLOCK).unwrap();
        assert_eq!(spec.blocks.len(), 1);
        assert_eq!(spec.blocks[0].stride, 1);
        assert_eq!(spec.fc_tail.len(), 1);
    }

    #[test]
    fn zero_blocks_rejected() {
        let text = ONE_BLOCK.replace("[[block]]\nunits = 1\nmax_norm = 1.0\nfilters = 2\nfilter_size = 1\nkeep_prob = 0.5\n", "");
        let Error::Invalid(d) = parse_resnet_spec(&text).unwrap_err() else {
            panic!()
        };
        assert_eq!(d[0].message, "T ≥ 1 required");
    }

    #[test]
    fn resnet_round_trip() {
        let spec = parse_resnet_spec(ONE_BLOCK).unwrap();
        let again = parse_resnet_spec(&resnet_spec_to_text(&spec, None)).unwrap();
        assert_eq!(spec, again);
    }

    #[test]
    fn document_with_data_section() {
        let text = format!("{TWO_LAYER}\n[data]\nradius = 2.5\nnoise_radius = 0.5\n");
        let doc = parse_spec_document(&text).unwrap();
        assert_eq!(doc.data(), Some(DataStats { radius: 2.5, noise_radius: 0.5 }));
    }

    #[test]
    fn unknown_kind() {
        assert!(matches!(
            parse_spec_document("kind = \"cnn\"\n"),
            Err(Error::Parse { .. })
        ));
    }
}
