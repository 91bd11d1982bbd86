use std::fs;
use std::io::Write;
use std::path::Path;

use anyhow::Context;
use clap::ValueEnum;
use serde::Serialize;

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Format {
    Json,
    Markdown,
    Csv,
}

/// Provenance embedded in every report.
#[derive(Debug, Clone, Serialize)]
pub struct Meta {
    pub tool: &'static str,
    pub version: &'static str,
    pub command: &'static str,
    pub spec_sha256: String,
    pub seed: u64,
}

impl Meta {
    pub fn new(command: &'static str, spec_sha256: String, seed: u64) -> Self {
        Self {
            tool: "capbound",
            version: env!("CARGO_PKG_VERSION"),
            command,
            spec_sha256,
            seed,
        }
    }
}

/// A report body that can also be flattened to one table.
pub trait Tabular: Serialize {
    fn title(&self) -> &'static str;
    fn headers(&self) -> Vec<&'static str>;
    fn rows(&self) -> Vec<Vec<String>>;
    /// Extra lines shown under the title in markdown.
    fn summary(&self) -> Vec<String> {
        Vec::new()
    }
}

#[derive(Serialize)]
struct Envelope<'a, B> {
    meta: &'a Meta,
    #[serde(flatten)]
    body: &'a B,
}

pub fn fmt_f64(v: f64) -> String {
    if v.is_infinite() {
        if v > 0.0 { "inf".into() } else { "-inf".into() }
    } else {
        format!("{v}")
    }
}

pub fn render<B: Tabular>(meta: &Meta, body: &B, format: Format) -> anyhow::Result<String> {
    Ok(match format {
        Format::Json => {
            let mut s = serde_json::to_string_pretty(&Envelope { meta, body })?;
            s.push('\n');
            s
        }
        Format::Markdown => {
            let mut s = format!("# {}\n\n", body.title());
            s.push_str(&format!(
                "- tool: {} {}\n- spec_sha256: `{}`\n- seed: {}\n",
                meta.tool, meta.version, meta.spec_sha256, meta.seed
            ));
            for line in body.summary() {
                s.push_str(&format!("- {line}\n"));
            }
            s.push('\n');
            let headers = body.headers();
            s.push_str(&format!("| {} |\n", headers.join(" | ")));
            s.push_str(&format!("|{}\n", "---|".repeat(headers.len())));
            for row in body.rows() {
                s.push_str(&format!("| {} |\n", row.join(" | ")));
            }
            s
        }
        Format::Csv => {
            let mut w = csv::Writer::from_writer(Vec::new());
            let mut headers = body.headers();
            headers.extend(["tool_version", "spec_sha256", "seed"]);
            w.write_record(&headers)?;
            for mut row in body.rows() {
                row.extend([meta.version.to_string(), meta.spec_sha256.clone(), meta.seed.to_string()]);
                w.write_record(&row)?;
            }
            String::from_utf8(w.into_inner()?)?
        }
    })
}

/// Writes to `path`, or stdout when absent.
pub fn emit(text: &str, path: Option<&Path>) -> anyhow::Result<()> {
    match path {
        Some(p) => fs::write(p, text).with_context(|| format!("writing {}", p.display())),
        None => {
            let mut out = std::io::stdout().lock();
            out.write_all(text.as_bytes())?;
            Ok(())
        }
    }
}
