//! Text artifacts: JSONL metrics, CSV tables and the run manifest.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use martnet_core::trainer::MetricsRecord;

use crate::config::RunConfig;
use crate::formats::{write_atomic, FormatError};

/// One metrics line; field order is the serialization order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsLine {
    pub iter: usize,
    pub mart_loss: f64,
    pub hamilt: Option<f64>,
    pub lambda: Option<f64>,
    pub lr1: f64,
    pub lr3: f64,
    pub re_l1: Option<f64>,
    pub re_linf: Option<f64>,
    pub wall_ms: Option<f64>,
}

impl From<&MetricsRecord> for MetricsLine {
    fn from(r: &MetricsRecord) -> Self {
        Self {
            iter: r.iter,
            mart_loss: r.mart_loss,
            hamilt: r.hamilt,
            lambda: r.lambda,
            lr1: r.lr1,
            lr3: r.lr3,
            re_l1: r.re_l1,
            re_linf: r.re_linf,
            wall_ms: r.wall_ms,
        }
    }
}

pub fn metrics_jsonl(records: &[MetricsRecord]) -> String {
    let mut s = String::new();
    for r in records {
        s.push_str(&serde_json::to_string(&MetricsLine::from(r)).expect("metrics serialize"));
        s.push('\n');
    }
    s
}

pub fn parse_metrics(text: &str) -> serde_json::Result<Vec<MetricsLine>> {
    text.lines().filter(|l| !l.trim().is_empty()).map(serde_json::from_str).collect()
}

/// Streams one JSON object per line, flushing after each so a crashed run
/// leaves a readable prefix.
pub struct MetricsWriter {
    out: std::io::BufWriter<std::fs::File>,
}

impl MetricsWriter {
    pub fn create(path: &Path) -> std::io::Result<Self> {
        Ok(Self { out: std::io::BufWriter::new(std::fs::File::create(path)?) })
    }

    pub fn push(&mut self, r: &MetricsRecord) -> std::io::Result<()> {
        serde_json::to_writer(&mut self.out, &MetricsLine::from(r))?;
        self.out.write_all(b"\n")?;
        self.out.flush()
    }
}

/// Numbers are written with the shortest round-trip representation.
pub fn csv(header: &[&str], rows: &[Vec<f64>]) -> String {
    let mut s = header.join(",");
    s.push('\n');
    for row in rows {
        let cells: Vec<String> = row.iter().map(|v| format!("{v:?}")).collect();
        s.push_str(&cells.join(","));
        s.push('\n');
    }
    s
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestSeeds {
    pub paths: u64,
    pub init: u64,
    pub train: u64,
    pub reference: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Manifest {
    pub command: String,
    /// SHA-256 of `config`.
    pub config_hash: String,
    /// Fully resolved configuration text; parsing it reproduces the run.
    pub config: String,
    pub seeds: ManifestSeeds,
    pub versions: BTreeMap<String, String>,
    /// Artifact file name to SHA-256 of its contents.
    pub artifacts: BTreeMap<String, String>,
}

impl Manifest {
    pub fn new(command: &str, cfg: &RunConfig) -> Self {
        let config = cfg.to_text();
        let mut versions = BTreeMap::new();
        versions.insert("martnet".into(), env!("CARGO_PKG_VERSION").into());
        versions.insert("martnet-core".into(), martnet_core::VERSION.into());
        versions.insert("path-cache-format".into(), "1".into());
        versions.insert("checkpoint-format".into(), "1".into());
        Self {
            command: command.to_string(),
            config_hash: sha256_hex(config.as_bytes()),
            config,
            seeds: ManifestSeeds {
                paths: cfg.seeds.paths,
                init: cfg.seeds.init,
                train: cfg.seeds.train,
                reference: cfg.seeds.reference,
            },
            versions,
            artifacts: BTreeMap::new(),
        }
    }

    pub fn record(&mut self, name: &str, bytes: &[u8]) {
        self.artifacts.insert(name.to_string(), sha256_hex(bytes));
    }

    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("manifest serialize");
        s.push('\n');
        s
    }

    pub fn save(&self, path: &Path) -> Result<(), FormatError> {
        write_atomic(path, self.to_json().as_bytes())
    }

    pub fn load(path: &Path) -> anyhow::Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| anyhow::anyhow!("reading manifest {}: {e}", path.display()))?;
        let m: Manifest = serde_json::from_str(&text)?;
        if sha256_hex(m.config.as_bytes()) != m.config_hash {
            anyhow::bail!("manifest {}: config hash does not match its config text", path.display());
        }
        Ok(m)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn record(iter: usize) -> MetricsRecord {
        MetricsRecord {
            iter,
            mart_loss: 1.5e-9,
            hamilt: None,
            lambda: Some(10.0),
            lr1: 1e-3,
            lr3: 0.01,
            re_l1: None,
            re_linf: Some(0.25),
            wall_ms: None,
        }
    }

    #[test]
    fn metrics_lines_have_fixed_fields() {
        let text = metrics_jsonl(&[record(0), record(1)]);
        let first = text.lines().next().unwrap();
        assert_eq!(
            first,
            r#"{"iter":0,"mart_loss":1.5e-9,"hamilt":null,"lambda":10.0,"lr1":0.001,"lr3":0.01,"re_l1":null,"re_linf":0.25,"wall_ms":null}"#
        );
        let back = parse_metrics(&text).unwrap();
        assert_eq!(back, vec![MetricsLine::from(&record(0)), MetricsLine::from(&record(1))]);
    }

    #[test]
    fn csv_layout() {
        let s = csv(&["N", "re_l1"], &[vec![3.0, 0.1], vec![6.0, 0.05]]);
        assert_eq!(s, "N,re_l1\n3.0,0.1\n6.0,0.05\n");
    }

    #[test]
    fn manifest_hash_covers_config() {
        let cfg = RunConfig::parse("N = 7").unwrap();
        let mut m = Manifest::new("train", &cfg);
        m.record("metrics.jsonl", b"x");
        assert_eq!(m.config_hash, sha256_hex(cfg.to_text().as_bytes()));
        assert_eq!(m.artifacts["metrics.jsonl"], "2d711642b726b04401627ca9fbac32f5c8530fb1903cc4db02258717921a4881");
        let back: Manifest = serde_json::from_str(&m.to_json()).unwrap();
        assert_eq!(back, m);
        assert_eq!(RunConfig::parse(&back.config).unwrap(), cfg);
    }
}
