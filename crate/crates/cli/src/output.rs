//! Buffered result files with a metadata block.
//!
//! Files are rendered in memory and written only once a command has
//! finished, so a failing run leaves nothing behind.

use std::io::Write;
use std::path::Path;

use noisepath::io::fmt_f64;
use noisepath::TimeGrid;
use serde_json::{json, Map, Value};
use sha2::{Digest, Sha256};

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

#[derive(Debug, Clone)]
pub struct Metadata {
    pub command: String,
    pub config_sha256: String,
    pub seed: Option<u64>,
    pub grid: Option<TimeGrid>,
    pub tolerances: Vec<(&'static str, f64)>,
    /// Unix seconds; `None` under `--no-header-timestamp`.
    pub timestamp: Option<u64>,
}

impl Metadata {
    fn fields(&self) -> Vec<(&'static str, String)> {
        let mut out = vec![
            ("generator", format!("noisepath {}", env!("CARGO_PKG_VERSION"))),
            ("command", self.command.clone()),
            ("config_sha256", self.config_sha256.clone()),
            ("seed", self.seed.map_or("none".into(), |s| s.to_string())),
        ];
        if let Some(g) = &self.grid {
            out.push((
                "grid",
                format!(
                    "t_start={} t_end={} n_points={}",
                    fmt_f64(g.t_start()),
                    fmt_f64(g.t_end()),
                    g.len()
                ),
            ));
        }
        let tol: Vec<String> = self
            .tolerances
            .iter()
            .map(|(k, v)| format!("{k}={}", fmt_f64(*v)))
            .collect();
        out.push(("tolerances", tol.join(" ")));
        if let Some(t) = self.timestamp {
            out.push(("timestamp", t.to_string()));
        }
        out
    }

    /// `# key: value` lines preceding the CSV header row.
    pub fn csv_block(&self) -> String {
        self.fields()
            .into_iter()
            .map(|(k, v)| format!("# {k}: {v}\n"))
            .collect()
    }

    pub fn to_json(&self) -> Value {
        let mut m = Map::new();
        m.insert(
            "generator".into(),
            json!(format!("noisepath {}", env!("CARGO_PKG_VERSION"))),
        );
        m.insert("command".into(), json!(self.command));
        m.insert("config_sha256".into(), json!(self.config_sha256));
        m.insert("seed".into(), json!(self.seed));
        if let Some(g) = &self.grid {
            m.insert(
                "grid".into(),
                json!({"t_start": g.t_start(), "t_end": g.t_end(), "n_points": g.len()}),
            );
        }
        let tol: Map<String, Value> = self.tolerances.iter().map(|(k, v)| (k.to_string(), json!(v))).collect();
        m.insert("tolerances".into(), Value::Object(tol));
        if let Some(t) = self.timestamp {
            m.insert("timestamp".into(), json!(t));
        }
        Value::Object(m)
    }
}

#[derive(Debug, Default)]
pub struct Outputs {
    files: Vec<(String, Vec<u8>)>,
}

impl Outputs {
    /// Adds a CSV produced by `body`, prefixed with the metadata block.
    pub fn csv<F>(&mut self, name: &str, meta: &Metadata, body: F)
    where
        F: FnOnce(&mut Vec<u8>) -> std::io::Result<()>,
    {
        let mut buf = meta.csv_block().into_bytes();
        body(&mut buf).expect("writing to memory cannot fail");
        self.files.push((name.into(), buf));
    }

    /// Adds `{"metadata": ..., "result": value}`.
    pub fn json(&mut self, name: &str, meta: &Metadata, value: Value) {
        let doc = json!({"metadata": meta.to_json(), "result": value});
        let mut buf = serde_json::to_vec_pretty(&doc).expect("json values serialise");
        buf.push(b'\n');
        self.files.push((name.into(), buf));
    }

    pub fn names(&self) -> Vec<&str> {
        self.files.iter().map(|(n, _)| n.as_str()).collect()
    }

    pub fn get(&self, name: &str) -> Option<&[u8]> {
        self.files.iter().find(|(n, _)| n == name).map(|(_, b)| b.as_slice())
    }

    pub fn write_to(&self, dir: &Path) -> std::io::Result<()> {
        std::fs::create_dir_all(dir)?;
        for (name, bytes) in &self.files {
            let mut f = std::fs::File::create(dir.join(name))?;
            f.write_all(bytes)?;
        }
        Ok(())
    }
}
