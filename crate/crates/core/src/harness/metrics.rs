//! Line-oriented JSON records and delimiter-separated tables.

use std::path::{Path, PathBuf};

use serde::Serialize;
use serde_json::{json, Value};
use sha2::{Digest, Sha256};

use crate::error::Result;

/// Buffered `metrics.jsonl`: one JSON object per evaluation event.
#[derive(Debug, Default, Clone)]
pub struct MetricsLog {
    lines: Vec<String>,
}

impl MetricsLog {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn record(&mut self, event: &str, fields: impl Serialize) -> Result<()> {
        let mut v = serde_json::to_value(fields)?;
        if let Value::Object(map) = &mut v {
            map.insert("event".into(), json!(event));
        } else {
            v = json!({ "event": event, "value": v });
        }
        self.lines.push(serde_json::to_string(&v)?);
        Ok(())
    }

    pub fn lines(&self) -> &[String] {
        &self.lines
    }

    pub fn render(&self) -> String {
        let mut out = self.lines.join("\n");
        out.push('\n');
        out
    }
}

/// Tracks every file an experiment writes for the manifest.
#[derive(Debug)]
pub struct OutputDir {
    root: PathBuf,
    files: Vec<(String, String)>,
}

impl OutputDir {
    pub fn create(root: impl AsRef<Path>) -> Result<Self> {
        std::fs::create_dir_all(root.as_ref())?;
        Ok(Self {
            root: root.as_ref().to_path_buf(),
            files: Vec::new(),
        })
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn path(&self, name: &str) -> PathBuf {
        self.root.join(name)
    }

    pub fn write(&mut self, name: &str, bytes: impl AsRef<[u8]>) -> Result<PathBuf> {
        let path = self.root.join(name);
        std::fs::write(&path, bytes.as_ref())?;
        self.files.push((name.to_string(), hex::encode(Sha256::digest(bytes.as_ref()))));
        Ok(path)
    }

    /// Writes `manifest.json`; the only file holding a timestamp.
    pub fn finish(self) -> Result<PathBuf> {
        let stamp = std::time::SystemTime::now()
            .duration_since(std::time::UNIX_EPOCH)
            .map(|d| d.as_secs())
            .unwrap_or(0);
        let files: Vec<Value> = self
            .files
            .iter()
            .map(|(name, sha)| json!({ "file": name, "sha256": sha }))
            .collect();
        let manifest = json!({ "created_unix": stamp, "files": files });
        let path = self.root.join("manifest.json");
        std::fs::write(&path, serde_json::to_string_pretty(&manifest)?)?;
        Ok(path)
    }
}

/// Tab-separated table with a header row.
pub fn tsv<R: AsRef<[String]>>(header: &[&str], rows: &[R]) -> String {
    let mut out = header.join("\t");
    out.push('\n');
    for r in rows {
        out.push_str(&r.as_ref().join("\t"));
        out.push('\n');
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn records_carry_the_event_name() {
        let mut log = MetricsLog::new();
        log.record("eval", json!({ "accuracy": 0.5 })).unwrap();
        log.record("note", 3).unwrap();
        assert_eq!(log.lines()[0], r#"{"accuracy":0.5,"event":"eval"}"#);
        assert_eq!(log.lines()[1], r#"{"event":"note","value":3}"#);
    }

    #[test]
    fn manifest_lists_written_files() {
        let dir = tempfile::tempdir().unwrap();
        let mut out = OutputDir::create(dir.path()).unwrap();
        out.write("a.txt", "hello").unwrap();
        let manifest = out.finish().unwrap();
        let v: Value = serde_json::from_str(&std::fs::read_to_string(manifest).unwrap()).unwrap();
        assert_eq!(v["files"][0]["file"], "a.txt");
        assert_eq!(
            v["files"][0]["sha256"],
            "2cf24dba5fb0a30e26e83b2ac5b9e29e1b161e5c1fa7425e73043362938b9824"
        );
    }
}
