//! JSON-Lines sample manifests.

use std::collections::HashSet;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::data::VariantLabel;
use crate::error::{Error, Result};
use crate::io::resolve;

/// One manifest line. Paths are relative to the manifest's directory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestRecord {
    pub sample_id: String,
    pub features_path: String,
    pub gradients_path: String,
    pub meta_path: String,
    pub mask_dir: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub variant_label: Option<VariantLabel>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Manifest {
    pub root: PathBuf,
    pub records: Vec<ManifestRecord>,
}

impl Manifest {
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::file(path, e))?;
        let root = path.parent().map(Path::to_path_buf).unwrap_or_default();
        Self::parse(&text, root)
    }

    pub fn parse(text: &str, root: PathBuf) -> Result<Self> {
        let mut records = Vec::new();
        let mut seen = HashSet::new();
        for (n, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let rec: ManifestRecord = serde_json::from_str(line)
                .map_err(|e| Error::Manifest(format!("line {}: {e}", n + 1)))?;
            if !seen.insert(rec.sample_id.clone()) {
                return Err(Error::Manifest(format!(
                    "line {}: duplicate sample_id {:?}",
                    n + 1,
                    rec.sample_id
                )));
            }
            records.push(rec);
        }
        Ok(Self { root, records })
    }

    pub fn to_jsonl(&self) -> Result<String> {
        let mut out = String::new();
        for r in &self.records {
            out.push_str(&serde_json::to_string(r)?);
            out.push('\n');
        }
        Ok(out)
    }

    pub fn path(&self, rel: &str) -> PathBuf {
        resolve(&self.root, rel)
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const LINE: &str = r#"{"sample_id":"a","features_path":"f.npy","gradients_path":"g.npy","meta_path":"m.json","mask_dir":"masks"}"#;

    #[test]
    fn parses_and_resolves() {
        let text = format!(
            "{LINE}\n\n{}\n",
            LINE.replace("\"a\"", "\"b\"")
                .replace("}", r#","variant_label":"verbose"}"#)
        );
        let m = Manifest::parse(&text, PathBuf::from("/data")).unwrap();
        assert_eq!(m.len(), 2);
        assert_eq!(m.records[1].variant_label, Some(VariantLabel::Verbose));
        assert_eq!(
            m.path(&m.records[0].features_path),
            PathBuf::from("/data/f.npy")
        );
        assert_eq!(
            Manifest::parse(&m.to_jsonl().unwrap(), PathBuf::from("/data")).unwrap(),
            m
        );
    }

    #[test]
    fn rejects_duplicates_and_junk() {
        assert!(matches!(
            Manifest::parse(&format!("{LINE}\n{LINE}\n"), PathBuf::new()),
            Err(Error::Manifest(_))
        ));
        assert!(matches!(
            Manifest::parse("{\"sample_id\": 3}", PathBuf::new()),
            Err(Error::Manifest(_))
        ));
    }
}
