//! Line-oriented corpus manifests.
//!
//! ```text
//! # patchwise-manifest v1
//! # seed<TAB>7
//! # class<TAB>0<TAB>normal
//! # class<TAB>1<TAB>transverse
//! # checksum<TAB><sha256 of every other line>
//! normal/n_000.png<TAB>normal<TAB>train
//! ```
//!
//! Relative paths resolve against the manifest's directory.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::patches::Split;

pub const MAGIC: &str = "# patchwise-manifest v1";
pub const NORMAL: &str = "normal";

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ManifestEntry {
    /// Relative to the manifest root, `/`-separated, or absolute.
    pub path: String,
    pub class: String,
    pub split: Split,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct CorpusManifest {
    /// Directory relative paths resolve against; not serialized.
    pub root: PathBuf,
    pub seed: u64,
    /// Index order; `normal`, when present, is first.
    pub classes: Vec<String>,
    pub entries: Vec<ManifestEntry>,
    /// False for corpora without normal images.
    pub detection_usable: bool,
}

fn manifest_err(msg: impl Into<String>) -> Error {
    Error::Manifest(msg.into())
}

impl CorpusManifest {
    pub fn new(root: impl Into<PathBuf>, seed: u64, classes: Vec<String>, entries: Vec<ManifestEntry>) -> Result<Self> {
        let detection_usable = classes.first().is_some_and(|c| c == NORMAL)
            && entries.iter().any(|e| e.class == NORMAL);
        let m = Self {
            root: root.into(),
            seed,
            classes,
            entries,
            detection_usable,
        };
        m.validate()?;
        Ok(m)
    }

    pub fn validate(&self) -> Result<()> {
        if self.classes.is_empty() {
            return Err(manifest_err("manifest declares no classes"));
        }
        let mut seen = std::collections::HashSet::new();
        for c in &self.classes {
            if !seen.insert(c) {
                return Err(manifest_err(format!("duplicate class {c:?}")));
            }
            if c.is_empty() || c.contains(['\t', '\n']) {
                return Err(manifest_err(format!("invalid class name {c:?}")));
            }
        }
        if let Some(pos) = self.classes.iter().position(|c| c == NORMAL) {
            if pos != 0 {
                return Err(manifest_err("class normal must have index 0"));
            }
        }
        for e in &self.entries {
            if !seen.contains(&e.class) {
                return Err(manifest_err(format!("entry {} has undeclared class {:?}", e.path, e.class)));
            }
            if e.path.is_empty() || e.path.contains(['\t', '\n']) {
                return Err(manifest_err(format!("invalid path {:?}", e.path)));
            }
        }
        Ok(())
    }

    pub fn class_index(&self, name: &str) -> Option<usize> {
        self.classes.iter().position(|c| c == name)
    }

    pub fn normal_class(&self) -> Option<usize> {
        self.class_index(NORMAL)
    }

    pub fn resolve(&self, entry: &ManifestEntry) -> PathBuf {
        self.root.join(entry.path.as_str())
    }

    pub fn split(&self, split: Split) -> impl Iterator<Item = &ManifestEntry> {
        self.entries.iter().filter(move |e| e.split == split)
    }

    /// Entry count per class, in class order.
    pub fn class_counts(&self, split: Option<Split>) -> Vec<usize> {
        let mut counts = vec![0; self.classes.len()];
        for e in self.entries.iter().filter(|e| split.is_none_or(|s| e.split == s)) {
            counts[self.class_index(&e.class).expect("validated class")] += 1;
        }
        counts
    }

    /// Fails on the first entry whose file is missing.
    pub fn verify_paths(&self) -> Result<()> {
        for e in &self.entries {
            let p = self.resolve(e);
            if !p.is_file() {
                return Err(manifest_err(format!("missing file {}", p.display())));
            }
        }
        Ok(())
    }

    fn hashed_text(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "{MAGIC}");
        let _ = writeln!(s, "# seed\t{}", self.seed);
        for (i, c) in self.classes.iter().enumerate() {
            let _ = writeln!(s, "# class\t{i}\t{c}");
        }
        if !self.detection_usable {
            let _ = writeln!(s, "# detection-usable\tfalse");
        }
        for e in &self.entries {
            let _ = writeln!(s, "{}\t{}\t{}", e.path, e.class, e.split.as_str());
        }
        s
    }

    /// Hex SHA-256 of the serialized manifest without its checksum line.
    pub fn checksum(&self) -> String {
        hex::encode(Sha256::digest(self.hashed_text().as_bytes()))
    }

    pub fn to_text(&self) -> String {
        let text = self.hashed_text();
        let body_start = text.lines().take_while(|l| l.starts_with('#')).map(|l| l.len() + 1).sum::<usize>();
        let mut out = text[..body_start].to_string();
        let _ = writeln!(out, "# checksum\t{}", self.checksum());
        out.push_str(&text[body_start..]);
        out
    }

    /// Parses manifest text; relative paths resolve against `root`.
    pub fn parse(text: &str, root: impl Into<PathBuf>) -> Result<Self> {
        let mut lines = text.lines();
        if lines.next() != Some(MAGIC) {
            return Err(manifest_err("missing manifest header"));
        }
        let mut seed = None;
        let mut classes = BTreeMap::new();
        let mut checksum = None;
        let mut detection_usable = true;
        let mut entries = Vec::new();
        for (n, line) in lines.enumerate() {
            let fields: Vec<&str> = line.split('\t').collect();
            let bad = || manifest_err(format!("malformed line {}: {line:?}", n + 2));
            if line.starts_with('#') {
                match fields.as_slice() {
                    ["# seed", v] => seed = Some(v.parse().map_err(|_| bad())?),
                    ["# class", i, name] => {
                        classes.insert(i.parse::<usize>().map_err(|_| bad())?, name.to_string());
                    }
                    ["# checksum", v] => checksum = Some(v.to_string()),
                    ["# detection-usable", "false"] => detection_usable = false,
                    _ => return Err(bad()),
                }
                continue;
            }
            if line.is_empty() {
                continue;
            }
            match fields.as_slice() {
                [path, class, split] => entries.push(ManifestEntry {
                    path: path.to_string(),
                    class: class.to_string(),
                    split: split.parse().map_err(|_| bad())?,
                }),
                _ => return Err(bad()),
            }
        }
        if classes.keys().copied().ne(0..classes.len()) {
            return Err(manifest_err("class indices must be contiguous from 0"));
        }
        let m = Self {
            root: root.into(),
            seed: seed.ok_or_else(|| manifest_err("missing seed"))?,
            classes: classes.into_values().collect(),
            entries,
            detection_usable,
        };
        m.validate()?;
        match checksum {
            Some(c) if c == m.checksum() => Ok(m),
            Some(_) => Err(manifest_err("checksum mismatch")),
            None => Err(manifest_err("missing checksum")),
        }
    }

    /// Reads a manifest and checks that every listed file exists.
    pub fn read(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| manifest_err(format!("{}: {e}", path.display())))?;
        let root = path.parent().map(Path::to_path_buf).unwrap_or_default();
        let m = Self::parse(&text, root).map_err(|e| manifest_err(format!("{}: {e}", path.display())))?;
        m.verify_paths()?;
        Ok(m)
    }

    /// Writes the manifest to `path`. Entries outside the new directory are
    /// stored as absolute paths.
    pub fn write(&self, path: &Path) -> Result<()> {
        let dir = path.parent().map(Path::to_path_buf).unwrap_or_default();
        std::fs::create_dir_all(&dir)?;
        let rebased = self.rebased(&dir)?;
        std::fs::write(path, rebased.to_text())?;
        Ok(())
    }

    /// The same manifest with paths relative to `root` where possible.
    pub fn rebased(&self, root: &Path) -> Result<Self> {
        let same = absolute(&self.root)? == absolute(root)?;
        let mut out = self.clone();
        out.root = root.to_path_buf();
        if same {
            return Ok(out);
        }
        let new_root = absolute(root)?;
        for e in &mut out.entries {
            let abs = absolute(&self.root.join(e.path.as_str()))?;
            e.path = match abs.strip_prefix(&new_root) {
                Ok(rel) => to_slash(rel),
                Err(_) => abs.to_string_lossy().into_owned(),
            };
        }
        Ok(out)
    }

    /// A manifest over a subset of entries sharing this one's classes.
    pub fn with_entries(&self, entries: Vec<ManifestEntry>) -> Self {
        let mut m = self.clone();
        m.entries = entries;
        m
    }
}

fn absolute(p: &Path) -> Result<PathBuf> {
    Ok(std::path::absolute(p)?)
}

/// `/`-separated form of a relative path.
pub fn to_slash(p: &Path) -> String {
    p.components()
        .map(|c| c.as_os_str().to_string_lossy().into_owned())
        .collect::<Vec<_>>()
        .join("/")
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> CorpusManifest {
        CorpusManifest::new(
            "/data",
            3,
            vec!["normal".into(), "crack".into()],
            vec![
                ManifestEntry {
                    path: "normal/a.png".into(),
                    class: "normal".into(),
                    split: Split::Train,
                },
                ManifestEntry {
                    path: "crack/b.png".into(),
                    class: "crack".into(),
                    split: Split::Test,
                },
            ],
        )
        .unwrap()
    }

    #[test]
    fn text_round_trip_keeps_checksum() {
        let m = sample();
        let text = m.to_text();
        assert!(text.starts_with(MAGIC));
        let back = CorpusManifest::parse(&text, "/data").unwrap();
        assert_eq!(back, m);
        assert_eq!(back.checksum(), m.checksum());
        assert_eq!(back.class_counts(None), vec![1, 1]);
        assert_eq!(back.class_counts(Some(Split::Train)), vec![1, 0]);
    }

    #[test]
    fn tampering_is_detected() {
        let text = sample().to_text().replace("crack/b.png\tcrack\ttest", "crack/b.png\tcrack\ttrain");
        assert!(matches!(CorpusManifest::parse(&text, "/"), Err(Error::Manifest(_))));
    }

    #[test]
    fn rejects_bad_structure() {
        let mut m = sample();
        m.classes = vec!["crack".into(), "normal".into()];
        assert!(m.validate().is_err());
        let mut m = sample();
        m.entries[0].class = "pothole".into();
        assert!(m.validate().is_err());
        assert!(CorpusManifest::parse("nonsense", "/").is_err());
    }

    #[test]
    fn write_rebases_and_read_verifies_files() {
        let dir = tempfile::tempdir().unwrap();
        let data = dir.path().join("data");
        std::fs::create_dir_all(data.join("normal")).unwrap();
        std::fs::create_dir_all(data.join("crack")).unwrap();
        std::fs::write(data.join("normal/a.png"), b"x").unwrap();
        let mut m = sample();
        m.root = data.clone();
        let out = dir.path().join("elsewhere/m.tsv");
        m.write(&out).unwrap();
        let text = std::fs::read_to_string(&out).unwrap();
        assert!(text.contains(&data.join("normal/a.png").to_string_lossy().into_owned()));
        // crack/b.png is missing on disk.
        assert!(matches!(CorpusManifest::read(&out), Err(Error::Manifest(_))));
        std::fs::write(data.join("crack/b.png"), b"x").unwrap();
        let back = CorpusManifest::read(&out).unwrap();
        assert_eq!(back.resolve(&back.entries[1]), data.join("crack/b.png"));
    }

    #[test]
    fn crack_only_corpus_is_not_detection_usable() {
        let m = CorpusManifest::new("/", 0, vec!["crack".into()], vec![]).unwrap();
        assert!(!m.detection_usable);
        assert!(m.to_text().contains("# detection-usable\tfalse"));
        assert!(!CorpusManifest::parse(&m.to_text(), "/").unwrap().detection_usable);
    }
}
