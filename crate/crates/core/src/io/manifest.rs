//! Corpus manifest: `# key=value` header lines, then one tab-separated
//! record per utterance: `id  clean_path  noisy_path  label_path  snr_db`.
//! Paths are relative to the manifest's directory.

use std::collections::BTreeMap;
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use super::{read_file, write_file, IoError, Result};

const FORMAT: &str = "manifest";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Split {
    Train,
    Dev,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Dev, Split::Test];

    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Dev => "dev",
            Split::Test => "test",
        }
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Split {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        Split::ALL
            .into_iter()
            .find(|sp| sp.name() == s)
            .ok_or_else(|| format!("unknown split {s:?} (train, dev or test)"))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ManifestEntry {
    /// `<split>-<index>`, e.g. `dev-0012`.
    pub id: String,
    pub clean: PathBuf,
    pub noisy: PathBuf,
    pub labels: PathBuf,
    pub snr_db: i32,
}

impl ManifestEntry {
    pub fn split(&self) -> Option<Split> {
        self.id.split_once('-').and_then(|(s, _)| s.parse().ok())
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Manifest {
    pub header: BTreeMap<String, String>,
    pub entries: Vec<ManifestEntry>,
}

impl Manifest {
    pub const FILE_NAME: &'static str = "manifest.tsv";

    pub fn split(&self, split: Split) -> Vec<&ManifestEntry> {
        self.entries
            .iter()
            .filter(|e| e.split() == Some(split))
            .collect()
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for (k, v) in &self.header {
            s.push_str(&format!("# {k}={v}\n"));
        }
        for e in &self.entries {
            s.push_str(&format!(
                "{}\t{}\t{}\t{}\t{}\n",
                e.id,
                e.clean.display(),
                e.noisy.display(),
                e.labels.display(),
                e.snr_db
            ));
        }
        s
    }

    pub fn parse(text: &str) -> Result<Self> {
        let bad = |n: usize, why: &str| IoError::Corrupt {
            format: FORMAT,
            reason: format!("line {}: {why}", n + 1),
        };
        let mut m = Manifest::default();
        for (n, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            if let Some(h) = line.strip_prefix('#') {
                if let Some((k, v)) = h.trim().split_once('=') {
                    m.header.insert(k.trim().to_string(), v.trim().to_string());
                }
                continue;
            }
            let f: Vec<&str> = line.split('\t').collect();
            if f.len() != 5 {
                return Err(bad(n, "expected 5 tab-separated fields"));
            }
            let entry = ManifestEntry {
                id: f[0].to_string(),
                clean: f[1].into(),
                noisy: f[2].into(),
                labels: f[3].into(),
                snr_db: f[4]
                    .trim()
                    .parse()
                    .map_err(|_| bad(n, "snr is not an integer"))?,
            };
            if entry.split().is_none() {
                return Err(bad(n, "id must start with train-, dev- or test-"));
            }
            m.entries.push(entry);
        }
        Ok(m)
    }

    pub fn read(path: &Path) -> Result<Self> {
        let bytes = read_file(path)?;
        let text = String::from_utf8(bytes).map_err(|_| IoError::Corrupt {
            format: FORMAT,
            reason: "not UTF-8".into(),
        })?;
        Self::parse(&text)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        write_file(path, self.to_text().as_bytes())
    }
}
