use std::collections::HashSet;
use std::fmt;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::DatasetError;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Validation,
    Test,
    Unassigned,
}

impl Split {
    pub const ALL: [Split; 4] = [Split::Train, Split::Validation, Split::Test, Split::Unassigned];

    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Validation => "validation",
            Split::Test => "test",
            Split::Unassigned => "unassigned",
        }
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for Split {
    type Err = DatasetError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "train" => Ok(Split::Train),
            "validation" | "val" => Ok(Split::Validation),
            "test" => Ok(Split::Test),
            "unassigned" => Ok(Split::Unassigned),
            other => Err(DatasetError::Invalid(format!("unknown split label `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Origin {
    Original,
    Augmented,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub path: String,
    pub class_id: usize,
    pub class_name: String,
    pub split: Split,
    pub origin: Origin,
    pub parent: Option<String>,
    pub source_tag: String,
}

impl ManifestEntry {
    pub fn original(path: impl Into<String>, class_id: usize, class_name: impl Into<String>) -> Self {
        Self {
            path: path.into(),
            class_id,
            class_name: class_name.into(),
            split: Split::Unassigned,
            origin: Origin::Original,
            parent: None,
            source_tag: String::new(),
        }
    }
}

#[derive(Debug, Default, Serialize, Deserialize)]
struct ManifestMeta {
    class_names: Vec<String>,
    #[serde(default)]
    provenance: Vec<String>,
}

/// A catalog of images with class labels and split assignments.
///
/// Persisted as JSON Lines (one entry per line) plus a `<file>.meta.json`
/// sidecar holding the ordered class names and provenance stamps.
#[derive(Debug, Clone, PartialEq)]
pub struct Manifest {
    class_names: Vec<String>,
    entries: Vec<ManifestEntry>,
    provenance: Vec<String>,
    base_dir: Option<PathBuf>,
}

impl Manifest {
    pub fn new(class_names: Vec<String>) -> Result<Self, DatasetError> {
        let mut seen = HashSet::new();
        for name in &class_names {
            if !seen.insert(name.as_str()) {
                return Err(DatasetError::Invalid(format!("duplicate class name `{name}`")));
            }
        }
        Ok(Self {
            class_names,
            entries: Vec::new(),
            provenance: Vec::new(),
            base_dir: None,
        })
    }

    pub fn with_entries(class_names: Vec<String>, entries: Vec<ManifestEntry>) -> Result<Self, DatasetError> {
        let mut m = Self::new(class_names)?;
        for e in entries {
            m.push(e)?;
        }
        Ok(m)
    }

    pub fn push(&mut self, entry: ManifestEntry) -> Result<(), DatasetError> {
        self.check_entry(&entry)?;
        self.entries.push(entry);
        Ok(())
    }

    fn check_entry(&self, e: &ManifestEntry) -> Result<(), DatasetError> {
        match self.class_names.get(e.class_id) {
            None => {
                return Err(DatasetError::Invalid(format!(
                    "{}: class id {} out of range for {} classes",
                    e.path,
                    e.class_id,
                    self.class_names.len()
                )))
            }
            Some(name) if *name != e.class_name => {
                return Err(DatasetError::Invalid(format!(
                    "{}: class id {} is `{}`, entry says `{}`",
                    e.path, e.class_id, name, e.class_name
                )))
            }
            _ => {}
        }
        match (e.origin, &e.parent) {
            (Origin::Augmented, None) => Err(DatasetError::Invalid(format!(
                "{}: augmented entry without a parent",
                e.path
            ))),
            (Origin::Original, Some(_)) => Err(DatasetError::Invalid(format!(
                "{}: original entry with a parent",
                e.path
            ))),
            _ => Ok(()),
        }
    }

    pub fn class_names(&self) -> &[String] {
        &self.class_names
    }

    pub fn num_classes(&self) -> usize {
        self.class_names.len()
    }

    pub fn entries(&self) -> &[ManifestEntry] {
        &self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn provenance(&self) -> &[String] {
        &self.provenance
    }

    pub fn stamp(&mut self, note: impl Into<String>) {
        self.provenance.push(note.into());
    }

    pub(crate) fn entries_mut(&mut self) -> &mut [ManifestEntry] {
        &mut self.entries
    }

    pub fn base_dir(&self) -> Option<&Path> {
        self.base_dir.as_deref()
    }

    pub fn set_base_dir(&mut self, dir: Option<PathBuf>) {
        self.base_dir = dir;
    }

    /// Resolves an entry path against the directory the manifest was loaded from.
    pub fn resolve(&self, path: &str) -> PathBuf {
        let p = Path::new(path);
        match &self.base_dir {
            Some(base) if p.is_relative() => base.join(p),
            _ => p.to_path_buf(),
        }
    }

    /// Copy whose relative entry and parent paths resolve from `dir`. Paths
    /// outside `dir` become absolute.
    pub fn rebased(&self, dir: &Path) -> Self {
        let abs = |p: &Path| std::path::absolute(p).unwrap_or_else(|_| p.to_path_buf());
        let target = abs(dir);
        let rebase = |path: &str| {
            let full = abs(&self.resolve(path));
            full.strip_prefix(&target).unwrap_or(&full).to_string_lossy().into_owned()
        };
        let mut out = self.clone();
        for e in &mut out.entries {
            e.path = rebase(&e.path);
            e.parent = e.parent.as_deref().map(rebase);
        }
        out.base_dir = Some(dir.to_path_buf());
        out
    }

    pub fn in_split(&self, split: Split) -> impl Iterator<Item = (usize, &ManifestEntry)> {
        self.entries.iter().enumerate().filter(move |(_, e)| e.split == split)
    }

    pub fn to_jsonl(&self) -> String {
        let mut out = String::new();
        for e in &self.entries {
            out.push_str(&serde_json::to_string(e).expect("entries serialize"));
            out.push('\n');
        }
        out
    }

    /// Parses JSON Lines. Without explicit class names, names are recovered
    /// from the entries (ids must then be dense).
    pub fn from_jsonl(text: &str, class_names: Option<Vec<String>>) -> Result<Self, DatasetError> {
        let mut entries = Vec::new();
        for (i, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let e: ManifestEntry = serde_json::from_str(line)
                .map_err(|err| DatasetError::Invalid(format!("manifest line {}: {err}", i + 1)))?;
            entries.push(e);
        }
        let names = match class_names {
            Some(n) => n,
            None => {
                let k = entries.iter().map(|e| e.class_id + 1).max().unwrap_or(0);
                let mut names: Vec<Option<String>> = vec![None; k];
                for e in &entries {
                    names[e.class_id].get_or_insert_with(|| e.class_name.clone());
                }
                names
                    .into_iter()
                    .enumerate()
                    .map(|(i, n)| n.ok_or_else(|| DatasetError::Invalid(format!("no entry names class id {i}"))))
                    .collect::<Result<_, _>>()?
            }
        };
        Self::with_entries(names, entries)
    }

    pub fn meta_path(path: &Path) -> PathBuf {
        let mut s = path.as_os_str().to_owned();
        s.push(".meta.json");
        PathBuf::from(s)
    }

    pub fn save(&self, path: &Path) -> Result<(), DatasetError> {
        std::fs::write(path, self.to_jsonl()).map_err(|e| DatasetError::io(path, e))?;
        let meta = ManifestMeta {
            class_names: self.class_names.clone(),
            provenance: self.provenance.clone(),
        };
        let meta_path = Self::meta_path(path);
        let text = serde_json::to_string_pretty(&meta).expect("meta serializes");
        std::fs::write(&meta_path, text + "\n").map_err(|e| DatasetError::io(&meta_path, e))
    }

    pub fn load(path: &Path) -> Result<Self, DatasetError> {
        let text = std::fs::read_to_string(path).map_err(|e| DatasetError::io(path, e))?;
        let meta_path = Self::meta_path(path);
        let meta: Option<ManifestMeta> = match std::fs::read_to_string(&meta_path) {
            Ok(t) => Some(
                serde_json::from_str(&t)
                    .map_err(|e| DatasetError::Invalid(format!("{}: {e}", meta_path.display())))?,
            ),
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => None,
            Err(e) => return Err(DatasetError::io(&meta_path, e)),
        };
        let (names, provenance) = match meta {
            Some(m) => (Some(m.class_names), m.provenance),
            None => (None, Vec::new()),
        };
        let mut m = Self::from_jsonl(&text, names)?;
        m.provenance = provenance;
        m.base_dir = path.parent().map(Path::to_path_buf);
        Ok(m)
    }

    /// Builds a manifest from a `root/<class-name>/<image>` tree. Classes are
    /// sorted by directory name; files within a class by file name.
    pub fn scan_class_dirs(root: &Path, source_tag: &str) -> Result<Self, DatasetError> {
        let mut classes: Vec<(String, PathBuf)> = std::fs::read_dir(root)
            .map_err(|e| DatasetError::io(root, e))?
            .filter_map(|d| d.ok())
            .filter(|d| d.path().is_dir())
            .map(|d| (d.file_name().to_string_lossy().into_owned(), d.path()))
            .collect();
        classes.sort();
        let mut m = Self::new(classes.iter().map(|(n, _)| n.clone()).collect())?;
        for (id, (name, dir)) in classes.iter().enumerate() {
            let mut files: Vec<PathBuf> = std::fs::read_dir(dir)
                .map_err(|e| DatasetError::io(dir, e))?
                .filter_map(|d| d.ok())
                .map(|d| d.path())
                .filter(|p| {
                    matches!(
                        p.extension().and_then(|e| e.to_str()).map(|e| e.to_ascii_lowercase()).as_deref(),
                        Some("png" | "jpg" | "jpeg")
                    )
                })
                .collect();
            files.sort();
            for f in files {
                let rel = f.strip_prefix(root).unwrap_or(&f);
                let mut e = ManifestEntry::original(rel.to_string_lossy(), id, name.clone());
                e.source_tag = source_tag.to_string();
                m.push(e)?;
            }
        }
        m.base_dir = Some(root.to_path_buf());
        Ok(m)
    }
}

/// Per-class counts, optionally restricted to one split.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ClassHistogram {
    pub class_names: Vec<String>,
    pub counts: Vec<usize>,
    pub total: usize,
}

pub fn class_histogram(m: &Manifest, split: Option<Split>) -> ClassHistogram {
    let mut counts = vec![0; m.num_classes()];
    for e in m.entries() {
        if split.is_none_or(|s| s == e.split) {
            counts[e.class_id] += 1;
        }
    }
    ClassHistogram {
        class_names: m.class_names().to_vec(),
        total: counts.iter().sum(),
        counts,
    }
}

impl fmt::Display for ClassHistogram {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let w = self.class_names.iter().map(|n| n.len()).max().unwrap_or(0).max(5);
        for (name, count) in self.class_names.iter().zip(&self.counts) {
            writeln!(f, "{name:<w$}  {count:>8}")?;
        }
        writeln!(f, "{:<w$}  {:>8}", "TOTAL", self.total)
    }
}
