use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::image::RawImage;
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Sample {
    pub path: PathBuf,
    pub label: usize,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SkippedFile {
    pub path: PathBuf,
    pub reason: String,
}

/// Labeled inventory of a `root/<class>/<image>` tree. Classes are sorted
/// lexicographically, samples by class then file name.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub root: PathBuf,
    pub class_names: Vec<String>,
    pub counts: Vec<usize>,
    pub samples: Vec<Sample>,
    pub skipped: Vec<SkippedFile>,
}

fn sorted_entries(dir: &Path) -> Result<Vec<fs::DirEntry>> {
    let mut entries = fs::read_dir(dir)
        .map_err(|e| Error::Dataset(format!("cannot read {}: {e}", dir.display())))?
        .collect::<std::io::Result<Vec<_>>>()?;
    entries.sort_by_key(|e| e.file_name());
    Ok(entries)
}

/// Scans `root`, decoding every file once. Files that fail to decode are
/// listed in `skipped` rather than aborting the scan.
pub fn load_manifest(root: &Path) -> Result<DatasetManifest> {
    let mut class_names = Vec::new();
    let mut counts = Vec::new();
    let mut samples = Vec::new();
    let mut skipped = Vec::new();
    for class_dir in sorted_entries(root)? {
        if !class_dir.file_type()?.is_dir() {
            continue;
        }
        let name = class_dir.file_name().to_string_lossy().into_owned();
        if name.starts_with('.') {
            continue;
        }
        let label = class_names.len();
        let mut count = 0;
        for file in sorted_entries(&class_dir.path())? {
            if !file.file_type()?.is_file() || file.file_name().to_string_lossy().starts_with('.') {
                continue;
            }
            let path = file.path();
            match RawImage::open(&path) {
                Ok(_) => {
                    samples.push(Sample { path, label });
                    count += 1;
                }
                Err(e) => skipped.push(SkippedFile {
                    path,
                    reason: e.to_string(),
                }),
            }
        }
        class_names.push(name);
        counts.push(count);
    }
    if class_names.len() < 2 {
        return Err(Error::Dataset(format!(
            "{} has {} class folder(s); at least 2 are needed",
            root.display(),
            class_names.len()
        )));
    }
    if samples.is_empty() {
        return Err(Error::Dataset(format!("{} contains no readable images", root.display())));
    }
    Ok(DatasetManifest {
        root: root.to_path_buf(),
        class_names,
        counts,
        samples,
        skipped,
    })
}

impl DatasetManifest {
    pub fn num_classes(&self) -> usize {
        self.class_names.len()
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn labels(&self) -> Vec<usize> {
        self.samples.iter().map(|s| s.label).collect()
    }

    /// Names of classes whose folder held no readable image.
    pub fn empty_classes(&self) -> Vec<&str> {
        self.class_names
            .iter()
            .zip(&self.counts)
            .filter(|(_, &c)| c == 0)
            .map(|(n, _)| n.as_str())
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn write_png(path: &Path) {
        RawImage::new(2, 2, vec![128; 12]).unwrap().save_png(path).unwrap();
    }

    #[test]
    fn scan_skips_corrupt_files() {
        let dir = tempfile::tempdir().unwrap();
        for class in ["b_quartz", "a_mica"] {
            fs::create_dir(dir.path().join(class)).unwrap();
        }
        for i in 0..2 {
            write_png(&dir.path().join("a_mica").join(format!("{i}.png")));
        }
        write_png(&dir.path().join("b_quartz").join("x.png"));
        fs::write(dir.path().join("b_quartz").join("broken.jpg"), b"not an image").unwrap();
        let m = load_manifest(dir.path()).unwrap();
        assert_eq!(m.class_names, vec!["a_mica", "b_quartz"]);
        assert_eq!(m.counts, vec![2, 1]);
        assert_eq!(m.len(), 3);
        assert_eq!(m.skipped.len(), 1);
        assert!(m.skipped[0].path.ends_with("broken.jpg"));
    }

    #[test]
    fn needs_two_classes() {
        let dir = tempfile::tempdir().unwrap();
        fs::create_dir(dir.path().join("only")).unwrap();
        write_png(&dir.path().join("only").join("a.png"));
        assert!(load_manifest(dir.path()).is_err());
        assert!(load_manifest(&dir.path().join("missing")).is_err());
    }

    #[test]
    fn empty_class_is_reported() {
        let dir = tempfile::tempdir().unwrap();
        fs::create_dir(dir.path().join("a")).unwrap();
        fs::create_dir(dir.path().join("b")).unwrap();
        write_png(&dir.path().join("a").join("1.png"));
        let m = load_manifest(dir.path()).unwrap();
        assert_eq!(m.empty_classes(), vec!["b"]);
    }
}
