//! On-disk ranked groups and enhancement pairs.
//!
//! ```text
//! root/
//!   manifest.json
//!   groups/<gid>/ranking.json      filenames, best first
//!   groups/<gid>/images/*.png
//!   pairs/input/<name>.png
//!   pairs/gt/<name>.png
//! ```

mod synth;

use std::collections::BTreeSet;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::ImageTensor;

pub use synth::{base_image, hsv_saturation, synth_generate, synth_groups, DegradationSpec, SynthOptions};

pub const MANIFEST_SCHEMA: &str = "uranker-dataset/1";

/// Image filenames of one group, best first.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RankedGroup {
    pub id: String,
    pub images: Vec<String>,
}

impl RankedGroup {
    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    pub fn dir(&self, root: &Path) -> PathBuf {
        root.join("groups").join(&self.id)
    }

    pub fn image_path(&self, root: &Path, i: usize) -> PathBuf {
        self.dir(root).join("images").join(&self.images[i])
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatasetManifest {
    #[serde(skip)]
    pub root: PathBuf,
    pub schema_version: String,
    pub groups: Vec<RankedGroup>,
    /// Names of enhancement pairs, without extension.
    #[serde(default)]
    pub pairs: Vec<String>,
}

impl DatasetManifest {
    pub fn pair_paths(&self, name: &str) -> (PathBuf, PathBuf) {
        let dir = self.root.join("pairs");
        (
            dir.join("input").join(format!("{name}.png")),
            dir.join("gt").join(format!("{name}.png")),
        )
    }

    pub fn group(&self, id: &str) -> Option<&RankedGroup> {
        self.groups.iter().find(|g| g.id == id)
    }

    pub fn write(&self) -> Result<()> {
        let path = self.root.join("manifest.json");
        let text = serde_json::to_string_pretty(self)?;
        std::fs::write(&path, text).map_err(|e| Error::io(&path, e))
    }
}

/// A group with decoded images, best first.
#[derive(Debug, Clone)]
pub struct ImageGroup {
    pub id: String,
    pub images: Vec<ImageTensor>,
}

#[derive(Debug, Clone)]
pub struct ImagePair {
    pub name: String,
    pub input: ImageTensor,
    pub gt: ImageTensor,
}

fn sorted_entries(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut out: Vec<PathBuf> = std::fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .map(|e| e.map(|e| e.path()).map_err(|err| Error::io(dir, err)))
        .collect::<Result<_>>()?;
    out.sort();
    Ok(out)
}

fn check_image(path: &Path) -> Result<(u32, u32)> {
    if !path.is_file() {
        return Err(Error::dataset(path, "missing image file"));
    }
    image::image_dimensions(path).map_err(|e| Error::dataset(path, format!("unreadable image: {e}")))
}

fn load_group(root: &Path, dir: &Path) -> Result<RankedGroup> {
    let id = dir
        .file_name()
        .and_then(|n| n.to_str())
        .ok_or_else(|| Error::dataset(dir, "group directory name is not UTF-8"))?
        .to_string();
    let ranking = dir.join("ranking.json");
    if !ranking.is_file() {
        return Err(Error::dataset(&ranking, "missing ranking file"));
    }
    let text = std::fs::read_to_string(&ranking).map_err(|e| Error::io(&ranking, e))?;
    let images: Vec<String> = serde_json::from_str(&text)
        .map_err(|e| Error::dataset(&ranking, format!("expected a list of filenames: {e}")))?;
    let mut seen = BTreeSet::new();
    for name in &images {
        if !seen.insert(name) {
            return Err(Error::dataset(&ranking, format!("duplicate entry {name:?}")));
        }
    }
    if images.len() < 2 {
        return Err(Error::dataset(&ranking, format!("{} images; a group needs at least 2", images.len())));
    }
    let group = RankedGroup { id, images };
    for i in 0..group.len() {
        check_image(&group.image_path(root, i))?;
    }
    Ok(group)
}

/// Loads and validates a dataset directory. Groups are validated in
/// parallel; the first error names the offending file.
pub fn load_dataset(root: &Path) -> Result<DatasetManifest> {
    if !root.is_dir() {
        return Err(Error::dataset(root, "dataset root is not a directory"));
    }
    let manifest_path = root.join("manifest.json");
    if manifest_path.is_file() {
        let text = std::fs::read_to_string(&manifest_path).map_err(|e| Error::io(&manifest_path, e))?;
        let v: serde_json::Value = serde_json::from_str(&text)
            .map_err(|e| Error::dataset(&manifest_path, e.to_string()))?;
        let found = v.get("schema_version").and_then(|s| s.as_str()).unwrap_or("");
        if found != MANIFEST_SCHEMA {
            return Err(Error::dataset(
                &manifest_path,
                format!("schema {found:?}, expected {MANIFEST_SCHEMA:?}"),
            ));
        }
    }

    let groups_dir = root.join("groups");
    let groups = if groups_dir.is_dir() {
        let dirs: Vec<PathBuf> = sorted_entries(&groups_dir)?.into_iter().filter(|p| p.is_dir()).collect();
        dirs.par_iter().map(|d| load_group(root, d)).collect::<Result<Vec<_>>>()?
    } else {
        Vec::new()
    };

    let input_dir = root.join("pairs").join("input");
    let mut pairs = Vec::new();
    if input_dir.is_dir() {
        for p in sorted_entries(&input_dir)? {
            if p.extension().and_then(|e| e.to_str()) != Some("png") {
                continue;
            }
            let name = p.file_stem().and_then(|s| s.to_str()).unwrap_or_default().to_string();
            pairs.push(name);
        }
    }
    let manifest = DatasetManifest {
        root: root.to_path_buf(),
        schema_version: MANIFEST_SCHEMA.into(),
        groups,
        pairs,
    };
    for name in &manifest.pairs {
        let (input, gt) = manifest.pair_paths(name);
        let a = check_image(&input)?;
        let b = check_image(&gt)?;
        if a != b {
            return Err(Error::dataset(&gt, format!("size {b:?} differs from input {a:?}")));
        }
    }
    if manifest.groups.is_empty() && manifest.pairs.is_empty() {
        return Err(Error::dataset(root, "no groups and no pairs"));
    }
    Ok(manifest)
}

/// Seeded split into `n_train` training groups and the rest. Each part keeps
/// the manifest order.
pub fn split_dataset(
    groups: &[RankedGroup],
    n_train: usize,
    seed: u64,
) -> Result<(Vec<RankedGroup>, Vec<RankedGroup>)> {
    if n_train >= groups.len() {
        return Err(Error::InvalidInput(format!(
            "n_train {n_train} must be below the number of groups {}",
            groups.len()
        )));
    }
    let mut idx: Vec<usize> = (0..groups.len()).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let mut train_idx = idx[..n_train].to_vec();
    let mut test_idx = idx[n_train..].to_vec();
    train_idx.sort_unstable();
    test_idx.sort_unstable();
    Ok((
        train_idx.into_iter().map(|i| groups[i].clone()).collect(),
        test_idx.into_iter().map(|i| groups[i].clone()).collect(),
    ))
}

pub fn load_images(root: &Path, groups: &[RankedGroup]) -> Result<Vec<ImageGroup>> {
    groups
        .par_iter()
        .map(|g| {
            let images = (0..g.len())
                .map(|i| ImageTensor::load_png(&g.image_path(root, i)))
                .collect::<Result<Vec<_>>>()?;
            Ok(ImageGroup {
                id: g.id.clone(),
                images,
            })
        })
        .collect()
}

pub fn load_pairs(manifest: &DatasetManifest) -> Result<Vec<ImagePair>> {
    manifest
        .pairs
        .par_iter()
        .map(|name| {
            let (input, gt) = manifest.pair_paths(name);
            Ok(ImagePair {
                name: name.clone(),
                input: ImageTensor::load_png(&input)?,
                gt: ImageTensor::load_png(&gt)?,
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn fixture(root: &Path, groups: &[(&str, &[&str])]) {
        for (id, names) in groups {
            let dir = root.join("groups").join(id).join("images");
            std::fs::create_dir_all(&dir).unwrap();
            for (i, n) in names.iter().enumerate() {
                ImageTensor::filled(4, 4, i as f32 * 0.1).save_png(&dir.join(n)).unwrap();
            }
            let ranking = serde_json::to_string(names).unwrap();
            std::fs::write(root.join("groups").join(id).join("ranking.json"), ranking).unwrap();
        }
    }

    #[test]
    fn loads_well_formed_groups() {
        let dir = tempfile::tempdir().unwrap();
        fixture(dir.path(), &[("g0", &["a.png", "b.png", "c.png"]), ("g1", &["x.png", "y.png"])]);
        let m = load_dataset(dir.path()).unwrap();
        assert_eq!(m.groups.len(), 2);
        assert_eq!(m.groups[0].len(), 3);
        assert_eq!(m.groups[1].images, vec!["x.png", "y.png"]);
        let imgs = load_images(dir.path(), &m.groups).unwrap();
        assert_eq!(imgs[0].images.len(), 3);
    }

    #[test]
    fn missing_file_is_named() {
        let dir = tempfile::tempdir().unwrap();
        fixture(dir.path(), &[("g0", &["a.png", "b.png"])]);
        std::fs::write(
            dir.path().join("groups/g0/ranking.json"),
            r#"["a.png", "b.png", "ghost.png"]"#,
        )
        .unwrap();
        let err = load_dataset(dir.path()).unwrap_err();
        assert!(err.to_string().contains("ghost.png"), "{err}");
    }

    #[test]
    fn duplicate_entry_rejected() {
        let dir = tempfile::tempdir().unwrap();
        fixture(dir.path(), &[("g0", &["a.png", "b.png"])]);
        std::fs::write(dir.path().join("groups/g0/ranking.json"), r#"["a.png", "a.png"]"#).unwrap();
        let err = load_dataset(dir.path()).unwrap_err();
        assert!(err.to_string().contains("duplicate"), "{err}");
    }

    #[test]
    fn missing_ranking_and_unreadable_image() {
        let dir = tempfile::tempdir().unwrap();
        fixture(dir.path(), &[("g0", &["a.png", "b.png"])]);
        std::fs::write(dir.path().join("groups/g0/images/b.png"), b"not a png").unwrap();
        let err = load_dataset(dir.path()).unwrap_err();
        assert!(err.to_string().contains("b.png"), "{err}");

        let dir = tempfile::tempdir().unwrap();
        fixture(dir.path(), &[("g0", &["a.png", "b.png"])]);
        std::fs::remove_file(dir.path().join("groups/g0/ranking.json")).unwrap();
        let err = load_dataset(dir.path()).unwrap_err();
        assert!(err.to_string().contains("ranking.json"), "{err}");
    }

    #[test]
    fn split_is_seeded_disjoint_and_exhaustive() {
        let groups: Vec<RankedGroup> = (0..890)
            .map(|i| RankedGroup {
                id: format!("g{i}"),
                images: vec!["a".into(), "b".into()],
            })
            .collect();
        let (train, test) = split_dataset(&groups, 800, 3).unwrap();
        assert_eq!((train.len(), test.len()), (800, 90));
        let (train2, test2) = split_dataset(&groups, 800, 3).unwrap();
        assert_eq!(train, train2);
        assert_eq!(test, test2);
        let mut ids: Vec<&str> = train.iter().chain(&test).map(|g| g.id.as_str()).collect();
        ids.sort_unstable();
        ids.dedup();
        assert_eq!(ids.len(), 890);
        assert!(split_dataset(&groups, 890, 0).is_err());
    }
}
