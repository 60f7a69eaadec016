use std::collections::{BTreeMap, BTreeSet};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Role {
    LabeledTarget,
    UnlabeledSource,
    Eval,
}

impl Role {
    pub fn as_str(self) -> &'static str {
        match self {
            Role::LabeledTarget => "labeled_target",
            Role::UnlabeledSource => "unlabeled_source",
            Role::Eval => "eval",
        }
    }

    pub fn requires_labels(self) -> bool {
        !matches!(self, Role::UnlabeledSource)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SamplePath {
    pub image_path: PathBuf,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mask_path: Option<PathBuf>,
    /// JSON list of road polylines to burn into the mask.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub vector_roads_path: Option<PathBuf>,
}

impl SamplePath {
    /// Identifier derived from the image file stem.
    pub fn id(&self) -> String {
        self.image_path
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_else(|| "image".into())
    }

    fn paths(&self) -> impl Iterator<Item = &PathBuf> {
        std::iter::once(&self.image_path)
            .chain(self.mask_path.iter())
            .chain(self.vector_roads_path.iter())
    }
}

/// Declarative description of one dataset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetManifest {
    pub name: String,
    pub resolution_m_per_px: f64,
    pub role: Role,
    pub splits: BTreeMap<String, Vec<SamplePath>>,
    /// Raw label ids that mean "road".
    #[serde(default)]
    pub road_class_ids: BTreeSet<u32>,
    /// Raw label ids that mean "unknown / no data".
    #[serde(default)]
    pub nodata_ids: BTreeSet<u32>,
}

impl DatasetManifest {
    /// Invariant checks that need no filesystem access.
    pub fn validate(&self) -> Result<()> {
        if !(self.resolution_m_per_px > 0.0) || !self.resolution_m_per_px.is_finite() {
            return Err(Error::validation(format!(
                "{}: resolution_m_per_px must be positive, got {}",
                self.name, self.resolution_m_per_px
            )));
        }
        if self.splits.is_empty() {
            return Err(Error::validation(format!("{}: no splits declared", self.name)));
        }
        if let Some((split, _)) = self.splits.iter().find(|(_, s)| s.is_empty()) {
            return Err(Error::validation(format!("{}: split `{split}` is empty", self.name)));
        }
        if let Some(id) = self.road_class_ids.intersection(&self.nodata_ids).next() {
            return Err(Error::validation(format!(
                "{}: label id {id} is both road and nodata",
                self.name
            )));
        }
        if self.role.requires_labels() {
            for (split, samples) in &self.splits {
                if let Some(s) = samples
                    .iter()
                    .find(|s| s.mask_path.is_none() && s.vector_roads_path.is_none())
                {
                    return Err(Error::validation(format!(
                        "{}: sample {} in split `{split}` has no mask or road vectors (role {})",
                        self.name,
                        s.image_path.display(),
                        self.role.as_str()
                    )));
                }
            }
        }
        Ok(())
    }

    pub fn split(&self, name: &str) -> Result<&[SamplePath]> {
        self.splits
            .get(name)
            .map(Vec::as_slice)
            .ok_or_else(|| Error::validation(format!("{}: no split named `{name}`", self.name)))
    }

    fn resolve_against(&mut self, base: &Path) {
        for samples in self.splits.values_mut() {
            for s in samples {
                for p in [
                    Some(&mut s.image_path),
                    s.mask_path.as_mut(),
                    s.vector_roads_path.as_mut(),
                ]
                .into_iter()
                .flatten()
                {
                    if p.is_relative() {
                        *p = base.join(&*p);
                    }
                }
            }
        }
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self)?;
        std::fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
    }
}

/// Reads, validates and resolves a manifest. Relative sample paths are
/// resolved against the manifest's directory and must exist.
pub fn parse_manifest(path: &Path) -> Result<DatasetManifest> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let de = &mut serde_json::Deserializer::from_str(&text);
    let mut manifest: DatasetManifest =
        serde_path_to_error::deserialize(de).map_err(|e| Error::Parse {
            path: path.to_path_buf(),
            key: match e.path().to_string() {
                p if p == "." => "<root>".to_string(),
                p => p,
            },
            message: e.inner().to_string(),
        })?;
    manifest.validate()?;
    let base = path.parent().unwrap_or(Path::new("."));
    manifest.resolve_against(base);
    let missing: Vec<PathBuf> = manifest
        .splits
        .values()
        .flatten()
        .flat_map(SamplePath::paths)
        .filter(|p| !p.exists())
        .cloned()
        .collect();
    if !missing.is_empty() {
        return Err(Error::Ingestion { missing });
    }
    Ok(manifest)
}
