//! Dataset directories: `manifest.json`, `images/<split>/<index>.cdt` (f32
//! CDT1 blocks) and `labels/<split>/<index>.u8` (raw row-major class bytes).

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{
    build_eval_split, build_source, build_stream, cyclic_schedule, DomainSpec, EvalChannel, ManifestEntry,
    SceneSize, ScheduleEntry, Stream, StreamImages,
};
use crate::error::{Error, Result};
use crate::tensor::{Shape, Tensor};

pub const DATASET_FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    SourceTrain,
    SourceVal,
    Stream,
    Eval,
}

impl Split {
    pub const ALL: [Split; 4] = [Split::SourceTrain, Split::SourceVal, Split::Stream, Split::Eval];

    pub const fn name(self) -> &'static str {
        match self {
            Split::SourceTrain => "source_train",
            Split::SourceVal => "source_val",
            Split::Stream => "stream",
            Split::Eval => "eval",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DataConfig {
    pub size: SceneSize,
    pub seed: u64,
    pub domains: Vec<DomainSpec>,
    pub schedule: Vec<ScheduleEntry>,
    pub source_train: usize,
    pub source_val: usize,
    pub eval_per_domain: usize,
}

impl Default for DataConfig {
    fn default() -> Self {
        let domains = DomainSpec::defaults();
        DataConfig {
            size: SceneSize::default(),
            seed: 0,
            schedule: cyclic_schedule(&domains, 200, 10),
            domains,
            source_train: 512,
            source_val: 64,
            eval_per_domain: 64,
        }
    }
}

impl DataConfig {
    pub fn validate(&self) -> Result<()> {
        if self.domains.is_empty() {
            return Err(Error::InvalidConfig("no domains declared".into()));
        }
        for (i, d) in self.domains.iter().enumerate() {
            d.validate()?;
            if self.domains[..i].iter().any(|o| o.name == d.name) {
                return Err(Error::InvalidConfig(format!("domain '{}' declared twice", d.name)));
            }
        }
        for e in &self.schedule {
            if !self.domains.iter().any(|d| d.name == e.domain) {
                return Err(Error::InvalidConfig(format!(
                    "schedule references undeclared domain '{}'",
                    e.domain
                )));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub config: DataConfig,
    pub splits: BTreeMap<Split, Stream>,
}

impl Dataset {
    pub fn split(&self, split: Split) -> &Stream {
        &self.splits[&split]
    }
}

pub fn build_dataset(config: &DataConfig) -> Result<Dataset> {
    config.validate()?;
    let mut splits = BTreeMap::new();
    splits.insert(Split::SourceTrain, build_source(config.source_train, config.size, config.seed, 3)?);
    splits.insert(Split::SourceVal, build_source(config.source_val, config.size, config.seed, 4)?);
    splits.insert(Split::Stream, build_stream(&config.domains, &config.schedule, config.size, config.seed)?);
    splits.insert(
        Split::Eval,
        build_eval_split(&config.domains, config.eval_per_domain, config.size, config.seed)?,
    );
    Ok(Dataset {
        config: config.clone(),
        splits,
    })
}

#[derive(Debug, Serialize, Deserialize)]
struct Manifest {
    format_version: u32,
    config: DataConfig,
    splits: BTreeMap<Split, Vec<ManifestEntry>>,
}

const OWNED: [&str; 3] = ["manifest.json", "images", "labels"];

/// Writes the dataset; refuses to touch an existing dataset unless `force`.
pub fn save_dataset(dataset: &Dataset, dir: &Path, force: bool) -> Result<()> {
    let existing = OWNED.iter().map(|n| dir.join(n)).filter(|p| p.exists()).collect::<Vec<_>>();
    if !existing.is_empty() {
        if !force {
            return Err(Error::InvalidConfig(format!(
                "{} already holds a dataset (use --force to overwrite)",
                dir.display()
            )));
        }
        for p in existing {
            if p.is_dir() {
                fs::remove_dir_all(p)?;
            } else {
                fs::remove_file(p)?;
            }
        }
    }
    let mut manifest = Manifest {
        format_version: DATASET_FORMAT_VERSION,
        config: dataset.config.clone(),
        splits: BTreeMap::new(),
    };
    for (split, stream) in &dataset.splits {
        let images = dir.join("images").join(split.name());
        let labels = dir.join("labels").join(split.name());
        fs::create_dir_all(&images)?;
        fs::create_dir_all(&labels)?;
        for i in 0..stream.len() {
            fs::write(images.join(format!("{i:06}.cdt")), stream.images.images[i].to_cdt_bytes())?;
            fs::write(labels.join(format!("{i:06}.u8")), &stream.eval.labels[i])?;
        }
        manifest.splits.insert(*split, stream.manifest.clone());
    }
    fs::write(dir.join("manifest.json"), serde_json::to_string_pretty(&manifest)?)?;
    Ok(())
}

pub fn load_dataset(dir: &Path) -> Result<Dataset> {
    let path = dir.join("manifest.json");
    let text = fs::read_to_string(&path)
        .map_err(|e| Error::Data(format!("cannot read {}: {e}", path.display())))?;
    let manifest: Manifest =
        serde_json::from_str(&text).map_err(|e| Error::Format(format!("{}: {e}", path.display())))?;
    if manifest.format_version != DATASET_FORMAT_VERSION {
        return Err(Error::Version {
            found: manifest.format_version,
            expected: DATASET_FORMAT_VERSION,
        });
    }
    manifest.config.validate()?;
    let size = manifest.config.size;
    let expected = Shape::new(1, 3, size.height, size.width);
    let mut splits = BTreeMap::new();
    for (split, entries) in manifest.splits {
        let mut images = Vec::with_capacity(entries.len());
        let mut labels = Vec::with_capacity(entries.len());
        let mut domains = Vec::with_capacity(entries.len());
        for (i, e) in entries.iter().enumerate() {
            if e.index != i {
                return Err(Error::Format(format!("{} entry {i} has index {}", split.name(), e.index)));
            }
            if let Some(d) = e.true_domain {
                if d >= manifest.config.domains.len() {
                    return Err(Error::Data(format!("{} sample {i}: unknown domain {d}", split.name())));
                }
            }
            let image_path = dir.join("images").join(split.name()).join(format!("{i:06}.cdt"));
            let image = Tensor::<f32>::from_cdt_bytes(&fs::read(&image_path)?)?;
            if image.shape() != expected {
                return Err(Error::Data(format!(
                    "{}: shape {} (expected {expected})",
                    image_path.display(),
                    image.shape()
                )));
            }
            let label_path = dir.join("labels").join(split.name()).join(format!("{i:06}.u8"));
            let label = fs::read(&label_path)?;
            if label.len() != expected.plane() || label.iter().any(|&l| l as usize >= size.classes) {
                return Err(Error::Data(format!("{}: malformed label map", label_path.display())));
            }
            images.push(image);
            labels.push(label);
            domains.push(e.true_domain);
        }
        splits.insert(
            split,
            Stream {
                images: StreamImages { images },
                eval: EvalChannel { labels, domains },
                manifest: entries,
            },
        );
    }
    if let Some(missing) = Split::ALL.iter().find(|s| !splits.contains_key(s)) {
        return Err(Error::Format(format!("manifest lacks split '{}'", missing.name())));
    }
    Ok(Dataset {
        config: manifest.config,
        splits,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> DataConfig {
        let domains = DomainSpec::defaults();
        DataConfig {
            size: SceneSize {
                height: 32,
                width: 32,
                classes: 3,
            },
            seed: 11,
            schedule: cyclic_schedule(&domains, 2, 1),
            domains,
            source_train: 3,
            source_val: 2,
            eval_per_domain: 2,
        }
    }

    #[test]
    fn round_trip_and_force() {
        let dir = tempfile::tempdir().unwrap();
        let ds = build_dataset(&small()).unwrap();
        assert_eq!(ds.split(Split::Stream).len(), 6);
        assert_eq!(ds.split(Split::Eval).len(), 6);
        save_dataset(&ds, dir.path(), false).unwrap();
        assert_eq!(load_dataset(dir.path()).unwrap(), ds);
        assert!(matches!(save_dataset(&ds, dir.path(), false), Err(Error::InvalidConfig(_))));
        save_dataset(&ds, dir.path(), true).unwrap();
        assert_eq!(load_dataset(dir.path()).unwrap(), ds);
    }

    #[test]
    fn default_stream_length() {
        let c = DataConfig::default();
        assert_eq!(c.schedule.iter().map(|e| e.length).sum::<usize>(), 6000);
    }

    #[test]
    fn missing_manifest_is_data_error() {
        let dir = tempfile::tempdir().unwrap();
        assert!(matches!(load_dataset(dir.path()), Err(Error::Data(_))));
    }
}
