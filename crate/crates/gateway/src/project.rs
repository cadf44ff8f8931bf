//! On-disk layout of a project directory and the shared settings that drive it.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use ganlocal_core::minigen::{build_generator, Generator, GeneratorConfig, DEFAULT_BASE_LAYER};
use ganlocal_core::semantics::{load_catalog, SemanticCatalog, DEFAULT_SAMPLE_COUNT};
use serde::{Deserialize, Serialize};

/// Settings for clustering a generator into a catalog.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ProjectConfig {
    pub generator_seed: u64,
    pub base_layer_id: usize,
    pub k: usize,
    pub sample_count: usize,
    pub catalog_path: PathBuf,
    pub output_dir: PathBuf,
}

impl ProjectConfig {
    pub fn new(root: &Path) -> Self {
        Self {
            generator_seed: 0,
            base_layer_id: DEFAULT_BASE_LAYER,
            k: 15,
            sample_count: DEFAULT_SAMPLE_COUNT,
            catalog_path: root.join("catalog"),
            output_dir: root.join("out"),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.k == 0 {
            bail!(crate::UsageError("k must be at least 1".into()));
        }
        if self.sample_count < self.k {
            bail!(crate::UsageError(format!(
                "sample count {} is smaller than k = {}",
                self.sample_count, self.k
            )));
        }
        let layers = GeneratorConfig::new(self.generator_seed).plan.len();
        if self.base_layer_id >= layers {
            bail!(crate::UsageError(format!(
                "base layer {} out of range, the generator has {layers} layers",
                self.base_layer_id
            )));
        }
        Ok(())
    }
}

/// A project root, by default the current directory or `$GANLOCAL_DATA`.
#[derive(Debug, Clone)]
pub struct Project {
    pub root: PathBuf,
}

impl Project {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Self { root: root.into() }
    }

    pub fn catalog_dir(&self) -> PathBuf {
        self.root.join("catalog")
    }

    pub fn load_catalog(&self) -> Result<SemanticCatalog> {
        let dir = self.catalog_dir();
        load_catalog(&dir).with_context(|| format!("loading catalog from {}", dir.display()))
    }

    /// The catalog together with the generator it was built from.
    pub fn load(&self) -> Result<(SemanticCatalog, Generator)> {
        let catalog = self.load_catalog()?;
        let generator = build_generator(GeneratorConfig::new(catalog.provenance.generator_seed));
        Ok((catalog, generator))
    }
}
