use std::collections::BTreeSet;
use std::fs;
use std::path::Path;

use super::DataConfig;
use crate::error::{config_err, Result};
use crate::synthworld::{generate, read_jsonl, write_jsonl, Part, Scene, SplitManifest, WorldSpec};

pub const TRAIN_FILE: &str = "train.jsonl";
pub const TEST_FILE: &str = "test.jsonl";
pub const MANIFEST_FILE: &str = "manifest.json";

/// Train and test scenes with the split they were drawn under.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub train: Vec<Scene>,
    pub test: Vec<Scene>,
    pub manifest: SplitManifest,
}

impl Dataset {
    pub fn generate(world: &WorldSpec, cfg: &DataConfig) -> Result<Self> {
        let train = generate(world, cfg.n_train, cfg.seed, &cfg.split, Part::Train)?;
        let test = generate(world, cfg.n_test, cfg.seed, &cfg.split, Part::Test)?;
        let manifest = SplitManifest::new(world, &cfg.split, cfg.seed, &train, test.len());
        Ok(Dataset { train, test, manifest })
    }

    pub fn world(&self) -> &WorldSpec {
        &self.manifest.world
    }

    pub fn rare(&self) -> &BTreeSet<usize> {
        &self.manifest.rare_pairs
    }

    pub fn unseen(&self) -> &BTreeSet<usize> {
        &self.manifest.split.unseen_pairs
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir)?;
        write_jsonl(&dir.join(TRAIN_FILE), &self.train)?;
        write_jsonl(&dir.join(TEST_FILE), &self.test)?;
        self.manifest.save(&dir.join(MANIFEST_FILE))
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let manifest = SplitManifest::load(&dir.join(MANIFEST_FILE))?;
        let train = read_jsonl(&dir.join(TRAIN_FILE))?;
        let test = read_jsonl(&dir.join(TEST_FILE))?;
        if train.len() != manifest.n_train || test.len() != manifest.n_test {
            return Err(config_err!(
                "{}: manifest lists {}/{} scenes, files hold {}/{}",
                dir.display(),
                manifest.n_train,
                manifest.n_test,
                train.len(),
                test.len()
            ));
        }
        Ok(Dataset { train, test, manifest })
    }
}
