use std::fs;
use std::path::Path;

use crate::config::RunConfig;
use crate::dataio::{
    extract_patch, load_cube, load_labels, sample_fewshot, save_cube, save_labels, standardize, synth_scene,
    ChannelStats, ClassCatalog, Coord, Cube, FewShotSplit, LabelMap, PatchSample, SynthParams, Vocab,
};
use crate::error::{Error, Result};
use crate::numerics::Rng;

pub const CUBE_A_FILE: &str = "cube_a.mmrs";
pub const CUBE_B_FILE: &str = "cube_b.mmrs";
pub const LABELS_FILE: &str = "labels.mmlb";
pub const CATALOG_FILE: &str = "catalog.json";

/// Child-stream ids of the run seed.
pub mod streams {
    pub const SPLIT: u64 = 1;
    pub const PRETRAIN_INIT: u64 = 2;
    pub const PRETRAIN: u64 = 3;
    pub const FINETUNE_INIT: u64 = 4;
    pub const FINETUNE: u64 = 5;
}

/// Raw paired cubes with labels and class catalog.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub cubes: [Cube; 2],
    pub labels: LabelMap,
    pub catalog: ClassCatalog,
}

impl Dataset {
    pub fn synthetic(p: &SynthParams) -> Result<Self> {
        let s = synth_scene(p)?;
        Ok(Self {
            cubes: [s.cube_a, s.cube_b],
            labels: s.labels,
            catalog: s.catalog,
        })
    }

    pub fn validate(&self) -> Result<()> {
        let [a, b] = &self.cubes;
        let (h, w) = (self.labels.height(), self.labels.width());
        if a.height() != h || a.width() != w || b.height() != h || b.width() != w {
            return Err(Error::invalid("cubes and label map disagree on scene size"));
        }
        self.labels.check_classes(self.catalog.len())
    }

    pub fn load(dir: impl AsRef<Path>) -> Result<Self> {
        let dir = dir.as_ref();
        let ds = Self {
            cubes: [load_cube(dir.join(CUBE_A_FILE))?, load_cube(dir.join(CUBE_B_FILE))?],
            labels: load_labels(dir.join(LABELS_FILE))?,
            catalog: ClassCatalog::load(dir.join(CATALOG_FILE))?,
        };
        ds.validate()?;
        Ok(ds)
    }

    pub fn save(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        save_cube(&self.cubes[0], dir.join(CUBE_A_FILE))?;
        save_cube(&self.cubes[1], dir.join(CUBE_B_FILE))?;
        save_labels(&self.labels, dir.join(LABELS_FILE))?;
        self.catalog.save(dir.join(CATALOG_FILE))
    }
}

/// A dataset standardized and split for one run.
#[derive(Clone, Debug)]
pub struct Prepared {
    pub cubes: [Cube; 2],
    pub labels: LabelMap,
    pub catalog: ClassCatalog,
    pub split: FewShotSplit,
    pub stats: Vec<ChannelStats>,
    pub vocab: Vocab,
    pub patch_size: usize,
}

impl Prepared {
    /// Splits `ds` with the run seed and standardizes it, either with the
    /// given stats or with stats from the pretraining pool.
    pub fn new(ds: &Dataset, cfg: &RunConfig, stats: Option<&[ChannelStats]>) -> Result<Self> {
        ds.validate()?;
        let seed = Rng::new(cfg.seed).fork(streams::SPLIT).seed();
        let split = sample_fewshot(&ds.labels, cfg.split.shots, cfg.split.pool, seed)?;
        let s = cfg.model.patch_size;
        let (cubes, stats) = match stats {
            Some(st) => {
                if st.len() != 2 {
                    return Err(Error::invalid("expected standardization stats for two modalities"));
                }
                ([st[0].apply(&ds.cubes[0])?, st[1].apply(&ds.cubes[1])?], st.to_vec())
            }
            None => {
                let (c, st) = standardize(&[&ds.cubes[0], &ds.cubes[1]], &split.pool, s)?;
                let [a, b]: [Cube; 2] = c.try_into().expect("two cubes");
                ([a, b], st)
            }
        };
        let vocab = Vocab::build(&ds.catalog.corpus(), cfg.model.context_len)?;
        Ok(Self {
            cubes,
            labels: ds.labels.clone(),
            catalog: ds.catalog.clone(),
            split,
            stats,
            vocab,
            patch_size: s,
        })
    }

    pub fn channels(&self) -> [usize; 2] {
        [self.cubes[0].channels(), self.cubes[1].channels()]
    }

    pub fn classes(&self) -> usize {
        self.catalog.len()
    }

    pub fn sample(&self, center: Coord, label: Option<usize>) -> Result<PatchSample> {
        extract_patch(&[&self.cubes[0], &self.cubes[1]], center, self.patch_size, label)
    }

    pub fn pool_samples(&self) -> Result<Vec<PatchSample>> {
        self.split.pool.iter().map(|&c| self.sample(c, None)).collect()
    }

    /// Shot samples grouped by class.
    pub fn shot_samples(&self) -> Result<Vec<Vec<PatchSample>>> {
        self.split
            .shots
            .iter()
            .enumerate()
            .map(|(k, cs)| cs.iter().map(|&c| self.sample(c, Some(k))).collect())
            .collect()
    }
}
