use std::fmt;
use std::str::FromStr;

use log::info;
use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::dataio::PromptTemplate;
use crate::error::{Error, Result};
use crate::pipeline::run_pipeline;
use crate::training::Dataset;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum AblationAxis {
    PoolSize,
    Components,
    Prompts,
    MaskRatio,
    PatchSize,
}

impl AblationAxis {
    pub const ALL: [AblationAxis; 5] = [
        Self::PoolSize,
        Self::Components,
        Self::Prompts,
        Self::MaskRatio,
        Self::PatchSize,
    ];

    /// The configurations swept along this axis.
    pub fn settings(self, base: &RunConfig) -> Vec<AblationSetting> {
        let with = |name: String, f: &dyn Fn(&mut RunConfig)| {
            let mut c = base.clone();
            f(&mut c);
            AblationSetting { name, config: c }
        };
        match self {
            Self::PoolSize => [300, 500, 700]
                .into_iter()
                .map(|m| with(m.to_string(), &|c| c.split.pool = m))
                .collect(),
            Self::Components => vec![
                with("w/o Text".into(), &|c| c.components.text = false),
                with("w/o Diffusion".into(), &|c| c.components.diffusion = false),
                with("w/o Mask".into(), &|c| c.components.mask = false),
                with("w/o Unsupervised".into(), &|c| c.components.unsupervised = false),
                with("full".into(), &|_| {}),
            ],
            Self::Prompts => PromptTemplate::ALL
                .into_iter()
                .map(|p| with(p.to_string(), &|c| c.prompt = p))
                .collect(),
            Self::MaskRatio => (1..=9)
                .map(|i| {
                    let r = i as f64 / 10.0;
                    with(format!("{r:.1}"), &|c| c.mask.ratio = r)
                })
                .collect(),
            Self::PatchSize => [5, 7, 9, 11, 13]
                .into_iter()
                .map(|s| with(s.to_string(), &|c| c.model.patch_size = s))
                .collect(),
        }
    }
}

impl fmt::Display for AblationAxis {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::PoolSize => "pool_size",
            Self::Components => "components",
            Self::Prompts => "prompts",
            Self::MaskRatio => "mask_ratio",
            Self::PatchSize => "patch_size",
        })
    }
}

impl FromStr for AblationAxis {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|a| a.to_string() == s)
            .ok_or_else(|| {
                Error::invalid(format!(
                    "unknown ablation axis `{s}`; expected one of pool_size, components, prompts, mask_ratio, patch_size"
                ))
            })
    }
}

#[derive(Clone, Debug)]
pub struct AblationSetting {
    pub name: String,
    pub config: RunConfig,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub setting: String,
    pub seeds: Vec<u64>,
    pub oa_mean: f64,
    pub oa_std: f64,
    pub aa_mean: f64,
    pub aa_std: f64,
    pub kappa_mean: f64,
    pub kappa_std: f64,
}

/// Mean and sample standard deviation (zero for a single value).
pub(crate) fn mean_std(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    if xs.len() < 2 {
        return (mean, 0.0);
    }
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

/// Runs the full pipeline for every setting of `axis` and every seed.
/// `dataset(seed)` supplies the scene for a seed.
pub fn ablate(
    base: &RunConfig,
    axis: AblationAxis,
    seeds: &[u64],
    dataset: &dyn Fn(u64) -> Result<Dataset>,
) -> Result<Vec<AblationRow>> {
    if seeds.is_empty() {
        return Err(Error::invalid("ablation needs at least one seed"));
    }
    let mut rows = Vec::new();
    for setting in axis.settings(base) {
        let mut oa = Vec::new();
        let mut aa = Vec::new();
        let mut kappa = Vec::new();
        for &seed in seeds {
            let mut cfg = setting.config.clone();
            cfg.seed = seed;
            let ds = dataset(seed)?;
            let out = run_pipeline(&ds, &cfg, &mut |_| Ok(()))?;
            info!("{axis} {} seed {seed}: OA {:.4}", setting.name, out.metrics.oa);
            oa.push(out.metrics.oa);
            aa.push(out.metrics.aa);
            kappa.push(out.metrics.kappa);
        }
        let (oa_mean, oa_std) = mean_std(&oa);
        let (aa_mean, aa_std) = mean_std(&aa);
        let (kappa_mean, kappa_std) = mean_std(&kappa);
        rows.push(AblationRow {
            setting: setting.name,
            seeds: seeds.to_vec(),
            oa_mean,
            oa_std,
            aa_mean,
            aa_std,
            kappa_mean,
            kappa_std,
        });
    }
    Ok(rows)
}
