use serde::{Deserialize, Serialize};

use super::cube::Cube;
use super::patch::{extract_window, Coord};
use crate::error::{Error, Result};

const STD_FLOOR: f64 = 1e-8;

/// Per-channel mean and standard deviation of one modality.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ChannelStats {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl ChannelStats {
    /// Statistics over every pixel of the patches centered on `pool`.
    pub fn from_pool(cube: &Cube, pool: &[Coord], patch_size: usize) -> Result<Self> {
        if pool.is_empty() {
            return Err(Error::invalid("standardization pool is empty"));
        }
        let c = cube.channels();
        let mut sum = vec![0.0f64; c];
        let mut sq = vec![0.0f64; c];
        let mut count = 0usize;
        for &center in pool {
            let patch = extract_window(cube, center, patch_size)?;
            for px in patch.values.chunks_exact(c) {
                for (j, &v) in px.iter().enumerate() {
                    sum[j] += v as f64;
                    sq[j] += (v as f64) * (v as f64);
                }
                count += 1;
            }
        }
        let n = count as f64;
        let mean: Vec<f64> = sum.iter().map(|s| s / n).collect();
        let std = sq
            .iter()
            .zip(&mean)
            .map(|(s, m)| (s / n - m * m).max(0.0).sqrt())
            .collect();
        Ok(Self { mean, std })
    }

    /// `(x - mean) / max(std, 1e-8)` per channel.
    pub fn apply(&self, cube: &Cube) -> Result<Cube> {
        let c = cube.channels();
        if self.mean.len() != c || self.std.len() != c {
            return Err(Error::invalid(format!(
                "stats for {} channels applied to a {c}-channel cube",
                self.mean.len()
            )));
        }
        let mut out = cube.clone();
        for px in out.values_mut().chunks_exact_mut(c) {
            for (j, v) in px.iter_mut().enumerate() {
                *v = ((*v as f64 - self.mean[j]) / self.std[j].max(STD_FLOOR)) as f32;
            }
        }
        Ok(out)
    }
}

/// Standardizes each cube with stats computed from its pool patches.
pub fn standardize(cubes: &[&Cube], pool: &[Coord], patch_size: usize) -> Result<(Vec<Cube>, Vec<ChannelStats>)> {
    let stats = cubes
        .iter()
        .map(|c| ChannelStats::from_pool(c, pool, patch_size))
        .collect::<Result<Vec<_>>>()?;
    let out = cubes
        .iter()
        .zip(&stats)
        .map(|(c, s)| s.apply(c))
        .collect::<Result<Vec<_>>>()?;
    Ok((out, stats))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::Rng;

    #[test]
    fn constant_channel_maps_to_zero() {
        let cube = Cube::new(3, 3, 1, vec![4.5; 9]).unwrap();
        let stats = ChannelStats::from_pool(&cube, &[Coord::new(1, 1)], 3).unwrap();
        let out = stats.apply(&cube).unwrap();
        assert!(out.values().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn pool_channels_are_standardised() {
        let mut rng = Rng::new(8);
        let values: Vec<f32> = (0..20 * 20 * 3).map(|i| (rng.normal() * (1.0 + i as f64 % 3.0) + 5.0) as f32).collect();
        let cube = Cube::new(20, 20, 3, values).unwrap();
        let pool: Vec<Coord> = (0..40).map(|i| Coord::new(i % 20, (i * 7) % 20)).collect();
        let (out, _) = standardize(&[&cube], &pool, 5).unwrap();
        let again = ChannelStats::from_pool(&out[0], &pool, 5).unwrap();
        for j in 0..3 {
            assert!(again.mean[j].abs() < 1e-3);
            assert!((again.std[j] - 1.0).abs() < 1e-3);
        }
    }

    #[test]
    fn stored_stats_are_reused_not_recomputed() {
        let cube = Cube::new(2, 2, 1, vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let stats = ChannelStats::from_pool(&cube, &[Coord::new(0, 0)], 1).unwrap();
        let perturbed = Cube::new(2, 2, 1, vec![100.0, 2.0, 3.0, 4.0]).unwrap();
        let a = stats.apply(&cube).unwrap();
        let b = stats.apply(&perturbed).unwrap();
        // only the perturbed pixel differs: the transform itself is fixed
        assert_eq!(&a.values()[1..], &b.values()[1..]);
    }
}
