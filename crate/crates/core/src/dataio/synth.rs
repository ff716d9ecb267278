//! Synthetic paired-modality scenes with Voronoi land-cover regions.

use serde::{Deserialize, Serialize};

use super::catalog::ClassCatalog;
use super::cube::{Cube, LabelMap};
use super::patch::reflect_index;
use crate::error::{Error, Result};
use crate::numerics::Rng;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthParams {
    pub classes: usize,
    pub height: usize,
    pub width: usize,
    pub channels_a: usize,
    pub channels_b: usize,
    /// Standard deviation of the per-pixel Gaussian noise.
    pub noise: f64,
    /// Box-filter radius applied after noise.
    pub radius: usize,
    pub seed: u64,
}

impl Default for SynthParams {
    fn default() -> Self {
        Self {
            classes: 4,
            height: 48,
            width: 48,
            channels_a: 16,
            channels_b: 1,
            noise: 0.1,
            radius: 0,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Scene {
    pub cube_a: Cube,
    pub cube_b: Cube,
    pub labels: LabelMap,
    pub catalog: ClassCatalog,
    /// Class prototypes per modality, `[class][channel]`.
    pub prototypes: [Vec<Vec<f32>>; 2],
}

impl Scene {
    pub fn cubes(&self) -> [&Cube; 2] {
        [&self.cube_a, &self.cube_b]
    }
}

/// Generates a scene: nearest-seed label field from `classes` random seed
/// pixels, per-class standard-normal prototypes, additive noise, then a box
/// filter of the given radius.
pub fn synth_scene(p: &SynthParams) -> Result<Scene> {
    if p.classes < 2 {
        return Err(Error::invalid("a scene needs at least two classes"));
    }
    if p.channels_a == 0 || p.channels_b == 0 {
        return Err(Error::invalid("channel counts must be positive"));
    }
    let (h, w) = (p.height, p.width);
    if h * w < p.classes {
        return Err(Error::invalid(format!(
            "{h}x{w} scene cannot hold {} classes",
            p.classes
        )));
    }
    let root = Rng::new(p.seed);
    let seeds = root.fork(0).choose(h * w, p.classes);
    let mut labels = Vec::with_capacity(h * w);
    for r in 0..h {
        for c in 0..w {
            let mut best = (usize::MAX, 0);
            for (k, &s) in seeds.iter().enumerate() {
                let (sr, sc) = (s / w, s % w);
                let d = r.abs_diff(sr).pow(2) + c.abs_diff(sc).pow(2);
                if d < best.0 {
                    best = (d, k);
                }
            }
            labels.push(best.1 as i32);
        }
    }
    let labels = LabelMap::new(h, w, labels)?;

    let mut proto_rng = root.fork(1);
    let mut noise_rng = root.fork(2);
    let mut make = |channels: usize, proto_rng: &mut Rng| -> Result<(Cube, Vec<Vec<f32>>)> {
        let protos: Vec<Vec<f32>> = (0..p.classes)
            .map(|_| (0..channels).map(|_| proto_rng.normal() as f32).collect())
            .collect();
        let mut values = Vec::with_capacity(h * w * channels);
        for &l in labels.labels() {
            for &v in &protos[l as usize] {
                values.push(v + (p.noise * noise_rng.normal()) as f32);
            }
        }
        let cube = Cube::new(h, w, channels, values)?;
        Ok((box_filter(&cube, p.radius), protos))
    };
    let (cube_a, proto_a) = make(p.channels_a, &mut proto_rng)?;
    let (cube_b, proto_b) = make(p.channels_b, &mut proto_rng)?;

    Ok(Scene {
        cube_a,
        cube_b,
        labels,
        catalog: ClassCatalog::synthetic(p.classes),
        prototypes: [proto_a, proto_b],
    })
}

/// Mean over a `(2r+1)²` window with mirrored borders.
pub fn box_filter(cube: &Cube, radius: usize) -> Cube {
    if radius == 0 {
        return cube.clone();
    }
    let (h, w, ch) = (cube.height(), cube.width(), cube.channels());
    let r = radius as isize;
    let norm = 1.0 / ((2 * radius + 1) * (2 * radius + 1)) as f64;
    let mut out = Cube::zeros(h, w, ch);
    let mut acc = vec![0.0f64; ch];
    for row in 0..h {
        for col in 0..w {
            acc.iter_mut().for_each(|a| *a = 0.0);
            for dr in -r..=r {
                let rr = reflect_index(row as isize + dr, h);
                for dc in -r..=r {
                    let cc = reflect_index(col as isize + dc, w);
                    for (a, &v) in acc.iter_mut().zip(cube.pixel(rr, cc)) {
                        *a += v as f64;
                    }
                }
            }
            for (o, a) in out.pixel_mut(row, col).iter_mut().zip(&acc) {
                *o = (a * norm) as f32;
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn noiseless_pixels_equal_their_prototype() {
        let p = SynthParams {
            noise: 0.0,
            radius: 0,
            height: 16,
            width: 12,
            seed: 3,
            ..Default::default()
        };
        let s = synth_scene(&p).unwrap();
        for r in 0..16 {
            for c in 0..12 {
                let l = s.labels.get(r, c).unwrap();
                assert_eq!(s.cube_a.pixel(r, c), s.prototypes[0][l].as_slice());
                assert_eq!(s.cube_b.pixel(r, c), s.prototypes[1][l].as_slice());
            }
        }
    }

    #[test]
    fn deterministic_per_seed() {
        let p = SynthParams {
            seed: 9,
            radius: 1,
            ..Default::default()
        };
        assert_eq!(synth_scene(&p).unwrap(), synth_scene(&p).unwrap());
        let q = SynthParams { seed: 10, ..p };
        assert_ne!(synth_scene(&q).unwrap().cube_a, synth_scene(&p).unwrap().cube_a);
    }

    #[test]
    fn every_class_is_present() {
        for seed in 0..20 {
            let s = synth_scene(&SynthParams {
                seed,
                classes: 6,
                height: 10,
                width: 10,
                ..Default::default()
            })
            .unwrap();
            let mut seen = [false; 6];
            s.labels.labels().iter().for_each(|&l| seen[l as usize] = true);
            assert!(seen.iter().all(|&x| x));
        }
    }

    #[test]
    fn too_small_scene_is_rejected() {
        let p = SynthParams {
            classes: 5,
            height: 2,
            width: 2,
            ..Default::default()
        };
        assert!(synth_scene(&p).is_err());
        assert!(synth_scene(&SynthParams { classes: 1, ..Default::default() }).is_err());
    }
}
