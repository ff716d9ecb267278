use super::cube::LabelMap;
use super::patch::Coord;
use crate::error::{Error, Result};
use crate::numerics::Rng;

/// Labeled shots per class, held-out evaluation pixels and the unlabeled
/// pretraining pool.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct FewShotSplit {
    /// `shots[k]` holds exactly `n` coordinates of class `k`.
    pub shots: Vec<Vec<Coord>>,
    /// Remaining labeled pixels with their class, raster order.
    pub eval: Vec<(Coord, usize)>,
    /// Unlabeled pretraining coordinates drawn from all pixels.
    pub pool: Vec<Coord>,
}

impl FewShotSplit {
    pub fn num_classes(&self) -> usize {
        self.shots.len()
    }

    pub fn shots_per_class(&self) -> usize {
        self.shots.first().map_or(0, Vec::len)
    }
}

/// Uniform sampling without replacement of `n` shots per class, the
/// complementary evaluation set and an `m`-pixel pretraining pool.
pub fn sample_fewshot(labels: &LabelMap, n: usize, m: usize, seed: u64) -> Result<FewShotSplit> {
    let (h, w) = (labels.height(), labels.width());
    let k = labels.num_classes();
    if k == 0 {
        return Err(Error::invalid("label map has no labeled pixels"));
    }
    if m > h * w {
        return Err(Error::invalid(format!(
            "pretraining pool of {m} exceeds the {} pixels in the scene",
            h * w
        )));
    }
    let mut by_class: Vec<Vec<usize>> = vec![Vec::new(); k];
    for (i, &l) in labels.labels().iter().enumerate() {
        if l >= 0 {
            by_class[l as usize].push(i);
        }
    }
    let root = Rng::new(seed);
    let mut shot_rng = root.fork(10);
    let mut is_shot = vec![false; h * w];
    let mut shots = Vec::with_capacity(k);
    for (class, pixels) in by_class.iter().enumerate() {
        if pixels.len() < n {
            return Err(Error::invalid(format!(
                "class {class} has {} labeled pixels, {n} shots requested",
                pixels.len()
            )));
        }
        let picked: Vec<Coord> = shot_rng
            .choose(pixels.len(), n)
            .into_iter()
            .map(|j| {
                let i = pixels[j];
                is_shot[i] = true;
                Coord::new(i / w, i % w)
            })
            .collect();
        shots.push(picked);
    }
    let eval = labels
        .labels()
        .iter()
        .enumerate()
        .filter(|&(i, &l)| l >= 0 && !is_shot[i])
        .map(|(i, &l)| (Coord::new(i / w, i % w), l as usize))
        .collect();
    let pool = root
        .fork(11)
        .choose(h * w, m)
        .into_iter()
        .map(|i| Coord::new(i / w, i % w))
        .collect();
    Ok(FewShotSplit { shots, eval, pool })
}
