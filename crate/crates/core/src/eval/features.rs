use log::warn;
use nalgebra::{DMatrix, SymmetricEigen};
use serde::{Deserialize, Serialize};

use crate::dataio::Coord;
use crate::error::Result;
use crate::models::{Model, Modality};
use crate::numerics::Real;
use crate::training::Prepared;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FeatureRow {
    pub row: usize,
    pub col: usize,
    pub modality: String,
    pub label: Option<usize>,
    pub feature: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FeatureDump {
    pub rows: Vec<FeatureRow>,
    /// Two-component projection per row; absent below three rows.
    pub pca: Option<Vec<[f64; 2]>>,
}

/// Principal axes of the row-centred data, largest variance first, each
/// signed so its largest-magnitude entry is positive. Returns the mean, the
/// axes (`k` vectors) and the projections.
pub fn pca(points: &[Vec<f64>], k: usize) -> (Vec<f64>, Vec<Vec<f64>>, Vec<Vec<f64>>) {
    let n = points.len();
    let d = points[0].len();
    let mean: Vec<f64> = (0..d).map(|j| points.iter().map(|p| p[j]).sum::<f64>() / n as f64).collect();
    let centred = DMatrix::from_fn(n, d, |i, j| points[i][j] - mean[j]);
    let cov = centred.transpose() * &centred / n as f64;
    let eig = SymmetricEigen::new(cov);
    let mut order: Vec<usize> = (0..d).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]).then(a.cmp(&b)));
    let axes: Vec<Vec<f64>> = order
        .iter()
        .take(k)
        .map(|&c| {
            let v: Vec<f64> = eig.eigenvectors.column(c).iter().copied().collect();
            let big = v.iter().copied().fold(0.0f64, |m, x| if x.abs() > m.abs() { x } else { m });
            if big < 0.0 {
                v.iter().map(|x| -x).collect()
            } else {
                v
            }
        })
        .collect();
    let proj = (0..n)
        .map(|i| {
            axes.iter()
                .map(|a| (0..d).map(|j| centred[(i, j)] * a[j]).sum())
                .collect()
        })
        .collect();
    (mean, axes, proj)
}

/// Unit-norm image embeddings of both modalities for every coordinate, plus
/// a two-component PCA projection.
pub fn dump_features<T: Real>(model: &Model<T>, data: &Prepared, coords: &[Coord]) -> Result<FeatureDump> {
    let mut rows = Vec::with_capacity(2 * coords.len());
    for &c in coords {
        let s = data.sample(c, data.labels.get(c.row, c.col))?;
        for m in Modality::BOTH {
            let z = model.embed_patches(&[&s.patches[m.index()]], m)?;
            rows.push(FeatureRow {
                row: c.row,
                col: c.col,
                modality: ["a", "b"][m.index()].into(),
                label: s.label,
                feature: z.to_f64_vec(),
            });
        }
    }
    let pca = if rows.len() < 3 {
        warn!("fewer than 3 feature rows: PCA skipped");
        None
    } else {
        let pts: Vec<Vec<f64>> = rows.iter().map(|r| r.feature.clone()).collect();
        let (_, _, proj) = pca(&pts, 2);
        Some(proj.iter().map(|p| [p[0], p.get(1).copied().unwrap_or(0.0)]).collect())
    };
    Ok(FeatureDump { rows, pca })
}
