use nalgebra::{DMatrix, DVector, SymmetricEigen};
use serde::{Deserialize, Serialize};

use super::{DspError, FrameMatrix};

/// Principal axes of a set of frames.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PcaModel {
    pub mean: Vec<f64>,
    /// One row per component, descending eigenvalue order.
    pub components: Vec<Vec<f64>>,
    pub eigenvalues: Vec<f64>,
    /// Components that were padded with zeros because the data lacked rank.
    pub padded: usize,
}

impl PcaModel {
    pub fn dims(&self) -> usize {
        self.components.len()
    }

    pub fn input_dims(&self) -> usize {
        self.mean.len()
    }

    pub fn project(&self, frame: &[f64]) -> Vec<f64> {
        self.components
            .iter()
            .map(|c| c.iter().zip(frame).zip(&self.mean).map(|((w, x), m)| w * (x - m)).sum())
            .collect()
    }

    pub fn reconstruct(&self, coords: &[f64]) -> Vec<f64> {
        let mut out = self.mean.clone();
        for (c, &a) in self.components.iter().zip(coords) {
            for (o, w) in out.iter_mut().zip(c) {
                *o += a * w;
            }
        }
        out
    }
}

/// Relative eigenvalue size below which a direction counts as absent.
const RANK_TOLERANCE: f64 = 1e-10;

/// Fits `dims` principal components over all frames of all matrices.
pub fn pca_fit(features: &[&FrameMatrix], dims: usize) -> Result<PcaModel, DspError> {
    let cols = features.first().map_or(0, |f| f.cols);
    if let Some(bad) = features.iter().find(|f| f.cols != cols) {
        return Err(DspError::ShapeMismatch(format!("{} vs {} columns", bad.cols, cols)));
    }
    let total: usize = features.iter().map(|f| f.frames()).sum();
    if total < dims || total == 0 {
        return Err(DspError::NotEnoughFrames { needed: dims.max(1), got: total });
    }
    let mut mean = DVector::<f64>::zeros(cols);
    for f in features {
        for row in f.rows() {
            mean += DVector::from_column_slice(row);
        }
    }
    mean /= total as f64;
    let mut cov = DMatrix::<f64>::zeros(cols, cols);
    for f in features {
        for row in f.rows() {
            let d = DVector::from_column_slice(row) - &mean;
            cov.syger(1.0, &d, &d, 1.0);
        }
    }
    cov /= total as f64;

    let eig = SymmetricEigen::new(cov.clone());
    let mut order: Vec<usize> = (0..cols).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]).then(a.cmp(&b)));
    let top = order.first().map_or(0.0, |&i| eig.eigenvalues[i].max(0.0));
    let scale = top.max(cov.trace().abs()).max(f64::MIN_POSITIVE);

    let mut components = Vec::with_capacity(dims);
    let mut eigenvalues = Vec::with_capacity(dims);
    for &i in order.iter().take(dims) {
        let value = eig.eigenvalues[i];
        if value <= RANK_TOLERANCE * scale {
            break;
        }
        let mut v: Vec<f64> = eig.eigenvectors.column(i).iter().copied().collect();
        let pivot = v.iter().copied().fold(0.0f64, |m, x| if x.abs() > m.abs() { x } else { m });
        if pivot < 0.0 {
            v.iter_mut().for_each(|x| *x = -*x);
        }
        components.push(v);
        eigenvalues.push(value);
    }
    let padded = dims - components.len();
    if padded > 0 {
        log::warn!("data has rank {} < {dims}; padding {padded} zero components", components.len());
        components.resize(dims, vec![0.0; cols]);
        eigenvalues.resize(dims, 0.0);
    }
    Ok(PcaModel { mean: mean.iter().copied().collect(), components, eigenvalues, padded })
}

pub fn pca_transform(model: &PcaModel, features: &FrameMatrix) -> Result<FrameMatrix, DspError> {
    if features.cols != model.input_dims() {
        return Err(DspError::ShapeMismatch(format!("{} vs {} columns", features.cols, model.input_dims())));
    }
    let rows = features.rows().map(|r| model.project(r)).collect();
    Ok(FrameMatrix::from_rows(rows, model.dims(), features.frame_period))
}
