//! Per-circuit principal-component reduction.

use nalgebra::DMatrix;

use crate::error::{Error, Result};
use crate::ingest::EmbeddingStore;
use crate::model_io::TensorContainer;

/// Dense row-major `f64` matrix of samples.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureMatrix {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl FeatureMatrix {
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::shape("feature matrix", &[rows, cols], &[data.len()]));
        }
        Ok(Self { rows, cols, data })
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        if let Some(bad) = rows.iter().find(|r| r.len() != cols) {
            return Err(Error::shape("feature row", &[cols], &[bad.len()]));
        }
        Self::new(rows.len(), cols, rows.concat())
    }

    pub fn from_store(store: &EmbeddingStore) -> Self {
        Self {
            rows: store.len(),
            cols: store.dim,
            data: store.data.iter().map(|&v| v as f64).collect(),
        }
    }

    #[inline]
    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    /// New matrix made of the given rows, in order.
    pub fn select_rows(&self, rows: &[usize]) -> Self {
        let mut data = Vec::with_capacity(rows.len() * self.cols);
        for &r in rows {
            data.extend_from_slice(self.row(r));
        }
        Self {
            rows: rows.len(),
            cols: self.cols,
            data,
        }
    }
}

#[inline]
pub fn squared_distance(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

#[derive(Clone, Debug, PartialEq)]
pub struct PcaModel {
    pub mean: Vec<f64>,
    /// `out_dim x input_dim`, orthonormal rows.
    pub basis: Vec<f64>,
    pub explained_variance: Vec<f64>,
    pub input_dim: usize,
    pub out_dim: usize,
}

/// Fit by SVD of the centred matrix. Each basis row is signed so that its
/// largest-magnitude entry is positive.
pub fn fit_pca(x: &FeatureMatrix, out_dim: usize) -> Result<PcaModel> {
    let (n, d) = (x.rows, x.cols);
    if n < 2 {
        return Err(Error::InvalidConfig(format!("PCA needs at least 2 samples, got {n}")));
    }
    if out_dim == 0 || out_dim > (n - 1).min(d) {
        return Err(Error::InvalidConfig(format!(
            "PCA out_dim {out_dim} must be in 1..={} for {n} samples of dim {d}",
            (n - 1).min(d)
        )));
    }
    let mut mean = vec![0.0f64; d];
    for i in 0..n {
        for (m, v) in mean.iter_mut().zip(x.row(i)) {
            *m += v;
        }
    }
    mean.iter_mut().for_each(|m| *m /= n as f64);

    let centered = DMatrix::from_fn(n, d, |i, j| x.data[i * d + j] - mean[j]);
    let svd = centered.svd(false, true);
    let v_t = svd
        .v_t
        .ok_or_else(|| Error::InvalidConfig("SVD did not produce right singular vectors".into()))?;
    let singular = svd.singular_values;

    let mut order: Vec<usize> = (0..singular.len()).collect();
    order.sort_by(|&a, &b| singular[b].total_cmp(&singular[a]).then(a.cmp(&b)));

    let mut basis = Vec::with_capacity(out_dim * d);
    let mut explained_variance = Vec::with_capacity(out_dim);
    for &k in order.iter().take(out_dim) {
        let mut row: Vec<f64> = (0..d).map(|j| v_t[(k, j)]).collect();
        let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
        row.iter_mut().for_each(|v| *v /= norm);
        let pivot = row
            .iter()
            .enumerate()
            .fold((0usize, 0.0f64), |best, (j, v)| {
                if v.abs() > best.1.abs() {
                    (j, *v)
                } else {
                    best
                }
            });
        if pivot.1 < 0.0 {
            row.iter_mut().for_each(|v| *v = -*v);
        }
        basis.extend(row);
        explained_variance.push(singular[k] * singular[k] / (n - 1) as f64);
    }
    Ok(PcaModel {
        mean,
        basis,
        explained_variance,
        input_dim: d,
        out_dim,
    })
}

impl PcaModel {
    pub fn component(&self, k: usize) -> &[f64] {
        &self.basis[k * self.input_dim..(k + 1) * self.input_dim]
    }

    /// `(X - mean) * basis^T`.
    pub fn transform(&self, x: &FeatureMatrix) -> Result<FeatureMatrix> {
        if x.cols != self.input_dim {
            return Err(Error::shape(
                "PCA input",
                &[x.rows, self.input_dim],
                &[x.rows, x.cols],
            ));
        }
        let mut out = Vec::with_capacity(x.rows * self.out_dim);
        let mut centered = vec![0.0f64; self.input_dim];
        for i in 0..x.rows {
            for (c, (v, m)) in centered.iter_mut().zip(x.row(i).iter().zip(&self.mean)) {
                *c = v - m;
            }
            for k in 0..self.out_dim {
                out.push(
                    self.component(k)
                        .iter()
                        .zip(&centered)
                        .map(|(b, c)| b * c)
                        .sum(),
                );
            }
        }
        FeatureMatrix::new(x.rows, self.out_dim, out)
    }

    /// Map reduced coordinates back to the input space.
    pub fn reconstruct(&self, z: &FeatureMatrix) -> Result<FeatureMatrix> {
        if z.cols != self.out_dim {
            return Err(Error::shape("PCA codes", &[z.rows, self.out_dim], &[z.rows, z.cols]));
        }
        let mut out = Vec::with_capacity(z.rows * self.input_dim);
        for i in 0..z.rows {
            let mut row = self.mean.clone();
            for (k, &coef) in z.row(i).iter().enumerate() {
                for (r, b) in row.iter_mut().zip(self.component(k)) {
                    *r += coef * b;
                }
            }
            out.extend(row);
        }
        FeatureMatrix::new(z.rows, self.input_dim, out)
    }

    /// Stored as `pca.mean`, `pca.basis`, `pca.var` (float32).
    pub fn to_container(&self) -> TensorContainer {
        let f = |v: &[f64]| v.iter().map(|&x| x as f32).collect::<Vec<f32>>();
        let mut c = TensorContainer::default();
        c.insert("pca.mean", vec![self.input_dim], f(&self.mean));
        c.insert("pca.basis", vec![self.out_dim, self.input_dim], f(&self.basis));
        c.insert("pca.var", vec![self.out_dim], f(&self.explained_variance));
        c
    }

    pub fn from_container(c: &TensorContainer) -> Result<Self> {
        let g = |v: &[f32]| v.iter().map(|&x| x as f64).collect::<Vec<f64>>();
        let mean = c.get("pca.mean")?;
        let basis = c.get("pca.basis")?;
        let var = c.get("pca.var")?;
        let d = mean.data.len();
        let k = var.data.len();
        if basis.shape != [k, d] {
            return Err(Error::shape("pca.basis", &[k, d], &basis.shape));
        }
        Ok(Self {
            mean: g(&mean.data),
            basis: g(&basis.data),
            explained_variance: g(&var.data),
            input_dim: d,
            out_dim: k,
        })
    }
}
