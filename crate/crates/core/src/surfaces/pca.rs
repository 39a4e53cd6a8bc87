use nalgebra::DMatrix;
use ndarray::{Array1, Array2};

use crate::error::{ensure, Result};

/// Component count used for surface data unless configured otherwise.
pub const DEFAULT_PCA_COMPONENTS: usize = 10;

/// Truncated singular value decomposition `X ≈ U_k D_k V_kᵀ` of a `T x d` matrix.
///
/// The data are not centered.
#[derive(Clone, Debug, PartialEq)]
pub struct PcaModel {
    /// `d x k` right singular vectors.
    pub v: Array2<f64>,
    /// `k` singular values in nonincreasing order.
    pub singular_values: Array1<f64>,
}

impl PcaModel {
    pub fn n_components(&self) -> usize {
        self.singular_values.len()
    }

    pub fn dim(&self) -> usize {
        self.v.nrows()
    }
}

/// Returns the model and the `T x k` component series `U_k`.
pub fn pca_fit(data: &Array2<f64>, k: usize) -> Result<(PcaModel, Array2<f64>)> {
    let (t, d) = data.dim();
    ensure!(k >= 1 && k <= t.min(d), Config, "component count {k} must lie in 1..={}", t.min(d));
    ensure!(data.iter().all(|v| v.is_finite()), NonFinite, "PCA input must be finite");
    let x = DMatrix::from_fn(t, d, |i, j| data[[i, j]]);
    let svd = x.svd(true, true);
    let u = svd.u.expect("requested U");
    let vt = svd.v_t.expect("requested V^T");
    let mut order: Vec<usize> = (0..svd.singular_values.len()).collect();
    order.sort_by(|&a, &b| svd.singular_values[b].total_cmp(&svd.singular_values[a]));
    let order = &order[..k];
    let sigma = Array1::from_iter(order.iter().map(|&i| svd.singular_values[i].max(0.0)));
    let v = Array2::from_shape_fn((d, k), |(r, c)| vt[(order[c], r)]);
    let comps = Array2::from_shape_fn((t, k), |(r, c)| u[(r, order[c])]);
    Ok((PcaModel { v, singular_values: sigma }, comps))
}

/// Maps component rows back to data space: `ŷ_t = V_k D_k ỹ_t`.
pub fn pca_invert(model: &PcaModel, components: &Array2<f64>) -> Result<Array2<f64>> {
    ensure!(
        components.ncols() == model.n_components(),
        Shape,
        "components have width {}, model has {}",
        components.ncols(),
        model.n_components()
    );
    let scaled = components * &model.singular_values;
    Ok(scaled.dot(&model.v.t()))
}

/// Component coordinates of new data rows: `x V_k D_k⁻¹`, zero where a singular value vanishes.
pub fn pca_project(model: &PcaModel, data: &Array2<f64>) -> Result<Array2<f64>> {
    ensure!(data.ncols() == model.dim(), Shape, "data width {} differs from {}", data.ncols(), model.dim());
    let inv = model.singular_values.mapv(|s| if s > 0.0 { 1.0 / s } else { 0.0 });
    Ok(data.dot(&model.v) * &inv)
}
