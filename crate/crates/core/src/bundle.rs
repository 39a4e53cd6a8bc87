use ndarray::{Array3, ArrayView1, Axis};

use crate::error::{ensure, Result};

/// `N` generated paths of length `T` with `d` channels.
///
/// Values are rounded to single precision on construction so that the
/// on-disk format (32-bit floats) round-trips exactly.
#[derive(Clone, Debug, PartialEq)]
pub struct PathBundle {
    paths: Array3<f64>,
    pub seed: u64,
    pub model_id: String,
}

impl PathBundle {
    pub fn new(paths: Array3<f64>, seed: u64, model_id: impl Into<String>) -> Result<Self> {
        let (n, t, d) = paths.dim();
        ensure!(n >= 1 && t >= 1 && d >= 1, Shape, "bundle must be at least 1x1x1, got {n}x{t}x{d}");
        ensure!(paths.iter().all(|v| v.is_finite()), NonFinite, "bundle contains non-finite values");
        let paths = paths.mapv(|v| v as f32 as f64);
        ensure!(paths.iter().all(|v| v.is_finite()), NonFinite, "bundle values overflow single precision");
        Ok(Self { paths, seed, model_id: model_id.into() })
    }

    pub fn paths(&self) -> &Array3<f64> {
        &self.paths
    }

    pub fn n_paths(&self) -> usize {
        self.paths.dim().0
    }

    pub fn len(&self) -> usize {
        self.paths.dim().1
    }

    pub fn is_empty(&self) -> bool {
        self.paths.is_empty()
    }

    pub fn channels(&self) -> usize {
        self.paths.dim().2
    }

    /// Channel `c` of path `i` as a time series.
    pub fn series(&self, i: usize, c: usize) -> ArrayView1<'_, f64> {
        self.paths.index_axis(Axis(0), i).index_axis_move(Axis(1), c)
    }
}
