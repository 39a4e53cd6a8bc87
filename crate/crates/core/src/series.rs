use ndarray::{Array2, Array3, Axis};

use crate::error::{ensure, Result};

/// Real matrix with rows indexed by time and columns by channel.
///
/// `time_offset` is the absolute time index of the first row. Causal layers
/// shift it forward by the number of rows they consume.
#[derive(Clone, Debug, PartialEq)]
pub struct TimeSeriesMatrix {
    values: Array2<f64>,
    time_offset: i64,
}

impl TimeSeriesMatrix {
    pub fn new(values: Array2<f64>) -> Result<Self> {
        Self::with_offset(values, 0)
    }

    pub fn with_offset(values: Array2<f64>, time_offset: i64) -> Result<Self> {
        let (rows, cols) = values.dim();
        ensure!(
            rows >= 1 && cols >= 1,
            Shape,
            "time series must be at least 1x1, got {rows}x{cols}"
        );
        ensure!(
            values.iter().all(|v| v.is_finite()),
            NonFinite,
            "time series contains non-finite entries"
        );
        Ok(Self {
            values,
            time_offset,
        })
    }

    pub fn from_column(column: &[f64]) -> Result<Self> {
        let values = Array2::from_shape_vec((column.len(), 1), column.to_vec())
            .map_err(|e| crate::Error::Shape(e.to_string()))?;
        Self::new(values)
    }

    pub fn values(&self) -> &Array2<f64> {
        &self.values
    }

    pub fn into_values(self) -> Array2<f64> {
        self.values
    }

    pub fn time_offset(&self) -> i64 {
        self.time_offset
    }

    pub fn len(&self) -> usize {
        self.values.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.values.nrows() == 0
    }

    pub fn channels(&self) -> usize {
        self.values.ncols()
    }

    /// `(1, rows, cols)` view for the tape.
    pub fn to_batch(&self) -> Array3<f64> {
        self.values.clone().insert_axis(Axis(0))
    }

    pub(crate) fn from_batch(batch: &Array3<f64>, time_offset: i64) -> Result<Self> {
        ensure!(batch.dim().0 == 1, Shape, "expected a single batch element");
        Self::with_offset(batch.index_axis(Axis(0), 0).to_owned(), time_offset)
    }
}
