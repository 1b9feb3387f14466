use crate::data::SampleId;
use crate::error::{Error, Result};
use crate::numeric::DenseMatrix;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum MetricKind {
    Global,
    Local,
    Fused,
}

/// `n_query × n_support` similarity table. Columns follow the episode's
/// class-major support order.
#[derive(Clone, Debug, PartialEq)]
pub struct MetricMatrix {
    pub values: DenseMatrix,
    pub row_ids: Vec<SampleId>,
    pub col_ids: Vec<SampleId>,
    pub kind: MetricKind,
}

impl MetricMatrix {
    pub fn new(
        values: DenseMatrix,
        row_ids: Vec<SampleId>,
        col_ids: Vec<SampleId>,
        kind: MetricKind,
    ) -> Result<Self> {
        if values.shape() != (row_ids.len(), col_ids.len()) {
            return Err(Error::shape(
                "MetricMatrix::new",
                format!(
                    "{:?} values for {} rows and {} columns",
                    values.shape(),
                    row_ids.len(),
                    col_ids.len()
                ),
            ));
        }
        if let Some(row) = values.first_non_finite_row() {
            return Err(Error::NonFinite {
                op: "MetricMatrix::new",
                row,
            });
        }
        Ok(Self {
            values,
            row_ids,
            col_ids,
            kind,
        })
    }

    pub fn n_query(&self) -> usize {
        self.values.rows()
    }

    pub fn n_support(&self) -> usize {
        self.values.cols()
    }

    pub fn aligned_with(&self, other: &Self) -> bool {
        self.row_ids == other.row_ids && self.col_ids == other.col_ids
    }
}
