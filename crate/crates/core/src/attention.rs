use ndarray::{Array4, ArrayView2};

/// Row tolerance used by the encoder's own output check.
pub const ROW_SUM_TOLERANCE: f64 = 1e-5;

/// A row of an attention matrix that is not a probability distribution.
#[derive(Debug, Clone, Copy, PartialEq, thiserror::Error)]
#[error("layer {layer} head {head} row {row}: {problem}")]
pub struct RowViolation {
    pub layer: usize,
    pub head: usize,
    pub row: usize,
    pub problem: RowProblem,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum RowProblem {
    Sum(f64),
    Entry(f32),
}

impl std::fmt::Display for RowProblem {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Self::Sum(s) => write!(f, "sums to {s}"),
            Self::Entry(v) => write!(f, "has entry {v} outside [0, 1]"),
        }
    }
}

/// Attention probabilities for every layer and head, shape `[L, H, N, N]`.
/// Entry `[l, h, i, j]` is the weight query `i` puts on key `j`.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionStack {
    values: Array4<f32>,
}

impl AttentionStack {
    /// Wraps an `[L, H, N, N]` array. Panics if the last two axes differ.
    pub fn new(values: Array4<f32>) -> Self {
        let (_, _, n, m) = values.dim();
        assert_eq!(n, m, "attention matrices must be square");
        Self { values }
    }

    /// Builds a stack from `[l][h][i][j]`-ordered values.
    pub fn from_vec(layers: usize, heads: usize, n: usize, data: Vec<f32>) -> Option<Self> {
        Array4::from_shape_vec((layers, heads, n, n), data).ok().map(Self::new)
    }

    pub fn layers(&self) -> usize {
        self.values.dim().0
    }

    pub fn heads(&self) -> usize {
        self.values.dim().1
    }

    /// Sequence length N.
    pub fn len(&self) -> usize {
        self.values.dim().2
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn values(&self) -> &Array4<f32> {
        &self.values
    }

    pub fn matrix(&self, layer: usize, head: usize) -> ArrayView2<'_, f32> {
        self.values.slice(ndarray::s![layer, head, .., ..])
    }

    /// Values in `[l][h][i][j]` order.
    pub fn to_vec(&self) -> Vec<f32> {
        self.values.iter().copied().collect()
    }

    /// Checks every row sums to one within `tolerance` and every entry lies
    /// in `[0, 1]` (with the same slack).
    pub fn check_row_stochastic(&self, tolerance: f64) -> Result<(), RowViolation> {
        let (layers, heads, n, _) = self.values.dim();
        for layer in 0..layers {
            for head in 0..heads {
                for row in 0..n {
                    let violation = |problem| RowViolation { layer, head, row, problem };
                    let mut sum = 0f64;
                    for &v in self.values.slice(ndarray::s![layer, head, row, ..]) {
                        let v64 = f64::from(v);
                        if !v.is_finite() || v64 < -tolerance || v64 > 1.0 + tolerance {
                            return Err(violation(RowProblem::Entry(v)));
                        }
                        sum += v64;
                    }
                    if (sum - 1.0).abs() > tolerance {
                        return Err(violation(RowProblem::Sum(sum)));
                    }
                }
            }
        }
        Ok(())
    }
}
