use crate::error::{Result, TensorError};

/// Boolean `[rows, cols]` attention mask; `true` marks an allowed key.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Mask {
    rows: usize,
    cols: usize,
    allowed: Vec<bool>,
}

impl Mask {
    pub fn new(rows: usize, cols: usize, allowed: Vec<bool>) -> Result<Self> {
        if rows == 0 || cols == 0 || allowed.len() != rows * cols {
            return Err(TensorError::InvalidShape {
                op: "Mask::new",
                shape: vec![rows, cols],
                reason: format!("expected {} flags, got {}", rows * cols, allowed.len()),
            });
        }
        Ok(Self {
            rows,
            cols,
            allowed,
        })
    }

    pub fn from_fn(rows: usize, cols: usize, f: impl Fn(usize, usize) -> bool) -> Self {
        let allowed = (0..rows * cols).map(|i| f(i / cols, i % cols)).collect();
        Self {
            rows,
            cols,
            allowed,
        }
    }

    pub fn all(rows: usize, cols: usize) -> Self {
        Self::from_fn(rows, cols, |_, _| true)
    }

    /// Square causal mask: query `t` sees keys `0..=t`.
    pub fn causal(len: usize) -> Self {
        Self::from_fn(len, len, |q, k| k <= q)
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn is_allowed(&self, row: usize, col: usize) -> bool {
        self.allowed[row * self.cols + col]
    }

    pub fn row(&self, row: usize) -> &[bool] {
        &self.allowed[row * self.cols..(row + 1) * self.cols]
    }

    pub fn allowed_in_row(&self, row: usize) -> usize {
        self.row(row).iter().filter(|&&a| a).count()
    }

    pub fn count_allowed(&self) -> usize {
        self.allowed.iter().filter(|&&a| a).count()
    }
}
