//! 2D FFT filtering on replicate-padded power-of-two grids.

use rustfft::num_complex::Complex64;
use rustfft::{Fft, FftPlanner};
use std::sync::Arc;

use crate::grid::Grid;

/// Frequency-bin descriptor handed to spectral responses.
#[derive(Debug, Clone, Copy)]
pub struct Bin {
    /// Signed row (depth) index in `[-n_rows/2, n_rows/2)`.
    pub k_row: i64,
    /// Signed column (lateral) index in `[-n_cols/2, n_cols/2)`.
    pub k_col: i64,
    pub n_rows: usize,
    pub n_cols: usize,
}

impl Bin {
    /// Angular frequency along depth, radians per pixel.
    pub fn omega_row(&self) -> f64 {
        2.0 * std::f64::consts::PI * self.k_row as f64 / self.n_rows as f64
    }

    /// Angular frequency along the lateral axis, radians per pixel.
    pub fn omega_col(&self) -> f64 {
        2.0 * std::f64::consts::PI * self.k_col as f64 / self.n_cols as f64
    }

    pub fn radius(&self) -> f64 {
        self.omega_row().hypot(self.omega_col())
    }

    pub fn is_dc(&self) -> bool {
        self.k_row == 0 && self.k_col == 0
    }

    /// The row index is its own conjugate partner (even length, Nyquist row).
    pub fn row_nyquist(&self) -> bool {
        self.n_rows % 2 == 0 && 2 * self.k_row.unsigned_abs() as usize == self.n_rows
    }

    pub fn col_nyquist(&self) -> bool {
        self.n_cols % 2 == 0 && 2 * self.k_col.unsigned_abs() as usize == self.n_cols
    }
}

fn signed_index(i: usize, n: usize) -> i64 {
    if i < n.div_ceil(2) {
        i as i64
    } else {
        i as i64 - n as i64
    }
}

/// Forward/inverse 2D transform over a row-major buffer.
struct Plan2d {
    rows: usize,
    cols: usize,
    row_fwd: Arc<dyn Fft<f64>>,
    row_inv: Arc<dyn Fft<f64>>,
    col_fwd: Arc<dyn Fft<f64>>,
    col_inv: Arc<dyn Fft<f64>>,
}

impl Plan2d {
    fn new(rows: usize, cols: usize) -> Self {
        let mut planner = FftPlanner::new();
        Self {
            rows,
            cols,
            row_fwd: planner.plan_fft_forward(cols),
            row_inv: planner.plan_fft_inverse(cols),
            col_fwd: planner.plan_fft_forward(rows),
            col_inv: planner.plan_fft_inverse(rows),
        }
    }

    fn run(&self, buf: &mut [Complex64], inverse: bool) {
        let (row_fft, col_fft) = if inverse {
            (&self.row_inv, &self.col_inv)
        } else {
            (&self.row_fwd, &self.col_fwd)
        };
        for row in buf.chunks_exact_mut(self.cols) {
            row_fft.process(row);
        }
        let mut column = vec![Complex64::default(); self.rows];
        for c in 0..self.cols {
            for r in 0..self.rows {
                column[r] = buf[r * self.cols + c];
            }
            col_fft.process(&mut column);
            for r in 0..self.rows {
                buf[r * self.cols + c] = column[r];
            }
        }
    }
}

/// Spectrum of a grid after replicate padding to the next power of two.
pub struct Spectrum {
    plan: Plan2d,
    data: Vec<Complex64>,
    pad_top: usize,
    pad_left: usize,
    height: usize,
    width: usize,
}

impl Spectrum {
    pub fn forward(grid: &Grid) -> Self {
        let (h, w) = grid.dims();
        let (ph, pw) = (h.next_power_of_two(), w.next_power_of_two());
        let (pad_top, pad_left) = ((ph - h) / 2, (pw - w) / 2);
        let mut data = Vec::with_capacity(ph * pw);
        for r in 0..ph {
            for c in 0..pw {
                let v = grid.get_clamped(r as isize - pad_top as isize, c as isize - pad_left as isize);
                data.push(Complex64::new(v, 0.0));
            }
        }
        let plan = Plan2d::new(ph, pw);
        plan.run(&mut data, false);
        Self {
            plan,
            data,
            pad_top,
            pad_left,
            height: h,
            width: w,
        }
    }

    /// Multiplies by `response(bin)`, inverts, and crops the real part back
    /// to the original extent.
    pub fn filtered(&self, response: impl Fn(Bin) -> Complex64) -> Grid {
        let (rows, cols) = (self.plan.rows, self.plan.cols);
        let mut buf = self.data.clone();
        for r in 0..rows {
            let k_row = signed_index(r, rows);
            for c in 0..cols {
                let bin = Bin {
                    k_row,
                    k_col: signed_index(c, cols),
                    n_rows: rows,
                    n_cols: cols,
                };
                buf[r * cols + c] *= response(bin);
            }
        }
        self.plan.run(&mut buf, true);
        let scale = 1.0 / (rows * cols) as f64;
        Grid::from_fn(self.height, self.width, |r, c| {
            buf[(r + self.pad_top) * cols + c + self.pad_left].re * scale
        })
    }
}
