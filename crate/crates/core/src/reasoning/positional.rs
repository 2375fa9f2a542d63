use crate::error::{Error, Result};

use super::tensor::Matrix;

/// Fixed 2D sine/cosine table with one row per patch (row-major over the
/// grid). Channels `[0, d/2)` encode the row index and `[d/2, d)` the column
/// index; within each half, channel `2i` is `sin(pos·ω_i)` and `2i+1` is
/// `cos(pos·ω_i)` with `ω_i = 10000^(-i/(d/4))`.
pub fn sincos_positional(height: usize, width: usize, d_model: usize) -> Result<Matrix> {
    if d_model == 0 || d_model % 4 != 0 {
        return Err(Error::Config(format!(
            "positional table needs d_model divisible by 4, got {d_model}"
        )));
    }
    let half = d_model / 2;
    let quarter = d_model / 4;
    let omega: Vec<f64> = (0..quarter)
        .map(|i| 1.0 / 10000f64.powf(i as f64 / quarter as f64))
        .collect();
    let mut table = Matrix::zeros(height * width, d_model);
    for r in 0..height {
        for c in 0..width {
            let row = table.row_mut(r * width + c);
            for (i, &w) in omega.iter().enumerate() {
                let (pr, pc) = (r as f64 * w, c as f64 * w);
                row[2 * i] = pr.sin();
                row[2 * i + 1] = pr.cos();
                row[half + 2 * i] = pc.sin();
                row[half + 2 * i + 1] = pc.cos();
            }
        }
    }
    Ok(table)
}
