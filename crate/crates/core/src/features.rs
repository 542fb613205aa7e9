//! Penultimate-layer feature dump with a 2-D principal-component projection.

use std::io::Write;

use nalgebra::{DMatrix, SymmetricEigen};

use crate::error::{Error, Result};
use crate::model::TaskModel;
use crate::train::{predict, SpectralSet};

/// Projects `n` rows of width `dim` onto their top two principal axes.
///
/// Rows are centered first. Each axis is signed so its largest-magnitude
/// loading is positive.
pub fn pca_2d(rows: &[f64], dim: usize) -> Result<Vec<[f64; 2]>> {
    if dim == 0 || !rows.len().is_multiple_of(dim) {
        return Err(Error::invalid(format!(
            "{} values do not form rows of width {dim}",
            rows.len()
        )));
    }
    let n = rows.len() / dim;
    if n == 0 {
        return Ok(Vec::new());
    }
    let mut x = DMatrix::from_row_slice(n, dim, rows);
    let mean = x.row_mean();
    for mut r in x.row_iter_mut() {
        r -= &mean;
    }
    let cov = x.transpose() * &x / (n.max(2) - 1) as f64;
    let eig = SymmetricEigen::new(cov);
    let mut order: Vec<usize> = (0..dim).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));
    let mut axes = DMatrix::<f64>::zeros(dim, 2);
    for (k, &i) in order.iter().take(2).enumerate() {
        let mut v = eig.eigenvectors.column(i).into_owned();
        let lead = v
            .iter()
            .copied()
            .fold(0.0f64, |m, a| if a.abs() > m.abs() { a } else { m });
        if lead < 0.0 {
            v.neg_mut();
        }
        axes.set_column(k, &v);
    }
    let proj = x * axes;
    Ok((0..n).map(|i| [proj[(i, 0)], proj[(i, 1)]]).collect())
}

/// Writes one CSV row per sample: id, grade, domain, features, pca_x, pca_y.
/// Returns the number of rows written.
pub fn dump_features(
    model: &TaskModel<f32>,
    data: &SpectralSet,
    indices: &[usize],
    out: &mut impl Write,
) -> Result<usize> {
    let (_, features) = predict(model, data, indices)?;
    let dim = model.config().feature_dim();
    let wide: Vec<f64> = features.iter().map(|&v| v as f64).collect();
    let proj = pca_2d(&wide, dim)?;
    write!(out, "id,grade,domain")?;
    for j in 0..dim {
        write!(out, ",f{j}")?;
    }
    writeln!(out, ",pca_x,pca_y")?;
    for (k, &i) in indices.iter().enumerate() {
        let s = &data.samples[i];
        write!(out, "{i},{},{}", s.grade, s.domain)?;
        for v in &features[k * dim..(k + 1) * dim] {
            write!(out, ",{v}")?;
        }
        writeln!(out, ",{},{}", proj[k][0], proj[k][1])?;
    }
    out.flush()?;
    Ok(indices.len())
}
