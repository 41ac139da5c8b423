//! Scaling and greedy pairing of uniform prior samples with optimized samples.

use std::io::Write;

use nalgebra::DMatrix;

use crate::{Error, Result, SampleMatrix};

#[derive(Debug, Clone, PartialEq)]
pub struct PermutationOutput {
    /// Scaled prior rows reordered so that row `i` pairs with optimized row `i`.
    pub m_tilde: SampleMatrix,
    /// `pairing[i]` is the prior row assigned to optimized row `i`.
    pub pairing: Vec<usize>,
}

impl PermutationOutput {
    /// Two columns: `opt_index,prior_index`.
    pub fn write_pairing_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut writer = csv::Writer::from_writer(w);
        writer.write_record(["opt_index", "prior_index"])?;
        for (i, p) in self.pairing.iter().enumerate() {
            writer.write_record([i.to_string(), p.to_string()])?;
        }
        writer.flush()?;
        Ok(())
    }
}

/// Per-column `(min, max)` over the rows of `m`.
pub fn column_bounds(m: &SampleMatrix) -> Vec<(f64, f64)> {
    m.column_iter()
        .map(|c| c.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v))))
        .collect()
}

/// `m̂₀ = min(m_opt) + (max(m_opt) − min(m_opt))·m₀`, per dimension.
pub fn scale_prior(m0: &SampleMatrix, m_opt: &SampleMatrix) -> Result<SampleMatrix> {
    if m0.ncols() != m_opt.ncols() {
        return Err(Error::DimensionMismatch { context: "prior columns", expected: m_opt.ncols(), actual: m0.ncols() });
    }
    if m_opt.nrows() == 0 {
        return Err(Error::InvalidArgument("no optimized samples to scale against".into()));
    }
    let bounds = column_bounds(m_opt);
    Ok(DMatrix::from_fn(m0.nrows(), m0.ncols(), |i, j| {
        let (lo, hi) = bounds[j];
        lo + (hi - lo) * m0[(i, j)]
    }))
}

/// Scales `m0` and pairs optimized row `i = 0, 1, …` with its Euclidean
/// nearest unused scaled prior row, ties going to the lowest index.
pub fn permute(m0: &SampleMatrix, m_opt: &SampleMatrix) -> Result<PermutationOutput> {
    if m0.nrows() != m_opt.nrows() {
        return Err(Error::DimensionMismatch { context: "prior rows", expected: m_opt.nrows(), actual: m0.nrows() });
    }
    let scaled = scale_prior(m0, m_opt)?;
    let n = scaled.nrows();
    let mut used = vec![false; n];
    let mut pairing = Vec::with_capacity(n);
    for i in 0..n {
        let target = m_opt.row(i);
        let mut best = (usize::MAX, f64::INFINITY);
        for (k, taken) in used.iter().enumerate() {
            if *taken {
                continue;
            }
            let dist = (scaled.row(k) - target).norm_squared();
            if dist < best.1 {
                best = (k, dist);
            }
        }
        used[best.0] = true;
        pairing.push(best.0);
    }
    Ok(PermutationOutput { m_tilde: scaled.select_rows(&pairing), pairing })
}
