use crate::error::{Error, Result};
use crate::linalg::log_sum_exp;

/// Soft assignment of `rows` sources to `cols` targets. Rows carry mass 1,
/// columns carry `rows / cols`.
#[derive(Debug, Clone, PartialEq)]
pub struct TransportPlan {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl TransportPlan {
    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn get(&self, row: usize, col: usize) -> f64 {
        self.data[row * self.cols + col]
    }

    pub fn row(&self, row: usize) -> &[f64] {
        &self.data[row * self.cols..(row + 1) * self.cols]
    }

    pub fn row_sums(&self) -> Vec<f64> {
        self.data
            .chunks_exact(self.cols)
            .map(|r| r.iter().sum())
            .collect()
    }

    pub fn col_sums(&self) -> Vec<f64> {
        let mut sums = vec![0.0; self.cols];
        for r in self.data.chunks_exact(self.cols) {
            sums.iter_mut().zip(r).for_each(|(s, x)| *s += x);
        }
        sums
    }

    /// Target column mass, `rows / cols`.
    pub fn col_target(&self) -> f64 {
        self.rows as f64 / self.cols as f64
    }
}

/// Stop once every column is within this of its target mass.
const COL_TOL: f64 = 1e-12;

/// Entropic optimal transport with uniform marginals (rows 1, columns `rows/cols`).
///
/// Iterates column then row rescaling, so rows are exact on return and columns
/// converge. Runs in the scaling domain on a row-shifted kernel and falls back to
/// full log-domain updates if that kernel under- or overflows.
pub fn sinkhorn(cost: &[f64], rows: usize, cols: usize, epsilon: f64, iters: usize) -> Result<TransportPlan> {
    validate(cost, rows, cols, epsilon, iters)?;
    match sinkhorn_scaling(cost, rows, cols, epsilon, iters) {
        Some(plan) => Ok(plan),
        None => sinkhorn_log(cost, rows, cols, epsilon, iters),
    }
}

fn validate(cost: &[f64], rows: usize, cols: usize, epsilon: f64, iters: usize) -> Result<()> {
    if rows == 0 || cols == 0 || cost.len() != rows * cols {
        return Err(Error::Schema(format!(
            "sinkhorn: cost of length {} does not fit {rows} x {cols}",
            cost.len()
        )));
    }
    if !(epsilon > 0.0 && epsilon.is_finite()) {
        return Err(Error::Domain(format!("sinkhorn: epsilon must be positive, got {epsilon}")));
    }
    if iters == 0 {
        return Err(Error::Domain("sinkhorn: need at least one iteration".into()));
    }
    if cost.iter().any(|c| !c.is_finite()) {
        return Err(Error::Numerical("sinkhorn: cost matrix has non-finite entries".into()));
    }
    Ok(())
}

fn sinkhorn_scaling(cost: &[f64], rows: usize, cols: usize, epsilon: f64, iters: usize) -> Option<TransportPlan> {
    let b = rows as f64 / cols as f64;
    let mut kernel = vec![0.0; rows * cols];
    for (krow, crow) in kernel.chunks_exact_mut(cols).zip(cost.chunks_exact(cols)) {
        let min = crow.iter().copied().fold(f64::INFINITY, f64::min);
        for (k, c) in krow.iter_mut().zip(crow) {
            *k = (-(c - min) / epsilon).exp();
        }
    }
    let mut u = vec![1.0; rows];
    let mut v = vec![1.0; cols];
    let mut col_acc = vec![0.0; cols];
    for it in 0..iters {
        col_acc.iter_mut().for_each(|x| *x = 0.0);
        for (krow, &un) in kernel.chunks_exact(cols).zip(&u) {
            col_acc.iter_mut().zip(krow).for_each(|(a, k)| *a += k * un);
        }
        for (vk, &acc) in v.iter_mut().zip(&col_acc) {
            if acc <= 0.0 {
                return None;
            }
            *vk = b / acc;
        }
        for (un, krow) in u.iter_mut().zip(kernel.chunks_exact(cols)) {
            let s: f64 = krow.iter().zip(&v).map(|(k, vk)| k * vk).sum();
            *un = 1.0 / s;
        }
        if u.iter().chain(&v).any(|x| !x.is_finite() || *x == 0.0) {
            return None;
        }
        if (it + 1) % 10 == 0 || it + 1 == iters {
            col_acc.iter_mut().for_each(|x| *x = 0.0);
            for (krow, &un) in kernel.chunks_exact(cols).zip(&u) {
                col_acc.iter_mut().zip(krow).for_each(|(a, k)| *a += k * un);
            }
            let err = col_acc
                .iter()
                .zip(&v)
                .map(|(a, vk)| (a * vk - b).abs())
                .fold(0.0, f64::max);
            if err < COL_TOL * b.max(1.0) {
                break;
            }
        }
    }
    let mut data = kernel;
    for (prow, &un) in data.chunks_exact_mut(cols).zip(&u) {
        prow.iter_mut().zip(&v).for_each(|(p, vk)| *p *= un * vk);
    }
    if data.iter().any(|x| !x.is_finite()) {
        return None;
    }
    Some(TransportPlan { rows, cols, data })
}

/// Log-domain iterations; slower but immune to kernel underflow.
pub fn sinkhorn_log(cost: &[f64], rows: usize, cols: usize, epsilon: f64, iters: usize) -> Result<TransportPlan> {
    validate(cost, rows, cols, epsilon, iters)?;
    let log_b = (rows as f64 / cols as f64).ln();
    let log_k: Vec<f64> = cost.iter().map(|c| -c / epsilon).collect();
    // same starting point as the row-shifted scaling iteration
    let mut f: Vec<f64> = cost
        .chunks_exact(cols)
        .map(|r| r.iter().copied().fold(f64::INFINITY, f64::min) / epsilon)
        .collect();
    let mut g = vec![0.0; cols];
    let mut scratch = vec![0.0; rows.max(cols)];
    for _ in 0..iters {
        for (k, gk) in g.iter_mut().enumerate() {
            for n in 0..rows {
                scratch[n] = f[n] + log_k[n * cols + k];
            }
            *gk = log_b - log_sum_exp(&scratch[..rows]);
        }
        for (n, fneg) in f.iter_mut().enumerate() {
            let row = &log_k[n * cols..(n + 1) * cols];
            for k in 0..cols {
                scratch[k] = g[k] + row[k];
            }
            *fneg = -log_sum_exp(&scratch[..cols]);
        }
    }
    let mut data = vec![0.0; rows * cols];
    for n in 0..rows {
        for k in 0..cols {
            data[n * cols + k] = (f[n] + g[k] + log_k[n * cols + k]).exp();
        }
    }
    let plan = TransportPlan { rows, cols, data };
    if plan.row_sums().iter().any(|s| !(s.is_finite() && *s > 0.0))
        || plan.col_sums().iter().any(|s| !(s.is_finite() && *s > 0.0))
    {
        return Err(Error::Numerical(format!(
            "sinkhorn degenerated at epsilon {epsilon}: a full row or column vanished; try a larger epsilon"
        )));
    }
    Ok(plan)
}
