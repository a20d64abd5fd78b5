//! Squared distance covariance: the unbiased U-statistic over sample
//! quadruples, its O(n²) U-centered form, and exact gradients of the latter.

use ndarray::{Array2, ArrayView1, ArrayView2};

use crate::error::{Error, Result};
use crate::par::{self, Exec};

/// Rows below which the pairwise passes stay on the calling thread.
const PAR_MIN_ROWS: usize = 256;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DcovResult {
    /// Unbiased estimate; can be slightly negative.
    pub value: f64,
    pub n: usize,
}

fn check(z: &ArrayView2<f64>, y: &ArrayView2<f64>) -> Result<usize> {
    let n = z.nrows();
    if y.nrows() != n {
        return Err(Error::shape(format!(
            "sample row counts differ: {} vs {}",
            n,
            y.nrows()
        )));
    }
    if n < 4 {
        return Err(Error::InsufficientSamples { needed: 4, got: n });
    }
    if z.iter().chain(y.iter()).any(|v| !v.is_finite()) {
        return Err(Error::numeric("dcov samples"));
    }
    Ok(n)
}

#[inline]
fn dist(a: ArrayView1<f64>, b: ArrayView1<f64>) -> f64 {
    a.iter()
        .zip(b.iter())
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        .sqrt()
}

/// Row-major copy of a sample matrix for the O(n²) passes, which are
/// dominated by short-row distance evaluations.
struct Rows {
    data: Vec<f64>,
    k: usize,
}

impl Rows {
    fn new(m: &ArrayView2<f64>) -> Self {
        Rows {
            data: m.iter().copied().collect(),
            k: m.ncols(),
        }
    }

    #[inline]
    fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.k..(i + 1) * self.k]
    }

    #[inline]
    fn dist(&self, i: usize, j: usize) -> f64 {
        self.row(i)
            .iter()
            .zip(self.row(j))
            .map(|(x, y)| (x - y) * (x - y))
            .sum::<f64>()
            .sqrt()
    }
}

fn distance_matrix(m: &ArrayView2<f64>) -> Array2<f64> {
    let n = m.nrows();
    let mut d = Array2::zeros((n, n));
    for i in 0..n {
        for j in (i + 1)..n {
            let v = dist(m.row(i), m.row(j));
            d[[i, j]] = v;
            d[[j, i]] = v;
        }
    }
    d
}

/// The symmetric quadruple kernel applied to four sample indices.
fn quad_kernel(a: &Array2<f64>, b: &Array2<f64>, idx: [usize; 4]) -> f64 {
    let mut cross = 0.0;
    let mut sum_a = 0.0;
    let mut sum_b = 0.0;
    let mut row_products = 0.0;
    for &i in &idx {
        let mut row_a = 0.0;
        let mut row_b = 0.0;
        for &j in &idx {
            if i != j {
                cross += a[[i, j]] * b[[i, j]];
                row_a += a[[i, j]];
                row_b += b[[i, j]];
            }
        }
        sum_a += row_a;
        sum_b += row_b;
        row_products += row_a * row_b;
    }
    cross / 4.0 + sum_a * sum_b / 24.0 - row_products / 4.0
}

/// Average of the quadruple kernel over all `C(n, 4)` index subsets. O(n⁴).
pub fn dcov_brute(z: ArrayView2<f64>, y: ArrayView2<f64>) -> Result<DcovResult> {
    let n = check(&z, &y)?;
    let a = distance_matrix(&z);
    let b = distance_matrix(&y);
    let mut total = 0.0;
    let mut count = 0u64;
    for i1 in 0..n {
        for i2 in (i1 + 1)..n {
            for i3 in (i2 + 1)..n {
                for i4 in (i3 + 1)..n {
                    total += quad_kernel(&a, &b, [i1, i2, i3, i4]);
                    count += 1;
                }
            }
        }
    }
    Ok(DcovResult {
        value: total / count as f64,
        n,
    })
}

/// Row sums of the pairwise distance matrix, computed without storing it.
fn distance_row_sums(exec: Exec, m: &Rows) -> Vec<f64> {
    let n = m.data.len() / m.k.max(1);
    par::map_range(exec, n, |i| (0..n).map(|j| m.dist(i, j)).sum())
}

/// Centering constants of one sample: row sums scaled by `1/(n-2)` and the
/// grand-total term `sum/((n-1)(n-2))`.
struct Centering {
    row: Vec<f64>,
    grand: f64,
}

impl Centering {
    fn new(row_sums: Vec<f64>) -> Self {
        let n = row_sums.len() as f64;
        let total: f64 = row_sums.iter().sum();
        Centering {
            row: row_sums.iter().map(|r| r / (n - 2.0)).collect(),
            grand: total / ((n - 1.0) * (n - 2.0)),
        }
    }

    #[inline]
    fn centered(&self, d: f64, i: usize, j: usize) -> f64 {
        d - self.row[i] - self.row[j] + self.grand
    }
}

/// O(n²) estimator via U-centered distance matrices, using the default
/// execution mode.
pub fn dcov_fast(z: ArrayView2<f64>, y: ArrayView2<f64>) -> Result<DcovResult> {
    dcov_fast_with(Exec::default(), z, y)
}

pub fn dcov_fast_with(exec: Exec, z: ArrayView2<f64>, y: ArrayView2<f64>) -> Result<DcovResult> {
    let n = check(&z, &y)?;
    let exec = exec.for_size(n, PAR_MIN_ROWS);
    let (zr, yr) = (Rows::new(&z), Rows::new(&y));
    let ca = Centering::new(distance_row_sums(exec, &zr));
    let cb = Centering::new(distance_row_sums(exec, &yr));
    let rows: Vec<f64> = par::map_range(exec, n, |i| {
        let mut s = 0.0;
        for j in 0..n {
            if j != i {
                let at = ca.centered(zr.dist(i, j), i, j);
                let bt = cb.centered(yr.dist(i, j), i, j);
                s += at * bt;
            }
        }
        s
    });
    let total: f64 = rows.iter().sum();
    let nf = n as f64;
    Ok(DcovResult {
        value: total / (nf * (nf - 3.0)),
        n,
    })
}

/// Gradient of one argument given the other's U-centering. For each row `i`:
/// `2c * sum_j other~_ij (m_i - m_j) / |m_i - m_j|`, zero for coincident rows.
fn grad_against(exec: Exec, m: &Rows, other: &Rows, other_centering: &Centering, scale: f64) -> Array2<f64> {
    let k = m.k;
    let n = m.data.len() / k.max(1);
    let rows: Vec<Vec<f64>> = par::map_range(exec, n, |i| {
        let mi = m.row(i);
        let mut g = vec![0.0; k];
        for j in 0..n {
            if j == i {
                continue;
            }
            let mj = m.row(j);
            let d = m.dist(i, j);
            if d == 0.0 {
                continue;
            }
            let w = other_centering.centered(other.dist(i, j), i, j) * scale / d;
            for c in 0..k {
                g[c] += w * (mi[c] - mj[c]);
            }
        }
        g
    });
    let mut out = Array2::zeros((n, k));
    for (i, g) in rows.into_iter().enumerate() {
        for (c, v) in g.into_iter().enumerate() {
            out[[i, c]] = v;
        }
    }
    out
}

/// Exact gradient of [`dcov_fast`] with respect to every sample entry.
pub fn dcov_grad(z: ArrayView2<f64>, y: ArrayView2<f64>) -> Result<(DcovResult, Array2<f64>, Array2<f64>)> {
    dcov_grad_with(Exec::default(), z, y)
}

pub fn dcov_grad_with(
    exec: Exec,
    z: ArrayView2<f64>,
    y: ArrayView2<f64>,
) -> Result<(DcovResult, Array2<f64>, Array2<f64>)> {
    let value = dcov_fast_with(exec, z, y)?;
    let n = value.n;
    let exec = exec.for_size(n, PAR_MIN_ROWS);
    let (zr, yr) = (Rows::new(&z), Rows::new(&y));
    let ca = Centering::new(distance_row_sums(exec, &zr));
    let cb = Centering::new(distance_row_sums(exec, &yr));
    let nf = n as f64;
    let scale = 2.0 / (nf * (nf - 3.0));
    let gz = grad_against(exec, &zr, &yr, &cb, scale);
    let gy = grad_against(exec, &yr, &zr, &ca, scale);
    Ok((value, gz, gy))
}
