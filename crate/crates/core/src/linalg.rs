//! Dense decompositions that sit outside the autodiff graph.

use crate::error::Result;
use crate::tensor::Tensor;

/// Singular values at or below `SV_CUTOFF * sigma_max` count as zero when
/// deciding numerical rank.
pub const SV_CUTOFF: f64 = 1e-10;

/// Thin singular value decomposition `a = u * diag(sigma) * vt`.
#[derive(Clone, Debug)]
pub struct Svd {
    /// `m x n` with orthonormal columns where `sigma > 0`.
    pub u: Tensor,
    /// Non-increasing.
    pub sigma: Vec<f64>,
    /// `n x n` orthogonal.
    pub vt: Tensor,
}

/// One-sided Jacobi SVD (Hestenes). Columns of a working copy of `a` are
/// rotated pairwise until mutually orthogonal; their norms are the singular
/// values.
// Jacobi sweeps update two columns at once, so index loops read best.
#[allow(clippy::needless_range_loop)]
pub fn svd(a: &Tensor) -> Result<Svd> {
    let (m, n) = a.shape();
    // Column-major working copies.
    let mut cols: Vec<Vec<f64>> = (0..n).map(|j| a.column(j)).collect();
    let mut v: Vec<Vec<f64>> = (0..n)
        .map(|j| (0..n).map(|i| if i == j { 1.0 } else { 0.0 }).collect())
        .collect();
    let dot = |x: &[f64], y: &[f64]| x.iter().zip(y).map(|(a, b)| a * b).sum::<f64>();
    for _sweep in 0..100 {
        let mut rotated = false;
        for p in 0..n {
            for q in p + 1..n {
                let alpha = dot(&cols[p], &cols[p]);
                let beta = dot(&cols[q], &cols[q]);
                let gamma = dot(&cols[p], &cols[q]);
                if gamma.abs() <= f64::EPSILON * (alpha * beta).sqrt() || gamma == 0.0 {
                    continue;
                }
                rotated = true;
                let zeta = (beta - alpha) / (2.0 * gamma);
                let t = zeta.signum() / (zeta.abs() + (1.0 + zeta * zeta).sqrt());
                let t = if zeta == 0.0 { 1.0 } else { t };
                let c = 1.0 / (1.0 + t * t).sqrt();
                let s = c * t;
                for k in 0..m {
                    let (x, y) = (cols[p][k], cols[q][k]);
                    cols[p][k] = c * x - s * y;
                    cols[q][k] = s * x + c * y;
                }
                for k in 0..n {
                    let (x, y) = (v[p][k], v[q][k]);
                    v[p][k] = c * x - s * y;
                    v[q][k] = s * x + c * y;
                }
            }
        }
        if !rotated {
            break;
        }
    }
    let mut order: Vec<usize> = (0..n).collect();
    let norms: Vec<f64> = cols.iter().map(|c| dot(c, c).sqrt()).collect();
    order.sort_by(|&i, &j| norms[j].total_cmp(&norms[i]));
    let mut u = vec![0.0; m * n];
    let mut vt = vec![0.0; n * n];
    let mut sigma = Vec::with_capacity(n);
    for (dst, &src) in order.iter().enumerate() {
        let s = norms[src];
        sigma.push(s);
        for k in 0..m {
            u[k * n + dst] = if s > 0.0 { cols[src][k] / s } else { 0.0 };
        }
        for k in 0..n {
            vt[dst * n + k] = v[src][k];
        }
    }
    Ok(Svd {
        u: Tensor::from_parts(m, n, u),
        sigma,
        vt: Tensor::from_parts(n, n, vt),
    })
}

impl Svd {
    /// Numerical rank under the relative cutoff `rel`.
    pub fn rank(&self, rel: f64) -> usize {
        let max = self.sigma.first().copied().unwrap_or(0.0);
        self.sigma.iter().filter(|&&s| s > rel * max && s > 0.0).count()
    }
}

/// Orthonormal basis (`m x rank`) of the column space of `a`, or `None`
/// when `a` is numerically zero.
pub fn column_space_basis(a: &Tensor) -> Result<Option<Tensor>> {
    let d = svd(a)?;
    let r = d.rank(SV_CUTOFF);
    if r == 0 {
        return Ok(None);
    }
    let m = a.rows();
    let idx: Vec<usize> = (0..r).collect();
    let mut data = Vec::with_capacity(m * r);
    for i in 0..m {
        data.extend(idx.iter().map(|&j| d.u.get(i, j)));
    }
    Ok(Some(Tensor::from_parts(m, r, data)))
}

/// `||(I - P) m||_F` where `P` projects onto the column space of `basis_of`.
pub fn residual_outside_column_space(basis_of: &Tensor, m: &Tensor) -> Result<f64> {
    match column_space_basis(basis_of)? {
        None => Ok(m.frobenius_norm()),
        Some(u) => {
            let coeffs = u.transpose().matmul(m)?;
            let proj = u.matmul(&coeffs)?;
            Ok(m.sub(&proj)?.frobenius_norm())
        }
    }
}
