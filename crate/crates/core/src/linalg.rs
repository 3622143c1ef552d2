//! Small dense linear algebra: cyclic Jacobi eigendecomposition of symmetric
//! matrices, the dominant singular triple, and Cholesky solves.

use crate::error::{Error, Result};
use crate::tensor::{dot, Tensor};

const SYMMETRY_TOL: f64 = 1e-10;
const MAX_SWEEPS: usize = 100;

/// Eigenpairs of a symmetric matrix, eigenvalues in descending order.
#[derive(Clone, Debug)]
pub struct SymEig {
    pub values: Vec<f64>,
    /// Row `i` is the unit eigenvector for `values[i]`.
    pub vectors: Tensor,
}

impl SymEig {
    pub fn vector(&self, i: usize) -> &[f64] {
        self.vectors.row(i)
    }

    /// `Σ σ_i μ_iᵀ μ_i`.
    pub fn reconstruct(&self) -> Tensor {
        let n = self.values.len();
        let mut out = Tensor::zeros(&[n, n]);
        for (i, &s) in self.values.iter().enumerate() {
            let v = self.vectors.row(i);
            for r in 0..n {
                let vr = s * v[r];
                for (o, vc) in out.row_mut(r).iter_mut().zip(v) {
                    *o += vr * vc;
                }
            }
        }
        out
    }
}

fn square_dim(m: &Tensor, op: &'static str) -> Result<usize> {
    if m.rank() != 2 || m.shape()[0] != m.shape()[1] {
        return Err(Error::ShapeMismatch {
            op,
            detail: format!("expected a square matrix, got {:?}", m.shape()),
        });
    }
    Ok(m.shape()[0])
}

/// Symmetric eigendecomposition by cyclic Jacobi rotations.
pub fn sym_eig(s: &Tensor) -> Result<SymEig> {
    let n = square_dim(s, "sym_eig")?;
    if !s.is_finite() {
        return Err(Error::NonFinite("sym_eig"));
    }
    let scale = s.max_abs().max(1.0);
    let mut asym: f64 = 0.0;
    for i in 0..n {
        for j in i + 1..n {
            asym = asym.max((s.get(i, j) - s.get(j, i)).abs());
        }
    }
    if asym > SYMMETRY_TOL * scale {
        return Err(Error::Asymmetric(asym));
    }

    let mut a = s.data().to_vec();
    // Symmetrize exactly so rotations see a consistent matrix.
    for i in 0..n {
        for j in i + 1..n {
            let m = 0.5 * (a[i * n + j] + a[j * n + i]);
            a[i * n + j] = m;
            a[j * n + i] = m;
        }
    }
    // v holds eigenvectors as rows; rotations are applied to rows.
    let mut v = Tensor::eye(n).into_data();

    for _ in 0..MAX_SWEEPS {
        let off: f64 = (0..n)
            .flat_map(|i| (i + 1..n).map(move |j| (i, j)))
            .map(|(i, j)| a[i * n + j] * a[i * n + j])
            .sum();
        let diag: f64 = (0..n).map(|i| a[i * n + i] * a[i * n + i]).sum();
        if off <= f64::EPSILON * f64::EPSILON * diag.max(f64::MIN_POSITIVE) || off == 0.0 {
            break;
        }
        for p in 0..n {
            for q in p + 1..n {
                let apq = a[p * n + q];
                if apq == 0.0 {
                    continue;
                }
                let app = a[p * n + p];
                let aqq = a[q * n + q];
                let theta = (aqq - app) / (2.0 * apq);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let t = if theta == 0.0 { 1.0 } else { t };
                let c = 1.0 / (t * t + 1.0).sqrt();
                let sn = t * c;
                // A ← Rᵀ A R on rows/cols p, q.
                for k in 0..n {
                    let akp = a[k * n + p];
                    let akq = a[k * n + q];
                    a[k * n + p] = c * akp - sn * akq;
                    a[k * n + q] = sn * akp + c * akq;
                }
                for k in 0..n {
                    let apk = a[p * n + k];
                    let aqk = a[q * n + k];
                    a[p * n + k] = c * apk - sn * aqk;
                    a[q * n + k] = sn * apk + c * aqk;
                }
                a[p * n + q] = 0.0;
                a[q * n + p] = 0.0;
                for k in 0..n {
                    let vp = v[p * n + k];
                    let vq = v[q * n + k];
                    v[p * n + k] = c * vp - sn * vq;
                    v[q * n + k] = sn * vp + c * vq;
                }
            }
        }
    }

    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| a[j * n + j].total_cmp(&a[i * n + i]).then(i.cmp(&j)));
    let values = order.iter().map(|&i| a[i * n + i]).collect();
    let mut vectors = Vec::with_capacity(n * n);
    for &i in &order {
        let row = &v[i * n..(i + 1) * n];
        // Deterministic sign: first nonzero component positive.
        let flip = row
            .iter()
            .find(|x| x.abs() > 1e-14)
            .is_some_and(|x| *x < 0.0);
        vectors.extend(row.iter().map(|x| if flip { -x } else { *x }));
    }
    Ok(SymEig {
        values,
        vectors: Tensor::matrix(n, n, vectors)?,
    })
}

/// Dominant singular value with unit left and right singular vectors.
#[derive(Clone, Debug)]
pub struct SingularTriple {
    pub sigma: f64,
    pub left: Vec<f64>,
    pub right: Vec<f64>,
}

/// Largest singular triple of `m` (r×c): `m·right = sigma·left`.
///
/// Eigendecomposes the smaller Gram matrix. Sign is fixed so the first
/// nonzero component of `right` is positive.
pub fn top_singular(m: &Tensor) -> Result<SingularTriple> {
    if m.rank() != 2 {
        return Err(Error::ShapeMismatch {
            op: "top_singular",
            detail: format!("expected a matrix, got {:?}", m.shape()),
        });
    }
    if !m.is_finite() {
        return Err(Error::NonFinite("top_singular"));
    }
    let (r, c) = (m.shape()[0], m.shape()[1]);
    let (mut left, mut right);
    if c <= r {
        right = sym_eig(&m.t_matmul(m)?)?.vector(0).to_vec();
        left = mat_vec(m, &right);
        normalize_or_axis(&mut left);
    } else {
        left = sym_eig(&m.matmul_t(m)?)?.vector(0).to_vec();
        right = vec_mat(&left, m);
        normalize_or_axis(&mut right);
    }
    let flip = right
        .iter()
        .find(|x| x.abs() > 1e-14)
        .is_some_and(|x| *x < 0.0);
    if flip {
        right.iter_mut().for_each(|x| *x = -*x);
        left.iter_mut().for_each(|x| *x = -*x);
    }
    let mv = mat_vec(m, &right);
    Ok(SingularTriple {
        sigma: dot(&mv, &mv).sqrt(),
        left,
        right,
    })
}

fn normalize_or_axis(v: &mut [f64]) {
    let norm = dot(v, v).sqrt();
    if norm > 0.0 {
        v.iter_mut().for_each(|x| *x /= norm);
    } else if !v.is_empty() {
        v.iter_mut().for_each(|x| *x = 0.0);
        v[0] = 1.0;
    }
}

/// Spectral norm.
pub fn spectral_norm(m: &Tensor) -> Result<f64> {
    Ok(top_singular(m)?.sigma)
}

pub fn mat_vec(m: &Tensor, x: &[f64]) -> Vec<f64> {
    (0..m.rows()).map(|i| dot(m.row(i), x)).collect()
}

/// Row vector times matrix: `x·m`.
pub fn vec_mat(x: &[f64], m: &Tensor) -> Vec<f64> {
    let mut out = vec![0.0; m.cols()];
    for (i, &xi) in x.iter().enumerate() {
        if xi == 0.0 {
            continue;
        }
        for (o, v) in out.iter_mut().zip(m.row(i)) {
            *o += xi * v;
        }
    }
    out
}

/// Lower Cholesky factor of a symmetric positive-definite matrix.
pub fn cholesky(s: &Tensor) -> Result<Tensor> {
    let n = square_dim(s, "cholesky")?;
    let mut l = Tensor::zeros(&[n, n]);
    for i in 0..n {
        for j in 0..=i {
            let partial = dot(&l.row(i)[..j], &l.row(j)[..j]);
            let v = s.get(i, j) - partial;
            if i == j {
                if !(v > 0.0) {
                    return Err(Error::Singular);
                }
                l.set(i, i, v.sqrt());
            } else {
                let d = l.get(j, j);
                l.set(i, j, v / d);
            }
        }
    }
    Ok(l)
}

/// Solves `S X = B` for SPD `S` given its Cholesky factor `L`.
pub fn cholesky_solve(l: &Tensor, b: &Tensor) -> Result<Tensor> {
    let n = square_dim(l, "cholesky_solve")?;
    if b.rows() != n || b.rank() != 2 {
        return Err(Error::ShapeMismatch {
            op: "cholesky_solve",
            detail: format!("{:?} vs rhs {:?}", l.shape(), b.shape()),
        });
    }
    let k = b.cols();
    let mut x = b.clone();
    // Forward: L Y = B.
    for i in 0..n {
        for j in 0..i {
            let lij = l.get(i, j);
            if lij == 0.0 {
                continue;
            }
            let (head, tail) = x.data_mut().split_at_mut(i * k);
            let yj = &head[j * k..(j + 1) * k];
            for (o, v) in tail[..k].iter_mut().zip(yj) {
                *o -= lij * v;
            }
        }
        let d = l.get(i, i);
        x.row_mut(i).iter_mut().for_each(|v| *v /= d);
    }
    // Backward: Lᵀ X = Y.
    for i in (0..n).rev() {
        for j in i + 1..n {
            let lji = l.get(j, i);
            if lji == 0.0 {
                continue;
            }
            let (head, tail) = x.data_mut().split_at_mut(j * k);
            let xj = &tail[..k];
            for (o, v) in head[i * k..(i + 1) * k].iter_mut().zip(xj) {
                *o -= lji * v;
            }
        }
        let d = l.get(i, i);
        x.row_mut(i).iter_mut().for_each(|v| *v /= d);
    }
    x.ensure_finite("cholesky_solve")
}

/// General square solve `A X = B` by Gaussian elimination with partial pivoting.
pub fn solve(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let n = square_dim(a, "solve")?;
    if b.rows() != n || b.rank() != 2 {
        return Err(Error::ShapeMismatch {
            op: "solve",
            detail: format!("{:?} vs rhs {:?}", a.shape(), b.shape()),
        });
    }
    let k = b.cols();
    let mut m = a.data().to_vec();
    let mut x = b.data().to_vec();
    let scale = a.max_abs();
    for col in 0..n {
        let pivot = (col..n)
            .max_by(|&i, &j| m[i * n + col].abs().total_cmp(&m[j * n + col].abs()))
            .unwrap_or(col);
        if m[pivot * n + col].abs() <= 1e-14 * scale.max(f64::MIN_POSITIVE) {
            return Err(Error::Singular);
        }
        if pivot != col {
            for c in 0..n {
                m.swap(col * n + c, pivot * n + c);
            }
            for c in 0..k {
                x.swap(col * k + c, pivot * k + c);
            }
        }
        let d = m[col * n + col];
        for r in col + 1..n {
            let f = m[r * n + col] / d;
            if f == 0.0 {
                continue;
            }
            for c in col..n {
                m[r * n + c] -= f * m[col * n + c];
            }
            for c in 0..k {
                x[r * k + c] -= f * x[col * k + c];
            }
        }
    }
    for r in (0..n).rev() {
        for c in 0..k {
            let mut v = x[r * k + c];
            for j in r + 1..n {
                v -= m[r * n + j] * x[j * k + c];
            }
            x[r * k + c] = v / m[r * n + r];
        }
    }
    Tensor::matrix(n, k, x)?.ensure_finite("solve")
}

pub fn inverse(a: &Tensor) -> Result<Tensor> {
    let n = square_dim(a, "inverse")?;
    solve(a, &Tensor::eye(n))
}
