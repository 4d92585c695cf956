//! GEMM wrappers and the cyclic Jacobi symmetric eigensolver.

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// `c ← alpha·op(a)·op(b) + beta·c` on contiguous row-major buffers.
///
/// `op(a)` is `m×k`: `a` is stored `m×k`, or `k×m` when `trans_a`.
/// Likewise `op(b)` is `k×n`. `c` is `m×n`. When `beta` is zero `c` is not read.
#[allow(clippy::too_many_arguments)]
pub fn gemm<T: Scalar>(
    m: usize,
    k: usize,
    n: usize,
    alpha: T,
    a: &[T],
    trans_a: bool,
    b: &[T],
    trans_b: bool,
    beta: T,
    c: &mut [T],
) {
    assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n, "gemm extents");
    let (rsa, csa) = if trans_a { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if trans_b { (1, k as isize) } else { (n as isize, 1) };
    // SAFETY: extents checked above; `c` is a distinct mutable borrow.
    unsafe {
        T::gemm_raw(
            m,
            k,
            n,
            alpha,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// A strided matrix view into a row-major buffer.
#[derive(Clone, Copy)]
pub struct View<'a, T> {
    pub data: &'a [T],
    pub offset: usize,
    pub rows: usize,
    pub cols: usize,
    pub row_stride: usize,
}

impl<'a, T> View<'a, T> {
    pub fn new(data: &'a [T], offset: usize, rows: usize, cols: usize, row_stride: usize) -> Self {
        assert!(rows == 0 || cols == 0 || offset + (rows - 1) * row_stride + cols <= data.len());
        Self {
            data,
            offset,
            rows,
            cols,
            row_stride,
        }
    }
}

/// Strided GEMM: `c[view] ← alpha·op(a)·op(b) + beta·c[view]`.
///
/// `c_offset`/`c_stride` locate an `m×n` block of `c`.
#[allow(clippy::too_many_arguments)]
pub fn gemm_view<T: Scalar>(
    alpha: T,
    a: View<'_, T>,
    trans_a: bool,
    b: View<'_, T>,
    trans_b: bool,
    beta: T,
    c: &mut [T],
    c_offset: usize,
    c_stride: usize,
) {
    let (m, k) = if trans_a { (a.cols, a.rows) } else { (a.rows, a.cols) };
    let (k2, n) = if trans_b { (b.cols, b.rows) } else { (b.rows, b.cols) };
    assert_eq!(k, k2, "gemm_view inner extents");
    assert!(m == 0 || n == 0 || c_offset + (m - 1) * c_stride + n <= c.len());
    let (rsa, csa) = if trans_a {
        (1, a.row_stride as isize)
    } else {
        (a.row_stride as isize, 1)
    };
    let (rsb, csb) = if trans_b {
        (1, b.row_stride as isize)
    } else {
        (b.row_stride as isize, 1)
    };
    // SAFETY: views were bounds-checked on construction and `c` above.
    unsafe {
        T::gemm_raw(
            m,
            k,
            n,
            alpha,
            a.data.as_ptr().add(a.offset),
            rsa,
            csa,
            b.data.as_ptr().add(b.offset),
            rsb,
            csb,
            beta,
            c.as_mut_ptr().add(c_offset),
            c_stride as isize,
            1,
        );
    }
}

/// Eigendecomposition of a symmetric matrix.
#[derive(Clone, Debug)]
pub struct SymEig<T> {
    /// Sorted descending.
    pub values: Vec<T>,
    /// Row-major `k×k`; column `j` is the eigenvector of `values[j]`.
    pub vectors: Tensor<T>,
    pub sweeps: usize,
}

const MAX_SWEEPS: usize = 100;

fn frob<T: Scalar>(a: &[T]) -> T {
    a.iter().fold(T::zero(), |acc, &v| acc + v * v).sqrt()
}

fn check_symmetric<T: Scalar>(a: &Tensor<T>) -> Result<usize> {
    if a.rank() != 2 || a.shape()[0] != a.shape()[1] {
        return Err(Error::Shape(format!("sym_eig needs a square matrix, got {:?}", a.shape())));
    }
    let k = a.shape()[0];
    let norm = frob(a.data());
    let tol = T::of(1e-10).max(T::epsilon() * T::of(16.0)) * norm.max(T::min_positive_value());
    for i in 0..k {
        for j in i + 1..k {
            if (a.at(i, j) - a.at(j, i)).abs() > tol {
                return Err(Error::Contract(format!(
                    "matrix is not symmetric at ({i},{j}): {} vs {}",
                    a.at(i, j),
                    a.at(j, i)
                )));
            }
        }
    }
    Ok(k)
}

/// Symmetric eigendecomposition by cyclic Jacobi rotations.
///
/// Sweeps stop once the off-diagonal Frobenius mass drops below
/// `1e-12·‖A‖_F` (or `16ε·‖A‖_F` for single precision) or after 100 sweeps.
pub fn sym_eig<T: Scalar>(a: &Tensor<T>) -> Result<SymEig<T>> {
    let k = check_symmetric(a)?;
    let mut work: Vec<T> = a.data().to_vec();
    symmetrize(&mut work, k);
    let mut vecs = Tensor::<T>::identity(k).into_data();
    let sweeps = jacobi_in_place(&mut work, &mut vecs, k, 0);
    Ok(sorted(work, vecs, k, sweeps))
}

/// Jacobi eigendecomposition started from a previous eigenbasis `q0`.
///
/// `A` is first rotated into `q0`'s coordinates; when `q0` is close to the
/// true basis the remaining off-diagonal mass is small and few sweeps run.
pub fn sym_eig_warm<T: Scalar>(a: &Tensor<T>, q0: &Tensor<T>) -> Result<SymEig<T>> {
    let k = check_symmetric(a)?;
    if q0.shape() != a.shape() {
        return Err(Error::Shape(format!(
            "warm-start basis {:?} does not match {:?}",
            q0.shape(),
            a.shape()
        )));
    }
    let mut tmp = vec![T::zero(); k * k];
    gemm(k, k, k, T::one(), a.data(), false, q0.data(), false, T::zero(), &mut tmp);
    let mut work = vec![T::zero(); k * k];
    gemm(k, k, k, T::one(), q0.data(), true, &tmp, false, T::zero(), &mut work);
    symmetrize(&mut work, k);
    let mut vecs = q0.data().to_vec();
    let sweeps = jacobi_in_place(&mut work, &mut vecs, k, 0);
    Ok(sorted(work, vecs, k, sweeps))
}

/// As [`sym_eig_warm`] but without sorting: column `j` of the result is the
/// refinement of column `j` of `q0`, so per-direction state stays aligned.
/// At most `max_sweeps` sweeps run (0 means until convergence); the values
/// are then the diagonal of `QᵀAQ`.
pub fn sym_eig_warm_positional<T: Scalar>(a: &Tensor<T>, q0: &Tensor<T>, max_sweeps: usize) -> Result<SymEig<T>> {
    let k = check_symmetric(a)?;
    if q0.shape() != a.shape() {
        return Err(Error::Shape(format!(
            "warm-start basis {:?} does not match {:?}",
            q0.shape(),
            a.shape()
        )));
    }
    let mut tmp = vec![T::zero(); k * k];
    gemm(k, k, k, T::one(), a.data(), false, q0.data(), false, T::zero(), &mut tmp);
    let mut work = vec![T::zero(); k * k];
    gemm(k, k, k, T::one(), q0.data(), true, &tmp, false, T::zero(), &mut work);
    symmetrize(&mut work, k);
    let mut vecs = q0.data().to_vec();
    let sweeps = jacobi_in_place(&mut work, &mut vecs, k, max_sweeps);
    Ok(SymEig {
        values: (0..k).map(|i| work[i * k + i]).collect(),
        vectors: Tensor::new(vec![k, k], vecs)?,
        sweeps,
    })
}

fn symmetrize<T: Scalar>(a: &mut [T], k: usize) {
    let half = T::of(0.5);
    for i in 0..k {
        for j in i + 1..k {
            let m = (a[i * k + j] + a[j * k + i]) * half;
            a[i * k + j] = m;
            a[j * k + i] = m;
        }
    }
}

fn off_diag_sq<T: Scalar>(a: &[T], k: usize) -> T {
    let mut s = T::zero();
    for i in 0..k {
        for j in 0..k {
            if i != j {
                s += a[i * k + j] * a[i * k + j];
            }
        }
    }
    s
}

/// Runs sweeps on `a` (destroyed into its diagonal form) accumulating
/// rotations into the columns of `v`. Returns the number of sweeps.
/// `max_sweeps` of 0 means the default cap.
fn jacobi_in_place<T: Scalar>(a: &mut [T], v: &mut [T], k: usize, max_sweeps: usize) -> usize {
    let norm = frob(a);
    if k < 2 || norm == T::zero() {
        return 0;
    }
    let rel = T::of(1e-12).max(T::epsilon() * T::of(16.0));
    let target = rel * norm;
    let target_sq = target * target;
    // Entries below this are skipped; all of them together stay under the target.
    let skip = target / T::from_usize(k).unwrap();
    // Rows of `vt` are the columns of `v`, so every update below is contiguous.
    let mut vt = vec![T::zero(); k * k];
    transpose_into(v, &mut vt, k);
    let cap = if max_sweeps == 0 { MAX_SWEEPS } else { max_sweeps.min(MAX_SWEEPS) };
    let mut sweeps = 0;
    while sweeps < cap {
        if off_diag_sq(a, k) < target_sq {
            break;
        }
        sweeps += 1;
        for p in 0..k - 1 {
            for q in p + 1..k {
                let apq = a[p * k + q];
                if apq.abs() <= skip {
                    continue;
                }
                let app = a[p * k + p];
                let aqq = a[q * k + q];
                let theta = (aqq - app) / (T::of(2.0) * apq);
                let t = theta.signum() / (theta.abs() + (theta * theta + T::one()).sqrt());
                let c = T::one() / (t * t + T::one()).sqrt();
                let s = t * c;
                rotate_rows(a, p, q, k, c, s);
                a[p * k + p] = app - t * apq;
                a[q * k + q] = aqq + t * apq;
                a[p * k + q] = T::zero();
                a[q * k + p] = T::zero();
                // Symmetry: columns p and q mirror the new rows.
                for r in 0..k {
                    if r != p && r != q {
                        a[r * k + p] = a[p * k + r];
                        a[r * k + q] = a[q * k + r];
                    }
                }
                rotate_rows(&mut vt, p, q, k, c, s);
            }
        }
    }
    transpose_into(&vt, v, k);
    sweeps
}

/// `row_p ← c·row_p − s·row_q`, `row_q ← s·row_p + c·row_q` for `p < q`.
fn rotate_rows<T: Scalar>(m: &mut [T], p: usize, q: usize, k: usize, c: T, s: T) {
    let (lo, hi) = m.split_at_mut(q * k);
    let rp = &mut lo[p * k..(p + 1) * k];
    let rq = &mut hi[..k];
    for (x, y) in rp.iter_mut().zip(rq.iter_mut()) {
        let (xp, yq) = (*x, *y);
        *x = c * xp - s * yq;
        *y = s * xp + c * yq;
    }
}

fn transpose_into<T: Scalar>(src: &[T], dst: &mut [T], k: usize) {
    for i in 0..k {
        for j in 0..k {
            dst[j * k + i] = src[i * k + j];
        }
    }
}

fn sorted<T: Scalar>(a: Vec<T>, v: Vec<T>, k: usize, sweeps: usize) -> SymEig<T> {
    let mut order: Vec<usize> = (0..k).collect();
    order.sort_by(|&i, &j| {
        a[j * k + j]
            .partial_cmp(&a[i * k + i])
            .unwrap_or(std::cmp::Ordering::Equal)
    });
    let values = order.iter().map(|&i| a[i * k + i]).collect();
    let mut vectors = Tensor::zeros(&[k, k]);
    for (dst, &src) in order.iter().enumerate() {
        for r in 0..k {
            vectors.set(r, dst, v[r * k + src]);
        }
    }
    SymEig {
        values,
        vectors,
        sweeps,
    }
}

/// `Q diag(f(λ)) Qᵀ` for an eigendecomposition.
pub fn spectral_apply<T: Scalar>(eig: &SymEig<T>, f: impl Fn(T) -> T) -> Tensor<T> {
    let k = eig.values.len();
    let q = eig.vectors.data();
    let mut scaled = vec![T::zero(); k * k];
    for r in 0..k {
        for c in 0..k {
            scaled[r * k + c] = q[r * k + c] * f(eig.values[c]);
        }
    }
    let mut out = Tensor::zeros(&[k, k]);
    gemm(k, k, k, T::one(), &scaled, false, q, true, T::zero(), out.data_mut());
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng as _, SeedableRng};

    #[test]
    fn limited_sweeps_keep_an_orthonormal_refinement() {
        let mut r = rand_chacha::ChaCha8Rng::seed_from_u64(4);
        let k = 12;
        let g = Tensor::new(vec![k, k], (0..k * k).map(|_| r.random_range(-1.0..1.0)).collect()).unwrap();
        let a = g.transpose().unwrap().matmul(&g).unwrap();
        let off = |q: &Tensor<f64>| {
            let d = q.transpose().unwrap().matmul(&a.matmul(q).unwrap()).unwrap();
            (0..k).flat_map(|i| (0..k).map(move |j| (i, j))).filter(|(i, j)| i != j).map(|(i, j)| d.at(i, j).powi(2)).sum::<f64>()
        };
        let mut q = Tensor::identity(k);
        let mut last = off(&q);
        for _ in 0..4 {
            let e = sym_eig_warm_positional(&a, &q, 1).unwrap();
            assert_eq!(e.sweeps, 1);
            q = e.vectors;
            let now = off(&q);
            assert!(now < last);
            last = now;
        }
        let qtq = q.transpose().unwrap().matmul(&q).unwrap();
        for i in 0..k {
            for j in 0..k {
                assert!((qtq.at(i, j) - if i == j { 1.0 } else { 0.0 }).abs() < 1e-12);
            }
        }
        let full = sym_eig_warm_positional(&a, &q, 0).unwrap();
        assert!(off(&full.vectors) <= (1e-12 * frob(a.data())).powi(2));
    }

    fn reconstruct(e: &SymEig<f64>) -> Tensor<f64> {
        spectral_apply(e, |l| l)
    }

    fn max_abs_diff(a: &Tensor<f64>, b: &Tensor<f64>) -> f64 {
        a.data()
            .iter()
            .zip(b.data())
            .fold(0.0, |m, (x, y)| m.max((x - y).abs()))
    }

    #[test]
    fn diagonal_input() {
        let a: Tensor<f64> = Tensor::from_f64_rows(&[&[3.0, 0.0], &[0.0, 1.0]]).unwrap();
        let e = sym_eig(&a).unwrap();
        assert_eq!(e.values, vec![3.0, 1.0]);
        assert_eq!(e.vectors, Tensor::identity(2));
    }

    #[test]
    fn swap_matrix() {
        let a: Tensor<f64> = Tensor::from_f64_rows(&[&[0.0, 1.0], &[1.0, 0.0]]).unwrap();
        let e = sym_eig(&a).unwrap();
        assert!((e.values[0] - 1.0).abs() < 1e-15 && (e.values[1] + 1.0).abs() < 1e-15);
        let h = std::f64::consts::FRAC_1_SQRT_2;
        let (c0, c1) = ((e.vectors.at(0, 0), e.vectors.at(1, 0)), (e.vectors.at(0, 1), e.vectors.at(1, 1)));
        assert!((c0.0.abs() - h).abs() < 1e-15 && (c0.0 - c0.1).abs() < 1e-15);
        assert!((c1.0.abs() - h).abs() < 1e-15 && (c1.0 + c1.1).abs() < 1e-15);
    }

    #[test]
    fn random_reconstruction() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(7);
        let k = 8;
        let mut a = Tensor::<f64>::zeros(&[k, k]);
        for i in 0..k {
            for j in i..k {
                let v: f64 = rng.random_range(-1.0..1.0);
                a.set(i, j, v);
                a.set(j, i, v);
            }
        }
        let e = sym_eig(&a).unwrap();
        assert!(max_abs_diff(&reconstruct(&e), &a) <= 1e-9 * a.max_abs());
        assert!(e.values.windows(2).all(|w| w[0] >= w[1]));
        let warm = sym_eig_warm(&a, &e.vectors).unwrap();
        assert!(warm.sweeps <= 1);
        assert!(max_abs_diff(&reconstruct(&warm), &a) <= 1e-9 * a.max_abs());
    }

    #[test]
    fn asymmetric_is_rejected() {
        let a: Tensor<f64> = Tensor::from_f64_rows(&[&[1.0, 2.0], &[0.0, 1.0]]).unwrap();
        assert!(matches!(sym_eig(&a), Err(Error::Contract(_))));
    }
}
