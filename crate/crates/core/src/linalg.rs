//! Thin LAPACK wrappers for the symmetric eigenproblems used across the crate.
//!
//! The divide-and-conquer driver covers full decompositions; the subset
//! driver extracts just the lowest eigenpair of large dense matrices.

use ndarray::{Array1, Array2};
use std::ffi::{c_char, c_int};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum LinalgError {
    #[error("matrix is not square: {0}x{1}")]
    NotSquare(usize, usize),
    #[error("lapack {routine} failed with info={info}")]
    Lapack { routine: &'static str, info: i32 },
    #[error("matrix dimension {0} exceeds i32 range")]
    TooLarge(usize),
}

fn check_square(m: &Array2<f64>) -> Result<i32, LinalgError> {
    let (r, c) = m.dim();
    if r != c {
        return Err(LinalgError::NotSquare(r, c));
    }
    i32::try_from(r).map_err(|_| LinalgError::TooLarge(r))
}

/// Full symmetric eigendecomposition (divide and conquer). Eigenvalues come
/// back ascending with eigenvectors in the corresponding columns.
pub fn eigh(m: &Array2<f64>) -> Result<(Array1<f64>, Array2<f64>), LinalgError> {
    let n = check_square(m)?;
    let nu = n as usize;
    if nu == 0 {
        return Ok((Array1::zeros(0), Array2::zeros((0, 0))));
    }
    // column-major buffer; the input is symmetric so no transpose is needed
    let mut a: Vec<f64> = Vec::with_capacity(nu * nu);
    for j in 0..nu {
        for i in 0..nu {
            a.push(m[[i, j]]);
        }
    }
    let mut w = vec![0.0f64; nu];
    let jobz = b'V' as c_char;
    let uplo = b'L' as c_char;
    let mut info: c_int = 0;

    let mut work_query = [0.0f64];
    let mut iwork_query = [0 as c_int];
    let neg_one: c_int = -1;
    unsafe {
        lapack_sys::dsyevd_(
            &jobz,
            &uplo,
            &n,
            a.as_mut_ptr(),
            &n,
            w.as_mut_ptr(),
            work_query.as_mut_ptr(),
            &neg_one,
            iwork_query.as_mut_ptr(),
            &neg_one,
            &mut info,
        );
    }
    if info != 0 {
        return Err(LinalgError::Lapack {
            routine: "dsyevd (workspace query)",
            info,
        });
    }
    let lwork = work_query[0] as c_int;
    let liwork = iwork_query[0];
    let mut work = vec![0.0f64; lwork as usize];
    let mut iwork = vec![0 as c_int; liwork as usize];
    unsafe {
        lapack_sys::dsyevd_(
            &jobz,
            &uplo,
            &n,
            a.as_mut_ptr(),
            &n,
            w.as_mut_ptr(),
            work.as_mut_ptr(),
            &lwork,
            iwork.as_mut_ptr(),
            &liwork,
            &mut info,
        );
    }
    if info != 0 {
        return Err(LinalgError::Lapack {
            routine: "dsyevd",
            info,
        });
    }
    // column j of the column-major buffer is contiguous
    let mut vecs = Array2::zeros((nu, nu));
    for j in 0..nu {
        for i in 0..nu {
            vecs[[i, j]] = a[j * nu + i];
        }
    }
    Ok((Array1::from_vec(w), vecs))
}

/// Lowest eigenpair of a dense symmetric matrix via the subset driver,
/// which skips the back-transformation of all but one eigenvector.
pub fn eigh_lowest(m: &Array2<f64>) -> Result<(f64, Vec<f64>), LinalgError> {
    let n = check_square(m)?;
    let nu = n as usize;
    let mut a: Vec<f64> = Vec::with_capacity(nu * nu);
    for j in 0..nu {
        for i in 0..nu {
            a.push(m[[i, j]]);
        }
    }
    let jobz = b'V' as c_char;
    let range = b'I' as c_char;
    let uplo = b'L' as c_char;
    let zero_f = 0.0f64;
    let il: c_int = 1;
    let iu: c_int = 1;
    let abstol = -1.0f64; // default tolerance
    let mut m_found: c_int = 0;
    let mut w = vec![0.0f64; nu];
    let mut z = vec![0.0f64; nu];
    let ldz = n;
    let mut isuppz = vec![0 as c_int; 2];
    let mut info: c_int = 0;

    let mut work_query = [0.0f64];
    let mut iwork_query = [0 as c_int];
    let neg_one: c_int = -1;
    unsafe {
        lapack_sys::dsyevr_(
            &jobz,
            &range,
            &uplo,
            &n,
            a.as_mut_ptr(),
            &n,
            &zero_f,
            &zero_f,
            &il,
            &iu,
            &abstol,
            &mut m_found,
            w.as_mut_ptr(),
            z.as_mut_ptr(),
            &ldz,
            isuppz.as_mut_ptr(),
            work_query.as_mut_ptr(),
            &neg_one,
            iwork_query.as_mut_ptr(),
            &neg_one,
            &mut info,
        );
    }
    if info != 0 {
        return Err(LinalgError::Lapack {
            routine: "dsyevr (workspace query)",
            info,
        });
    }
    let lwork = work_query[0] as c_int;
    let liwork = iwork_query[0];
    let mut work = vec![0.0f64; lwork as usize];
    let mut iwork = vec![0 as c_int; liwork as usize];
    unsafe {
        lapack_sys::dsyevr_(
            &jobz,
            &range,
            &uplo,
            &n,
            a.as_mut_ptr(),
            &n,
            &zero_f,
            &zero_f,
            &il,
            &iu,
            &abstol,
            &mut m_found,
            w.as_mut_ptr(),
            z.as_mut_ptr(),
            &ldz,
            isuppz.as_mut_ptr(),
            work.as_mut_ptr(),
            &lwork,
            iwork.as_mut_ptr(),
            &liwork,
            &mut info,
        );
    }
    if info != 0 {
        return Err(LinalgError::Lapack {
            routine: "dsyevr",
            info,
        });
    }
    Ok((w[0], z))
}

/// Solve the general square system `A X = B` for one or more right-hand
/// sides, column-major packed.
pub fn solve_general(a: &Array2<f64>, b: &Array2<f64>) -> Result<Array2<f64>, LinalgError> {
    let n = check_square(a)?;
    let nu = n as usize;
    assert_eq!(b.nrows(), nu);
    let nrhs = b.ncols() as c_int;
    let mut abuf: Vec<f64> = Vec::with_capacity(nu * nu);
    for j in 0..nu {
        for i in 0..nu {
            abuf.push(a[[i, j]]);
        }
    }
    let mut xbuf: Vec<f64> = Vec::with_capacity(nu * b.ncols());
    for j in 0..b.ncols() {
        for i in 0..nu {
            xbuf.push(b[[i, j]]);
        }
    }
    let mut ipiv = vec![0 as c_int; nu];
    let mut info: c_int = 0;
    unsafe {
        lapack_sys::dgesv_(
            &n,
            &nrhs,
            abuf.as_mut_ptr(),
            &n,
            ipiv.as_mut_ptr(),
            xbuf.as_mut_ptr(),
            &n,
            &mut info,
        );
    }
    if info != 0 {
        return Err(LinalgError::Lapack {
            routine: "dgesv",
            info,
        });
    }
    let mut x = Array2::zeros((nu, b.ncols()));
    for j in 0..b.ncols() {
        for i in 0..nu {
            x[[i, j]] = xbuf[j * nu + i];
        }
    }
    Ok(x)
}

/// Determinant through the LU factorization.
pub fn det(a: &Array2<f64>) -> Result<f64, LinalgError> {
    let n = check_square(a)?;
    let nu = n as usize;
    let mut buf: Vec<f64> = Vec::with_capacity(nu * nu);
    for j in 0..nu {
        for i in 0..nu {
            buf.push(a[[i, j]]);
        }
    }
    let mut ipiv = vec![0 as c_int; nu];
    let mut info: c_int = 0;
    unsafe {
        lapack_sys::dgetrf_(&n, &n, buf.as_mut_ptr(), &n, ipiv.as_mut_ptr(), &mut info);
    }
    if info < 0 {
        return Err(LinalgError::Lapack {
            routine: "dgetrf",
            info,
        });
    }
    if info > 0 {
        return Ok(0.0);
    }
    let mut d = 1.0;
    for i in 0..nu {
        d *= buf[i * nu + i];
        if ipiv[i] as usize != i + 1 {
            d = -d;
        }
    }
    Ok(d)
}

/// Solve the symmetric positive-definite system `A x = b` by Cholesky.
pub fn solve_spd(a: &Array2<f64>, b: &[f64]) -> Result<Vec<f64>, LinalgError> {
    let n = check_square(a)?;
    let nu = n as usize;
    assert_eq!(b.len(), nu);
    let mut buf: Vec<f64> = Vec::with_capacity(nu * nu);
    for j in 0..nu {
        for i in 0..nu {
            buf.push(a[[i, j]]);
        }
    }
    let mut x = b.to_vec();
    let uplo = b'L' as c_char;
    let one: c_int = 1;
    let mut info: c_int = 0;
    unsafe {
        lapack_sys::dposv_(
            &uplo,
            &n,
            &one,
            buf.as_mut_ptr(),
            &n,
            x.as_mut_ptr(),
            &n,
            &mut info,
        );
    }
    if info != 0 {
        return Err(LinalgError::Lapack {
            routine: "dposv",
            info,
        });
    }
    Ok(x)
}
