//! Eigenvalues of small dense real matrices.
//!
//! Balancing, reduction to upper Hessenberg form by stabilized elimination,
//! then Francis double-shift QR sweeps on the Hessenberg matrix. Converged
//! 2x2 blocks are split with the closed-form quadratic, so complex pairs
//! come out exactly conjugate.

use super::{ComplexScalar, DenseMatrix, NumericsError};

const MAX_SWEEPS_PER_EIGENVALUE: usize = 60;

#[derive(Debug, Clone)]
pub struct EigenDecomposition {
    pub values: Vec<ComplexScalar>,
    /// Unit-norm eigenvectors aligned with `values`, when requested.
    pub vectors: Option<Vec<Vec<ComplexScalar>>>,
}

impl EigenDecomposition {
    pub fn spectral_radius(&self) -> f64 {
        self.values.iter().fold(0.0, |m, z| m.max(z.norm()))
    }
}

/// All eigenvalues of a square matrix.
///
/// `tol` is the relative deflation threshold for negligible subdiagonal
/// entries; values below machine epsilon fall back to exact deflation.
pub fn eigenvalues(m: &DenseMatrix, tol: f64) -> Result<EigenDecomposition, NumericsError> {
    check_square(m)?;
    let values = hessenberg_qr(m, tol)?;
    Ok(EigenDecomposition {
        values,
        vectors: None,
    })
}

/// Eigenvalues plus eigenvectors obtained by complex inverse iteration.
pub fn eigenvalues_with_vectors(
    m: &DenseMatrix,
    tol: f64,
) -> Result<EigenDecomposition, NumericsError> {
    let mut dec = eigenvalues(m, tol)?;
    let scale = m.max_abs().max(1.0);
    let vectors = dec
        .values
        .iter()
        .enumerate()
        .map(|(k, &lambda)| inverse_iteration(m, lambda, scale, k))
        .collect();
    dec.vectors = Some(vectors);
    Ok(dec)
}

fn check_square(m: &DenseMatrix) -> Result<(), NumericsError> {
    if !m.is_square() {
        return Err(NumericsError::NotSquare {
            rows: m.rows(),
            cols: m.cols(),
        });
    }
    if m.rows() == 0 {
        return Err(NumericsError::Empty);
    }
    if !m.is_finite() {
        return Err(NumericsError::NonFinite);
    }
    Ok(())
}

/// One-based square work array; keeps the QR sweep indices readable.
struct Work {
    n: usize,
    a: Vec<f64>,
}

impl Work {
    fn from(m: &DenseMatrix) -> Self {
        let n = m.rows();
        let mut a = vec![0.0; (n + 1) * (n + 1)];
        for i in 0..n {
            for j in 0..n {
                a[(i + 1) * (n + 1) + j + 1] = m.get(i, j);
            }
        }
        Self { n, a }
    }

    #[inline]
    fn at(&self, i: isize, j: isize) -> f64 {
        self.a[i as usize * (self.n + 1) + j as usize]
    }

    #[inline]
    fn at_mut(&mut self, i: isize, j: isize) -> &mut f64 {
        &mut self.a[i as usize * (self.n + 1) + j as usize]
    }
}

fn balance(w: &mut Work) {
    const RADIX: f64 = 2.0;
    let n = w.n as isize;
    let sqrdx = RADIX * RADIX;
    let mut done = false;
    while !done {
        done = true;
        for i in 1..=n {
            let mut r = 0.0;
            let mut c = 0.0;
            for j in 1..=n {
                if j != i {
                    c += w.at(j, i).abs();
                    r += w.at(i, j).abs();
                }
            }
            if c != 0.0 && r != 0.0 {
                let mut g = r / RADIX;
                let mut f = 1.0;
                let s = c + r;
                while c < g {
                    f *= RADIX;
                    c *= sqrdx;
                }
                g = r * RADIX;
                while c > g {
                    f /= RADIX;
                    c /= sqrdx;
                }
                if (c + r) / f < 0.95 * s {
                    done = false;
                    let g = 1.0 / f;
                    for j in 1..=n {
                        *w.at_mut(i, j) *= g;
                    }
                    for j in 1..=n {
                        *w.at_mut(j, i) *= f;
                    }
                }
            }
        }
    }
}

fn reduce_to_hessenberg(w: &mut Work) {
    let n = w.n as isize;
    for m in 2..n {
        let mut x: f64 = 0.0;
        let mut i = m;
        for j in m..=n {
            if w.at(j, m - 1).abs() > x.abs() {
                x = w.at(j, m - 1);
                i = j;
            }
        }
        if i != m {
            for j in (m - 1)..=n {
                let t = w.at(i, j);
                *w.at_mut(i, j) = w.at(m, j);
                *w.at_mut(m, j) = t;
            }
            for j in 1..=n {
                let t = w.at(j, i);
                *w.at_mut(j, i) = w.at(j, m);
                *w.at_mut(j, m) = t;
            }
        }
        if x != 0.0 {
            for i in (m + 1)..=n {
                let mut y = w.at(i, m - 1);
                if y != 0.0 {
                    y /= x;
                    *w.at_mut(i, m - 1) = y;
                    for j in m..=n {
                        *w.at_mut(i, j) -= y * w.at(m, j);
                    }
                    for j in 1..=n {
                        *w.at_mut(j, m) += y * w.at(j, i);
                    }
                }
            }
        }
    }
    // drop the elimination multipliers below the subdiagonal
    for i in 1..=n {
        for j in 1..(i - 1).max(1) {
            *w.at_mut(i, j) = 0.0;
        }
    }
}

fn sign(a: f64, b: f64) -> f64 {
    if b >= 0.0 {
        a.abs()
    } else {
        -a.abs()
    }
}

fn hessenberg_qr(m: &DenseMatrix, tol: f64) -> Result<Vec<ComplexScalar>, NumericsError> {
    let n = m.rows();
    if n == 1 {
        return Ok(vec![ComplexScalar::new(m.get(0, 0), 0.0)]);
    }
    let mut w = Work::from(m);
    balance(&mut w);
    reduce_to_hessenberg(&mut w);

    let rel = tol.max(f64::EPSILON);
    let ni = n as isize;
    let mut wr = vec![0.0; n + 1];
    let mut wi = vec![0.0; n + 1];
    let mut anorm = 0.0;
    for i in 1..=ni {
        for j in (i - 1).max(1)..=ni {
            anorm += w.at(i, j).abs();
        }
    }
    let mut nn = ni;
    let mut t = 0.0;
    let mut total_sweeps = 0usize;
    while nn >= 1 {
        let mut its = 0usize;
        loop {
            let mut l = nn;
            while l >= 2 {
                let mut s = w.at(l - 1, l - 1).abs() + w.at(l, l).abs();
                if s == 0.0 {
                    s = anorm;
                }
                if w.at(l, l - 1).abs() <= rel * s {
                    *w.at_mut(l, l - 1) = 0.0;
                    break;
                }
                l -= 1;
            }
            let mut x = w.at(nn, nn);
            if l == nn {
                wr[nn as usize] = x + t;
                wi[nn as usize] = 0.0;
                nn -= 1;
            } else {
                let mut y = w.at(nn - 1, nn - 1);
                let mut ww = w.at(nn, nn - 1) * w.at(nn - 1, nn);
                if l == nn - 1 {
                    let p = 0.5 * (y - x);
                    let q = p * p + ww;
                    let mut z = q.abs().sqrt();
                    x += t;
                    let (a, b) = ((nn - 1) as usize, nn as usize);
                    if q >= 0.0 {
                        z = p + sign(z, p);
                        wr[a] = x + z;
                        wr[b] = x + z;
                        if z != 0.0 {
                            wr[b] = x - ww / z;
                        }
                        wi[a] = 0.0;
                        wi[b] = 0.0;
                    } else {
                        wr[a] = x + p;
                        wr[b] = x + p;
                        wi[a] = -z;
                        wi[b] = z;
                    }
                    nn -= 2;
                } else {
                    if its == MAX_SWEEPS_PER_EIGENVALUE {
                        return Err(NumericsError::NoConvergence {
                            iterations: total_sweeps,
                        });
                    }
                    if its > 0 && its % 10 == 0 {
                        // exceptional shift
                        t += x;
                        for i in 1..=nn {
                            *w.at_mut(i, i) -= x;
                        }
                        let s = w.at(nn, nn - 1).abs() + w.at(nn - 1, nn - 2).abs();
                        x = 0.75 * s;
                        y = x;
                        ww = -0.4375 * s * s;
                    }
                    its += 1;
                    total_sweeps += 1;
                    francis_sweep(&mut w, l, nn, x, y, ww);
                }
            }
            if !(l < nn - 1) {
                break;
            }
        }
    }
    Ok((1..=n)
        .map(|i| ComplexScalar::new(wr[i], wi[i]))
        .collect())
}

fn francis_sweep(w: &mut Work, l: isize, nn: isize, x0: f64, y0: f64, w0: f64) {
    let (mut p, mut q, mut r) = (0.0, 0.0, 0.0);
    let mut m = nn - 2;
    while m >= l {
        let z = w.at(m, m);
        let rr = x0 - z;
        let s = y0 - z;
        p = (rr * s - w0) / w.at(m + 1, m) + w.at(m, m + 1);
        q = w.at(m + 1, m + 1) - z - rr - s;
        r = w.at(m + 2, m + 1);
        let s = p.abs() + q.abs() + r.abs();
        p /= s;
        q /= s;
        r /= s;
        if m == l {
            break;
        }
        let u = w.at(m, m - 1).abs() * (q.abs() + r.abs());
        let v = p.abs() * (w.at(m - 1, m - 1).abs() + z.abs() + w.at(m + 1, m + 1).abs());
        if u + v == v {
            break;
        }
        m -= 1;
    }
    for i in (m + 2)..=nn {
        *w.at_mut(i, i - 2) = 0.0;
        if i != m + 2 {
            *w.at_mut(i, i - 3) = 0.0;
        }
    }
    let mut x = 0.0;
    for k in m..nn {
        if k != m {
            p = w.at(k, k - 1);
            q = w.at(k + 1, k - 1);
            r = 0.0;
            if k != nn - 1 {
                r = w.at(k + 2, k - 1);
            }
            x = p.abs() + q.abs() + r.abs();
            if x != 0.0 {
                p /= x;
                q /= x;
                r /= x;
            }
        }
        let s = sign((p * p + q * q + r * r).sqrt(), p);
        if s != 0.0 {
            if k == m {
                if l != m {
                    *w.at_mut(k, k - 1) = -w.at(k, k - 1);
                }
            } else {
                *w.at_mut(k, k - 1) = -s * x;
            }
            p += s;
            let xx = p / s;
            let yy = q / s;
            let zz = r / s;
            q /= p;
            r /= p;
            for j in k..=nn {
                let mut pp = w.at(k, j) + q * w.at(k + 1, j);
                if k != nn - 1 {
                    pp += r * w.at(k + 2, j);
                    *w.at_mut(k + 2, j) -= pp * zz;
                }
                *w.at_mut(k + 1, j) -= pp * yy;
                *w.at_mut(k, j) -= pp * xx;
            }
            let mmin = if nn < k + 3 { nn } else { k + 3 };
            for i in l..=mmin {
                let mut pp = xx * w.at(i, k) + yy * w.at(i, k + 1);
                if k != nn - 1 {
                    pp += zz * w.at(i, k + 2);
                    *w.at_mut(i, k + 2) -= pp * r;
                }
                *w.at_mut(i, k + 1) -= pp * q;
                *w.at_mut(i, k) -= pp;
            }
        }
    }
}

/// Inverse iteration on `(M - μI)` with `μ` a slightly perturbed eigenvalue.
fn inverse_iteration(
    m: &DenseMatrix,
    lambda: ComplexScalar,
    scale: f64,
    salt: usize,
) -> Vec<ComplexScalar> {
    let n = m.rows();
    let shift = lambda + ComplexScalar::new(1e-10 * scale, 0.0);
    let a: Vec<ComplexScalar> = (0..n * n)
        .map(|idx| {
            let (i, j) = (idx / n, idx % n);
            let v = ComplexScalar::new(m.get(i, j), 0.0);
            if i == j {
                v - shift
            } else {
                v
            }
        })
        .collect();
    let lu = ComplexLu::factor(a, n, 1e-14 * scale);
    // deterministic, generically non-orthogonal start vector
    let mut v: Vec<ComplexScalar> = (0..n)
        .map(|i| ComplexScalar::new(1.0 + 0.1 * ((i * 7 + salt * 3) % 11) as f64, 0.0))
        .collect();
    normalize(&mut v);
    for _ in 0..4 {
        v = lu.solve(&v);
        normalize(&mut v);
    }
    v
}

fn normalize(v: &mut [ComplexScalar]) {
    let nrm = v.iter().map(|z| z.norm_sqr()).sum::<f64>().sqrt();
    if nrm > 0.0 {
        for z in v.iter_mut() {
            *z /= nrm;
        }
    }
}

struct ComplexLu {
    n: usize,
    lu: Vec<ComplexScalar>,
    perm: Vec<usize>,
}

impl ComplexLu {
    /// Near-zero pivots are replaced by `floor` so inverse iteration on an
    /// exact eigenvalue still produces a direction.
    fn factor(mut lu: Vec<ComplexScalar>, n: usize, floor: f64) -> Self {
        let mut perm: Vec<usize> = (0..n).collect();
        for k in 0..n {
            let mut p = k;
            for i in k + 1..n {
                if lu[i * n + k].norm() > lu[p * n + k].norm() {
                    p = i;
                }
            }
            if p != k {
                for j in 0..n {
                    lu.swap(k * n + j, p * n + j);
                }
                perm.swap(k, p);
            }
            if lu[k * n + k].norm() < floor {
                lu[k * n + k] = ComplexScalar::new(floor.max(f64::MIN_POSITIVE), 0.0);
            }
            let inv = lu[k * n + k].inv();
            for i in k + 1..n {
                let f = lu[i * n + k] * inv;
                lu[i * n + k] = f;
                for j in k + 1..n {
                    let sub = f * lu[k * n + j];
                    lu[i * n + j] -= sub;
                }
            }
        }
        Self { n, lu, perm }
    }

    fn solve(&self, b: &[ComplexScalar]) -> Vec<ComplexScalar> {
        let n = self.n;
        let mut x: Vec<ComplexScalar> = self.perm.iter().map(|&p| b[p]).collect();
        for i in 0..n {
            for j in 0..i {
                let sub = self.lu[i * n + j] * x[j];
                x[i] -= sub;
            }
        }
        for i in (0..n).rev() {
            for j in i + 1..n {
                let sub = self.lu[i * n + j] * x[j];
                x[i] -= sub;
            }
            x[i] /= self.lu[i * n + i];
        }
        x
    }
}
