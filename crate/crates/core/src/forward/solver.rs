//! Conjugate gradients for the seven-point pressure system.
//!
//! The matrix is `diag(accumulation) + Laplacian(T)` on a structured grid,
//! stored as one transmissibility per cell and axis for the link to the next
//! cell along that axis. Two preconditioners are available: a complete
//! Cholesky factor in a bandwidth-minimizing ordering, and zero-fill
//! (modified) incomplete Cholesky in natural ordering, which for this stencil
//! reduces to a modified diagonal.

use crate::numeric::dot;
use crate::{Error, Result};

pub(crate) struct PressureMatrix {
    pub nx: usize,
    pub nxy: usize,
    pub n: usize,
    /// Link to `c + 1`; zero on the last column.
    pub tx: Vec<f64>,
    /// Link to `c + nx`; zero on the last row.
    pub ty: Vec<f64>,
    /// Link to `c + nx*ny`; zero on the bottom layer.
    pub tz: Vec<f64>,
    /// Sum of transmissibilities touching each cell.
    pub tsum: Vec<f64>,
}

impl PressureMatrix {
    pub fn new(nx: usize, ny: usize, nz: usize, tx: Vec<f64>, ty: Vec<f64>, tz: Vec<f64>) -> Self {
        let n = nx * ny * nz;
        let nxy = nx * ny;
        let mut tsum = vec![0.0; n];
        for c in 0..n {
            if tx[c] != 0.0 {
                tsum[c] += tx[c];
                tsum[c + 1] += tx[c];
            }
            if ty[c] != 0.0 {
                tsum[c] += ty[c];
                tsum[c + nx] += ty[c];
            }
            if tz[c] != 0.0 {
                tsum[c] += tz[c];
                tsum[c + nxy] += tz[c];
            }
        }
        PressureMatrix {
            nx,
            nxy,
            n,
            tx,
            ty,
            tz,
            tsum,
        }
    }

    /// `y = Laplacian(x) + acc * x`.
    pub fn apply(&self, acc: &[f64], x: &[f64], y: &mut [f64]) {
        let n = self.n;
        for c in 0..n {
            y[c] = (acc[c] + self.tsum[c]) * x[c];
        }
        // Links past the grid edge carry zero transmissibility.
        for (off, t) in [(1, &self.tx), (self.nx, &self.ty), (self.nxy, &self.tz)] {
            if off >= n {
                continue;
            }
            for c in 0..n - off {
                let tc = t[c];
                y[c] -= tc * x[c + off];
                y[c + off] -= tc * x[c];
            }
        }
    }

    /// `y = Laplacian(x)` in flux form, exactly zero for uniform `x`.
    pub fn laplacian(&self, x: &[f64], y: &mut [f64]) {
        let n = self.n;
        y.iter_mut().for_each(|v| *v = 0.0);
        for (off, t) in [(1, &self.tx), (self.nx, &self.ty), (self.nxy, &self.tz)] {
            if off >= n {
                continue;
            }
            for c in 0..n - off {
                let f = t[c] * (x[c] - x[c + off]);
                y[c] += f;
                y[c + off] -= f;
            }
        }
    }

    /// Pivots of the zero-fill incomplete Cholesky factorization, with a
    /// fraction `omega` of the dropped fill moved onto the diagonal
    /// (`omega = 0` is plain IC(0), `omega = 1` the modified variant).
    pub fn ic0_pivots(&self, acc: &[f64], omega: f64) -> Vec<f64> {
        let (nx, nxy, n) = (self.nx, self.nxy, self.n);
        let upper = |j: usize| self.tx[j] + self.ty[j] + self.tz[j];
        let mut d = vec![0.0; n];
        for c in 0..n {
            let mut v = acc[c] + self.tsum[c];
            for (j, t) in [
                (c.wrapping_sub(1), if c >= 1 { self.tx[c - 1] } else { 0.0 }),
                (c.wrapping_sub(nx), if c >= nx { self.ty[c - nx] } else { 0.0 }),
                (c.wrapping_sub(nxy), if c >= nxy { self.tz[c - nxy] } else { 0.0 }),
            ] {
                if t != 0.0 {
                    v -= t * ((1.0 - omega) * t + omega * upper(j)) / d[j];
                }
            }
            d[c] = v;
        }
        d
    }

    fn precondition(&self, d: &[f64], r: &[f64], out: &mut [f64]) {
        let (nx, nxy, n) = (self.nx, self.nxy, self.n);
        let (tx, ty, tz) = (&self.tx, &self.ty, &self.tz);
        for c in 0..n {
            let mut v = r[c];
            if c >= nxy {
                v += tx[c - 1] * out[c - 1] + ty[c - nx] * out[c - nx] + tz[c - nxy] * out[c - nxy];
            } else if c >= nx {
                v += tx[c - 1] * out[c - 1] + ty[c - nx] * out[c - nx];
            } else if c >= 1 {
                v += tx[c - 1] * out[c - 1];
            }
            out[c] = v / d[c];
        }
        for c in (0..n).rev() {
            let v = if c + nxy < n {
                tx[c] * out[c + 1] + ty[c] * out[c + nx] + tz[c] * out[c + nxy]
            } else if c + nx < n {
                tx[c] * out[c + 1] + ty[c] * out[c + nx]
            } else if c + 1 < n {
                tx[c] * out[c + 1]
            } else {
                0.0
            };
            out[c] += v / d[c];
        }
    }
}

/// Complete Cholesky factor of the pressure matrix in band storage.
///
/// Cells are renumbered so the smallest grid axis varies fastest and the
/// largest slowest, which gives half-bandwidth `n_small * n_mid`.
pub(crate) struct BandCholesky {
    n: usize,
    bw: usize,
    /// Natural index to band index.
    perm: Vec<usize>,
    /// Column `j` holds rows `j ..= j + bw`; `bw + 1` entries per column.
    cols: Vec<f64>,
    work: Vec<f64>,
}

impl BandCholesky {
    pub fn new(m: &PressureMatrix, ny: usize, nz: usize, acc: &[f64]) -> Result<Self> {
        let (nx, n) = (m.nx, m.n);
        let dims = [nx, ny, nz];
        let mut axes = [0usize, 1, 2];
        axes.sort_by_key(|&a| dims[a]);
        let mut stride = [0usize; 3];
        stride[axes[0]] = 1;
        stride[axes[1]] = dims[axes[0]];
        stride[axes[2]] = dims[axes[0]] * dims[axes[1]];
        let bw = stride[axes[2]].min(n - 1);
        let mut perm = vec![0; n];
        for (c, slot) in perm.iter_mut().enumerate() {
            let (i, j, k) = (c % nx, (c / nx) % ny, c / m.nxy);
            *slot = i * stride[0] + j * stride[1] + k * stride[2];
        }

        let w = bw + 1;
        let mut cols = vec![0.0; n * w];
        for c in 0..n {
            let pc = perm[c];
            cols[pc * w] = acc[c] + m.tsum[c];
            for (off, t) in [(1, &m.tx), (nx, &m.ty), (m.nxy, &m.tz)] {
                if t[c] != 0.0 {
                    let pd = perm[c + off];
                    let (lo, hi) = if pd > pc { (pc, pd) } else { (pd, pc) };
                    cols[lo * w + hi - lo] = -t[c];
                }
            }
        }

        // Right-looking: scale column j, then update the columns it touches.
        for j in 0..n {
            let d = cols[j * w];
            if !(d > 0.0) {
                return Err(Error::FactorizationFailure);
            }
            let d = d.sqrt();
            let last = bw.min(n - 1 - j);
            let (head, tail) = cols.split_at_mut((j + 1) * w);
            let cj = &mut head[j * w..j * w + last + 1];
            cj[0] = d;
            let inv = 1.0 / d;
            cj[1..].iter_mut().for_each(|v| *v *= inv);
            for r in 1..=last {
                let l = cj[r];
                if l == 0.0 {
                    continue;
                }
                let ck = &mut tail[(r - 1) * w..(r - 1) * w + last - r + 1];
                for (a, b) in ck.iter_mut().zip(&cj[r..=last]) {
                    *a -= l * b;
                }
            }
        }
        Ok(BandCholesky {
            n,
            bw,
            perm,
            cols,
            work: vec![0.0; n],
        })
    }

    fn solve(&mut self, r: &[f64], out: &mut [f64]) {
        let (n, bw, w) = (self.n, self.bw, self.bw + 1);
        let y = &mut self.work;
        for c in 0..n {
            y[self.perm[c]] = r[c];
        }
        for j in 0..n {
            let last = bw.min(n - 1 - j);
            let col = &self.cols[j * w..j * w + last + 1];
            let yj = y[j] / col[0];
            y[j] = yj;
            for (yk, l) in y[j + 1..=j + last].iter_mut().zip(&col[1..]) {
                *yk -= l * yj;
            }
        }
        for i in (0..n).rev() {
            let last = bw.min(n - 1 - i);
            let col = &self.cols[i * w..i * w + last + 1];
            y[i] = (y[i] - dot(&col[1..], &y[i + 1..=i + last])) / col[0];
        }
        for c in 0..n {
            out[c] = y[self.perm[c]];
        }
    }
}

pub(crate) enum Preconditioner {
    Band(BandCholesky),
    /// Pivots from [`PressureMatrix::ic0_pivots`].
    Incomplete(Vec<f64>),
}

impl Preconditioner {
    fn apply(&mut self, m: &PressureMatrix, r: &[f64], out: &mut [f64]) {
        match self {
            Preconditioner::Band(f) => f.solve(r, out),
            Preconditioner::Incomplete(d) => m.precondition(d, r, out),
        }
    }
}

pub(crate) struct CgStats {
    pub iterations: usize,
    pub relative_residual: f64,
}


/// Solves `(L + diag(acc)) x = b` starting from the contents of `x`.
pub(crate) fn pcg(
    m: &PressureMatrix,
    acc: &[f64],
    pre: &mut Preconditioner,
    b: &[f64],
    x: &mut [f64],
    tol: f64,
    max_iter: usize,
) -> Result<CgStats> {
    let n = m.n;
    let bnorm = dot(b, b).sqrt();
    if bnorm == 0.0 {
        x.iter_mut().for_each(|v| *v = 0.0);
        return Ok(CgStats {
            iterations: 0,
            relative_residual: 0.0,
        });
    }
    let mut r = vec![0.0; n];
    m.apply(acc, x, &mut r);
    for (ri, bi) in r.iter_mut().zip(b) {
        *ri = bi - *ri;
    }
    let mut rnorm = dot(&r, &r).sqrt();
    if rnorm <= tol * bnorm {
        return Ok(CgStats {
            iterations: 0,
            relative_residual: rnorm / bnorm,
        });
    }
    let mut z = vec![0.0; n];
    pre.apply(m, &r, &mut z);
    let mut p = z.clone();
    let mut rz = dot(&r, &z);
    let mut ap = vec![0.0; n];
    for it in 1..=max_iter {
        m.apply(acc, &p, &mut ap);
        let pap = dot(&p, &ap);
        if !(pap > 0.0) {
            break;
        }
        let alpha = rz / pap;
        for i in 0..n {
            x[i] += alpha * p[i];
            r[i] -= alpha * ap[i];
        }
        rnorm = dot(&r, &r).sqrt();
        if rnorm <= tol * bnorm {
            return Ok(CgStats {
                iterations: it,
                relative_residual: rnorm / bnorm,
            });
        }
        pre.apply(m, &r, &mut z);
        let rz_new = dot(&r, &z);
        let beta = rz_new / rz;
        rz = rz_new;
        for i in 0..n {
            p[i] = z[i] + beta * p[i];
        }
    }
    Err(Error::SolverDiverged {
        iterations: max_iter,
        residual: rnorm / bnorm,
    })
}
