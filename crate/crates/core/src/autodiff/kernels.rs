//! Dense numeric kernels shared by forward and backward passes.

use crate::exec::{for_chunks_mut, kernel_parallelism};

/// `C[m,n] = A[m,k] · B[k,n]`.
pub fn matmul(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut c = vec![0.0; m * n];
    if n == 0 {
        return c;
    }
    for_chunks_mut(&mut c, n, kernel_parallelism(m * k * n), |i, row| {
        let arow = &a[i * k..(i + 1) * k];
        for (p, &av) in arow.iter().enumerate() {
            if av == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for (cv, &bv) in row.iter_mut().zip(brow) {
                *cv += av * bv;
            }
        }
    });
    c
}

/// `Aᵀ[k,m] · G[m,n]` -> `[k,n]`.
pub fn matmul_tn(a: &[f64], g: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; k * n];
    if n == 0 {
        return out;
    }
    // Blocks of output rows; each walks the rows of A and G once.
    let rows = 16;
    for_chunks_mut(
        &mut out,
        rows * n,
        kernel_parallelism(m * k * n),
        |blk, oblk| {
            let p0 = blk * rows;
            let pn = oblk.len() / n;
            for i in 0..m {
                let grow = &g[i * n..(i + 1) * n];
                for (dp, &av) in a[i * k + p0..i * k + p0 + pn].iter().enumerate() {
                    if av == 0.0 {
                        continue;
                    }
                    for (o, &gv) in oblk[dp * n..(dp + 1) * n].iter_mut().zip(grow) {
                        *o += av * gv;
                    }
                }
            }
        },
    );
    out
}

/// `G[m,n] · Bᵀ[n,k]` -> `[m,k]`.
pub fn matmul_nt(g: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    if k == 0 {
        return Vec::new();
    }
    let mut bt = vec![0.0; n * k];
    for p in 0..k {
        for j in 0..n {
            bt[j * k + p] = b[p * n + j];
        }
    }
    matmul(g, &bt, m, n, k)
}

/// Geometry of an NHWC 2D convolution.
#[derive(Clone, Copy, Debug)]
pub struct Conv2dGeom {
    pub n: usize,
    pub h: usize,
    pub w: usize,
    pub cin: usize,
    pub kh: usize,
    pub kw: usize,
    pub cout: usize,
    pub stride: usize,
    pub pad: usize,
}

impl Conv2dGeom {
    pub fn out_h(&self) -> usize {
        (self.h + 2 * self.pad - self.kh) / self.stride + 1
    }

    pub fn out_w(&self) -> usize {
        (self.w + 2 * self.pad - self.kw) / self.stride + 1
    }

    fn patch(&self) -> usize {
        self.kh * self.kw * self.cin
    }

    /// im2col for image `img`: `[oh*ow, kh*kw*cin]`.
    pub fn im2col(&self, x: &[f64], img: usize) -> Vec<f64> {
        let (oh, ow, patch) = (self.out_h(), self.out_w(), self.patch());
        let mut col = vec![0.0; oh * ow * patch];
        let base = img * self.h * self.w * self.cin;
        for oy in 0..oh {
            for ox in 0..ow {
                let row = &mut col[(oy * ow + ox) * patch..(oy * ow + ox + 1) * patch];
                for ky in 0..self.kh {
                    let iy = (oy * self.stride + ky) as isize - self.pad as isize;
                    if iy < 0 || iy >= self.h as isize {
                        continue;
                    }
                    for kx in 0..self.kw {
                        let ix = (ox * self.stride + kx) as isize - self.pad as isize;
                        if ix < 0 || ix >= self.w as isize {
                            continue;
                        }
                        let src = base + (iy as usize * self.w + ix as usize) * self.cin;
                        let dst = (ky * self.kw + kx) * self.cin;
                        row[dst..dst + self.cin].copy_from_slice(&x[src..src + self.cin]);
                    }
                }
            }
        }
        col
    }

    /// Adds a column-gradient buffer back into `dx` for image `img`.
    pub fn col2im(&self, col: &[f64], img: usize, dx: &mut [f64]) {
        let (oh, ow, patch) = (self.out_h(), self.out_w(), self.patch());
        let base = img * self.h * self.w * self.cin;
        for oy in 0..oh {
            for ox in 0..ow {
                let row = &col[(oy * ow + ox) * patch..(oy * ow + ox + 1) * patch];
                for ky in 0..self.kh {
                    let iy = (oy * self.stride + ky) as isize - self.pad as isize;
                    if iy < 0 || iy >= self.h as isize {
                        continue;
                    }
                    for kx in 0..self.kw {
                        let ix = (ox * self.stride + kx) as isize - self.pad as isize;
                        if ix < 0 || ix >= self.w as isize {
                            continue;
                        }
                        let dst = base + (iy as usize * self.w + ix as usize) * self.cin;
                        let src = (ky * self.kw + kx) * self.cin;
                        for c in 0..self.cin {
                            dx[dst + c] += row[src + c];
                        }
                    }
                }
            }
        }
    }
}

pub fn conv2d_forward(g: &Conv2dGeom, x: &[f64], w: &[f64], b: &[f64]) -> Vec<f64> {
    let (oh, ow) = (g.out_h(), g.out_w());
    let per = oh * ow * g.cout;
    let mut out = Vec::with_capacity(g.n * per);
    for img in 0..g.n {
        let col = g.im2col(x, img);
        let mut y = matmul(&col, w, oh * ow, g.patch(), g.cout);
        for row in y.chunks_mut(g.cout) {
            for (v, bv) in row.iter_mut().zip(b) {
                *v += bv;
            }
        }
        out.extend_from_slice(&y);
    }
    out
}

/// Returns `(dx, dw, db)`.
pub fn conv2d_backward(
    g: &Conv2dGeom,
    x: &[f64],
    w: &[f64],
    dy: &[f64],
) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let (oh, ow) = (g.out_h(), g.out_w());
    let rows = oh * ow;
    let per = rows * g.cout;
    let mut dx = vec![0.0; x.len()];
    let mut dw = vec![0.0; w.len()];
    let mut db = vec![0.0; g.cout];
    for img in 0..g.n {
        let dyi = &dy[img * per..(img + 1) * per];
        let col = g.im2col(x, img);
        let dwi = matmul_tn(&col, dyi, rows, g.patch(), g.cout);
        for (a, b) in dw.iter_mut().zip(&dwi) {
            *a += b;
        }
        for row in dyi.chunks(g.cout) {
            for (a, b) in db.iter_mut().zip(row) {
                *a += b;
            }
        }
        let dcol = matmul_nt(dyi, w, rows, g.patch(), g.cout);
        g.col2im(&dcol, img, &mut dx);
    }
    (dx, dw, db)
}
