//! Small dense helpers over symmetric matrices stored as `DMatrix<f64>`.

use nalgebra::DMatrix;

/// `a^T M[off.., off..] b` for the square sub-block starting at `off`.
///
/// `M` is assumed symmetric, so columns are read instead of rows.
pub fn block_bilinear(m: &DMatrix<f64>, off: usize, a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    let mut acc = 0.0;
    for (jb, &bj) in b.iter().enumerate() {
        let col = m.column(off + jb);
        let mut inner = 0.0;
        for (ia, &ai) in a.iter().enumerate() {
            inner += ai * col[off + ia];
        }
        acc += inner * bj;
    }
    acc
}

/// `v^T M v`.
pub fn quad_form(m: &DMatrix<f64>, v: &[f64]) -> f64 {
    block_bilinear(m, 0, v, v)
}

/// `a^T M[off..off+len(a), :] e` for symmetric `M`.
pub fn row_block_bilinear(m: &DMatrix<f64>, off: usize, a: &[f64], e: &[f64]) -> f64 {
    let mut acc = 0.0;
    for (ia, &ai) in a.iter().enumerate() {
        acc += ai * dot(m.column(off + ia).as_slice(), e);
    }
    acc
}

/// `w^T M[:, off..off+len(v)] v` for a general (not necessarily symmetric) `M`.
pub fn col_block_bilinear(m: &DMatrix<f64>, off: usize, w: &[f64], v: &[f64]) -> f64 {
    let mut acc = 0.0;
    for (jv, &vj) in v.iter().enumerate() {
        acc += dot(m.column(off + jv).as_slice(), w) * vj;
    }
    acc
}

/// `a^T M b` for a general square `M`.
pub fn bilinear(m: &DMatrix<f64>, a: &[f64], b: &[f64]) -> f64 {
    col_block_bilinear(m, 0, a, b)
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Copies row `r` of `m` into a contiguous vector.
pub fn row_vec(m: &DMatrix<f64>, r: usize) -> Vec<f64> {
    m.row(r).iter().copied().collect()
}

/// Replaces `m` by `(m + m^T) / 2`.
pub fn symmetrize(m: &mut DMatrix<f64>) {
    let n = m.nrows();
    for a in 0..n {
        for b in (a + 1)..n {
            let avg = 0.5 * (m[(a, b)] + m[(b, a)]);
            m[(a, b)] = avg;
            m[(b, a)] = avg;
        }
    }
}
