//! Dense kernels behind the tape.
//!
//! Every output element is accumulated in ascending index order by exactly one
//! worker, so sequential and parallel execution agree bit for bit and a row's
//! result does not depend on which other rows share the call.

/// Execution mode of a kernel call.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Exec {
    Sequential,
    /// Row blocks on the rayon pool; sequential without the `parallel` feature.
    Parallel,
}

impl Exec {
    pub fn default_mode() -> Self {
        if crate::parallel::is_parallel() {
            Exec::Parallel
        } else {
            Exec::Sequential
        }
    }
}

const TILE_R: usize = 4;
const TILE_C: usize = 16;
// Rows handed to one parallel task.
const TASK_ROWS: usize = 32;

/// Rows `row0 .. row0 + out.len() / n` of `a * b`, written into `out`.
///
/// Wider vector units are used when the CPU has them. Multiplies and adds
/// stay separate (no fused multiply-add), so every path rounds identically.
fn matmul_rows(a: &[f64], b: &[f64], k: usize, n: usize, row0: usize, out: &mut [f64]) {
    #[cfg(target_arch = "x86_64")]
    {
        if std::arch::is_x86_feature_detected!("avx512f") {
            // SAFETY: the feature was detected at runtime.
            return unsafe { matmul_rows_avx512(a, b, k, n, row0, out) };
        }
        if std::arch::is_x86_feature_detected!("avx2") {
            // SAFETY: as above.
            return unsafe { matmul_rows_avx2(a, b, k, n, row0, out) };
        }
    }
    matmul_rows_generic(a, b, k, n, row0, out)
}

#[cfg(target_arch = "x86_64")]
#[target_feature(enable = "avx512f")]
unsafe fn matmul_rows_avx512(a: &[f64], b: &[f64], k: usize, n: usize, row0: usize, out: &mut [f64]) {
    matmul_rows_generic(a, b, k, n, row0, out)
}

#[cfg(target_arch = "x86_64")]
#[target_feature(enable = "avx2")]
unsafe fn matmul_rows_avx2(a: &[f64], b: &[f64], k: usize, n: usize, row0: usize, out: &mut [f64]) {
    matmul_rows_generic(a, b, k, n, row0, out)
}

/// Each output element is a single accumulator summed over `p` in ascending
/// order; the tiling only decides which accumulators live in registers.
#[inline(always)]
fn matmul_rows_generic(a: &[f64], b: &[f64], k: usize, n: usize, row0: usize, out: &mut [f64]) {
    let rows = out.len() / n;
    let full_rows = rows - rows % TILE_R;
    let full_cols = n - n % TILE_C;
    let mut panel = vec![0.0; k * TILE_C];
    let mut j = 0;
    while j < full_cols {
        for p in 0..k {
            panel[p * TILE_C..(p + 1) * TILE_C].copy_from_slice(&b[p * n + j..p * n + j + TILE_C]);
        }
        let mut r = 0;
        while r < full_rows {
            let base = (row0 + r) * k;
            let ar: [&[f64]; TILE_R] = std::array::from_fn(|t| &a[base + t * k..base + (t + 1) * k]);
            let mut acc = [[0.0f64; TILE_C]; TILE_R];
            for (p, bp) in panel.chunks_exact(TILE_C).enumerate() {
                for t in 0..TILE_R {
                    let c = ar[t][p];
                    for q in 0..TILE_C {
                        acc[t][q] += c * bp[q];
                    }
                }
            }
            for t in 0..TILE_R {
                out[(r + t) * n + j..(r + t) * n + j + TILE_C].copy_from_slice(&acc[t]);
            }
            r += TILE_R;
        }
        j += TILE_C;
    }
    for r in 0..rows {
        let base = (row0 + r) * k;
        let from = if r < full_rows { full_cols } else { 0 };
        tail_cols(&a[base..base + k], b, n, from, &mut out[r * n..(r + 1) * n]);
    }
}

/// Columns `from..n` of one output row.
#[inline(always)]
fn tail_cols(arow: &[f64], b: &[f64], n: usize, from: usize, orow: &mut [f64]) {
    if from == n {
        return;
    }
    let o = &mut orow[from..];
    o.iter_mut().for_each(|x| *x = 0.0);
    for (p, &c) in arow.iter().enumerate() {
        let bp = &b[p * n + from..(p + 1) * n];
        for (oj, bj) in o.iter_mut().zip(bp) {
            *oj += c * bj;
        }
    }
}

/// `out = a * b` with `a: m x k`, `b: k x n`.
pub fn matmul_with(exec: Exec, a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    let mut out = vec![0.0; m * n];
    if n == 0 {
        return out;
    }
    match exec {
        Exec::Sequential => matmul_rows(a, b, k, n, 0, &mut out),
        Exec::Parallel => crate::parallel::for_each_row_block(&mut out, n, TASK_ROWS, |row0, block| {
            matmul_rows(a, b, k, n, row0, block)
        }),
    }
    out
}

pub fn matmul(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    matmul_with(Exec::default_mode(), a, b, m, k, n)
}

/// Transpose of a row-major `rows x cols` buffer.
pub fn transpose(a: &[f64], rows: usize, cols: usize) -> Vec<f64> {
    let mut out = vec![0.0; rows * cols];
    for i in 0..rows {
        for j in 0..cols {
            out[j * rows + i] = a[i * cols + j];
        }
    }
    out
}

/// `out = a * b^T` with `a: m x k`, `b: n x k`.
pub fn matmul_nt(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let bt = transpose(b, n, k);
    matmul(a, &bt, m, k, n)
}

/// `out = a^T * b` with `a: m x k`, `b: m x n`; result is `k x n`.
pub fn matmul_tn(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let at = transpose(a, m, k);
    matmul(&at, b, k, m, n)
}

/// Straightforward reference used by tests and benchmarks.
pub fn matmul_naive(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        for j in 0..n {
            let mut s = 0.0;
            for p in 0..k {
                s += a[i * k + p] * b[p * n + j];
            }
            out[i * n + j] = s;
        }
    }
    out
}
