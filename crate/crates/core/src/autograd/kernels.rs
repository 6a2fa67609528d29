//! Dense f32 kernels behind the tape operators.
//!
//! All loops run in a fixed order so results are bit-identical across runs
//! and worker counts. Inner loops are written so the compiler can vectorize
//! without reassociating sums: accumulation into distinct output elements
//! (`out[j] += a * b[j]`) or fixed 8-lane dot products.

/// C[m×n] += A[m×k] · B[k×n], row-major.
pub fn matmul_acc(a: &[f32], b: &[f32], m: usize, k: usize, n: usize, out: &mut [f32]) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(out.len(), m * n);
    for i in 0..m {
        let a_row = &a[i * k..(i + 1) * k];
        let c_row = &mut out[i * n..(i + 1) * n];
        for (p, &aip) in a_row.iter().enumerate() {
            if aip == 0.0 {
                continue;
            }
            let b_row = &b[p * n..(p + 1) * n];
            for (c, &bv) in c_row.iter_mut().zip(b_row) {
                *c += aip * bv;
            }
        }
    }
}

/// C[m×k] += A[m×n] · Bᵀ where B is [k×n]: row-by-row dot products.
pub fn matmul_abt_acc(a: &[f32], b: &[f32], m: usize, n: usize, k: usize, out: &mut [f32]) {
    debug_assert_eq!(a.len(), m * n);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(out.len(), m * k);
    for i in 0..m {
        let a_row = &a[i * n..(i + 1) * n];
        for p in 0..k {
            let b_row = &b[p * n..(p + 1) * n];
            out[i * k + p] += dot(a_row, b_row);
        }
    }
}

/// Fixed-order 8-lane dot product. The lane split is part of the numeric
/// contract: it never changes with vector width or thread count.
pub fn dot(a: &[f32], b: &[f32]) -> f32 {
    debug_assert_eq!(a.len(), b.len());
    let mut acc = [0.0f32; 8];
    let chunks = a.len() / 8;
    for i in 0..chunks {
        let ao = &a[i * 8..i * 8 + 8];
        let bo = &b[i * 8..i * 8 + 8];
        for l in 0..8 {
            acc[l] += ao[l] * bo[l];
        }
    }
    let mut tail = 0.0f32;
    for i in chunks * 8..a.len() {
        tail += a[i] * b[i];
    }
    (((acc[0] + acc[1]) + (acc[2] + acc[3])) + ((acc[4] + acc[5]) + (acc[6] + acc[7]))) + tail
}

/// Unpack one image (c×h×w) into column form: col[(c·kh·kw) × (oh·ow)],
/// zero padding outside.
#[allow(clippy::too_many_arguments)]
pub fn im2col(
    img: &[f32],
    channels: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    pad_h: usize,
    pad_w: usize,
    out_h: usize,
    out_w: usize,
    col: &mut [f32],
) {
    debug_assert_eq!(img.len(), channels * h * w);
    debug_assert_eq!(col.len(), channels * kh * kw * out_h * out_w);
    let n = out_h * out_w;
    for c in 0..channels {
        let plane = &img[c * h * w..(c + 1) * h * w];
        for ki in 0..kh {
            for kj in 0..kw {
                let row = &mut col[((c * kh + ki) * kw + kj) * n..((c * kh + ki) * kw + kj + 1) * n];
                for oh in 0..out_h {
                    let ih = oh + ki;
                    let dst = &mut row[oh * out_w..(oh + 1) * out_w];
                    if ih < pad_h || ih >= h + pad_h {
                        dst.fill(0.0);
                        continue;
                    }
                    let ih = ih - pad_h;
                    let src = &plane[ih * w..(ih + 1) * w];
                    for (ow, d) in dst.iter_mut().enumerate() {
                        let iw = ow + kj;
                        *d = if iw < pad_w || iw >= w + pad_w { 0.0 } else { src[iw - pad_w] };
                    }
                }
            }
        }
    }
}

/// Scatter-add the column-form gradient back to image layout; the exact
/// adjoint of [`im2col`].
#[allow(clippy::too_many_arguments)]
pub fn col2im_acc(
    col: &[f32],
    channels: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    pad_h: usize,
    pad_w: usize,
    out_h: usize,
    out_w: usize,
    img: &mut [f32],
) {
    debug_assert_eq!(img.len(), channels * h * w);
    let n = out_h * out_w;
    for c in 0..channels {
        let plane = &mut img[c * h * w..(c + 1) * h * w];
        for ki in 0..kh {
            for kj in 0..kw {
                let row = &col[((c * kh + ki) * kw + kj) * n..((c * kh + ki) * kw + kj + 1) * n];
                for oh in 0..out_h {
                    let ih = oh + ki;
                    if ih < pad_h || ih >= h + pad_h {
                        continue;
                    }
                    let ih = ih - pad_h;
                    let src = &row[oh * out_w..(oh + 1) * out_w];
                    let dst = &mut plane[ih * w..(ih + 1) * w];
                    for (ow, &g) in src.iter().enumerate() {
                        let iw = ow + kj;
                        if iw >= pad_w && iw < w + pad_w {
                            dst[iw - pad_w] += g;
                        }
                    }
                }
            }
        }
    }
}
