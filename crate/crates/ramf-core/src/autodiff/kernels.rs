//! Inner loops shared by the graph operations. All matrices are row-major
//! slices; the caller owns shape bookkeeping.

/// C[m,n] = A[m,k] @ B[k,n]
pub fn matmul(a: &[f64], m: usize, k: usize, b: &[f64], n: usize) -> Vec<f64> {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    let mut c = vec![0.0; m * n];
    for i in 0..m {
        let c_row = &mut c[i * n..(i + 1) * n];
        for p in 0..k {
            let a_ip = a[i * k + p];
            if a_ip == 0.0 {
                continue;
            }
            let b_row = &b[p * n..(p + 1) * n];
            for (cv, bv) in c_row.iter_mut().zip(b_row) {
                *cv += a_ip * bv;
            }
        }
    }
    c
}

/// C[m,n] = A[m,k] @ B[n,k]^T  (rows of A dotted with rows of B)
pub fn matmul_bt(a: &[f64], m: usize, k: usize, b: &[f64], n: usize) -> Vec<f64> {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), n * k);
    let mut c = vec![0.0; m * n];
    for i in 0..m {
        let a_row = &a[i * k..(i + 1) * k];
        let c_row = &mut c[i * n..(i + 1) * n];
        for (j, cv) in c_row.iter_mut().enumerate() {
            let b_row = &b[j * k..(j + 1) * k];
            let mut s = 0.0;
            for (av, bv) in a_row.iter().zip(b_row) {
                s += av * bv;
            }
            *cv = s;
        }
    }
    c
}

/// C[m,n] = A[k,m]^T @ B[k,n]  (column-of-A against row-of-B accumulation)
pub fn matmul_at(a: &[f64], k: usize, m: usize, b: &[f64], n: usize) -> Vec<f64> {
    debug_assert_eq!(a.len(), k * m);
    debug_assert_eq!(b.len(), k * n);
    let mut c = vec![0.0; m * n];
    for p in 0..k {
        let a_row = &a[p * m..(p + 1) * m];
        let b_row = &b[p * n..(p + 1) * n];
        for i in 0..m {
            let a_pi = a_row[i];
            if a_pi == 0.0 {
                continue;
            }
            let c_row = &mut c[i * n..(i + 1) * n];
            for (cv, bv) in c_row.iter_mut().zip(b_row) {
                *cv += a_pi * bv;
            }
        }
    }
    c
}

/// Unfold one padded [c,h,w] image into a [c*k*k, oh*ow] patch matrix
/// (patch coordinates along the contiguous axis).
#[allow(clippy::too_many_arguments)]
pub fn im2col_t(
    img: &[f64],
    c: usize,
    h: usize,
    w: usize,
    ksize: usize,
    pad: usize,
    oh: usize,
    ow: usize,
    out: &mut [f64],
) {
    debug_assert_eq!(img.len(), c * h * w);
    debug_assert_eq!(out.len(), c * ksize * ksize * oh * ow);
    let mut row = 0;
    for ch in 0..c {
        let plane = &img[ch * h * w..(ch + 1) * h * w];
        for u in 0..ksize {
            for v in 0..ksize {
                let dst = &mut out[row * oh * ow..(row + 1) * oh * ow];
                for i in 0..oh {
                    // source row index in the unpadded image
                    let src_i = i + u;
                    let dst_row = &mut dst[i * ow..(i + 1) * ow];
                    if src_i < pad || src_i >= h + pad {
                        dst_row.iter_mut().for_each(|x| *x = 0.0);
                        continue;
                    }
                    let src_i = src_i - pad;
                    for (j, slot) in dst_row.iter_mut().enumerate() {
                        let src_j = j + v;
                        *slot = if src_j < pad || src_j >= w + pad {
                            0.0
                        } else {
                            plane[src_i * w + (src_j - pad)]
                        };
                    }
                }
                row += 1;
            }
        }
    }
}

/// Scatter-add the transpose-layout patch matrix back into an image
/// gradient; inverse of [`im2col_t`] under summation.
#[allow(clippy::too_many_arguments)]
pub fn col2im_t_add(
    cols: &[f64],
    c: usize,
    h: usize,
    w: usize,
    ksize: usize,
    pad: usize,
    oh: usize,
    ow: usize,
    img_grad: &mut [f64],
) {
    debug_assert_eq!(cols.len(), c * ksize * ksize * oh * ow);
    debug_assert_eq!(img_grad.len(), c * h * w);
    let mut row = 0;
    for ch in 0..c {
        let plane = &mut img_grad[ch * h * w..(ch + 1) * h * w];
        for u in 0..ksize {
            for v in 0..ksize {
                let src = &cols[row * oh * ow..(row + 1) * oh * ow];
                for i in 0..oh {
                    let src_i = i + u;
                    if src_i < pad || src_i >= h + pad {
                        continue;
                    }
                    let src_i = src_i - pad;
                    let src_row = &src[i * ow..(i + 1) * ow];
                    for (j, val) in src_row.iter().enumerate() {
                        let src_j = j + v;
                        if src_j < pad || src_j >= w + pad {
                            continue;
                        }
                        plane[src_i * w + (src_j - pad)] += val;
                    }
                }
                row += 1;
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn matmul_small() {
        // [1 2; 3 4] @ [5 6; 7 8] = [19 22; 43 50]
        let c = matmul(&[1.0, 2.0, 3.0, 4.0], 2, 2, &[5.0, 6.0, 7.0, 8.0], 2);
        assert_eq!(c, vec![19.0, 22.0, 43.0, 50.0]);
    }

    #[test]
    fn matmul_variants_agree() {
        let a = [1.0, -2.0, 0.5, 3.0, 4.0, -1.0]; // 2x3
        let b = [2.0, 1.0, 0.0, -1.0, 1.0, 3.0]; // 3x2
        let c = matmul(&a, 2, 3, &b, 2);
        // b transposed has shape 2x3
        let bt = [2.0, 0.0, 1.0, 1.0, -1.0, 3.0];
        assert_eq!(matmul_bt(&a, 2, 3, &bt, 2), c);
        // a transposed has shape 3x2
        let at = [1.0, 3.0, -2.0, 4.0, 0.5, -1.0];
        assert_eq!(matmul_at(&at, 3, 2, &b, 2), c);
    }

    #[test]
    fn im2col_roundtrip_counts_contributions() {
        // col2im(ones-like im2col pattern) counts how many patches touch
        // each pixel; with k=1, pad=0 each pixel is touched exactly once.
        let img: Vec<f64> = (0..12).map(|v| v as f64).collect(); // 1x3x4
        let mut cols = vec![0.0; 12];
        im2col_t(&img, 1, 3, 4, 1, 0, 3, 4, &mut cols);
        assert_eq!(cols, img);
        let mut back = vec![0.0; 12];
        col2im_t_add(&cols, 1, 3, 4, 1, 0, 3, 4, &mut back);
        assert_eq!(back, img);
    }
}
