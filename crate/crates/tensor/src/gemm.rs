/// `op(A)[m,k] * op(B)[k,n]` into a fresh row-major `[m,n]` buffer.
///
/// With `trans_a`, `a` is stored row-major as `[k,m]`; with `trans_b`, `b` as
/// `[n,k]`. Single-threaded, so the summation order is fixed.
pub(crate) fn gemm(a: &[f64], b: &[f64], m: usize, k: usize, n: usize, trans_a: bool, trans_b: bool) -> Vec<f64> {
    let mut c = vec![0.0; m * n];
    gemm_into(a, b, &mut c, m, k, n, trans_a, trans_b, 0.0);
    c
}

/// Same as [`gemm`] but writes `C = op(A) op(B) + beta * C`.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm_into(
    a: &[f64],
    b: &[f64],
    c: &mut [f64],
    m: usize,
    k: usize,
    n: usize,
    trans_a: bool,
    trans_b: bool,
    beta: f64,
) {
    assert_eq!(a.len(), m * k);
    assert_eq!(b.len(), k * n);
    assert_eq!(c.len(), m * n);
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        c.iter_mut().for_each(|v| *v *= beta);
        return;
    }
    let (rsa, csa) = if trans_a { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if trans_b { (1, k as isize) } else { (n as isize, 1) };
    // SAFETY: extents and strides describe exactly the slices checked above.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
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
