/// `c = beta * c + op(a) * op(b)` where `op(a)` is `m x k` and `op(b)` is `k x n`.
///
/// When `a_t` is set, `a` is stored as a row-major `k x m` matrix and used
/// transposed; likewise for `b_t` with `b` stored as `n x k`.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    a_t: bool,
    b: &[f64],
    b_t: bool,
    c: &mut [f64],
    beta: f64,
) {
    assert_eq!(a.len(), m * k);
    assert_eq!(b.len(), k * n);
    assert_eq!(c.len(), m * n);
    let (rsa, csa) = if a_t { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if b_t { (1, k as isize) } else { (n as isize, 1) };
    // SAFETY: the asserts above pin every buffer to the extents implied by
    // (m, k, n) and the strides index strictly inside them.
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

/// Sum `src` into a buffer of length `len`, wrapping indices; the reverse of
/// trailing-dimension broadcasting.
pub(crate) fn reduce_to(src: &[f64], len: usize) -> Vec<f64> {
    if src.len() == len {
        return src.to_vec();
    }
    let mut out = vec![0.0; len];
    for chunk in src.chunks_exact(len) {
        for (o, s) in out.iter_mut().zip(chunk) {
            *o += s;
        }
    }
    out
}
