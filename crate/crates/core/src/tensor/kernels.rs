//! Slice-level numeric kernels shared by forward and backward passes.

use super::Scalar;

/// `c[m×n] = a[m×k] · b[k×n]`
pub(crate) fn matmul<T: Scalar>(a: &[T], b: &[T], m: usize, k: usize, n: usize) -> Vec<T> {
    let mut c = vec![T::zero(); m * n];
    for i in 0..m {
        let row = &mut c[i * n..(i + 1) * n];
        for p in 0..k {
            let aip = a[i * k + p];
            let brow = &b[p * n..(p + 1) * n];
            for (cj, &bj) in row.iter_mut().zip(brow) {
                *cj += aip * bj;
            }
        }
    }
    c
}

/// `da[m×k] += dc[m×n] · b[k×n]ᵀ`
pub(crate) fn matmul_grad_lhs<T: Scalar>(
    dc: &[T],
    b: &[T],
    da: &mut [T],
    m: usize,
    k: usize,
    n: usize,
) {
    // saxpy over rows of bᵀ vectorizes; a dot-product loop would not
    let mut bt = vec![T::zero(); n * k];
    for p in 0..k {
        for j in 0..n {
            bt[j * k + p] = b[p * n + j];
        }
    }
    for i in 0..m {
        let drow = &dc[i * n..(i + 1) * n];
        let darow = &mut da[i * k..(i + 1) * k];
        for (j, &d) in drow.iter().enumerate() {
            let btrow = &bt[j * k..(j + 1) * k];
            for (x, &y) in darow.iter_mut().zip(btrow) {
                *x += d * y;
            }
        }
    }
}

/// `db[k×n] += a[m×k]ᵀ · dc[m×n]`
pub(crate) fn matmul_grad_rhs<T: Scalar>(
    a: &[T],
    dc: &[T],
    db: &mut [T],
    m: usize,
    k: usize,
    n: usize,
) {
    for i in 0..m {
        let drow = &dc[i * n..(i + 1) * n];
        for p in 0..k {
            let aip = a[i * k + p];
            let dbrow = &mut db[p * n..(p + 1) * n];
            for (d, &g) in dbrow.iter_mut().zip(drow) {
                *d += aip * g;
            }
        }
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

/// Tanh approximation of GELU.
pub(crate) fn gelu<T: Scalar>(x: T) -> T {
    let c = T::lit(GELU_C);
    let a = T::lit(GELU_A);
    let half = T::lit(0.5);
    half * x * (T::one() + (c * (x + a * x * x * x)).tanh())
}

pub(crate) fn gelu_grad<T: Scalar>(x: T) -> T {
    let c = T::lit(GELU_C);
    let a = T::lit(GELU_A);
    let half = T::lit(0.5);
    let u = c * (x + a * x * x * x);
    let th = u.tanh();
    let du = c * (T::one() + T::lit(3.0) * a * x * x);
    half * (T::one() + th) + half * x * (T::one() - th * th) * du
}

/// Row-wise softmax over the entries a row may see. Hidden entries get
/// probability zero; a row with nothing visible is all zeros.
pub(crate) fn softmax_row<T: Scalar>(x: &[T], visible: Option<&[bool]>, out: &mut [T]) {
    let allowed = |j: usize| visible.is_none_or(|v| v[j]);
    let mut max = T::neg_infinity();
    for (j, &v) in x.iter().enumerate() {
        if allowed(j) && v > max {
            max = v;
        }
    }
    if max == T::neg_infinity() {
        out.iter_mut().for_each(|o| *o = T::zero());
        return;
    }
    let mut sum = T::zero();
    for (j, (&v, o)) in x.iter().zip(out.iter_mut()).enumerate() {
        if allowed(j) {
            *o = (v - max).exp();
            sum += *o;
        } else {
            *o = T::zero();
        }
    }
    for o in out.iter_mut() {
        *o /= sum;
    }
}
