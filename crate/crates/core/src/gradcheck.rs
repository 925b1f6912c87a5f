//! Finite-difference gradient checking.

use crate::scalar::Scalar;

/// Central differences `(f(x + h·e_k) − f(x − h·e_k)) / 2h` for every coordinate.
pub fn central_difference<T: Scalar>(f: impl Fn(&[T]) -> T, x: &[T], h: T) -> Vec<T> {
    let mut probe = x.to_vec();
    let two_h = h + h;
    (0..x.len())
        .map(|k| {
            let orig = probe[k];
            probe[k] = orig + h;
            let up = f(&probe);
            probe[k] = orig - h;
            let down = f(&probe);
            probe[k] = orig;
            (up - down) / two_h
        })
        .collect()
}

/// Normwise relative error `||a − b|| / max(||a||, ||b||)`; 0 when both vanish.
pub fn relative_error<T: Scalar>(a: &[T], b: &[T]) -> T {
    assert_eq!(a.len(), b.len(), "gradient lengths differ");
    let sq = |it: &mut dyn Iterator<Item = T>| it.map(|v| v * v).sum::<T>().sqrt();
    let diff = sq(&mut a.iter().zip(b).map(|(&x, &y)| x - y));
    let scale = sq(&mut a.iter().copied()).max(sq(&mut b.iter().copied()));
    if scale == T::zero() {
        T::zero()
    } else {
        diff / scale
    }
}
