//! Elementwise nonlinearities and dense-layer helpers on flat row-major slices.

use crate::linalg::gemm;
use crate::model::config::Activation;
use crate::scalar::Scalar;

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_K: f64 = 0.044_715;

pub fn activate<T: Scalar>(act: Activation, x: T) -> T {
    match act {
        Activation::Relu => x.max(T::zero()),
        Activation::LeakyRelu { slope } => {
            if x > T::zero() {
                x
            } else {
                x * T::of(slope)
            }
        }
        Activation::Gelu => {
            let u = T::of(GELU_C) * (x + T::of(GELU_K) * x * x * x);
            T::of(0.5) * x * (T::one() + u.tanh())
        }
    }
}

pub fn activate_grad<T: Scalar>(act: Activation, x: T) -> T {
    match act {
        Activation::Relu => {
            if x > T::zero() {
                T::one()
            } else {
                T::zero()
            }
        }
        Activation::LeakyRelu { slope } => {
            if x > T::zero() {
                T::one()
            } else {
                T::of(slope)
            }
        }
        Activation::Gelu => {
            let c = T::of(GELU_C);
            let k = T::of(GELU_K);
            let half = T::of(0.5);
            let t = (c * (x + k * x * x * x)).tanh();
            half * (T::one() + t)
                + half * x * (T::one() - t * t) * c * (T::one() + T::of(3.0) * k * x * x)
        }
    }
}

/// `out = x·w` with `x: n×din`, `w: din×dout`.
pub fn linear<T: Scalar>(x: &[T], w: &[T], n: usize, din: usize, dout: usize) -> Vec<T> {
    let mut out = vec![T::zero(); n * dout];
    gemm(n, din, dout, T::one(), x, false, w, false, T::zero(), &mut out);
    out
}

/// `dw += xᵀ·dy`.
pub fn linear_grad_w<T: Scalar>(x: &[T], dy: &[T], dw: &mut [T], n: usize, din: usize, dout: usize) {
    gemm(din, n, dout, T::one(), x, true, dy, false, T::one(), dw);
}

/// `dx (+)= dy·wᵀ`; accumulates when `accumulate`.
pub fn linear_grad_x<T: Scalar>(
    dy: &[T],
    w: &[T],
    dx: &mut [T],
    n: usize,
    din: usize,
    dout: usize,
    accumulate: bool,
) {
    let beta = if accumulate { T::one() } else { T::zero() };
    gemm(n, dout, din, T::one(), dy, false, w, true, beta, dx);
}

pub fn add_assign<T: Scalar>(dst: &mut [T], src: &[T]) {
    for (d, &s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}
