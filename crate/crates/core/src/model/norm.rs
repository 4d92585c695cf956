use crate::error::{Error, Result};
use crate::model::config::NormKind;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub const SIGMA_FLOOR: f64 = 1e-12;

/// Saved forward state for one normalised `n×d` block of rows.
#[derive(Clone, Debug, Default)]
pub struct NormCache<T> {
    /// Normalised rows before gain/bias.
    pub xhat: Vec<T>,
    pub inv_sigma: Vec<T>,
    pub floored: Vec<bool>,
}

/// Normalise each length-`d` row of `x` (population σ, floored).
pub fn norm_forward<T: Scalar>(
    x: &[T],
    d: usize,
    kind: NormKind,
    gain: Option<&[T]>,
    bias: Option<&[T]>,
) -> (Vec<T>, NormCache<T>) {
    let n = x.len() / d;
    let mut out = vec![T::zero(); x.len()];
    if kind == NormKind::None {
        out.copy_from_slice(x);
        return (out, NormCache::default());
    }
    let mut cache = NormCache {
        xhat: vec![T::zero(); x.len()],
        inv_sigma: vec![T::zero(); n],
        floored: vec![false; n],
    };
    let dt = T::from_usize(d).unwrap();
    let floor = T::of(SIGMA_FLOOR);
    for r in 0..n {
        let row = &x[r * d..(r + 1) * d];
        let mu = if kind.centred() {
            row.iter().fold(T::zero(), |a, &v| a + v) / dt
        } else {
            T::zero()
        };
        let var = row
            .iter()
            .fold(T::zero(), |a, &v| a + (v - mu) * (v - mu))
            / dt;
        let sigma = var.sqrt();
        let floored = !(sigma > floor);
        let inv = T::one() / if floored { floor } else { sigma };
        cache.inv_sigma[r] = inv;
        cache.floored[r] = floored;
        for j in 0..d {
            let xh = (row[j] - mu) * inv;
            cache.xhat[r * d + j] = xh;
            let g = gain.map_or(T::one(), |g| g[j]);
            let b = bias.map_or(T::zero(), |b| b[j]);
            out[r * d + j] = xh * g + b;
        }
    }
    (out, cache)
}

/// Reverse pass; returns `dx` and accumulates into `dgain`/`dbias`.
pub fn norm_backward<T: Scalar>(
    dy: &[T],
    d: usize,
    kind: NormKind,
    cache: &NormCache<T>,
    gain: Option<&[T]>,
    mut dgain: Option<&mut [T]>,
    mut dbias: Option<&mut [T]>,
) -> Vec<T> {
    if kind == NormKind::None {
        return dy.to_vec();
    }
    let n = dy.len() / d;
    let dt = T::from_usize(d).unwrap();
    let mut dx = vec![T::zero(); dy.len()];
    let mut dxh = vec![T::zero(); d];
    for r in 0..n {
        let xh = &cache.xhat[r * d..(r + 1) * d];
        let dyr = &dy[r * d..(r + 1) * d];
        for j in 0..d {
            if let Some(dg) = dgain.as_deref_mut() {
                dg[j] += dyr[j] * xh[j];
            }
            if let Some(db) = dbias.as_deref_mut() {
                db[j] += dyr[j];
            }
            dxh[j] = dyr[j] * gain.map_or(T::one(), |g| g[j]);
        }
        let mean_d = if kind.centred() {
            dxh.iter().fold(T::zero(), |a, &v| a + v) / dt
        } else {
            T::zero()
        };
        let mean_dx = if cache.floored[r] {
            T::zero()
        } else {
            dxh.iter()
                .zip(xh)
                .fold(T::zero(), |a, (&g, &h)| a + g * h)
                / dt
        };
        let inv = cache.inv_sigma[r];
        for j in 0..d {
            dx[r * d + j] = inv * (dxh[j] - mean_d - xh[j] * mean_dx);
        }
    }
    dx
}

/// Apply a norm to every row of an `n×d` tensor.
pub fn norm_apply<T: Scalar>(
    x: &Tensor<T>,
    kind: NormKind,
    gain: Option<&Tensor<T>>,
    bias: Option<&Tensor<T>>,
) -> Result<Tensor<T>> {
    let d = x.cols();
    if d == 0 {
        return Err(Error::Shape("norm needs d >= 1".into()));
    }
    for p in [gain, bias].into_iter().flatten() {
        if p.len() != d {
            return Err(Error::Shape(format!("norm parameter has {} entries, need {d}", p.len())));
        }
    }
    let (out, _) = norm_forward(x.data(), d, kind, gain.map(Tensor::data), bias.map(Tensor::data));
    Tensor::new(x.shape().to_vec(), out)
}
