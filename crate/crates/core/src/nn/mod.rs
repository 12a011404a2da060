//! Small transformer toolkit on top of candle: a named, seed-deterministic
//! parameter store, pre-norm transformer layers and AdamW.

mod layers;
mod optim;
mod store;

pub use layers::{
    log_softmax_last, softmax_last, LayerNorm, Linear, Mlp, SelfAttention, TransformerLayer,
    TransformerStack,
};
pub use optim::{AdamW, AdamWConfig, LrSchedule};
pub use store::{Init, ParamStore};

use candle_core::{DType, Device, Tensor};
use ndarray::Array2;

use crate::data::FeatureVolume;
use crate::Result;

/// Copy a rank-2 tensor into an f32 array.
pub fn tensor_to_array2(t: &Tensor) -> Result<Array2<f32>> {
    let (r, c) = t.dims2()?;
    let v = t.to_dtype(DType::F32)?.flatten_all()?.to_vec1::<f32>()?;
    Ok(Array2::from_shape_vec((r, c), v).expect("matching element count"))
}

pub fn array2_to_tensor(a: &Array2<f32>, dtype: DType, device: &Device) -> Result<Tensor> {
    let data: Vec<f32> = a.iter().copied().collect();
    Ok(Tensor::from_vec(data, a.dim(), device)?.to_dtype(dtype)?)
}

/// Temporal slice `t` of a volume as `[N_S, d]`.
pub fn volume_slice(v: &FeatureVolume, t: usize) -> Result<Array2<f32>> {
    tensor_to_array2(&v.data().narrow(1, t, 1)?.squeeze(1)?)
}

#[derive(Debug, Clone, Copy)]
pub struct GradCheck {
    pub analytic: f64,
    pub numeric: f64,
    pub rel_error: f64,
}

/// Compare the autodiff directional derivative of `f` along a random unit
/// direction in parameter space against a central finite difference.
/// Parameters are restored afterwards.
pub fn directional_grad_check(
    store: &ParamStore,
    seed: u64,
    step: f64,
    f: impl Fn() -> Result<Tensor>,
) -> Result<GradCheck> {
    use rand::SeedableRng;
    use rand_distr::{Distribution, StandardNormal};
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let originals: Vec<(String, Tensor)> = store
        .iter()
        .map(|(n, v)| (n.clone(), v.as_tensor().copy().expect("copy")))
        .collect();
    let mut dirs = Vec::with_capacity(originals.len());
    let mut norm = 0.0f64;
    for (_, t) in &originals {
        let n = t.elem_count();
        let d: Vec<f64> = (0..n).map(|_| StandardNormal.sample(&mut rng)).collect();
        norm += d.iter().map(|x| x * x).sum::<f64>();
        dirs.push(d);
    }
    let norm = norm.sqrt();
    let dirs: Vec<Tensor> = originals
        .iter()
        .zip(dirs)
        .map(|((_, t), d)| {
            let d: Vec<f64> = d.into_iter().map(|x| x / norm).collect();
            Tensor::from_vec(d, t.dims(), t.device())?.to_dtype(t.dtype())
        })
        .collect::<candle_core::Result<_>>()?;

    let loss = f()?;
    let grads = loss.backward()?;
    let mut analytic = 0.0;
    for ((name, _), dir) in originals.iter().zip(&dirs) {
        let var = store.get(name).expect("present");
        if let Some(g) = grads.get(var.as_tensor()) {
            analytic += (g * dir)?.sum_all()?.to_dtype(DType::F64)?.to_scalar::<f64>()?;
        }
    }
    let probe = |sign: f64| -> Result<f64> {
        for ((name, orig), dir) in originals.iter().zip(&dirs) {
            store.set(name, &(orig + (dir * (sign * step))?)?)?;
        }
        Ok(f()?.to_dtype(DType::F64)?.to_scalar::<f64>()?)
    };
    let plus = probe(1.0)?;
    let minus = probe(-1.0)?;
    for (name, orig) in &originals {
        store.set(name, orig)?;
    }
    let numeric = (plus - minus) / (2.0 * step);
    let scale = analytic.abs().max(numeric.abs()).max(1e-8);
    Ok(GradCheck {
        analytic,
        numeric,
        rel_error: (analytic - numeric).abs() / scale,
    })
}
