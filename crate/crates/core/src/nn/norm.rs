use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor, Var};

pub const RMS_EPS: f64 = 1e-6;

/// `x / sqrt(mean(x²) + ε) · gain` over the last axis, fused.
pub fn rmsnorm<'t, S: Real>(x: Var<'t, S>, gain: Var<'t, S>) -> Result<Var<'t, S>> {
    let xv = x.value();
    let gv = gain.value();
    let d = *xv
        .shape()
        .last()
        .ok_or_else(|| Error::shape("rmsnorm on a scalar"))?;
    if gv.shape() != [d] {
        return Err(Error::shape(format!(
            "rmsnorm gain {:?} does not match width {d}",
            gv.shape()
        )));
    }
    let rows = xv.len() / d.max(1);
    let eps = S::lit(RMS_EPS);
    let inv_d = S::one() / S::lit(d as f64);
    let mut inv_rms = vec![S::zero(); rows];
    let mut y = vec![S::zero(); xv.len()];
    for r in 0..rows {
        let row = &xv.data()[r * d..(r + 1) * d];
        let ms = row.iter().map(|&v| v * v).sum::<S>() * inv_d;
        let k = S::one() / (ms + eps).sqrt();
        inv_rms[r] = k;
        for ((o, &v), &g) in y[r * d..(r + 1) * d].iter_mut().zip(row).zip(gv.data()) {
            *o = v * k * g;
        }
    }
    let y = Tensor::new(xv.shape().to_vec(), y)?;
    Ok(x.tape().record(&[x, gain], y, move |gy| {
        let mut gx = vec![S::zero(); xv.len()];
        let mut gg = vec![S::zero(); d];
        for r in 0..rows {
            let k = inv_rms[r];
            let row = &xv.data()[r * d..(r + 1) * d];
            let gr = &gy.data()[r * d..(r + 1) * d];
            let mut dot = S::zero();
            for j in 0..d {
                let xhat = row[j] * k;
                gg[j] += gr[j] * xhat;
                dot += gr[j] * gv.data()[j] * xhat;
            }
            dot = dot * inv_d;
            for j in 0..d {
                let xhat = row[j] * k;
                gx[r * d + j] = k * (gr[j] * gv.data()[j] - xhat * dot);
            }
        }
        vec![
            Some(Tensor::new(xv.shape().to_vec(), gx).unwrap()),
            Some(Tensor::from_vec(gg)),
        ]
    }))
}
