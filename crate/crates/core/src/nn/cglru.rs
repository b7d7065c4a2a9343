//! Complex gated linear recurrent unit.
//!
//! Per channel `c` and step `t`:
//!
//! ```text
//! r = σ(W_r u + b_r)            i = σ(W_i u + b_i)
//! a = exp((−8·softplus(ν) + iθ)·r)
//! h = a ⊙ h_prev + sqrt(1 − |a|²) ⊙ (i ⊙ u)
//! y = Re(h)
//! ```
//!
//! The gate projections are block-diagonal with `heads` square blocks.

use std::rc::Rc;

use super::ParamSource;
use crate::error::{Error, Result};
use crate::scan::{backward_into, scan_into, ElemView, GradSlices, ScanCarry, ScanVariant};
use crate::tensor::{gemm, sigmoid, softplus, MatRef, Real, Tensor, Var};

/// The constant `c` in `a = exp(−c·softplus(ν)·r)`.
pub const DECAY_SCALE: f64 = 8.0;

#[derive(Clone, Copy, Debug)]
pub struct CgLruVars<'t, S: Real> {
    pub nu: Var<'t, S>,
    pub theta: Var<'t, S>,
    /// `[heads, n/heads, n/heads]`
    pub w_r: Var<'t, S>,
    pub b_r: Var<'t, S>,
    pub w_i: Var<'t, S>,
    pub b_i: Var<'t, S>,
}

impl<'t, S: Real> CgLruVars<'t, S> {
    pub fn from_source(src: &impl ParamSource<'t, S>, prefix: &str) -> Result<Self> {
        let p = |n: &str| src.param(&format!("{prefix}.{n}"));
        Ok(CgLruVars {
            nu: p("nu")?,
            theta: p("theta")?,
            w_r: p("w_r")?,
            b_r: p("b_r")?,
            w_i: p("w_i")?,
            b_i: p("b_i")?,
        })
    }
}

/// Block-diagonal affine map over the last axis: `w` is `[heads, k, k]`,
/// `b` is `[heads·k]`.
pub fn block_diag_linear<'t, S: Real>(
    x: Var<'t, S>,
    w: Var<'t, S>,
    b: Var<'t, S>,
) -> Result<Var<'t, S>> {
    let xv = x.value();
    let wv = w.value();
    let bv = b.value();
    let (heads, k) = match *wv.shape() {
        [h, k1, k2] if k1 == k2 => (h, k1),
        _ => {
            return Err(Error::shape(format!(
                "block-diagonal weight must be [heads, k, k], got {:?}",
                wv.shape()
            )))
        }
    };
    let n = heads * k;
    if xv.shape().last() != Some(&n) || bv.shape() != [n] {
        return Err(Error::shape(format!(
            "block-diagonal map of width {n} applied to {:?} with bias {:?}",
            xv.shape(),
            bv.shape()
        )));
    }
    let rows = xv.len() / n;
    let mut y = vec![S::zero(); xv.len()];
    for r in 0..rows {
        y[r * n..(r + 1) * n].copy_from_slice(bv.data());
    }
    for h in 0..heads {
        let a = MatRef {
            data: &xv.data()[h * k..],
            rows,
            cols: k,
            row_stride: n,
            col_stride: 1,
        };
        let bm = MatRef::row_major(&wv.data()[h * k * k..(h + 1) * k * k], k, k);
        gemm(a, bm, S::one(), &mut y[h * k..], n);
    }
    let y = Tensor::new(xv.shape().to_vec(), y)?;
    Ok(x.tape().record(&[x, w, b], y, move |gy| {
        let g = gy.data();
        let mut gx = vec![S::zero(); xv.len()];
        let mut gw = vec![S::zero(); wv.len()];
        let mut gb = vec![S::zero(); n];
        for r in 0..rows {
            for (acc, &v) in gb.iter_mut().zip(&g[r * n..(r + 1) * n]) {
                *acc += v;
            }
        }
        for h in 0..heads {
            let gyh = MatRef {
                data: &g[h * k..],
                rows,
                cols: k,
                row_stride: n,
                col_stride: 1,
            };
            let wh = MatRef::row_major(&wv.data()[h * k * k..(h + 1) * k * k], k, k);
            gemm(gyh, wh.t(), S::zero(), &mut gx[h * k..], n);
            let xh = MatRef {
                data: &xv.data()[h * k..],
                rows,
                cols: k,
                row_stride: n,
                col_stride: 1,
            };
            gemm(
                xh.t(),
                gyh,
                S::zero(),
                &mut gw[h * k * k..(h + 1) * k * k],
                k,
            );
        }
        vec![
            Some(Tensor::new(xv.shape().to_vec(), gx).unwrap()),
            Some(Tensor::new(wv.shape().to_vec(), gw).unwrap()),
            Some(Tensor::from_vec(gb)),
        ]
    }))
}

/// Recurrence coefficients for one channel: `(a_re, a_im, sqrt(1 − |a|²))`.
#[inline]
pub fn lru_coefficients<S: Real>(softplus_nu: S, theta: S, r: S) -> (S, S, S) {
    let log_mag = -S::lit(DECAY_SCALE) * softplus_nu * r;
    let mag = log_mag.fast_exp();
    let (sin, cos) = (theta * r).sin_cos();
    let mult = (log_mag + log_mag).one_minus_exp().max(S::zero()).sqrt();
    debug_assert!(mag <= S::one() + S::lit(1e-6), "|a| = {mag:?} exceeds 1");
    (mag * cos, mag * sin, mult)
}

struct Saved<S: Real> {
    u: Rc<Tensor<S>>,
    r: Rc<Tensor<S>>,
    ig: Rc<Tensor<S>>,
    nu: Rc<Tensor<S>>,
    theta: Rc<Tensor<S>>,
    a_re: Vec<S>,
    a_im: Vec<S>,
    mult: Vec<S>,
    states_re: Vec<S>,
    states_im: Vec<S>,
    h0: Vec<ScanCarry<S>>,
}

/// Fused gated recurrence over `[batch, time, n]` inputs given the gate
/// activations `r` and `ig`. Returns `Re(h)` and each row's final state.
#[allow(clippy::too_many_arguments)]
pub fn lru_recurrence<'t, S: Real>(
    u: Var<'t, S>,
    r: Var<'t, S>,
    ig: Var<'t, S>,
    nu: Var<'t, S>,
    theta: Var<'t, S>,
    variant: ScanVariant,
    h0: Option<&[ScanCarry<S>]>,
) -> Result<(Var<'t, S>, Vec<ScanCarry<S>>)> {
    let uv = u.value();
    let (batch, time, n) = match *uv.shape() {
        [b, t, n] => (b, t, n),
        _ => {
            return Err(Error::shape(format!(
                "recurrence input must be [batch, time, channels], got {:?}",
                uv.shape()
            )))
        }
    };
    let (rv, igv, nuv, thv) = (r.value(), ig.value(), nu.value(), theta.value());
    if rv.shape() != uv.shape() || igv.shape() != uv.shape() {
        return Err(Error::shape("recurrence gates must match the input shape"));
    }
    if nuv.shape() != [n] || thv.shape() != [n] {
        return Err(Error::shape(format!(
            "nu/theta must be [{n}], got {:?}/{:?}",
            nuv.shape(),
            thv.shape()
        )));
    }
    let h0: Vec<ScanCarry<S>> = match h0 {
        Some(h) if h.len() == batch && h.iter().all(|c| c.h_re.len() == n) => h.to_vec(),
        Some(h) => {
            return Err(Error::shape(format!(
                "expected {batch} initial states of width {n}, got {}",
                h.len()
            )))
        }
        None => vec![ScanCarry::zeros(n); batch],
    };
    let sp: Vec<S> = nuv.data().iter().map(|&v| softplus(v)).collect();
    let total = uv.len();
    let mut a_re = vec![S::zero(); total];
    let mut a_im = vec![S::zero(); total];
    let mut mult = vec![S::zero(); total];
    let mut b_re = vec![S::zero(); total];
    for k in 0..total {
        let c = k % n;
        let (ar, ai, m) = lru_coefficients(sp[c], thv.data()[c], rv.data()[k]);
        a_re[k] = ar;
        a_im[k] = ai;
        mult[k] = m;
        b_re[k] = m * igv.data()[k] * uv.data()[k];
    }
    let b_im = vec![S::zero(); total];
    let mut states_re = vec![S::zero(); total];
    let mut states_im = vec![S::zero(); total];
    let row = time * n;
    let mut finals = Vec::with_capacity(batch);
    for bi in 0..batch {
        let s = bi * row..(bi + 1) * row;
        let view = ElemView {
            a_re: &a_re[s.clone()],
            a_im: &a_im[s.clone()],
            b_re: &b_re[s.clone()],
            b_im: &b_im[s.clone()],
            time,
            channels: n,
        };
        scan_into(
            variant,
            view,
            h0[bi].h_re.data(),
            h0[bi].h_im.data(),
            &mut states_re[s.clone()],
            &mut states_im[s.clone()],
        );
        finals.push(if time == 0 {
            h0[bi].clone()
        } else {
            ScanCarry {
                h_re: Tensor::from_vec(states_re[s.end - n..s.end].to_vec()),
                h_im: Tensor::from_vec(states_im[s.end - n..s.end].to_vec()),
            }
        });
    }
    let y = Tensor::new(uv.shape().to_vec(), states_re.clone())?;
    let saved = Saved {
        u: uv,
        r: rv,
        ig: igv,
        nu: nuv,
        theta: thv,
        a_re,
        a_im,
        mult,
        states_re,
        states_im,
        h0,
    };
    let out = u.tape().record(&[u, r, ig, nu, theta], y, move |gy| {
        lru_backward(saved, gy, variant, batch, time, n)
    });
    Ok((out, finals))
}

fn lru_backward<S: Real>(
    s: Saved<S>,
    gy: &Tensor<S>,
    variant: ScanVariant,
    batch: usize,
    time: usize,
    n: usize,
) -> Vec<Option<Tensor<S>>> {
    let total = batch * time * n;
    let row = time * n;
    let zeros = vec![S::zero(); row];
    let b_im = vec![S::zero(); row];
    let mut ga_re = vec![S::zero(); total];
    let mut ga_im = vec![S::zero(); total];
    let mut gb_re = vec![S::zero(); total];
    let mut gb_im = vec![S::zero(); row];
    let (mut gh_re, mut gh_im) = (vec![S::zero(); n], vec![S::zero(); n]);
    for bi in 0..batch {
        let r = bi * row..(bi + 1) * row;
        // b is only needed for its shape here; the backward pass reads a.
        let view = ElemView {
            a_re: &s.a_re[r.clone()],
            a_im: &s.a_im[r.clone()],
            b_re: &b_im,
            b_im: &b_im,
            time,
            channels: n,
        };
        backward_into(
            variant,
            view,
            s.h0[bi].h_re.data(),
            s.h0[bi].h_im.data(),
            &s.states_re[r.clone()],
            &s.states_im[r.clone()],
            &gy.data()[r.clone()],
            &zeros,
            GradSlices {
                a_re: &mut ga_re[r.clone()],
                a_im: &mut ga_im[r.clone()],
                b_re: &mut gb_re[r.clone()],
                b_im: &mut gb_im,
                h0_re: &mut gh_re,
                h0_im: &mut gh_im,
            },
        );
    }
    let sp: Vec<S> = s.nu.data().iter().map(|&v| softplus(v)).collect();
    let scale = S::lit(DECAY_SCALE);
    let tiny = S::lit(1e-6);
    let mut gu = vec![S::zero(); total];
    let mut gr = vec![S::zero(); total];
    let mut gig = vec![S::zero(); total];
    let mut gsp = vec![S::zero(); n];
    let mut gth = vec![S::zero(); n];
    for k in 0..total {
        let c = k % n;
        let (ar, ai, m) = (s.a_re[k], s.a_im[k], s.mult[k]);
        let (u, r, ig) = (s.u.data()[k], s.r.data()[k], s.ig.data()[k]);
        let x = ig * u;
        let gx = gb_re[k] * m;
        let g_mult = gb_re[k] * x;
        let mag2 = ar * ar + ai * ai;
        // ∂a/∂log|a| = a and ∂a/∂phase = i·a
        let g_log = ar * ga_re[k] + ai * ga_im[k] - g_mult * mag2 / m.max(tiny);
        let g_phase = ar * ga_im[k] - ai * ga_re[k];
        gr[k] = -scale * sp[c] * g_log + s.theta.data()[c] * g_phase;
        gsp[c] += -scale * r * g_log;
        gth[c] += r * g_phase;
        gig[k] = gx * u;
        gu[k] = gx * ig;
    }
    let gnu: Vec<S> = gsp
        .iter()
        .zip(s.nu.data())
        .map(|(&g, &v)| g * sigmoid(v))
        .collect();
    let shape = s.u.shape().to_vec();
    vec![
        Some(Tensor::new(shape.clone(), gu).unwrap()),
        Some(Tensor::new(shape.clone(), gr).unwrap()),
        Some(Tensor::new(shape, gig).unwrap()),
        Some(Tensor::from_vec(gnu)),
        Some(Tensor::from_vec(gth)),
    ]
}

/// Full CG-LRU layer on `[batch, time, n]`. Returns `Re(h)` and the final
/// hidden state of every row.
pub fn cglru_forward<'t, S: Real>(
    u: Var<'t, S>,
    p: &CgLruVars<'t, S>,
    variant: ScanVariant,
    h0: Option<&[ScanCarry<S>]>,
) -> Result<(Var<'t, S>, Vec<ScanCarry<S>>)> {
    let r = block_diag_linear(u, p.w_r, p.b_r)?.sigmoid();
    let ig = block_diag_linear(u, p.w_i, p.b_i)?.sigmoid();
    lru_recurrence(u, r, ig, p.nu, p.theta, variant, h0)
}
