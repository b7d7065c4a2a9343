//! Causal pooling between resolution levels.
//!
//! Down-pooling is a grouped convolution with kernel = stride = `p`.
//! Up-pooling is its transpose, shifted right by one pooled step so the
//! output at fine step `t` only depends on pooled frames that summarize
//! inputs strictly before the start of `t`'s frame. Weights are
//! `[d, d/groups, p]`, biases `[d]`.

use super::ParamSource;
use crate::error::{Error, Result};
use crate::tensor::{gemm, gemm_strided, MatRef, Real, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PoolDirection {
    Down,
    Up,
}

#[derive(Clone, Copy, Debug)]
pub struct PoolVars<'t, S: Real> {
    pub w: Var<'t, S>,
    pub b: Var<'t, S>,
    pub factor: usize,
    pub groups: usize,
}

impl<'t, S: Real> PoolVars<'t, S> {
    pub fn from_source(
        src: &impl ParamSource<'t, S>,
        prefix: &str,
        factor: usize,
        groups: usize,
    ) -> Result<Self> {
        Ok(PoolVars {
            w: src.param(&format!("{prefix}.w"))?,
            b: src.param(&format!("{prefix}.b"))?,
            factor,
            groups,
        })
    }
}

struct Geometry {
    batch: usize,
    fine: usize,
    d: usize,
    p: usize,
    groups: usize,
    cg: usize,
}

impl Geometry {
    fn coarse(&self) -> usize {
        self.fine / self.p
    }

    /// Offset of `W[o, i, τ]` for the first output channel of group `g`.
    fn w_group(&self, g: usize, tau: usize) -> usize {
        g * self.cg * self.cg * self.p + tau
    }

    /// `B[i, o] = W[g·cg + o, i, τ]`.
    fn w_view<'a, S>(&self, w: &'a [S], g: usize, tau: usize) -> MatRef<'a, S> {
        MatRef {
            data: &w[self.w_group(g, tau)..],
            rows: self.cg,
            cols: self.cg,
            row_stride: self.p,
            col_stride: self.cg * self.p,
        }
    }
}

fn geometry<S: Real>(
    x: &Tensor<S>,
    w: &Tensor<S>,
    b: &Tensor<S>,
    p: usize,
    groups: usize,
    dir: PoolDirection,
) -> Result<Geometry> {
    let (batch, t, d) = match *x.shape() {
        [b, t, d] => (b, t, d),
        _ => {
            return Err(Error::shape(format!(
                "pooling input must be [batch, time, width], got {:?}",
                x.shape()
            )))
        }
    };
    if p == 0 || groups == 0 || d % groups != 0 {
        return Err(Error::shape(format!(
            "invalid pooling: factor {p}, {groups} groups, width {d}"
        )));
    }
    let cg = d / groups;
    if w.shape() != [d, cg, p] || b.shape() != [d] {
        return Err(Error::shape(format!(
            "pooling weight {:?} / bias {:?} do not match [{d}, {cg}, {p}] / [{d}]",
            w.shape(),
            b.shape()
        )));
    }
    let fine = match dir {
        PoolDirection::Down => {
            if t % p != 0 {
                return Err(Error::shape(format!(
                    "sequence length {t} is not divisible by pooling factor {p}"
                )));
            }
            t
        }
        PoolDirection::Up => t * p,
    };
    Ok(Geometry {
        batch,
        fine,
        d,
        p,
        groups,
        cg,
    })
}

fn bias_rows<S: Real>(bias: &[S], rows: usize) -> Vec<S> {
    let mut out = Vec::with_capacity(rows * bias.len());
    for _ in 0..rows {
        out.extend_from_slice(bias);
    }
    out
}

fn column_sums<S: Real>(g: &[S], d: usize) -> Vec<S> {
    let mut out = vec![S::zero(); d];
    for row in g.chunks_exact(d) {
        for (o, &v) in out.iter_mut().zip(row) {
            *o += v;
        }
    }
    out
}

/// `[batch, T, d] → [batch, T/p, d]`.
pub fn downpool<'t, S: Real>(x: Var<'t, S>, pool: &PoolVars<'t, S>) -> Result<Var<'t, S>> {
    let (xv, wv, bv) = (x.value(), pool.w.value(), pool.b.value());
    let geo = geometry(&xv, &wv, &bv, pool.factor, pool.groups, PoolDirection::Down)?;
    let Geometry {
        batch,
        d,
        p,
        groups,
        cg,
        ..
    } = geo;
    let rows = batch * geo.coarse();
    let mut y = bias_rows(bv.data(), rows);
    for g in 0..groups {
        for tau in 0..p {
            let a = MatRef {
                data: &xv.data()[tau * d + g * cg..],
                rows,
                cols: cg,
                row_stride: p * d,
                col_stride: 1,
            };
            gemm(
                a,
                geo.w_view(wv.data(), g, tau),
                S::one(),
                &mut y[g * cg..],
                d,
            );
        }
    }
    let y = Tensor::new([batch, geo.coarse(), d], y)?;
    Ok(x.tape().record(&[x, pool.w, pool.b], y, move |gy| {
        let gy = gy.data();
        let mut gx = vec![S::zero(); xv.len()];
        let mut gw = vec![S::zero(); wv.len()];
        for g in 0..groups {
            let gyg = MatRef {
                data: &gy[g * cg..],
                rows,
                cols: cg,
                row_stride: d,
                col_stride: 1,
            };
            for tau in 0..p {
                let wt = geo.w_view(wv.data(), g, tau).t();
                gemm(gyg, wt, S::zero(), &mut gx[tau * d + g * cg..], p * d);
                let xg = MatRef {
                    data: &xv.data()[tau * d + g * cg..],
                    rows,
                    cols: cg,
                    row_stride: p * d,
                    col_stride: 1,
                };
                // gW[g·cg + o, i, τ] = Σ_r gy[r, o] x[r, i]
                gemm_strided(
                    gyg.t(),
                    xg,
                    S::zero(),
                    &mut gw[geo.w_group(g, tau)..],
                    cg * p,
                    p,
                );
            }
        }
        vec![
            Some(Tensor::new(xv.shape().to_vec(), gx).unwrap()),
            Some(Tensor::new(wv.shape().to_vec(), gw).unwrap()),
            Some(Tensor::from_vec(column_sums(gy, d))),
        ]
    }))
}

/// `[batch, J, d] → [batch, J·p, d]`, shifted by one pooled step: the first
/// `p` outputs of every row are the bias alone.
pub fn uppool<'t, S: Real>(z: Var<'t, S>, pool: &PoolVars<'t, S>) -> Result<Var<'t, S>> {
    let (zv, wv, bv) = (z.value(), pool.w.value(), pool.b.value());
    let geo = geometry(&zv, &wv, &bv, pool.factor, pool.groups, PoolDirection::Up)?;
    let Geometry {
        batch,
        fine,
        d,
        p,
        groups,
        cg,
    } = geo;
    let coarse = geo.coarse();
    let mut y = bias_rows(bv.data(), batch * fine);
    if coarse > 1 {
        for bi in 0..batch {
            for g in 0..groups {
                for tau in 0..p {
                    let a = MatRef {
                        data: &zv.data()[bi * coarse * d + g * cg..],
                        rows: coarse - 1,
                        cols: cg,
                        row_stride: d,
                        col_stride: 1,
                    };
                    let off = (bi * fine + p + tau) * d + g * cg;
                    gemm(
                        a,
                        geo.w_view(wv.data(), g, tau),
                        S::one(),
                        &mut y[off..],
                        p * d,
                    );
                }
            }
        }
    }
    let y = Tensor::new([batch, fine, d], y)?;
    Ok(z.tape().record(&[z, pool.w, pool.b], y, move |gy| {
        let gy = gy.data();
        let mut gz = vec![S::zero(); zv.len()];
        let mut gw = vec![S::zero(); wv.len()];
        if coarse > 1 {
            for bi in 0..batch {
                for g in 0..groups {
                    let zg = MatRef {
                        data: &zv.data()[bi * coarse * d + g * cg..],
                        rows: coarse - 1,
                        cols: cg,
                        row_stride: d,
                        col_stride: 1,
                    };
                    for tau in 0..p {
                        let gyg = MatRef {
                            data: &gy[(bi * fine + p + tau) * d + g * cg..],
                            rows: coarse - 1,
                            cols: cg,
                            row_stride: p * d,
                            col_stride: 1,
                        };
                        let wt = geo.w_view(wv.data(), g, tau).t();
                        gemm(gyg, wt, S::one(), &mut gz[bi * coarse * d + g * cg..], d);
                        gemm_strided(
                            zg.t(),
                            gyg,
                            S::one(),
                            &mut gw[geo.w_group(g, tau)..],
                            p,
                            cg * p,
                        );
                    }
                }
            }
        }
        vec![
            Some(Tensor::new(zv.shape().to_vec(), gz).unwrap()),
            Some(Tensor::new(wv.shape().to_vec(), gw).unwrap()),
            Some(Tensor::from_vec(column_sums(gy, d))),
        ]
    }))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::{check_gradients, random_tensor};
    use crate::tensor::Tape;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    /// Direct loops over the convolution definition.
    fn down_reference(
        x: &Tensor<f64>,
        w: &Tensor<f64>,
        b: &Tensor<f64>,
        p: usize,
        groups: usize,
    ) -> Tensor<f64> {
        let (bs, t, d) = (x.shape()[0], x.shape()[1], x.shape()[2]);
        let cg = d / groups;
        let j_len = t / p;
        Tensor::from_fn([bs, j_len, d], |flat| {
            let (bi, j, o) = (flat / (j_len * d), flat / d % j_len, flat % d);
            let g = o / cg;
            let mut acc = b.data()[o];
            for tau in 0..p {
                for i in 0..cg {
                    acc += w.data()[(o * cg + i) * p + tau]
                        * x.data()[(bi * t + j * p + tau) * d + g * cg + i];
                }
            }
            acc
        })
    }

    fn up_reference(
        z: &Tensor<f64>,
        w: &Tensor<f64>,
        b: &Tensor<f64>,
        p: usize,
        groups: usize,
    ) -> Tensor<f64> {
        let (bs, j_len, d) = (z.shape()[0], z.shape()[1], z.shape()[2]);
        let cg = d / groups;
        Tensor::from_fn([bs, j_len * p, d], |flat| {
            let (bi, t, o) = (flat / (j_len * p * d), flat / d % (j_len * p), flat % d);
            let (j, tau) = (t / p, t % p);
            let g = o / cg;
            let mut acc = b.data()[o];
            if j >= 1 {
                for i in 0..cg {
                    acc += w.data()[(o * cg + i) * p + tau]
                        * z.data()[(bi * j_len + j - 1) * d + g * cg + i];
                }
            }
            acc
        })
    }

    #[test]
    fn matches_direct_convolution() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for groups in [1, 2, 4] {
            let x: Tensor<f64> = random_tensor(&[2, 12, 4], -1.0, 1.0, &mut rng);
            let w: Tensor<f64> = random_tensor(&[4, 4 / groups, 3], -1.0, 1.0, &mut rng);
            let b: Tensor<f64> = random_tensor(&[4], -1.0, 1.0, &mut rng);
            let tape = Tape::new();
            let pv = PoolVars {
                w: tape.leaf(w.clone()),
                b: tape.leaf(b.clone()),
                factor: 3,
                groups,
            };
            let down = downpool(tape.leaf(x.clone()), &pv).unwrap().value();
            assert!(down.max_abs_diff(&down_reference(&x, &w, &b, 3, groups)) < 1e-12);
            let z: Tensor<f64> = random_tensor(&[2, 4, 4], -1.0, 1.0, &mut rng);
            let up = uppool(tape.leaf(z.clone()), &pv).unwrap().value();
            assert_eq!(up.shape(), [2, 12, 4]);
            assert!(up.max_abs_diff(&up_reference(&z, &w, &b, 3, groups)) < 1e-12);
        }
    }

    #[test]
    fn indivisible_length_is_rejected() {
        let tape = Tape::<f32>::new();
        let pv = PoolVars {
            w: tape.leaf(Tensor::zeros([2, 1, 4])),
            b: tape.leaf(Tensor::zeros([2])),
            factor: 4,
            groups: 2,
        };
        let err = downpool(tape.leaf(Tensor::zeros([1, 10, 2])), &pv).unwrap_err();
        assert!(err.to_string().contains("not divisible"));
    }

    #[test]
    fn first_frame_is_bias_only() {
        let tape = Tape::<f32>::new();
        let pv = PoolVars {
            w: tape.leaf(Tensor::ones([2, 2, 2])),
            b: tape.leaf(Tensor::from_vec(vec![0.5, -0.5])),
            factor: 2,
            groups: 1,
        };
        let y = uppool(tape.leaf(Tensor::full([1, 3, 2], 7.0)), &pv)
            .unwrap()
            .value();
        assert_eq!(&y.data()[..4], &[0.5, -0.5, 0.5, -0.5]);
        assert_eq!(y.data()[4], 14.5);
    }

    #[test]
    fn gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        for groups in [1, 2] {
            for dir in [PoolDirection::Down, PoolDirection::Up] {
                let t = if dir == PoolDirection::Down { 6 } else { 3 };
                let out_t = if dir == PoolDirection::Down { 3 } else { 6 };
                let inputs: Vec<Tensor<f64>> = vec![
                    random_tensor(&[2, t, 4], -1.0, 1.0, &mut rng),
                    random_tensor(&[4, 4 / groups, 2], -1.0, 1.0, &mut rng),
                    random_tensor(&[4], -1.0, 1.0, &mut rng),
                ];
                let w: Tensor<f64> = random_tensor(&[2, out_t, 4], -1.0, 1.0, &mut rng);
                let rep = check_gradients(&inputs, 1e-5, 1e-6, None, |tape, v| {
                    let pv = PoolVars {
                        w: v[1],
                        b: v[2],
                        factor: 2,
                        groups,
                    };
                    let y = match dir {
                        PoolDirection::Down => downpool(v[0], &pv)?,
                        PoolDirection::Up => uppool(v[0], &pv)?,
                    };
                    Ok(y.mul(tape.constant(w.clone()))?.sum_all())
                })
                .unwrap();
                assert!(rep.max_rel_err < 1e-6, "{dir:?} g={groups}: {rep:?}");
            }
        }
    }
}
