//! Differentiable primitive operations on [`Var`].

use super::{
    broadcast_shape, gemm, is_suffix, unbroadcast, BroadcastIndex, MatRef, Real, Tensor, Var,
};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Unary {
    Neg,
    Exp,
    Log,
    Sigmoid,
    Gelu,
    Sqrt,
    Square,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Binary {
    Add,
    Sub,
    Mul,
    Div,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Reduce {
    Sum,
    Mean,
    /// Not differentiable; the result is recorded without a backward rule.
    Max,
}

/// `1 / (1 + e⁻ˣ)`. Overflow of `e⁻ˣ` yields the correct limit 0.
#[inline]
pub fn sigmoid<S: Real>(x: S) -> S {
    S::one() / (S::one() + (-x).fast_exp())
}

const GELU_K: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_C: f64 = 0.044_715;

/// Tanh-approximated GELU, evaluated as `x·σ(2z)` with
/// `z = √(2/π)(x + 0.044715x³)` since `(1 + tanh z)/2 = σ(2z)`.
pub fn gelu<S: Real>(x: S) -> S {
    let z2 = S::lit(2.0 * GELU_K) * (x + S::lit(GELU_C) * x * x * x);
    x * sigmoid(z2)
}

pub fn gelu_grad<S: Real>(x: S) -> S {
    let z2 = S::lit(2.0 * GELU_K) * (x + S::lit(GELU_C) * x * x * x);
    let s = sigmoid(z2);
    let dz2 = S::lit(2.0 * GELU_K) * (S::one() + S::lit(3.0 * GELU_C) * x * x);
    s + x * s * (S::one() - s) * dz2
}

pub fn softplus<S: Real>(x: S) -> S {
    if x > S::lit(20.0) {
        x
    } else {
        x.exp().ln_1p()
    }
}

/// Elementwise `f(a, b)` under the broadcast rule.
fn zip_broadcast<S: Real>(
    a: &Tensor<S>,
    b: &Tensor<S>,
    f: impl Fn(S, S) -> S,
) -> Result<Tensor<S>> {
    let shape = broadcast_shape(a.shape(), b.shape())?;
    let data = if a.shape() == b.shape() {
        a.data()
            .iter()
            .zip(b.data())
            .map(|(&x, &y)| f(x, y))
            .collect()
    } else if a.shape() == &shape[..] && is_suffix(b.shape(), &shape) {
        let n = b.len();
        let mut out = Vec::with_capacity(a.len());
        for chunk in a.data().chunks(n) {
            out.extend(chunk.iter().zip(b.data()).map(|(&x, &y)| f(x, y)));
        }
        out
    } else {
        let ia = BroadcastIndex::new(a.shape(), &shape);
        let ib = BroadcastIndex::new(b.shape(), &shape);
        let n: usize = shape.iter().product();
        (0..n)
            .map(|i| f(a.data()[ia.map(i)], b.data()[ib.map(i)]))
            .collect()
    };
    Tensor::new(shape, data)
}

/// Split a shape around `axis` into (outer, axis length, inner).
fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

impl<'t, S: Real> Var<'t, S> {
    pub fn unary(self, op: Unary) -> Var<'t, S> {
        let x = self.value();
        let y = match op {
            Unary::Neg => x.map(|v| -v),
            Unary::Exp => x.map(|v| v.fast_exp()),
            Unary::Log => x.map(|v| v.ln()),
            Unary::Sigmoid => x.map(sigmoid),
            Unary::Gelu => x.map(gelu),
            Unary::Sqrt => x.map(|v| v.sqrt()),
            Unary::Square => x.map(|v| v * v),
        };
        let needs_y = matches!(op, Unary::Exp | Unary::Sigmoid | Unary::Sqrt);
        let saved_y = if needs_y { Some(y.clone()) } else { None };
        self.tape().record(&[self], y, move |g| {
            let gx: Vec<S> = match op {
                Unary::Neg => g.data().iter().map(|&g| -g).collect(),
                Unary::Exp => zip_data(g, saved_y.as_ref().unwrap(), |g, y| g * y),
                Unary::Log => zip_data(g, &x, |g, x| g / x),
                Unary::Sigmoid => {
                    zip_data(g, saved_y.as_ref().unwrap(), |g, y| g * y * (S::one() - y))
                }
                Unary::Gelu => zip_data(g, &x, |g, x| g * gelu_grad(x)),
                Unary::Sqrt => zip_data(g, saved_y.as_ref().unwrap(), |g, y| g * S::lit(0.5) / y),
                Unary::Square => zip_data(g, &x, |g, x| g * S::lit(2.0) * x),
            };
            vec![Some(Tensor::new(g.shape().to_vec(), gx).unwrap())]
        })
    }

    pub fn binary(self, op: Binary, other: Var<'t, S>) -> Result<Var<'t, S>> {
        let a = self.value();
        let b = other.value();
        let y = match op {
            Binary::Add => zip_broadcast(&a, &b, |x, y| x + y),
            Binary::Sub => zip_broadcast(&a, &b, |x, y| x - y),
            Binary::Mul => zip_broadcast(&a, &b, |x, y| x * y),
            Binary::Div => zip_broadcast(&a, &b, |x, y| x / y),
        }?;
        Ok(self.tape().record(&[self, other], y, move |g| {
            let (ga, gb) = match op {
                Binary::Add => (g.clone(), g.clone()),
                Binary::Sub => (g.clone(), g.map(|v| -v)),
                Binary::Mul => (
                    zip_broadcast(g, &b, |g, b| g * b).unwrap(),
                    zip_broadcast(g, &a, |g, a| g * a).unwrap(),
                ),
                Binary::Div => {
                    let q = zip_broadcast(&a, &b, |a, b| -a / (b * b)).unwrap();
                    (
                        zip_broadcast(g, &b, |g, b| g / b).unwrap(),
                        zip_broadcast(g, &q, |g, q| g * q).unwrap(),
                    )
                }
            };
            vec![
                Some(unbroadcast(&ga, a.shape())),
                Some(unbroadcast(&gb, b.shape())),
            ]
        }))
    }

    pub fn add(self, other: Var<'t, S>) -> Result<Var<'t, S>> {
        self.binary(Binary::Add, other)
    }

    pub fn sub(self, other: Var<'t, S>) -> Result<Var<'t, S>> {
        self.binary(Binary::Sub, other)
    }

    pub fn mul(self, other: Var<'t, S>) -> Result<Var<'t, S>> {
        self.binary(Binary::Mul, other)
    }

    pub fn div(self, other: Var<'t, S>) -> Result<Var<'t, S>> {
        self.binary(Binary::Div, other)
    }

    pub fn neg(self) -> Var<'t, S> {
        self.unary(Unary::Neg)
    }

    pub fn exp(self) -> Var<'t, S> {
        self.unary(Unary::Exp)
    }

    pub fn log(self) -> Var<'t, S> {
        self.unary(Unary::Log)
    }

    pub fn sigmoid(self) -> Var<'t, S> {
        self.unary(Unary::Sigmoid)
    }

    pub fn gelu(self) -> Var<'t, S> {
        self.unary(Unary::Gelu)
    }

    pub fn sqrt(self) -> Var<'t, S> {
        self.unary(Unary::Sqrt)
    }

    pub fn square(self) -> Var<'t, S> {
        self.unary(Unary::Square)
    }

    /// Multiply by a constant.
    pub fn scale(self, k: S) -> Var<'t, S> {
        let y = self.value().map(|v| v * k);
        self.tape()
            .record(&[self], y, move |g| vec![Some(g.map(|v| v * k))])
    }

    /// `a[..., m, k] × b[k, n] → [..., m, n]`.
    pub fn matmul(self, other: Var<'t, S>) -> Result<Var<'t, S>> {
        let a = self.value();
        let b = other.value();
        let (sa, sb) = (a.shape(), b.shape());
        if sa.is_empty() || sb.len() != 2 || sa[sa.len() - 1] != sb[0] {
            return Err(Error::shape(format!(
                "matmul inner dimensions disagree: {sa:?} × {sb:?}"
            )));
        }
        let (k, n) = (sb[0], sb[1]);
        let m = a.len() / k.max(1);
        let mut out_shape = sa.to_vec();
        *out_shape.last_mut().unwrap() = n;
        let mut c = vec![S::zero(); m * n];
        gemm(
            MatRef::row_major(a.data(), m, k),
            MatRef::row_major(b.data(), k, n),
            S::zero(),
            &mut c,
            n,
        );
        let y = Tensor::new(out_shape, c)?;
        Ok(self.tape().record(&[self, other], y, move |g| {
            let gm = MatRef::row_major(g.data(), m, n);
            let mut ga = vec![S::zero(); m * k];
            gemm(
                gm,
                MatRef::row_major(b.data(), k, n).t(),
                S::zero(),
                &mut ga,
                k,
            );
            let mut gb = vec![S::zero(); k * n];
            gemm(
                MatRef::row_major(a.data(), m, k).t(),
                gm,
                S::zero(),
                &mut gb,
                n,
            );
            vec![
                Some(Tensor::new(a.shape().to_vec(), ga).unwrap()),
                Some(Tensor::new(b.shape().to_vec(), gb).unwrap()),
            ]
        }))
    }

    /// Reduce along `axis`, removing it from the shape.
    pub fn reduce(self, op: Reduce, axis: usize) -> Result<Var<'t, S>> {
        let x = self.value();
        let shape = x.shape().to_vec();
        if axis >= shape.len() {
            return Err(Error::Axis {
                axis,
                rank: shape.len(),
            });
        }
        let (outer, len, inner) = split_axis(&shape, axis);
        let mut out = vec![
            match op {
                Reduce::Max => S::neg_infinity(),
                _ => S::zero(),
            };
            outer * inner
        ];
        for o in 0..outer {
            for l in 0..len {
                let src = &x.data()[(o * len + l) * inner..(o * len + l + 1) * inner];
                let dst = &mut out[o * inner..(o + 1) * inner];
                for (d, &s) in dst.iter_mut().zip(src) {
                    *d = match op {
                        Reduce::Max => d.max(s),
                        _ => *d + s,
                    };
                }
            }
        }
        if op == Reduce::Mean {
            let inv = S::one() / S::lit(len as f64);
            out.iter_mut().for_each(|v| *v = *v * inv);
        }
        let mut out_shape = shape.clone();
        out_shape.remove(axis);
        let y = Tensor::new(out_shape, out)?;
        if op == Reduce::Max {
            return Ok(self.tape().record_nondiff(&[self], y));
        }
        Ok(self.tape().record(&[self], y, move |g| {
            let scale = if op == Reduce::Mean {
                S::one() / S::lit(len as f64)
            } else {
                S::one()
            };
            let mut gx = vec![S::zero(); outer * len * inner];
            for o in 0..outer {
                let src = &g.data()[o * inner..(o + 1) * inner];
                for l in 0..len {
                    let dst = &mut gx[(o * len + l) * inner..(o * len + l + 1) * inner];
                    for (d, &s) in dst.iter_mut().zip(src) {
                        *d = s * scale;
                    }
                }
            }
            vec![Some(Tensor::new(shape, gx).unwrap())]
        }))
    }

    pub fn sum(self, axis: usize) -> Result<Var<'t, S>> {
        self.reduce(Reduce::Sum, axis)
    }

    pub fn mean(self, axis: usize) -> Result<Var<'t, S>> {
        self.reduce(Reduce::Mean, axis)
    }

    /// Sum of all elements as a scalar.
    pub fn sum_all(self) -> Var<'t, S> {
        let x = self.value();
        let shape = x.shape().to_vec();
        let y = Tensor::scalar(x.sum_all());
        self.tape().record(&[self], y, move |g| {
            vec![Some(Tensor::full(shape, g.data()[0]))]
        })
    }

    pub fn mean_all(self) -> Var<'t, S> {
        let n = self.value().len().max(1);
        self.sum_all().scale(S::one() / S::lit(n as f64))
    }

    /// Reshape (copies, per the row-major no-views layout).
    pub fn reshape(self, shape: &[usize]) -> Result<Var<'t, S>> {
        let x = self.value();
        let old = x.shape().to_vec();
        let y = Tensor::new(shape.to_vec(), x.data().to_vec())?;
        Ok(self.tape().record(&[self], y, move |g| {
            vec![Some(Tensor::new(old, g.data().to_vec()).unwrap())]
        }))
    }
}

fn zip_data<S: Real>(a: &Tensor<S>, b: &Tensor<S>, f: impl Fn(S, S) -> S) -> Vec<S> {
    a.data()
        .iter()
        .zip(b.data())
        .map(|(&x, &y)| f(x, y))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tape;

    fn t(shape: &[usize], v: &[f64]) -> Tensor<f64> {
        Tensor::new(shape.to_vec(), v.to_vec()).unwrap()
    }

    #[test]
    fn add_and_sigmoid_values() {
        let tape = Tape::<f64>::new();
        let a = tape.leaf(t(&[2], &[1.0, 2.0]));
        let b = tape.leaf(t(&[2], &[3.0, 4.0]));
        assert_eq!(a.add(b).unwrap().value().data(), &[4.0, 6.0]);
        let z = tape.leaf(t(&[1], &[0.0]));
        assert_eq!(z.sigmoid().value().data(), &[0.5]);
    }

    #[test]
    fn shape_errors_name_both_shapes() {
        let tape = Tape::<f64>::new();
        let a = tape.leaf(Tensor::zeros([2, 3]));
        let b = tape.leaf(Tensor::zeros([2]));
        let msg = a.add(b).unwrap_err().to_string();
        assert!(msg.contains("[2, 3]") && msg.contains("[2]"), "{msg}");
        let w = tape.leaf(Tensor::zeros([4, 1]));
        assert!(a.matmul(w).is_err());
    }

    #[test]
    fn matmul_small_cases() {
        let tape = Tape::<f64>::new();
        let i3 = tape.leaf(Tensor::eye(3));
        let v = tape.leaf(t(&[3, 1], &[1.0, -2.0, 5.0]));
        assert_eq!(i3.matmul(v).unwrap().value().data(), v.value().data());
        let a = tape.leaf(t(&[2, 2], &[1.0, 2.0, 3.0, 4.0]));
        let ones = tape.leaf(t(&[2, 1], &[1.0, 1.0]));
        assert_eq!(a.matmul(ones).unwrap().value().data(), &[3.0, 7.0]);
    }

    #[test]
    fn reductions() {
        let tape = Tape::<f64>::new();
        let x = tape.leaf(t(&[3], &[1.0, 2.0, 3.0]));
        assert_eq!(x.sum(0).unwrap().value().data(), &[6.0]);
        let ones = tape.leaf(Tensor::ones([2, 4]));
        assert_eq!(ones.mean(1).unwrap().value().data(), &[1.0, 1.0]);
        let m = tape.leaf(t(&[2, 2], &[1.0, 5.0, 3.0, 2.0]));
        let mx = m.reduce(Reduce::Max, 0).unwrap();
        assert_eq!(mx.value().data(), &[3.0, 5.0]);
        assert!(!mx.requires_grad());
        assert!(matches!(x.sum(1), Err(Error::Axis { axis: 1, rank: 1 })));
    }

    #[test]
    fn each_op_records_one_node() {
        let tape = Tape::<f64>::new();
        let x = tape.leaf(Tensor::ones([2, 2]));
        let n0 = tape.len();
        let y = x.exp();
        assert_eq!(tape.len(), n0 + 1);
        let _ = y.mul(x).unwrap();
        assert_eq!(tape.len(), n0 + 2);
    }

    #[test]
    fn backward_simple_products() {
        let tape = Tape::<f64>::new();
        let x = tape.leaf(t(&[], &[2.0]));
        let y = tape.leaf(t(&[], &[3.0]));
        let loss = x.mul(y).unwrap();
        let g = tape.backward(loss).unwrap();
        assert_eq!(g.get(&x).unwrap().data(), &[3.0]);
        assert_eq!(g.get(&y).unwrap().data(), &[2.0]);

        let x = tape.leaf(Tensor::from_fn([2, 3], |i| i as f64));
        let loss = x.sum_all();
        let g = tape.backward(loss).unwrap();
        assert_eq!(g.get(&x).unwrap(), &Tensor::ones([2, 3]));
    }

    #[test]
    fn backward_errors() {
        let tape = Tape::<f64>::new();
        let x = tape.leaf(Tensor::ones([2]));
        assert!(matches!(
            tape.backward(x.exp()),
            Err(Error::NonScalarLoss(_))
        ));
        let x = tape.leaf(Tensor::ones([2]));
        let loss = x.sum_all();
        tape.backward(loss).unwrap();
        assert!(matches!(tape.backward(loss), Err(Error::NoActiveTape)));
    }

    #[test]
    fn exp_gradient_at_one_is_e() {
        let tape = Tape::<f32>::new();
        let x = tape.leaf(Tensor::from_vec(vec![1.0f32]));
        let loss = x.exp().sum_all();
        let g = tape.backward(loss).unwrap().get(&x).unwrap().data()[0];
        let eps = 1e-3f64;
        let fd = ((1.0 + eps).exp() - (1.0 - eps).exp()) / (2.0 * eps);
        assert!((g as f64 - fd).abs() < 1e-5, "{g} vs {fd}");
        assert!((g - std::f32::consts::E).abs() < 1e-6);
    }
}
