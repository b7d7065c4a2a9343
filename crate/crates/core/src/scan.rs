//! First-order complex linear recurrences `h_t = a_t ⊙ h_{t−1} + b_t`.
//!
//! Each timestep is an affine map `h ↦ a·h + b` per channel. Affine maps form
//! a monoid under composition with identity `(1, 0)`, so all prefixes can be
//! computed sequentially, with a work-efficient up-sweep/down-sweep tree, or
//! by splitting the time axis across workers and fixing up chunk carries.
//!
//! Complex values are stored as separate real and imaginary planes, each
//! row-major `[time, channels]`.

use std::str::FromStr;
use std::time::Instant;

use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

/// Which algorithm evaluates the recurrence.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ScanVariant {
    Sequential,
    Tree,
    Chunked { workers: usize },
}

impl ScanVariant {
    pub fn name(&self) -> &'static str {
        match self {
            ScanVariant::Sequential => "sequential",
            ScanVariant::Tree => "tree",
            ScanVariant::Chunked { .. } => "chunked",
        }
    }
}

impl FromStr for ScanVariant {
    type Err = Error;

    /// Parses the variant name; chunked defaults to one worker.
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "sequential" => Ok(ScanVariant::Sequential),
            "tree" => Ok(ScanVariant::Tree),
            "chunked" => Ok(ScanVariant::Chunked { workers: 1 }),
            other => Err(Error::Config(format!("unknown scan variant `{other}`"))),
        }
    }
}

/// One complex affine map `h ↦ a·h + b` (a single channel).
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Affine<S> {
    pub a_re: S,
    pub a_im: S,
    pub b_re: S,
    pub b_im: S,
}

impl<S: Real> Affine<S> {
    pub fn identity() -> Self {
        Affine {
            a_re: S::one(),
            a_im: S::zero(),
            b_re: S::zero(),
            b_im: S::zero(),
        }
    }

    pub fn apply(&self, h_re: S, h_im: S) -> (S, S) {
        (
            self.a_re * h_re - self.a_im * h_im + self.b_re,
            self.a_re * h_im + self.a_im * h_re + self.b_im,
        )
    }
}

/// Compose two maps: `left` is applied first, then `right`.
/// Returns `(a_l·a_r, b_l·a_r + b_r)`.
pub fn combine<S: Real>(left: Affine<S>, right: Affine<S>) -> Affine<S> {
    Affine {
        a_re: left.a_re * right.a_re - left.a_im * right.a_im,
        a_im: left.a_re * right.a_im + left.a_im * right.a_re,
        b_re: left.b_re * right.a_re - left.b_im * right.a_im + right.b_re,
        b_im: left.b_re * right.a_im + left.b_im * right.a_re + right.b_im,
    }
}

/// Per-timestep, per-channel affine maps stored as four `[time, channels]`
/// planes.
#[derive(Clone, Debug, PartialEq)]
pub struct ScanElement<S: Real = f32> {
    pub a_re: Tensor<S>,
    pub a_im: Tensor<S>,
    pub b_re: Tensor<S>,
    pub b_im: Tensor<S>,
}

impl<S: Real> ScanElement<S> {
    pub fn new(a_re: Tensor<S>, a_im: Tensor<S>, b_re: Tensor<S>, b_im: Tensor<S>) -> Result<Self> {
        let shape = a_re.shape();
        if shape.len() != 2 {
            return Err(Error::shape(format!(
                "scan elements must be [time, channels], got {shape:?}"
            )));
        }
        for (name, t) in [("a_im", &a_im), ("b_re", &b_re), ("b_im", &b_im)] {
            if t.shape() != shape {
                return Err(Error::shape(format!(
                    "scan plane {name} has shape {:?}, expected {shape:?}",
                    t.shape()
                )));
            }
        }
        Ok(ScanElement {
            a_re,
            a_im,
            b_re,
            b_im,
        })
    }

    pub fn time(&self) -> usize {
        self.a_re.shape()[0]
    }

    pub fn channels(&self) -> usize {
        self.a_re.shape()[1]
    }

    pub fn view(&self) -> ElemView<'_, S> {
        ElemView {
            a_re: self.a_re.data(),
            a_im: self.a_im.data(),
            b_re: self.b_re.data(),
            b_im: self.b_im.data(),
            time: self.time(),
            channels: self.channels(),
        }
    }

    /// Elementwise composition of two element streams (`self` first).
    pub fn combine(&self, right: &ScanElement<S>) -> Result<ScanElement<S>> {
        if self.a_re.shape() != right.a_re.shape() {
            return Err(Error::shape(format!(
                "combine shapes differ: {:?} vs {:?}",
                self.a_re.shape(),
                right.a_re.shape()
            )));
        }
        let n = self.a_re.len();
        let (mut ar, mut ai, mut br, mut bi) = (
            Vec::with_capacity(n),
            Vec::with_capacity(n),
            Vec::with_capacity(n),
            Vec::with_capacity(n),
        );
        let (l, r) = (self.view(), right.view());
        for i in 0..n {
            let c = combine(l.get(i), r.get(i));
            ar.push(c.a_re);
            ai.push(c.a_im);
            br.push(c.b_re);
            bi.push(c.b_im);
        }
        let shape = self.a_re.shape().to_vec();
        ScanElement::new(
            Tensor::new(shape.clone(), ar)?,
            Tensor::new(shape.clone(), ai)?,
            Tensor::new(shape.clone(), br)?,
            Tensor::new(shape, bi)?,
        )
    }
}

/// Hidden state crossing a chunk or step boundary.
#[derive(Clone, Debug, PartialEq)]
pub struct ScanCarry<S: Real = f32> {
    pub h_re: Tensor<S>,
    pub h_im: Tensor<S>,
}

impl<S: Real> ScanCarry<S> {
    pub fn zeros(channels: usize) -> Self {
        ScanCarry {
            h_re: Tensor::zeros([channels]),
            h_im: Tensor::zeros([channels]),
        }
    }

    pub fn new(h_re: Tensor<S>, h_im: Tensor<S>) -> Result<Self> {
        if h_re.rank() != 1 || h_re.shape() != h_im.shape() {
            return Err(Error::shape(format!(
                "carry planes must be matching [channels], got {:?} and {:?}",
                h_re.shape(),
                h_im.shape()
            )));
        }
        Ok(ScanCarry { h_re, h_im })
    }
}

/// All hidden states of a scan, `[time, channels]` per plane.
#[derive(Clone, Debug, PartialEq)]
pub struct ScanStates<S: Real = f32> {
    pub re: Tensor<S>,
    pub im: Tensor<S>,
}

/// Gradients of a scan with respect to its elements and initial carry.
#[derive(Clone, Debug, PartialEq)]
pub struct ScanGrads<S: Real = f32> {
    pub a_re: Tensor<S>,
    pub a_im: Tensor<S>,
    pub b_re: Tensor<S>,
    pub b_im: Tensor<S>,
    pub h0: ScanCarry<S>,
}

/// Borrowed element planes.
#[derive(Clone, Copy, Debug)]
pub struct ElemView<'a, S> {
    pub a_re: &'a [S],
    pub a_im: &'a [S],
    pub b_re: &'a [S],
    pub b_im: &'a [S],
    pub time: usize,
    pub channels: usize,
}

impl<'a, S: Real> ElemView<'a, S> {
    fn get(&self, i: usize) -> Affine<S> {
        Affine {
            a_re: self.a_re[i],
            a_im: self.a_im[i],
            b_re: self.b_re[i],
            b_im: self.b_im[i],
        }
    }

    fn check(&self) {
        let n = self.time * self.channels;
        assert!(
            self.a_re.len() == n
                && self.a_im.len() == n
                && self.b_re.len() == n
                && self.b_im.len() == n,
            "scan planes must hold time*channels elements"
        );
    }

    fn slice(&self, start: usize, end: usize) -> ElemView<'a, S> {
        let c = self.channels;
        ElemView {
            a_re: &self.a_re[start * c..end * c],
            a_im: &self.a_im[start * c..end * c],
            b_re: &self.b_re[start * c..end * c],
            b_im: &self.b_im[start * c..end * c],
            time: end - start,
            channels: c,
        }
    }
}

fn check_h0<S>(h0_re: &[S], h0_im: &[S], channels: usize) -> Result<()> {
    if h0_re.len() != channels || h0_im.len() != channels {
        return Err(Error::shape(format!(
            "initial carry has {} channels, elements have {channels}",
            h0_re.len()
        )));
    }
    Ok(())
}

/// Evaluate the recurrence into `out_re`/`out_im` (`[time, channels]`).
pub fn scan_into<S: Real>(
    variant: ScanVariant,
    elems: ElemView<'_, S>,
    h0_re: &[S],
    h0_im: &[S],
    out_re: &mut [S],
    out_im: &mut [S],
) {
    elems.check();
    assert_eq!(h0_re.len(), elems.channels);
    assert_eq!(out_re.len(), elems.time * elems.channels);
    assert_eq!(out_im.len(), elems.time * elems.channels);
    match variant {
        ScanVariant::Sequential => sequential_kernel(elems, h0_re, h0_im, out_re, out_im),
        ScanVariant::Tree => tree_kernel(elems, h0_re, h0_im, out_re, out_im),
        ScanVariant::Chunked { workers } => {
            chunked_kernel(elems, h0_re, h0_im, workers.max(1), out_re, out_im)
        }
    }
}

fn sequential_kernel<S: Real>(
    e: ElemView<'_, S>,
    h0_re: &[S],
    h0_im: &[S],
    out_re: &mut [S],
    out_im: &mut [S],
) {
    let c = e.channels;
    let mut h_re = h0_re.to_vec();
    let mut h_im = h0_im.to_vec();
    for t in 0..e.time {
        let row = t * c..(t + 1) * c;
        let (ar, ai, br, bi) = (
            &e.a_re[row.clone()],
            &e.a_im[row.clone()],
            &e.b_re[row.clone()],
            &e.b_im[row.clone()],
        );
        let (or, oi) = (&mut out_re[row.clone()], &mut out_im[row]);
        for j in 0..c {
            let (hr, hi) = (h_re[j], h_im[j]);
            let nr = ar[j] * hr - ai[j] * hi + br[j];
            let ni = ar[j] * hi + ai[j] * hr + bi[j];
            h_re[j] = nr;
            h_im[j] = ni;
            or[j] = nr;
            oi[j] = ni;
        }
    }
}

/// Four owned planes of `rows × channels` affine maps.
struct Planes<S> {
    ar: Vec<S>,
    ai: Vec<S>,
    br: Vec<S>,
    bi: Vec<S>,
    c: usize,
}

impl<S: Real> Planes<S> {
    /// `x[dst] ← combine(x[src], x[dst])`.
    fn combine_into(&mut self, src: usize, dst: usize) {
        let c = self.c;
        for j in 0..c {
            let (s, d) = (src * c + j, dst * c + j);
            let l = Affine {
                a_re: self.ar[s],
                a_im: self.ai[s],
                b_re: self.br[s],
                b_im: self.bi[s],
            };
            let r = Affine {
                a_re: self.ar[d],
                a_im: self.ai[d],
                b_re: self.br[d],
                b_im: self.bi[d],
            };
            let o = combine(l, r);
            self.ar[d] = o.a_re;
            self.ai[d] = o.a_im;
            self.br[d] = o.b_re;
            self.bi[d] = o.b_im;
        }
    }

    /// Down-sweep step: left child takes the parent prefix, right child
    /// takes `prefix ∘ left`.
    fn down_step(&mut self, l: usize, r: usize) {
        let c = self.c;
        for j in 0..c {
            let (li, ri) = (l * c + j, r * c + j);
            let left = Affine {
                a_re: self.ar[li],
                a_im: self.ai[li],
                b_re: self.br[li],
                b_im: self.bi[li],
            };
            let prefix = Affine {
                a_re: self.ar[ri],
                a_im: self.ai[ri],
                b_re: self.br[ri],
                b_im: self.bi[ri],
            };
            let o = combine(prefix, left);
            self.ar[li] = prefix.a_re;
            self.ai[li] = prefix.a_im;
            self.br[li] = prefix.b_re;
            self.bi[li] = prefix.b_im;
            self.ar[ri] = o.a_re;
            self.ai[ri] = o.a_im;
            self.br[ri] = o.b_re;
            self.bi[ri] = o.b_im;
        }
    }

    fn set_identity(&mut self, row: usize) {
        let c = self.c;
        self.ar[row * c..(row + 1) * c].fill(S::one());
        self.ai[row * c..(row + 1) * c].fill(S::zero());
        self.br[row * c..(row + 1) * c].fill(S::zero());
        self.bi[row * c..(row + 1) * c].fill(S::zero());
    }
}

/// Blelloch up-sweep/down-sweep exclusive scan over the padded element
/// sequence, then an inclusive fix-up and the fold of `h0`.
fn tree_kernel<S: Real>(
    e: ElemView<'_, S>,
    h0_re: &[S],
    h0_im: &[S],
    out_re: &mut [S],
    out_im: &mut [S],
) {
    let (t_len, c) = (e.time, e.channels);
    if t_len == 0 {
        return;
    }
    let n = t_len.next_power_of_two();
    let pad = (n - t_len) * c;
    let extend = |src: &[S], fill: S| {
        let mut v = Vec::with_capacity(n * c);
        v.extend_from_slice(src);
        v.extend(std::iter::repeat(fill).take(pad));
        v
    };
    let mut x = Planes {
        ar: extend(e.a_re, S::one()),
        ai: extend(e.a_im, S::zero()),
        br: extend(e.b_re, S::zero()),
        bi: extend(e.b_im, S::zero()),
        c,
    };
    let mut stride = 1;
    while stride < n {
        let mut i = 0;
        while i < n {
            x.combine_into(i + stride - 1, i + 2 * stride - 1);
            i += 2 * stride;
        }
        stride *= 2;
    }
    x.set_identity(n - 1);
    while stride > 1 {
        stride /= 2;
        let mut i = 0;
        while i < n {
            x.down_step(i + stride - 1, i + 2 * stride - 1);
            i += 2 * stride;
        }
    }
    for t in 0..t_len {
        for j in 0..c {
            let k = t * c + j;
            let excl = Affine {
                a_re: x.ar[k],
                a_im: x.ai[k],
                b_re: x.br[k],
                b_im: x.bi[k],
            };
            let incl = combine(excl, e.get(k));
            let (r, i) = incl.apply(h0_re[j], h0_im[j]);
            out_re[k] = r;
            out_im[k] = i;
        }
    }
}

fn chunk_bounds(time: usize, workers: usize) -> Vec<(usize, usize)> {
    let w = workers.min(time).max(1);
    let base = time / w;
    let rem = time % w;
    let mut bounds = Vec::with_capacity(w);
    let mut start = 0;
    for k in 0..w {
        let len = base + usize::from(k < rem);
        bounds.push((start, start + len));
        start += len;
    }
    bounds
}

/// Local scan of one chunk from the identity, recording the cumulative
/// decay product alongside the states.
fn local_scan<S: Real>(
    e: ElemView<'_, S>,
    out_re: &mut [S],
    out_im: &mut [S],
    acc_re: &mut [S],
    acc_im: &mut [S],
) {
    let c = e.channels;
    let zeros = vec![S::zero(); c];
    sequential_kernel(e, &zeros, &zeros, out_re, out_im);
    let mut pr = vec![S::one(); c];
    let mut pi = vec![S::zero(); c];
    for t in 0..e.time {
        for j in 0..c {
            let k = t * c + j;
            let (ar, ai) = (e.a_re[k], e.a_im[k]);
            let nr = pr[j] * ar - pi[j] * ai;
            let ni = pr[j] * ai + pi[j] * ar;
            pr[j] = nr;
            pi[j] = ni;
            acc_re[k] = nr;
            acc_im[k] = ni;
        }
    }
}

/// Two-phase chunked scan: every worker scans its contiguous chunk locally,
/// a single coordinator chains the chunk carries after the barrier, then
/// every worker applies its incoming carry. The first chunk starts from
/// `h0` directly, so one worker reproduces the sequential scan exactly.
fn chunked_kernel<S: Real>(
    e: ElemView<'_, S>,
    h0_re: &[S],
    h0_im: &[S],
    workers: usize,
    out_re: &mut [S],
    out_im: &mut [S],
) {
    let c = e.channels;
    let bounds = chunk_bounds(e.time, workers);
    if bounds.len() <= 1 {
        sequential_kernel(e, h0_re, h0_im, out_re, out_im);
        return;
    }
    let first_len = (bounds[0].1 - bounds[0].0) * c;
    let rest = e.time * c - first_len;
    let mut acc_re = vec![S::zero(); rest];
    let mut acc_im = vec![S::zero(); rest];

    // Phase 1: local scans, one per worker, writing disjoint slices.
    {
        let (first_re, mut tail_re) = out_re.split_at_mut(first_len);
        let (first_im, mut tail_im) = out_im.split_at_mut(first_len);
        let mut acc_re_tail: &mut [S] = &mut acc_re;
        let mut acc_im_tail: &mut [S] = &mut acc_im;
        std::thread::scope(|scope| {
            for &(s, end) in &bounds[1..] {
                let len = (end - s) * c;
                let (or, tr) = std::mem::take(&mut tail_re).split_at_mut(len);
                let (oi, ti) = std::mem::take(&mut tail_im).split_at_mut(len);
                let (pr, rr) = std::mem::take(&mut acc_re_tail).split_at_mut(len);
                let (pi, ri) = std::mem::take(&mut acc_im_tail).split_at_mut(len);
                tail_re = tr;
                tail_im = ti;
                acc_re_tail = rr;
                acc_im_tail = ri;
                let chunk = e.slice(s, end);
                scope.spawn(move || local_scan(chunk, or, oi, pr, pi));
            }
            sequential_kernel(
                e.slice(bounds[0].0, bounds[0].1),
                h0_re,
                h0_im,
                first_re,
                first_im,
            );
        });
    }

    // Coordinator: chain carries across chunk boundaries.
    let mut carries: Vec<(Vec<S>, Vec<S>)> = Vec::with_capacity(bounds.len());
    let last = (bounds[0].1 - 1) * c;
    let mut carry = (
        out_re[last..last + c].to_vec(),
        out_im[last..last + c].to_vec(),
    );
    for &(_, end) in &bounds[1..] {
        carries.push(carry.clone());
        let k = (end - 1) * c;
        let ka = k - first_len;
        let mut next = (vec![S::zero(); c], vec![S::zero(); c]);
        for j in 0..c {
            let map = Affine {
                a_re: acc_re[ka + j],
                a_im: acc_im[ka + j],
                b_re: out_re[k + j],
                b_im: out_im[k + j],
            };
            let (r, i) = map.apply(carry.0[j], carry.1[j]);
            next.0[j] = r;
            next.1[j] = i;
        }
        carry = next;
    }

    // Phase 2: apply incoming carries.
    let (_, mut tail_re) = out_re.split_at_mut(first_len);
    let (_, mut tail_im) = out_im.split_at_mut(first_len);
    let mut offset = 0;
    std::thread::scope(|scope| {
        for (&(s, end), (cr, ci)) in bounds[1..].iter().zip(&carries) {
            let len = (end - s) * c;
            let (or, tr) = std::mem::take(&mut tail_re).split_at_mut(len);
            let (oi, ti) = std::mem::take(&mut tail_im).split_at_mut(len);
            tail_re = tr;
            tail_im = ti;
            let pr = &acc_re[offset..offset + len];
            let pi = &acc_im[offset..offset + len];
            offset += len;
            scope.spawn(move || {
                for (k, (o_re, o_im)) in or.iter_mut().zip(oi.iter_mut()).enumerate() {
                    let j = k % c;
                    *o_re = *o_re + pr[k] * cr[j] - pi[k] * ci[j];
                    *o_im = *o_im + pr[k] * ci[j] + pi[k] * cr[j];
                }
            });
        }
    });
}

fn run<S: Real>(
    variant: ScanVariant,
    elems: &ScanElement<S>,
    h0: &ScanCarry<S>,
) -> Result<(ScanStates<S>, ScanCarry<S>)> {
    let (t, c) = (elems.time(), elems.channels());
    if t == 0 {
        return Err(Error::shape("scan requires time ≥ 1"));
    }
    check_h0(h0.h_re.data(), h0.h_im.data(), c)?;
    let mut re = vec![S::zero(); t * c];
    let mut im = vec![S::zero(); t * c];
    scan_into(
        variant,
        elems.view(),
        h0.h_re.data(),
        h0.h_im.data(),
        &mut re,
        &mut im,
    );
    let last = ScanCarry {
        h_re: Tensor::from_vec(re[(t - 1) * c..].to_vec()),
        h_im: Tensor::from_vec(im[(t - 1) * c..].to_vec()),
    };
    Ok((
        ScanStates {
            re: Tensor::new([t, c], re)?,
            im: Tensor::new([t, c], im)?,
        },
        last,
    ))
}

/// Reference evaluation: one step at a time.
pub fn scan_sequential<S: Real>(
    elems: &ScanElement<S>,
    h0: &ScanCarry<S>,
) -> Result<(ScanStates<S>, ScanCarry<S>)> {
    run(ScanVariant::Sequential, elems, h0)
}

/// Work-efficient tree scan; non-power-of-two lengths are padded with
/// identity maps.
pub fn scan_tree<S: Real>(
    elems: &ScanElement<S>,
    h0: &ScanCarry<S>,
) -> Result<(ScanStates<S>, ScanCarry<S>)> {
    run(ScanVariant::Tree, elems, h0)
}

/// Sequence-axis parallel scan over `workers` contiguous chunks.
pub fn scan_chunked<S: Real>(
    elems: &ScanElement<S>,
    h0: &ScanCarry<S>,
    workers: usize,
) -> Result<(ScanStates<S>, ScanCarry<S>)> {
    if workers == 0 {
        return Err(Error::Invalid(
            "scan_chunked needs at least one worker".into(),
        ));
    }
    run(ScanVariant::Chunked { workers }, elems, h0)
}

pub fn scan<S: Real>(
    variant: ScanVariant,
    elems: &ScanElement<S>,
    h0: &ScanCarry<S>,
) -> Result<(ScanStates<S>, ScanCarry<S>)> {
    run(variant, elems, h0)
}

/// Slice-level backward pass. Writes `∂L/∂a`, `∂L/∂b` (complex, as
/// `∂/∂re + i·∂/∂im`) and returns nothing; `grad_h0` receives `∂L/∂h0`.
///
/// The adjoint obeys `g_{t−1} = conj(a_t)·g_t + grad_states[t−1]`, a linear
/// recurrence in reversed time, which is evaluated with the same `variant`.
#[allow(clippy::too_many_arguments)]
pub fn backward_into<S: Real>(
    variant: ScanVariant,
    elems: ElemView<'_, S>,
    h0_re: &[S],
    h0_im: &[S],
    states_re: &[S],
    states_im: &[S],
    grad_re: &[S],
    grad_im: &[S],
    out: GradSlices<'_, S>,
) {
    let (t_len, c) = (elems.time, elems.channels);
    let n = t_len * c;
    let mut ra_re = vec![S::zero(); n];
    let mut ra_im = vec![S::zero(); n];
    let mut rb_re = vec![S::zero(); n];
    let mut rb_im = vec![S::zero(); n];
    for s in 0..t_len {
        let src = t_len - 1 - s;
        rb_re[s * c..(s + 1) * c].copy_from_slice(&grad_re[src * c..(src + 1) * c]);
        rb_im[s * c..(s + 1) * c].copy_from_slice(&grad_im[src * c..(src + 1) * c]);
        if s > 0 {
            let a_t = t_len - s;
            for j in 0..c {
                ra_re[s * c + j] = elems.a_re[a_t * c + j];
                ra_im[s * c + j] = -elems.a_im[a_t * c + j];
            }
        }
    }
    let rev = ElemView {
        a_re: &ra_re,
        a_im: &ra_im,
        b_re: &rb_re,
        b_im: &rb_im,
        time: t_len,
        channels: c,
    };
    let zeros = vec![S::zero(); c];
    let mut g_re = vec![S::zero(); n];
    let mut g_im = vec![S::zero(); n];
    scan_into(variant, rev, &zeros, &zeros, &mut g_re, &mut g_im);
    drop((ra_re, ra_im, rb_re, rb_im));

    for t in 0..t_len {
        let s = t_len - 1 - t;
        for j in 0..c {
            let k = t * c + j;
            let (gr, gi) = (g_re[s * c + j], g_im[s * c + j]);
            out.b_re[k] = gr;
            out.b_im[k] = gi;
            let (pr, pi) = if t == 0 {
                (h0_re[j], h0_im[j])
            } else {
                (states_re[k - c], states_im[k - c])
            };
            // g · conj(prev)
            out.a_re[k] = gr * pr + gi * pi;
            out.a_im[k] = gi * pr - gr * pi;
        }
    }
    for j in 0..c {
        let (gr, gi) = (g_re[(t_len - 1) * c + j], g_im[(t_len - 1) * c + j]);
        let (ar, ai) = (elems.a_re[j], elems.a_im[j]);
        // conj(a_0) · g_0
        out.h0_re[j] = ar * gr + ai * gi;
        out.h0_im[j] = ar * gi - ai * gr;
    }
}

/// Output buffers for [`backward_into`].
pub struct GradSlices<'a, S> {
    pub a_re: &'a mut [S],
    pub a_im: &'a mut [S],
    pub b_re: &'a mut [S],
    pub b_im: &'a mut [S],
    pub h0_re: &'a mut [S],
    pub h0_im: &'a mut [S],
}

/// Gradients of a scan given `∂L/∂states`.
pub fn scan_backward<S: Real>(
    variant: ScanVariant,
    elems: &ScanElement<S>,
    h0: &ScanCarry<S>,
    states: &ScanStates<S>,
    grad_states: &ScanStates<S>,
) -> Result<ScanGrads<S>> {
    let (t, c) = (elems.time(), elems.channels());
    check_h0(h0.h_re.data(), h0.h_im.data(), c)?;
    for s in [&states.re, &states.im, &grad_states.re, &grad_states.im] {
        if s.shape() != [t, c] {
            return Err(Error::shape(format!(
                "state plane {:?} does not match elements [{t}, {c}]",
                s.shape()
            )));
        }
    }
    let n = t * c;
    let (mut ar, mut ai, mut br, mut bi) = (
        vec![S::zero(); n],
        vec![S::zero(); n],
        vec![S::zero(); n],
        vec![S::zero(); n],
    );
    let (mut hr, mut hi) = (vec![S::zero(); c], vec![S::zero(); c]);
    backward_into(
        variant,
        elems.view(),
        h0.h_re.data(),
        h0.h_im.data(),
        states.re.data(),
        states.im.data(),
        grad_states.re.data(),
        grad_states.im.data(),
        GradSlices {
            a_re: &mut ar,
            a_im: &mut ai,
            b_re: &mut br,
            b_im: &mut bi,
            h0_re: &mut hr,
            h0_im: &mut hi,
        },
    );
    Ok(ScanGrads {
        a_re: Tensor::new([t, c], ar)?,
        a_im: Tensor::new([t, c], ai)?,
        b_re: Tensor::new([t, c], br)?,
        b_im: Tensor::new([t, c], bi)?,
        h0: ScanCarry {
            h_re: Tensor::from_vec(hr),
            h_im: Tensor::from_vec(hi),
        },
    })
}

/// Microbenchmark: scanned tokens (time steps × channels) per second.
pub fn throughput(variant: ScanVariant, time: usize, channels: usize, reps: usize) -> f64 {
    use rand::{Rng, SeedableRng};
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(7);
    let n = time * channels;
    let mut plane =
        |lo: f32, hi: f32| -> Vec<f32> { (0..n).map(|_| rng.gen_range(lo..hi)).collect() };
    let (ar, ai, br, bi) = (
        plane(-0.7, 0.7),
        plane(-0.7, 0.7),
        plane(-1.0, 1.0),
        plane(-1.0, 1.0),
    );
    let view = ElemView {
        a_re: &ar,
        a_im: &ai,
        b_re: &br,
        b_im: &bi,
        time,
        channels,
    };
    let zeros = vec![0.0f32; channels];
    let mut or = vec![0.0f32; n];
    let mut oi = vec![0.0f32; n];
    let start = Instant::now();
    for _ in 0..reps.max(1) {
        scan_into(variant, view, &zeros, &zeros, &mut or, &mut oi);
    }
    (n * reps.max(1)) as f64 / start.elapsed().as_secs_f64()
}
