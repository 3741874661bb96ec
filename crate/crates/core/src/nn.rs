//! Minimal dense layers with hand-written backward passes.
//!
//! Activations of the 3D convolutions are laid out channel-major across the
//! batch, `[C][N][T][H][W]`, so that every convolution is a single GEMM over
//! all clips of a batch. Dense layers use row-major `[N][features]`.

use std::fmt::Debug;
use std::iter::Sum;
use std::ops::{AddAssign, DivAssign, MulAssign, SubAssign};

use num_traits::{Float, FromPrimitive, ToPrimitive};
use rand::Rng;

/// Floating point type the network can be instantiated with.
///
/// Training runs in `f32`; gradient checks instantiate the same code at `f64`.
pub trait Real:
    Float + FromPrimitive + ToPrimitive + Default + Debug + Send + Sync + Sum + AddAssign + SubAssign + MulAssign + DivAssign + 'static
{
    const DTYPE: &'static str;

    /// `C (m×n) = alpha·op(A)·op(B) + beta·C`, row-major operands.
    #[allow(clippy::too_many_arguments)]
    fn gemm(
        m: usize,
        k: usize,
        n: usize,
        alpha: Self,
        a: &[Self],
        trans_a: bool,
        b: &[Self],
        trans_b: bool,
        beta: Self,
        c: &mut [Self],
    );

    fn to_le(self, out: &mut Vec<u8>);
    fn from_le(bytes: &[u8]) -> Self;
    const BYTES: usize;

    #[inline]
    fn lit(v: f64) -> Self {
        Self::from_f64(v).expect("literal fits in scalar type")
    }
}

fn strides(rows: usize, cols: usize, trans: bool) -> (isize, isize) {
    // logical (rows × cols) view of a row-major buffer, optionally transposed
    if trans {
        (1, rows as isize)
    } else {
        (cols as isize, 1)
    }
}

macro_rules! impl_real {
    ($ty:ty, $gemm:path, $name:literal) => {
        impl Real for $ty {
            const DTYPE: &'static str = $name;
            const BYTES: usize = std::mem::size_of::<$ty>();

            fn gemm(
                m: usize,
                k: usize,
                n: usize,
                alpha: Self,
                a: &[Self],
                trans_a: bool,
                b: &[Self],
                trans_b: bool,
                beta: Self,
                c: &mut [Self],
            ) {
                assert!(a.len() >= m * k, "gemm: A too small");
                assert!(b.len() >= k * n, "gemm: B too small");
                assert!(c.len() >= m * n, "gemm: C too small");
                if m == 0 || n == 0 {
                    return;
                }
                let (rsa, csa) = strides(m, k, trans_a);
                let (rsb, csb) = strides(k, n, trans_b);
                // SAFETY: bounds asserted above; strides describe the buffers exactly.
                unsafe {
                    $gemm(
                        m,
                        k,
                        n,
                        alpha,
                        a.as_ptr(),
                        rsa,
                        csa,
                        b.as_ptr(),
                        rsb,
                        csb,
                        beta,
                        c.as_mut_ptr(),
                        n as isize,
                        1,
                    );
                }
            }

            fn to_le(self, out: &mut Vec<u8>) {
                out.extend_from_slice(&self.to_le_bytes());
            }

            fn from_le(bytes: &[u8]) -> Self {
                let mut buf = [0u8; std::mem::size_of::<$ty>()];
                buf.copy_from_slice(bytes);
                <$ty>::from_le_bytes(buf)
            }
        }
    };
}

impl_real!(f32, matrixmultiply::sgemm, "f32");
impl_real!(f64, matrixmultiply::dgemm, "f64");

/// A trainable array with its accumulated gradient.
#[derive(Clone, Debug, PartialEq)]
pub struct Param<S> {
    pub shape: Vec<usize>,
    pub value: Vec<S>,
    pub grad: Vec<S>,
}

impl<S: Real> Param<S> {
    pub fn zeros(shape: &[usize]) -> Self {
        let len = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            value: vec![S::zero(); len],
            grad: vec![S::zero(); len],
        }
    }

    pub fn uniform<R: Rng + ?Sized>(shape: &[usize], bound: f64, rng: &mut R) -> Self {
        let mut p = Self::zeros(shape);
        for v in &mut p.value {
            *v = S::lit(rng.random_range(-bound..=bound));
        }
        p
    }

    pub fn len(&self) -> usize {
        self.value.len()
    }

    pub fn is_empty(&self) -> bool {
        self.value.is_empty()
    }

    pub fn zero_grad(&mut self) {
        self.grad.iter_mut().for_each(|g| *g = S::zero());
    }
}

pub(crate) fn join(prefix: &str, name: &str) -> String {
    if prefix.is_empty() {
        name.to_string()
    } else {
        format!("{prefix}.{name}")
    }
}

/// Anything owning named parameters. Names are dotted module paths.
pub trait HasParams<S: Real> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param<S>));
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param<S>));

    fn zero_grad(&mut self) {
        self.visit_mut("", &mut |_, p| p.zero_grad());
    }

    fn num_params(&self) -> usize {
        let mut n = 0;
        self.visit("", &mut |_, p| n += p.len());
        n
    }

    fn param_names(&self) -> Vec<String> {
        let mut names = Vec::new();
        self.visit("", &mut |name, _| names.push(name.to_string()));
        names
    }
}

/// Fully connected layer `y = x Wᵀ + b` over row-major batches.
#[derive(Clone, Debug, PartialEq)]
pub struct Linear<S> {
    pub weight: Param<S>,
    pub bias: Option<Param<S>>,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl<S: Real> Linear<S> {
    pub fn new<R: Rng + ?Sized>(in_dim: usize, out_dim: usize, bias: bool, rng: &mut R) -> Self {
        let bound = 1.0 / (in_dim as f64).sqrt();
        Self {
            weight: Param::uniform(&[out_dim, in_dim], bound, rng),
            bias: bias.then(|| Param::uniform(&[out_dim], bound, rng)),
            in_dim,
            out_dim,
        }
    }

    pub fn forward(&self, x: &[S], n: usize) -> Vec<S> {
        debug_assert_eq!(x.len(), n * self.in_dim);
        let mut y = vec![S::zero(); n * self.out_dim];
        if let Some(b) = &self.bias {
            for row in y.chunks_exact_mut(self.out_dim) {
                row.copy_from_slice(&b.value);
            }
        }
        S::gemm(
            n,
            self.in_dim,
            self.out_dim,
            S::one(),
            x,
            false,
            &self.weight.value,
            true,
            S::one(),
            &mut y,
        );
        y
    }

    /// Accumulates parameter gradients and returns `dL/dx`.
    pub fn backward(&mut self, x: &[S], dy: &[S], n: usize) -> Vec<S> {
        debug_assert_eq!(dy.len(), n * self.out_dim);
        S::gemm(
            self.out_dim,
            n,
            self.in_dim,
            S::one(),
            dy,
            true,
            x,
            false,
            S::one(),
            &mut self.weight.grad,
        );
        if let Some(b) = &mut self.bias {
            for row in dy.chunks_exact(self.out_dim) {
                for (g, d) in b.grad.iter_mut().zip(row) {
                    *g += *d;
                }
            }
        }
        let mut dx = vec![S::zero(); n * self.in_dim];
        S::gemm(
            n,
            self.out_dim,
            self.in_dim,
            S::one(),
            dy,
            false,
            &self.weight.value,
            false,
            S::zero(),
            &mut dx,
        );
        dx
    }
}

impl<S: Real> HasParams<S> for Linear<S> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param<S>)) {
        f(&join(prefix, "weight"), &self.weight);
        if let Some(b) = &self.bias {
            f(&join(prefix, "bias"), b);
        }
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param<S>)) {
        f(&join(prefix, "weight"), &mut self.weight);
        if let Some(b) = &mut self.bias {
            f(&join(prefix, "bias"), b);
        }
    }
}

/// Extent of a `[C][N][T][H][W]` activation, channel count excluded.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Extent {
    pub n: usize,
    pub t: usize,
    pub h: usize,
    pub w: usize,
}

impl Extent {
    pub fn positions(&self) -> usize {
        self.n * self.t * self.h * self.w
    }

    pub fn per_sample(&self) -> usize {
        self.t * self.h * self.w
    }
}

/// Output positions `lo..hi` whose input index `o * stride + k - pad` lies in `0..len`.
fn valid_outputs(len: usize, out: usize, stride: usize, k: usize, pad: usize) -> (usize, usize) {
    let lo = pad.saturating_sub(k).div_ceil(stride);
    let hi = if len + pad > k { (len + pad - k).div_ceil(stride).min(out) } else { 0 };
    (lo.min(hi), hi)
}

/// 3D convolution over `[C][N][T][H][W]` activations via im2col + GEMM.
#[derive(Clone, Debug, PartialEq)]
pub struct Conv3d<S> {
    pub weight: Param<S>,
    pub bias: Param<S>,
    pub cin: usize,
    pub cout: usize,
    pub kernel: [usize; 3],
    pub stride: [usize; 3],
    pub padding: [usize; 3],
}

impl<S: Real> Conv3d<S> {
    pub fn new<R: Rng + ?Sized>(
        cin: usize,
        cout: usize,
        kernel: [usize; 3],
        stride: [usize; 3],
        padding: [usize; 3],
        rng: &mut R,
    ) -> Self {
        let fan_in = cin * kernel.iter().product::<usize>();
        // He-uniform for ReLU networks
        let bound = (6.0 / fan_in as f64).sqrt();
        Self {
            weight: Param::uniform(&[cout, fan_in], bound, rng),
            bias: Param::zeros(&[cout]),
            cin,
            cout,
            kernel,
            stride,
            padding,
        }
    }

    pub fn zero_init(&mut self) {
        self.weight.value.iter_mut().for_each(|v| *v = S::zero());
    }

    fn patch_len(&self) -> usize {
        self.cin * self.kernel.iter().product::<usize>()
    }

    pub fn out_extent(&self, e: Extent) -> Option<Extent> {
        let dim = |len: usize, i: usize| {
            let padded = len + 2 * self.padding[i];
            (padded >= self.kernel[i]).then(|| (padded - self.kernel[i]) / self.stride[i] + 1)
        };
        Some(Extent {
            n: e.n,
            t: dim(e.t, 0)?,
            h: dim(e.h, 1)?,
            w: dim(e.w, 2)?,
        })
    }

    fn im2col(&self, x: &[S], e: Extent, o: Extent) -> Vec<S> {
        let [kt, kh, kw] = self.kernel;
        let [st, sh, sw] = self.stride;
        let [pt, ph, pw] = self.padding;
        let cols_n = o.positions();
        let chan = e.positions();
        let mut cols = vec![S::zero(); self.patch_len() * cols_n];
        let mut row = 0;
        for c in 0..self.cin {
            let xc = &x[c * chan..(c + 1) * chan];
            for a in 0..kt {
                for b in 0..kh {
                    for d in 0..kw {
                        let (lo, hi_w) = valid_outputs(e.w, o.w, sw, d, pw);
                        let dst = &mut cols[row * cols_n..(row + 1) * cols_n];
                        let mut p = 0;
                        for n in 0..o.n {
                            for to in 0..o.t {
                                let ti = (to * st + a) as isize - pt as isize;
                                if ti < 0 || ti >= e.t as isize {
                                    p += o.h * o.w;
                                    continue;
                                }
                                let base_t = (n * e.t + ti as usize) * e.h;
                                for ho in 0..o.h {
                                    let hi = (ho * sh + b) as isize - ph as isize;
                                    if hi < 0 || hi >= e.h as isize {
                                        p += o.w;
                                        continue;
                                    }
                                    let row_in = &xc[(base_t + hi as usize) * e.w..][..e.w];
                                    for wo in lo..hi_w {
                                        dst[p + wo] = row_in[wo * sw + d - pw];
                                    }
                                    p += o.w;
                                }
                            }
                        }
                        row += 1;
                    }
                }
            }
        }
        cols
    }

    fn col2im(&self, cols: &[S], e: Extent, o: Extent) -> Vec<S> {
        let [kt, kh, kw] = self.kernel;
        let [st, sh, sw] = self.stride;
        let [pt, ph, pw] = self.padding;
        let cols_n = o.positions();
        let chan = e.positions();
        let mut dx = vec![S::zero(); self.cin * chan];
        let mut row = 0;
        for c in 0..self.cin {
            let dxc = &mut dx[c * chan..(c + 1) * chan];
            for a in 0..kt {
                for b in 0..kh {
                    for d in 0..kw {
                        let (lo, hi_w) = valid_outputs(e.w, o.w, sw, d, pw);
                        let src = &cols[row * cols_n..(row + 1) * cols_n];
                        let mut p = 0;
                        for n in 0..o.n {
                            for to in 0..o.t {
                                let ti = (to * st + a) as isize - pt as isize;
                                if ti < 0 || ti >= e.t as isize {
                                    p += o.h * o.w;
                                    continue;
                                }
                                let base_t = (n * e.t + ti as usize) * e.h;
                                for ho in 0..o.h {
                                    let hi = (ho * sh + b) as isize - ph as isize;
                                    if hi < 0 || hi >= e.h as isize {
                                        p += o.w;
                                        continue;
                                    }
                                    let row_in = &mut dxc[(base_t + hi as usize) * e.w..][..e.w];
                                    for wo in lo..hi_w {
                                        row_in[wo * sw + d - pw] += src[p + wo];
                                    }
                                    p += o.w;
                                }
                            }
                        }
                        row += 1;
                    }
                }
            }
        }
        dx
    }

    /// Returns the output and the im2col buffer needed by [`Conv3d::backward`].
    pub fn forward(&self, x: &[S], e: Extent) -> (Vec<S>, Vec<S>, Extent) {
        let o = self
            .out_extent(e)
            .expect("convolution kernel larger than padded input");
        debug_assert_eq!(x.len(), self.cin * e.positions());
        let cols = self.im2col(x, e, o);
        let p = o.positions();
        let mut y = vec![S::zero(); self.cout * p];
        for (row, b) in y.chunks_exact_mut(p).zip(&self.bias.value) {
            row.iter_mut().for_each(|v| *v = *b);
        }
        S::gemm(
            self.cout,
            self.patch_len(),
            p,
            S::one(),
            &self.weight.value,
            false,
            &cols,
            false,
            S::one(),
            &mut y,
        );
        (y, cols, o)
    }

    pub fn backward(&mut self, cols: &[S], e: Extent, o: Extent, dy: &[S], need_dx: bool) -> Option<Vec<S>> {
        let p = o.positions();
        let k = self.patch_len();
        S::gemm(
            self.cout,
            p,
            k,
            S::one(),
            dy,
            false,
            cols,
            true,
            S::one(),
            &mut self.weight.grad,
        );
        for (g, row) in self.bias.grad.iter_mut().zip(dy.chunks_exact(p)) {
            *g += row.iter().copied().sum::<S>();
        }
        if !need_dx {
            return None;
        }
        let mut dcols = vec![S::zero(); k * p];
        S::gemm(
            k,
            self.cout,
            p,
            S::one(),
            &self.weight.value,
            true,
            dy,
            false,
            S::zero(),
            &mut dcols,
        );
        Some(self.col2im(&dcols, e, o))
    }
}

impl<S: Real> HasParams<S> for Conv3d<S> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param<S>)) {
        f(&join(prefix, "weight"), &self.weight);
        f(&join(prefix, "bias"), &self.bias);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param<S>)) {
        f(&join(prefix, "weight"), &mut self.weight);
        f(&join(prefix, "bias"), &mut self.bias);
    }
}

/// Group normalization over `[C][N][T][H][W]` activations with a per-channel affine.
///
/// Statistics are taken per sample, so clips in a batch never influence each other.
#[derive(Clone, Debug, PartialEq)]
pub struct GroupNorm<S> {
    pub gamma: Param<S>,
    pub beta: Param<S>,
    pub channels: usize,
    pub groups: usize,
    pub eps: f64,
}

/// Normalized activations and inverse deviations kept for the backward pass.
pub struct GroupNormTrace<S> {
    xhat: Vec<S>,
    /// `[N][groups]`
    inv_std: Vec<S>,
}

impl<S: Real> GroupNorm<S> {
    pub fn new(channels: usize, groups: usize) -> Self {
        assert!(groups > 0 && channels % groups == 0, "{channels} channels in {groups} groups");
        let mut gamma = Param::zeros(&[channels]);
        gamma.value.iter_mut().for_each(|v| *v = S::one());
        Self {
            gamma,
            beta: Param::zeros(&[channels]),
            channels,
            groups,
            eps: 1e-5,
        }
    }

    pub fn zero_init(&mut self) {
        self.gamma.value.iter_mut().for_each(|v| *v = S::zero());
    }

    fn group_ranges(&self, e: Extent, n: usize, g: usize) -> impl Iterator<Item = std::ops::Range<usize>> {
        let per = e.per_sample();
        let chan = e.positions();
        let cpg = self.channels / self.groups;
        (g * cpg..(g + 1) * cpg).map(move |c| {
            let start = c * chan + n * per;
            start..start + per
        })
    }

    pub fn forward(&self, x: &[S], e: Extent) -> (Vec<S>, GroupNormTrace<S>) {
        debug_assert_eq!(x.len(), self.channels * e.positions());
        let count = S::lit(((self.channels / self.groups) * e.per_sample()) as f64);
        let mut xhat = vec![S::zero(); x.len()];
        let mut inv_std = Vec::with_capacity(e.n * self.groups);
        for n in 0..e.n {
            for g in 0..self.groups {
                let mean = self.group_ranges(e, n, g).map(|r| x[r].iter().copied().sum::<S>()).sum::<S>() / count;
                let var = self
                    .group_ranges(e, n, g)
                    .map(|r| x[r].iter().map(|v| (*v - mean) * (*v - mean)).sum::<S>())
                    .sum::<S>()
                    / count;
                let is = S::one() / (var + S::lit(self.eps)).sqrt();
                for r in self.group_ranges(e, n, g) {
                    for (o, v) in xhat[r.clone()].iter_mut().zip(&x[r]) {
                        *o = (*v - mean) * is;
                    }
                }
                inv_std.push(is);
            }
        }
        let chan = e.positions();
        let mut y = xhat.clone();
        for (c, row) in y.chunks_exact_mut(chan).enumerate() {
            let (gm, bt) = (self.gamma.value[c], self.beta.value[c]);
            row.iter_mut().for_each(|v| *v = *v * gm + bt);
        }
        (y, GroupNormTrace { xhat, inv_std })
    }

    /// Accumulates `gamma`/`beta` gradients and returns `dL/dx`.
    pub fn backward(&mut self, trace: &GroupNormTrace<S>, dy: &[S], e: Extent) -> Vec<S> {
        let chan = e.positions();
        let mut dxhat = vec![S::zero(); dy.len()];
        for c in 0..self.channels {
            let r = c * chan..(c + 1) * chan;
            let gm = self.gamma.value[c];
            let mut dg = S::zero();
            let mut db = S::zero();
            for ((d, g), xh) in dxhat[r.clone()].iter_mut().zip(&dy[r.clone()]).zip(&trace.xhat[r]) {
                *d = *g * gm;
                dg += *g * *xh;
                db += *g;
            }
            self.gamma.grad[c] += dg;
            self.beta.grad[c] += db;
        }
        let count = S::lit(((self.channels / self.groups) * e.per_sample()) as f64);
        let mut dx = vec![S::zero(); dy.len()];
        for n in 0..e.n {
            for g in 0..self.groups {
                let mut sum = S::zero();
                let mut dot = S::zero();
                for r in self.group_ranges(e, n, g) {
                    for (d, xh) in dxhat[r.clone()].iter().zip(&trace.xhat[r]) {
                        sum += *d;
                        dot += *d * *xh;
                    }
                }
                let (mean_d, mean_dot) = (sum / count, dot / count);
                let is = trace.inv_std[n * self.groups + g];
                for r in self.group_ranges(e, n, g) {
                    for ((o, d), xh) in dx[r.clone()].iter_mut().zip(&dxhat[r.clone()]).zip(&trace.xhat[r]) {
                        *o = (*d - mean_d - *xh * mean_dot) * is;
                    }
                }
            }
        }
        dx
    }
}

impl<S: Real> HasParams<S> for GroupNorm<S> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param<S>)) {
        f(&join(prefix, "gamma"), &self.gamma);
        f(&join(prefix, "beta"), &self.beta);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param<S>)) {
        f(&join(prefix, "gamma"), &mut self.gamma);
        f(&join(prefix, "beta"), &mut self.beta);
    }
}

pub fn relu_inplace<S: Real>(x: &mut [S]) {
    for v in x {
        if *v < S::zero() {
            *v = S::zero();
        }
    }
}

/// Masks `dy` where the (post-activation) output was not positive.
pub fn relu_backward_inplace<S: Real>(out: &[S], dy: &mut [S]) {
    for (d, o) in dy.iter_mut().zip(out) {
        if *o <= S::zero() {
            *d = S::zero();
        }
    }
}

/// Row-wise ℓ2 normalization. Rows with zero norm map to zero.
pub fn l2_normalize_rows<S: Real>(x: &[S], dim: usize) -> (Vec<S>, Vec<S>) {
    let mut y = x.to_vec();
    let mut norms = Vec::with_capacity(x.len() / dim);
    for row in y.chunks_exact_mut(dim) {
        let norm = row.iter().map(|v| *v * *v).sum::<S>().sqrt();
        norms.push(norm);
        if norm > S::zero() {
            row.iter_mut().for_each(|v| *v = *v / norm);
        }
    }
    (y, norms)
}

/// Backward of [`l2_normalize_rows`]: `dx = (dy − y (y·dy)) / ‖x‖`.
pub fn l2_normalize_rows_backward<S: Real>(y: &[S], norms: &[S], dy: &[S], dim: usize) -> Vec<S> {
    let mut dx = vec![S::zero(); dy.len()];
    for (((dxr, yr), dyr), norm) in dx
        .chunks_exact_mut(dim)
        .zip(y.chunks_exact(dim))
        .zip(dy.chunks_exact(dim))
        .zip(norms)
    {
        if *norm <= S::zero() {
            continue;
        }
        let dot: S = yr.iter().zip(dyr).map(|(a, b)| *a * *b).sum();
        for ((d, yv), g) in dxr.iter_mut().zip(yr).zip(dyr) {
            *d = (*g - *yv * dot) / *norm;
        }
    }
    dx
}

/// Numerically stable `log Σ exp(x)`.
pub fn log_sum_exp<S: Real>(x: &[S]) -> S {
    let max = x.iter().copied().fold(S::neg_infinity(), S::max);
    if max == S::neg_infinity() || max == S::infinity() {
        return max;
    }
    max + x.iter().map(|v| (*v - max).exp()).sum::<S>().ln()
}

pub fn softmax<S: Real>(x: &[S]) -> Vec<S> {
    let lse = log_sum_exp(x);
    x.iter().map(|v| (*v - lse).exp()).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn naive_conv(conv: &Conv3d<f64>, x: &[f64], e: Extent) -> Vec<f64> {
        let o = conv.out_extent(e).unwrap();
        let [kt, kh, kw] = conv.kernel;
        let mut y = vec![0.0; conv.cout * o.positions()];
        for co in 0..conv.cout {
            for n in 0..o.n {
                for to in 0..o.t {
                    for ho in 0..o.h {
                        for wo in 0..o.w {
                            let mut acc = conv.bias.value[co];
                            for ci in 0..conv.cin {
                                for a in 0..kt {
                                    for b in 0..kh {
                                        for d in 0..kw {
                                            let ti = (to * conv.stride[0] + a) as isize - conv.padding[0] as isize;
                                            let hi = (ho * conv.stride[1] + b) as isize - conv.padding[1] as isize;
                                            let wi = (wo * conv.stride[2] + d) as isize - conv.padding[2] as isize;
                                            if ti < 0 || hi < 0 || wi < 0 {
                                                continue;
                                            }
                                            let (ti, hi, wi) = (ti as usize, hi as usize, wi as usize);
                                            if ti >= e.t || hi >= e.h || wi >= e.w {
                                                continue;
                                            }
                                            let xi = ci * e.positions() + ((n * e.t + ti) * e.h + hi) * e.w + wi;
                                            let wix = co * conv.weight.shape[1] + ((ci * kt + a) * kh + b) * kw + d;
                                            acc += conv.weight.value[wix] * x[xi];
                                        }
                                    }
                                }
                            }
                            y[co * o.positions() + ((n * o.t + to) * o.h + ho) * o.w + wo] = acc;
                        }
                    }
                }
            }
        }
        y
    }

    #[test]
    fn conv_matches_direct_summation() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut conv = Conv3d::<f64>::new(2, 3, [3, 3, 3], [1, 2, 2], [1, 1, 1], &mut rng);
        conv.bias = Param::uniform(&[3], 0.5, &mut rng);
        let e = Extent { n: 2, t: 4, h: 5, w: 6 };
        let x: Vec<f64> = (0..2 * e.positions()).map(|_| rng.random_range(-1.0..1.0)).collect();
        let (y, _, _) = conv.forward(&x, e);
        let reference = naive_conv(&conv, &x, e);
        for (a, b) in y.iter().zip(&reference) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    proptest::proptest! {
        #[test]
        fn valid_outputs_matches_enumeration(len in 1usize..12, stride in 1usize..4, k in 0usize..5, pad in 0usize..3) {
            let out = (len + 2 * pad).saturating_sub(k) / stride + 1;
            let valid: Vec<usize> = (0..out)
                .filter(|o| (o * stride + k).checked_sub(pad).is_some_and(|i| i < len))
                .collect();
            let (lo, hi) = valid_outputs(len, out, stride, k, pad);
            proptest::prop_assert_eq!(valid, (lo..hi).collect::<Vec<_>>());
        }
    }

    #[test]
    fn conv_backward_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut conv = Conv3d::<f64>::new(2, 2, [2, 3, 3], [1, 1, 2], [0, 1, 1], &mut rng);
        let e = Extent { n: 2, t: 3, h: 4, w: 4 };
        let x: Vec<f64> = (0..2 * e.positions()).map(|_| rng.random_range(-1.0..1.0)).collect();
        // loss = Σ y² / 2
        let (y, cols, o) = conv.forward(&x, e);
        let dx = conv.backward(&cols, e, o, &y, true).unwrap();
        let loss = |c: &Conv3d<f64>, x: &[f64]| c.forward(x, e).0.iter().map(|v| v * v).sum::<f64>() / 2.0;
        let h = 1e-5;
        for i in [0, 7, 19, 40] {
            let mut xp = x.clone();
            xp[i] += h;
            let mut xm = x.clone();
            xm[i] -= h;
            let fd = (loss(&conv, &xp) - loss(&conv, &xm)) / (2.0 * h);
            assert!((fd - dx[i]).abs() < 1e-6 * (1.0 + fd.abs()), "dx[{i}]: {fd} vs {}", dx[i]);
        }
        for i in [0, 5, 17, 35] {
            let mut cp = conv.clone();
            cp.weight.value[i] += h;
            let mut cm = conv.clone();
            cm.weight.value[i] -= h;
            let fd = (loss(&cp, &x) - loss(&cm, &x)) / (2.0 * h);
            let g = conv.weight.grad[i];
            assert!((fd - g).abs() < 1e-6 * (1.0 + fd.abs()), "dW[{i}]: {fd} vs {g}");
        }
    }

    #[test]
    fn linear_backward_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let mut lin = Linear::<f64>::new(4, 3, true, &mut rng);
        let x: Vec<f64> = (0..8).map(|_| rng.random_range(-1.0..1.0)).collect();
        let y = lin.forward(&x, 2);
        let dx = lin.backward(&x, &y, 2);
        let loss = |l: &Linear<f64>, x: &[f64]| l.forward(x, 2).iter().map(|v| v * v).sum::<f64>() / 2.0;
        let h = 1e-6;
        for i in 0..8 {
            let mut xp = x.clone();
            xp[i] += h;
            let mut xm = x.clone();
            xm[i] -= h;
            let fd = (loss(&lin, &xp) - loss(&lin, &xm)) / (2.0 * h);
            assert!((fd - dx[i]).abs() < 1e-7);
        }
        let b = lin.bias.as_ref().unwrap();
        let mut lp = lin.clone();
        lp.bias.as_mut().unwrap().value[1] += h;
        let mut lm = lin.clone();
        lm.bias.as_mut().unwrap().value[1] -= h;
        let fd = (loss(&lp, &x) - loss(&lm, &x)) / (2.0 * h);
        assert!((fd - b.grad[1]).abs() < 1e-7);
    }

    #[test]
    fn group_norm_backward_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mut gn = GroupNorm::<f64>::new(4, 2);
        gn.gamma = Param::uniform(&[4], 1.5, &mut rng);
        gn.beta = Param::uniform(&[4], 0.5, &mut rng);
        let e = Extent { n: 2, t: 2, h: 2, w: 3 };
        let x: Vec<f64> = (0..4 * e.positions()).map(|_| rng.random_range(-2.0..2.0)).collect();
        let w: Vec<f64> = (0..x.len()).map(|_| rng.random_range(-1.0..1.0)).collect();
        let loss = |g: &GroupNorm<f64>, x: &[f64]| g.forward(x, e).0.iter().zip(&w).map(|(a, b)| a * b).sum::<f64>();
        let (_, trace) = gn.forward(&x, e);
        let dx = gn.backward(&trace, &w, e);
        let h = 1e-5;
        for i in 0..x.len() {
            let mut xp = x.clone();
            xp[i] += h;
            let mut xm = x.clone();
            xm[i] -= h;
            let fd = (loss(&gn, &xp) - loss(&gn, &xm)) / (2.0 * h);
            assert!((fd - dx[i]).abs() < 1e-6 * (1.0 + fd.abs()), "dx[{i}]: {fd} vs {}", dx[i]);
        }
        for c in 0..4 {
            let mut p = gn.clone();
            p.gamma.value[c] += h;
            let mut m = gn.clone();
            m.gamma.value[c] -= h;
            let fd = (loss(&p, &x) - loss(&m, &x)) / (2.0 * h);
            assert!((fd - gn.gamma.grad[c]).abs() < 1e-6 * (1.0 + fd.abs()));
        }
    }

    #[test]
    fn group_norm_output_is_standardized_per_sample() {
        let gn = GroupNorm::<f64>::new(2, 1);
        let e = Extent { n: 2, t: 1, h: 2, w: 2 };
        let x: Vec<f64> = (0..16).map(|i| (i * i) as f64).collect();
        let (y, _) = gn.forward(&x, e);
        for n in 0..2 {
            let vals: Vec<f64> = (0..2).flat_map(|c| y[c * 8 + n * 4..c * 8 + n * 4 + 4].to_vec()).collect();
            let mean = vals.iter().sum::<f64>() / 8.0;
            let var = vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 8.0;
            assert!(mean.abs() < 1e-12 && (var - 1.0).abs() < 1e-3);
        }
    }

    #[test]
    fn log_sum_exp_is_stable() {
        let big = [1000.0f64, 1000.0];
        assert!((log_sum_exp(&big) - (1000.0 + 2f64.ln())).abs() < 1e-12);
        let p = softmax(&[1.0f64, 2.0, 3.0]);
        assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-15);
    }

    #[test]
    fn normalize_zero_row_is_zero() {
        let (y, n) = l2_normalize_rows(&[0.0f64, 0.0, 3.0, 4.0], 2);
        assert_eq!(y, vec![0.0, 0.0, 0.6, 0.8]);
        assert_eq!(n, vec![0.0, 5.0]);
    }
}
