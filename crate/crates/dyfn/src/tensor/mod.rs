//! Dense f64 tensors with a small reverse-mode gradient tape.
//!
//! Everything downstream (feature modulation, the recurrent stabilizer, the
//! training losses) is built from the primitives here. Tensors are immutable
//! after construction and cheap to clone; a [`tape::GradTape`] is confined to
//! a single thread.

pub mod gradcheck;
mod ntf;
pub mod tape;

pub use ntf::{read_tensor, read_tensor_named, write_tensor};

use std::fmt;
use std::sync::Arc;

use thiserror::Error;

/// Errors from tensor construction, arithmetic, and the NTF container format.
#[derive(Debug, Error)]
pub enum TensorError {
    #[error("shape {shape:?} has {expected} elements but {got} were provided")]
    DataLength {
        shape: Vec<usize>,
        expected: usize,
        got: usize,
    },
    #[error("shape mismatch: {left:?} vs {right:?}")]
    ShapeMismatch { left: Vec<usize>, right: Vec<usize> },
    #[error("expected rank-{want} tensor, got shape {got:?}")]
    Rank { want: usize, got: Vec<usize> },
    #[error("conv2d channel mismatch: input has {input} channels, kernel expects {kernel}")]
    ChannelMismatch { input: usize, kernel: usize },
    #[error("conv2d kernel size {0} must be odd")]
    EvenKernel(usize),
    #[error("channel_stats needs at least 2 spatial elements, got {0}")]
    TooFewElements(usize),
    #[error("non-finite value at flat index {0}")]
    NonFinite(usize),
    #[error("bad magic: expected NTF1")]
    BadMagic,
    #[error("truncated container: {0}")]
    Truncated(&'static str),
    #[error("malformed header: {0}")]
    MalformedHeader(String),
    #[error("unsupported dtype {0:?} (only f32)")]
    UnsupportedDtype(String),
    #[error("payload is {got} bytes but shape {shape:?} requires {expected}")]
    PayloadSize {
        shape: Vec<usize>,
        expected: usize,
        got: usize,
    },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, TensorError>;

/// Immutable dense tensor: row-major f64 values plus a shape.
///
/// Cloning shares the underlying buffer. Scalars use the empty shape `[]`
/// (one element).
#[derive(Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Arc<[f64]>,
}

impl fmt::Debug for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Tensor{:?}", self.shape)?;
        if self.data.len() <= 8 {
            write!(f, "{:?}", &self.data[..])
        } else {
            write!(f, "[{} values]", self.data.len())
        }
    }
}

pub fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let expected = numel(&shape);
        if expected != data.len() {
            return Err(TensorError::DataLength {
                shape,
                expected,
                got: data.len(),
            });
        }
        Ok(Self {
            shape,
            data: data.into(),
        })
    }

    pub fn scalar(v: f64) -> Self {
        Self {
            shape: vec![],
            data: vec![v].into(),
        }
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, 0.0)
    }

    pub fn full(shape: &[usize], v: f64) -> Self {
        Self {
            shape: shape.to_vec(),
            data: vec![v; numel(shape)].into(),
        }
    }

    pub fn from_fn(shape: &[usize], mut f: impl FnMut(usize) -> f64) -> Self {
        let n = numel(shape);
        let data: Vec<f64> = (0..n).map(|i| f(i)).collect();
        Self {
            shape: shape.to_vec(),
            data: data.into(),
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// Value of a scalar or single-element tensor.
    pub fn item(&self) -> f64 {
        debug_assert_eq!(self.data.len(), 1, "item() on non-scalar {:?}", self.shape);
        self.data[0]
    }

    pub fn is_scalar(&self) -> bool {
        self.data.len() == 1
    }

    pub fn validate_finite(&self) -> Result<()> {
        for (i, v) in self.data.iter().enumerate() {
            if !v.is_finite() {
                return Err(TensorError::NonFinite(i));
            }
        }
        Ok(())
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Tensor {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect::<Vec<_>>().into(),
        }
    }

    /// Elementwise combination. `other` may be a single-element tensor, which
    /// broadcasts over all of `self`.
    pub fn zip(&self, other: &Tensor, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
        if other.is_scalar() && !self.is_scalar() {
            let b = other.item();
            return Ok(self.map(|a| f(a, b)));
        }
        if self.shape != other.shape {
            return Err(TensorError::ShapeMismatch {
                left: self.shape.clone(),
                right: other.shape.clone(),
            });
        }
        let data: Vec<f64> = self
            .data
            .iter()
            .zip(other.data.iter())
            .map(|(&a, &b)| f(a, b))
            .collect();
        Ok(Tensor {
            shape: self.shape.clone(),
            data: data.into(),
        })
    }

    pub fn add(&self, other: &Tensor) -> Result<Tensor> {
        self.zip(other, |a, b| a + b)
    }

    pub fn sub(&self, other: &Tensor) -> Result<Tensor> {
        self.zip(other, |a, b| a - b)
    }

    pub fn mul(&self, other: &Tensor) -> Result<Tensor> {
        self.zip(other, |a, b| a * b)
    }

    pub fn div(&self, other: &Tensor) -> Result<Tensor> {
        self.zip(other, |a, b| a / b)
    }

    pub fn scale(&self, s: f64) -> Tensor {
        self.map(|v| v * s)
    }

    pub fn add_scalar(&self, s: f64) -> Tensor {
        self.map(|v| v + s)
    }

    /// Sum of all elements, accumulated in flat index order.
    pub fn sum(&self) -> f64 {
        let mut acc = 0.0;
        for &v in self.data.iter() {
            acc += v;
        }
        acc
    }

    pub fn mean(&self) -> f64 {
        self.sum() / self.data.len() as f64
    }

    fn dims3(&self) -> Result<(usize, usize, usize)> {
        match self.shape[..] {
            [c, h, w] => Ok((c, h, w)),
            _ => Err(TensorError::Rank {
                want: 3,
                got: self.shape.clone(),
            }),
        }
    }

    /// Per-channel mean and population standard deviation over the spatial
    /// grid of a `C x H x W` tensor. Two passes, accumulated in row-major
    /// order.
    pub fn channel_stats(&self) -> Result<(Tensor, Tensor)> {
        let (c, h, w) = self.dims3()?;
        let plane = h * w;
        if plane < 1 {
            return Err(TensorError::TooFewElements(plane));
        }
        let mut mu = vec![0.0; c];
        let mut sigma = vec![0.0; c];
        for ch in 0..c {
            let slice = &self.data[ch * plane..(ch + 1) * plane];
            let mut acc = 0.0;
            for &v in slice {
                acc += v;
            }
            let m = acc / plane as f64;
            let mut var = 0.0;
            for &v in slice {
                let d = v - m;
                var += d * d;
            }
            mu[ch] = m;
            sigma[ch] = (var / plane as f64).sqrt();
        }
        Ok((
            Tensor::new(vec![c], mu).unwrap(),
            Tensor::new(vec![c], sigma).unwrap(),
        ))
    }

    /// Zero-padded same-size cross-correlation of a `C_in x H x W` input with
    /// a `C_out x C_in x k x k` kernel (k odd).
    ///
    /// Output position is the outer loop, kernel taps the inner one; the
    /// accumulation order is fixed so repeated runs are bit-identical.
    pub fn conv2d(&self, kernel: &Tensor) -> Result<Tensor> {
        let (c_in, h, w) = self.dims3()?;
        let (c_out, kc, kh, kw) = match kernel.shape[..] {
            [o, c, a, b] => (o, c, a, b),
            _ => {
                return Err(TensorError::Rank {
                    want: 4,
                    got: kernel.shape.clone(),
                })
            }
        };
        if kc != c_in {
            return Err(TensorError::ChannelMismatch {
                input: c_in,
                kernel: kc,
            });
        }
        if kh != kw || kh % 2 == 0 {
            return Err(TensorError::EvenKernel(kh.max(kw)));
        }
        let k = kh;
        let pad = k / 2;
        let plane = h * w;
        let mut out = vec![0.0; c_out * plane];
        for o in 0..c_out {
            for y in 0..h {
                for x in 0..w {
                    let mut acc = 0.0;
                    for c in 0..c_in {
                        for dy in 0..k {
                            let iy = y + dy;
                            if iy < pad || iy - pad >= h {
                                continue;
                            }
                            let iy = iy - pad;
                            for dx in 0..k {
                                let ix = x + dx;
                                if ix < pad || ix - pad >= w {
                                    continue;
                                }
                                let ix = ix - pad;
                                acc += self.data[c * plane + iy * w + ix]
                                    * kernel.data[((o * c_in + c) * k + dy) * k + dx];
                            }
                        }
                    }
                    out[o * plane + y * w + x] = acc;
                }
            }
        }
        Tensor::new(vec![c_out, h, w], out)
    }

    /// Gradient of [`Tensor::conv2d`] with respect to the input.
    pub(crate) fn conv2d_input_grad(
        out_grad: &Tensor,
        kernel: &Tensor,
        input_shape: &[usize],
    ) -> Tensor {
        let (c_out, h, w) = out_grad.dims3().expect("conv grad shape");
        let (ko, c_in, k, _) = match kernel.shape[..] {
            [o, c, a, b] => (o, c, a, b),
            _ => unreachable!(),
        };
        debug_assert_eq!(ko, c_out);
        let pad = k / 2;
        let plane = h * w;
        let mut gin = vec![0.0; c_in * plane];
        for o in 0..c_out {
            for y in 0..h {
                for x in 0..w {
                    let g = out_grad.data[o * plane + y * w + x];
                    for c in 0..c_in {
                        for dy in 0..k {
                            let iy = y + dy;
                            if iy < pad || iy - pad >= h {
                                continue;
                            }
                            let iy = iy - pad;
                            for dx in 0..k {
                                let ix = x + dx;
                                if ix < pad || ix - pad >= w {
                                    continue;
                                }
                                let ix = ix - pad;
                                gin[c * plane + iy * w + ix] +=
                                    g * kernel.data[((o * c_in + c) * k + dy) * k + dx];
                            }
                        }
                    }
                }
            }
        }
        Tensor::new(input_shape.to_vec(), gin).unwrap()
    }

    /// Gradient of [`Tensor::conv2d`] with respect to the kernel.
    pub(crate) fn conv2d_kernel_grad(
        out_grad: &Tensor,
        input: &Tensor,
        kernel_shape: &[usize],
    ) -> Tensor {
        let (c_out, h, w) = out_grad.dims3().expect("conv grad shape");
        let (c_in, k) = (kernel_shape[1], kernel_shape[2]);
        let pad = k / 2;
        let plane = h * w;
        let mut gker = vec![0.0; numel(kernel_shape)];
        for o in 0..c_out {
            for y in 0..h {
                for x in 0..w {
                    let g = out_grad.data[o * plane + y * w + x];
                    for c in 0..c_in {
                        for dy in 0..k {
                            let iy = y + dy;
                            if iy < pad || iy - pad >= h {
                                continue;
                            }
                            let iy = iy - pad;
                            for dx in 0..k {
                                let ix = x + dx;
                                if ix < pad || ix - pad >= w {
                                    continue;
                                }
                                let ix = ix - pad;
                                gker[((o * c_in + c) * k + dy) * k + dx] +=
                                    g * input.data[c * plane + iy * w + ix];
                            }
                        }
                    }
                }
            }
        }
        Tensor::new(kernel_shape.to_vec(), gker).unwrap()
    }

    /// Stack two `C x H x W` tensors along the channel axis.
    pub fn concat_channels(&self, other: &Tensor) -> Result<Tensor> {
        let (c0, h, w) = self.dims3()?;
        let (c1, h1, w1) = other.dims3()?;
        if (h, w) != (h1, w1) {
            return Err(TensorError::ShapeMismatch {
                left: self.shape.clone(),
                right: other.shape.clone(),
            });
        }
        let mut data = Vec::with_capacity((c0 + c1) * h * w);
        data.extend_from_slice(&self.data);
        data.extend_from_slice(&other.data);
        Tensor::new(vec![c0 + c1, h, w], data)
    }

    /// Channels `start..end` of a `C x H x W` tensor.
    pub fn slice_channels(&self, start: usize, end: usize) -> Result<Tensor> {
        let (c, h, w) = self.dims3()?;
        assert!(start < end && end <= c, "channel slice {start}..{end} of {c}");
        let plane = h * w;
        Tensor::new(
            vec![end - start, h, w],
            self.data[start * plane..end * plane].to_vec(),
        )
    }

    /// Translate spatially by (dy, dx), filling vacated cells with zero.
    /// `out[c, y, x] = in[c, y + dy, x + dx]` where in range.
    pub fn shift_spatial(&self, dy: i64, dx: i64) -> Result<Tensor> {
        let (c, h, w) = self.dims3()?;
        let plane = h * w;
        let mut out = vec![0.0; c * plane];
        for ch in 0..c {
            for y in 0..h {
                let sy = y as i64 + dy;
                if sy < 0 || sy >= h as i64 {
                    continue;
                }
                for x in 0..w {
                    let sx = x as i64 + dx;
                    if sx < 0 || sx >= w as i64 {
                        continue;
                    }
                    out[ch * plane + y * w + x] =
                        self.data[ch * plane + sy as usize * w + sx as usize];
                }
            }
        }
        Tensor::new(vec![c, h, w], out)
    }

    /// Broadcast a length-C vector to `C x H x W`.
    pub fn broadcast_channels(&self, h: usize, w: usize) -> Result<Tensor> {
        match self.shape[..] {
            [c] => {
                let mut out = Vec::with_capacity(c * h * w);
                for ch in 0..c {
                    out.extend(std::iter::repeat(self.data[ch]).take(h * w));
                }
                Tensor::new(vec![c, h, w], out)
            }
            _ => Err(TensorError::Rank {
                want: 1,
                got: self.shape.clone(),
            }),
        }
    }

    /// Per-channel spatial sum of a `C x H x W` tensor, row-major order.
    pub fn sum_spatial(&self) -> Result<Tensor> {
        let (c, h, w) = self.dims3()?;
        let plane = h * w;
        let mut out = vec![0.0; c];
        for ch in 0..c {
            let mut acc = 0.0;
            for &v in &self.data[ch * plane..(ch + 1) * plane] {
                acc += v;
            }
            out[ch] = acc;
        }
        Tensor::new(vec![c], out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t3(c: usize, h: usize, w: usize, f: impl FnMut(usize) -> f64) -> Tensor {
        Tensor::from_fn(&[c, h, w], f)
    }

    #[test]
    fn elementwise_add() {
        let a = Tensor::new(vec![2], vec![1.0, 2.0]).unwrap();
        let b = Tensor::new(vec![2], vec![3.0, 4.0]).unwrap();
        assert_eq!(a.add(&b).unwrap().data(), &[4.0, 6.0]);
    }

    #[test]
    fn mul_by_one_is_bit_identical() {
        let x = t3(2, 3, 4, |i| (i as f64).sin() * 1e3);
        let one = Tensor::scalar(1.0);
        let y = x.mul(&one).unwrap();
        assert_eq!(x.data(), y.data());
    }

    #[test]
    fn shape_mismatch_rejected() {
        let a = Tensor::zeros(&[2, 3]);
        let b = Tensor::zeros(&[3, 2]);
        assert!(matches!(
            a.add(&b),
            Err(TensorError::ShapeMismatch { .. })
        ));
    }

    #[test]
    fn chan_stats_constant_channel() {
        let x = Tensor::full(&[1, 2, 3], 5.0);
        let (mu, sigma) = x.channel_stats().unwrap();
        assert_eq!(mu.data(), &[5.0]);
        assert_eq!(sigma.data(), &[0.0]);
    }

    #[test]
    fn chan_stats_two_values() {
        let x = Tensor::new(vec![1, 1, 2], vec![1.0, 3.0]).unwrap();
        let (mu, sigma) = x.channel_stats().unwrap();
        assert_eq!(mu.data(), &[2.0]);
        assert_eq!(sigma.data(), &[1.0]);
    }

    #[test]
    fn chan_stats_matches_two_pass_reference() {
        let x = t3(4, 8, 8, |i| ((i * 2654435761) % 1000) as f64 / 37.0 - 13.0);
        let (mu, sigma) = x.channel_stats().unwrap();
        let plane = 64;
        for c in 0..4 {
            let vals = &x.data()[c * plane..(c + 1) * plane];
            let m: f64 = vals.iter().sum::<f64>() / plane as f64;
            let v: f64 = vals.iter().map(|&v| (v - m) * (v - m)).sum::<f64>() / plane as f64;
            assert_eq!(mu.data()[c], m);
            assert_eq!(sigma.data()[c], v.sqrt());
        }
    }

    #[test]
    fn conv_identity_1x1() {
        let x = t3(3, 5, 4, |i| i as f64 * 0.25 - 2.0);
        // kernel[o][c] = identity over channels
        let k = Tensor::from_fn(&[3, 3, 1, 1], |i| if i / 3 == i % 3 { 1.0 } else { 0.0 });
        let y = x.conv2d(&k).unwrap();
        assert_eq!(x.data(), y.data());
    }

    #[test]
    fn conv_zero_kernel() {
        let x = t3(2, 4, 4, |i| i as f64);
        let k = Tensor::zeros(&[3, 2, 3, 3]);
        let y = x.conv2d(&k).unwrap();
        assert!(y.data().iter().all(|&v| v == 0.0));
        assert_eq!(y.shape(), &[3, 4, 4]);
    }

    #[test]
    fn conv_matches_naive_loop_oracle() {
        // independent six-nested-loop reference with explicit zero padding
        let xorshift = |mut s: u64| {
            move || {
                let mut x = s;
                x ^= x << 13;
                x ^= x >> 7;
                x ^= x << 17;
                s = x;
                (x % 2000) as f64 / 500.0 - 2.0
            }
        };
        let mut rng = xorshift(42);
        let x = t3(2, 5, 5, |_| rng());
        let k = Tensor::from_fn(&[3, 2, 3, 3], |_| rng());
        let y = x.conv2d(&k).unwrap();

        let get = |c: usize, yy: i64, xx: i64| -> f64 {
            if yy < 0 || yy >= 5 || xx < 0 || xx >= 5 {
                0.0
            } else {
                x.data()[c * 25 + yy as usize * 5 + xx as usize]
            }
        };
        for o in 0..3 {
            for yy in 0..5i64 {
                for xx in 0..5i64 {
                    let mut acc = 0.0;
                    for c in 0..2 {
                        for dy in -1..=1i64 {
                            for dx in -1..=1i64 {
                                acc += get(c, yy + dy, xx + dx)
                                    * k.data()[((o * 2 + c) * 3 + (dy + 1) as usize) * 3
                                        + (dx + 1) as usize];
                            }
                        }
                    }
                    let got = y.data()[o * 25 + yy as usize * 5 + xx as usize];
                    assert_eq!(got, acc, "mismatch at ({o},{yy},{xx})");
                }
            }
        }
    }

    #[test]
    fn conv_channel_mismatch() {
        let x = Tensor::zeros(&[2, 4, 4]);
        let k = Tensor::zeros(&[1, 3, 3, 3]);
        assert!(matches!(
            x.conv2d(&k),
            Err(TensorError::ChannelMismatch { .. })
        ));
    }

    #[test]
    fn conv_even_kernel_rejected() {
        let x = Tensor::zeros(&[1, 4, 4]);
        let k = Tensor::zeros(&[1, 1, 2, 2]);
        assert!(matches!(x.conv2d(&k), Err(TensorError::EvenKernel(2))));
    }

    #[test]
    fn shift_moves_and_zero_fills() {
        let x = Tensor::new(vec![1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        // out[y][x] = in[y][x+1]
        let y = x.shift_spatial(0, 1).unwrap();
        assert_eq!(y.data(), &[2.0, 0.0, 4.0, 0.0]);
    }

    #[test]
    fn scalar_tensor_has_one_element() {
        let s = Tensor::scalar(7.5);
        assert_eq!(s.shape(), &[] as &[usize]);
        assert_eq!(s.item(), 7.5);
    }
}
