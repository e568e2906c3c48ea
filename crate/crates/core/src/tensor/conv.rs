use rayon::prelude::*;

use super::{Scalar, Shape, Tensor};
use crate::error::{Error, Result};

/// A 2-D convolution: weights `(C_out, C_in / groups, kH, kW)`, optional
/// bias and the sliding-window geometry. Padding is always zero-fill.
#[derive(Debug, Clone, PartialEq)]
pub struct ConvSpec<T: Scalar = f32> {
    pub weight: Tensor<T>,
    pub bias: Option<Vec<T>>,
    pub stride: (usize, usize),
    pub padding: (usize, usize),
    pub dilation: (usize, usize),
    pub groups: usize,
}

impl<T: Scalar> ConvSpec<T> {
    /// Stride 1, no padding, no dilation, one group.
    pub fn new(weight: Tensor<T>, bias: Option<Vec<T>>) -> Self {
        ConvSpec {
            weight,
            bias,
            stride: (1, 1),
            padding: (0, 0),
            dilation: (1, 1),
            groups: 1,
        }
    }

    /// A convolution whose output has the input's spatial size
    /// (odd kernels, stride 1).
    pub fn same(weight: Tensor<T>, bias: Option<Vec<T>>) -> Self {
        let mut spec = Self::new(weight, bias);
        spec.padding = spec.same_padding();
        spec
    }

    pub fn with_stride(mut self, stride: (usize, usize)) -> Self {
        self.stride = stride;
        self
    }

    pub fn with_padding(mut self, padding: (usize, usize)) -> Self {
        self.padding = padding;
        self
    }

    pub fn with_dilation(mut self, dilation: (usize, usize)) -> Self {
        self.dilation = dilation;
        self
    }

    pub fn with_groups(mut self, groups: usize) -> Self {
        self.groups = groups;
        self
    }

    pub fn out_channels(&self) -> usize {
        self.weight.shape().n
    }

    pub fn in_channels(&self) -> usize {
        self.weight.shape().c * self.groups
    }

    pub fn kernel(&self) -> (usize, usize) {
        let s = self.weight.shape();
        (s.h, s.w)
    }

    /// `(k - 1) / 2 · dilation` on each axis.
    pub fn same_padding(&self) -> (usize, usize) {
        let (kh, kw) = self.kernel();
        (
            (kh - 1) / 2 * self.dilation.0,
            (kw - 1) / 2 * self.dilation.1,
        )
    }

    pub fn is_pointwise(&self) -> bool {
        self.kernel() == (1, 1)
    }

    pub fn param_count(&self) -> usize {
        self.weight.len() + self.bias.as_ref().map_or(0, Vec::len)
    }

    pub fn cast<U: Scalar>(&self) -> ConvSpec<U> {
        ConvSpec {
            weight: self.weight.cast(),
            bias: self
                .bias
                .as_ref()
                .map(|b| b.iter().map(|v| U::from_wide(v.to_wide())).collect()),
            stride: self.stride,
            padding: self.padding,
            dilation: self.dilation,
            groups: self.groups,
        }
    }

    /// Checks the geometry on its own, independent of any input.
    pub fn validate(&self) -> Result<()> {
        let w = self.weight.shape();
        if w.h == 0 || w.w == 0 || w.c == 0 || w.n == 0 {
            return Err(Error::invalid("conv2d", "kernel dimensions must be at least 1"));
        }
        if self.groups == 0 || w.n % self.groups != 0 {
            return Err(Error::invalid(
                "conv2d",
                format!("groups {} does not divide C_out {}", self.groups, w.n),
            ));
        }
        if self.stride.0 == 0 || self.stride.1 == 0 {
            return Err(Error::invalid("conv2d", "stride must be at least 1"));
        }
        if self.dilation.0 == 0 || self.dilation.1 == 0 {
            return Err(Error::invalid("conv2d", "dilation must be at least 1"));
        }
        if let Some(b) = &self.bias {
            if b.len() != w.n {
                return Err(Error::shape("conv2d", "bias", w.n, b.len()));
            }
        }
        Ok(())
    }

    /// Output spatial size for an `h × w` input.
    pub fn output_hw(&self, h: usize, w: usize) -> Result<(usize, usize)> {
        let (kh, kw) = self.kernel();
        let span_h = self.dilation.0 * (kh - 1) + 1;
        let span_w = self.dilation.1 * (kw - 1) + 1;
        let ph = h + 2 * self.padding.0;
        let pw = w + 2 * self.padding.1;
        if ph < span_h {
            return Err(Error::shape("conv2d", "h", span_h, ph));
        }
        if pw < span_w {
            return Err(Error::shape("conv2d", "w", span_w, pw));
        }
        Ok((
            (ph - span_h) / self.stride.0 + 1,
            (pw - span_w) / self.stride.1 + 1,
        ))
    }

    pub(crate) fn check_input(&self, x: Shape) -> Result<Shape> {
        self.validate()?;
        if x.c != self.in_channels() {
            return Err(Error::shape("conv2d", "c", self.in_channels(), x.c));
        }
        let (oh, ow) = self.output_hw(x.h, x.w)?;
        Ok(Shape::new(x.n, self.out_channels(), oh, ow))
    }
}

/// Range of output columns `o` for which `o·s + k·d − p` lands inside
/// `[0, len)`.
#[inline]
fn valid_range(len: usize, out: usize, stride: usize, offset: isize) -> (usize, usize) {
    // input index = o * stride + offset
    let lo = if offset >= 0 {
        0
    } else {
        ((-offset) as usize).div_ceil(stride)
    };
    let last = len as isize - 1 - offset;
    if last < 0 {
        return (0, 0);
    }
    let hi = (last as usize / stride + 1).min(out);
    if lo >= hi {
        return (0, 0);
    }
    (lo, hi)
}

/// Cross-correlation of `x` with `spec` (no kernel flip).
///
/// Output planes are computed in parallel; each output element accumulates
/// in `f64` over input channels, then kernel rows, then kernel columns, with
/// the bias added last. The order is fixed, so the result is bitwise
/// reproducible for any thread count.
pub fn conv2d<T: Scalar>(x: &Tensor<T>, spec: &ConvSpec<T>) -> Result<Tensor<T>> {
    let xs = x.shape();
    let out_shape = spec.check_input(xs)?;
    let (oh, ow) = (out_shape.h, out_shape.w);
    let (kh, kw) = spec.kernel();
    let c_out = spec.out_channels();
    let cin_g = spec.weight.shape().c;
    let cout_g = c_out / spec.groups;
    let (sh, sw) = spec.stride;
    let (dh, dw) = spec.dilation;
    let (ph, pw) = spec.padding;
    let weights = spec.weight.data();
    let input = x.data();
    let in_plane = xs.plane();

    let mut out = vec![T::zero(); out_shape.len()];
    let plane = oh * ow;
    out.par_chunks_mut(plane.max(1))
        .enumerate()
        .for_each(|(idx, dst)| {
            let n = idx / c_out;
            let oc = idx % c_out;
            let g = oc / cout_g;
            let mut acc = vec![0.0f64; plane];
            for icg in 0..cin_g {
                let ic = g * cin_g + icg;
                let src = &input[(n * xs.c + ic) * in_plane..][..in_plane];
                let wbase = (oc * cin_g + icg) * kh * kw;
                for ky in 0..kh {
                    let off_y = (ky * dh) as isize - ph as isize;
                    let (y0, y1) = valid_range(xs.h, oh, sh, off_y);
                    for kx in 0..kw {
                        let wv = weights[wbase + ky * kw + kx].to_wide();
                        let off_x = (kx * dw) as isize - pw as isize;
                        let (x0, x1) = valid_range(xs.w, ow, sw, off_x);
                        if x0 == x1 {
                            continue;
                        }
                        for oy in y0..y1 {
                            let iy = (oy * sh) as isize + off_y;
                            let row = &src[iy as usize * xs.w..][..xs.w];
                            let acc_row = &mut acc[oy * ow..][..ow];
                            if sw == 1 {
                                let start = (x0 as isize + off_x) as usize;
                                let ins = &row[start..start + (x1 - x0)];
                                for (a, v) in acc_row[x0..x1].iter_mut().zip(ins) {
                                    *a += wv * v.to_wide();
                                }
                            } else {
                                for ox in x0..x1 {
                                    let ix = ((ox * sw) as isize + off_x) as usize;
                                    acc_row[ox] += wv * row[ix].to_wide();
                                }
                            }
                        }
                    }
                }
            }
            let b = spec.bias.as_ref().map_or(0.0, |b| b[oc].to_wide());
            for (d, a) in dst.iter_mut().zip(acc) {
                *d = T::from_wide(a + b);
            }
        });
    Tensor::new(out_shape, out)
}

/// Reference convolution: seven nested loops, one bounds check per tap.
/// Slow; exists only so [`conv2d`] has something independent to agree with.
pub fn conv2d_oracle<T: Scalar>(x: &Tensor<T>, spec: &ConvSpec<T>) -> Result<Tensor<T>> {
    let xs = x.shape();
    let os = spec.check_input(xs)?;
    let (kh, kw) = spec.kernel();
    let cin_g = spec.weight.shape().c;
    let cout_g = os.c / spec.groups;
    let mut out = Tensor::zeros(os);
    for n in 0..os.n {
        for oc in 0..os.c {
            let g = oc / cout_g;
            for oy in 0..os.h {
                for ox in 0..os.w {
                    let mut acc = spec.bias.as_ref().map_or(0.0, |b| b[oc].to_wide());
                    for icg in 0..cin_g {
                        for ky in 0..kh {
                            for kx in 0..kw {
                                let iy = (oy * spec.stride.0 + ky * spec.dilation.0) as isize
                                    - spec.padding.0 as isize;
                                let ix = (ox * spec.stride.1 + kx * spec.dilation.1) as isize
                                    - spec.padding.1 as isize;
                                if iy < 0 || ix < 0 || iy >= xs.h as isize || ix >= xs.w as isize {
                                    continue;
                                }
                                let xv = x.at(n, g * cin_g + icg, iy as usize, ix as usize);
                                let wv = spec.weight.at(oc, icg, ky, kx);
                                acc += xv.to_wide() * wv.to_wide();
                            }
                        }
                    }
                    out.set(n, oc, oy, ox, T::from_wide(acc));
                }
            }
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::rngs::StdRng;
    use rand::SeedableRng;

    fn identity_1x1(c: usize) -> ConvSpec {
        let w = Tensor::from_fn(Shape::new(c, c, 1, 1), |o, i, _, _| if o == i { 1.0 } else { 0.0 });
        ConvSpec::new(w, None)
    }

    #[test]
    fn pointwise_identity_is_exact() {
        let mut rng = StdRng::seed_from_u64(1);
        let x = Tensor::<f32>::random_uniform(Shape::new(2, 3, 5, 4), &mut rng, -1.0, 1.0);
        let spec = identity_1x1(3);
        assert_eq!(conv2d(&x, &spec).unwrap(), x);
        assert_eq!(conv2d_oracle(&x, &spec).unwrap(), x);
    }

    #[test]
    fn dirac_3x3_is_exact() {
        let mut rng = StdRng::seed_from_u64(2);
        let x = Tensor::<f32>::random_uniform(Shape::new(1, 2, 6, 7), &mut rng, -1.0, 1.0);
        let w = Tensor::from_fn(Shape::new(2, 2, 3, 3), |o, i, y, xx| {
            if o == i && y == 1 && xx == 1 {
                1.0
            } else {
                0.0
            }
        });
        let spec = ConvSpec::same(w, None);
        assert_eq!(conv2d(&x, &spec).unwrap(), x);
    }

    #[test]
    fn box_filter_center_is_mean() {
        let x = Tensor::new(Shape::new(1, 1, 3, 3), (1..=9).map(|v| v as f32).collect()).unwrap();
        let spec = ConvSpec::same(Tensor::full(Shape::new(1, 1, 3, 3), 1.0 / 9.0), None);
        let y = conv2d(&x, &spec).unwrap();
        assert!((y.at(0, 0, 1, 1) - 5.0).abs() < 1e-6);
        // corner sees 1, 2, 4, 5
        assert!((y.at(0, 0, 0, 0) - 12.0 / 9.0).abs() < 1e-6);
    }

    #[test]
    fn zero_kernel_gives_zeros() {
        let mut rng = StdRng::seed_from_u64(3);
        let x = Tensor::<f32>::random_uniform(Shape::new(1, 4, 5, 5), &mut rng, -1.0, 1.0);
        let spec = ConvSpec::same(Tensor::zeros(Shape::new(3, 4, 3, 3)), Some(vec![0.0; 3]));
        let y = conv2d_oracle(&x, &spec).unwrap();
        assert!(y.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn output_shape_formula() {
        let spec = ConvSpec::<f32>::new(Tensor::zeros(Shape::new(2, 1, 3, 2)), None)
            .with_stride((2, 3))
            .with_padding((1, 2))
            .with_dilation((2, 1));
        // h: (10 + 2 - 2*2 - 1) / 2 + 1 = 4 ; w: (11 + 4 - 1 - 1) / 3 + 1 = 5
        assert_eq!(spec.output_hw(10, 11).unwrap(), (4, 5));
    }

    #[test]
    fn channel_mismatch_names_dimension() {
        let x = Tensor::<f32>::zeros(Shape::new(1, 3, 4, 4));
        let spec = identity_1x1(2);
        match conv2d(&x, &spec) {
            Err(Error::Shape { dim, expected, actual, .. }) => {
                assert_eq!((dim, expected, actual), ("c", 2, 3));
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn kernel_larger_than_input_is_rejected() {
        let x = Tensor::<f32>::zeros(Shape::new(1, 1, 2, 2));
        let spec = ConvSpec::new(Tensor::zeros(Shape::new(1, 1, 3, 3)), None);
        assert!(matches!(conv2d(&x, &spec), Err(Error::Shape { dim: "h", .. })));
    }

    #[test]
    fn padding_wider_than_input() {
        let mut rng = StdRng::seed_from_u64(9);
        let x = Tensor::<f32>::random_uniform(Shape::new(1, 2, 1, 2), &mut rng, -1.0, 1.0);
        for (k, p) in [(5, 2), (3, 2), (5, 4)] {
            let w = Tensor::random_uniform(Shape::new(3, 2, k, k), &mut rng, -1.0, 1.0);
            let spec = ConvSpec::new(w, Some(vec![0.5; 3])).with_padding((p, p));
            let d = conv2d(&x, &spec).unwrap().max_abs_diff(&conv2d_oracle(&x, &spec).unwrap()).unwrap();
            assert!(d <= 1e-6, "k={k} p={p}: {d}");
        }
    }

    #[test]
    fn bad_groups_rejected() {
        let spec = ConvSpec::<f32>::new(Tensor::zeros(Shape::new(3, 1, 1, 1)), None).with_groups(2);
        assert!(spec.validate().is_err());
    }

    #[test]
    fn depthwise_matches_independent_per_channel_correlation() {
        let mut rng = StdRng::seed_from_u64(4);
        let c = 3;
        let x = Tensor::<f64>::random_uniform(Shape::new(1, c, 6, 5), &mut rng, -1.0, 1.0);
        let w = Tensor::<f64>::random_uniform(Shape::new(c, 1, 3, 3), &mut rng, -1.0, 1.0);
        let spec = ConvSpec::same(w.clone(), None).with_groups(c);
        let y = conv2d(&x, &spec).unwrap();
        for ch in 0..c {
            for i in 0..6 {
                for j in 0..5 {
                    let mut s = 0.0;
                    for a in 0..3 {
                        for b in 0..3 {
                            let (ii, jj) = (i as isize + a as isize - 1, j as isize + b as isize - 1);
                            if ii >= 0 && jj >= 0 && ii < 6 && jj < 5 {
                                s += x.at(0, ch, ii as usize, jj as usize) * w.at(ch, 0, a, b);
                            }
                        }
                    }
                    assert!((y.at(0, ch, i, j) - s).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn dilation_equals_zero_interleaved_kernel() {
        let mut rng = StdRng::seed_from_u64(5);
        let x = Tensor::<f32>::random_uniform(Shape::new(1, 2, 9, 9), &mut rng, -1.0, 1.0);
        let w = Tensor::<f32>::random_uniform(Shape::new(3, 2, 3, 3), &mut rng, -1.0, 1.0);
        let d = 2;
        let dilated = ConvSpec::new(w.clone(), None).with_dilation((d, d)).with_padding((2, 2));
        let k = (3 - 1) * d + 1;
        let expanded = Tensor::from_fn(Shape::new(3, 2, k, k), |o, i, y, xx| {
            if y % d == 0 && xx % d == 0 {
                w.at(o, i, y / d, xx / d)
            } else {
                0.0
            }
        });
        let plain = ConvSpec::new(expanded, None).with_padding((2, 2));
        let a = conv2d(&x, &dilated).unwrap();
        let b = conv2d(&x, &plain).unwrap();
        assert!(a.max_abs_diff(&b).unwrap() <= 1e-6);
    }

    #[test]
    fn repeated_runs_are_bitwise_identical() {
        let mut rng = StdRng::seed_from_u64(6);
        let x = Tensor::<f32>::random_uniform(Shape::new(2, 8, 11, 13), &mut rng, -1.0, 1.0);
        let w = Tensor::<f32>::random_uniform(Shape::new(8, 4, 3, 3), &mut rng, -1.0, 1.0);
        let spec = ConvSpec::same(w, Some(vec![0.25; 8])).with_groups(2);
        let a = conv2d(&x, &spec).unwrap();
        let single = rayon::ThreadPoolBuilder::new().num_threads(1).build().unwrap();
        let b = single.install(|| conv2d(&x, &spec)).unwrap();
        assert_eq!(a.data(), b.data());
    }
}
