use super::{ConvSpec, FeatureMap, Filter, Shape};
use crate::{Error, Result, Scalar};

/// Output extent along one axis: `floor((in + 2p - ((k-1)r + 1)) / s) + 1`.
pub fn conv_output_size(input: usize, kernel: usize, spec: ConvSpec) -> Result<usize> {
    spec.validate()?;
    let effective = (kernel - 1) * spec.dilation + 1;
    let padded = input + 2 * spec.padding;
    if effective > padded {
        return Err(Error::config(format!(
            "effective kernel extent {effective} exceeds padded input extent {padded}"
        )));
    }
    Ok((padded - effective) / spec.stride + 1)
}

fn check_conv<T: Scalar>(
    input: &FeatureMap<T>,
    filter: &Filter<T>,
    spec: ConvSpec,
) -> Result<Shape> {
    if filter.in_channels != input.channels() {
        return Err(Error::shape(format!(
            "filter expects {} input channels, map has {}",
            filter.in_channels,
            input.channels()
        )));
    }
    let oh = conv_output_size(input.height(), filter.kernel_h, spec)?;
    let ow = conv_output_size(input.width(), filter.kernel_w, spec)?;
    Ok(Shape::new(input.batch(), filter.out_channels, oh, ow))
}

/// Direct-loop dilated convolution.
///
/// `out[n,o,y,x] = b[o] + sum_{i,ky,kx} in[n,i,y*s-p+ky*r, x*s-p+kx*r] * w[o,i,ky,kx]`
/// with zeros outside the input. This is the reference path for [`conv2d`].
pub fn conv2d_direct<T: Scalar>(
    input: &FeatureMap<T>,
    filter: &Filter<T>,
    spec: ConvSpec,
) -> Result<FeatureMap<T>> {
    let out_shape = check_conv(input, filter, spec)?;
    let (h, w) = (input.height() as isize, input.width() as isize);
    let (s, r, p) = (
        spec.stride as isize,
        spec.dilation as isize,
        spec.padding as isize,
    );
    let out = FeatureMap::from_fn(out_shape, |n, o, y, x| {
        let mut acc = filter.bias_at(o);
        for i in 0..filter.in_channels {
            for ky in 0..filter.kernel_h {
                let iy = y as isize * s - p + ky as isize * r;
                if iy < 0 || iy >= h {
                    continue;
                }
                for kx in 0..filter.kernel_w {
                    let ix = x as isize * s - p + kx as isize * r;
                    if ix < 0 || ix >= w {
                        continue;
                    }
                    acc += input.at(n, i, iy as usize, ix as usize) * filter.weight(o, i, ky, kx);
                }
            }
        }
        acc
    });
    Ok(out)
}

struct Geometry {
    in_c: usize,
    in_h: usize,
    in_w: usize,
    kh: usize,
    kw: usize,
    out_h: usize,
    out_w: usize,
    spec: ConvSpec,
}

impl Geometry {
    fn rows(&self) -> usize {
        self.in_c * self.kh * self.kw
    }

    fn cols(&self) -> usize {
        self.out_h * self.out_w
    }

    fn is_pointwise(&self) -> bool {
        self.kh == 1 && self.kw == 1 && self.spec.stride == 1 && self.spec.padding == 0
    }

    /// Visits every `(row, col, source offset)` triple whose source lies inside
    /// the unpadded image.
    #[inline]
    fn for_each_tap(&self, mut f: impl FnMut(usize, usize, usize)) {
        let (s, r, p) = (
            self.spec.stride as isize,
            self.spec.dilation as isize,
            self.spec.padding as isize,
        );
        let cols = self.cols();
        for c in 0..self.in_c {
            for ky in 0..self.kh {
                for kx in 0..self.kw {
                    let row = (c * self.kh + ky) * self.kw + kx;
                    for oy in 0..self.out_h {
                        let iy = oy as isize * s - p + ky as isize * r;
                        if iy < 0 || iy >= self.in_h as isize {
                            continue;
                        }
                        let src_row = (c * self.in_h + iy as usize) * self.in_w;
                        for ox in 0..self.out_w {
                            let ix = ox as isize * s - p + kx as isize * r;
                            if ix < 0 || ix >= self.in_w as isize {
                                continue;
                            }
                            f(row * cols, oy * self.out_w + ox, src_row + ix as usize);
                        }
                    }
                }
            }
        }
    }

    fn im2col<T: Scalar>(&self, image: &[T], cols: &mut [T]) {
        cols.fill(T::zero());
        self.for_each_tap(|row_off, col, src| cols[row_off + col] = image[src]);
    }

    fn col2im<T: Scalar>(&self, cols: &[T], image: &mut [T]) {
        self.for_each_tap(|row_off, col, src| image[src] += cols[row_off + col]);
    }
}

fn geometry<T: Scalar>(input: &FeatureMap<T>, filter: &Filter<T>, out: Shape, spec: ConvSpec) -> Geometry {
    Geometry {
        in_c: input.channels(),
        in_h: input.height(),
        in_w: input.width(),
        kh: filter.kernel_h,
        kw: filter.kernel_w,
        out_h: out.height,
        out_w: out.width,
        spec,
    }
}

/// Dilated convolution through an im2col buffer and a GEMM.
///
/// Agrees with [`conv2d_direct`] up to floating-point reassociation.
pub fn conv2d<T: Scalar>(
    input: &FeatureMap<T>,
    filter: &Filter<T>,
    spec: ConvSpec,
) -> Result<FeatureMap<T>> {
    let out_shape = check_conv(input, filter, spec)?;
    let geo = geometry(input, filter, out_shape, spec);
    let (rows, cols) = (geo.rows(), geo.cols());
    let in_per = input.channels() * input.shape().plane();
    let out_per = out_shape.channels * out_shape.plane();

    let mut out = vec![T::zero(); out_shape.len()];
    for (o, chunk) in out.chunks_mut(cols).enumerate() {
        chunk.fill(filter.bias_at(o % filter.out_channels));
    }
    let mut buf = if geo.is_pointwise() {
        Vec::new()
    } else {
        vec![T::zero(); rows * cols]
    };
    for n in 0..input.batch() {
        let image = &input.as_slice()[n * in_per..(n + 1) * in_per];
        let col_mat: &[T] = if geo.is_pointwise() {
            image
        } else {
            geo.im2col(image, &mut buf);
            &buf
        };
        T::gemm(
            filter.out_channels,
            rows,
            cols,
            T::one(),
            &filter.weights,
            (rows as isize, 1),
            col_mat,
            (cols as isize, 1),
            T::one(),
            &mut out[n * out_per..(n + 1) * out_per],
            (cols as isize, 1),
        );
    }
    FeatureMap::new(out_shape, out)
}

/// Gradients of a convolution with respect to its input, weights and bias.
#[derive(Clone, Debug)]
pub struct ConvGrads<T> {
    pub input: FeatureMap<T>,
    /// Same geometry as the forward filter; `bias` is present iff the forward
    /// filter carried one.
    pub filter: Filter<T>,
}

/// Analytic backward pass of [`conv2d`] given the retained forward input.
pub fn conv2d_backward<T: Scalar>(
    input: &FeatureMap<T>,
    filter: &Filter<T>,
    spec: ConvSpec,
    grad_out: &FeatureMap<T>,
) -> Result<ConvGrads<T>> {
    let out_shape = check_conv(input, filter, spec)?;
    if grad_out.shape() != out_shape {
        return Err(Error::shape(format!(
            "conv2d backward: upstream gradient {} does not match output {out_shape}",
            grad_out.shape()
        )));
    }
    let geo = geometry(input, filter, out_shape, spec);
    let (rows, cols) = (geo.rows(), geo.cols());
    let in_per = input.channels() * input.shape().plane();
    let out_per = out_shape.channels * out_shape.plane();

    let mut grad_filter = filter.zeros_like();
    let mut grad_in = vec![T::zero(); input.len()];
    let mut buf = vec![T::zero(); rows * cols];
    let mut grad_cols = vec![T::zero(); rows * cols];

    for n in 0..input.batch() {
        let image = &input.as_slice()[n * in_per..(n + 1) * in_per];
        let g = &grad_out.as_slice()[n * out_per..(n + 1) * out_per];
        let col_mat: &[T] = if geo.is_pointwise() {
            image
        } else {
            geo.im2col(image, &mut buf);
            &buf
        };
        // dW += G (O x cols) * colsᵀ (cols x rows)
        T::gemm(
            filter.out_channels,
            cols,
            rows,
            T::one(),
            g,
            (cols as isize, 1),
            col_mat,
            (1, cols as isize),
            T::one(),
            &mut grad_filter.weights,
            (rows as isize, 1),
        );
        if let Some(bias) = grad_filter.bias.as_mut() {
            for (o, b) in bias.iter_mut().enumerate() {
                *b += g[o * cols..(o + 1) * cols].iter().copied().sum::<T>();
            }
        }
        // dcols = Wᵀ (rows x O) * G (O x cols)
        let dst = &mut grad_in[n * in_per..(n + 1) * in_per];
        if geo.is_pointwise() {
            T::gemm(
                rows,
                filter.out_channels,
                cols,
                T::one(),
                &filter.weights,
                (1, rows as isize),
                g,
                (cols as isize, 1),
                T::zero(),
                dst,
                (cols as isize, 1),
            );
        } else {
            T::gemm(
                rows,
                filter.out_channels,
                cols,
                T::one(),
                &filter.weights,
                (1, rows as isize),
                g,
                (cols as isize, 1),
                T::zero(),
                &mut grad_cols,
                (cols as isize, 1),
            );
            geo.col2im(&grad_cols, dst);
        }
    }
    Ok(ConvGrads {
        input: FeatureMap::new(input.shape(), grad_in)?,
        filter: grad_filter,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn identity_1x1_returns_input() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = FeatureMap::<f64>::random_normal(Shape::new(2, 3, 5, 4), 1.0, &mut rng);
        let f = Filter::center_identity(3, 1);
        let y = conv2d(&x, &f, ConvSpec::default()).unwrap();
        assert_eq!(y, x);
        let y = conv2d_direct(&x, &f, ConvSpec::default()).unwrap();
        assert_eq!(y, x);
    }

    #[test]
    fn all_ones_3x3_over_ones_gives_nine() {
        let x = FeatureMap::<f64>::full(Shape::new(1, 1, 3, 3), 1.0);
        let f = Filter::new(1, 1, 3, 3, vec![1.0; 9], None).unwrap();
        let y = conv2d(&x, &f, ConvSpec::default()).unwrap();
        assert_eq!(y.shape(), Shape::new(1, 1, 1, 1));
        assert_eq!(y.as_slice(), &[9.0]);
    }

    #[test]
    fn output_size_formula() {
        let spec = ConvSpec::new(2, 1, 2).unwrap();
        assert_eq!(conv_output_size(7, 3, spec).unwrap(), 7);
        let spec = ConvSpec::new(1, 2, 1).unwrap();
        assert_eq!(conv_output_size(8, 3, spec).unwrap(), 4);
        assert_eq!(conv_output_size(7, 3, spec).unwrap(), 4);
    }

    #[test]
    fn oversized_kernel_is_config_error() {
        let x = FeatureMap::<f64>::zeros(Shape::new(1, 1, 3, 3));
        let f = Filter::<f64>::zeros(1, 1, 3);
        let err = conv2d(&x, &f, ConvSpec::new(3, 1, 0).unwrap()).unwrap_err();
        assert!(matches!(err, Error::Config(_)), "{err}");
    }

    #[test]
    fn channel_mismatch_is_shape_error() {
        let x = FeatureMap::<f64>::zeros(Shape::new(1, 2, 3, 3));
        let f = Filter::<f64>::zeros(1, 3, 3);
        assert!(matches!(
            conv2d(&x, &f, ConvSpec::same(3, 1)),
            Err(Error::Shape(_))
        ));
    }

    #[test]
    fn even_kernel_rejected() {
        assert!(Filter::<f64>::new(1, 1, 2, 2, vec![0.0; 4], None).is_err());
    }

    #[test]
    fn backward_rejects_wrong_upstream_shape() {
        let x = FeatureMap::<f64>::zeros(Shape::new(1, 1, 4, 4));
        let f = Filter::<f64>::zeros(1, 1, 3);
        let g = FeatureMap::<f64>::zeros(Shape::new(1, 1, 3, 3));
        assert!(conv2d_backward(&x, &f, ConvSpec::same(3, 1), &g).is_err());
    }
}
