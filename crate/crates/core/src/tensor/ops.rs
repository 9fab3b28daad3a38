use super::{ensure_same_shape, FeatureMap, Shape};
use crate::{Error, Result, Scalar};

/// Per-`(n, c)` spatial mean, returned as an `(N, C, 1, 1)` map.
pub fn global_avg_pool<T: Scalar>(input: &FeatureMap<T>) -> FeatureMap<T> {
    let s = input.shape();
    let denom = T::of(s.plane() as f64);
    let data = input
        .as_slice()
        .chunks(s.plane())
        .map(|p| p.iter().copied().sum::<T>() / denom)
        .collect();
    FeatureMap::new(Shape::new(s.batch, s.channels, 1, 1), data).expect("pooled shape")
}

pub fn global_avg_pool_backward<T: Scalar>(
    input_shape: Shape,
    grad_out: &FeatureMap<T>,
) -> Result<FeatureMap<T>> {
    let expected = Shape::new(input_shape.batch, input_shape.channels, 1, 1);
    if grad_out.shape() != expected {
        return Err(Error::shape(format!(
            "global_avg_pool backward: expected upstream {expected}, got {}",
            grad_out.shape()
        )));
    }
    let plane = input_shape.plane();
    let denom = T::of(plane as f64);
    let mut data = Vec::with_capacity(input_shape.len());
    for &g in grad_out.as_slice() {
        data.extend(std::iter::repeat_n(g / denom, plane));
    }
    FeatureMap::new(input_shape, data)
}

/// Per-pixel maximum across channels, returned as an `(N, 1, H, W)` map.
pub fn channel_max_pool<T: Scalar>(input: &FeatureMap<T>) -> FeatureMap<T> {
    let s = input.shape();
    FeatureMap::from_fn(s.with_channels(1), |n, _, h, w| {
        (1..s.channels).fold(input.at(n, 0, h, w), |m, c| m.max(input.at(n, c, h, w)))
    })
}

/// Routes each pixel's gradient to the first channel attaining the maximum.
pub fn channel_max_pool_backward<T: Scalar>(
    input: &FeatureMap<T>,
    grad_out: &FeatureMap<T>,
) -> Result<FeatureMap<T>> {
    let s = input.shape();
    if grad_out.shape() != s.with_channels(1) {
        return Err(Error::shape(format!(
            "channel_max_pool backward: expected upstream {}, got {}",
            s.with_channels(1),
            grad_out.shape()
        )));
    }
    let mut grad = FeatureMap::zeros(s);
    for n in 0..s.batch {
        for h in 0..s.height {
            for w in 0..s.width {
                let mut best = 0;
                for c in 1..s.channels {
                    if input.at(n, c, h, w) > input.at(n, best, h, w) {
                        best = c;
                    }
                }
                grad.set(n, best, h, w, grad_out.at(n, 0, h, w));
            }
        }
    }
    Ok(grad)
}

pub fn elementwise_add<T: Scalar>(a: &FeatureMap<T>, b: &FeatureMap<T>) -> Result<FeatureMap<T>> {
    ensure_same_shape(a, b, "elementwise_add")?;
    let data = a
        .as_slice()
        .iter()
        .zip(b.as_slice())
        .map(|(&x, &y)| x + y)
        .collect();
    FeatureMap::new(a.shape(), data)
}

/// Upstream gradient passes unchanged to both summands.
pub fn elementwise_add_backward<T: Scalar>(grad_out: &FeatureMap<T>) -> (FeatureMap<T>, FeatureMap<T>) {
    (grad_out.clone(), grad_out.clone())
}

/// How a gate broadcasts over the map it multiplies.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum GateKind {
    /// `(N, C, 1, 1)`: one value per channel.
    Channel,
    /// `(N, 1, H, W)`: one value per pixel.
    Spatial,
}

pub fn gate_kind(input: Shape, gate: Shape) -> Result<GateKind> {
    if gate == Shape::new(input.batch, input.channels, 1, 1) {
        Ok(GateKind::Channel)
    } else if gate == input.with_channels(1) {
        Ok(GateKind::Spatial)
    } else {
        Err(Error::shape(format!(
            "gate {gate} is neither a channel gate nor a spatial gate for input {input}"
        )))
    }
}

/// Cellwise product with the gate replicated along its unit axes.
pub fn broadcast_mul<T: Scalar>(input: &FeatureMap<T>, gate: &FeatureMap<T>) -> Result<FeatureMap<T>> {
    let s = input.shape();
    let out = match gate_kind(s, gate.shape())? {
        GateKind::Channel => {
            FeatureMap::from_fn(s, |n, c, h, w| input.at(n, c, h, w) * gate.at(n, c, 0, 0))
        }
        GateKind::Spatial => {
            FeatureMap::from_fn(s, |n, c, h, w| input.at(n, c, h, w) * gate.at(n, 0, h, w))
        }
    };
    Ok(out)
}

/// Returns `(d input, d gate)`.
pub fn broadcast_mul_backward<T: Scalar>(
    input: &FeatureMap<T>,
    gate: &FeatureMap<T>,
    grad_out: &FeatureMap<T>,
) -> Result<(FeatureMap<T>, FeatureMap<T>)> {
    ensure_same_shape(input, grad_out, "broadcast_mul backward")?;
    let kind = gate_kind(input.shape(), gate.shape())?;
    let grad_in = broadcast_mul(grad_out, gate)?;
    let s = input.shape();
    let mut grad_gate = FeatureMap::zeros(gate.shape());
    for n in 0..s.batch {
        for c in 0..s.channels {
            for h in 0..s.height {
                for w in 0..s.width {
                    let v = grad_out.at(n, c, h, w) * input.at(n, c, h, w);
                    let i = match kind {
                        GateKind::Channel => grad_gate.offset(n, c, 0, 0),
                        GateKind::Spatial => grad_gate.offset(n, 0, h, w),
                    };
                    grad_gate.as_mut_slice()[i] += v;
                }
            }
        }
    }
    Ok((grad_in, grad_gate))
}

/// Stacks maps along the channel axis in the given order.
pub fn concat_channels<T: Scalar>(parts: &[&FeatureMap<T>]) -> Result<FeatureMap<T>> {
    let first = parts
        .first()
        .ok_or_else(|| Error::shape("concat_channels needs at least one part"))?;
    let base = first.shape();
    for p in parts {
        let s = p.shape();
        if s.batch != base.batch || s.height != base.height || s.width != base.width {
            return Err(Error::shape(format!(
                "concat_channels: part {s} incompatible with {base}"
            )));
        }
    }
    let channels = parts.iter().map(|p| p.channels()).sum();
    let shape = base.with_channels(channels);
    let mut data = Vec::with_capacity(shape.len());
    for n in 0..base.batch {
        for p in parts {
            let per = p.channels() * base.plane();
            data.extend_from_slice(&p.as_slice()[n * per..(n + 1) * per]);
        }
    }
    FeatureMap::new(shape, data)
}

/// Channels `start..start + count` as a new map.
pub fn slice_channels<T: Scalar>(input: &FeatureMap<T>, start: usize, count: usize) -> Result<FeatureMap<T>> {
    let s = input.shape();
    if count == 0 || start + count > s.channels {
        return Err(Error::shape(format!(
            "channel slice {start}..{} out of range for {s}",
            start + count
        )));
    }
    let plane = s.plane();
    let mut data = Vec::with_capacity(s.batch * count * plane);
    for n in 0..s.batch {
        let from = (n * s.channels + start) * plane;
        data.extend_from_slice(&input.as_slice()[from..from + count * plane]);
    }
    FeatureMap::new(s.with_channels(count), data)
}

/// Inverse of [`concat_channels`]: splits the gradient into per-part maps.
pub fn split_channels<T: Scalar>(input: &FeatureMap<T>, sizes: &[usize]) -> Result<Vec<FeatureMap<T>>> {
    if sizes.iter().sum::<usize>() != input.channels() {
        return Err(Error::shape(format!(
            "split sizes {sizes:?} do not sum to {} channels",
            input.channels()
        )));
    }
    let mut start = 0;
    sizes
        .iter()
        .map(|&k| {
            let part = slice_channels(input, start, k);
            start += k;
            part
        })
        .collect()
}

/// Nearest-neighbour 2x upsampling: `out[h, w] = in[h / 2, w / 2]`.
pub fn upsample_nearest2x<T: Scalar>(input: &FeatureMap<T>) -> FeatureMap<T> {
    let s = input.shape();
    let out = Shape::new(s.batch, s.channels, s.height * 2, s.width * 2);
    FeatureMap::from_fn(out, |n, c, h, w| input.at(n, c, h / 2, w / 2))
}

/// Sums each 2x2 block of the upstream gradient.
pub fn upsample_nearest2x_backward<T: Scalar>(
    input_shape: Shape,
    grad_out: &FeatureMap<T>,
) -> Result<FeatureMap<T>> {
    let expected = Shape::new(
        input_shape.batch,
        input_shape.channels,
        input_shape.height * 2,
        input_shape.width * 2,
    );
    if grad_out.shape() != expected {
        return Err(Error::shape(format!(
            "upsample backward: expected upstream {expected}, got {}",
            grad_out.shape()
        )));
    }
    Ok(FeatureMap::from_fn(input_shape, |n, c, h, w| {
        grad_out.at(n, c, 2 * h, 2 * w)
            + grad_out.at(n, c, 2 * h, 2 * w + 1)
            + grad_out.at(n, c, 2 * h + 1, 2 * w)
            + grad_out.at(n, c, 2 * h + 1, 2 * w + 1)
    }))
}

#[inline]
pub fn sigmoid_scalar<T: Scalar>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

pub fn sigmoid<T: Scalar>(input: &FeatureMap<T>) -> FeatureMap<T> {
    input.map(sigmoid_scalar)
}

/// Uses the retained forward output `y`: `dx = dy * y * (1 - y)`.
pub fn sigmoid_backward<T: Scalar>(output: &FeatureMap<T>, grad_out: &FeatureMap<T>) -> Result<FeatureMap<T>> {
    ensure_same_shape(output, grad_out, "sigmoid backward")?;
    let data = output
        .as_slice()
        .iter()
        .zip(grad_out.as_slice())
        .map(|(&y, &g)| g * y * (T::one() - y))
        .collect();
    FeatureMap::new(output.shape(), data)
}

pub fn relu<T: Scalar>(input: &FeatureMap<T>) -> FeatureMap<T> {
    input.map(|v| v.max(T::zero()))
}

pub fn relu_backward<T: Scalar>(input: &FeatureMap<T>, grad_out: &FeatureMap<T>) -> Result<FeatureMap<T>> {
    ensure_same_shape(input, grad_out, "relu backward")?;
    let data = input
        .as_slice()
        .iter()
        .zip(grad_out.as_slice())
        .map(|(&x, &g)| if x > T::zero() { g } else { T::zero() })
        .collect();
    FeatureMap::new(input.shape(), data)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn map(dims: [usize; 4], v: &[f64]) -> FeatureMap<f64> {
        FeatureMap::from_dims(dims, v.to_vec()).unwrap()
    }

    #[test]
    fn avg_pool_examples() {
        let c = FeatureMap::full(Shape::new(1, 2, 3, 3), 3.5);
        assert_eq!(global_avg_pool(&c).as_slice(), &[3.5, 3.5]);
        let x = map([1, 1, 2, 2], &[1.0, 2.0, 3.0, 4.0]);
        assert_eq!(global_avg_pool(&x).as_slice(), &[2.5]);
    }

    #[test]
    fn max_pool_examples() {
        let x = map([1, 1, 2, 2], &[1.0, -2.0, 3.0, 0.5]);
        assert_eq!(channel_max_pool(&x), x);
        let two = map([1, 2, 1, 2], &[1.0, 1.0, 2.0, 2.0]);
        assert_eq!(channel_max_pool(&two).as_slice(), &[2.0, 2.0]);
    }

    #[test]
    fn add_identities() {
        let a = map([1, 1, 1, 3], &[1.0, -2.0, 3.0]);
        let z = FeatureMap::zeros(a.shape());
        assert_eq!(elementwise_add(&a, &z).unwrap(), a);
        assert_eq!(elementwise_add(&a, &a.scale(-1.0)).unwrap(), z);
        assert!(elementwise_add(&a, &map([1, 1, 3, 1], &[0.0; 3])).is_err());
        let (ga, gb) = elementwise_add_backward(&a);
        assert_eq!((ga, gb), (a.clone(), a));
    }

    #[test]
    fn gates() {
        let x = map([1, 2, 1, 2], &[1.0, 2.0, 3.0, 4.0]);
        let ones = FeatureMap::full(Shape::new(1, 2, 1, 1), 1.0);
        assert_eq!(broadcast_mul(&x, &ones).unwrap(), x);
        let mask = map([1, 2, 1, 1], &[0.0, 1.0]);
        assert_eq!(broadcast_mul(&x, &mask).unwrap().as_slice(), &[0.0, 0.0, 3.0, 4.0]);
        let spatial = map([1, 1, 1, 2], &[2.0, 10.0]);
        assert_eq!(
            broadcast_mul(&x, &spatial).unwrap().as_slice(),
            &[2.0, 20.0, 6.0, 40.0]
        );
        let bad = FeatureMap::full(Shape::new(1, 2, 1, 2), 1.0);
        assert!(broadcast_mul(&x, &bad).is_err());
        let bad = FeatureMap::full(Shape::new(1, 3, 1, 1), 1.0);
        assert!(broadcast_mul(&x, &bad).is_err());
    }

    #[test]
    fn gate_of_ones_backward_is_identity() {
        let x = map([1, 2, 1, 2], &[1.0, 2.0, 3.0, 4.0]);
        let g = map([1, 2, 1, 2], &[0.1, 0.2, 0.3, 0.4]);
        let ones = FeatureMap::full(Shape::new(1, 1, 1, 2), 1.0);
        let (gi, gg) = broadcast_mul_backward(&x, &ones, &g).unwrap();
        assert_eq!(gi, g);
        assert!((gg.as_slice()[0] - (0.1 + 0.3 * 3.0)).abs() < 1e-15);
    }

    #[test]
    fn concat_examples() {
        let a = FeatureMap::full(Shape::new(1, 1, 2, 2), 1.0);
        let b = FeatureMap::full(Shape::new(1, 1, 2, 2), 2.0);
        assert_eq!(concat_channels(&[&a]).unwrap(), a);
        let ab = concat_channels(&[&a, &b]).unwrap();
        assert_eq!(ab.as_slice(), &[1.0, 1.0, 1.0, 1.0, 2.0, 2.0, 2.0, 2.0]);
        let c = FeatureMap::full(Shape::new(1, 1, 3, 2), 2.0);
        assert!(concat_channels(&[&a, &c]).is_err());
        assert!(concat_channels::<f64>(&[]).is_err());
    }

    #[test]
    fn upsample_examples() {
        let v = map([1, 1, 1, 1], &[7.0]);
        assert_eq!(upsample_nearest2x(&v).as_slice(), &[7.0; 4]);
        let x = map([1, 1, 2, 2], &[1.0, 2.0, 3.0, 4.0]);
        let up = upsample_nearest2x(&x);
        assert_eq!(
            up.as_slice(),
            &[
                1.0, 1.0, 2.0, 2.0, 1.0, 1.0, 2.0, 2.0, 3.0, 3.0, 4.0, 4.0, 3.0, 3.0, 4.0, 4.0
            ]
        );
    }

    #[test]
    fn sigmoid_examples() {
        let x = map([1, 1, 1, 3], &[0.0, -800.0, 800.0]);
        let y = sigmoid(&x);
        assert_eq!(y.as_slice()[0], 0.5);
        assert!(y.as_slice()[1] < 1e-6 && y.as_slice()[1] >= 0.0);
        assert!(y.is_finite());
        assert_eq!(y.as_slice()[2], 1.0);
    }
}
