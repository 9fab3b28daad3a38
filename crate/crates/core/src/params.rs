//! Named parameter traversal shared by checkpoints, the optimizer and the
//! gradient checks.

use crate::tensor::{FeatureMap, Filter};
use crate::{Error, Result, Scalar};

/// Joins a parameter path with `.`.
pub fn join(prefix: &str, name: &str) -> String {
    if prefix.is_empty() {
        name.to_string()
    } else {
        format!("{prefix}.{name}")
    }
}

/// A set of named real-valued tensors visited in a fixed order.
pub trait Parameters<T: Scalar> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, [usize; 4], &[T]));

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, [usize; 4], &mut [T]));

    fn parameter_count(&self) -> usize {
        let mut n = 0;
        self.visit("", &mut |_, _, v| n += v.len());
        n
    }

    /// All values concatenated in visiting order.
    fn flatten(&self) -> Vec<T> {
        let mut out = Vec::new();
        self.visit("", &mut |_, _, v| out.extend_from_slice(v));
        out
    }

    /// Inverse of [`Parameters::flatten`].
    fn assign_flat(&mut self, values: &[T]) -> Result<()> {
        let expected = self.parameter_count();
        if values.len() != expected {
            return Err(Error::shape(format!(
                "{} flat values for {expected} parameters",
                values.len()
            )));
        }
        let mut at = 0;
        self.visit_mut("", &mut |_, _, v| {
            v.copy_from_slice(&values[at..at + v.len()]);
            at += v.len();
        });
        Ok(())
    }

    fn named_tensors(&self, prefix: &str) -> Vec<(String, FeatureMap<T>)> {
        let mut out = Vec::new();
        self.visit(prefix, &mut |name, dims, v| {
            let map = FeatureMap::from_dims(dims, v.to_vec()).expect("parameter tensor");
            out.push((name.to_string(), map));
        });
        out
    }

    /// Overwrites every parameter from `tensors`, matching by name and shape.
    fn load_named(&mut self, prefix: &str, tensors: &[(String, FeatureMap<T>)]) -> Result<()> {
        let mut problem: Option<String> = None;
        let mut used = 0;
        self.visit_mut(prefix, &mut |name, dims, v| {
            if problem.is_some() {
                return;
            }
            match tensors.iter().find(|(n, _)| n == name) {
                None => problem = Some(format!("missing tensor `{name}`")),
                Some((_, m)) if m.shape().dims() != dims => {
                    problem = Some(format!(
                        "tensor `{name}` has shape {}, expected {:?}",
                        m.shape(),
                        dims
                    ))
                }
                Some((_, m)) => {
                    v.copy_from_slice(m.as_slice());
                    used += 1;
                }
            }
        });
        if let Some(p) = problem {
            return Err(Error::shape(p));
        }
        if used != tensors.len() {
            let mut known = Vec::new();
            self.visit(prefix, &mut |name, _, _| known.push(name.to_string()));
            let extra: Vec<_> = tensors
                .iter()
                .map(|(n, _)| n.as_str())
                .filter(|n| !known.iter().any(|k| k == n))
                .collect();
            return Err(Error::shape(format!(
                "unexpected tensors for this model: {}",
                extra.join(", ")
            )));
        }
        Ok(())
    }
}

impl<T: Scalar> Parameters<T> for Filter<T> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, [usize; 4], &[T])) {
        f(&join(prefix, "weight"), self.weight_dims(), &self.weights);
        if let Some(b) = &self.bias {
            f(&join(prefix, "bias"), [1, self.out_channels, 1, 1], b);
        }
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, [usize; 4], &mut [T])) {
        let dims = self.weight_dims();
        f(&join(prefix, "weight"), dims, &mut self.weights);
        let oc = self.out_channels;
        if let Some(b) = &mut self.bias {
            f(&join(prefix, "bias"), [1, oc, 1, 1], b);
        }
    }
}

impl<T: Scalar> Parameters<T> for Vec<Filter<T>> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, [usize; 4], &[T])) {
        for (i, filt) in self.iter().enumerate() {
            filt.visit(&join(prefix, &i.to_string()), f);
        }
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, [usize; 4], &mut [T])) {
        for (i, filt) in self.iter_mut().enumerate() {
            filt.visit_mut(&join(prefix, &i.to_string()), f);
        }
    }
}

impl<T: Scalar, P: Parameters<T>> Parameters<T> for Option<P> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, [usize; 4], &[T])) {
        if let Some(p) = self {
            p.visit(prefix, f);
        }
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, [usize; 4], &mut [T])) {
        if let Some(p) = self {
            p.visit_mut(prefix, f);
        }
    }
}

/// `a += b` over two parameter sets with identical layout.
pub fn accumulate<T: Scalar, P: Parameters<T>>(into: &mut P, other: &P) {
    let flat = other.flatten();
    let mut at = 0;
    into.visit_mut("", &mut |_, _, v| {
        for x in v.iter_mut() {
            *x += flat[at];
            at += 1;
        }
    });
}
