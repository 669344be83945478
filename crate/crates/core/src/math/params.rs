use serde::{Deserialize, Serialize};

use super::graph::{Graph, Var};
use super::tensor::Tensor;
use crate::error::{Error, Result};

/// A named, shaped window into a [`ParamVector`]'s buffer.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Segment {
    pub name: String,
    pub shape: Vec<usize>,
    pub offset: usize,
}

impl Segment {
    pub fn len(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn range(&self) -> std::ops::Range<usize> {
        self.offset..self.offset + self.len()
    }
}

/// Accumulates segments in order; offsets are assigned contiguously.
#[derive(Debug, Default, Clone)]
pub struct LayoutBuilder {
    segments: Vec<Segment>,
    next: usize,
}

impl LayoutBuilder {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, name: impl Into<String>, shape: &[usize]) -> Segment {
        let name = name.into();
        assert!(
            self.segments.iter().all(|s| s.name != name),
            "duplicate segment name {name}"
        );
        let seg = Segment {
            name,
            shape: shape.to_vec(),
            offset: self.next,
        };
        self.next += seg.len();
        self.segments.push(seg.clone());
        seg
    }

    pub fn zeros(self) -> ParamVector {
        ParamVector {
            values: Tensor::zeros(&[self.next]),
            segments: self.segments,
        }
    }
}

/// Flat parameter buffer partitioned into named segments.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamVector {
    segments: Vec<Segment>,
    values: Tensor,
}

impl ParamVector {
    pub fn from_parts(segments: Vec<Segment>, values: Vec<f64>) -> Result<Self> {
        let mut next = 0;
        for (i, s) in segments.iter().enumerate() {
            if s.offset != next {
                return Err(Error::contract(format!("segment {} does not start at {next}", s.name)));
            }
            if segments[..i].iter().any(|o| o.name == s.name) {
                return Err(Error::contract(format!("duplicate segment name {}", s.name)));
            }
            next += s.len();
        }
        if next != values.len() {
            return Err(Error::contract(format!(
                "segments cover {next} values but buffer has {}",
                values.len()
            )));
        }
        Ok(Self {
            segments,
            values: Tensor::vector(values),
        })
    }

    pub fn segments(&self) -> &[Segment] {
        &self.segments
    }

    pub fn segment(&self, name: &str) -> Option<&Segment> {
        self.segments.iter().find(|s| s.name == name)
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn values(&self) -> &[f64] {
        self.values.data()
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        self.values.data_mut()
    }

    pub fn tensor(&self) -> &Tensor {
        &self.values
    }

    pub fn segment_values(&self, name: &str) -> Option<&[f64]> {
        self.segment(name).map(|s| &self.values.data()[s.range()])
    }

    pub fn segment_values_mut(&mut self, name: &str) -> Option<&mut [f64]> {
        let range = self.segment(name)?.range();
        Some(&mut self.values.data_mut()[range])
    }

    /// Same layout, new buffer.
    pub fn with_values(&self, values: Vec<f64>) -> Result<Self> {
        if values.len() != self.len() {
            return Err(Error::contract(format!(
                "expected {} values, got {}",
                self.len(),
                values.len()
            )));
        }
        Ok(Self {
            segments: self.segments.clone(),
            values: Tensor::vector(values),
        })
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            segments: self.segments.clone(),
            values: Tensor::zeros(&[self.len()]),
        }
    }

    pub fn same_layout(&self, other: &ParamVector) -> bool {
        self.segments == other.segments
    }

    pub fn norm(&self) -> f64 {
        self.values.norm()
    }

    pub fn dot(&self, other: &ParamVector) -> f64 {
        self.values.dot(&other.values)
    }

    /// `self += alpha * other`.
    pub fn axpy(&mut self, alpha: f64, other: &ParamVector) {
        self.values.axpy(alpha, &other.values);
    }

    pub fn scaled(&self, c: f64) -> Self {
        Self {
            segments: self.segments.clone(),
            values: self.values.map(|x| c * x),
        }
    }

    pub fn sub(&self, other: &ParamVector) -> Self {
        Self {
            segments: self.segments.clone(),
            values: self.values.zip_map(&other.values, |a, b| a - b),
        }
    }

    pub fn all_finite(&self) -> bool {
        self.values.all_finite()
    }
}

/// A [`ParamVector`] registered on a graph; segments are sliced lazily.
#[derive(Debug, Clone, Copy)]
pub struct BoundParams<'p> {
    pub var: Var,
    pub params: &'p ParamVector,
}

impl<'p> BoundParams<'p> {
    pub fn param(g: &mut Graph, params: &'p ParamVector) -> Self {
        Self {
            var: g.param(params.values.clone()),
            params,
        }
    }

    pub fn constant(g: &mut Graph, params: &'p ParamVector) -> Self {
        Self {
            var: g.constant(params.values.clone()),
            params,
        }
    }

    pub fn get(&self, g: &mut Graph, name: &str) -> Var {
        let seg = self
            .params
            .segment(name)
            .unwrap_or_else(|| panic!("no parameter segment named {name}"));
        g.slice(self.var, seg.offset, &seg.shape)
    }
}

/// Reverse-mode gradient of a scalar loss with respect to `params`.
///
/// `loss_fn` receives the graph and the parameter leaf and must return a
/// scalar node. Returns the loss value and the gradient in `params`' layout.
pub fn grad<F>(params: &ParamVector, loss_fn: F) -> Result<(f64, ParamVector)>
where
    F: FnOnce(&mut Graph, BoundParams<'_>) -> Result<Var>,
{
    let mut g = Graph::new();
    let bound = BoundParams::param(&mut g, params);
    let out = loss_fn(&mut g, bound)?;
    let mut grads = g.backward(out)?;
    let value = g.value(out).item();
    let gt = grads.take(bound.var);
    Ok((
        value,
        ParamVector {
            segments: params.segments.clone(),
            values: gt,
        },
    ))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn layout() -> ParamVector {
        let mut b = LayoutBuilder::new();
        b.push("w", &[2, 3]);
        b.push("b", &[3]);
        b.zeros()
    }

    #[test]
    fn segments_partition_buffer() {
        let p = layout();
        assert_eq!(p.len(), 9);
        assert_eq!(p.segment("w").unwrap().range(), 0..6);
        assert_eq!(p.segment("b").unwrap().range(), 6..9);
    }

    #[test]
    fn from_parts_rejects_gaps() {
        let segs = vec![Segment {
            name: "a".into(),
            shape: vec![2],
            offset: 1,
        }];
        assert!(ParamVector::from_parts(segs, vec![0.0; 3]).is_err());
    }

    #[test]
    fn grad_through_segments() {
        let p = layout().with_values((0..9).map(|i| i as f64).collect()).unwrap();
        let (val, g) = grad(&p, |g, bp| {
            let b = bp.get(g, "b");
            let s = g.square(b);
            Ok(g.sum(s))
        })
        .unwrap();
        assert_eq!(val, 36.0 + 49.0 + 64.0);
        assert_eq!(g.values(), &[0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 12.0, 14.0, 16.0]);
    }
}
