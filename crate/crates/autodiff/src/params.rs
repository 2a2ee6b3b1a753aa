use indexmap::IndexMap;
use serde::{Deserialize, Serialize};

use crate::tape::{Tape, Var};
use crate::tensor::Tensor;
use crate::AutodiffError;

/// Named parameter segments (layer weights, biases) in a fixed order.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ParamVector {
    segments: IndexMap<String, Tensor>,
}

impl ParamVector {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor) -> Result<(), AutodiffError> {
        let name = name.into();
        if self.segments.contains_key(&name) {
            return Err(AutodiffError::DuplicateSegment(name));
        }
        self.segments.insert(name, value);
        Ok(())
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.segments.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.segments.get_mut(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.segments.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.segments.keys().map(String::as_str)
    }

    pub fn num_segments(&self) -> usize {
        self.segments.len()
    }

    pub fn total_len(&self) -> usize {
        self.segments.values().map(Tensor::len).sum()
    }

    pub fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.total_len());
        for t in self.segments.values() {
            out.extend_from_slice(t.data());
        }
        out
    }

    /// Rebuilds a vector with this one's segment structure from flat values.
    pub fn unflatten(&self, flat: &[f64]) -> Result<ParamVector, AutodiffError> {
        if flat.len() != self.total_len() {
            return Err(AutodiffError::Structure(format!(
                "flat length {} does not match total length {}",
                flat.len(),
                self.total_len()
            )));
        }
        let mut offset = 0;
        let mut segments = IndexMap::with_capacity(self.segments.len());
        for (name, t) in &self.segments {
            let n = t.len();
            let seg = Tensor::new(t.shape().to_vec(), flat[offset..offset + n].to_vec())?;
            segments.insert(name.clone(), seg);
            offset += n;
        }
        Ok(ParamVector { segments })
    }

    pub fn zeros_like(&self) -> ParamVector {
        ParamVector {
            segments: self
                .segments
                .iter()
                .map(|(k, t)| (k.clone(), Tensor::zeros(t.shape())))
                .collect(),
        }
    }

    /// Same segment names, order and shapes.
    pub fn same_structure(&self, other: &ParamVector) -> bool {
        self.segments.len() == other.segments.len()
            && self
                .segments
                .iter()
                .zip(&other.segments)
                .all(|((ka, a), (kb, b))| ka == kb && a.shape() == b.shape())
    }

    pub fn check_structure(&self, other: &ParamVector) -> Result<(), AutodiffError> {
        if self.same_structure(other) {
            return Ok(());
        }
        let describe = |p: &ParamVector| {
            p.segments
                .iter()
                .map(|(k, t)| format!("{k}{:?}", t.shape()))
                .collect::<Vec<_>>()
                .join(", ")
        };
        Err(AutodiffError::Structure(format!(
            "[{}] vs [{}]",
            describe(self),
            describe(other)
        )))
    }

    /// Elementwise combination of two structurally identical vectors.
    pub fn zip_map(&self, other: &ParamVector, f: impl Fn(f64, f64) -> f64) -> Result<ParamVector, AutodiffError> {
        self.check_structure(other)?;
        Ok(ParamVector {
            segments: self
                .segments
                .iter()
                .zip(other.segments.values())
                .map(|((k, a), b)| (k.clone(), a.zip_map(b, &f)))
                .collect(),
        })
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> ParamVector {
        ParamVector {
            segments: self.segments.iter().map(|(k, t)| (k.clone(), t.map(&f))).collect(),
        }
    }

    pub fn dot(&self, other: &ParamVector) -> Result<f64, AutodiffError> {
        self.check_structure(other)?;
        Ok(self
            .segments
            .values()
            .zip(other.segments.values())
            .map(|(a, b)| a.dot(b))
            .sum())
    }

    pub fn norm_sq(&self) -> f64 {
        self.segments.values().map(|t| t.dot(t)).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.segments.values().all(Tensor::is_finite)
    }

    /// Places every segment on `tape` as a differentiable leaf.
    pub fn bind<'t>(&self, tape: &'t Tape) -> ParamVars<'t> {
        ParamVars {
            vars: self
                .segments
                .iter()
                .map(|(k, t)| (k.clone(), tape.param(t.clone())))
                .collect(),
        }
    }

    /// Places every segment on `tape` as a constant.
    pub fn bind_const<'t>(&self, tape: &'t Tape) -> ParamVars<'t> {
        ParamVars {
            vars: self
                .segments
                .iter()
                .map(|(k, t)| (k.clone(), tape.constant(t.clone())))
                .collect(),
        }
    }
}

/// A [`ParamVector`] living on a tape.
#[derive(Clone, Debug)]
pub struct ParamVars<'t> {
    vars: IndexMap<String, Var<'t>>,
}

impl<'t> ParamVars<'t> {
    pub fn from_vars(vars: impl IntoIterator<Item = (String, Var<'t>)>) -> Self {
        ParamVars {
            vars: vars.into_iter().collect(),
        }
    }

    /// Panics if the segment does not exist: model code and parameters are
    /// created together, so a missing name is a programming error.
    pub fn get(&self, name: &str) -> Var<'t> {
        match self.vars.get(name) {
            Some(v) => *v,
            None => panic!("no parameter segment named `{name}`"),
        }
    }

    pub fn try_get(&self, name: &str) -> Option<Var<'t>> {
        self.vars.get(name).copied()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, Var<'t>)> + '_ {
        self.vars.iter().map(|(k, v)| (k.as_str(), *v))
    }

    pub fn vars(&self) -> Vec<Var<'t>> {
        self.vars.values().copied().collect()
    }

    pub fn len(&self) -> usize {
        self.vars.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vars.is_empty()
    }

    /// Pairs gradient vars (in segment order) with this vector's names.
    pub fn with_same_names(&self, vars: Vec<Var<'t>>) -> ParamVars<'t> {
        assert_eq!(vars.len(), self.vars.len());
        ParamVars {
            vars: self.vars.keys().cloned().zip(vars).collect(),
        }
    }

    /// Current numeric values.
    pub fn values(&self) -> ParamVector {
        ParamVector {
            segments: self.vars.iter().map(|(k, v)| (k.clone(), v.to_tensor())).collect(),
        }
    }

    /// `Σ_i ⟨self_i, other_i⟩` as a scalar node.
    pub fn dot(&self, other: &ParamVars<'t>) -> Var<'t> {
        let mut terms = self
            .vars
            .values()
            .zip(other.vars.values())
            .map(|(a, b)| (*a * *b).sum_all());
        let first = terms.next().expect("dot of empty parameter set");
        terms.fold(first, |acc, t| acc + t)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> ParamVector {
        let mut p = ParamVector::new();
        p.insert("w", Tensor::new(vec![2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap())
            .unwrap();
        p.insert("b", Tensor::row(vec![-0.5, 0.25])).unwrap();
        p
    }

    #[test]
    fn duplicate_names_rejected() {
        let mut p = sample();
        assert!(matches!(
            p.insert("w", Tensor::scalar(0.0)),
            Err(AutodiffError::DuplicateSegment(_))
        ));
    }

    #[test]
    fn flatten_order_follows_insertion() {
        let p = sample();
        assert_eq!(p.flatten(), vec![1.0, 2.0, 3.0, 4.0, -0.5, 0.25]);
        assert_eq!(p.total_len(), 6);
    }

    #[test]
    fn unflatten_rejects_wrong_length() {
        assert!(sample().unflatten(&[0.0; 5]).is_err());
    }

    #[test]
    fn structure_mismatch_is_detected() {
        let p = sample();
        let mut q = ParamVector::new();
        q.insert("w", Tensor::zeros(&[2, 2])).unwrap();
        assert!(p.check_structure(&q).is_err());
        assert!(p.dot(&q).is_err());
    }
}
