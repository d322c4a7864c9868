//! Named parameter collections and the `gradient` entry point.

use alloc::string::{String, ToString};
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use super::{Matrix, Tape, Var};
use crate::error::{Error, Result};

/// An ordered set of named matrices. Slot shapes never change once inserted.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ParamSet {
    names: Vec<String>,
    values: Vec<Matrix>,
}

impl ParamSet {
    pub fn new() -> Self {
        ParamSet::default()
    }

    pub fn insert(&mut self, name: &str, value: Matrix) -> Result<()> {
        if self.index(name).is_some() {
            return Err(Error::Param(alloc::format!("duplicate parameter slot `{name}`")));
        }
        self.names.push(name.to_string());
        self.values.push(value);
        Ok(())
    }

    fn index(&self, name: &str) -> Option<usize> {
        self.names.iter().position(|n| n == name)
    }

    pub fn get(&self, name: &str) -> Option<&Matrix> {
        self.index(name).map(|i| &self.values[i])
    }

    /// Panicking lookup for slots the caller created itself.
    pub fn slot(&self, name: &str) -> &Matrix {
        self.get(name).unwrap_or_else(|| panic!("no parameter slot `{name}`"))
    }

    /// Replaces a slot's value; the shape must match.
    pub fn set(&mut self, name: &str, value: Matrix) -> Result<()> {
        let i = self
            .index(name)
            .ok_or_else(|| Error::Param(alloc::format!("no parameter slot `{name}`")))?;
        if self.values[i].shape() != value.shape() {
            return Err(Error::shape("ParamSet::set", self.values[i].shape(), value.shape()));
        }
        self.values[i] = value;
        Ok(())
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Matrix)> {
        self.names.iter().map(String::as_str).zip(self.values.iter())
    }

    pub fn values(&self) -> &[Matrix] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [Matrix] {
        &mut self.values
    }

    pub fn shapes(&self) -> Vec<(String, (usize, usize))> {
        self.iter().map(|(n, m)| (n.to_string(), m.shape())).collect()
    }

    pub fn num_scalars(&self) -> usize {
        self.values.iter().map(Matrix::len).sum()
    }

    pub fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.num_scalars());
        for v in &self.values {
            out.extend_from_slice(v.as_slice());
        }
        out
    }

    /// Same layout as `self`, filled from `flat`.
    pub fn unflatten(&self, flat: &[f64]) -> Result<ParamSet> {
        if flat.len() != self.num_scalars() {
            return Err(Error::shape("unflatten", (self.num_scalars(), 1), (flat.len(), 1)));
        }
        let mut offset = 0;
        let values = self
            .values
            .iter()
            .map(|v| {
                let m = Matrix::from_raw(v.rows(), v.cols(), flat[offset..offset + v.len()].to_vec());
                offset += v.len();
                m
            })
            .collect();
        Ok(ParamSet {
            names: self.names.clone(),
            values,
        })
    }

    pub fn zeros_like(&self) -> ParamSet {
        ParamSet {
            names: self.names.clone(),
            values: self.values.iter().map(|v| Matrix::zeros(v.rows(), v.cols())).collect(),
        }
    }

    /// Records every slot as a leaf on `tape`.
    pub fn on_tape<'t>(&self, tape: &'t Tape) -> ParamVars<'t> {
        ParamVars {
            names: self.names.clone(),
            vars: self.values.iter().map(|v| tape.leaf(v.clone())).collect(),
        }
    }
}

/// Tape handles for each slot of a [`ParamSet`].
pub struct ParamVars<'t> {
    names: Vec<String>,
    vars: Vec<Var<'t>>,
}

impl<'t> ParamVars<'t> {
    pub fn get(&self, name: &str) -> Option<Var<'t>> {
        self.names.iter().position(|n| n == name).map(|i| self.vars[i])
    }

    pub fn slot(&self, name: &str) -> Var<'t> {
        self.get(name).unwrap_or_else(|| panic!("no parameter slot `{name}`"))
    }

    pub fn vars(&self) -> &[Var<'t>] {
        &self.vars
    }
}

/// Evaluates the scalar `f` and its gradient with respect to every slot.
pub fn gradient<F>(params: &ParamSet, f: F) -> Result<(f64, ParamSet)>
where
    F: for<'t> FnOnce(&'t Tape, &ParamVars<'t>) -> Result<Var<'t>>,
{
    let tape = Tape::new();
    let vars = params.on_tape(&tape);
    let out = f(&tape, &vars)?;
    let value = out.item();
    let grads = tape.backward(out)?;
    Ok((
        value,
        ParamSet {
            names: params.names.clone(),
            values: vars.vars.iter().map(|&v| grads.wrt(v)).collect(),
        },
    ))
}
