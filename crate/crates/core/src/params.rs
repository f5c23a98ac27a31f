//! Flat views over parameter trees.
//!
//! Models expose their tensors in a fixed order through [`ParamTree`]. The
//! optimizer, the gradient checker and the checkpoint format all work off
//! that order, so a gradient set is just another instance of the same tree.

use ndarray::{Array1, Array2};

use crate::error::{Error, Result};

/// A borrowed named tensor.
#[derive(Debug, Clone)]
pub struct TensorRef<'a> {
    pub name: String,
    pub shape: Shape,
    pub data: &'a [f64],
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Shape {
    Vector(usize),
    Matrix(usize, usize),
}

impl Shape {
    pub fn dims(&self) -> Vec<usize> {
        match *self {
            Shape::Vector(n) => vec![n],
            Shape::Matrix(r, c) => vec![r, c],
        }
    }

    pub fn len(&self) -> usize {
        match *self {
            Shape::Vector(n) => n,
            Shape::Matrix(r, c) => r * c,
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

pub trait ParamTree {
    /// Tensors in canonical order with their names.
    fn tensors(&self) -> Vec<TensorRef<'_>>;

    /// Mutable slices in the same order as [`ParamTree::tensors`].
    fn tensors_mut(&mut self) -> Vec<&mut [f64]>;

    fn num_params(&self) -> usize {
        self.tensors().iter().map(|t| t.data.len()).sum()
    }

    fn all_finite(&self) -> bool {
        self.tensors().iter().all(|t| t.data.iter().all(|x| x.is_finite()))
    }

    /// Sets every entry to zero.
    fn fill_zero(&mut self) {
        for t in self.tensors_mut() {
            t.fill(0.0);
        }
    }

    /// `self += scale * other`; trees must be congruent.
    fn add_scaled(&mut self, other: &Self, scale: f64) -> Result<()>
    where
        Self: Sized,
    {
        let src = other.tensors();
        let dst = self.tensors_mut();
        if src.len() != dst.len() {
            return Err(Error::Shape("parameter trees have different tensor counts".into()));
        }
        for (d, s) in dst.into_iter().zip(src) {
            if d.len() != s.data.len() {
                return Err(Error::Shape(format!("tensor `{}` length mismatch", s.name)));
            }
            for (a, b) in d.iter_mut().zip(s.data) {
                *a += scale * b;
            }
        }
        Ok(())
    }
}

pub(crate) fn mat(name: impl Into<String>, a: &Array2<f64>) -> TensorRef<'_> {
    let (r, c) = a.dim();
    TensorRef { name: name.into(), shape: Shape::Matrix(r, c), data: a.as_slice().expect("standard layout") }
}

pub(crate) fn vec1(name: impl Into<String>, a: &Array1<f64>) -> TensorRef<'_> {
    TensorRef { name: name.into(), shape: Shape::Vector(a.len()), data: a.as_slice().expect("standard layout") }
}

pub(crate) fn mat_mut(a: &mut Array2<f64>) -> &mut [f64] {
    a.as_slice_mut().expect("standard layout")
}

pub(crate) fn vec_mut(a: &mut Array1<f64>) -> &mut [f64] {
    a.as_slice_mut().expect("standard layout")
}

impl ParamTree for Array2<f64> {
    fn tensors(&self) -> Vec<TensorRef<'_>> {
        vec![mat("weight", self)]
    }

    fn tensors_mut(&mut self) -> Vec<&mut [f64]> {
        vec![mat_mut(self)]
    }
}
