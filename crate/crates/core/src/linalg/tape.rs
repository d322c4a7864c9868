//! Matrix-valued reverse-mode tape.
//!
//! Every node holds a dense [`Matrix`]; primitives are recorded in evaluation
//! order and [`Tape::backward`] walks them in reverse, accumulating adjoints
//! in a fixed order so gradients are bit-reproducible. Linear solves and log
//! determinants use adjoint identities instead of differentiating through the
//! factorization.
//!
//! Operations that are not built from registered primitives can still be
//! recorded with [`Tape::opaque`]; asking for a gradient through such a node is
//! an [`Error::Unsupported`].

use alloc::boxed::Box;
use alloc::rc::Rc;
use alloc::vec;
use alloc::vec::Vec;
use core::cell::RefCell;
use core::fmt;

#[allow(unused_imports)]
use num_traits::Float;

use super::{gemm_into, Cholesky, Lu, Matrix};
use crate::error::{Error, Result};

/// A primitive with a user-supplied vector-Jacobian product.
pub trait CustomOp {
    fn name(&self) -> &'static str;

    fn forward(&self, inputs: &[&Matrix]) -> Result<Matrix>;

    /// Adjoints for each input given the output adjoint. `None` means zero.
    fn vjp(&self, inputs: &[&Matrix], output: &Matrix, grad: &Matrix) -> Result<Vec<Option<Matrix>>>;
}

enum Prim {
    Leaf,
    Const,
    Add,
    Sub,
    Neg,
    Scale(f64),
    ScaleBy,
    Hadamard,
    Matmul,
    Transpose,
    AddRowBroadcast,
    Exp,
    Ln,
    LeakyRelu(f64),
    Sigmoid,
    Clamp(f64, f64),
    Square,
    Sum,
    Symmetrize,
    Block { r0: usize, c0: usize, rows: usize, cols: usize },
    Reshape { rows: usize, cols: usize },
    VStack,
    SolveLu,
    SolveSpd,
    LogdetSpd,
    Custom(Box<dyn CustomOp>),
    Opaque(&'static str),
}

impl fmt::Debug for Prim {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Prim::Custom(op) => write!(f, "Custom({})", op.name()),
            Prim::Opaque(name) => write!(f, "Opaque({name})"),
            Prim::Scale(s) => write!(f, "Scale({s})"),
            Prim::LeakyRelu(s) => write!(f, "LeakyRelu({s})"),
            Prim::Clamp(a, b) => write!(f, "Clamp({a}, {b})"),
            Prim::Block { .. } => write!(f, "Block"),
            Prim::Reshape { .. } => write!(f, "Reshape"),
            other => write!(f, "{}", prim_name(other)),
        }
    }
}

fn prim_name(p: &Prim) -> &'static str {
    match p {
        Prim::Leaf => "leaf",
        Prim::Const => "const",
        Prim::Add => "add",
        Prim::Sub => "sub",
        Prim::Neg => "neg",
        Prim::Scale(_) => "scale",
        Prim::ScaleBy => "scale_by",
        Prim::Hadamard => "hadamard",
        Prim::Matmul => "matmul",
        Prim::Transpose => "transpose",
        Prim::AddRowBroadcast => "add_row",
        Prim::Exp => "exp",
        Prim::Ln => "ln",
        Prim::LeakyRelu(_) => "leaky_relu",
        Prim::Sigmoid => "sigmoid",
        Prim::Clamp(..) => "clamp",
        Prim::Square => "square",
        Prim::Sum => "sum",
        Prim::Symmetrize => "symmetrize",
        Prim::Block { .. } => "block",
        Prim::Reshape { .. } => "reshape",
        Prim::VStack => "vstack",
        Prim::SolveLu => "solve",
        Prim::SolveSpd => "solve_spd",
        Prim::LogdetSpd => "logdet_spd",
        Prim::Custom(op) => op.name(),
        Prim::Opaque(name) => name,
    }
}

enum Aux {
    None,
    Lu(Rc<Lu>),
    Chol(Rc<Cholesky>),
}

struct Node {
    value: Matrix,
    prim: Prim,
    parents: Vec<usize>,
    aux: Aux,
    needs_grad: bool,
}

/// Records a computation for one reverse sweep. Single-threaded and single-use.
#[derive(Default)]
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
}

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy)]
pub struct Var<'t> {
    tape: &'t Tape,
    id: usize,
}

impl fmt::Debug for Var<'_> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let nodes = self.tape.nodes.borrow();
        let n = &nodes[self.id];
        write!(f, "Var#{}({:?}, {:?})", self.id, n.prim, n.value.shape())
    }
}

/// Adjoints produced by [`Tape::backward`].
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Matrix>>,
    shapes: Vec<(usize, usize)>,
}

impl Gradients {
    pub fn get(&self, v: Var<'_>) -> Option<&Matrix> {
        self.grads[v.id].as_ref()
    }

    /// Adjoint of `v`, zero-filled when nothing reached it.
    pub fn wrt(&self, v: Var<'_>) -> Matrix {
        match &self.grads[v.id] {
            Some(g) => g.clone(),
            None => {
                let (r, c) = self.shapes[v.id];
                Matrix::zeros(r, c)
            }
        }
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn push(&self, value: Matrix, prim: Prim, parents: Vec<usize>, aux: Aux) -> Var<'_> {
        let mut nodes = self.nodes.borrow_mut();
        let needs_grad = match prim {
            Prim::Leaf => true,
            Prim::Const => false,
            _ => parents.iter().any(|&p| nodes[p].needs_grad),
        };
        let id = nodes.len();
        nodes.push(Node {
            value,
            prim,
            parents,
            aux,
            needs_grad,
        });
        Var { tape: self, id }
    }

    /// Differentiable input.
    pub fn leaf(&self, value: Matrix) -> Var<'_> {
        self.push(value, Prim::Leaf, Vec::new(), Aux::None)
    }

    /// Input that never receives a gradient.
    pub fn constant(&self, value: Matrix) -> Var<'_> {
        self.push(value, Prim::Const, Vec::new(), Aux::None)
    }

    pub fn scalar(&self, value: f64) -> Var<'_> {
        self.constant(Matrix::scalar(value))
    }

    /// Records a value computed outside the tape from `inputs`. Backpropagating
    /// into it fails with [`Error::Unsupported`].
    pub fn opaque<'t>(&'t self, name: &'static str, inputs: &[Var<'t>], value: Matrix) -> Var<'t> {
        let parents = inputs.iter().map(|v| v.id).collect();
        self.push(value, Prim::Opaque(name), parents, Aux::None)
    }

    pub fn custom<'t>(&'t self, op: impl CustomOp + 'static, inputs: &[Var<'t>]) -> Result<Var<'t>> {
        let parents: Vec<usize> = inputs.iter().map(|v| v.id).collect();
        let value = {
            let nodes = self.nodes.borrow();
            let vals: Vec<&Matrix> = parents.iter().map(|&p| &nodes[p].value).collect();
            op.forward(&vals)?
        };
        Ok(self.push(value, Prim::Custom(Box::new(op)), parents, Aux::None))
    }

    /// Cholesky-factors the (symmetrized) SPD node `a` once so that several
    /// solves and a log-determinant can share it.
    pub fn spd_factor<'t>(&'t self, a: Var<'t>) -> Result<SpdFactor<'t>> {
        let chol = {
            let nodes = self.nodes.borrow();
            let m = &nodes[a.id].value;
            if !m.is_square() {
                return Err(Error::shape("spd_factor", m.shape(), m.shape()));
            }
            Cholesky::new(&m.symmetrize())?
        };
        Ok(SpdFactor {
            a,
            chol: Rc::new(chol),
        })
    }

    fn unary(&self, a: Var<'_>, prim: Prim) -> Var<'_> {
        let value = {
            let nodes = self.nodes.borrow();
            let x = &nodes[a.id].value;
            eval_unary(&prim, x)
        };
        self.push(value, prim, vec![a.id], Aux::None)
    }

    fn value_of(&self, id: usize) -> Matrix {
        self.nodes.borrow()[id].value.clone()
    }

    fn shape_of(&self, id: usize) -> (usize, usize) {
        self.nodes.borrow()[id].value.shape()
    }

    /// Reverse sweep from the scalar node `out`.
    pub fn backward(&self, out: Var<'_>) -> Result<Gradients> {
        let nodes = self.nodes.borrow();
        let n = nodes.len();
        if nodes[out.id].value.shape() != (1, 1) {
            let s = nodes[out.id].value.shape();
            return Err(Error::shape("backward", s, (1, 1)));
        }
        let shapes: Vec<(usize, usize)> = nodes.iter().map(|nd| nd.value.shape()).collect();
        let mut grads: Vec<Option<Matrix>> = (0..n).map(|_| None).collect();
        grads[out.id] = Some(Matrix::scalar(1.0));

        for id in (0..=out.id).rev() {
            let node = &nodes[id];
            if !node.needs_grad || node.parents.is_empty() {
                continue;
            }
            let g = match grads[id].take() {
                Some(g) => g,
                None => continue,
            };
            let pv = |k: usize| &nodes[node.parents[k]].value;
            let need = |k: usize| nodes[node.parents[k]].needs_grad;
            let mut contrib: Vec<Option<Matrix>> = vec![None; node.parents.len()];
            match &node.prim {
                Prim::Leaf | Prim::Const => {}
                Prim::Add => {
                    contrib[0] = Some(g.clone());
                    contrib[1] = Some(g.clone());
                }
                Prim::Sub => {
                    contrib[0] = Some(g.clone());
                    contrib[1] = Some(g.scale(-1.0));
                }
                Prim::Neg => contrib[0] = Some(g.scale(-1.0)),
                Prim::Scale(s) => contrib[0] = Some(g.scale(*s)),
                Prim::ScaleBy => {
                    let s = pv(1).item();
                    if need(0) {
                        contrib[0] = Some(g.scale(s));
                    }
                    if need(1) {
                        contrib[1] = Some(Matrix::scalar(g.dot(pv(0))));
                    }
                }
                Prim::Hadamard => {
                    if need(0) {
                        contrib[0] = Some(g.zip_map(pv(1), |a, b| a * b));
                    }
                    if need(1) {
                        contrib[1] = Some(g.zip_map(pv(0), |a, b| a * b));
                    }
                }
                Prim::Matmul => {
                    let (a, b) = (pv(0), pv(1));
                    if need(0) {
                        let mut ga = Matrix::zeros(a.rows(), a.cols());
                        gemm_into(1.0, &g, false, b, true, 0.0, &mut ga);
                        contrib[0] = Some(ga);
                    }
                    if need(1) {
                        let mut gb = Matrix::zeros(b.rows(), b.cols());
                        gemm_into(1.0, a, true, &g, false, 0.0, &mut gb);
                        contrib[1] = Some(gb);
                    }
                }
                Prim::Transpose => contrib[0] = Some(g.transpose()),
                Prim::AddRowBroadcast => {
                    if need(0) {
                        contrib[0] = Some(g.clone());
                    }
                    if need(1) {
                        let mut s = Matrix::zeros(1, g.cols());
                        for i in 0..g.rows() {
                            for (acc, v) in s.as_mut_slice().iter_mut().zip(g.row(i)) {
                                *acc += v;
                            }
                        }
                        contrib[1] = Some(s);
                    }
                }
                Prim::Exp => contrib[0] = Some(g.zip_map(&node.value, |a, b| a * b)),
                Prim::Ln => contrib[0] = Some(g.zip_map(pv(0), |a, b| a / b)),
                Prim::LeakyRelu(slope) => {
                    let s = *slope;
                    contrib[0] = Some(g.zip_map(pv(0), |a, x| if x > 0.0 { a } else { a * s }));
                }
                Prim::Sigmoid => {
                    contrib[0] = Some(g.zip_map(&node.value, |a, y| a * y * (1.0 - y)));
                }
                Prim::Clamp(lo, hi) => {
                    let (lo, hi) = (*lo, *hi);
                    contrib[0] = Some(g.zip_map(pv(0), |a, x| if x > lo && x < hi { a } else { 0.0 }));
                }
                Prim::Square => contrib[0] = Some(g.zip_map(pv(0), |a, x| 2.0 * a * x)),
                Prim::Sum => {
                    let (r, c) = pv(0).shape();
                    contrib[0] = Some(Matrix::filled(r, c, g.item()));
                }
                Prim::Symmetrize => contrib[0] = Some(g.symmetrize()),
                Prim::Block { r0, c0, .. } => {
                    let (r, c) = pv(0).shape();
                    let mut full = Matrix::zeros(r, c);
                    full.set_block(*r0, *c0, &g);
                    contrib[0] = Some(full);
                }
                Prim::Reshape { .. } => {
                    let (r, c) = pv(0).shape();
                    contrib[0] = Some(g.clone().reshape(r, c)?);
                }
                Prim::VStack => {
                    let mut r0 = 0;
                    for k in 0..node.parents.len() {
                        let (r, c) = pv(k).shape();
                        if need(k) {
                            contrib[k] = Some(g.block(r0, 0, r, c));
                        }
                        r0 += r;
                    }
                }
                Prim::SolveLu => {
                    let lu = match &node.aux {
                        Aux::Lu(lu) => lu,
                        _ => unreachable!("solve node without LU factor"),
                    };
                    let gb = lu.solve_transpose(&g)?;
                    if need(0) {
                        let mut ga = Matrix::zeros(lu.dim(), lu.dim());
                        gemm_into(-1.0, &gb, false, &node.value, true, 0.0, &mut ga);
                        contrib[0] = Some(ga);
                    }
                    if need(1) {
                        contrib[1] = Some(gb);
                    }
                }
                Prim::SolveSpd => {
                    let chol = match &node.aux {
                        Aux::Chol(c) => c,
                        _ => unreachable!("solve_spd node without Cholesky factor"),
                    };
                    let gb = chol.solve(&g)?;
                    if need(0) {
                        let mut ga = Matrix::zeros(chol.dim(), chol.dim());
                        gemm_into(-1.0, &gb, false, &node.value, true, 0.0, &mut ga);
                        contrib[0] = Some(ga.symmetrize());
                    }
                    if need(1) {
                        contrib[1] = Some(gb);
                    }
                }
                Prim::LogdetSpd => {
                    let chol = match &node.aux {
                        Aux::Chol(c) => c,
                        _ => unreachable!("logdet node without Cholesky factor"),
                    };
                    contrib[0] = Some(chol.inverse().symmetrize().scale(g.item()));
                }
                Prim::Custom(op) => {
                    let inputs: Vec<&Matrix> = node.parents.iter().map(|&p| &nodes[p].value).collect();
                    let out = op.vjp(&inputs, &node.value, &g)?;
                    for (k, c) in out.into_iter().enumerate().take(node.parents.len()) {
                        contrib[k] = c;
                    }
                }
                Prim::Opaque(name) => {
                    if g.max_abs() != 0.0 {
                        return Err(Error::Unsupported(name));
                    }
                }
            }
            for (k, c) in contrib.into_iter().enumerate() {
                let p = node.parents[k];
                if !nodes[p].needs_grad {
                    continue;
                }
                if let Some(c) = c {
                    debug_assert_eq!(c.shape(), shapes[p], "adjoint shape for {:?}", node.prim);
                    match &mut grads[p] {
                        Some(acc) => acc.add_assign(&c),
                        slot @ None => *slot = Some(c),
                    }
                }
            }
            // leaves keep their adjoint; intermediate adjoints were taken above
        }
        Ok(Gradients { grads, shapes })
    }

    /// Re-evaluates every recorded primitive from the stored inputs and returns
    /// the recomputed node values. Opaque nodes keep their recorded value.
    pub fn replay(&self) -> Result<Vec<Matrix>> {
        let nodes = self.nodes.borrow();
        let mut values: Vec<Matrix> = Vec::with_capacity(nodes.len());
        for node in nodes.iter() {
            let inputs: Vec<&Matrix> = node.parents.iter().map(|&p| &values[p]).collect();
            let v = match &node.prim {
                Prim::Leaf | Prim::Const | Prim::Opaque(_) => node.value.clone(),
                Prim::Custom(op) => op.forward(&inputs)?,
                Prim::SolveLu => Lu::new(inputs[0])?.solve(inputs[1])?,
                Prim::SolveSpd => Cholesky::new(&inputs[0].symmetrize())?.solve(inputs[1])?,
                Prim::LogdetSpd => Matrix::scalar(Cholesky::new(&inputs[0].symmetrize())?.logdet()),
                prim if inputs.len() == 1 => eval_unary(prim, inputs[0]),
                prim => eval_nary(prim, &inputs)?,
            };
            values.push(v);
        }
        Ok(values)
    }

    /// Value of every node, in recording order.
    pub fn values(&self) -> Vec<Matrix> {
        self.nodes.borrow().iter().map(|n| n.value.clone()).collect()
    }
}

fn eval_unary(prim: &Prim, x: &Matrix) -> Matrix {
    match prim {
        Prim::Neg => x.scale(-1.0),
        Prim::Scale(s) => x.scale(*s),
        Prim::Transpose => x.transpose(),
        Prim::Exp => x.map(|v| v.exp()),
        Prim::Ln => x.map(|v| v.ln()),
        Prim::LeakyRelu(s) => {
            let s = *s;
            x.map(|v| if v > 0.0 { v } else { s * v })
        }
        Prim::Sigmoid => x.map(sigmoid),
        Prim::Clamp(lo, hi) => {
            let (lo, hi) = (*lo, *hi);
            x.map(|v| v.max(lo).min(hi))
        }
        Prim::Square => x.map(|v| v * v),
        Prim::Sum => Matrix::scalar(x.sum()),
        Prim::Symmetrize => x.symmetrize(),
        Prim::Block { r0, c0, rows, cols } => x.block(*r0, *c0, *rows, *cols),
        Prim::Reshape { rows, cols } => x.clone().reshape(*rows, *cols).expect("reshape checked at record time"),
        Prim::VStack => x.clone(),
        other => unreachable!("{:?} is not unary", other),
    }
}

fn eval_nary(prim: &Prim, inputs: &[&Matrix]) -> Result<Matrix> {
    Ok(match prim {
        Prim::Add => inputs[0].add(inputs[1])?,
        Prim::Sub => inputs[0].sub(inputs[1])?,
        Prim::Hadamard => inputs[0].hadamard(inputs[1])?,
        Prim::Matmul => inputs[0].matmul(inputs[1])?,
        Prim::ScaleBy => inputs[0].scale(inputs[1].item()),
        Prim::AddRowBroadcast => add_row(inputs[0], inputs[1])?,
        Prim::VStack => Matrix::vstack(inputs)?,
        other => unreachable!("{:?} is not n-ary", other),
    })
}

fn add_row(a: &Matrix, b: &Matrix) -> Result<Matrix> {
    if b.rows() != 1 || b.cols() != a.cols() {
        return Err(Error::shape("add_row", a.shape(), b.shape()));
    }
    let mut out = a.clone();
    for i in 0..a.rows() {
        for (o, v) in out.row_mut(i).iter_mut().zip(b.as_slice()) {
            *o += v;
        }
    }
    Ok(out)
}

#[inline]
pub(crate) fn sigmoid(v: f64) -> f64 {
    if v >= 0.0 {
        1.0 / (1.0 + (-v).exp())
    } else {
        let e = v.exp();
        e / (1.0 + e)
    }
}

/// A Cholesky factorization shared between solves and a log-determinant.
pub struct SpdFactor<'t> {
    a: Var<'t>,
    chol: Rc<Cholesky>,
}

impl<'t> SpdFactor<'t> {
    pub fn cholesky(&self) -> &Cholesky {
        &self.chol
    }

    /// `A⁻¹ B`.
    pub fn solve(&self, b: Var<'t>) -> Result<Var<'t>> {
        let tape = self.a.tape;
        let value = {
            let nodes = tape.nodes.borrow();
            self.chol.solve(&nodes[b.id].value)?
        };
        Ok(tape.push(value, Prim::SolveSpd, vec![self.a.id, b.id], Aux::Chol(self.chol.clone())))
    }

    pub fn logdet(&self) -> Var<'t> {
        let tape = self.a.tape;
        let value = Matrix::scalar(self.chol.logdet());
        tape.push(value, Prim::LogdetSpd, vec![self.a.id], Aux::Chol(self.chol.clone()))
    }
}

impl<'t> Var<'t> {
    pub fn tape(&self) -> &'t Tape {
        self.tape
    }

    pub fn id(&self) -> usize {
        self.id
    }

    pub fn value(&self) -> Matrix {
        self.tape.value_of(self.id)
    }

    /// Runs `f` on the stored value without cloning it.
    pub fn with_value<R>(&self, f: impl FnOnce(&Matrix) -> R) -> R {
        let nodes = self.tape.nodes.borrow();
        f(&nodes[self.id].value)
    }

    pub fn item(&self) -> f64 {
        self.with_value(|m| m.item())
    }

    pub fn shape(&self) -> (usize, usize) {
        self.tape.shape_of(self.id)
    }

    fn binary(self, rhs: Var<'t>, prim: Prim) -> Result<Var<'t>> {
        let value = {
            let nodes = self.tape.nodes.borrow();
            eval_nary(&prim, &[&nodes[self.id].value, &nodes[rhs.id].value])?
        };
        Ok(self.tape.push(value, prim, vec![self.id, rhs.id], Aux::None))
    }

    pub fn add(self, rhs: Var<'t>) -> Result<Var<'t>> {
        self.binary(rhs, Prim::Add)
    }

    pub fn sub(self, rhs: Var<'t>) -> Result<Var<'t>> {
        self.binary(rhs, Prim::Sub)
    }

    /// Elementwise product.
    pub fn mul(self, rhs: Var<'t>) -> Result<Var<'t>> {
        self.binary(rhs, Prim::Hadamard)
    }

    pub fn matmul(self, rhs: Var<'t>) -> Result<Var<'t>> {
        self.binary(rhs, Prim::Matmul)
    }

    /// Multiplies every entry by the `1 x 1` node `s`.
    pub fn scale_by(self, s: Var<'t>) -> Result<Var<'t>> {
        if s.shape() != (1, 1) {
            return Err(Error::shape("scale_by", self.shape(), s.shape()));
        }
        self.binary(s, Prim::ScaleBy)
    }

    /// Adds the `1 x cols` row `b` to every row.
    pub fn add_row(self, b: Var<'t>) -> Result<Var<'t>> {
        self.binary(b, Prim::AddRowBroadcast)
    }

    pub fn neg(self) -> Var<'t> {
        self.tape.unary(self, Prim::Neg)
    }

    pub fn scale(self, s: f64) -> Var<'t> {
        self.tape.unary(self, Prim::Scale(s))
    }

    pub fn t(self) -> Var<'t> {
        self.tape.unary(self, Prim::Transpose)
    }

    pub fn exp(self) -> Var<'t> {
        self.tape.unary(self, Prim::Exp)
    }

    pub fn ln(self) -> Var<'t> {
        self.tape.unary(self, Prim::Ln)
    }

    pub fn leaky_relu(self, slope: f64) -> Var<'t> {
        self.tape.unary(self, Prim::LeakyRelu(slope))
    }

    pub fn sigmoid(self) -> Var<'t> {
        self.tape.unary(self, Prim::Sigmoid)
    }

    pub fn clamp(self, lo: f64, hi: f64) -> Var<'t> {
        self.tape.unary(self, Prim::Clamp(lo, hi))
    }

    pub fn square(self) -> Var<'t> {
        self.tape.unary(self, Prim::Square)
    }

    pub fn sum(self) -> Var<'t> {
        self.tape.unary(self, Prim::Sum)
    }

    /// `(A + Aᵀ) / 2`.
    pub fn symmetrize(self) -> Result<Var<'t>> {
        let (r, c) = self.shape();
        if r != c {
            return Err(Error::shape("symmetrize", (r, c), (c, r)));
        }
        Ok(self.tape.unary(self, Prim::Symmetrize))
    }

    pub fn block(self, r0: usize, c0: usize, rows: usize, cols: usize) -> Result<Var<'t>> {
        let (r, c) = self.shape();
        if r0 + rows > r || c0 + cols > c {
            return Err(Error::shape("block", (r, c), (r0 + rows, c0 + cols)));
        }
        Ok(self.tape.unary(self, Prim::Block { r0, c0, rows, cols }))
    }

    /// Row `i` as a `1 x cols` node.
    pub fn row(self, i: usize) -> Result<Var<'t>> {
        let (_, c) = self.shape();
        self.block(i, 0, 1, c)
    }

    /// Entry `(i, j)` as a `1 x 1` node.
    pub fn entry(self, i: usize, j: usize) -> Result<Var<'t>> {
        self.block(i, j, 1, 1)
    }

    pub fn reshape(self, rows: usize, cols: usize) -> Result<Var<'t>> {
        let (r, c) = self.shape();
        if r * c != rows * cols {
            return Err(Error::shape("reshape", (r, c), (rows, cols)));
        }
        Ok(self.tape.unary(self, Prim::Reshape { rows, cols }))
    }

    pub fn vstack(parts: &[Var<'t>]) -> Result<Var<'t>> {
        let tape = parts.first().expect("vstack of nothing").tape;
        let value = {
            let nodes = tape.nodes.borrow();
            let vals: Vec<&Matrix> = parts.iter().map(|p| &nodes[p.id].value).collect();
            Matrix::vstack(&vals)?
        };
        Ok(tape.push(value, Prim::VStack, parts.iter().map(|p| p.id).collect(), Aux::None))
    }

    /// `A⁻¹ B` through an LU factorization of `self`.
    pub fn solve(self, b: Var<'t>) -> Result<Var<'t>> {
        let (value, lu) = {
            let nodes = self.tape.nodes.borrow();
            let lu = Lu::new(&nodes[self.id].value)?;
            (lu.solve(&nodes[b.id].value)?, lu)
        };
        Ok(self.tape.push(value, Prim::SolveLu, vec![self.id, b.id], Aux::Lu(Rc::new(lu))))
    }

    /// `A⁻¹ B` for symmetric positive definite `A` (symmetrized before factoring).
    pub fn solve_spd(self, b: Var<'t>) -> Result<Var<'t>> {
        self.tape.spd_factor(self)?.solve(b)
    }

    pub fn logdet_spd(self) -> Result<Var<'t>> {
        Ok(self.tape.spd_factor(self)?.logdet())
    }

    /// Frobenius inner product as a `1 x 1` node.
    pub fn dot(self, rhs: Var<'t>) -> Result<Var<'t>> {
        Ok(self.mul(rhs)?.sum())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn square_gradient() {
        let tape = Tape::new();
        let x = tape.leaf(Matrix::scalar(3.0));
        let f = x.mul(x).unwrap();
        let g = tape.backward(f).unwrap();
        assert_eq!(g.wrt(x).item(), 6.0);
    }

    #[test]
    fn opaque_blocks_gradient() {
        let tape = Tape::new();
        let x = tape.leaf(Matrix::scalar(2.0));
        let y = tape.opaque("external", &[x], Matrix::scalar(4.0));
        let out = y.sum();
        assert_eq!(tape.backward(out).unwrap_err(), Error::Unsupported("external"));
    }

    #[test]
    fn opaque_on_constants_is_fine() {
        let tape = Tape::new();
        let c = tape.constant(Matrix::scalar(2.0));
        let y = tape.opaque("external", &[c], Matrix::scalar(4.0));
        let x = tape.leaf(Matrix::scalar(1.5));
        let out = x.mul(y).unwrap();
        assert_eq!(tape.backward(out).unwrap().wrt(x).item(), 4.0);
    }

    #[test]
    fn backward_needs_scalar() {
        let tape = Tape::new();
        let x = tape.leaf(Matrix::zeros(2, 1));
        assert!(tape.backward(x).is_err());
    }
}
