//! Reverse-mode differentiation over a Wengert tape.
//!
//! A [`Tape`] records every primitive applied to its variables in the order
//! they are created, so the node list is already topologically sorted. The
//! backward sweep walks it once in reverse, handing each node's cotangent to
//! its inputs through the primitive's vector–Jacobian rule. Fan-out is
//! handled by summing cotangents.
//!
//! The primitive set is closed: matmul, add (with a row-broadcast bias
//! variant), sub, elementwise mul, tanh, sigmoid, relu, concat, slice,
//! scale, reduce-sum and square.

use thiserror::Error;

use crate::tensor::Tensor;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum AdError {
    #[error("{op}: shape mismatch between {left:?} and {right:?}")]
    ShapeMismatch {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },
    #[error("invalid shape {shape:?}: extents must be positive")]
    InvalidShape { shape: Vec<usize> },
    #[error("shape {shape:?} does not hold {len} elements")]
    DataLength { shape: Vec<usize>, len: usize },
    #[error("{op}: non-finite value at element {index}")]
    NonFinite { op: &'static str, index: usize },
    #[error("slice [{start}, {start}+{len}) out of range for {size} elements")]
    SliceRange {
        start: usize,
        len: usize,
        size: usize,
    },
    #[error("cotangent shape {got:?} does not match output shape {expected:?}")]
    CotangentShape {
        expected: Vec<usize>,
        got: Vec<usize>,
    },
    #[error("finite-difference step {0} outside (0, 1e-2]")]
    InvalidStep(f64),
    #[error("non-finite function value while perturbing input {input}, coordinate {coordinate}")]
    NonFiniteProbe { input: usize, coordinate: usize },
    #[error("unknown variable {0}")]
    UnknownVar(usize),
}

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum OpKind {
    /// Differentiable leaf.
    Input,
    /// Leaf excluded from differentiation.
    Constant,
    MatMul,
    Add,
    /// Matrix `[m, n]` plus vector `[n]` added to every row.
    BiasAdd,
    Sub,
    Mul,
    Tanh,
    Sigmoid,
    Relu,
    Concat,
    Slice { start: usize },
    Scale(f64),
    Sum,
    Square,
}

/// One recorded primitive. The stored value is the node's output; backward
/// rules read their inputs' values from the tape.
#[derive(Clone, Debug)]
pub struct TapeNode {
    op: OpKind,
    inputs: Vec<Var>,
    value: Tensor,
    needs_grad: bool,
}

impl TapeNode {
    pub fn op(&self) -> &OpKind {
        &self.op
    }

    pub fn inputs(&self) -> &[Var] {
        &self.inputs
    }

    pub fn value(&self) -> &Tensor {
        &self.value
    }
}

#[derive(Clone, Debug, Default)]
pub struct Tape {
    nodes: Vec<TapeNode>,
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn nodes(&self) -> &[TapeNode] {
        &self.nodes
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    fn push(&mut self, op: OpKind, inputs: Vec<Var>, value: Tensor) -> Var {
        let needs_grad = match op {
            OpKind::Input => true,
            OpKind::Constant => false,
            _ => inputs.iter().any(|i| self.nodes[i.0].needs_grad),
        };
        self.nodes.push(TapeNode {
            op,
            inputs,
            value,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn push_checked(
        &mut self,
        name: &'static str,
        op: OpKind,
        inputs: Vec<Var>,
        value: Tensor,
    ) -> Result<Var, AdError> {
        if let Some(index) = value.first_non_finite() {
            return Err(AdError::NonFinite { op: name, index });
        }
        Ok(self.push(op, inputs, value))
    }

    pub fn input(&mut self, value: Tensor) -> Var {
        self.push(OpKind::Input, Vec::new(), value)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(OpKind::Constant, Vec::new(), value)
    }

    /// `[m, k] · [k, n] -> [m, n]` or `[m, k] · [k] -> [m]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var, AdError> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        let mismatch = || AdError::ShapeMismatch {
            op: "matmul",
            left: sa.to_vec(),
            right: sb.to_vec(),
        };
        if sa.len() != 2 || sb.is_empty() || sb.len() > 2 || sa[1] != sb[0] {
            return Err(mismatch());
        }
        let (m, k) = (sa[0], sa[1]);
        let n = if sb.len() == 2 { sb[1] } else { 1 };
        let out_shape = if sb.len() == 2 { vec![m, n] } else { vec![m] };
        let (ad, bd) = (self.value(a).data(), self.value(b).data());
        let mut out = vec![0.0; m * n];
        if n == 1 {
            for (o, row) in out.iter_mut().zip(ad.chunks_exact(k)) {
                *o = dot(row, bd);
            }
            let value = Tensor::from_parts(out_shape, out);
            return self.push_checked("matmul", OpKind::MatMul, vec![a, b], value);
        }
        for i in 0..m {
            let row = &ad[i * k..(i + 1) * k];
            let dst = &mut out[i * n..(i + 1) * n];
            for (p, &aip) in row.iter().enumerate() {
                let brow = &bd[p * n..(p + 1) * n];
                for (o, &bpj) in dst.iter_mut().zip(brow) {
                    *o += aip * bpj;
                }
            }
        }
        let value = Tensor::from_parts(out_shape, out);
        self.push_checked("matmul", OpKind::MatMul, vec![a, b], value)
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<(), AdError> {
        if self.shape(a) != self.shape(b) {
            return Err(AdError::ShapeMismatch {
                op,
                left: self.shape(a).to_vec(),
                right: self.shape(b).to_vec(),
            });
        }
        Ok(())
    }

    fn zip_with(
        &mut self,
        name: &'static str,
        op: OpKind,
        a: Var,
        b: Var,
        f: impl Fn(f64, f64) -> f64,
    ) -> Result<Var, AdError> {
        self.same_shape(name, a, b)?;
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&x, &y)| f(x, y))
            .collect();
        let value = Tensor::from_parts(self.shape(a).to_vec(), data);
        self.push_checked(name, op, vec![a, b], value)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, AdError> {
        self.zip_with("add", OpKind::Add, a, b, |x, y| x + y)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var, AdError> {
        self.zip_with("sub", OpKind::Sub, a, b, |x, y| x - y)
    }

    /// Elementwise (Hadamard) product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, AdError> {
        self.zip_with("mul", OpKind::Mul, a, b, |x, y| x * y)
    }

    /// Adds vector `b` to every row of `a`. A vector `a` of matching length
    /// is treated as a single row.
    pub fn bias_add(&mut self, a: Var, b: Var) -> Result<Var, AdError> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        let cols = *sa.last().unwrap_or(&0);
        if sa.len() > 2 || sb.len() != 1 || sb[0] != cols {
            return Err(AdError::ShapeMismatch {
                op: "bias_add",
                left: sa.to_vec(),
                right: sb.to_vec(),
            });
        }
        let bias = self.value(b).data();
        let data = self
            .value(a)
            .data()
            .iter()
            .enumerate()
            .map(|(i, &x)| x + bias[i % cols])
            .collect();
        let value = Tensor::from_parts(sa.to_vec(), data);
        self.push_checked("bias_add", OpKind::BiasAdd, vec![a, b], value)
    }

    fn map(&mut self, op: OpKind, a: Var, f: impl Fn(f64) -> f64) -> Var {
        let data = self.value(a).data().iter().map(|&x| f(x)).collect();
        let value = Tensor::from_parts(self.shape(a).to_vec(), data);
        self.push(op, vec![a], value)
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        self.map(OpKind::Tanh, a, f64::tanh)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.map(OpKind::Sigmoid, a, sigmoid)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        self.map(OpKind::Relu, a, |x| x.max(0.0))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Result<Var, AdError> {
        let data = self.value(a).data().iter().map(|&x| c * x).collect();
        let value = Tensor::from_parts(self.shape(a).to_vec(), data);
        self.push_checked("scale", OpKind::Scale(c), vec![a], value)
    }

    pub fn square(&mut self, a: Var) -> Result<Var, AdError> {
        let data = self.value(a).data().iter().map(|&x| x * x).collect();
        let value = Tensor::from_parts(self.shape(a).to_vec(), data);
        self.push_checked("square", OpKind::Square, vec![a], value)
    }

    /// Sum of all elements, shape `[1]`.
    pub fn sum(&mut self, a: Var) -> Result<Var, AdError> {
        let s = self.value(a).data().iter().sum();
        self.push_checked("sum", OpKind::Sum, vec![a], Tensor::from_parts(vec![1], vec![s]))
    }

    /// Flattens and concatenates the inputs into one vector.
    pub fn concat(&mut self, parts: &[Var]) -> Result<Var, AdError> {
        if parts.is_empty() {
            return Err(AdError::InvalidShape { shape: vec![0] });
        }
        let mut data = Vec::new();
        for &p in parts {
            data.extend_from_slice(self.value(p).data());
        }
        let value = Tensor::from_parts(vec![data.len()], data);
        Ok(self.push(OpKind::Concat, parts.to_vec(), value))
    }

    /// Contiguous range `[start, start + len)` of the flattened input, as a
    /// vector.
    pub fn slice(&mut self, a: Var, start: usize, len: usize) -> Result<Var, AdError> {
        let size = self.value(a).len();
        if len == 0 || start + len > size {
            return Err(AdError::SliceRange { start, len, size });
        }
        let data = self.value(a).data()[start..start + len].to_vec();
        Ok(self.push(
            OpKind::Slice { start },
            vec![a],
            Tensor::from_parts(vec![len], data),
        ))
    }

    /// Reverse sweep from `output` seeded with `cotangent`.
    pub fn backward(&self, output: Var, cotangent: &Tensor) -> Result<Gradients, AdError> {
        if output.0 >= self.nodes.len() {
            return Err(AdError::UnknownVar(output.0));
        }
        let out_shape = self.shape(output);
        if cotangent.shape() != out_shape {
            return Err(AdError::CotangentShape {
                expected: out_shape.to_vec(),
                got: cotangent.shape().to_vec(),
            });
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; output.0 + 1];
        if self.nodes[output.0].needs_grad {
            grads[output.0] = Some(cotangent.data().to_vec());
        }
        for idx in (0..=output.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            self.propagate(node, &g, &mut grads);
            grads[idx] = Some(g);
        }
        let grads = grads
            .into_iter()
            .enumerate()
            .map(|(i, g)| match (&self.nodes[i].op, g) {
                (OpKind::Input, Some(g)) => {
                    Some(Tensor::from_parts(self.nodes[i].value.shape().to_vec(), g))
                }
                _ => None,
            })
            .collect();
        Ok(Gradients { grads })
    }

    fn propagate(&self, node: &TapeNode, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let wants = |v: Var| self.nodes[v.0].needs_grad;
        let inputs = &node.inputs;
        match &node.op {
            OpKind::Input | OpKind::Constant => {}
            OpKind::MatMul => {
                let (a, b) = (inputs[0], inputs[1]);
                let (sa, sb) = (self.shape(a), self.shape(b));
                let (m, k) = (sa[0], sa[1]);
                let n = if sb.len() == 2 { sb[1] } else { 1 };
                let (ad, bd) = (self.value(a).data(), self.value(b).data());
                if n == 1 {
                    // dA = g bᵀ, db = Aᵀ g
                    if wants(a) {
                        let ga = accum(grads, a, m * k);
                        for (grow, &gi) in ga.chunks_exact_mut(k).zip(g) {
                            add_into(grow, bd, gi);
                        }
                    }
                    if wants(b) {
                        let gb = accum(grads, b, k);
                        for (arow, &gi) in ad.chunks_exact(k).zip(g) {
                            add_into(gb, arow, gi);
                        }
                    }
                    return;
                }
                if wants(a) {
                    // dA = G · Bᵀ
                    let ga = accum(grads, a, m * k);
                    for i in 0..m {
                        let grow = &g[i * n..(i + 1) * n];
                        for p in 0..k {
                            let brow = &bd[p * n..(p + 1) * n];
                            ga[i * k + p] += dot(grow, brow);
                        }
                    }
                }
                if wants(b) {
                    // dB = Aᵀ · G
                    let gb = accum(grads, b, k * n);
                    for i in 0..m {
                        let grow = &g[i * n..(i + 1) * n];
                        for p in 0..k {
                            let aip = ad[i * k + p];
                            for (dst, &gij) in gb[p * n..(p + 1) * n].iter_mut().zip(grow) {
                                *dst += aip * gij;
                            }
                        }
                    }
                }
            }
            OpKind::Add => {
                for &x in inputs {
                    if wants(x) {
                        add_into(accum(grads, x, g.len()), g, 1.0);
                    }
                }
            }
            OpKind::Sub => {
                if wants(inputs[0]) {
                    add_into(accum(grads, inputs[0], g.len()), g, 1.0);
                }
                if wants(inputs[1]) {
                    add_into(accum(grads, inputs[1], g.len()), g, -1.0);
                }
            }
            OpKind::BiasAdd => {
                let (a, b) = (inputs[0], inputs[1]);
                if wants(a) {
                    add_into(accum(grads, a, g.len()), g, 1.0);
                }
                if wants(b) {
                    let cols = self.value(b).len();
                    let gb = accum(grads, b, cols);
                    for row in g.chunks(cols) {
                        add_into(gb, row, 1.0);
                    }
                }
            }
            OpKind::Mul => {
                let (a, b) = (inputs[0], inputs[1]);
                let (av, bv) = (self.value(a).data(), self.value(b).data());
                if wants(a) {
                    let ga = accum(grads, a, g.len());
                    for ((dst, &gi), &bi) in ga.iter_mut().zip(g).zip(bv) {
                        *dst += gi * bi;
                    }
                }
                if wants(b) {
                    let gb = accum(grads, b, g.len());
                    for ((dst, &gi), &ai) in gb.iter_mut().zip(g).zip(av) {
                        *dst += gi * ai;
                    }
                }
            }
            OpKind::Tanh | OpKind::Sigmoid | OpKind::Relu | OpKind::Square => {
                let a = inputs[0];
                if !wants(a) {
                    return;
                }
                let x = self.value(a).data();
                let y = node.value.data();
                let ga = accum(grads, a, g.len());
                for i in 0..g.len() {
                    let d = match node.op {
                        OpKind::Tanh => 1.0 - y[i] * y[i],
                        OpKind::Sigmoid => y[i] * (1.0 - y[i]),
                        OpKind::Relu => {
                            if x[i] > 0.0 {
                                1.0
                            } else {
                                0.0
                            }
                        }
                        _ => 2.0 * x[i],
                    };
                    ga[i] += g[i] * d;
                }
            }
            OpKind::Scale(c) => {
                if wants(inputs[0]) {
                    add_into(accum(grads, inputs[0], g.len()), g, *c);
                }
            }
            OpKind::Sum => {
                let a = inputs[0];
                if wants(a) {
                    let n = self.value(a).len();
                    for dst in accum(grads, a, n) {
                        *dst += g[0];
                    }
                }
            }
            OpKind::Concat => {
                let mut offset = 0;
                for &p in inputs {
                    let n = self.value(p).len();
                    if wants(p) {
                        add_into(accum(grads, p, n), &g[offset..offset + n], 1.0);
                    }
                    offset += n;
                }
            }
            OpKind::Slice { start } => {
                let a = inputs[0];
                if wants(a) {
                    let n = self.value(a).len();
                    add_into(&mut accum(grads, a, n)[*start..*start + g.len()], g, 1.0);
                }
            }
        }
    }
}

fn accum(grads: &mut [Option<Vec<f64>>], v: Var, n: usize) -> &mut [f64] {
    grads[v.0].get_or_insert_with(|| vec![0.0; n])
}

fn add_into(dst: &mut [f64], src: &[f64], c: f64) {
    for (d, &s) in dst.iter_mut().zip(src) {
        *d += c * s;
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Logistic function kept strictly inside (0, 1) even where the exact value
/// rounds to an endpoint.
pub(crate) fn sigmoid(x: f64) -> f64 {
    let y = if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    };
    y.clamp(f64::MIN_POSITIVE, 1.0 - f64::EPSILON / 2.0)
}

/// Cotangents of the differentiable leaves reached by a backward sweep.
/// Leaves the output does not depend on have no entry, meaning zero.
#[derive(Clone, Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    /// Gradient for `v`, materialising zeros when absent.
    pub fn get_or_zeros(&self, tape: &Tape, v: Var) -> Tensor {
        self.get(v)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(tape.value(v).shape()))
    }
}

/// A recorded forward evaluation: the tape, the leaf variables created for
/// each input, and the output variable.
#[derive(Clone, Debug)]
pub struct Recording {
    pub tape: Tape,
    pub inputs: Vec<Var>,
    pub output: Var,
}

impl Recording {
    pub fn output_value(&self) -> &Tensor {
        self.tape.value(self.output)
    }

    /// `cᵀ · ∂output/∂input` for every input, zeros where the output does
    /// not depend on an input.
    pub fn vjp(&self, cotangent: &Tensor) -> Result<Vec<Tensor>, AdError> {
        let grads = self.tape.backward(self.output, cotangent)?;
        Ok(self
            .inputs
            .iter()
            .map(|&v| grads.get_or_zeros(&self.tape, v))
            .collect())
    }
}

/// Records `build` applied to fresh differentiable leaves holding `inputs`.
pub fn forward<F>(inputs: &[Tensor], build: F) -> Result<Recording, AdError>
where
    F: FnOnce(&mut Tape, &[Var]) -> Result<Var, AdError>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.input(t.clone())).collect();
    let output = build(&mut tape, &vars)?;
    Ok(Recording {
        tape,
        inputs: vars,
        output,
    })
}

/// Fixed, deterministic cotangent used to reduce a tensor output to a scalar
/// for checking.
fn probe_cotangent(shape: &[usize]) -> Tensor {
    let n: usize = shape.iter().product();
    let data = (0..n).map(|i| 1.0 + 0.5 * ((i as f64) * 1.3).sin()).collect();
    Tensor::from_parts(shape.to_vec(), data)
}

/// Compares the tape's vector–Jacobian product against central finite
/// differences at `point`. Returns the largest `|a−b| / max(1, |a|, |b|)`
/// over all input coordinates.
pub fn grad_check<F>(build: F, point: &[Tensor], eps: f64) -> Result<f64, AdError>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var, AdError>,
{
    if !(eps > 0.0 && eps <= 1e-2) {
        return Err(AdError::InvalidStep(eps));
    }
    let rec = forward(point, &build)?;
    let c = probe_cotangent(rec.output_value().shape());
    let analytic = rec.vjp(&c)?;

    let scalar = |inputs: &[Tensor]| -> Option<f64> {
        let r = forward(inputs, &build).ok()?;
        let v: f64 = dot(r.output_value().data(), c.data());
        v.is_finite().then_some(v)
    };

    let mut worst = 0.0_f64;
    let mut probe = point.to_vec();
    for (input, grad) in analytic.iter().enumerate() {
        for coordinate in 0..point[input].len() {
            let x0 = point[input].data()[coordinate];
            probe[input].data_mut()[coordinate] = x0 + eps;
            let up = scalar(&probe);
            probe[input].data_mut()[coordinate] = x0 - eps;
            let down = scalar(&probe);
            probe[input].data_mut()[coordinate] = x0;
            let (Some(up), Some(down)) = (up, down) else {
                return Err(AdError::NonFiniteProbe { input, coordinate });
            };
            let numeric = (up - down) / (2.0 * eps);
            let a = grad.data()[coordinate];
            let err = (a - numeric).abs() / 1f64.max(a.abs()).max(numeric.abs());
            worst = worst.max(err);
        }
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn vec_t(v: &[f64]) -> Tensor {
        Tensor::vector(v.to_vec())
    }

    #[test]
    fn identity_graph() {
        let rec = forward(&[vec_t(&[2.0, 3.0])], |_, x| Ok(x[0])).unwrap();
        assert_eq!(rec.output_value().data(), &[2.0, 3.0]);
        assert_eq!(rec.tape.len(), 1);
        let g = rec.vjp(&vec_t(&[0.25, -4.0])).unwrap();
        assert_eq!(g[0].data(), &[0.25, -4.0]);
    }

    #[test]
    fn sum_of_squares() {
        let build = |t: &mut Tape, x: &[Var]| {
            let s = t.square(x[0])?;
            t.sum(s)
        };
        let rec = forward(&[vec_t(&[1.0, 2.0, 3.0])], build).unwrap();
        assert_eq!(rec.output_value().data(), &[14.0]);

        let rec = forward(&[Tensor::scalar(3.0)], build).unwrap();
        let g = rec.vjp(&Tensor::scalar(1.0)).unwrap();
        let h = 1e-5;
        let f = |x: f64| x * x;
        let oracle = (f(3.0 + h) - f(3.0 - h)) / (2.0 * h);
        assert!((g[0].data()[0] - 6.0).abs() < 1e-12);
        assert!((g[0].data()[0] - oracle).abs() < 1e-8);
    }

    #[test]
    fn matmul_all_ones() {
        let a = Tensor::new(vec![2, 3], vec![1.0; 6]).unwrap();
        let b = Tensor::new(vec![3, 1], vec![1.0; 3]).unwrap();
        let rec = forward(&[a, b], |t, x| t.matmul(x[0], x[1])).unwrap();
        assert_eq!(rec.output_value().shape(), &[2, 1]);
        assert_eq!(rec.output_value().data(), &[3.0, 3.0]);
    }

    #[test]
    fn constant_graph_has_zero_gradient() {
        let rec = forward(&[vec_t(&[1.5, -2.0])], |t, _| {
            Ok(t.constant(Tensor::scalar(5.0)))
        })
        .unwrap();
        let g = rec.vjp(&Tensor::scalar(7.0)).unwrap();
        assert_eq!(g[0].data(), &[0.0, 0.0]);
    }

    #[test]
    fn shape_errors_name_the_primitive() {
        let a = Tensor::new(vec![2, 3], vec![1.0; 6]).unwrap();
        let b = vec_t(&[1.0, 2.0]);
        let err = forward(&[a, b], |t, x| t.matmul(x[0], x[1])).unwrap_err();
        assert_eq!(
            err,
            AdError::ShapeMismatch {
                op: "matmul",
                left: vec![2, 3],
                right: vec![2]
            }
        );
        let err = forward(&[vec_t(&[1.0]), vec_t(&[1.0, 2.0])], |t, x| t.add(x[0], x[1]))
            .unwrap_err();
        assert!(err.to_string().starts_with("add"));
    }

    #[test]
    fn cotangent_shape_is_checked() {
        let rec = forward(&[vec_t(&[1.0, 2.0])], |t, x| Ok(t.tanh(x[0]))).unwrap();
        assert!(matches!(
            rec.vjp(&Tensor::scalar(1.0)),
            Err(AdError::CotangentShape { .. })
        ));
    }

    #[test]
    fn overflow_is_reported() {
        let err = forward(&[Tensor::scalar(1e200)], |t, x| t.square(x[0])).unwrap_err();
        assert!(matches!(err, AdError::NonFinite { op: "square", .. }));
    }

    #[test]
    fn tanh_check_against_closed_form() {
        let rec = forward(&[Tensor::scalar(0.5)], |t, x| Ok(t.tanh(x[0]))).unwrap();
        let g = rec.vjp(&Tensor::scalar(1.0)).unwrap()[0].data()[0];
        let sech2 = 1.0 / 0.5f64.cosh().powi(2);
        assert!((g - sech2).abs() < 1e-15);
        let err = grad_check(|t, x| Ok(t.tanh(x[0])), &[Tensor::scalar(0.5)], 1e-5).unwrap();
        assert!(err < 1e-6, "{err}");
    }

    #[test]
    fn linear_map_is_exact() {
        let w = Tensor::matrix(&[&[1.0, -2.0, 0.5], &[3.0, 0.25, -1.0]]);
        let build = move |t: &mut Tape, x: &[Var]| {
            let w = t.constant(w.clone());
            t.matmul(w, x[0])
        };
        let err = grad_check(build, &[vec_t(&[0.3, -0.7, 1.1])], 1e-5).unwrap();
        assert!(err < 1e-9, "{err}");
    }

    #[test]
    fn sigmoid_slope_at_zero() {
        let rec = forward(&[Tensor::scalar(0.0)], |t, x| Ok(t.sigmoid(x[0]))).unwrap();
        assert_eq!(rec.vjp(&Tensor::scalar(1.0)).unwrap()[0].data(), &[0.25]);
    }

    #[test]
    fn fan_out_accumulates() {
        // f(x) = x*x + x via mul of the same var
        let rec = forward(&[Tensor::scalar(2.0)], |t, x| {
            let sq = t.mul(x[0], x[0])?;
            t.add(sq, x[0])
        })
        .unwrap();
        assert_eq!(rec.vjp(&Tensor::scalar(1.0)).unwrap()[0].data(), &[5.0]);
    }

    #[test]
    fn rejects_bad_step() {
        assert!(grad_check(|_, x| Ok(x[0]), &[Tensor::scalar(1.0)], 0.1).is_err());
        assert!(grad_check(|_, x| Ok(x[0]), &[Tensor::scalar(1.0)], 0.0).is_err());
    }

    #[test]
    fn probe_failure_names_coordinate() {
        // (1e154·x)² overflows only once the probe pushes x past ~1.3407
        let err = grad_check(
            |t, x| {
                let second = t.slice(x[0], 1, 1)?;
                let s = t.scale(second, 1e154)?;
                t.square(s)
            },
            &[vec_t(&[1.0, 1.34])],
            1e-2,
        );
        assert_eq!(
            err,
            Err(AdError::NonFiniteProbe {
                input: 0,
                coordinate: 1
            })
        );
    }
}
