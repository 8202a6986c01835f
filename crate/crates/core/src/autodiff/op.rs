//! Primitive operations: forward kernels and vector-Jacobian products.

use nalgebra::{DMatrix, DVector};

use super::{AdError, Tensor};

#[derive(Clone, Debug, PartialEq)]
pub enum Op {
    Add,
    Sub,
    Mul,
    Div,
    Neg,
    /// `c * a`
    Scale(f64),
    /// `a + c`
    Offset(f64),
    /// `a + c * b`
    Axpy(f64),
    MatMul,
    Transpose,
    Tanh,
    Exp,
    Sin,
    Cos,
    Abs,
    Powf(f64),
    Sum,
    Reshape(Vec<usize>),
    /// Contiguous range of the flattened input, returned as a vector.
    Slice {
        start: usize,
        len: usize,
    },
    /// Column range of a matrix.
    SliceCols {
        start: usize,
        len: usize,
    },
    /// Flattened concatenation.
    Concat,
    /// Side-by-side concatenation of matrices with equal row counts.
    ConcatCols,
    /// `[m, n] + [n]`, broadcast over rows.
    AddRow,
    /// `[m, n] * [n]`, broadcast over rows.
    MulRow,
    /// `A⁻¹ B` for square `A` and vector or matrix `B`.
    Solve,
    /// `R(φ) v` (or `R(φ)ᵀ v`) for a planar rotation about the third axis;
    /// inputs `φ [1]`, `v [3]`.
    Rotate {
        transpose: bool,
    },
    /// `Σ a²` as a scalar.
    SumSq,
    /// `a bᵀ` for vectors `a [m]`, `b [n]`.
    Outer,
    /// `W x + b` for `W [m, n]`, `x [n]`, `b [m]`.
    Affine,
}

impl Op {
    pub fn name(&self) -> &'static str {
        match self {
            Op::Add => "add",
            Op::Sub => "sub",
            Op::Mul => "mul",
            Op::Div => "div",
            Op::Neg => "neg",
            Op::Scale(_) => "scale",
            Op::Offset(_) => "offset",
            Op::Axpy(_) => "axpy",
            Op::MatMul => "matmul",
            Op::Transpose => "transpose",
            Op::Tanh => "tanh",
            Op::Exp => "exp",
            Op::Sin => "sin",
            Op::Cos => "cos",
            Op::Abs => "abs",
            Op::Powf(_) => "pow",
            Op::Sum => "sum",
            Op::Reshape(_) => "reshape",
            Op::Slice { .. } => "slice",
            Op::SliceCols { .. } => "slice_cols",
            Op::Concat => "concat",
            Op::ConcatCols => "concat_cols",
            Op::AddRow => "add_row",
            Op::MulRow => "mul_row",
            Op::Solve => "solve",
            Op::Rotate { transpose: false } => "rotate",
            Op::Rotate { transpose: true } => "rotate_t",
            Op::SumSq => "sum_sq",
            Op::Outer => "outer",
            Op::Affine => "affine",
        }
    }

    /// Looks up a parameter-free primitive by name.
    pub fn from_name(name: &str) -> Result<Op, AdError> {
        Ok(match name {
            "add" => Op::Add,
            "sub" => Op::Sub,
            "mul" => Op::Mul,
            "div" => Op::Div,
            "neg" => Op::Neg,
            "matmul" => Op::MatMul,
            "transpose" => Op::Transpose,
            "tanh" => Op::Tanh,
            "exp" => Op::Exp,
            "sin" => Op::Sin,
            "cos" => Op::Cos,
            "abs" => Op::Abs,
            "sum" => Op::Sum,
            "concat" => Op::Concat,
            "concat_cols" => Op::ConcatCols,
            "add_row" => Op::AddRow,
            "mul_row" => Op::MulRow,
            "solve" => Op::Solve,
            "rotate" => Op::Rotate { transpose: false },
            "rotate_t" => Op::Rotate { transpose: true },
            "sum_sq" => Op::SumSq,
            "outer" => Op::Outer,
            "affine" => Op::Affine,
            other => return Err(AdError::UnsupportedPrimitive(other.to_string())),
        })
    }

    fn arity(&self) -> Option<usize> {
        match self {
            Op::Concat | Op::ConcatCols => None,
            Op::Add
            | Op::Sub
            | Op::Mul
            | Op::Div
            | Op::Axpy(_)
            | Op::MatMul
            | Op::AddRow
            | Op::MulRow
            | Op::Solve
            | Op::Rotate { .. }
            | Op::Outer => Some(2),
            Op::Affine => Some(3),
            _ => Some(1),
        }
    }

    fn shape_err(&self, inputs: &[&Tensor]) -> AdError {
        let shapes: Vec<&[usize]> = inputs.iter().map(|t| t.shape()).collect();
        AdError::Shape(format!("{}: incompatible input shapes {shapes:?}", self.name()))
    }

    pub fn forward(&self, inputs: &[&Tensor]) -> Result<Tensor, AdError> {
        if let Some(n) = self.arity() {
            if inputs.len() != n {
                return Err(AdError::Shape(format!(
                    "{} takes {n} inputs, got {}",
                    self.name(),
                    inputs.len()
                )));
            }
        } else if inputs.is_empty() {
            return Err(AdError::Shape(format!("{} needs inputs", self.name())));
        }
        let out = match self {
            Op::Add => binary(inputs, |a, b| a + b).ok_or_else(|| self.shape_err(inputs))?,
            Op::Sub => binary(inputs, |a, b| a - b).ok_or_else(|| self.shape_err(inputs))?,
            Op::Mul => binary(inputs, |a, b| a * b).ok_or_else(|| self.shape_err(inputs))?,
            Op::Div => binary(inputs, |a, b| a / b).ok_or_else(|| self.shape_err(inputs))?,
            Op::Neg => inputs[0].map(|x| -x),
            Op::Scale(c) => inputs[0].map(|x| c * x),
            Op::Offset(c) => inputs[0].map(|x| x + c),
            Op::Axpy(c) => {
                let (a, b) = (inputs[0], inputs[1]);
                if a.shape() != b.shape() {
                    return Err(self.shape_err(inputs));
                }
                let data = a.data().iter().zip(b.data()).map(|(x, y)| x + c * y).collect();
                Tensor::from_parts(a.shape(), data)
            }
            Op::MatMul => {
                let (m, k, n, shape) = matmul_dims(inputs[0], inputs[1]).ok_or_else(|| self.shape_err(inputs))?;
                Tensor::from_parts(&shape, mm(inputs[0].data(), inputs[1].data(), m, k, n))
            }
            Op::Transpose => {
                let a = inputs[0];
                let (m, n) = dims2(a).ok_or_else(|| self.shape_err(inputs))?;
                Tensor::from_parts(&[n, m], transpose(a.data(), m, n))
            }
            Op::Tanh => inputs[0].map(f64::tanh),
            Op::Exp => inputs[0].map(f64::exp),
            Op::Sin => inputs[0].map(f64::sin),
            Op::Cos => inputs[0].map(f64::cos),
            Op::Abs => inputs[0].map(f64::abs),
            Op::Powf(p) => {
                let p = *p;
                if p.fract() == 0.0 && p.abs() < i32::MAX as f64 {
                    let n = p as i32;
                    inputs[0].map(|x| x.powi(n))
                } else {
                    inputs[0].map(|x| x.powf(p))
                }
            }
            Op::Sum => Tensor::scalar(inputs[0].data().iter().sum()),
            Op::Reshape(shape) => inputs[0].clone().reshaped(shape)?,
            Op::Slice { start, len } => {
                let a = inputs[0];
                if start + len > a.len() {
                    return Err(self.shape_err(inputs));
                }
                Tensor::vector(a.data()[*start..start + len].to_vec())
            }
            Op::SliceCols { start, len } => {
                let a = inputs[0];
                let (m, n) = dims2(a).ok_or_else(|| self.shape_err(inputs))?;
                if start + len > n {
                    return Err(self.shape_err(inputs));
                }
                let mut data = Vec::with_capacity(m * len);
                for r in 0..m {
                    data.extend_from_slice(&a.data()[r * n + start..r * n + start + len]);
                }
                Tensor::from_parts(&[m, *len], data)
            }
            Op::Concat => {
                let total = inputs.iter().map(|t| t.len()).sum();
                let mut data = Vec::with_capacity(total);
                for t in inputs {
                    data.extend_from_slice(t.data());
                }
                Tensor::vector(data)
            }
            Op::ConcatCols => {
                let m = dims2(inputs[0]).ok_or_else(|| self.shape_err(inputs))?.0;
                let mut widths = Vec::with_capacity(inputs.len());
                for t in inputs {
                    match dims2(t) {
                        Some((rows, w)) if rows == m => widths.push(w),
                        _ => return Err(self.shape_err(inputs)),
                    }
                }
                let total: usize = widths.iter().sum();
                let mut data = Vec::with_capacity(m * total);
                for r in 0..m {
                    for (t, &w) in inputs.iter().zip(&widths) {
                        data.extend_from_slice(&t.data()[r * w..(r + 1) * w]);
                    }
                }
                Tensor::from_parts(&[m, total], data)
            }
            Op::AddRow | Op::MulRow => {
                let (a, b) = (inputs[0], inputs[1]);
                let (m, n) = dims2(a).ok_or_else(|| self.shape_err(inputs))?;
                if b.rank() != 1 || b.len() != n {
                    return Err(self.shape_err(inputs));
                }
                let mut data = a.data().to_vec();
                let add = matches!(self, Op::AddRow);
                for r in 0..m {
                    for (x, y) in data[r * n..(r + 1) * n].iter_mut().zip(b.data()) {
                        if add {
                            *x += y;
                        } else {
                            *x *= y;
                        }
                    }
                }
                Tensor::from_parts(&[m, n], data)
            }
            Op::Solve => {
                let (a, b) = (inputs[0], inputs[1]);
                let n = match dims2(a) {
                    Some((r, c)) if r == c => r,
                    _ => return Err(self.shape_err(inputs)),
                };
                if b.shape().first() != Some(&n) || b.rank() > 2 {
                    return Err(self.shape_err(inputs));
                }
                let x = solve(a.data(), n, b.data(), b.len() / n.max(1), false)?;
                Tensor::from_parts(b.shape(), x)
            }
            Op::Rotate { transpose } => {
                let (phi, v) = (inputs[0], inputs[1]);
                if phi.len() != 1 || v.len() != 3 || v.rank() != 1 {
                    return Err(self.shape_err(inputs));
                }
                let (s, c) = phi.data()[0].sin_cos();
                let s = if *transpose { -s } else { s };
                let v = v.data();
                Tensor::vector(vec![c * v[0] - s * v[1], s * v[0] + c * v[1], v[2]])
            }
            Op::SumSq => Tensor::scalar(inputs[0].data().iter().map(|x| x * x).sum()),
            Op::Outer => {
                let (a, b) = (inputs[0], inputs[1]);
                if a.rank() != 1 || b.rank() != 1 {
                    return Err(self.shape_err(inputs));
                }
                let data = a
                    .data()
                    .iter()
                    .flat_map(|x| b.data().iter().map(move |y| x * y))
                    .collect();
                Tensor::from_parts(&[a.len(), b.len()], data)
            }
            Op::Affine => {
                let (w, x, b) = (inputs[0], inputs[1], inputs[2]);
                let (m, n) = dims2(w).ok_or_else(|| self.shape_err(inputs))?;
                if x.rank() != 1 || x.len() != n || b.rank() != 1 || b.len() != m {
                    return Err(self.shape_err(inputs));
                }
                let mut y = mm(w.data(), x.data(), m, n, 1);
                for (yi, bi) in y.iter_mut().zip(b.data()) {
                    *yi += bi;
                }
                Tensor::vector(y)
            }
        };
        Ok(out)
    }

    /// Cotangents of the inputs given the output cotangent `g`. Entries for
    /// inputs with `needs[i] == false` are left as `None`.
    pub fn backward(
        &self,
        inputs: &[&Tensor],
        out: &Tensor,
        g: &Tensor,
        needs: &[bool],
    ) -> Result<Vec<Option<Tensor>>, AdError> {
        let mut grads: Vec<Option<Tensor>> = vec![None; inputs.len()];
        let gd = g.data();
        match self {
            Op::Add | Op::Sub | Op::Mul | Op::Div => {
                let (a, b) = (inputs[0], inputs[1]);
                let n = out.len();
                let ai = |i: usize| if a.len() == 1 { a.data()[0] } else { a.data()[i] };
                let bi = |i: usize| if b.len() == 1 { b.data()[0] } else { b.data()[i] };
                if needs[0] {
                    let da: Vec<f64> = match self {
                        Op::Add | Op::Sub => gd.to_vec(),
                        Op::Mul => (0..n).map(|i| gd[i] * bi(i)).collect(),
                        _ => (0..n).map(|i| gd[i] / bi(i)).collect(),
                    };
                    grads[0] = Some(reduce_broadcast(da, a));
                }
                if needs[1] {
                    let db: Vec<f64> = match self {
                        Op::Add => gd.to_vec(),
                        Op::Sub => gd.iter().map(|x| -x).collect(),
                        Op::Mul => (0..n).map(|i| gd[i] * ai(i)).collect(),
                        _ => (0..n)
                            .map(|i| {
                                let bv = bi(i);
                                -gd[i] * ai(i) / (bv * bv)
                            })
                            .collect(),
                    };
                    grads[1] = Some(reduce_broadcast(db, b));
                }
            }
            Op::Neg => grads[0] = Some(g.map(|x| -x)),
            Op::Scale(c) => grads[0] = Some(g.map(|x| c * x)),
            Op::Offset(_) => grads[0] = Some(g.clone()),
            Op::Axpy(c) => {
                if needs[0] {
                    grads[0] = Some(g.clone());
                }
                if needs[1] {
                    grads[1] = Some(g.map(|x| c * x));
                }
            }
            Op::MatMul => {
                let (a, b) = (inputs[0], inputs[1]);
                let (m, k, n, _) = matmul_dims(a, b).ok_or_else(|| self.shape_err(inputs))?;
                if needs[0] {
                    // dA = G Bᵀ with G [m,n], B [k,n]
                    grads[0] = Some(Tensor::from_parts(a.shape(), mm_bt(gd, b.data(), m, n, k)));
                }
                if needs[1] {
                    // dB = Aᵀ G with A [m,k], G [m,n]
                    grads[1] = Some(Tensor::from_parts(b.shape(), mm_at(a.data(), gd, m, k, n)));
                }
            }
            Op::Transpose => {
                let (m, n) = dims2(inputs[0]).ok_or_else(|| self.shape_err(inputs))?;
                grads[0] = Some(Tensor::from_parts(&[m, n], transpose(gd, n, m)));
            }
            Op::Tanh => {
                let data = out.data().iter().zip(gd).map(|(y, g)| g * (1.0 - y * y)).collect();
                grads[0] = Some(Tensor::from_parts(out.shape(), data));
            }
            Op::Exp => {
                let data = out.data().iter().zip(gd).map(|(y, g)| g * y).collect();
                grads[0] = Some(Tensor::from_parts(out.shape(), data));
            }
            Op::Sin | Op::Cos | Op::Abs | Op::Powf(_) => {
                let x = inputs[0];
                let d = |v: f64| -> f64 {
                    match self {
                        Op::Sin => v.cos(),
                        Op::Cos => -v.sin(),
                        Op::Abs => {
                            if v > 0.0 {
                                1.0
                            } else if v < 0.0 {
                                -1.0
                            } else {
                                0.0
                            }
                        }
                        Op::Powf(p) => {
                            if *p == 0.0 {
                                0.0
                            } else if p.fract() == 0.0 {
                                p * v.powi(*p as i32 - 1)
                            } else {
                                p * v.powf(p - 1.0)
                            }
                        }
                        _ => unreachable!(),
                    }
                };
                let data = x.data().iter().zip(gd).map(|(&v, g)| g * d(v)).collect();
                grads[0] = Some(Tensor::from_parts(x.shape(), data));
            }
            Op::Sum => grads[0] = Some(Tensor::filled(inputs[0].shape(), g.item())),
            Op::Reshape(_) => grads[0] = Some(Tensor::from_parts(inputs[0].shape(), gd.to_vec())),
            Op::Slice { start, .. } => {
                let mut t = Tensor::zeros(inputs[0].shape());
                t.data_mut()[*start..start + gd.len()].copy_from_slice(gd);
                grads[0] = Some(t);
            }
            Op::SliceCols { start, len } => {
                let (m, n) = dims2(inputs[0]).ok_or_else(|| self.shape_err(inputs))?;
                let mut t = Tensor::zeros(&[m, n]);
                for r in 0..m {
                    t.data_mut()[r * n + start..r * n + start + len].copy_from_slice(&gd[r * len..(r + 1) * len]);
                }
                grads[0] = Some(t);
            }
            Op::Concat => {
                let mut offset = 0;
                for (i, t) in inputs.iter().enumerate() {
                    if needs[i] {
                        grads[i] = Some(Tensor::from_parts(t.shape(), gd[offset..offset + t.len()].to_vec()));
                    }
                    offset += t.len();
                }
            }
            Op::ConcatCols => {
                let (m, total) = dims2(out).ok_or_else(|| self.shape_err(inputs))?;
                let mut offset = 0;
                for (i, t) in inputs.iter().enumerate() {
                    let w = t.shape()[1];
                    if needs[i] {
                        let mut data = Vec::with_capacity(m * w);
                        for r in 0..m {
                            data.extend_from_slice(&gd[r * total + offset..r * total + offset + w]);
                        }
                        grads[i] = Some(Tensor::from_parts(&[m, w], data));
                    }
                    offset += w;
                }
            }
            Op::AddRow => {
                let (m, n) = dims2(inputs[0]).ok_or_else(|| self.shape_err(inputs))?;
                if needs[0] {
                    grads[0] = Some(g.clone());
                }
                if needs[1] {
                    let mut db = vec![0.0; n];
                    for r in 0..m {
                        for (acc, x) in db.iter_mut().zip(&gd[r * n..(r + 1) * n]) {
                            *acc += x;
                        }
                    }
                    grads[1] = Some(Tensor::vector(db));
                }
            }
            Op::MulRow => {
                let (a, b) = (inputs[0], inputs[1]);
                let (m, n) = dims2(a).ok_or_else(|| self.shape_err(inputs))?;
                if needs[0] {
                    let mut da = gd.to_vec();
                    for r in 0..m {
                        for (x, y) in da[r * n..(r + 1) * n].iter_mut().zip(b.data()) {
                            *x *= y;
                        }
                    }
                    grads[0] = Some(Tensor::from_parts(&[m, n], da));
                }
                if needs[1] {
                    let mut db = vec![0.0; n];
                    for r in 0..m {
                        for c in 0..n {
                            db[c] += gd[r * n + c] * a.data()[r * n + c];
                        }
                    }
                    grads[1] = Some(Tensor::vector(db));
                }
            }
            Op::Solve => {
                let (a, b) = (inputs[0], inputs[1]);
                let n = a.shape()[0];
                let k = b.len() / n.max(1);
                // dB = A⁻ᵀ G, dA = -dB Xᵀ
                let gb = solve(a.data(), n, gd, k, true)?;
                if needs[0] {
                    grads[0] = Some(Tensor::from_parts(
                        &[n, n],
                        mm_bt(&gb, out.data(), n, k, n).into_iter().map(|x| -x).collect(),
                    ));
                }
                if needs[1] {
                    grads[1] = Some(Tensor::from_parts(b.shape(), gb));
                }
            }
            Op::Rotate { transpose } => {
                let (phi, v) = (inputs[0], inputs[1]);
                let (s, c) = phi.data()[0].sin_cos();
                let s = if *transpose { -s } else { s };
                if needs[0] {
                    // d/dφ of [c v0 - s v1, s v0 + c v1]; the sign of s flips with it.
                    let sign = if *transpose { -1.0 } else { 1.0 };
                    let v = v.data();
                    let d0 = -s * v[0] - c * v[1];
                    let d1 = c * v[0] - s * v[1];
                    grads[0] = Some(Tensor::from_parts(phi.shape(), vec![sign * (gd[0] * d0 + gd[1] * d1)]));
                }
                if needs[1] {
                    grads[1] = Some(Tensor::vector(vec![
                        c * gd[0] + s * gd[1],
                        -s * gd[0] + c * gd[1],
                        gd[2],
                    ]));
                }
            }
            Op::SumSq => {
                let gs = g.item();
                grads[0] = Some(inputs[0].map(|x| 2.0 * gs * x));
            }
            Op::Outer => {
                let (a, b) = (inputs[0], inputs[1]);
                let (m, n) = (a.len(), b.len());
                if needs[0] {
                    grads[0] = Some(Tensor::vector(mm(gd, b.data(), m, n, 1)));
                }
                if needs[1] {
                    grads[1] = Some(Tensor::vector(mm_at(a.data(), gd, m, 1, n)));
                }
            }
            Op::Affine => {
                let (w, x) = (inputs[0], inputs[1]);
                let (m, n) = dims2(w).ok_or_else(|| self.shape_err(inputs))?;
                if needs[0] {
                    grads[0] = Some(Tensor::from_parts(&[m, n], mm_bt(gd, x.data(), m, 1, n)));
                }
                if needs[1] {
                    grads[1] = Some(Tensor::vector(mm_at(w.data(), gd, m, n, 1)));
                }
                if needs[2] {
                    grads[2] = Some(g.clone());
                }
            }
        }
        Ok(grads)
    }
}

fn binary(inputs: &[&Tensor], f: impl Fn(f64, f64) -> f64) -> Option<Tensor> {
    let (a, b) = (inputs[0], inputs[1]);
    if a.shape() == b.shape() {
        let data = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
        Some(Tensor::from_parts(a.shape(), data))
    } else if b.len() == 1 && b.rank() <= 1 {
        let y = b.data()[0];
        Some(a.map(|x| f(x, y)))
    } else if a.len() == 1 && a.rank() <= 1 {
        let x = a.data()[0];
        Some(b.map(|y| f(x, y)))
    } else {
        None
    }
}

fn reduce_broadcast(grad: Vec<f64>, input: &Tensor) -> Tensor {
    if grad.len() == input.len() {
        Tensor::from_parts(input.shape(), grad)
    } else {
        Tensor::from_parts(input.shape(), vec![grad.iter().sum()])
    }
}

fn dims2(t: &Tensor) -> Option<(usize, usize)> {
    match t.shape() {
        [m, n] => Some((*m, *n)),
        _ => None,
    }
}

/// `(m, k, n, output shape)` for a matrix product, allowing a vector on
/// either side.
fn matmul_dims(a: &Tensor, b: &Tensor) -> Option<(usize, usize, usize, Vec<usize>)> {
    match (a.shape(), b.shape()) {
        ([m, k], [k2, n]) if k == k2 => Some((*m, *k, *n, vec![*m, *n])),
        ([m, k], [k2]) if k == k2 => Some((*m, *k, 1, vec![*m])),
        ([k], [k2, n]) if k == k2 => Some((1, *k, *n, vec![*n])),
        _ => None,
    }
}

/// `C = A B` with `A` `[m, k]` and `B` `[k, n]`.
pub(crate) fn mm(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut c = vec![0.0; m * n];
    if n == 1 {
        for i in 0..m {
            c[i] = dot(&a[i * k..(i + 1) * k], b);
        }
        return c;
    }
    for i in 0..m {
        let row = &mut c[i * n..(i + 1) * n];
        for p in 0..k {
            let aip = a[i * k + p];
            if aip == 0.0 {
                continue;
            }
            for (cj, bj) in row.iter_mut().zip(&b[p * n..(p + 1) * n]) {
                *cj += aip * bj;
            }
        }
    }
    c
}

/// `C = A Bᵀ` with `A` `[m, n]` and `B` `[k, n]`.
pub(crate) fn mm_bt(a: &[f64], b: &[f64], m: usize, n: usize, k: usize) -> Vec<f64> {
    if n == 1 {
        let mut c = Vec::with_capacity(m * k);
        for x in &a[..m] {
            c.extend(b[..k].iter().map(|y| x * y));
        }
        return c;
    }
    let mut c = vec![0.0; m * k];
    for i in 0..m {
        let ar = &a[i * n..(i + 1) * n];
        for j in 0..k {
            c[i * k + j] = dot(ar, &b[j * n..(j + 1) * n]);
        }
    }
    c
}

/// `C = Aᵀ B` with `A` `[m, k]` and `B` `[m, n]`.
pub(crate) fn mm_at(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut c = vec![0.0; k * n];
    if n == 1 {
        for (row, bi) in a.chunks_exact(k).zip(b) {
            for (cj, aij) in c.iter_mut().zip(row) {
                *cj += aij * bi;
            }
        }
        return c;
    }
    for i in 0..m {
        let br = &b[i * n..(i + 1) * n];
        for p in 0..k {
            let aip = a[i * k + p];
            if aip == 0.0 {
                continue;
            }
            for (cj, bj) in c[p * n..(p + 1) * n].iter_mut().zip(br) {
                *cj += aip * bj;
            }
        }
    }
    c
}

#[inline]
fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn transpose(a: &[f64], m: usize, n: usize) -> Vec<f64> {
    let mut t = vec![0.0; m * n];
    for i in 0..m {
        for j in 0..n {
            t[j * m + i] = a[i * n + j];
        }
    }
    t
}

/// Solves `A X = B` (or `Aᵀ X = B`) by LU with partial pivoting. `B` is
/// row-major `[n, k]`.
fn solve(a: &[f64], n: usize, b: &[f64], k: usize, transposed: bool) -> Result<Vec<f64>, AdError> {
    let mut am = DMatrix::from_row_slice(n, n, a);
    if transposed {
        am.transpose_mut();
    }
    let lu = am.lu();
    let mut x = vec![0.0; n * k];
    for col in 0..k {
        let rhs = DVector::from_iterator(n, (0..n).map(|r| b[r * k + col]));
        let sol = lu
            .solve(&rhs)
            .ok_or_else(|| AdError::Singular(format!("{n}x{n} system in solve")))?;
        for r in 0..n {
            x[r * k + col] = sol[r];
        }
    }
    Ok(x)
}
