//! Reverse-mode tape.
//!
//! A forward pass pushes one node per operation: the computed value, the
//! parent indices, and a one-shot closure mapping the output gradient to the
//! parent gradients. [`Tape::backward`] walks the record once in reverse and
//! consumes it; running backward again without a fresh forward is an error.
//!
//! Tensors here are small (desk-scale grids), so closures capture value
//! clones freely; clarity of the backward rules wins over memory reuse.

use std::sync::atomic::{AtomicU64, Ordering};

use super::tensor::{ParamId, ParamSet, Tensor};
use crate::{Error, Result};

static NEXT_TAPE_ID: AtomicU64 = AtomicU64::new(1);

/// Handle to a node on a specific tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var {
    index: usize,
    tape: u64,
}

type BackFn = Box<dyn FnOnce(&Tensor) -> Vec<Tensor>>;

struct Node {
    value: Tensor,
    parents: Vec<usize>,
    back: Option<BackFn>,
    param: Option<ParamId>,
}

/// Gradients of one backward pass, indexed by the forward pass's variables.
pub struct Gradients {
    tape: u64,
    by_node: Vec<Option<Tensor>>,
}

impl Gradients {
    /// Gradient of the root w.r.t. `v`; `None` when `v` never influenced it.
    pub fn wrt(&self, v: Var) -> Option<&Tensor> {
        if v.tape != self.tape {
            return None;
        }
        self.by_node.get(v.index).and_then(Option::as_ref)
    }
}

/// Recorded forward pass.
pub struct Tape {
    id: u64,
    nodes: Vec<Node>,
    consumed: bool,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Self {
        Self {
            id: NEXT_TAPE_ID.fetch_add(1, Ordering::Relaxed),
            nodes: Vec::new(),
            consumed: false,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn check(&self, v: Var) -> Result<usize> {
        if v.tape != self.id || v.index >= self.nodes.len() {
            return Err(Error::ForeignVar);
        }
        Ok(v.index)
    }

    fn push(&mut self, value: Tensor, parents: Vec<usize>, back: Option<BackFn>) -> Var {
        let index = self.nodes.len();
        self.nodes.push(Node {
            value,
            parents,
            back,
            param: None,
        });
        Var {
            index,
            tape: self.id,
        }
    }

    /// Leaf holding a plain value. Its gradient is computed and queryable but
    /// feeds no parameter.
    pub fn input(&mut self, value: Tensor) -> Var {
        self.push(value, vec![], None)
    }

    /// Leaf bound to a parameter; backward accumulates into its grad slot.
    pub fn param(&mut self, params: &ParamSet, id: ParamId) -> Var {
        let v = self.push(params.value(id).clone(), vec![], None);
        self.nodes[v.index].param = Some(id);
        v
    }

    pub fn value(&self, v: Var) -> &Tensor {
        let i = self.check(v).expect("variable from another tape");
        &self.nodes[i].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.value(v).shape()
    }

    /// Registers an externally computed operation. `back` receives the output
    /// gradient and must return one tensor per parent, parent-shaped.
    pub fn custom(
        &mut self,
        parents: &[Var],
        value: Tensor,
        back: impl FnOnce(&Tensor) -> Vec<Tensor> + 'static,
    ) -> Result<Var> {
        let idx: Vec<usize> = parents
            .iter()
            .map(|&p| self.check(p))
            .collect::<Result<_>>()?;
        Ok(self.push(value, idx, Some(Box::new(back))))
    }

    /// Reverse sweep from a scalar root. Parameter leaves accumulate into
    /// `params`; all node gradients are returned for inspection. Consumes the
    /// tape: a second call errors until a new forward pass builds a new tape.
    pub fn backward(&mut self, root: Var, params: &mut ParamSet) -> Result<Gradients> {
        if self.consumed {
            return Err(Error::TapeConsumed);
        }
        self.consumed = true;
        let root_idx = self.check(root)?;
        if self.nodes[root_idx].value.len() != 1 {
            return Err(Error::ShapeMismatch(format!(
                "backward root must be scalar, got shape {:?}",
                self.nodes[root_idx].value.shape()
            )));
        }

        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[root_idx] = Some(Tensor::scalar(1.0));

        for i in (0..=root_idx).rev() {
            if grads[i].is_none() {
                continue;
            }
            if let Some(id) = self.nodes[i].param {
                params.accumulate_grad(id, grads[i].as_ref().unwrap())?;
            }
            let Some(back) = self.nodes[i].back.take() else {
                continue;
            };
            let contributions = back(grads[i].as_ref().unwrap());
            let parents = self.nodes[i].parents.clone();
            if contributions.len() != parents.len() {
                return Err(Error::ShapeMismatch(format!(
                    "backward rule returned {} gradients for {} parents",
                    contributions.len(),
                    parents.len()
                )));
            }
            for (p, c) in parents.into_iter().zip(contributions) {
                if c.shape() != self.nodes[p].value.shape() {
                    return Err(Error::ShapeMismatch(format!(
                        "gradient shape {:?} for parent of shape {:?}",
                        c.shape(),
                        self.nodes[p].value.shape()
                    )));
                }
                match &mut grads[p] {
                    Some(acc) => {
                        for (a, b) in acc.data_mut().iter_mut().zip(c.data()) {
                            *a += b;
                        }
                    }
                    slot => *slot = Some(c),
                }
            }
        }

        Ok(Gradients {
            tape: self.id,
            by_node: grads,
        })
    }

    // ---- elementwise binary ----

    fn binary(
        &mut self,
        a: Var,
        b: Var,
        op: &str,
        f: impl Fn(f64, f64) -> f64,
        back: impl FnOnce(&Tensor) -> Vec<Tensor> + 'static,
    ) -> Result<Var> {
        let (ia, ib) = (self.check(a)?, self.check(b)?);
        let (va, vb) = (&self.nodes[ia].value, &self.nodes[ib].value);
        if va.shape() != vb.shape() {
            return Err(Error::ShapeMismatch(format!(
                "{op}: {:?} vs {:?}",
                va.shape(),
                vb.shape()
            )));
        }
        let mut out = Tensor::zeros(va.shape());
        for ((o, &x), &y) in out.data_mut().iter_mut().zip(va.data()).zip(vb.data()) {
            *o = f(x, y);
        }
        Ok(self.push(out, vec![ia, ib], Some(Box::new(back))))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "add", |x, y| x + y, |g| vec![g.clone(), g.clone()])
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(
            a,
            b,
            "sub",
            |x, y| x - y,
            |g| {
                let mut neg = g.clone();
                for v in neg.data_mut() {
                    *v = -*v;
                }
                vec![g.clone(), neg]
            },
        )
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let va = self.value(a).clone();
        let vb = self.value(b).clone();
        self.binary(
            a,
            b,
            "mul",
            |x, y| x * y,
            move |g| {
                let mut da = vb;
                for (d, &gv) in da.data_mut().iter_mut().zip(g.data()) {
                    *d *= gv;
                }
                let mut db = va;
                for (d, &gv) in db.data_mut().iter_mut().zip(g.data()) {
                    *d *= gv;
                }
                vec![da, db]
            },
        )
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        let va = self.value(a).clone();
        let vb = self.value(b).clone();
        self.binary(
            a,
            b,
            "div",
            |x, y| x / y,
            move |g| {
                let mut da = Tensor::zeros(g.shape());
                let mut db = Tensor::zeros(g.shape());
                for i in 0..g.len() {
                    let (x, y, gv) = (va.data()[i], vb.data()[i], g.data()[i]);
                    da.data_mut()[i] = gv / y;
                    db.data_mut()[i] = -gv * x / (y * y);
                }
                vec![da, db]
            },
        )
    }

    // ---- elementwise unary ----

    fn unary(
        &mut self,
        a: Var,
        f: impl Fn(f64) -> f64,
        df: impl Fn(f64) -> f64 + 'static,
    ) -> Result<Var> {
        let ia = self.check(a)?;
        let va = self.nodes[ia].value.clone();
        let mut out = Tensor::zeros(va.shape());
        for (o, &x) in out.data_mut().iter_mut().zip(va.data()) {
            *o = f(x);
        }
        let back = move |g: &Tensor| {
            let mut da = Tensor::zeros(g.shape());
            for i in 0..g.len() {
                da.data_mut()[i] = g.data()[i] * df(va.data()[i]);
            }
            vec![da]
        };
        Ok(self.push(out, vec![ia], Some(Box::new(back))))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Result<Var> {
        self.unary(a, |x| c * x, move |_| c)
    }

    pub fn neg(&mut self, a: Var) -> Result<Var> {
        self.scale(a, -1.0)
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Result<Var> {
        self.unary(a, |x| x + c, |_| 1.0)
    }

    pub fn exp(&mut self, a: Var) -> Result<Var> {
        self.unary(a, f64::exp, f64::exp)
    }

    pub fn ln(&mut self, a: Var) -> Result<Var> {
        self.unary(a, f64::ln, |x| 1.0 / x)
    }

    pub fn sqrt(&mut self, a: Var) -> Result<Var> {
        self.unary(a, f64::sqrt, |x| 0.5 / x.sqrt())
    }

    pub fn pow_const(&mut self, a: Var, p: f64) -> Result<Var> {
        self.unary(a, move |x| x.powf(p), move |x| p * x.powf(p - 1.0))
    }

    /// ln(1 + e^x), evaluated stably; derivative is the logistic function.
    pub fn softplus(&mut self, a: Var) -> Result<Var> {
        self.unary(
            a,
            |x| x.max(0.0) + (-x.abs()).exp().ln_1p(),
            |x| 1.0 / (1.0 + (-x).exp()),
        )
    }

    /// Rectifier with negative slope; derivative at 0 taken as 1.
    pub fn leaky_relu(&mut self, a: Var, slope: f64) -> Result<Var> {
        self.unary(
            a,
            move |x| if x >= 0.0 { x } else { slope * x },
            move |x| if x >= 0.0 { 1.0 } else { slope },
        )
    }

    /// max(x, floor); clamped elements stop gradient.
    pub fn clamp_min(&mut self, a: Var, floor: f64) -> Result<Var> {
        self.unary(
            a,
            move |x| x.max(floor),
            move |x| if x > floor { 1.0 } else { 0.0 },
        )
    }

    // ---- reductions ----

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let ia = self.check(a)?;
        let va = &self.nodes[ia].value;
        let shape = va.shape().to_vec();
        let total: f64 = va.data().iter().sum();
        let back = move |g: &Tensor| vec![Tensor::filled(&shape, g.data()[0])];
        Ok(self.push(Tensor::scalar(total), vec![ia], Some(Box::new(back))))
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let n = self.value(a).len();
        let s = self.sum(a)?;
        self.scale(s, 1.0 / n as f64)
    }

    /// Per-row sums of an r×c matrix, giving r values.
    pub fn row_sums(&mut self, a: Var) -> Result<Var> {
        let ia = self.check(a)?;
        let va = &self.nodes[ia].value;
        let [r, c] = two_d("row_sums", va.shape())?;
        let mut out = Tensor::zeros(&[r]);
        for i in 0..r {
            out.data_mut()[i] = va.data()[i * c..(i + 1) * c].iter().sum();
        }
        let back = move |g: &Tensor| {
            let mut da = Tensor::zeros(&[r, c]);
            for i in 0..r {
                da.data_mut()[i * c..(i + 1) * c].fill(g.data()[i]);
            }
            vec![da]
        };
        Ok(self.push(out, vec![ia], Some(Box::new(back))))
    }

    /// Per-column means of an r×c matrix, giving c values.
    pub fn col_means(&mut self, a: Var) -> Result<Var> {
        let ia = self.check(a)?;
        let va = &self.nodes[ia].value;
        let [r, c] = two_d("col_means", va.shape())?;
        let mut out = Tensor::zeros(&[c]);
        for i in 0..r {
            for j in 0..c {
                out.data_mut()[j] += va.data()[i * c + j] / r as f64;
            }
        }
        let back = move |g: &Tensor| {
            let mut da = Tensor::zeros(&[r, c]);
            for i in 0..r {
                for j in 0..c {
                    da.data_mut()[i * c + j] = g.data()[j] / r as f64;
                }
            }
            vec![da]
        };
        Ok(self.push(out, vec![ia], Some(Box::new(back))))
    }

    /// Row-wise softmax of an r×c matrix (max-shifted for stability).
    pub fn softmax_rows(&mut self, a: Var) -> Result<Var> {
        let ia = self.check(a)?;
        let va = &self.nodes[ia].value;
        let [r, c] = two_d("softmax_rows", va.shape())?;
        let mut out = Tensor::zeros(&[r, c]);
        for i in 0..r {
            let row = &va.data()[i * c..(i + 1) * c];
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut z = 0.0;
            for j in 0..c {
                let e = (row[j] - m).exp();
                out.data_mut()[i * c + j] = e;
                z += e;
            }
            for j in 0..c {
                out.data_mut()[i * c + j] /= z;
            }
        }
        let s = out.clone();
        let back = move |g: &Tensor| {
            let mut da = Tensor::zeros(&[r, c]);
            for i in 0..r {
                let dot: f64 = (0..c)
                    .map(|j| g.data()[i * c + j] * s.data()[i * c + j])
                    .sum();
                for j in 0..c {
                    da.data_mut()[i * c + j] = s.data()[i * c + j] * (g.data()[i * c + j] - dot);
                }
            }
            vec![da]
        };
        Ok(self.push(out, vec![ia], Some(Box::new(back))))
    }

    // ---- linear algebra ----

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ia, ib) = (self.check(a)?, self.check(b)?);
        let va = self.nodes[ia].value.clone();
        let vb = self.nodes[ib].value.clone();
        let [r, k] = two_d("matmul lhs", va.shape())?;
        let [k2, c] = two_d("matmul rhs", vb.shape())?;
        if k != k2 {
            return Err(Error::ShapeMismatch(format!(
                "matmul: {:?} × {:?}",
                va.shape(),
                vb.shape()
            )));
        }
        let mut out = Tensor::zeros(&[r, c]);
        for i in 0..r {
            for t in 0..k {
                let x = va.data()[i * k + t];
                for j in 0..c {
                    out.data_mut()[i * c + j] += x * vb.data()[t * c + j];
                }
            }
        }
        let back = move |g: &Tensor| {
            let mut da = Tensor::zeros(&[r, k]);
            let mut db = Tensor::zeros(&[k, c]);
            for i in 0..r {
                for j in 0..c {
                    let gv = g.data()[i * c + j];
                    for t in 0..k {
                        da.data_mut()[i * k + t] += gv * vb.data()[t * c + j];
                        db.data_mut()[t * c + j] += gv * va.data()[i * k + t];
                    }
                }
            }
            vec![da, db]
        };
        Ok(self.push(out, vec![ia, ib], Some(Box::new(back))))
    }

    pub fn transpose2(&mut self, a: Var) -> Result<Var> {
        let ia = self.check(a)?;
        let va = &self.nodes[ia].value;
        let [r, c] = two_d("transpose2", va.shape())?;
        let mut out = Tensor::zeros(&[c, r]);
        for i in 0..r {
            for j in 0..c {
                out.data_mut()[j * r + i] = va.data()[i * c + j];
            }
        }
        let back = move |g: &Tensor| {
            let mut da = Tensor::zeros(&[r, c]);
            for i in 0..r {
                for j in 0..c {
                    da.data_mut()[i * c + j] = g.data()[j * r + i];
                }
            }
            vec![da]
        };
        Ok(self.push(out, vec![ia], Some(Box::new(back))))
    }

    /// Affine map along the trailing axis: x[..., m] × w[m, n] + b[n].
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let (ix, iw, ib) = (self.check(x)?, self.check(w)?, self.check(b)?);
        let vx = self.nodes[ix].value.clone();
        let vw = self.nodes[iw].value.clone();
        let vb = &self.nodes[ib].value;
        let [m, n] = two_d("linear weight", vw.shape())?;
        if vb.shape() != [n] {
            return Err(Error::ShapeMismatch(format!(
                "linear bias {:?}, expected [{n}]",
                vb.shape()
            )));
        }
        let trailing = *vx.shape().last().ok_or_else(|| {
            Error::ShapeMismatch("linear input must have at least one axis".into())
        })?;
        if trailing != m {
            return Err(Error::ShapeMismatch(format!(
                "linear input trailing extent {trailing}, weight expects {m}"
            )));
        }
        let rows = vx.len() / m;
        let mut out_shape = vx.shape().to_vec();
        *out_shape.last_mut().unwrap() = n;
        let mut out = Tensor::zeros(&out_shape);
        for i in 0..rows {
            for j in 0..n {
                out.data_mut()[i * n + j] = vb.data()[j];
            }
            for t in 0..m {
                let xv = vx.data()[i * m + t];
                for j in 0..n {
                    out.data_mut()[i * n + j] += xv * vw.data()[t * n + j];
                }
            }
        }
        let x_shape = vx.shape().to_vec();
        let back = move |g: &Tensor| {
            let mut dx = Tensor::zeros(&x_shape);
            let mut dw = Tensor::zeros(&[m, n]);
            let mut db = Tensor::zeros(&[n]);
            for i in 0..rows {
                for j in 0..n {
                    let gv = g.data()[i * n + j];
                    db.data_mut()[j] += gv;
                    for t in 0..m {
                        dx.data_mut()[i * m + t] += gv * vw.data()[t * n + j];
                        dw.data_mut()[t * n + j] += gv * vx.data()[i * m + t];
                    }
                }
            }
            vec![dx, dw, db]
        };
        Ok(self.push(out, vec![ix, iw, ib], Some(Box::new(back))))
    }

    // ---- layout ----

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let ia = self.check(a)?;
        let old = self.nodes[ia].value.shape().to_vec();
        let out = self.nodes[ia].value.reshaped(shape)?;
        let back = move |g: &Tensor| vec![g.reshaped(&old).expect("reshape back")];
        Ok(self.push(out, vec![ia], Some(Box::new(back))))
    }

    /// Concatenates any number of variables in flat row-major order into one
    /// vector. Axis-0 concatenation of equal-trailing-shape tensors is this
    /// plus a reshape.
    pub fn concat_flat(&mut self, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            return Err(Error::InvalidArgument("concat_flat of nothing".into()));
        }
        let idx: Vec<usize> = parts
            .iter()
            .map(|&p| self.check(p))
            .collect::<Result<_>>()?;
        let lens: Vec<usize> = idx.iter().map(|&i| self.nodes[i].value.len()).collect();
        let total: usize = lens.iter().sum();
        let mut data = Vec::with_capacity(total);
        for &i in &idx {
            data.extend_from_slice(self.nodes[i].value.data());
        }
        let out = Tensor::new(&[total], data)?;
        let shapes: Vec<Vec<usize>> = idx
            .iter()
            .map(|&i| self.nodes[i].value.shape().to_vec())
            .collect();
        let back = move |g: &Tensor| {
            let mut offset = 0;
            shapes
                .iter()
                .zip(&lens)
                .map(|(shape, &len)| {
                    let seg = g.data()[offset..offset + len].to_vec();
                    offset += len;
                    Tensor::new(shape, seg).expect("concat_flat split")
                })
                .collect()
        };
        Ok(self.push(out, idx, Some(Box::new(back))))
    }

    /// Contiguous window of the flat data, as a vector of length `len`.
    pub fn slice_flat(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let ia = self.check(a)?;
        let va = &self.nodes[ia].value;
        if start + len > va.len() {
            return Err(Error::ShapeMismatch(format!(
                "slice [{start}, {}) of {} values",
                start + len,
                va.len()
            )));
        }
        let out = Tensor::new(&[len], va.data()[start..start + len].to_vec())?;
        let shape = va.shape().to_vec();
        let back = move |g: &Tensor| {
            let mut da = Tensor::zeros(&shape);
            da.data_mut()[start..start + len].copy_from_slice(g.data());
            vec![da]
        };
        Ok(self.push(out, vec![ia], Some(Box::new(back))))
    }

    /// Rows `idx` of a q×c table, stacked into len(idx)×c. Repeated indices
    /// accumulate in backward (embedding-lookup semantics).
    pub fn gather_rows(&mut self, table: Var, idx: &[usize]) -> Result<Var> {
        let it = self.check(table)?;
        let vt = &self.nodes[it].value;
        let [q, c] = two_d("gather_rows", vt.shape())?;
        if let Some(&bad) = idx.iter().find(|&&i| i >= q) {
            return Err(Error::InvalidArgument(format!(
                "gather_rows index {bad} out of {q} rows"
            )));
        }
        let m = idx.len();
        let mut out = Tensor::zeros(&[m, c]);
        for (row, &i) in idx.iter().enumerate() {
            out.data_mut()[row * c..(row + 1) * c].copy_from_slice(&vt.data()[i * c..(i + 1) * c]);
        }
        let idx = idx.to_vec();
        let back = move |g: &Tensor| {
            let mut dt = Tensor::zeros(&[q, c]);
            for (row, &i) in idx.iter().enumerate() {
                for j in 0..c {
                    dt.data_mut()[i * c + j] += g.data()[row * c + j];
                }
            }
            vec![dt]
        };
        Ok(self.push(out, vec![it], Some(Box::new(back))))
    }

    /// Multiplies every element of `a` by a scalar variable.
    pub fn mul_scalar_var(&mut self, a: Var, s: Var) -> Result<Var> {
        let (ia, is) = (self.check(a)?, self.check(s)?);
        let va = self.nodes[ia].value.clone();
        let vs = &self.nodes[is].value;
        if vs.len() != 1 {
            return Err(Error::ShapeMismatch(format!(
                "mul_scalar_var scale has shape {:?}",
                vs.shape()
            )));
        }
        let sv = vs.data()[0];
        let mut out = va.clone();
        for v in out.data_mut() {
            *v *= sv;
        }
        let back = move |g: &Tensor| {
            let mut da = g.clone();
            for v in da.data_mut() {
                *v *= sv;
            }
            let ds: f64 = g.data().iter().zip(va.data()).map(|(&gv, &x)| gv * x).sum();
            vec![da, Tensor::scalar(ds)]
        };
        Ok(self.push(out, vec![ia, is], Some(Box::new(back))))
    }

    /// Space-to-depth: c×h×w → (c·f²)×(h/f)×(w/f), each f×f patch unrolled
    /// into channels. Exact bijection with [`Tape::depth_to_space`].
    pub fn space_to_depth(&mut self, a: Var, f: usize) -> Result<Var> {
        let ia = self.check(a)?;
        let va = &self.nodes[ia].value;
        let [c, h, w] = three_d("space_to_depth", va.shape())?;
        if f == 0 || h % f != 0 || w % f != 0 {
            return Err(Error::ShapeMismatch(format!(
                "factor {f} does not divide {h}×{w}"
            )));
        }
        let out_shape = [c * f * f, h / f, w / f];
        let perm = s2d_source_index(c, h, w, f);
        let mut out = Tensor::zeros(&out_shape);
        for (o, &src) in out.data_mut().iter_mut().zip(&perm) {
            *o = va.data()[src];
        }
        let in_shape = [c, h, w];
        let back = move |g: &Tensor| {
            let mut da = Tensor::zeros(&in_shape);
            for (gi, &src) in g.data().iter().zip(&perm) {
                da.data_mut()[src] = *gi;
            }
            vec![da]
        };
        Ok(self.push(out, vec![ia], Some(Box::new(back))))
    }

    /// Inverse of [`Tape::space_to_depth`].
    pub fn depth_to_space(&mut self, a: Var, f: usize) -> Result<Var> {
        let ia = self.check(a)?;
        let va = &self.nodes[ia].value;
        let [cf2, hf, wf] = three_d("depth_to_space", va.shape())?;
        if f == 0 || cf2 % (f * f) != 0 {
            return Err(Error::ShapeMismatch(format!(
                "channel extent {cf2} not divisible by {}",
                f * f
            )));
        }
        let (c, h, w) = (cf2 / (f * f), hf * f, wf * f);
        // The same index map, applied in the opposite direction.
        let perm = s2d_source_index(c, h, w, f);
        let mut out = Tensor::zeros(&[c, h, w]);
        for (i, &dst) in perm.iter().enumerate() {
            out.data_mut()[dst] = va.data()[i];
        }
        let in_shape = [cf2, hf, wf];
        let back = move |g: &Tensor| {
            let mut da = Tensor::zeros(&in_shape);
            for (i, &dst) in perm.iter().enumerate() {
                da.data_mut()[i] = g.data()[dst];
            }
            vec![da]
        };
        Ok(self.push(out, vec![ia], Some(Box::new(back))))
    }
}

/// out flat index → in flat index for space-to-depth. Output channel layout:
/// input channel major, then the f×f offset (dy, dx).
fn s2d_source_index(c: usize, h: usize, w: usize, f: usize) -> Vec<usize> {
    let (ho, wo) = (h / f, w / f);
    let mut perm = vec![0usize; c * h * w];
    for ci in 0..c {
        for dy in 0..f {
            for dx in 0..f {
                let co = (ci * f + dy) * f + dx;
                for i in 0..ho {
                    for j in 0..wo {
                        let out_idx = (co * ho + i) * wo + j;
                        let in_idx = (ci * h + i * f + dy) * w + j * f + dx;
                        perm[out_idx] = in_idx;
                    }
                }
            }
        }
    }
    perm
}

fn two_d(op: &str, shape: &[usize]) -> crate::Result<[usize; 2]> {
    match shape {
        [r, c] => Ok([*r, *c]),
        other => Err(Error::ShapeMismatch(format!(
            "{op} expects a 2-d tensor, got {other:?}"
        ))),
    }
}

fn three_d(op: &str, shape: &[usize]) -> crate::Result<[usize; 3]> {
    match shape {
        [c, h, w] => Ok([*c, *h, *w]),
        other => Err(Error::ShapeMismatch(format!(
            "{op} expects a 3-d tensor, got {other:?}"
        ))),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f64]) -> Tensor {
        Tensor::new(shape, data.to_vec()).unwrap()
    }

    #[test]
    fn chain_rule_with_reuse() {
        // y = x*x + x at x=3: dy/dx = 2x + 1 = 7.
        let mut params = ParamSet::new();
        let mut tape = Tape::new();
        let x = tape.input(Tensor::scalar(3.0));
        let xx = tape.mul(x, x).unwrap();
        let y = tape.add(xx, x).unwrap();
        let grads = tape.backward(y, &mut params).unwrap();
        assert_eq!(grads.wrt(x).unwrap().data(), &[7.0]);
    }

    #[test]
    fn backward_twice_errors() {
        let mut params = ParamSet::new();
        let mut tape = Tape::new();
        let x = tape.input(Tensor::scalar(1.0));
        let y = tape.mul(x, x).unwrap();
        tape.backward(y, &mut params).unwrap();
        assert!(matches!(
            tape.backward(y, &mut params),
            Err(crate::Error::TapeConsumed)
        ));
    }

    #[test]
    fn foreign_var_rejected() {
        let mut t1 = Tape::new();
        let mut t2 = Tape::new();
        let x = t1.input(Tensor::scalar(1.0));
        assert!(matches!(t2.add(x, x), Err(crate::Error::ForeignVar)));
    }

    #[test]
    fn param_grads_accumulate_across_tapes() {
        let mut params = ParamSet::new();
        let w = params.add("w", Tensor::scalar(2.0)).unwrap();
        for _ in 0..2 {
            let mut tape = Tape::new();
            let wv = tape.param(&params, w);
            let y = tape.mul(wv, wv).unwrap(); // dy/dw = 4
            tape.backward(y, &mut params).unwrap();
        }
        assert_eq!(params.grad(w).data(), &[8.0]);
    }

    #[test]
    fn linear_matches_manual() {
        let mut params = ParamSet::new();
        let mut tape = Tape::new();
        let x = tape.input(t(&[2, 3], &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]));
        let w = tape.input(t(&[3, 2], &[1.0, 0.0, 0.0, 1.0, 1.0, 1.0]));
        let b = tape.input(t(&[2], &[10.0, 20.0]));
        let y = tape.linear(x, w, b).unwrap();
        assert_eq!(tape.value(y).data(), &[14.0, 25.0, 20.0, 31.0]);
        let s = tape.sum(y).unwrap();
        let grads = tape.backward(s, &mut params).unwrap();
        // d(sum)/db = ones per output column times row count.
        assert_eq!(grads.wrt(b).unwrap().data(), &[2.0, 2.0]);
    }

    #[test]
    fn softmax_rows_normalizes() {
        let mut tape = Tape::new();
        let x = tape.input(t(&[2, 3], &[0.0, 1.0, 2.0, -5.0, 0.0, 5.0]));
        let s = tape.softmax_rows(x).unwrap();
        let v = tape.value(s);
        for i in 0..2 {
            let row: f64 = v.data()[i * 3..(i + 1) * 3].iter().sum();
            assert!((row - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn space_to_depth_round_trip_bit_exact() {
        let mut tape = Tape::new();
        let x = Tensor::from_fn(&[3, 4, 6], |i| (i as f64).sin());
        let v = tape.input(x.clone());
        let d = tape.space_to_depth(v, 2).unwrap();
        assert_eq!(tape.shape(d), &[12, 2, 3]);
        let u = tape.depth_to_space(d, 2).unwrap();
        assert_eq!(tape.value(u).data(), x.data());
    }

    #[test]
    fn space_to_depth_shape_contract() {
        let mut tape = Tape::new();
        let v = tape.input(Tensor::zeros(&[3, 16, 32]));
        let d = tape.space_to_depth(v, 4).unwrap();
        assert_eq!(tape.shape(d), &[48, 4, 8]);
        let bad = tape.input(Tensor::zeros(&[1, 5, 4]));
        assert!(tape.space_to_depth(bad, 2).is_err());
    }

    #[test]
    fn concat_and_slice_invert() {
        let mut params = ParamSet::new();
        let mut tape = Tape::new();
        let a = tape.input(t(&[2], &[1.0, 2.0]));
        let b = tape.input(t(&[3], &[3.0, 4.0, 5.0]));
        let cat = tape.concat_flat(&[a, b]).unwrap();
        assert_eq!(tape.value(cat).data(), &[1.0, 2.0, 3.0, 4.0, 5.0]);
        let mid = tape.slice_flat(cat, 1, 3).unwrap();
        assert_eq!(tape.value(mid).data(), &[2.0, 3.0, 4.0]);
        let s = tape.sum(mid).unwrap();
        let grads = tape.backward(s, &mut params).unwrap();
        assert_eq!(grads.wrt(a).unwrap().data(), &[0.0, 1.0]);
        assert_eq!(grads.wrt(b).unwrap().data(), &[1.0, 1.0, 0.0]);
    }

    #[test]
    fn gather_rows_scatter_adds() {
        let mut params = ParamSet::new();
        let table = params
            .add("tbl", t(&[3, 2], &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]))
            .unwrap();
        let mut tape = Tape::new();
        let tv = tape.param(&params, table);
        let g = tape.gather_rows(tv, &[2, 0, 2]).unwrap();
        assert_eq!(tape.value(g).data(), &[5.0, 6.0, 1.0, 2.0, 5.0, 6.0]);
        let s = tape.sum(g).unwrap();
        tape.backward(s, &mut params).unwrap();
        assert_eq!(params.grad(table).data(), &[1.0, 1.0, 0.0, 0.0, 2.0, 2.0]);
    }

    #[test]
    fn backward_root_must_be_scalar() {
        let mut params = ParamSet::new();
        let mut tape = Tape::new();
        let x = tape.input(t(&[2], &[1.0, 2.0]));
        assert!(tape.backward(x, &mut params).is_err());
    }
}
