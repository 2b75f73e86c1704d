//! Reverse-mode automatic differentiation over f64 tensors.
//!
//! A [`Tape`] records every operation of a forward pass as a node holding its
//! value and a backward closure. [`Tape::backward`] walks the nodes in reverse
//! and accumulates gradients into a [`Gradients`] table indexed by [`Var`].
//!
//! Tensors are `ArrayD<f64>`: 0-d for scalars, 1-d for vectors, 2-d for
//! matrices. Nodes whose subtree contains no trainable leaf skip gradient
//! bookkeeping entirely, so lookups into frozen embedding matrices cost
//! nothing on the backward pass.

use std::cell::RefCell;

use ndarray::{ArrayD, Axis, Ix1, Ix2, IxDyn};

/// Handle to a node on a [`Tape`]. Only valid for the tape that produced it.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

type BackwardFn = Box<dyn Fn(&[Node], &ArrayD<f64>, &mut GradTable)>;

struct Node {
    value: ArrayD<f64>,
    tracked: bool,
    backward: Option<BackwardFn>,
}

struct GradTable {
    grads: Vec<Option<ArrayD<f64>>>,
}

impl GradTable {
    fn accumulate(&mut self, idx: usize, delta: ArrayD<f64>) {
        match &mut self.grads[idx] {
            Some(g) => *g += &delta,
            slot @ None => *slot = Some(delta),
        }
    }
}

/// Gradients produced by [`Tape::backward`], queryable per [`Var`].
pub struct Gradients {
    grads: Vec<Option<ArrayD<f64>>>,
}

impl Gradients {
    /// Gradient of the backward root with respect to `v`, if any flowed there.
    pub fn get(&self, v: Var) -> Option<&ArrayD<f64>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }
}

/// Records a forward computation for reverse-mode differentiation.
#[derive(Default)]
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.borrow().is_empty()
    }

    fn push(&self, value: ArrayD<f64>, tracked: bool, backward: Option<BackwardFn>) -> Var {
        debug_assert!(value.iter().all(|x| x.is_finite()), "non-finite tape value");
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node { value, tracked, backward });
        Var(nodes.len() - 1)
    }

    fn tracked(&self, v: Var) -> bool {
        self.nodes.borrow()[v.0].tracked
    }

    fn any_tracked(&self, vars: &[Var]) -> bool {
        let nodes = self.nodes.borrow();
        vars.iter().any(|v| nodes[v.0].tracked)
    }

    /// Value of a node, cloned out of the tape.
    pub fn value(&self, v: Var) -> ArrayD<f64> {
        self.nodes.borrow()[v.0].value.clone()
    }

    /// Scalar value of a 0-d node.
    pub fn scalar(&self, v: Var) -> f64 {
        let nodes = self.nodes.borrow();
        let val = &nodes[v.0].value;
        assert_eq!(val.ndim(), 0, "scalar() on non-scalar node");
        val[[]]
    }

    pub fn shape(&self, v: Var) -> Vec<usize> {
        self.nodes.borrow()[v.0].value.shape().to_vec()
    }

    /// Leaf whose gradient is retained; use for trainable parameters.
    pub fn leaf(&self, value: ArrayD<f64>) -> Var {
        self.push(value, true, None)
    }

    /// Leaf excluded from gradient bookkeeping; use for inputs, masks,
    /// noise draws, and frozen parameters.
    pub fn constant(&self, value: ArrayD<f64>) -> Var {
        self.push(value, false, None)
    }

    pub fn constant_scalar(&self, x: f64) -> Var {
        self.constant(ndarray::arr0(x).into_dyn())
    }

    /// Accumulates d(root)/d(node) for every tracked node reachable from `root`.
    pub fn backward(&self, root: Var) -> Gradients {
        let nodes = self.nodes.borrow();
        let mut table = GradTable { grads: vec![None; nodes.len()] };
        let seed = ArrayD::ones(nodes[root.0].value.raw_dim());
        assert_eq!(seed.len(), 1, "backward root must be a scalar");
        table.grads[root.0] = Some(seed);
        for i in (0..=root.0).rev() {
            if !nodes[i].tracked {
                continue;
            }
            let Some(grad) = table.grads[i].take() else { continue };
            match &nodes[i].backward {
                Some(f) => f(&nodes, &grad, &mut table),
                None => table.grads[i] = Some(grad), // leaf: keep for harvesting
            }
        }
        Gradients { grads: table.grads }
    }

    fn unary<F>(&self, a: Var, value: ArrayD<f64>, back: F) -> Var
    where
        F: Fn(&Node, &ArrayD<f64>) -> ArrayD<f64> + 'static,
    {
        if !self.tracked(a) {
            return self.push(value, false, None);
        }
        let pa = a.0;
        let f: BackwardFn = Box::new(move |nodes, g, table| {
            let out = &nodes[pa];
            table.accumulate(pa, back(out, g));
        });
        self.push(value, true, Some(f))
    }

    // ---- elementwise ----

    pub fn add(&self, a: Var, b: Var) -> Var {
        let nodes = self.nodes.borrow();
        let value = &nodes[a.0].value + &nodes[b.0].value;
        drop(nodes);
        if !self.any_tracked(&[a, b]) {
            return self.push(value, false, None);
        }
        let (ta, tb) = (self.tracked(a), self.tracked(b));
        let f: BackwardFn = Box::new(move |_, g, table| {
            if ta {
                table.accumulate(a.0, g.clone());
            }
            if tb {
                table.accumulate(b.0, g.clone());
            }
        });
        self.push(value, true, Some(f))
    }

    pub fn sub(&self, a: Var, b: Var) -> Var {
        let nodes = self.nodes.borrow();
        let value = &nodes[a.0].value - &nodes[b.0].value;
        drop(nodes);
        if !self.any_tracked(&[a, b]) {
            return self.push(value, false, None);
        }
        let (ta, tb) = (self.tracked(a), self.tracked(b));
        let f: BackwardFn = Box::new(move |_, g, table| {
            if ta {
                table.accumulate(a.0, g.clone());
            }
            if tb {
                table.accumulate(b.0, -g);
            }
        });
        self.push(value, true, Some(f))
    }

    pub fn mul(&self, a: Var, b: Var) -> Var {
        let nodes = self.nodes.borrow();
        let value = &nodes[a.0].value * &nodes[b.0].value;
        drop(nodes);
        if !self.any_tracked(&[a, b]) {
            return self.push(value, false, None);
        }
        let (ta, tb) = (self.tracked(a), self.tracked(b));
        let f: BackwardFn = Box::new(move |nodes, g, table| {
            if ta {
                table.accumulate(a.0, g * &nodes[b.0].value);
            }
            if tb {
                table.accumulate(b.0, g * &nodes[a.0].value);
            }
        });
        self.push(value, true, Some(f))
    }

    /// Elementwise `k * a + c`.
    pub fn affine(&self, a: Var, k: f64, c: f64) -> Var {
        let value = self.nodes.borrow()[a.0].value.mapv(|x| k * x + c);
        self.unary(a, value, move |_, g| g.mapv(|x| k * x))
    }

    pub fn neg(&self, a: Var) -> Var {
        self.affine(a, -1.0, 0.0)
    }

    pub fn tanh(&self, a: Var) -> Var {
        let value = self.nodes.borrow()[a.0].value.mapv(f64::tanh);
        self.unary(a, value.clone(), move |_, g| g * &value.mapv(|y| 1.0 - y * y))
    }

    pub fn sigmoid(&self, a: Var) -> Var {
        let value = self.nodes.borrow()[a.0].value.mapv(|x| 1.0 / (1.0 + (-x).exp()));
        self.unary(a, value.clone(), move |_, g| g * &value.mapv(|y| y * (1.0 - y)))
    }

    pub fn exp(&self, a: Var) -> Var {
        let value = self.nodes.borrow()[a.0].value.mapv(f64::exp);
        self.unary(a, value.clone(), move |_, g| g * &value)
    }

    /// Natural log; the caller guarantees strictly positive inputs.
    pub fn ln(&self, a: Var) -> Var {
        let value = self.nodes.borrow()[a.0].value.mapv(f64::ln);
        if !self.tracked(a) {
            return self.push(value, false, None);
        }
        let pa = a.0;
        let f: BackwardFn = Box::new(move |nodes, g, table| {
            table.accumulate(pa, g / &nodes[pa].value);
        });
        self.push(value, true, Some(f))
    }

    pub fn abs(&self, a: Var) -> Var {
        let input = self.value(a);
        let value = input.mapv(f64::abs);
        self.unary(a, value, move |_, g| g * &input.mapv(|x| if x > 0.0 { 1.0 } else if x < 0.0 { -1.0 } else { 0.0 }))
    }

    /// Clamp with pass-through gradient inside `[lo, hi]`, zero outside.
    pub fn clamp(&self, a: Var, lo: f64, hi: f64) -> Var {
        let input = self.value(a);
        let value = input.mapv(|x| x.clamp(lo, hi));
        self.unary(a, value, move |_, g| {
            g * &input.mapv(|x| if (lo..=hi).contains(&x) { 1.0 } else { 0.0 })
        })
    }

    // ---- reductions ----

    pub fn sum(&self, a: Var) -> Var {
        let total = self.nodes.borrow()[a.0].value.sum();
        let shape = self.shape(a);
        self.unary(a, ndarray::arr0(total).into_dyn(), move |_, g| {
            ArrayD::from_elem(IxDyn(&shape), g[[]])
        })
    }

    pub fn mean(&self, a: Var) -> Var {
        let n = self.nodes.borrow()[a.0].value.len() as f64;
        let s = self.sum(a);
        self.affine(s, 1.0 / n, 0.0)
    }

    /// Column-wise max over the rows of a 2-d input (max pooling over time).
    pub fn max_rows(&self, a: Var) -> Var {
        let m = self.value(a).into_dimensionality::<Ix2>().expect("max_rows needs 2-d");
        let (rows, cols) = m.dim();
        assert!(rows > 0, "max_rows on empty matrix");
        let mut argmax = vec![0usize; cols];
        let mut out = ndarray::Array1::<f64>::zeros(cols);
        for j in 0..cols {
            let mut best = f64::NEG_INFINITY;
            for i in 0..rows {
                if m[[i, j]] > best {
                    best = m[[i, j]];
                    argmax[j] = i;
                }
            }
            out[j] = best;
        }
        self.unary(a, out.into_dyn(), move |_, g| {
            let mut d = ndarray::Array2::<f64>::zeros((rows, cols));
            for j in 0..cols {
                d[[argmax[j], j]] += g[j];
            }
            d.into_dyn()
        })
    }

    // ---- linear algebra ----

    /// `[m,n] x [n,p] -> [m,p]`
    pub fn matmul(&self, a: Var, b: Var) -> Var {
        let nodes = self.nodes.borrow();
        let av = nodes[a.0].value.view().into_dimensionality::<Ix2>().expect("matmul lhs 2-d");
        let bv = nodes[b.0].value.view().into_dimensionality::<Ix2>().expect("matmul rhs 2-d");
        let value = av.dot(&bv).into_dyn();
        drop(nodes);
        if !self.any_tracked(&[a, b]) {
            return self.push(value, false, None);
        }
        let (ta, tb) = (self.tracked(a), self.tracked(b));
        let f: BackwardFn = Box::new(move |nodes, g, table| {
            let gv = g.view().into_dimensionality::<Ix2>().unwrap();
            if ta {
                let bv = nodes[b.0].value.view().into_dimensionality::<Ix2>().unwrap();
                table.accumulate(a.0, gv.dot(&bv.t()).into_dyn());
            }
            if tb {
                let av = nodes[a.0].value.view().into_dimensionality::<Ix2>().unwrap();
                table.accumulate(b.0, av.t().dot(&gv).into_dyn());
            }
        });
        self.push(value, true, Some(f))
    }

    /// `[m,k] x [n,k]^T -> [m,n]` without materializing the transpose.
    pub fn matmul_nt(&self, a: Var, b: Var) -> Var {
        let nodes = self.nodes.borrow();
        let av = nodes[a.0].value.view().into_dimensionality::<Ix2>().expect("matmul_nt lhs 2-d");
        let bv = nodes[b.0].value.view().into_dimensionality::<Ix2>().expect("matmul_nt rhs 2-d");
        let value = av.dot(&bv.t()).into_dyn();
        drop(nodes);
        if !self.any_tracked(&[a, b]) {
            return self.push(value, false, None);
        }
        let (ta, tb) = (self.tracked(a), self.tracked(b));
        let f: BackwardFn = Box::new(move |nodes, g, table| {
            let gv = g.view().into_dimensionality::<Ix2>().unwrap();
            if ta {
                let bv = nodes[b.0].value.view().into_dimensionality::<Ix2>().unwrap();
                table.accumulate(a.0, gv.dot(&bv).into_dyn());
            }
            if tb {
                let av = nodes[a.0].value.view().into_dimensionality::<Ix2>().unwrap();
                table.accumulate(b.0, gv.t().dot(&av).into_dyn());
            }
        });
        self.push(value, true, Some(f))
    }

    /// `[m,n] x [n] -> [m]`
    pub fn matvec(&self, a: Var, x: Var) -> Var {
        let nodes = self.nodes.borrow();
        let av = nodes[a.0].value.view().into_dimensionality::<Ix2>().expect("matvec lhs 2-d");
        let xv = nodes[x.0].value.view().into_dimensionality::<Ix1>().expect("matvec rhs 1-d");
        let value = av.dot(&xv).into_dyn();
        drop(nodes);
        if !self.any_tracked(&[a, x]) {
            return self.push(value, false, None);
        }
        let (ta, tx) = (self.tracked(a), self.tracked(x));
        let f: BackwardFn = Box::new(move |nodes, g, table| {
            let gv = g.view().into_dimensionality::<Ix1>().unwrap();
            if ta {
                let xv = nodes[x.0].value.view().into_dimensionality::<Ix1>().unwrap();
                let mut d = ndarray::Array2::<f64>::zeros((gv.len(), xv.len()));
                for i in 0..gv.len() {
                    for j in 0..xv.len() {
                        d[[i, j]] = gv[i] * xv[j];
                    }
                }
                table.accumulate(a.0, d.into_dyn());
            }
            if tx {
                let av = nodes[a.0].value.view().into_dimensionality::<Ix2>().unwrap();
                table.accumulate(x.0, av.t().dot(&gv).into_dyn());
            }
        });
        self.push(value, true, Some(f))
    }

    /// Adds a vector to every row of a matrix.
    pub fn add_row_broadcast(&self, m: Var, v: Var) -> Var {
        let nodes = self.nodes.borrow();
        let mv = nodes[m.0].value.view().into_dimensionality::<Ix2>().expect("add_row_broadcast lhs 2-d");
        let vv = nodes[v.0].value.view().into_dimensionality::<Ix1>().expect("add_row_broadcast rhs 1-d");
        let value = (&mv + &vv).into_dyn();
        drop(nodes);
        if !self.any_tracked(&[m, v]) {
            return self.push(value, false, None);
        }
        let (tm, tv) = (self.tracked(m), self.tracked(v));
        let f: BackwardFn = Box::new(move |_, g, table| {
            let gv = g.view().into_dimensionality::<Ix2>().unwrap();
            if tm {
                table.accumulate(m.0, g.clone());
            }
            if tv {
                table.accumulate(v.0, gv.sum_axis(Axis(0)).into_dyn());
            }
        });
        self.push(value, true, Some(f))
    }

    // ---- structure ----

    /// Concatenates 1-d vectors into one vector.
    pub fn concat(&self, parts: &[Var]) -> Var {
        let nodes = self.nodes.borrow();
        let mut lens = Vec::with_capacity(parts.len());
        let mut data = Vec::new();
        for p in parts {
            let v = nodes[p.0].value.view().into_dimensionality::<Ix1>().expect("concat parts 1-d");
            lens.push(v.len());
            data.extend(v.iter().copied());
        }
        drop(nodes);
        let value = ndarray::Array1::from_vec(data).into_dyn();
        if !self.any_tracked(parts) {
            return self.push(value, false, None);
        }
        let parts: Vec<Var> = parts.to_vec();
        let tracked: Vec<bool> = parts.iter().map(|p| self.tracked(*p)).collect();
        let f: BackwardFn = Box::new(move |_, g, table| {
            let gv = g.view().into_dimensionality::<Ix1>().unwrap();
            let mut off = 0;
            for (i, p) in parts.iter().enumerate() {
                if tracked[i] {
                    let slice = gv.slice(ndarray::s![off..off + lens[i]]).to_owned();
                    table.accumulate(p.0, slice.into_dyn());
                }
                off += lens[i];
            }
        });
        self.push(value, true, Some(f))
    }

    /// Stacks equal-length 1-d vectors as the rows of a matrix.
    pub fn stack_rows(&self, rows: &[Var]) -> Var {
        assert!(!rows.is_empty(), "stack_rows on empty input");
        let nodes = self.nodes.borrow();
        let width = nodes[rows[0].0].value.len();
        let mut m = ndarray::Array2::<f64>::zeros((rows.len(), width));
        for (i, r) in rows.iter().enumerate() {
            let v = nodes[r.0].value.view().into_dimensionality::<Ix1>().expect("stack_rows parts 1-d");
            assert_eq!(v.len(), width, "stack_rows width mismatch");
            m.row_mut(i).assign(&v);
        }
        drop(nodes);
        let value = m.into_dyn();
        if !self.any_tracked(rows) {
            return self.push(value, false, None);
        }
        let rows: Vec<Var> = rows.to_vec();
        let tracked: Vec<bool> = rows.iter().map(|r| self.tracked(*r)).collect();
        let f: BackwardFn = Box::new(move |_, g, table| {
            let gv = g.view().into_dimensionality::<Ix2>().unwrap();
            for (i, r) in rows.iter().enumerate() {
                if tracked[i] {
                    table.accumulate(r.0, gv.row(i).to_owned().into_dyn());
                }
            }
        });
        self.push(value, true, Some(f))
    }

    /// Row `i` of a 2-d node as a vector.
    pub fn row(&self, m: Var, i: usize) -> Var {
        let nodes = self.nodes.borrow();
        let mv = nodes[m.0].value.view().into_dimensionality::<Ix2>().expect("row needs 2-d");
        let (rows, cols) = mv.dim();
        assert!(i < rows, "row index out of range");
        let value = mv.row(i).to_owned().into_dyn();
        drop(nodes);
        self.unary(m, value, move |_, g| {
            let gv = g.view().into_dimensionality::<Ix1>().unwrap();
            let mut d = ndarray::Array2::<f64>::zeros((rows, cols));
            d.row_mut(i).assign(&gv);
            d.into_dyn()
        })
    }

    /// Contiguous slice `[start, end)` of a 1-d node.
    pub fn slice1(&self, v: Var, start: usize, end: usize) -> Var {
        let nodes = self.nodes.borrow();
        let vv = nodes[v.0].value.view().into_dimensionality::<Ix1>().expect("slice1 needs 1-d");
        let n = vv.len();
        assert!(start <= end && end <= n, "slice1 range out of bounds");
        let value = vv.slice(ndarray::s![start..end]).to_owned().into_dyn();
        drop(nodes);
        self.unary(v, value, move |_, g| {
            let gv = g.view().into_dimensionality::<Ix1>().unwrap();
            let mut d = ndarray::Array1::<f64>::zeros(n);
            d.slice_mut(ndarray::s![start..end]).assign(&gv);
            d.into_dyn()
        })
    }

    /// Element `i` of a 1-d node as a scalar.
    pub fn index(&self, v: Var, i: usize) -> Var {
        let nodes = self.nodes.borrow();
        let vv = nodes[v.0].value.view().into_dimensionality::<Ix1>().expect("index needs 1-d");
        let n = vv.len();
        assert!(i < n, "index out of range");
        let value = ndarray::arr0(vv[i]).into_dyn();
        drop(nodes);
        self.unary(v, value, move |_, g| {
            let mut d = ndarray::Array1::<f64>::zeros(n);
            d[i] = g[[]];
            d.into_dyn()
        })
    }

    /// Sum of the elements of a 1-d node at the given positions.
    pub fn sum_at(&self, v: Var, positions: &[usize]) -> Var {
        let nodes = self.nodes.borrow();
        let vv = nodes[v.0].value.view().into_dimensionality::<Ix1>().expect("sum_at needs 1-d");
        let n = vv.len();
        let total: f64 = positions.iter().map(|&i| vv[i]).sum();
        drop(nodes);
        let positions = positions.to_vec();
        self.unary(v, ndarray::arr0(total).into_dyn(), move |_, g| {
            let mut d = ndarray::Array1::<f64>::zeros(n);
            for &i in &positions {
                d[i] += g[[]];
            }
            d.into_dyn()
        })
    }

    /// Embedding lookup: rows of `table` at `ids`, stacked into `[len(ids), d]`.
    pub fn gather_rows(&self, table_var: Var, ids: &[usize]) -> Var {
        let nodes = self.nodes.borrow();
        let tv = nodes[table_var.0].value.view().into_dimensionality::<Ix2>().expect("gather_rows needs 2-d");
        let (v_rows, d) = tv.dim();
        let mut m = ndarray::Array2::<f64>::zeros((ids.len(), d));
        for (i, &id) in ids.iter().enumerate() {
            assert!(id < v_rows, "gather id {id} out of range {v_rows}");
            m.row_mut(i).assign(&tv.row(id));
        }
        drop(nodes);
        let ids = ids.to_vec();
        self.unary(table_var, m.into_dyn(), move |_, g| {
            let gv = g.view().into_dimensionality::<Ix2>().unwrap();
            let mut dt = ndarray::Array2::<f64>::zeros((v_rows, d));
            for (i, &id) in ids.iter().enumerate() {
                let mut row = dt.row_mut(id);
                row += &gv.row(i);
            }
            dt.into_dyn()
        })
    }

    /// Stacks 0-d scalars into a 1-d vector.
    pub fn concat_scalars(&self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty(), "concat_scalars on empty input");
        let nodes = self.nodes.borrow();
        let mut data = Vec::with_capacity(parts.len());
        for p in parts {
            let v = &nodes[p.0].value;
            assert_eq!(v.ndim(), 0, "concat_scalars parts must be scalars");
            data.push(v[[]]);
        }
        drop(nodes);
        let value = ndarray::Array1::from_vec(data).into_dyn();
        if !self.any_tracked(parts) {
            return self.push(value, false, None);
        }
        let parts: Vec<Var> = parts.to_vec();
        let tracked: Vec<bool> = parts.iter().map(|p| self.tracked(*p)).collect();
        let f: BackwardFn = Box::new(move |_, g, table| {
            let gv = g.view().into_dimensionality::<Ix1>().unwrap();
            for (i, p) in parts.iter().enumerate() {
                if tracked[i] {
                    table.accumulate(p.0, ndarray::arr0(gv[i]).into_dyn());
                }
            }
        });
        self.push(value, true, Some(f))
    }

    /// Reinterprets a node's elements under a new shape of equal size.
    pub fn reshape(&self, v: Var, new_shape: &[usize]) -> Var {
        let old = self.value(v);
        let old_shape = old.shape().to_vec();
        assert_eq!(
            old.len(),
            new_shape.iter().product::<usize>(),
            "reshape size mismatch"
        );
        let value = old.into_shape_with_order(IxDyn(new_shape)).expect("contiguous reshape");
        self.unary(v, value, move |_, g| {
            g.clone().into_shape_with_order(IxDyn(&old_shape)).expect("contiguous reshape")
        })
    }

    /// Concatenates two matrices along columns: `[L,a] ++ [L,b] -> [L,a+b]`.
    pub fn concat_cols(&self, a: Var, b: Var) -> Var {
        let nodes = self.nodes.borrow();
        let av = nodes[a.0].value.view().into_dimensionality::<Ix2>().expect("concat_cols lhs 2-d");
        let bv = nodes[b.0].value.view().into_dimensionality::<Ix2>().expect("concat_cols rhs 2-d");
        assert_eq!(av.nrows(), bv.nrows(), "concat_cols row mismatch");
        let (l, ca) = av.dim();
        let cb = bv.ncols();
        let value = ndarray::concatenate(Axis(1), &[av.view(), bv.view()])
            .expect("concat_cols")
            .into_dyn();
        drop(nodes);
        if !self.any_tracked(&[a, b]) {
            return self.push(value, false, None);
        }
        let (ta, tb) = (self.tracked(a), self.tracked(b));
        let f: BackwardFn = Box::new(move |_, g, table| {
            let gv = g.view().into_dimensionality::<Ix2>().unwrap();
            if ta {
                table.accumulate(a.0, gv.slice(ndarray::s![0..l, 0..ca]).to_owned().into_dyn());
            }
            if tb {
                table.accumulate(b.0, gv.slice(ndarray::s![0..l, ca..ca + cb]).to_owned().into_dyn());
            }
        });
        self.push(value, true, Some(f))
    }

    /// Softmax over a 1-d node with masked positions forced to exactly zero.
    ///
    /// Panics if every position is masked.
    pub fn masked_softmax(&self, v: Var, mask: &[bool]) -> Var {
        let nodes = self.nodes.borrow();
        let vv = nodes[v.0].value.view().into_dimensionality::<Ix1>().expect("masked_softmax needs 1-d");
        let n = vv.len();
        assert_eq!(mask.len(), n, "mask length mismatch");
        assert!(mask.iter().any(|&m| m), "masked_softmax: all positions masked");
        let mut max = f64::NEG_INFINITY;
        for i in 0..n {
            if mask[i] && vv[i] > max {
                max = vv[i];
            }
        }
        let mut p = ndarray::Array1::<f64>::zeros(n);
        let mut denom = 0.0;
        for i in 0..n {
            if mask[i] {
                let e = (vv[i] - max).exp();
                p[i] = e;
                denom += e;
            }
        }
        p.mapv_inplace(|x| x / denom);
        drop(nodes);
        let value = p.clone().into_dyn();
        let mask = mask.to_vec();
        self.unary(v, value, move |_, g| {
            let gv = g.view().into_dimensionality::<Ix1>().unwrap();
            let s: f64 = (0..n).filter(|&i| mask[i]).map(|i| p[i] * gv[i]).sum();
            let mut d = ndarray::Array1::<f64>::zeros(n);
            for i in 0..n {
                if mask[i] {
                    d[i] = p[i] * (gv[i] - s);
                }
            }
            d.into_dyn()
        })
    }
}
