//! Reverse-mode autodiff on an append-only tape.
//!
//! Each forward operation pushes one node (its value plus a backward
//! closure). Nodes can only reference earlier nodes, so walking the tape
//! in reverse is a topological order for backpropagation. Tapes are
//! single-threaded and cheap to build; parallelism happens one tape per
//! sample. Parameter values are `ArcArray`s shared with the
//! [`crate::params::ParamStore`], so creating a parameter leaf does not
//! copy the weights.

use ndarray::{ArcArray, Array1, Array2, Array3, ArrayD, ArrayView1, ArrayView2, ArrayView3, Axis, IxDyn};

use crate::params::ParamStore;
use crate::scalar::Scalar;

pub type Value<F> = ArcArray<F, IxDyn>;

/// Handle to a tape node.
#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub struct Var(pub(crate) usize);

pub(crate) type BackFn<F> = Box<dyn Fn(&[Value<F>], &ArrayD<F>, &mut GradBuf<F>) + Send + Sync>;

/// Per-node gradient accumulator used during [`Tape::backward`].
pub struct GradBuf<F> {
    slots: Vec<Option<ArrayD<F>>>,
    active: Vec<bool>,
}

impl<F: Scalar> GradBuf<F> {
    /// Whether a node participates in differentiation at all. Backward
    /// closures skip work for inert inputs (constants, targets).
    pub fn wants(&self, v: Var) -> bool {
        self.active[v.0]
    }

    pub fn add(&mut self, v: Var, contribution: ArrayD<F>) {
        if !self.active[v.0] {
            return;
        }
        match &mut self.slots[v.0] {
            Some(g) => *g += &contribution,
            slot @ None => *slot = Some(contribution),
        }
    }
}

/// Gradients of one scalar root with respect to every tape node.
pub struct Gradients<F> {
    slots: Vec<Option<ArrayD<F>>>,
}

impl<F: Scalar> Gradients<F> {
    pub fn wrt(&self, v: Var) -> Option<&ArrayD<F>> {
        self.slots.get(v.0).and_then(|s| s.as_ref())
    }
}

pub struct Tape<F: Scalar> {
    values: Vec<Value<F>>,
    backs: Vec<Option<BackFn<F>>>,
    needs_grad: Vec<bool>,
    /// (leaf node, parameter index) pairs, in creation order.
    param_leaves: Vec<(Var, usize)>,
}

impl<F: Scalar> Default for Tape<F> {
    fn default() -> Self {
        Self::new()
    }
}

impl<F: Scalar> Tape<F> {
    pub fn new() -> Self {
        Tape {
            values: Vec::new(),
            backs: Vec::new(),
            needs_grad: Vec::new(),
            param_leaves: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn value(&self, v: Var) -> &Value<F> {
        &self.values[v.0]
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.values[v.0].shape()
    }

    pub(crate) fn push(&mut self, value: ArrayD<F>, needs: bool, back: Option<BackFn<F>>) -> Var {
        self.push_shared(value.into_shared(), needs, back)
    }

    pub(crate) fn push_shared(
        &mut self,
        value: Value<F>,
        needs: bool,
        back: Option<BackFn<F>>,
    ) -> Var {
        let id = self.values.len();
        self.values.push(value);
        self.backs.push(back);
        self.needs_grad.push(needs);
        Var(id)
    }

    pub(crate) fn needs(&self, v: Var) -> bool {
        self.needs_grad[v.0]
    }

    pub(crate) fn any_needs(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.needs_grad[v.0])
    }

    // ---- leaves ----------------------------------------------------------

    pub fn constant(&mut self, value: ArrayD<F>) -> Var {
        self.push(value, false, None)
    }

    pub fn constant3(&mut self, value: Array3<F>) -> Var {
        self.constant(value.into_dyn())
    }

    pub fn constant2(&mut self, value: Array2<F>) -> Var {
        self.constant(value.into_dyn())
    }

    /// Leaf backed by a stored parameter. Gradients reaching this leaf are
    /// reported by [`Tape::param_grads`].
    pub fn param(&mut self, store: &ParamStore<F>, index: usize) -> Var {
        let v = self.push_shared(store.value(index).clone(), true, None);
        self.param_leaves.push((v, index));
        v
    }

    /// A differentiable input leaf (used by gradient checks on inputs).
    pub fn input(&mut self, value: ArrayD<F>) -> Var {
        self.push(value, true, None)
    }

    // ---- backward --------------------------------------------------------

    /// Backpropagate from a scalar root. Returns gradients for every node
    /// that participates in differentiation.
    pub fn backward(&self, root: Var) -> Gradients<F> {
        assert_eq!(
            self.values[root.0].len(),
            1,
            "backward root must be a scalar, got shape {:?}",
            self.shape(root)
        );
        let mut gb = GradBuf {
            slots: vec![None; self.values.len()],
            active: self.needs_grad.clone(),
        };
        gb.active[root.0] = true;
        gb.slots[root.0] = Some(ArrayD::ones(self.values[root.0].raw_dim()));
        for id in (0..=root.0).rev() {
            if gb.slots[id].is_none() {
                continue;
            }
            if let Some(back) = &self.backs[id] {
                let g = gb.slots[id].take().unwrap();
                back(&self.values, &g, &mut gb);
                gb.slots[id] = Some(g);
            }
        }
        Gradients { slots: gb.slots }
    }

    /// Gradient per parameter leaf, as (parameter index, gradient) pairs in
    /// leaf-creation order. Leaves the root never reached report zeros.
    pub fn param_grads(&self, grads: &Gradients<F>) -> Vec<(usize, ArrayD<F>)> {
        self.param_leaves
            .iter()
            .map(|&(v, idx)| {
                let g = match grads.wrt(v) {
                    Some(g) => g.clone(),
                    None => ArrayD::zeros(self.values[v.0].raw_dim()),
                };
                (idx, g)
            })
            .collect()
    }

    // ---- elementwise -----------------------------------------------------

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.shape(a), self.shape(b), "add: shape mismatch");
        let value = &*self.values[a.0] + &*self.values[b.0];
        let needs = self.any_needs(&[a, b]);
        self.push(
            value,
            needs,
            Some(Box::new(move |_vals, g, gb| {
                gb.add(a, g.clone());
                gb.add(b, g.clone());
            })),
        )
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.shape(a), self.shape(b), "mul: shape mismatch");
        let value = &*self.values[a.0] * &*self.values[b.0];
        let needs = self.any_needs(&[a, b]);
        self.push(
            value,
            needs,
            Some(Box::new(move |vals, g, gb| {
                if gb.wants(a) {
                    gb.add(a, ew_mul(g, &vals[b.0]));
                }
                if gb.wants(b) {
                    gb.add(b, ew_mul(g, &vals[a.0]));
                }
            })),
        )
    }

    pub fn add_const(&mut self, a: Var, c: f64) -> Var {
        let c = F::from_f64(c);
        let value = self.values[a.0].mapv(|x| x + c);
        let needs = self.needs(a);
        self.push(
            value,
            needs,
            Some(Box::new(move |_vals, g, gb| gb.add(a, g.clone()))),
        )
    }

    pub fn scale_const(&mut self, a: Var, c: f64) -> Var {
        let c = F::from_f64(c);
        let value = self.values[a.0].mapv(|x| x * c);
        let needs = self.needs(a);
        self.push(
            value,
            needs,
            Some(Box::new(move |_vals, g, gb| gb.add(a, g * c))),
        )
    }

    /// Multiply a tensor by a 0-d scalar node (e.g. a learnable weight).
    pub fn mul_scalar_var(&mut self, a: Var, s: Var) -> Var {
        assert_eq!(self.values[s.0].len(), 1, "mul_scalar_var: s must be 0-d");
        let sv = *self.values[s.0].iter().next().unwrap();
        let value = self.values[a.0].mapv(|x| x * sv);
        let needs = self.any_needs(&[a, s]);
        self.push(
            value,
            needs,
            Some(Box::new(move |vals, g, gb| {
                let sv = *vals[s.0].iter().next().unwrap();
                if gb.wants(a) {
                    gb.add(a, g * sv);
                }
                if gb.wants(s) {
                    let dot: F = g
                        .iter()
                        .zip(vals[a.0].iter())
                        .map(|(&gi, &ai)| gi * ai)
                        .sum();
                    gb.add(s, ArrayD::from_elem(IxDyn(&[]), dot));
                }
            })),
        )
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let value = self.values[a.0].mapv(|x| x.max(F::zero()));
        let needs = self.needs(a);
        let out_id = self.values.len();
        self.push(
            value,
            needs,
            Some(Box::new(move |vals, g, gb| {
                let y = &vals[out_id];
                let mut dx = g.clone();
                dx.zip_mut_with(y, |d, &yv| {
                    if yv <= F::zero() {
                        *d = F::zero();
                    }
                });
                gb.add(a, dx);
            })),
        )
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let value = self.values[a.0].mapv(|x| x.sigmoid());
        let needs = self.needs(a);
        let out_id = self.values.len();
        self.push(
            value,
            needs,
            Some(Box::new(move |vals, g, gb| {
                let y = &vals[out_id];
                let mut dx = g.clone();
                dx.zip_mut_with(y, |d, &yv| *d = *d * yv * (F::one() - yv));
                gb.add(a, dx);
            })),
        )
    }

    // ---- linear algebra ---------------------------------------------------

    /// `[m, k] x [k, n] -> [m, n]`
    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let av = as2(&self.values[a.0]);
        let bv = as2(&self.values[b.0]);
        assert_eq!(av.ncols(), bv.nrows(), "matmul: inner dims");
        let value = av.dot(&bv).into_dyn();
        let needs = self.any_needs(&[a, b]);
        self.push(
            value,
            needs,
            Some(Box::new(move |vals, g, gb| {
                let gv = g.view().into_dimensionality::<ndarray::Ix2>().unwrap();
                if gb.wants(a) {
                    let bv = as2(&vals[b.0]);
                    gb.add(a, gv.dot(&bv.t()).into_dyn());
                }
                if gb.wants(b) {
                    let av = as2(&vals[a.0]);
                    gb.add(b, av.t().dot(&gv).into_dyn());
                }
            })),
        )
    }

    /// Gram matrix of column vectors: `[c, p] -> [p, p]`, `out[i][j] = a[:,i] . a[:,j]`.
    pub fn gram(&mut self, a: Var) -> Var {
        let av = as2(&self.values[a.0]);
        let value = av.t().dot(&av).into_dyn();
        let needs = self.needs(a);
        self.push(
            value,
            needs,
            Some(Box::new(move |vals, g, gb| {
                if gb.wants(a) {
                    let av = as2(&vals[a.0]);
                    let gv = g.view().into_dimensionality::<ndarray::Ix2>().unwrap();
                    let sym = &gv + &gv.t();
                    gb.add(a, av.dot(&sym).into_dyn());
                }
            })),
        )
    }

    /// Column-wise softmax of a `[p, q]` matrix: each column sums to 1.
    /// Uses per-column max subtraction for stability.
    pub fn softmax_cols(&mut self, a: Var) -> Var {
        let av = as2(&self.values[a.0]);
        let value = softmax_cols_kernel(&av.view()).into_dyn();
        let needs = self.needs(a);
        let out_id = self.values.len();
        self.push(
            value,
            needs,
            Some(Box::new(move |vals, g, gb| {
                if !gb.wants(a) {
                    return;
                }
                let y = as2(&vals[out_id]);
                let gv = g.view().into_dimensionality::<ndarray::Ix2>().unwrap();
                let (p, q) = y.dim();
                let mut dx = Array2::<F>::zeros((p, q));
                for j in 0..q {
                    let mut dot = F::zero();
                    for i in 0..p {
                        dot += gv[[i, j]] * y[[i, j]];
                    }
                    for i in 0..p {
                        dx[[i, j]] = y[[i, j]] * (gv[[i, j]] - dot);
                    }
                }
                gb.add(a, dx.into_dyn());
            })),
        )
    }

    /// Per-site L2 normalization of channel vectors, `[c, h, w]`. Zero
    /// vectors stay zero via the epsilon in the denominator.
    pub fn l2norm_sites(&mut self, a: Var) -> Var {
        let av = as3(&self.values[a.0]);
        let value = l2norm_sites_kernel(&av.view()).into_dyn();
        let needs = self.needs(a);
        self.push(
            value,
            needs,
            Some(Box::new(move |vals, g, gb| {
                if !gb.wants(a) {
                    return;
                }
                let x = as3(&vals[a.0]);
                let gv = g.view().into_dimensionality::<ndarray::Ix3>().unwrap();
                let (c, h, w) = x.dim();
                let eps = F::from_f64(NORM_EPS);
                let mut dx = Array3::<F>::zeros((c, h, w));
                for i in 0..h {
                    for j in 0..w {
                        let mut sq = F::zero();
                        for ch in 0..c {
                            sq += x[[ch, i, j]] * x[[ch, i, j]];
                        }
                        let n = sq.sqrt();
                        if n == F::zero() {
                            continue;
                        }
                        let t = F::one() / (n + eps);
                        let mut gx = F::zero();
                        for ch in 0..c {
                            gx += gv[[ch, i, j]] * x[[ch, i, j]];
                        }
                        let coef = gx / (n * (n + eps) * (n + eps));
                        for ch in 0..c {
                            dx[[ch, i, j]] = gv[[ch, i, j]] * t - x[[ch, i, j]] * coef;
                        }
                    }
                }
                gb.add(a, dx.into_dyn());
            })),
        )
    }

    /// Channel-wise concatenation of `[c_i, h, w]` tensors.
    pub fn concat_ch(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty());
        let views: Vec<ArrayView3<F>> = parts.iter().map(|p| as3(&self.values[p.0])).collect();
        let (_, h, w) = views[0].dim();
        for v in &views {
            assert_eq!((v.dim().1, v.dim().2), (h, w), "concat_ch: spatial mismatch");
        }
        let value = ndarray::concatenate(Axis(0), &views).unwrap().into_dyn();
        let needs = self.any_needs(parts);
        let parts: Vec<Var> = parts.to_vec();
        let channels: Vec<usize> = views.iter().map(|v| v.dim().0).collect();
        self.push(
            value,
            needs,
            Some(Box::new(move |_vals, g, gb| {
                let gv = g.view().into_dimensionality::<ndarray::Ix3>().unwrap();
                let mut offset = 0;
                for (part, &c) in parts.iter().zip(&channels) {
                    if gb.wants(*part) {
                        let slice = gv.slice(ndarray::s![offset..offset + c, .., ..]);
                        gb.add(*part, slice.to_owned().into_dyn());
                    }
                    offset += c;
                }
            })),
        )
    }

    /// `[c, h, w] * [1, h, w]` with channel broadcasting.
    pub fn mul_attn(&mut self, x: Var, a: Var) -> Var {
        let xv = as3(&self.values[x.0]);
        let av = as3(&self.values[a.0]);
        let (c, h, w) = xv.dim();
        assert_eq!(av.dim(), (1, h, w), "mul_attn: attention must be [1, h, w]");
        let plane = av.index_axis(Axis(0), 0);
        let mut value = Array3::<F>::zeros((c, h, w));
        for ch in 0..c {
            let mut out = value.index_axis_mut(Axis(0), ch);
            out.assign(&(&xv.index_axis(Axis(0), ch) * &plane));
        }
        let needs = self.any_needs(&[x, a]);
        self.push(
            value.into_dyn(),
            needs,
            Some(Box::new(move |vals, g, gb| {
                let gv = g.view().into_dimensionality::<ndarray::Ix3>().unwrap();
                let (c, h, w) = gv.dim();
                if gb.wants(x) {
                    let av = as3(&vals[a.0]);
                    let plane = av.index_axis(Axis(0), 0);
                    let mut dx = Array3::<F>::zeros((c, h, w));
                    for ch in 0..c {
                        let mut out = dx.index_axis_mut(Axis(0), ch);
                        out.assign(&(&gv.index_axis(Axis(0), ch) * &plane));
                    }
                    gb.add(x, dx.into_dyn());
                }
                if gb.wants(a) {
                    let xv = as3(&vals[x.0]);
                    let mut da = Array2::<F>::zeros((h, w));
                    for ch in 0..c {
                        da = da + &gv.index_axis(Axis(0), ch) * &xv.index_axis(Axis(0), ch);
                    }
                    gb.add(a, da.insert_axis(Axis(0)).into_dyn());
                }
            })),
        )
    }

    /// `[c, h, w] * [c]` per-channel scaling.
    pub fn scale_channels(&mut self, x: Var, s: Var) -> Var {
        let xv = as3(&self.values[x.0]);
        let sv = as1(&self.values[s.0]);
        let (c, h, w) = xv.dim();
        assert_eq!(sv.len(), c, "scale_channels: weights length != channels");
        let mut value = Array3::<F>::zeros((c, h, w));
        for ch in 0..c {
            let mut out = value.index_axis_mut(Axis(0), ch);
            out.assign(&xv.index_axis(Axis(0), ch).mapv(|v| v * sv[ch]));
        }
        let needs = self.any_needs(&[x, s]);
        self.push(
            value.into_dyn(),
            needs,
            Some(Box::new(move |vals, g, gb| {
                let gv = g.view().into_dimensionality::<ndarray::Ix3>().unwrap();
                let (c, _, _) = gv.dim();
                if gb.wants(x) {
                    let sv = as1(&vals[s.0]);
                    let mut dx = gv.to_owned();
                    for ch in 0..c {
                        let mut plane = dx.index_axis_mut(Axis(0), ch);
                        plane.mapv_inplace(|v| v * sv[ch]);
                    }
                    gb.add(x, dx.into_dyn());
                }
                if gb.wants(s) {
                    let xv = as3(&vals[x.0]);
                    let mut ds = Array1::<F>::zeros(c);
                    for ch in 0..c {
                        let mut acc = F::zero();
                        for (&gi, &xi) in gv
                            .index_axis(Axis(0), ch)
                            .iter()
                            .zip(xv.index_axis(Axis(0), ch).iter())
                        {
                            acc += gi * xi;
                        }
                        ds[ch] = acc;
                    }
                    gb.add(s, ds.into_dyn());
                }
            })),
        )
    }

    /// Spatial mean per channel: `[c, h, w] -> [c]`.
    pub fn mean_spatial(&mut self, x: Var) -> Var {
        let xv = as3(&self.values[x.0]);
        let (c, h, w) = xv.dim();
        let inv = F::from_f64(1.0 / (h * w) as f64);
        let value: Array1<F> = (0..c)
            .map(|ch| xv.index_axis(Axis(0), ch).iter().copied().sum::<F>() * inv)
            .collect();
        let needs = self.needs(x);
        self.push(
            value.into_dyn(),
            needs,
            Some(Box::new(move |_vals, g, gb| {
                if !gb.wants(x) {
                    return;
                }
                let gv = g.view().into_dimensionality::<ndarray::Ix1>().unwrap();
                let mut dx = Array3::<F>::zeros((c, h, w));
                for ch in 0..c {
                    dx.index_axis_mut(Axis(0), ch).fill(gv[ch] * inv);
                }
                gb.add(x, dx.into_dyn());
            })),
        )
    }

    /// Spatial max per channel: `[c, h, w] -> [c]`.
    pub fn max_spatial(&mut self, x: Var) -> Var {
        let xv = as3(&self.values[x.0]);
        let (c, h, w) = xv.dim();
        let mut value = Array1::<F>::zeros(c);
        let mut arg = vec![0usize; c];
        for ch in 0..c {
            let plane = xv.index_axis(Axis(0), ch);
            let mut best = plane[[0, 0]];
            let mut best_at = 0;
            for (k, &v) in plane.iter().enumerate() {
                if v > best {
                    best = v;
                    best_at = k;
                }
            }
            value[ch] = best;
            arg[ch] = best_at;
        }
        let needs = self.needs(x);
        self.push(
            value.into_dyn(),
            needs,
            Some(Box::new(move |_vals, g, gb| {
                if !gb.wants(x) {
                    return;
                }
                let gv = g.view().into_dimensionality::<ndarray::Ix1>().unwrap();
                let mut dx = Array3::<F>::zeros((c, h, w));
                for ch in 0..c {
                    let (i, j) = (arg[ch] / w, arg[ch] % w);
                    dx[[ch, i, j]] = gv[ch];
                }
                gb.add(x, dx.into_dyn());
            })),
        )
    }

    /// Channel mean at every site: `[c, h, w] -> [1, h, w]`.
    pub fn mean_channels(&mut self, x: Var) -> Var {
        let xv = as3(&self.values[x.0]);
        let (c, h, w) = xv.dim();
        let inv = F::from_f64(1.0 / c as f64);
        let mut plane = Array2::<F>::zeros((h, w));
        for ch in 0..c {
            plane = plane + &xv.index_axis(Axis(0), ch);
        }
        plane.mapv_inplace(|v| v * inv);
        let needs = self.needs(x);
        self.push(
            plane.insert_axis(Axis(0)).into_dyn(),
            needs,
            Some(Box::new(move |_vals, g, gb| {
                if !gb.wants(x) {
                    return;
                }
                let gv = g.view().into_dimensionality::<ndarray::Ix3>().unwrap();
                let gplane = gv.index_axis(Axis(0), 0);
                let mut dx = Array3::<F>::zeros((c, h, w));
                for ch in 0..c {
                    dx.index_axis_mut(Axis(0), ch)
                        .assign(&gplane.mapv(|v| v * inv));
                }
                gb.add(x, dx.into_dyn());
            })),
        )
    }

    /// Channel max at every site: `[c, h, w] -> [1, h, w]`.
    pub fn max_channels(&mut self, x: Var) -> Var {
        let xv = as3(&self.values[x.0]);
        let (c, h, w) = xv.dim();
        let mut plane = Array2::<F>::zeros((h, w));
        let mut arg = Array2::<usize>::zeros((h, w));
        for i in 0..h {
            for j in 0..w {
                let mut best = xv[[0, i, j]];
                let mut best_ch = 0;
                for ch in 1..c {
                    if xv[[ch, i, j]] > best {
                        best = xv[[ch, i, j]];
                        best_ch = ch;
                    }
                }
                plane[[i, j]] = best;
                arg[[i, j]] = best_ch;
            }
        }
        let needs = self.needs(x);
        self.push(
            plane.insert_axis(Axis(0)).into_dyn(),
            needs,
            Some(Box::new(move |_vals, g, gb| {
                if !gb.wants(x) {
                    return;
                }
                let gv = g.view().into_dimensionality::<ndarray::Ix3>().unwrap();
                let gplane = gv.index_axis(Axis(0), 0);
                let mut dx = Array3::<F>::zeros((c, h, w));
                for i in 0..h {
                    for j in 0..w {
                        dx[[arg[[i, j]], i, j]] = gplane[[i, j]];
                    }
                }
                gb.add(x, dx.into_dyn());
            })),
        )
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Var {
        let total: usize = shape.iter().product();
        assert_eq!(self.values[x.0].len(), total, "reshape: element count");
        let in_shape: Vec<usize> = self.shape(x).to_vec();
        let value = reshaped(self.values[x.0].to_owned(), shape);
        let needs = self.needs(x);
        self.push(
            value,
            needs,
            Some(Box::new(move |_vals, g, gb| {
                if gb.wants(x) {
                    gb.add(x, reshaped(g.clone(), &in_shape));
                }
            })),
        )
    }

    /// Sum of all elements, as a 0-d node.
    pub fn sum_all(&mut self, x: Var) -> Var {
        let total: F = self.values[x.0].iter().copied().sum();
        let shape: Vec<usize> = self.shape(x).to_vec();
        let needs = self.needs(x);
        self.push(
            ArrayD::from_elem(IxDyn(&[]), total),
            needs,
            Some(Box::new(move |_vals, g, gb| {
                if gb.wants(x) {
                    let gs = *g.iter().next().unwrap();
                    gb.add(x, ArrayD::from_elem(IxDyn(&shape), gs));
                }
            })),
        )
    }

    /// Fully connected layer on a vector: `y = w . x + b` with `w: [o, i]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Var {
        let xv = as1(&self.values[x.0]);
        let wv = as2(&self.values[w.0]);
        let bv = as1(&self.values[b.0]);
        assert_eq!(wv.ncols(), xv.len(), "linear: weight/input dims");
        assert_eq!(wv.nrows(), bv.len(), "linear: weight/bias dims");
        let value = (wv.dot(&xv) + bv).into_dyn();
        let needs = self.any_needs(&[x, w, b]);
        self.push(
            value,
            needs,
            Some(Box::new(move |vals, g, gb| {
                let gv = g.view().into_dimensionality::<ndarray::Ix1>().unwrap();
                if gb.wants(x) {
                    let wv = as2(&vals[w.0]);
                    gb.add(x, wv.t().dot(&gv).into_dyn());
                }
                if gb.wants(w) {
                    let xv = as1(&vals[x.0]);
                    let (o, i) = (gv.len(), xv.len());
                    let mut dw = Array2::<F>::zeros((o, i));
                    for r in 0..o {
                        for cidx in 0..i {
                            dw[[r, cidx]] = gv[r] * xv[cidx];
                        }
                    }
                    gb.add(w, dw.into_dyn());
                }
                if gb.wants(b) {
                    gb.add(b, gv.to_owned().into_dyn());
                }
            })),
        )
    }
}

/// Epsilon guarding zero channel vectors in per-site normalization.
pub const NORM_EPS: f64 = 1e-12;

/// Elementwise product of an owned gradient with a stored value.
pub(crate) fn ew_mul<F: Scalar>(a: &ArrayD<F>, b: &Value<F>) -> ArrayD<F> {
    let mut out = a.clone();
    out.zip_mut_with(b, |o, &x| *o = *o * x);
    out
}

/// Row-major reshape that tolerates non-standard layouts (GEMM results can
/// come back column-major depending on operand strides).
pub(crate) fn reshaped<F: Scalar, D: ndarray::Dimension>(
    a: ndarray::Array<F, D>,
    shape: &[usize],
) -> ArrayD<F> {
    if a.is_standard_layout() {
        a.into_dyn().into_shape_with_order(IxDyn(shape)).unwrap()
    } else {
        ArrayD::from_shape_vec(IxDyn(shape), a.iter().copied().collect()).unwrap()
    }
}

pub(crate) fn softmax_cols_kernel<F: Scalar>(a: &ArrayView2<F>) -> Array2<F> {
    let (p, q) = a.dim();
    let mut out = Array2::<F>::zeros((p, q));
    for j in 0..q {
        let mut mx = a[[0, j]];
        for i in 1..p {
            mx = mx.max(a[[i, j]]);
        }
        let mut sum = F::zero();
        for i in 0..p {
            let e = (a[[i, j]] - mx).exp();
            out[[i, j]] = e;
            sum += e;
        }
        for i in 0..p {
            out[[i, j]] = out[[i, j]] / sum;
        }
    }
    out
}

pub(crate) fn l2norm_sites_kernel<F: Scalar>(x: &ArrayView3<F>) -> Array3<F> {
    let (c, h, w) = x.dim();
    let eps = F::from_f64(NORM_EPS);
    let mut out = Array3::<F>::zeros((c, h, w));
    for i in 0..h {
        for j in 0..w {
            let mut sq = F::zero();
            for ch in 0..c {
                sq += x[[ch, i, j]] * x[[ch, i, j]];
            }
            let t = F::one() / (sq.sqrt() + eps);
            for ch in 0..c {
                out[[ch, i, j]] = x[[ch, i, j]] * t;
            }
        }
    }
    out
}

// Typed views into dynamic-rank values.
pub(crate) fn as1<F: Scalar>(v: &Value<F>) -> ArrayView1<'_, F> {
    v.view().into_dimensionality::<ndarray::Ix1>().unwrap()
}

pub(crate) fn as2<F: Scalar>(v: &Value<F>) -> ArrayView2<'_, F> {
    v.view().into_dimensionality::<ndarray::Ix2>().unwrap()
}

pub(crate) fn as3<F: Scalar>(v: &Value<F>) -> ArrayView3<'_, F> {
    v.view().into_dimensionality::<ndarray::Ix3>().unwrap()
}
