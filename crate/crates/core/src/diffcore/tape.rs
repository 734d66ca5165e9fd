use std::collections::HashMap;

use super::{shape_err, DiffError, ParamGrads, ParamId, ParamStore, Real, Tensor};

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Layout of a fused multi-head attention call.
///
/// Queries, keys and values are `[batch * seq, heads * head_dim]`, sequences
/// stored back to back. The first `pad_left[b]` positions of sequence `b` are
/// padding: they are never attended to and their own output rows are zero.
#[derive(Debug, Clone, PartialEq)]
pub struct AttnSpec {
    pub batch: usize,
    pub seq: usize,
    pub heads: usize,
    pub causal: bool,
    pub pad_left: Vec<usize>,
}

impl AttnSpec {
    pub fn new(batch: usize, seq: usize, heads: usize, causal: bool) -> Self {
        Self {
            batch,
            seq,
            heads,
            causal,
            pad_left: vec![0; batch],
        }
    }

    pub fn with_padding(mut self, pad_left: Vec<usize>) -> Self {
        self.pad_left = pad_left;
        self
    }

    fn pad(&self, b: usize) -> usize {
        self.pad_left.get(b).copied().unwrap_or(0)
    }

    /// Key range visible to query `i` of sequence `b`, empty for padded rows.
    pub fn keys(&self, b: usize, i: usize) -> std::ops::Range<usize> {
        let pad = self.pad(b);
        if i < pad {
            return 0..0;
        }
        let end = if self.causal { i + 1 } else { self.seq };
        pad..end
    }
}

const LN_EPS: f64 = 1e-5;
const NORM_FLOOR: f64 = 1e-12;
const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2 / pi)
const GELU_A: f64 = 0.044_715;

#[derive(Debug, Clone)]
enum Op<F> {
    Leaf,
    Param,
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    MulCol(Var, Var),
    Scale(Var, F),
    AddScalar(Var),
    Transpose(Var),
    ConcatRows(Vec<Var>),
    ConcatCols(Vec<Var>),
    SliceRows(Var, usize),
    SliceCols(Var, usize),
    Gather(Var, Vec<usize>),
    Softmax(Var),
    LogSoftmax(Var),
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<F>,
        rstd: Vec<F>,
    },
    Gelu {
        x: Var,
        gate: Vec<F>,
    },
    Sigmoid(Var),
    LogSigmoid(Var),
    Silu(Var),
    Attention {
        q: Var,
        k: Var,
        v: Var,
        spec: AttnSpec,
        probs: Vec<F>,
    },
    Sum(Var),
    Mean(Var),
    RowSum(Var),
    SegmentMean(Var, usize),
    Mse(Var, Var),
    CrossEntropy {
        logits: Var,
        targets: Vec<usize>,
        probs: Vec<F>,
    },
    L2NormalizeRows {
        x: Var,
        norms: Vec<F>,
    },
}

#[derive(Debug, Clone)]
struct Node<F> {
    value: Vec<F>,
    rows: usize,
    cols: usize,
    op: Op<F>,
    requires_grad: bool,
}

/// Gradients of one backward sweep, indexed by tape node.
#[derive(Debug, Clone)]
pub struct Gradients<F> {
    grads: Vec<Option<Vec<F>>>,
}

impl<F: Real> Gradients<F> {
    pub fn get(&self, v: Var) -> Option<&[F]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }
}

/// Records a forward computation for later reverse-mode differentiation.
#[derive(Debug, Clone)]
pub struct Tape<F> {
    nodes: Vec<Node<F>>,
    params: HashMap<ParamId, Var>,
    store: Option<u64>,
    step: u64,
    consumed: bool,
    grad_enabled: bool,
}

impl<F: Real> Default for Tape<F> {
    fn default() -> Self {
        Self::new()
    }
}

impl<F: Real> Tape<F> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            params: HashMap::new(),
            store: None,
            step: 0,
            consumed: false,
            grad_enabled: true,
        }
    }

    /// A tape on which nothing requires gradients.
    pub fn inference() -> Self {
        Self {
            grad_enabled: false,
            ..Self::new()
        }
    }

    /// Step index reported in non-finite errors.
    pub fn set_step(&mut self, step: u64) {
        self.step = step;
    }

    pub fn step(&self) -> u64 {
        self.step
    }

    pub fn grad_enabled(&self) -> bool {
        self.grad_enabled
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn reset(&mut self) {
        self.nodes.clear();
        self.params.clear();
        self.consumed = false;
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(
        &mut self,
        name: &'static str,
        value: Vec<F>,
        rows: usize,
        cols: usize,
        op: Op<F>,
        requires_grad: bool,
    ) -> Result<Var, DiffError> {
        debug_assert_eq!(value.len(), rows * cols);
        if value.iter().any(|x| !x.is_finite()) {
            return Err(DiffError::NonFinite {
                op: name,
                step: self.step,
            });
        }
        self.nodes.push(Node {
            value,
            rows,
            cols,
            op,
            requires_grad: requires_grad && self.grad_enabled,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    // ---- leaves -------------------------------------------------------

    fn leaf(&mut self, t: &Tensor<F>, requires_grad: bool) -> Result<Var, DiffError> {
        let (r, c) = t.dims2();
        self.push("leaf", t.data().to_vec(), r, c, Op::Leaf, requires_grad)
    }

    /// Differentiable input leaf.
    pub fn input(&mut self, t: &Tensor<F>) -> Result<Var, DiffError> {
        self.leaf(t, true)
    }

    /// Constant leaf; never receives gradient.
    pub fn constant(&mut self, t: &Tensor<F>) -> Result<Var, DiffError> {
        self.leaf(t, false)
    }

    pub fn constant_from(&mut self, rows: usize, cols: usize, data: Vec<F>) -> Result<Var, DiffError> {
        if data.len() != rows * cols {
            return Err(shape_err(
                "constant",
                format!("{rows}x{cols} from {} values", data.len()),
            ));
        }
        self.push("constant", data, rows, cols, Op::Leaf, false)
    }

    /// Leaf for a stored parameter; created once per tape.
    pub fn param(&mut self, store: &ParamStore<F>, id: ParamId) -> Result<Var, DiffError> {
        // Ids are store-relative, so one tape binds one store.
        match self.store {
            Some(uid) if uid != store.uid() => return Err(DiffError::ForeignStore),
            _ => self.store = Some(store.uid()),
        }
        if let Some(&v) = self.params.get(&id) {
            return Ok(v);
        }
        let t = store.get(id);
        let (r, c) = t.dims2();
        let v = self.push("param", t.data().to_vec(), r, c, Op::Param, true)?;
        self.params.insert(id, v);
        Ok(v)
    }

    /// Copy of `v` cut off from the graph.
    pub fn detach(&mut self, v: Var) -> Result<Var, DiffError> {
        let n = &self.nodes[v.0];
        let (value, r, c) = (n.value.clone(), n.rows, n.cols);
        self.push("detach", value, r, c, Op::Leaf, false)
    }

    // ---- accessors ----------------------------------------------------

    pub fn value(&self, v: Var) -> &[F] {
        &self.nodes[v.0].value
    }

    pub fn dims(&self, v: Var) -> (usize, usize) {
        let n = &self.nodes[v.0];
        (n.rows, n.cols)
    }

    pub fn scalar(&self, v: Var) -> F {
        self.nodes[v.0].value[0]
    }

    pub fn tensor(&self, v: Var) -> Tensor<F> {
        let n = &self.nodes[v.0];
        Tensor::matrix(n.rows, n.cols, n.value.clone()).expect("node dims consistent")
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.rg(v)
    }

    /// Attention probabilities `[batch, heads, seq, seq]` of an attention node.
    pub fn attention_probs(&self, v: Var) -> Option<(&AttnSpec, &[F])> {
        match &self.nodes[v.0].op {
            Op::Attention { spec, probs, .. } => Some((spec, probs)),
            _ => None,
        }
    }

    // ---- linear algebra -----------------------------------------------

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var, DiffError> {
        let (m, k) = self.dims(a);
        let (k2, n) = self.dims(b);
        if k != k2 {
            return Err(shape_err("matmul", format!("{m}x{k} * {k2}x{n}")));
        }
        let mut out = vec![F::zero(); m * n];
        F::gemm(
            m,
            k,
            n,
            F::one(),
            self.value(a),
            k as isize,
            1,
            self.value(b),
            n as isize,
            1,
            F::zero(),
            &mut out,
            n as isize,
            1,
        );
        let rg = self.rg(a) || self.rg(b);
        self.push("matmul", out, m, n, Op::MatMul(a, b), rg)
    }

    fn same_dims(&self, op: &'static str, a: Var, b: Var) -> Result<(usize, usize), DiffError> {
        let (da, db) = (self.dims(a), self.dims(b));
        if da != db {
            return Err(shape_err(op, format!("{da:?} vs {db:?}")));
        }
        Ok(da)
    }

    fn zip(&mut self, name: &'static str, a: Var, b: Var, f: impl Fn(F, F) -> F, op: Op<F>) -> Result<Var, DiffError> {
        let (r, c) = self.same_dims(name, a, b)?;
        let out = self
            .value(a)
            .iter()
            .zip(self.value(b))
            .map(|(&x, &y)| f(x, y))
            .collect();
        let rg = self.rg(a) || self.rg(b);
        self.push(name, out, r, c, op, rg)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, DiffError> {
        self.zip("add", a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var, DiffError> {
        self.zip("sub", a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, DiffError> {
        self.zip("mul", a, b, |x, y| x * y, Op::Mul(a, b))
    }

    /// Adds the `1 x c` row `b` to every row of `x`.
    pub fn add_row(&mut self, x: Var, b: Var) -> Result<Var, DiffError> {
        let (r, c) = self.dims(x);
        if self.dims(b) != (1, c) {
            return Err(shape_err("add_row", format!("{r}x{c} + {:?}", self.dims(b))));
        }
        let bv = self.value(b);
        let mut out = self.value(x).to_vec();
        for row in out.chunks_mut(c) {
            for (p, &q) in row.iter_mut().zip(bv) {
                *p += q;
            }
        }
        let rg = self.rg(x) || self.rg(b);
        self.push("add_row", out, r, c, Op::AddRow(x, b), rg)
    }

    /// Scales row `i` of `x` by `s[i]`, where `s` is `r x 1`.
    pub fn mul_col(&mut self, x: Var, s: Var) -> Result<Var, DiffError> {
        let (r, c) = self.dims(x);
        if self.dims(s) != (r, 1) {
            return Err(shape_err("mul_col", format!("{r}x{c} * {:?}", self.dims(s))));
        }
        let sv = self.value(s);
        let out = self
            .value(x)
            .chunks(c.max(1))
            .zip(sv)
            .flat_map(|(row, &k)| row.iter().map(move |&p| p * k))
            .collect();
        let rg = self.rg(x) || self.rg(s);
        self.push("mul_col", out, r, c, Op::MulCol(x, s), rg)
    }

    pub fn scale(&mut self, x: Var, k: F) -> Result<Var, DiffError> {
        let (r, c) = self.dims(x);
        let out = self.value(x).iter().map(|&p| p * k).collect();
        let rg = self.rg(x);
        self.push("scale", out, r, c, Op::Scale(x, k), rg)
    }

    pub fn neg(&mut self, x: Var) -> Result<Var, DiffError> {
        self.scale(x, -F::one())
    }

    pub fn add_scalar(&mut self, x: Var, k: F) -> Result<Var, DiffError> {
        let (r, c) = self.dims(x);
        let out = self.value(x).iter().map(|&p| p + k).collect();
        let rg = self.rg(x);
        self.push("add_scalar", out, r, c, Op::AddScalar(x), rg)
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var, DiffError> {
        let (r, c) = self.dims(x);
        let xv = self.value(x);
        let mut out = vec![F::zero(); r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = xv[i * c + j];
            }
        }
        let rg = self.rg(x);
        self.push("transpose", out, c, r, Op::Transpose(x), rg)
    }

    /// `x * w + b` with `b` a `1 x n` row.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Result<Var, DiffError> {
        let y = self.matmul(x, w)?;
        self.add_row(y, b)
    }

    // ---- structural ---------------------------------------------------

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var, DiffError> {
        let Some(&first) = parts.first() else {
            return Err(shape_err("concat_rows", "no inputs"));
        };
        let c = self.dims(first).1;
        let mut out = Vec::new();
        let mut rows = 0;
        for &p in parts {
            let (r, pc) = self.dims(p);
            if pc != c {
                return Err(shape_err("concat_rows", format!("cols {pc} vs {c}")));
            }
            out.extend_from_slice(self.value(p));
            rows += r;
        }
        let rg = parts.iter().any(|&p| self.rg(p));
        self.push("concat_rows", out, rows, c, Op::ConcatRows(parts.to_vec()), rg)
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var, DiffError> {
        let Some(&first) = parts.first() else {
            return Err(shape_err("concat_cols", "no inputs"));
        };
        let r = self.dims(first).0;
        let mut total = 0;
        for &p in parts {
            let (pr, pc) = self.dims(p);
            if pr != r {
                return Err(shape_err("concat_cols", format!("rows {pr} vs {r}")));
            }
            total += pc;
        }
        let mut out = Vec::with_capacity(r * total);
        for i in 0..r {
            for &p in parts {
                let pc = self.dims(p).1;
                out.extend_from_slice(&self.value(p)[i * pc..(i + 1) * pc]);
            }
        }
        let rg = parts.iter().any(|&p| self.rg(p));
        self.push("concat_cols", out, r, total, Op::ConcatCols(parts.to_vec()), rg)
    }

    pub fn slice_rows(&mut self, x: Var, start: usize, end: usize) -> Result<Var, DiffError> {
        let (r, c) = self.dims(x);
        if start > end || end > r {
            return Err(shape_err("slice_rows", format!("{start}..{end} of {r}")));
        }
        let out = self.value(x)[start * c..end * c].to_vec();
        let rg = self.rg(x);
        self.push("slice_rows", out, end - start, c, Op::SliceRows(x, start), rg)
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, end: usize) -> Result<Var, DiffError> {
        let (r, c) = self.dims(x);
        if start > end || end > c {
            return Err(shape_err("slice_cols", format!("{start}..{end} of {c}")));
        }
        let w = end - start;
        let xv = self.value(x);
        let mut out = Vec::with_capacity(r * w);
        for i in 0..r {
            out.extend_from_slice(&xv[i * c + start..i * c + end]);
        }
        let rg = self.rg(x);
        self.push("slice_cols", out, r, w, Op::SliceCols(x, start), rg)
    }

    /// Row lookup (embedding gather): output row `i` is `table[ids[i]]`.
    pub fn gather_rows(&mut self, table: Var, ids: &[usize]) -> Result<Var, DiffError> {
        let (r, c) = self.dims(table);
        let tv = self.value(table);
        let mut out = Vec::with_capacity(ids.len() * c);
        for &i in ids {
            if i >= r {
                return Err(shape_err("gather_rows", format!("row {i} of {r}")));
            }
            out.extend_from_slice(&tv[i * c..(i + 1) * c]);
        }
        let rg = self.rg(table);
        self.push("gather_rows", out, ids.len(), c, Op::Gather(table, ids.to_vec()), rg)
    }

    // ---- nonlinearities -------------------------------------------------

    pub fn softmax_rows(&mut self, x: Var) -> Result<Var, DiffError> {
        let (r, c) = self.dims(x);
        let mut out = self.value(x).to_vec();
        for row in out.chunks_mut(c.max(1)) {
            softmax_in_place(row);
        }
        let rg = self.rg(x);
        self.push("softmax", out, r, c, Op::Softmax(x), rg)
    }

    pub fn log_softmax_rows(&mut self, x: Var) -> Result<Var, DiffError> {
        let (r, c) = self.dims(x);
        let mut out = self.value(x).to_vec();
        for row in out.chunks_mut(c.max(1)) {
            let lse = log_sum_exp(row);
            row.iter_mut().for_each(|p| *p -= lse);
        }
        let rg = self.rg(x);
        self.push("log_softmax", out, r, c, Op::LogSoftmax(x), rg)
    }

    /// Row-wise layer normalization followed by the affine `gamma`, `beta`
    /// (both `1 x c`).
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Result<Var, DiffError> {
        let (r, c) = self.dims(x);
        if self.dims(gamma) != (1, c) || self.dims(beta) != (1, c) {
            return Err(shape_err("layer_norm", format!("affine params must be 1x{c}")));
        }
        let n = F::from_usize(c).unwrap();
        let eps = F::lit(LN_EPS);
        let (g, b) = (self.value(gamma), self.value(beta));
        let mut xhat = Vec::with_capacity(r * c);
        let mut rstd = Vec::with_capacity(r);
        let mut out = Vec::with_capacity(r * c);
        for row in self.value(x).chunks(c) {
            let mu = row.iter().copied().sum::<F>() / n;
            let var = row.iter().map(|&p| (p - mu) * (p - mu)).sum::<F>() / n;
            let rs = F::one() / (var + eps).sqrt();
            rstd.push(rs);
            for (j, &p) in row.iter().enumerate() {
                let h = (p - mu) * rs;
                xhat.push(h);
                out.push(h * g[j] + b[j]);
            }
        }
        let rg = self.rg(x) || self.rg(gamma) || self.rg(beta);
        self.push(
            "layer_norm",
            out,
            r,
            c,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            },
            rg,
        )
    }

    fn map(&mut self, name: &'static str, x: Var, f: impl Fn(F) -> F, op: Op<F>) -> Result<Var, DiffError> {
        let (r, c) = self.dims(x);
        let out = self.value(x).iter().map(|&p| f(p)).collect();
        let rg = self.rg(x);
        self.push(name, out, r, c, op, rg)
    }

    /// GELU, tanh approximation with constant `0.044715`.
    pub fn gelu(&mut self, x: Var) -> Result<Var, DiffError> {
        let (r, c) = self.dims(x);
        let rg = self.rg(x) && self.grad_enabled;
        let xv = self.value(x);
        let mut out = Vec::with_capacity(xv.len());
        let mut gate = Vec::with_capacity(if rg { xv.len() } else { 0 });
        for &p in xv {
            let s = gelu_gate(p);
            out.push(p * s);
            if rg {
                gate.push(s);
            }
        }
        self.push("gelu", out, r, c, Op::Gelu { x, gate }, rg)
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var, DiffError> {
        self.map("sigmoid", x, sigmoid, Op::Sigmoid(x))
    }

    /// Numerically stable `log(sigmoid(x))`.
    pub fn log_sigmoid(&mut self, x: Var) -> Result<Var, DiffError> {
        self.map("log_sigmoid", x, log_sigmoid, Op::LogSigmoid(x))
    }

    pub fn silu(&mut self, x: Var) -> Result<Var, DiffError> {
        self.map("silu", x, |p| p * sigmoid(p), Op::Silu(x))
    }

    /// Fused scaled dot-product attention over packed multi-head inputs.
    pub fn attention(&mut self, q: Var, k: Var, v: Var, spec: AttnSpec) -> Result<Var, DiffError> {
        let (rows, d) = self.dims(q);
        if self.dims(k) != (rows, d) || self.dims(v) != (rows, d) {
            return Err(shape_err("attention", "q, k, v must share dims"));
        }
        if spec.heads == 0 || d % spec.heads != 0 || rows != spec.batch * spec.seq {
            return Err(shape_err(
                "attention",
                format!(
                    "{rows}x{d} with batch {} seq {} heads {}",
                    spec.batch, spec.seq, spec.heads
                ),
            ));
        }
        if spec.pad_left.iter().any(|&p| p > spec.seq) {
            return Err(shape_err("attention", "padding longer than sequence"));
        }
        let (t, h, dh) = (spec.seq, spec.heads, d / spec.heads);
        let scale = F::one() / F::from_usize(dh).unwrap().sqrt();
        let (qv, kv, vv) = (self.value(q), self.value(k), self.value(v));
        let mut probs = vec![F::zero(); spec.batch * h * t * t];
        let mut out = vec![F::zero(); rows * d];
        for b in 0..spec.batch {
            for hd in 0..h {
                let off = hd * dh;
                for i in 0..t {
                    let keys = spec.keys(b, i);
                    if keys.is_empty() {
                        continue;
                    }
                    let qi = &qv[(b * t + i) * d + off..(b * t + i) * d + off + dh];
                    let prow = &mut probs[((b * h + hd) * t + i) * t..((b * h + hd) * t + i + 1) * t];
                    for j in keys.clone() {
                        let kj = &kv[(b * t + j) * d + off..(b * t + j) * d + off + dh];
                        prow[j] = dot(qi, kj) * scale;
                    }
                    softmax_in_place(&mut prow[keys.clone()]);
                    let orow = &mut out[(b * t + i) * d + off..(b * t + i) * d + off + dh];
                    for j in keys {
                        let p = prow[j];
                        let vj = &vv[(b * t + j) * d + off..(b * t + j) * d + off + dh];
                        for (o, &x) in orow.iter_mut().zip(vj) {
                            *o += p * x;
                        }
                    }
                }
            }
        }
        let rg = self.rg(q) || self.rg(k) || self.rg(v);
        self.push("attention", out, rows, d, Op::Attention { q, k, v, spec, probs }, rg)
    }

    // ---- reductions and losses ----------------------------------------

    pub fn sum(&mut self, x: Var) -> Result<Var, DiffError> {
        let s = self.value(x).iter().copied().sum();
        let rg = self.rg(x);
        self.push("sum", vec![s], 1, 1, Op::Sum(x), rg)
    }

    pub fn mean(&mut self, x: Var) -> Result<Var, DiffError> {
        let v = self.value(x);
        if v.is_empty() {
            return Err(shape_err("mean", "empty input"));
        }
        let s = v.iter().copied().sum::<F>() / F::from_usize(v.len()).unwrap();
        let rg = self.rg(x);
        self.push("mean", vec![s], 1, 1, Op::Mean(x), rg)
    }

    /// Per-row sums as an `r x 1` column.
    pub fn row_sum(&mut self, x: Var) -> Result<Var, DiffError> {
        let (r, c) = self.dims(x);
        let out = self
            .value(x)
            .chunks(c.max(1))
            .map(|row| row.iter().copied().sum())
            .collect::<Vec<F>>();
        let out = if c == 0 { vec![F::zero(); r] } else { out };
        let rg = self.rg(x);
        self.push("row_sum", out, r, 1, Op::RowSum(x), rg)
    }

    /// Row-wise dot products of two equally shaped matrices, `r x 1`.
    pub fn row_dot(&mut self, a: Var, b: Var) -> Result<Var, DiffError> {
        let p = self.mul(a, b)?;
        self.row_sum(p)
    }

    /// Mean over consecutive groups of `group` rows.
    pub fn segment_mean(&mut self, x: Var, group: usize) -> Result<Var, DiffError> {
        let (r, c) = self.dims(x);
        if group == 0 || r % group != 0 {
            return Err(shape_err("segment_mean", format!("{r} rows in groups of {group}")));
        }
        let inv = F::one() / F::from_usize(group).unwrap();
        let mut out = vec![F::zero(); (r / group) * c];
        for (i, row) in self.value(x).chunks(c).enumerate() {
            let o = &mut out[(i / group) * c..(i / group + 1) * c];
            for (a, &p) in o.iter_mut().zip(row) {
                *a += p * inv;
            }
        }
        let rg = self.rg(x);
        self.push("segment_mean", out, r / group, c, Op::SegmentMean(x, group), rg)
    }

    /// Mean of squared differences over all elements.
    pub fn mse(&mut self, a: Var, b: Var) -> Result<Var, DiffError> {
        let _ = self.same_dims("mse", a, b)?;
        let av = self.value(a);
        if av.is_empty() {
            return Err(shape_err("mse", "empty input"));
        }
        let n = F::from_usize(av.len()).unwrap();
        let s = av
            .iter()
            .zip(self.value(b))
            .map(|(&x, &y)| (x - y) * (x - y))
            .sum::<F>()
            / n;
        let rg = self.rg(a) || self.rg(b);
        self.push("mse", vec![s], 1, 1, Op::Mse(a, b), rg)
    }

    /// Mean cross-entropy of `logits` rows against target class ids.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Result<Var, DiffError> {
        let (r, c) = self.dims(logits);
        if targets.len() != r || r == 0 {
            return Err(shape_err(
                "cross_entropy",
                format!("{r} rows, {} targets", targets.len()),
            ));
        }
        if let Some(&bad) = targets.iter().find(|&&t| t >= c) {
            return Err(shape_err("cross_entropy", format!("target {bad} of {c} classes")));
        }
        let mut probs = self.value(logits).to_vec();
        let mut total = F::zero();
        for (row, &t) in probs.chunks_mut(c).zip(targets) {
            let lse = log_sum_exp(row);
            total += lse - row[t];
            row.iter_mut().for_each(|p| *p = (*p - lse).exp());
        }
        let loss = total / F::from_usize(r).unwrap();
        let rg = self.rg(logits);
        self.push(
            "cross_entropy",
            vec![loss],
            1,
            1,
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                probs,
            },
            rg,
        )
    }

    pub fn l2_normalize_rows(&mut self, x: Var) -> Result<Var, DiffError> {
        let (r, c) = self.dims(x);
        let floor = F::lit(NORM_FLOOR);
        let mut norms = Vec::with_capacity(r);
        let mut out = Vec::with_capacity(r * c);
        for row in self.value(x).chunks(c.max(1)) {
            let n = dot(row, row).sqrt().max(floor);
            norms.push(n);
            out.extend(row.iter().map(|&p| p / n));
        }
        let rg = self.rg(x);
        self.push("l2_normalize", out, r, c, Op::L2NormalizeRows { x, norms }, rg)
    }

    // ---- backward -------------------------------------------------------

    /// Reverse sweep from a scalar `loss`. A tape supports one backward pass.
    pub fn backward(&mut self, loss: Var) -> Result<Gradients<F>, DiffError> {
        if self.consumed {
            return Err(DiffError::BackwardTwice);
        }
        let (r, c) = self.dims(loss);
        if (r, c) != (1, 1) {
            return Err(DiffError::NonScalarLoss { rows: r, cols: c });
        }
        self.consumed = true;
        let mut grads: Vec<Option<Vec<F>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![F::one()]);
        for i in (0..=loss.0).rev() {
            if !self.nodes[i].requires_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.backprop_node(i, &g, &mut grads);
            grads[i] = Some(g);
        }
        for (i, n) in self.nodes.iter().enumerate() {
            if !n.requires_grad {
                grads[i] = None;
            }
        }
        Ok(Gradients { grads })
    }

    /// Gradients of every parameter leaf on this tape that the loss reached.
    pub fn param_grads(&self, grads: &Gradients<F>) -> ParamGrads<F> {
        let mut out: Vec<(ParamId, Vec<F>)> = self
            .params
            .iter()
            .filter_map(|(&id, &v)| grads.get(v).map(|g| (id, g.to_vec())))
            .collect();
        out.sort_by_key(|(id, _)| *id);
        ParamGrads { grads: out }
    }

    fn backprop_node(&self, i: usize, g: &[F], grads: &mut [Option<Vec<F>>]) {
        let node = &self.nodes[i];
        let (rows, cols) = (node.rows, node.cols);
        let y = &node.value;
        match &node.op {
            Op::Leaf | Op::Param => {}
            Op::MatMul(a, b) => {
                let (m, k) = self.dims(*a);
                let n = cols;
                if self.rg(*a) {
                    let bv = self.value(*b);
                    let da = acc(grads, &self.nodes, *a);
                    // dA = dC * B^T
                    F::gemm(
                        m,
                        n,
                        k,
                        F::one(),
                        g,
                        n as isize,
                        1,
                        bv,
                        1,
                        n as isize,
                        F::one(),
                        da,
                        k as isize,
                        1,
                    );
                }
                if self.rg(*b) {
                    let av = self.value(*a);
                    let db = acc(grads, &self.nodes, *b);
                    // dB = A^T * dC
                    F::gemm(
                        k,
                        m,
                        n,
                        F::one(),
                        av,
                        1,
                        k as isize,
                        g,
                        n as isize,
                        1,
                        F::one(),
                        db,
                        n as isize,
                        1,
                    );
                }
            }
            Op::Add(a, b) => {
                add_into(grads, &self.nodes, *a, g, F::one());
                add_into(grads, &self.nodes, *b, g, F::one());
            }
            Op::Sub(a, b) => {
                add_into(grads, &self.nodes, *a, g, F::one());
                add_into(grads, &self.nodes, *b, g, -F::one());
            }
            Op::Mul(a, b) => {
                if self.rg(*a) {
                    let bv = self.value(*b);
                    let da = acc(grads, &self.nodes, *a);
                    for ((d, &gi), &bi) in da.iter_mut().zip(g).zip(bv) {
                        *d += gi * bi;
                    }
                }
                if self.rg(*b) {
                    let av = self.value(*a);
                    let db = acc(grads, &self.nodes, *b);
                    for ((d, &gi), &ai) in db.iter_mut().zip(g).zip(av) {
                        *d += gi * ai;
                    }
                }
            }
            Op::AddRow(x, b) => {
                add_into(grads, &self.nodes, *x, g, F::one());
                if self.rg(*b) {
                    let db = acc(grads, &self.nodes, *b);
                    for row in g.chunks(cols) {
                        for (d, &gi) in db.iter_mut().zip(row) {
                            *d += gi;
                        }
                    }
                }
            }
            Op::MulCol(x, s) => {
                if self.rg(*x) {
                    let sv = self.value(*s);
                    let dx = acc(grads, &self.nodes, *x);
                    for (r, (drow, grow)) in dx.chunks_mut(cols).zip(g.chunks(cols)).enumerate() {
                        for (d, &gi) in drow.iter_mut().zip(grow) {
                            *d += gi * sv[r];
                        }
                    }
                }
                if self.rg(*s) {
                    let xv = self.value(*x);
                    let ds = acc(grads, &self.nodes, *s);
                    for (r, (xrow, grow)) in xv.chunks(cols).zip(g.chunks(cols)).enumerate() {
                        ds[r] += dot(xrow, grow);
                    }
                }
            }
            Op::Scale(x, k) => add_into(grads, &self.nodes, *x, g, *k),
            Op::AddScalar(x) => add_into(grads, &self.nodes, *x, g, F::one()),
            Op::Transpose(x) => {
                if self.rg(*x) {
                    // y is cols_x x rows_x; here rows = cols_x
                    let dx = acc(grads, &self.nodes, *x);
                    let (xr, xc) = (cols, rows);
                    for a in 0..xr {
                        for b in 0..xc {
                            dx[a * xc + b] += g[b * xr + a];
                        }
                    }
                }
            }
            Op::ConcatRows(parts) => {
                let mut off = 0;
                for &p in parts {
                    let n = self.nodes[p.0].value.len();
                    add_into(grads, &self.nodes, p, &g[off..off + n], F::one());
                    off += n;
                }
            }
            Op::ConcatCols(parts) => {
                let mut coff = 0;
                for &p in parts {
                    let pc = self.dims(p).1;
                    if self.rg(p) {
                        let dp = acc(grads, &self.nodes, p);
                        for r in 0..rows {
                            for j in 0..pc {
                                dp[r * pc + j] += g[r * cols + coff + j];
                            }
                        }
                    }
                    coff += pc;
                }
            }
            Op::SliceRows(x, start) => {
                if self.rg(*x) {
                    let dx = acc(grads, &self.nodes, *x);
                    for (d, &gi) in dx[start * cols..(start + rows) * cols].iter_mut().zip(g) {
                        *d += gi;
                    }
                }
            }
            Op::SliceCols(x, start) => {
                if self.rg(*x) {
                    let xc = self.dims(*x).1;
                    let dx = acc(grads, &self.nodes, *x);
                    for r in 0..rows {
                        for j in 0..cols {
                            dx[r * xc + start + j] += g[r * cols + j];
                        }
                    }
                }
            }
            Op::Gather(t, ids) => {
                if self.rg(*t) {
                    let dt = acc(grads, &self.nodes, *t);
                    for (r, &id) in ids.iter().enumerate() {
                        for j in 0..cols {
                            dt[id * cols + j] += g[r * cols + j];
                        }
                    }
                }
            }
            Op::Softmax(x) => {
                if self.rg(*x) {
                    let dx = acc(grads, &self.nodes, *x);
                    for ((drow, yrow), grow) in dx.chunks_mut(cols).zip(y.chunks(cols)).zip(g.chunks(cols)) {
                        let s = dot(yrow, grow);
                        for ((d, &yi), &gi) in drow.iter_mut().zip(yrow).zip(grow) {
                            *d += yi * (gi - s);
                        }
                    }
                }
            }
            Op::LogSoftmax(x) => {
                if self.rg(*x) {
                    let dx = acc(grads, &self.nodes, *x);
                    for ((drow, yrow), grow) in dx.chunks_mut(cols).zip(y.chunks(cols)).zip(g.chunks(cols)) {
                        let s: F = grow.iter().copied().sum();
                        for ((d, &yi), &gi) in drow.iter_mut().zip(yrow).zip(grow) {
                            *d += gi - yi.exp() * s;
                        }
                    }
                }
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            } => {
                let gv = self.value(*gamma);
                if self.rg(*x) {
                    let n = F::from_usize(cols).unwrap();
                    let dx = acc(grads, &self.nodes, *x);
                    for r in 0..rows {
                        let grow = &g[r * cols..(r + 1) * cols];
                        let hrow = &xhat[r * cols..(r + 1) * cols];
                        let mut m1 = F::zero();
                        let mut m2 = F::zero();
                        for j in 0..cols {
                            let dh = grow[j] * gv[j];
                            m1 += dh;
                            m2 += dh * hrow[j];
                        }
                        m1 /= n;
                        m2 /= n;
                        for j in 0..cols {
                            let dh = grow[j] * gv[j];
                            dx[r * cols + j] += rstd[r] * (dh - m1 - hrow[j] * m2);
                        }
                    }
                }
                if self.rg(*gamma) {
                    let dg = acc(grads, &self.nodes, *gamma);
                    for (grow, hrow) in g.chunks(cols).zip(xhat.chunks(cols)) {
                        for ((d, &gi), &hi) in dg.iter_mut().zip(grow).zip(hrow) {
                            *d += gi * hi;
                        }
                    }
                }
                if self.rg(*beta) {
                    let db = acc(grads, &self.nodes, *beta);
                    for grow in g.chunks(cols) {
                        for (d, &gi) in db.iter_mut().zip(grow) {
                            *d += gi;
                        }
                    }
                }
            }
            Op::Gelu { x, gate } => {
                if self.rg(*x) {
                    let xv = &self.nodes[x.0].value;
                    let dx = acc(grads, &self.nodes, *x);
                    for (((o, &gi), &xi), &s) in dx.iter_mut().zip(g).zip(xv).zip(gate) {
                        *o += gi * gelu_grad(xi, s);
                    }
                }
            }
            Op::Sigmoid(x) => {
                if self.rg(*x) {
                    let dx = acc(grads, &self.nodes, *x);
                    for ((d, &gi), &yi) in dx.iter_mut().zip(g).zip(y) {
                        *d += gi * yi * (F::one() - yi);
                    }
                }
            }
            Op::LogSigmoid(x) => self.unary_back(*x, g, grads, |p| sigmoid(-p)),
            Op::Silu(x) => self.unary_back(*x, g, grads, |p| {
                let s = sigmoid(p);
                s * (F::one() + p * (F::one() - s))
            }),
            Op::Attention { q, k, v, spec, probs } => self.attention_back(*q, *k, *v, spec, probs, g, grads),
            Op::Sum(x) => {
                let gi = g[0];
                if self.rg(*x) {
                    acc(grads, &self.nodes, *x).iter_mut().for_each(|d| *d += gi);
                }
            }
            Op::Mean(x) => {
                if self.rg(*x) {
                    let dx = acc(grads, &self.nodes, *x);
                    let gi = g[0] / F::from_usize(dx.len()).unwrap();
                    dx.iter_mut().for_each(|d| *d += gi);
                }
            }
            Op::RowSum(x) => {
                if self.rg(*x) {
                    let xc = self.dims(*x).1;
                    let dx = acc(grads, &self.nodes, *x);
                    for (drow, &gi) in dx.chunks_mut(xc.max(1)).zip(g) {
                        drow.iter_mut().for_each(|d| *d += gi);
                    }
                }
            }
            Op::SegmentMean(x, group) => {
                if self.rg(*x) {
                    let inv = F::one() / F::from_usize(*group).unwrap();
                    let dx = acc(grads, &self.nodes, *x);
                    for (r, drow) in dx.chunks_mut(cols).enumerate() {
                        let grow = &g[(r / group) * cols..(r / group + 1) * cols];
                        for (d, &gi) in drow.iter_mut().zip(grow) {
                            *d += gi * inv;
                        }
                    }
                }
            }
            Op::Mse(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let k = F::lit(2.0) * g[0] / F::from_usize(av.len()).unwrap();
                let diff: Vec<F> = av.iter().zip(bv).map(|(&p, &q)| p - q).collect();
                add_into(grads, &self.nodes, *a, &diff, k);
                add_into(grads, &self.nodes, *b, &diff, -k);
            }
            Op::CrossEntropy { logits, targets, probs } => {
                if self.rg(*logits) {
                    let c = self.dims(*logits).1;
                    let k = g[0] / F::from_usize(targets.len()).unwrap();
                    let dl = acc(grads, &self.nodes, *logits);
                    for (r, &t) in targets.iter().enumerate() {
                        for j in 0..c {
                            let ind = if j == t { F::one() } else { F::zero() };
                            dl[r * c + j] += k * (probs[r * c + j] - ind);
                        }
                    }
                }
            }
            Op::L2NormalizeRows { x, norms } => {
                if self.rg(*x) {
                    let dx = acc(grads, &self.nodes, *x);
                    for r in 0..rows {
                        let yrow = &y[r * cols..(r + 1) * cols];
                        let grow = &g[r * cols..(r + 1) * cols];
                        let s = dot(yrow, grow);
                        for j in 0..cols {
                            dx[r * cols + j] += (grow[j] - yrow[j] * s) / norms[r];
                        }
                    }
                }
            }
        }
    }

    fn unary_back(&self, x: Var, g: &[F], grads: &mut [Option<Vec<F>>], d: impl Fn(F) -> F) {
        if !self.rg(x) {
            return;
        }
        let xv = &self.nodes[x.0].value;
        let dx = acc(grads, &self.nodes, x);
        for ((o, &gi), &xi) in dx.iter_mut().zip(g).zip(xv) {
            *o += gi * d(xi);
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn attention_back(
        &self,
        q: Var,
        k: Var,
        v: Var,
        spec: &AttnSpec,
        probs: &[F],
        g: &[F],
        grads: &mut [Option<Vec<F>>],
    ) {
        let (rows, d) = self.dims(q);
        let (t, h) = (spec.seq, spec.heads);
        let dh = d / h;
        let scale = F::one() / F::from_usize(dh).unwrap().sqrt();
        let (qv, kv, vv) = (self.value(q), self.value(k), self.value(v));
        let mut dq = vec![F::zero(); rows * d];
        let mut dk = vec![F::zero(); rows * d];
        let mut dv = vec![F::zero(); rows * d];
        let mut ds = vec![F::zero(); t];
        for b in 0..spec.batch {
            for hd in 0..h {
                let off = hd * dh;
                for i in 0..t {
                    let keys = spec.keys(b, i);
                    if keys.is_empty() {
                        continue;
                    }
                    let qi_at = (b * t + i) * d + off;
                    let go = &g[qi_at..qi_at + dh];
                    let prow = &probs[((b * h + hd) * t + i) * t..((b * h + hd) * t + i + 1) * t];
                    let mut s = F::zero();
                    for j in keys.clone() {
                        let vj_at = (b * t + j) * d + off;
                        let dp = dot(go, &vv[vj_at..vj_at + dh]);
                        ds[j] = dp;
                        s += prow[j] * dp;
                        for (o, &x) in dv[vj_at..vj_at + dh].iter_mut().zip(go) {
                            *o += prow[j] * x;
                        }
                    }
                    for j in keys {
                        let dsj = prow[j] * (ds[j] - s) * scale;
                        let kj_at = (b * t + j) * d + off;
                        for c in 0..dh {
                            dq[qi_at + c] += dsj * kv[kj_at + c];
                            dk[kj_at + c] += dsj * qv[qi_at + c];
                        }
                    }
                }
            }
        }
        add_into(grads, &self.nodes, q, &dq, F::one());
        add_into(grads, &self.nodes, k, &dk, F::one());
        add_into(grads, &self.nodes, v, &dv, F::one());
    }
}

fn acc<'a, F: Real>(grads: &'a mut [Option<Vec<F>>], nodes: &[Node<F>], v: Var) -> &'a mut [F] {
    grads[v.0]
        .get_or_insert_with(|| vec![F::zero(); nodes[v.0].value.len()])
        .as_mut_slice()
}

fn add_into<F: Real>(grads: &mut [Option<Vec<F>>], nodes: &[Node<F>], v: Var, g: &[F], k: F) {
    if !nodes[v.0].requires_grad {
        return;
    }
    let d = acc(grads, nodes, v);
    for (o, &x) in d.iter_mut().zip(g) {
        *o += k * x;
    }
}

pub(crate) fn dot<F: Real>(a: &[F], b: &[F]) -> F {
    a.iter().zip(b).map(|(&x, &y)| x * y).sum()
}

pub(crate) fn log_sum_exp<F: Real>(row: &[F]) -> F {
    let m = row.iter().copied().fold(F::neg_infinity(), F::max);
    if !m.is_finite() {
        return m;
    }
    m + row.iter().map(|&p| (p - m).exp()).sum::<F>().ln()
}

pub(crate) fn softmax_in_place<F: Real>(row: &mut [F]) {
    if row.is_empty() {
        return;
    }
    let m = row.iter().copied().fold(F::neg_infinity(), F::max);
    let mut s = F::zero();
    for p in row.iter_mut() {
        *p = (*p - m).exp();
        s += *p;
    }
    row.iter_mut().for_each(|p| *p /= s);
}

pub(crate) fn sigmoid<F: Real>(x: F) -> F {
    if x >= F::zero() {
        F::one() / (F::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (F::one() + e)
    }
}

pub(crate) fn log_sigmoid<F: Real>(x: F) -> F {
    x.min(F::zero()) - (-x.abs()).exp().ln_1p()
}

// 0.5 (1 + tanh u) == sigmoid(2u); exp is much cheaper than tanh.
fn gelu_gate<F: Real>(x: F) -> F {
    let u = F::lit(GELU_C) * (x + F::lit(GELU_A) * x * x * x);
    sigmoid(u + u)
}

/// Derivative at `x` given the forward gate `s`.
fn gelu_grad<F: Real>(x: F, s: F) -> F {
    let du = F::lit(GELU_C) * (F::one() + F::lit(3.0) * F::lit(GELU_A) * x * x);
    s + x * (s + s) * (F::one() - s) * du
}
