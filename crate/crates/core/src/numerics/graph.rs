use super::real::matmul;
use super::{sigmoid, softmax_in_place, NumericsError, Real, Result, RngState, Tensor, LOG_FLOOR};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Named trainable tensors. Ids are dense and stable in insertion order.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamSet<T> {
    names: Vec<String>,
    tensors: Vec<Tensor<T>>,
}

impl<T: Real> Default for ParamSet<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Real> ParamSet<T> {
    pub fn new() -> Self {
        Self { names: Vec::new(), tensors: Vec::new() }
    }

    pub fn add(&mut self, name: impl Into<String>, tensor: Tensor<T>) -> ParamId {
        let name = name.into();
        assert!(self.find(&name).is_none(), "duplicate parameter {name}");
        self.names.push(name);
        self.tensors.push(tensor);
        ParamId(self.tensors.len() - 1)
    }

    pub fn get(&self, id: ParamId) -> &Tensor<T> {
        &self.tensors[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor<T> {
        &mut self.tensors[id.0]
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.names.iter().position(|n| n == name).map(ParamId)
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.tensors.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &str, &Tensor<T>)> {
        self.names.iter().zip(&self.tensors).enumerate().map(|(i, (n, t))| (ParamId(i), n.as_str(), t))
    }

    /// Total scalar count across all parameters.
    pub fn num_elements(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }

    pub fn cast<U: Real>(&self) -> ParamSet<U> {
        ParamSet { names: self.names.clone(), tensors: self.tensors.iter().map(Tensor::cast).collect() }
    }
}

/// Per-parameter gradients returned by [`Graph::backward`].
#[derive(Debug, Clone)]
pub struct Gradients<T> {
    grads: Vec<Tensor<T>>,
    reached: Vec<bool>,
}

impl<T: Real> Gradients<T> {
    pub fn get(&self, id: ParamId) -> &Tensor<T> {
        &self.grads[id.0]
    }

    /// Whether any gradient path from the loss reached this parameter.
    pub fn reached(&self, id: ParamId) -> bool {
        self.reached[id.0]
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Tensor<T>)> {
        self.grads.iter().enumerate().map(|(i, g)| (ParamId(i), g))
    }

    pub fn global_norm(&self) -> f64 {
        self.grads.iter().flat_map(|g| g.data().iter()).map(|x| x.as_f64() * x.as_f64()).sum::<f64>().sqrt()
    }
}

/// Boolean visibility pattern `[batch, queries, keys]` for attention.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionMask {
    batch: usize,
    queries: usize,
    keys: usize,
    allowed: Vec<bool>,
}

impl AttentionMask {
    /// Keys marked invalid (padding) are hidden from every query.
    pub fn key_padding(batch: usize, queries: usize, key_valid: &[bool]) -> Self {
        assert_eq!(key_valid.len() % batch.max(1), 0);
        let keys = key_valid.len() / batch.max(1);
        let mut allowed = Vec::with_capacity(batch * queries * keys);
        for b in 0..batch {
            for _ in 0..queries {
                allowed.extend_from_slice(&key_valid[b * keys..(b + 1) * keys]);
            }
        }
        Self { batch, queries, keys, allowed }
    }

    /// Self-attention where query `i` sees keys `j <= i` that are not padding.
    pub fn causal(batch: usize, len: usize, key_valid: &[bool]) -> Self {
        assert_eq!(key_valid.len(), batch * len);
        let mut allowed = Vec::with_capacity(batch * len * len);
        for b in 0..batch {
            for i in 0..len {
                for j in 0..len {
                    allowed.push(j <= i && key_valid[b * len + j]);
                }
            }
        }
        Self { batch, queries: len, keys: len, allowed }
    }

    pub fn allowed(&self, b: usize, i: usize, j: usize) -> bool {
        self.allowed[(b * self.queries + i) * self.keys + j]
    }

    pub fn dims(&self) -> (usize, usize, usize) {
        (self.batch, self.queries, self.keys)
    }
}

#[derive(Debug, Clone)]
enum Op<T> {
    Param(ParamId),
    Input,
    MatMul(NodeId, NodeId),
    Add(NodeId, NodeId),
    AddRow(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Scale(NodeId, T),
    Relu(NodeId),
    Sigmoid(NodeId),
    Softmax(NodeId),
    LayerNorm { x: NodeId, gamma: NodeId, beta: NodeId, eps: T },
    Embedding { table: NodeId, ids: Vec<usize> },
    Attention { q: NodeId, k: NodeId, v: NodeId, heads: usize, mask: AttentionMask },
    Mean(Vec<NodeId>),
    Dropout { x: NodeId, keep: Vec<T> },
    Interpolate { p: NodeId, c: NodeId, y: NodeId, rows: Vec<bool> },
    Nll { p: NodeId, targets: NodeId, weights: Vec<T> },
    ConfSmoothing { conf: NodeId, labels: Vec<usize>, mask: Vec<bool>, eps0: T, vocab: usize },
    Detach(NodeId),
    Sum(NodeId),
}

impl<T> Op<T> {
    fn name(&self) -> &'static str {
        match self {
            Op::Param(_) => "param",
            Op::Input => "input",
            Op::MatMul(..) => "matmul",
            Op::Add(..) => "add",
            Op::AddRow(..) => "add_row",
            Op::Mul(..) => "mul",
            Op::Scale(..) => "scale",
            Op::Relu(_) => "relu",
            Op::Sigmoid(_) => "sigmoid",
            Op::Softmax(_) => "softmax",
            Op::LayerNorm { .. } => "layer_norm",
            Op::Embedding { .. } => "embedding",
            Op::Attention { .. } => "attention",
            Op::Mean(_) => "mean",
            Op::Dropout { .. } => "dropout",
            Op::Interpolate { .. } => "interpolate",
            Op::Nll { .. } => "nll",
            Op::ConfSmoothing { .. } => "conf_smoothing",
            Op::Detach(_) => "detach",
            Op::Sum(_) => "sum",
        }
    }
}

#[derive(Debug, Clone)]
struct Node<T> {
    op: Op<T>,
    shape: Vec<usize>,
    value: Vec<T>,
    aux: Vec<T>,
}

/// Explicit computation graph.
///
/// Nodes are declared with their shapes first and evaluated by [`forward`],
/// which may be called repeatedly (for example with perturbed parameters);
/// random choices such as dropout masks are fixed at construction, so every
/// replay is deterministic. Node ids are allocated in topological order.
///
/// [`forward`]: Graph::forward
#[derive(Debug, Clone, Default)]
pub struct Graph<T> {
    nodes: Vec<Node<T>>,
    evaluated: bool,
}

fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

fn rows_cols(shape: &[usize]) -> (usize, usize) {
    let cols = *shape.last().unwrap_or(&1);
    (numel(shape) / cols.max(1), cols)
}

impl<T: Real> Graph<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new(), evaluated: false }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn shape(&self, id: NodeId) -> &[usize] {
        &self.nodes[id.0].shape
    }

    fn push(&mut self, op: Op<T>, shape: Vec<usize>) -> NodeId {
        self.evaluated = false;
        self.nodes.push(Node { op, shape, value: Vec::new(), aux: Vec::new() });
        NodeId(self.nodes.len() - 1)
    }

    pub fn param(&mut self, params: &ParamSet<T>, id: ParamId) -> NodeId {
        let shape = params.get(id).shape().to_vec();
        self.push(Op::Param(id), shape)
    }

    pub fn input(&mut self, tensor: Tensor<T>) -> NodeId {
        let shape = tensor.shape().to_vec();
        let id = self.push(Op::Input, shape);
        self.nodes[id.0].value = tensor.into_data();
        id
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let (sa, sb) = (self.shape(a), self.shape(b));
        assert!(sa.len() == 2 && sb.len() == 2, "matmul expects matrices");
        assert_eq!(sa[1], sb[0], "matmul inner dimensions {sa:?} x {sb:?}");
        let shape = vec![sa[0], sb[1]];
        self.push(Op::MatMul(a, b), shape)
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> NodeId {
        assert_eq!(self.shape(a), self.shape(b), "add shapes");
        let shape = self.shape(a).to_vec();
        self.push(Op::Add(a, b), shape)
    }

    /// `a [.., n] + bias [n]` broadcast over rows.
    pub fn add_row(&mut self, a: NodeId, bias: NodeId) -> NodeId {
        let n = *self.shape(a).last().expect("rank >= 1");
        assert_eq!(numel(self.shape(bias)), n, "bias width");
        let shape = self.shape(a).to_vec();
        self.push(Op::AddRow(a, bias), shape)
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        assert_eq!(self.shape(a), self.shape(b), "mul shapes");
        let shape = self.shape(a).to_vec();
        self.push(Op::Mul(a, b), shape)
    }

    pub fn scale(&mut self, a: NodeId, factor: T) -> NodeId {
        let shape = self.shape(a).to_vec();
        self.push(Op::Scale(a, factor), shape)
    }

    pub fn relu(&mut self, a: NodeId) -> NodeId {
        let shape = self.shape(a).to_vec();
        self.push(Op::Relu(a), shape)
    }

    pub fn sigmoid(&mut self, a: NodeId) -> NodeId {
        let shape = self.shape(a).to_vec();
        self.push(Op::Sigmoid(a), shape)
    }

    /// Softmax over the last axis.
    pub fn softmax(&mut self, a: NodeId) -> NodeId {
        let shape = self.shape(a).to_vec();
        self.push(Op::Softmax(a), shape)
    }

    /// Normalizes each row over the last axis, then applies `gamma`, `beta`.
    pub fn layer_norm(&mut self, x: NodeId, gamma: NodeId, beta: NodeId, eps: T) -> NodeId {
        let n = *self.shape(x).last().expect("rank >= 1");
        assert_eq!(numel(self.shape(gamma)), n);
        assert_eq!(numel(self.shape(beta)), n);
        let shape = self.shape(x).to_vec();
        self.push(Op::LayerNorm { x, gamma, beta, eps }, shape)
    }

    /// Rows of `table [V, d]` selected by `ids`, giving `[ids.len(), d]`.
    pub fn embedding(&mut self, table: NodeId, ids: &[usize]) -> Result<NodeId> {
        let ts = self.shape(table);
        assert_eq!(ts.len(), 2, "embedding table must be a matrix");
        let (vocab, width) = (ts[0], ts[1]);
        if let Some(&bad) = ids.iter().find(|&&i| i >= vocab) {
            return Err(NumericsError::IndexOutOfRange { index: bad, len: vocab });
        }
        Ok(self.push(Op::Embedding { table, ids: ids.to_vec() }, vec![ids.len(), width]))
    }

    /// Multi-head scaled dot-product attention.
    ///
    /// `q` is `[batch * queries, d]`, `k` and `v` are `[batch * keys, d]`; the
    /// mask decides visibility. A query with no visible key outputs zeros.
    pub fn attention(&mut self, q: NodeId, k: NodeId, v: NodeId, heads: usize, mask: AttentionMask) -> NodeId {
        let (b, lq, lk) = mask.dims();
        let d = self.shape(q)[1];
        assert!(heads > 0 && d.is_multiple_of(heads), "width {d} not divisible by {heads} heads");
        assert_eq!(self.shape(q), &[b * lq, d][..], "query shape");
        assert_eq!(self.shape(k), &[b * lk, d][..], "key shape");
        assert_eq!(self.shape(v), &[b * lk, d][..], "value shape");
        self.push(Op::Attention { q, k, v, heads, mask }, vec![b * lq, d])
    }

    /// Elementwise mean of equally shaped nodes.
    pub fn mean_of(&mut self, xs: &[NodeId]) -> NodeId {
        assert!(!xs.is_empty(), "mean of empty set");
        let shape = self.shape(xs[0]).to_vec();
        for &x in xs {
            assert_eq!(self.shape(x), &shape[..], "mean_of shapes");
        }
        if xs.len() == 1 {
            return xs[0];
        }
        self.push(Op::Mean(xs.to_vec()), shape)
    }

    /// Inverted dropout with a mask drawn now from `rng`. Identity (no node)
    /// when disabled or `rate == 0`.
    pub fn dropout(&mut self, x: NodeId, rate: f64, rng: &mut RngState, enabled: bool) -> Result<NodeId> {
        if !(0.0..1.0).contains(&rate) {
            return Err(NumericsError::Config(format!("dropout rate {rate} outside [0, 1)")));
        }
        if !enabled || rate == 0.0 {
            return Ok(x);
        }
        let n = numel(self.shape(x));
        let scale = T::lit(1.0 / (1.0 - rate));
        let keep = (0..n).map(|_| if rng.uniform() < rate { T::zero() } else { scale }).collect();
        let shape = self.shape(x).to_vec();
        Ok(self.push(Op::Dropout { x, keep }, shape))
    }

    /// `c * p + (1 - c) * y` on rows flagged in `rows`, `p` elsewhere.
    /// `c` is `[n, 1]`; `y` is treated as a constant.
    pub fn interpolate(&mut self, p: NodeId, c: NodeId, y: NodeId, rows: &[bool]) -> NodeId {
        let (n, _) = rows_cols(self.shape(p));
        assert_eq!(self.shape(p), self.shape(y), "interpolate target shape");
        assert_eq!(numel(self.shape(c)), n, "one confidence per row");
        assert_eq!(rows.len(), n);
        let shape = self.shape(p).to_vec();
        self.push(Op::Interpolate { p, c, y, rows: rows.to_vec() }, shape)
    }

    /// Scalar `sum_r w_r * sum_v -t[r,v] * ln(max(p[r,v], 1e-12))`.
    /// Targets are treated as constants.
    pub fn nll(&mut self, p: NodeId, targets: NodeId, weights: &[T]) -> NodeId {
        let (n, _) = rows_cols(self.shape(p));
        assert_eq!(self.shape(p), self.shape(targets), "nll target shape");
        assert_eq!(weights.len(), n, "one weight per row");
        self.push(Op::Nll { p, targets, weights: weights.to_vec() }, vec![1])
    }

    /// Instance-specific smoothed label distributions `[n, vocab]` whose
    /// smoothing mass is `eps0 * exp(1 - c_r / c_mean)`, clamped to
    /// `[0, 1 - 1e-6]`, where `c_mean` averages `conf` over masked rows.
    /// Produces labels only: no gradient flows back into `conf`.
    pub fn confidence_smoothing(
        &mut self,
        conf: NodeId,
        labels: &[usize],
        mask: &[bool],
        eps0: T,
        vocab: usize,
    ) -> Result<NodeId> {
        let n = numel(self.shape(conf));
        assert_eq!(labels.len(), n);
        assert_eq!(mask.len(), n);
        if let Some(&bad) = labels.iter().find(|&&l| l >= vocab) {
            return Err(NumericsError::IndexOutOfRange { index: bad, len: vocab });
        }
        let op = Op::ConfSmoothing { conf, labels: labels.to_vec(), mask: mask.to_vec(), eps0, vocab };
        Ok(self.push(op, vec![n, vocab]))
    }

    /// Identity in the forward pass; blocks gradients.
    pub fn detach(&mut self, x: NodeId) -> NodeId {
        let shape = self.shape(x).to_vec();
        self.push(Op::Detach(x), shape)
    }

    /// Sum of all elements as a `[1]` scalar.
    pub fn sum(&mut self, x: NodeId) -> NodeId {
        self.push(Op::Sum(x), vec![1])
    }

    /// `x W + b`.
    pub fn linear(&mut self, x: NodeId, w: NodeId, b: NodeId) -> NodeId {
        let y = self.matmul(x, w);
        self.add_row(y, b)
    }

    pub fn is_evaluated(&self) -> bool {
        self.evaluated
    }

    pub fn value(&self, id: NodeId) -> Result<&[T]> {
        if !self.evaluated {
            return Err(NumericsError::NotEvaluated);
        }
        Ok(&self.nodes[id.0].value)
    }

    pub fn tensor(&self, id: NodeId) -> Result<Tensor<T>> {
        Ok(Tensor::new(self.shape(id).to_vec(), self.value(id)?.to_vec()))
    }

    /// Scalar value of a single-element node.
    pub fn scalar(&self, id: NodeId) -> Result<T> {
        let v = self.value(id)?;
        if v.len() != 1 {
            return Err(NumericsError::Shape(format!("expected scalar, got {:?}", self.shape(id))));
        }
        Ok(v[0])
    }

    /// Attention weights `[batch, heads, queries, keys]` of an attention node
    /// after evaluation.
    pub fn attention_weights(&self, id: NodeId) -> Result<&[T]> {
        if !self.evaluated {
            return Err(NumericsError::NotEvaluated);
        }
        match self.nodes[id.0].op {
            Op::Attention { .. } => Ok(&self.nodes[id.0].aux),
            _ => Err(NumericsError::Shape("not an attention node".into())),
        }
    }

    /// Evaluates every node in topological order with the given parameters.
    pub fn forward(&mut self, params: &ParamSet<T>) -> Result<()> {
        self.evaluated = false;
        for i in 0..self.nodes.len() {
            let (done, rest) = self.nodes.split_at_mut(i);
            let node = &mut rest[0];
            eval_node(node, done, params)?;
            if !node.value.iter().all(|x| x.is_finite()) {
                return Err(NumericsError::NonFinite { op: node.op.name() });
            }
        }
        self.evaluated = true;
        Ok(())
    }

    /// Reverse pass from the scalar `loss`, returning one gradient per
    /// parameter of `params` (zeros where no path exists).
    pub fn backward(&self, loss: NodeId, params: &ParamSet<T>) -> Result<Gradients<T>> {
        if !self.evaluated {
            return Err(NumericsError::NotEvaluated);
        }
        if numel(self.shape(loss)) != 1 {
            return Err(NumericsError::Shape(format!("loss must be scalar, got {:?}", self.shape(loss))));
        }
        let mut grads: Vec<Option<Vec<T>>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(vec![T::one()]);
        let mut out = Gradients {
            grads: params.tensors.iter().map(|t| Tensor::zeros(t.shape().to_vec())).collect(),
            reached: vec![false; params.len()],
        };
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            backprop_node(node, &g, &self.nodes, &mut grads, &mut out);
        }
        if out.grads.iter().any(|g| !g.all_finite()) {
            return Err(NumericsError::NonFinite { op: "backward" });
        }
        Ok(out)
    }
}

fn val<T>(nodes: &[Node<T>], id: NodeId) -> &[T] {
    &nodes[id.0].value
}

fn eval_node<T: Real>(node: &mut Node<T>, done: &[Node<T>], params: &ParamSet<T>) -> Result<()> {
    let n = numel(&node.shape);
    match &node.op {
        Op::Input => return Ok(()),
        Op::Param(id) => {
            let t = params.get(*id);
            if t.shape() != &node.shape[..] {
                return Err(NumericsError::Shape(format!(
                    "parameter {} has shape {:?}, graph expects {:?}",
                    params.name(*id),
                    t.shape(),
                    node.shape
                )));
            }
            node.value.clear();
            node.value.extend_from_slice(t.data());
        }
        Op::MatMul(a, b) => {
            let (m, k) = (done[a.0].shape[0], done[a.0].shape[1]);
            let nn = done[b.0].shape[1];
            node.value.resize(n, T::zero());
            matmul(val(done, *a), false, val(done, *b), false, m, k, nn, &mut node.value, false);
        }
        Op::Add(a, b) => {
            node.value = val(done, *a).iter().zip(val(done, *b)).map(|(&x, &y)| x + y).collect();
        }
        Op::AddRow(a, b) => {
            let bias = val(done, *b);
            let w = bias.len();
            node.value = val(done, *a).iter().enumerate().map(|(i, &x)| x + bias[i % w]).collect();
        }
        Op::Mul(a, b) => {
            node.value = val(done, *a).iter().zip(val(done, *b)).map(|(&x, &y)| x * y).collect();
        }
        Op::Scale(a, s) => {
            let s = *s;
            node.value = val(done, *a).iter().map(|&x| x * s).collect();
        }
        Op::Relu(a) => {
            node.value = val(done, *a).iter().map(|&x| x.max(T::zero())).collect();
        }
        Op::Sigmoid(a) => {
            let x = val(done, *a);
            if x.iter().any(|v| !v.is_finite()) {
                return Err(NumericsError::NonFinite { op: "sigmoid" });
            }
            node.value = x.iter().map(|&v| sigmoid(v)).collect();
        }
        Op::Softmax(a) => {
            let x = val(done, *a);
            if x.iter().any(|v| !v.is_finite()) {
                return Err(NumericsError::NonFinite { op: "softmax" });
            }
            node.value = x.to_vec();
            let (_, cols) = rows_cols(&node.shape);
            for row in node.value.chunks_mut(cols) {
                softmax_in_place(row);
            }
        }
        Op::LayerNorm { x, gamma, beta, eps } => {
            let (rows, cols) = rows_cols(&node.shape);
            let (xv, gv, bv) = (val(done, *x), val(done, *gamma), val(done, *beta));
            node.value.resize(n, T::zero());
            node.aux.resize(2 * rows, T::zero());
            let inv_n = T::one() / T::lit(cols as f64);
            for r in 0..rows {
                let row = &xv[r * cols..(r + 1) * cols];
                let mean = row.iter().copied().sum::<T>() * inv_n;
                let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() * inv_n;
                let rstd = T::one() / (var + *eps).sqrt();
                node.aux[2 * r] = mean;
                node.aux[2 * r + 1] = rstd;
                for c in 0..cols {
                    node.value[r * cols + c] = (row[c] - mean) * rstd * gv[c] + bv[c];
                }
            }
        }
        Op::Embedding { table, ids } => {
            let width = node.shape[1];
            let t = val(done, *table);
            node.value.clear();
            for &id in ids {
                node.value.extend_from_slice(&t[id * width..(id + 1) * width]);
            }
        }
        Op::Attention { q, k, v, heads, mask } => {
            let (out, weights) =
                attention_forward(val(done, *q), val(done, *k), val(done, *v), *heads, mask, node.shape[1]);
            node.value = out;
            node.aux = weights;
        }
        Op::Mean(xs) => {
            node.value = vec![T::zero(); n];
            for x in xs {
                for (o, &v) in node.value.iter_mut().zip(val(done, *x)) {
                    *o += v;
                }
            }
            let inv = T::one() / T::lit(xs.len() as f64);
            node.value.iter_mut().for_each(|o| *o *= inv);
        }
        Op::Dropout { x, keep } => {
            node.value = val(done, *x).iter().zip(keep).map(|(&v, &k)| v * k).collect();
        }
        Op::Interpolate { p, c, y, rows } => {
            let (_, cols) = rows_cols(&node.shape);
            let (pv, cv, yv) = (val(done, *p), val(done, *c), val(done, *y));
            node.value = pv.to_vec();
            for (r, &active) in rows.iter().enumerate() {
                if !active {
                    continue;
                }
                let cr = cv[r];
                for j in r * cols..(r + 1) * cols {
                    node.value[j] = cr * pv[j] + (T::one() - cr) * yv[j];
                }
            }
        }
        Op::Nll { p, targets, weights } => {
            let (_, cols) = rows_cols(&done[p.0].shape);
            let (pv, tv) = (val(done, *p), val(done, *targets));
            let floor = T::lit(LOG_FLOOR);
            let mut total = T::zero();
            for (r, &w) in weights.iter().enumerate() {
                if w == T::zero() {
                    continue;
                }
                let mut row = T::zero();
                for j in r * cols..(r + 1) * cols {
                    if tv[j] != T::zero() {
                        row -= tv[j] * pv[j].max(floor).ln();
                    }
                }
                total += w * row;
            }
            node.value = vec![total];
        }
        Op::ConfSmoothing { conf, labels, mask, eps0, vocab } => {
            let cv = val(done, *conf);
            let (sum, count) =
                cv.iter().zip(mask).filter(|(_, &m)| m).fold((T::zero(), 0usize), |(s, k), (&c, _)| (s + c, k + 1));
            let c_mean = if count == 0 { T::one() } else { sum / T::lit(count as f64) };
            let cap = T::one() - T::lit(1e-6);
            node.value = vec![T::zero(); n];
            let other = T::lit((*vocab - 1).max(1) as f64);
            for (r, &label) in labels.iter().enumerate() {
                let eps = (*eps0 * (T::one() - cv[r] / c_mean).exp()).max(T::zero()).min(cap);
                let row = &mut node.value[r * vocab..(r + 1) * vocab];
                let off = if *vocab > 1 { eps / other } else { T::zero() };
                row.iter_mut().for_each(|x| *x = off);
                row[label] = T::one() - if *vocab > 1 { eps } else { T::zero() };
            }
        }
        Op::Detach(x) => {
            node.value = val(done, *x).to_vec();
        }
        Op::Sum(x) => {
            node.value = vec![val(done, *x).iter().copied().sum()];
        }
    }
    Ok(())
}

fn attention_forward<T: Real>(
    q: &[T],
    k: &[T],
    v: &[T],
    heads: usize,
    mask: &AttentionMask,
    d: usize,
) -> (Vec<T>, Vec<T>) {
    let (batch, lq, lk) = mask.dims();
    let dh = d / heads;
    let scale = T::one() / T::lit(dh as f64).sqrt();
    let mut out = vec![T::zero(); batch * lq * d];
    let mut weights = vec![T::zero(); batch * heads * lq * lk];
    let mut scores = vec![T::zero(); lk];
    for b in 0..batch {
        for h in 0..heads {
            let off = h * dh;
            for i in 0..lq {
                let qrow = &q[(b * lq + i) * d + off..(b * lq + i) * d + off + dh];
                let mut max = T::neg_infinity();
                let mut any = false;
                for j in 0..lk {
                    if mask.allowed(b, i, j) {
                        let krow = &k[(b * lk + j) * d + off..(b * lk + j) * d + off + dh];
                        let s = qrow.iter().zip(krow).map(|(&x, &y)| x * y).sum::<T>() * scale;
                        scores[j] = s;
                        max = max.max(s);
                        any = true;
                    }
                }
                if !any {
                    continue;
                }
                let w = &mut weights[((b * heads + h) * lq + i) * lk..((b * heads + h) * lq + i + 1) * lk];
                let mut sum = T::zero();
                for j in 0..lk {
                    if mask.allowed(b, i, j) {
                        w[j] = (scores[j] - max).exp();
                        sum += w[j];
                    }
                }
                let inv = T::one() / sum;
                let orow = &mut out[(b * lq + i) * d + off..(b * lq + i) * d + off + dh];
                for j in 0..lk {
                    if w[j] == T::zero() {
                        continue;
                    }
                    w[j] *= inv;
                    let vrow = &v[(b * lk + j) * d + off..(b * lk + j) * d + off + dh];
                    for (o, &x) in orow.iter_mut().zip(vrow) {
                        *o += w[j] * x;
                    }
                }
            }
        }
    }
    (out, weights)
}

fn accum<'g, T: Real>(grads: &'g mut [Option<Vec<T>>], nodes: &[Node<T>], id: NodeId) -> &'g mut Vec<T> {
    grads[id.0].get_or_insert_with(|| vec![T::zero(); numel(&nodes[id.0].shape)])
}

fn backprop_node<T: Real>(
    node: &Node<T>,
    g: &[T],
    nodes: &[Node<T>],
    grads: &mut [Option<Vec<T>>],
    out: &mut Gradients<T>,
) {
    match &node.op {
        Op::Input | Op::ConfSmoothing { .. } | Op::Detach(_) => {}
        Op::Sum(x) => {
            let d = accum(grads, nodes, *x);
            d.iter_mut().for_each(|d| *d += g[0]);
        }
        Op::Param(id) => {
            let dst = out.grads[id.0].data_mut();
            for (d, &x) in dst.iter_mut().zip(g) {
                *d += x;
            }
            out.reached[id.0] = true;
        }
        Op::MatMul(a, b) => {
            let (m, k) = (nodes[a.0].shape[0], nodes[a.0].shape[1]);
            let n = nodes[b.0].shape[1];
            let (av, bv) = (val(nodes, *a), val(nodes, *b));
            matmul(g, false, bv, true, m, n, k, accum(grads, nodes, *a), true);
            matmul(av, true, g, false, k, m, n, accum(grads, nodes, *b), true);
        }
        Op::Add(a, b) => {
            for x in [a, b] {
                let d = accum(grads, nodes, *x);
                for (d, &gv) in d.iter_mut().zip(g) {
                    *d += gv;
                }
            }
        }
        Op::AddRow(a, b) => {
            let da = accum(grads, nodes, *a);
            for (d, &gv) in da.iter_mut().zip(g) {
                *d += gv;
            }
            let db = accum(grads, nodes, *b);
            let w = db.len();
            for (i, &gv) in g.iter().enumerate() {
                db[i % w] += gv;
            }
        }
        Op::Mul(a, b) => {
            let (av, bv) = (val(nodes, *a), val(nodes, *b));
            let da = accum(grads, nodes, *a);
            for ((d, &gv), &y) in da.iter_mut().zip(g).zip(bv) {
                *d += gv * y;
            }
            let db = accum(grads, nodes, *b);
            for ((d, &gv), &x) in db.iter_mut().zip(g).zip(av) {
                *d += gv * x;
            }
        }
        Op::Scale(a, s) => {
            let s = *s;
            let da = accum(grads, nodes, *a);
            for (d, &gv) in da.iter_mut().zip(g) {
                *d += gv * s;
            }
        }
        Op::Relu(a) => {
            let x = val(nodes, *a);
            let da = accum(grads, nodes, *a);
            for ((d, &gv), &xv) in da.iter_mut().zip(g).zip(x) {
                if xv > T::zero() {
                    *d += gv;
                }
            }
        }
        Op::Sigmoid(a) => {
            let da = accum(grads, nodes, *a);
            for ((d, &gv), &s) in da.iter_mut().zip(g).zip(&node.value) {
                *d += gv * s * (T::one() - s);
            }
        }
        Op::Softmax(a) => {
            let (_, cols) = rows_cols(&node.shape);
            let da = accum(grads, nodes, *a);
            for ((drow, grow), prow) in da.chunks_mut(cols).zip(g.chunks(cols)).zip(node.value.chunks(cols)) {
                let dot: T = grow.iter().zip(prow).map(|(&x, &p)| x * p).sum();
                for ((d, &gv), &p) in drow.iter_mut().zip(grow).zip(prow) {
                    *d += p * (gv - dot);
                }
            }
        }
        Op::LayerNorm { x, gamma, beta, .. } => {
            let (rows, cols) = rows_cols(&node.shape);
            let xv = val(nodes, *x);
            let gv = val(nodes, *gamma);
            let mut dgamma = vec![T::zero(); cols];
            let mut dbeta = vec![T::zero(); cols];
            let mut dx = vec![T::zero(); rows * cols];
            let inv_n = T::one() / T::lit(cols as f64);
            let mut xhat = vec![T::zero(); cols];
            let mut dxhat = vec![T::zero(); cols];
            for r in 0..rows {
                let (mean, rstd) = (node.aux[2 * r], node.aux[2 * r + 1]);
                let grow = &g[r * cols..(r + 1) * cols];
                for c in 0..cols {
                    xhat[c] = (xv[r * cols + c] - mean) * rstd;
                    dgamma[c] += grow[c] * xhat[c];
                    dbeta[c] += grow[c];
                    dxhat[c] = grow[c] * gv[c];
                }
                let m1 = dxhat.iter().copied().sum::<T>() * inv_n;
                let m2 = dxhat.iter().zip(&xhat).map(|(&a, &b)| a * b).sum::<T>() * inv_n;
                for c in 0..cols {
                    dx[r * cols + c] = rstd * (dxhat[c] - m1 - xhat[c] * m2);
                }
            }
            for (id, delta) in [(*x, dx), (*gamma, dgamma), (*beta, dbeta)] {
                let d = accum(grads, nodes, id);
                for (d, v) in d.iter_mut().zip(delta) {
                    *d += v;
                }
            }
        }
        Op::Embedding { table, ids } => {
            let width = node.shape[1];
            let dt = accum(grads, nodes, *table);
            for (r, &id) in ids.iter().enumerate() {
                for c in 0..width {
                    dt[id * width + c] += g[r * width + c];
                }
            }
        }
        Op::Attention { q, k, v, heads, mask } => {
            let (dq, dk, dv) = attention_backward(
                val(nodes, *q),
                val(nodes, *k),
                val(nodes, *v),
                &node.aux,
                g,
                *heads,
                mask,
                node.shape[1],
            );
            for (id, delta) in [(*q, dq), (*k, dk), (*v, dv)] {
                let d = accum(grads, nodes, id);
                for (d, x) in d.iter_mut().zip(delta) {
                    *d += x;
                }
            }
        }
        Op::Mean(xs) => {
            let inv = T::one() / T::lit(xs.len() as f64);
            for x in xs {
                let d = accum(grads, nodes, *x);
                for (d, &gv) in d.iter_mut().zip(g) {
                    *d += gv * inv;
                }
            }
        }
        Op::Dropout { x, keep } => {
            let d = accum(grads, nodes, *x);
            for ((d, &gv), &k) in d.iter_mut().zip(g).zip(keep) {
                *d += gv * k;
            }
        }
        Op::Interpolate { p, c, y, rows } => {
            let (_, cols) = rows_cols(&node.shape);
            let (pv, cv, yv) = (val(nodes, *p), val(nodes, *c), val(nodes, *y));
            let mut dc = vec![T::zero(); rows.len()];
            let dp = accum(grads, nodes, *p);
            for (r, &active) in rows.iter().enumerate() {
                let span = r * cols..(r + 1) * cols;
                if !active {
                    for j in span {
                        dp[j] += g[j];
                    }
                    continue;
                }
                let cr = cv[r];
                let mut acc = T::zero();
                for j in span {
                    dp[j] += g[j] * cr;
                    acc += g[j] * (pv[j] - yv[j]);
                }
                dc[r] = acc;
            }
            if rows.iter().any(|&a| a) {
                let d = accum(grads, nodes, *c);
                for (d, x) in d.iter_mut().zip(dc) {
                    *d += x;
                }
            }
        }
        Op::Nll { p, targets, weights } => {
            let (_, cols) = rows_cols(&nodes[p.0].shape);
            let (pv, tv) = (val(nodes, *p), val(nodes, *targets));
            let floor = T::lit(LOG_FLOOR);
            let g0 = g[0];
            let dp = accum(grads, nodes, *p);
            for (r, &w) in weights.iter().enumerate() {
                if w == T::zero() {
                    continue;
                }
                for j in r * cols..(r + 1) * cols {
                    if tv[j] != T::zero() && pv[j] > floor {
                        dp[j] -= g0 * w * tv[j] / pv[j];
                    }
                }
            }
        }
    }
}

#[allow(clippy::too_many_arguments)]
fn attention_backward<T: Real>(
    q: &[T],
    k: &[T],
    v: &[T],
    weights: &[T],
    g: &[T],
    heads: usize,
    mask: &AttentionMask,
    d: usize,
) -> (Vec<T>, Vec<T>, Vec<T>) {
    let (batch, lq, lk) = mask.dims();
    let dh = d / heads;
    let scale = T::one() / T::lit(dh as f64).sqrt();
    let mut dq = vec![T::zero(); q.len()];
    let mut dk = vec![T::zero(); k.len()];
    let mut dv = vec![T::zero(); v.len()];
    let mut dw = vec![T::zero(); lk];
    for b in 0..batch {
        for h in 0..heads {
            let off = h * dh;
            for i in 0..lq {
                let w = &weights[((b * heads + h) * lq + i) * lk..((b * heads + h) * lq + i + 1) * lk];
                let qi = (b * lq + i) * d + off;
                let grow = &g[qi..qi + dh];
                let mut dot = T::zero();
                for j in 0..lk {
                    if w[j] == T::zero() {
                        dw[j] = T::zero();
                        continue;
                    }
                    let vj = (b * lk + j) * d + off;
                    dw[j] = grow.iter().zip(&v[vj..vj + dh]).map(|(&x, &y)| x * y).sum();
                    dot += w[j] * dw[j];
                    for e in 0..dh {
                        dv[vj + e] += w[j] * grow[e];
                    }
                }
                for j in 0..lk {
                    if w[j] == T::zero() {
                        continue;
                    }
                    let ds = w[j] * (dw[j] - dot) * scale;
                    let kj = (b * lk + j) * d + off;
                    for e in 0..dh {
                        dq[qi + e] += ds * k[kj + e];
                        dk[kj + e] += ds * q[qi + e];
                    }
                }
            }
        }
    }
    (dq, dk, dv)
}
