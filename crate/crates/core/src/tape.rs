//! Minimal reverse-mode differentiation over dense `f64` matrices.
//!
//! A [`Tape`] records operations on [`NodeId`]s while computing values
//! eagerly; [`Tape::backward`] walks the record in reverse and returns the
//! gradient of a scalar node with respect to every parameter touched.
//! Parameters live in a [`ParamStore`] that the tape borrows immutably, so
//! any number of tapes may evaluate one frozen store concurrently.

use std::collections::HashMap;

use ndarray::{s, Array2, Axis};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

pub type Mat = Array2<f64>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct NodeId(usize);

/// Named, ordered collection of parameter matrices.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore {
    names: Vec<String>,
    values: Vec<Mat>,
}

const STORE_MAGIC: &[u8; 8] = b"RRPS0001";

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Mat) -> ParamId {
        self.names.push(name.into());
        self.values.push(value);
        ParamId(self.values.len() - 1)
    }

    pub fn get(&self, id: ParamId) -> &Mat {
        &self.values[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Mat {
        &mut self.values[id.0]
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.values.len()).map(ParamId)
    }

    pub fn n_scalars(&self) -> usize {
        self.values.iter().map(Mat::len).sum()
    }

    pub fn all_finite(&self) -> bool {
        self.values.iter().all(|m| m.iter().all(|x| x.is_finite()))
    }

    /// Little-endian binary blob: magic, count, then per tensor the name,
    /// shape and row-major data.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(16 + self.n_scalars() * 8);
        out.extend_from_slice(STORE_MAGIC);
        out.extend_from_slice(&(self.values.len() as u32).to_le_bytes());
        for (name, m) in self.names.iter().zip(&self.values) {
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.extend_from_slice(&(m.nrows() as u64).to_le_bytes());
            out.extend_from_slice(&(m.ncols() as u64).to_le_bytes());
            for x in m.iter() {
                out.extend_from_slice(&x.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> std::result::Result<Self, String> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(8)? != STORE_MAGIC {
            return Err("bad magic".into());
        }
        let count = r.u32()? as usize;
        let mut store = ParamStore::new();
        for _ in 0..count {
            let len = r.u32()? as usize;
            let name = String::from_utf8(r.take(len)?.to_vec()).map_err(|e| e.to_string())?;
            let rows = r.u64()? as usize;
            let cols = r.u64()? as usize;
            let n = rows.checked_mul(cols).ok_or("shape overflow")?;
            let mut data = Vec::with_capacity(n);
            for _ in 0..n {
                data.push(f64::from_le_bytes(r.take(8)?.try_into().expect("8 bytes")));
            }
            let m = Array2::from_shape_vec((rows, cols), data).map_err(|e| e.to_string())?;
            store.add(name, m);
        }
        if r.pos != bytes.len() {
            return Err("trailing bytes".into());
        }
        Ok(store)
    }

    pub fn checksum(&self) -> String {
        hex::encode(Sha256::digest(self.to_bytes()))
    }

    /// Check that `other` has the same names and shapes in the same order.
    pub fn check_layout(&self, other: &ParamStore) -> Result<()> {
        if self.len() != other.len() {
            return Err(Error::dims("parameter count", self.len(), other.len()));
        }
        for id in self.ids() {
            let (a, b) = (self.get(id), other.get(id));
            if self.name(id) != other.name(id) || a.dim() != b.dim() {
                return Err(Error::Config(format!(
                    "parameter {} {:?} does not match {} {:?}",
                    self.name(id),
                    a.dim(),
                    other.name(id),
                    b.dim()
                )));
            }
        }
        Ok(())
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> std::result::Result<&'a [u8], String> {
        let end = self.pos.checked_add(n).ok_or("length overflow")?;
        if end > self.bytes.len() {
            return Err("truncated".into());
        }
        let out = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(out)
    }

    fn u32(&mut self) -> std::result::Result<u32, String> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> std::result::Result<u64, String> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    Param(ParamId),
    MatMul(NodeId, NodeId),
    MatMulT(NodeId, NodeId),
    AddBias(NodeId, NodeId),
    Add(NodeId, NodeId),
    Relu(NodeId),
    Scale(NodeId, f64),
    MulConst(NodeId, Mat),
    Concat(Vec<NodeId>),
    Gather(NodeId, Vec<usize>),
    ScatterAdd(NodeId, Vec<usize>),
    MaskedSoftmax(NodeId),
    BceWithLogits(NodeId, Mat),
    Mse(NodeId, Mat),
    SumAll(NodeId),
}

struct Node {
    value: Mat,
    op: Op,
}

/// Gradients of a scalar with respect to parameters, indexed by [`ParamId`].
#[derive(Debug, Clone)]
pub struct Gradients {
    grads: Vec<Option<Mat>>,
}

impl Gradients {
    pub fn get(&self, id: ParamId) -> Option<&Mat> {
        self.grads.get(id.0).and_then(Option::as_ref)
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Mat)> {
        self.grads
            .iter()
            .enumerate()
            .filter_map(|(i, g)| g.as_ref().map(|g| (ParamId(i), g)))
    }
}

pub struct Tape<'p> {
    store: &'p ParamStore,
    nodes: Vec<Node>,
    params: HashMap<ParamId, NodeId>,
}

impl<'p> Tape<'p> {
    pub fn new(store: &'p ParamStore) -> Self {
        Tape {
            store,
            nodes: Vec::new(),
            params: HashMap::new(),
        }
    }

    pub fn store(&self) -> &'p ParamStore {
        self.store
    }

    fn push(&mut self, value: Mat, op: Op) -> NodeId {
        self.nodes.push(Node { value, op });
        NodeId(self.nodes.len() - 1)
    }

    pub fn value(&self, id: NodeId) -> &Mat {
        &self.nodes[id.0].value
    }

    pub fn shape(&self, id: NodeId) -> (usize, usize) {
        self.nodes[id.0].value.dim()
    }

    pub fn constant(&mut self, value: Mat) -> NodeId {
        self.push(value, Op::Leaf)
    }

    pub fn param(&mut self, id: ParamId) -> NodeId {
        if let Some(&n) = self.params.get(&id) {
            return n;
        }
        let n = self.push(self.store.get(id).clone(), Op::Param(id));
        self.params.insert(id, n);
        n
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let v = self.value(a).dot(self.value(b));
        self.push(v, Op::MatMul(a, b))
    }

    /// `a · bᵀ`
    pub fn matmul_t(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let v = self.value(a).dot(&self.value(b).t());
        self.push(v, Op::MatMulT(a, b))
    }

    /// Add a `1 × m` row to every row of `a`.
    pub fn add_bias(&mut self, a: NodeId, bias: NodeId) -> NodeId {
        let v = self.value(a) + self.value(bias);
        self.push(v, Op::AddBias(a, bias))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let v = self.value(a) + self.value(b);
        self.push(v, Op::Add(a, b))
    }

    pub fn relu(&mut self, a: NodeId) -> NodeId {
        let v = self.value(a).mapv(|x| x.max(0.0));
        self.push(v, Op::Relu(a))
    }

    pub fn scale(&mut self, a: NodeId, c: f64) -> NodeId {
        let v = self.value(a) * c;
        self.push(v, Op::Scale(a, c))
    }

    /// Elementwise product with a constant matrix of the same shape.
    pub fn mul_const(&mut self, a: NodeId, c: Mat) -> NodeId {
        let v = self.value(a) * &c;
        self.push(v, Op::MulConst(a, c))
    }

    /// Column-wise concatenation; all parts share a row count.
    pub fn concat(&mut self, parts: &[NodeId]) -> NodeId {
        let views: Vec<_> = parts.iter().map(|&p| self.value(p).view()).collect();
        let v = ndarray::concatenate(Axis(1), &views).expect("concat: row counts agree");
        self.push(v, Op::Concat(parts.to_vec()))
    }

    /// Row `r` of the result is row `idx[r]` of `a`.
    pub fn gather(&mut self, a: NodeId, idx: Vec<usize>) -> NodeId {
        let v = self.value(a).select(Axis(0), &idx);
        self.push(v, Op::Gather(a, idx))
    }

    /// Segment sum: row `r` of `a` is added into row `idx[r]` of an
    /// `n_out`-row result. Rows with no contributors are zero.
    pub fn scatter_add(&mut self, a: NodeId, idx: Vec<usize>, n_out: usize) -> NodeId {
        let src = self.value(a);
        let mut v = Mat::zeros((n_out, src.ncols()));
        for (r, &i) in idx.iter().enumerate() {
            let mut row = v.row_mut(i);
            row += &src.row(r);
        }
        self.push(v, Op::ScatterAdd(a, idx))
    }

    /// Row softmax restricted to entries where `mask` is nonzero. Masked
    /// entries get weight 0; a fully masked row is all zeros.
    pub fn masked_softmax(&mut self, a: NodeId, mask: &Mat) -> NodeId {
        let x = self.value(a);
        assert_eq!(x.dim(), mask.dim(), "masked_softmax: mask shape");
        let mut v = Mat::zeros(x.dim());
        for ((xr, mr), mut vr) in x.rows().into_iter().zip(mask.rows()).zip(v.rows_mut()) {
            let max = xr
                .iter()
                .zip(mr.iter())
                .filter(|(_, m)| **m != 0.0)
                .map(|(x, _)| *x)
                .fold(f64::NEG_INFINITY, f64::max);
            if max == f64::NEG_INFINITY {
                continue;
            }
            let mut total = 0.0;
            for ((o, x), m) in vr.iter_mut().zip(xr.iter()).zip(mr.iter()) {
                if *m != 0.0 {
                    *o = (x - max).exp();
                    total += *o;
                }
            }
            vr.mapv_inplace(|o| o / total);
        }
        self.push(v, Op::MaskedSoftmax(a))
    }

    pub fn softmax(&mut self, a: NodeId) -> NodeId {
        let mask = Mat::ones(self.shape(a));
        self.masked_softmax(a, &mask)
    }

    /// Mean binary cross-entropy of `sigmoid(logits)` against `targets`,
    /// averaged over every entry. Result is `1 × 1`.
    pub fn bce_with_logits(&mut self, logits: NodeId, targets: Mat) -> NodeId {
        let z = self.value(logits);
        assert_eq!(z.dim(), targets.dim(), "bce: target shape");
        let n = z.len().max(1) as f64;
        let total: f64 = z
            .iter()
            .zip(targets.iter())
            .map(|(&z, &t)| z.max(0.0) - z * t + (-z.abs()).exp().ln_1p())
            .sum();
        self.push(Mat::from_elem((1, 1), total / n), Op::BceWithLogits(logits, targets))
    }

    /// Mean squared error, `1 × 1`.
    pub fn mse(&mut self, pred: NodeId, targets: Mat) -> NodeId {
        let p = self.value(pred);
        assert_eq!(p.dim(), targets.dim(), "mse: target shape");
        let n = p.len().max(1) as f64;
        let total: f64 = p.iter().zip(targets.iter()).map(|(p, t)| (p - t).powi(2)).sum();
        self.push(Mat::from_elem((1, 1), total / n), Op::Mse(pred, targets))
    }

    pub fn sum_all(&mut self, a: NodeId) -> NodeId {
        let v = self.value(a).sum();
        self.push(Mat::from_elem((1, 1), v), Op::SumAll(a))
    }

    /// Gradient of the `1 × 1` node `loss` with respect to every parameter
    /// that contributed to it.
    pub fn backward(&self, loss: NodeId) -> Gradients {
        assert_eq!(self.shape(loss), (1, 1), "backward needs a scalar node");
        let mut grads: Vec<Option<Mat>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Mat::ones((1, 1)));
        let mut out: Vec<Option<Mat>> = vec![None; self.store.len()];

        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            let mut acc = |id: NodeId, d: Mat| match &mut grads[id.0] {
                Some(existing) => *existing += &d,
                slot @ None => *slot = Some(d),
            };
            match &node.op {
                Op::Leaf => {}
                Op::Param(p) => out[p.0] = Some(g),
                Op::MatMul(a, b) => {
                    let da = g.dot(&self.value(*b).t());
                    let db = self.value(*a).t().dot(&g);
                    acc(*a, da);
                    acc(*b, db);
                }
                Op::MatMulT(a, b) => {
                    let da = g.dot(self.value(*b));
                    let db = g.t().dot(self.value(*a));
                    acc(*a, da);
                    acc(*b, db);
                }
                Op::AddBias(a, b) => {
                    let db = g.sum_axis(Axis(0)).insert_axis(Axis(0));
                    acc(*b, db);
                    acc(*a, g);
                }
                Op::Add(a, b) => {
                    acc(*b, g.clone());
                    acc(*a, g);
                }
                Op::Relu(a) => {
                    let mut d = g;
                    d.zip_mut_with(&node.value, |d, &y| {
                        if y <= 0.0 {
                            *d = 0.0
                        }
                    });
                    acc(*a, d);
                }
                Op::Scale(a, c) => acc(*a, g * *c),
                Op::MulConst(a, c) => acc(*a, g * c),
                Op::Concat(parts) => {
                    let mut col = 0;
                    for p in parts {
                        let w = self.shape(*p).1;
                        acc(*p, g.slice(s![.., col..col + w]).to_owned());
                        col += w;
                    }
                }
                Op::Gather(a, idx) => {
                    let mut d = Mat::zeros(self.shape(*a));
                    for (r, &src) in idx.iter().enumerate() {
                        let mut row = d.row_mut(src);
                        row += &g.row(r);
                    }
                    acc(*a, d);
                }
                Op::ScatterAdd(a, idx) => {
                    let d = g.select(Axis(0), idx);
                    acc(*a, d);
                }
                Op::MaskedSoftmax(a) => {
                    let y = &node.value;
                    let mut d = &g * y;
                    let row_dot = d.sum_axis(Axis(1));
                    for ((mut dr, yr), rd) in d.rows_mut().into_iter().zip(y.rows()).zip(row_dot.iter()) {
                        dr.zip_mut_with(&yr, |d, &y| *d -= y * rd);
                    }
                    acc(*a, d);
                }
                Op::BceWithLogits(z, t) => {
                    let scale = g[[0, 0]] / t.len().max(1) as f64;
                    let zv = self.value(*z);
                    let mut d = Mat::zeros(zv.dim());
                    ndarray::Zip::from(&mut d)
                        .and(zv)
                        .and(t)
                        .for_each(|d, &z, &t| *d = (sigmoid(z) - t) * scale);
                    acc(*z, d);
                }
                Op::Mse(p, t) => {
                    let scale = 2.0 * g[[0, 0]] / t.len().max(1) as f64;
                    let d = (self.value(*p) - t) * scale;
                    acc(*p, d);
                }
                Op::SumAll(a) => {
                    let d = Mat::from_elem(self.shape(*a), g[[0, 0]]);
                    acc(*a, d);
                }
            }
        }
        Gradients { grads: out }
    }
}

pub fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}
