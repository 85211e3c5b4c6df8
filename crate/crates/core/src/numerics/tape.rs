//! Reverse-mode tape over a fixed set of primitives.
//!
//! A `Tape` records every primitive application as a node in a Wengert list.
//! Nodes refer to earlier nodes by index, so the list is topologically sorted
//! by construction and `reverse_accumulate` walks it backward exactly once.
//! The finished list (a `ComputationRecord`) is also a standalone program:
//! it can be replayed at full `f64` precision with a perturbed leaf, which is
//! what the finite-difference checker runs on, and its op sequence is what
//! the cost-counting oracle inspects.

use std::cell::RefCell;
use std::collections::{BTreeMap, HashMap};
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;

use crate::error::{DyError, Result};

use super::kernels::{self, BroadcastAxis};
use super::tensor::Tensor;

/// What a tape writes down as ops flow through it.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum RecordMode {
    /// Record only chains that can reach a gradient leaf.
    Grad,
    /// Record every application (for replay and op counting).
    Trace,
    /// Pure computation; nothing is recorded.
    Off,
}

/// One of the supported primitive operations, attributes included.
#[derive(Clone, Debug)]
pub enum Primitive {
    Matmul,
    Add,
    Mul,
    Scale { factor: f64 },
    SoftmaxRows,
    Sigmoid,
    Gelu,
    LayerNorm { eps: f64 },
    GatherRows { mask: Arc<Vec<bool>> },
    ScatterRows { mask: Arc<Vec<bool>> },
    Sum,
    Mean,
    Square,
    Concat { axis: usize },
    Slice { axis: usize, start: usize, end: usize },
    Transpose,
    Broadcast { rows: usize, cols: usize, axis: BroadcastAxis },
}

impl Primitive {
    pub fn name(&self) -> &'static str {
        match self {
            Primitive::Matmul => "matmul",
            Primitive::Add => "add",
            Primitive::Mul => "mul",
            Primitive::Scale { .. } => "scale",
            Primitive::SoftmaxRows => "softmax_rows",
            Primitive::Sigmoid => "sigmoid",
            Primitive::Gelu => "gelu",
            Primitive::LayerNorm { .. } => "layer_norm",
            Primitive::GatherRows { .. } => "gather_rows",
            Primitive::ScatterRows { .. } => "scatter_rows",
            Primitive::Sum => "sum",
            Primitive::Mean => "mean",
            Primitive::Square => "square",
            Primitive::Concat { .. } => "concat",
            Primitive::Slice { .. } => "slice",
            Primitive::Transpose => "transpose",
            Primitive::Broadcast { .. } => "broadcast",
        }
    }
}

/// Attribute value for the string-keyed `apply_primitive` surface.
#[derive(Clone, Debug)]
pub enum AttrValue {
    Float(f64),
    Int(usize),
    Mask(Vec<bool>),
}

/// Attribute map for `apply_primitive`.
pub type Attrs = BTreeMap<String, AttrValue>;

pub(crate) enum NodeKind {
    Leaf { key: usize, param: bool },
    Op { prim: Primitive, inputs: Vec<usize> },
}

pub(crate) struct Node {
    pub(crate) kind: NodeKind,
    pub(crate) data: Arc<Vec<f32>>,
    pub(crate) shape: Vec<usize>,
    pub(crate) needs_grad: bool,
}

struct Inner {
    nodes: Vec<Node>,
    /// (buffer identity, requires_grad) -> node index. The flag is part of
    /// the key so a detached view of a parameter gets its own, grad-opaque
    /// leaf even though it shares the allocation.
    leaf_index: HashMap<(usize, bool), usize>,
}

static TAPE_IDS: AtomicU64 = AtomicU64::new(1);

/// Records primitive applications; see the module docs.
pub struct Tape {
    id: u64,
    mode: RecordMode,
    inner: RefCell<Inner>,
}

impl Tape {
    pub fn new(mode: RecordMode) -> Self {
        Tape {
            id: TAPE_IDS.fetch_add(1, Ordering::Relaxed),
            mode,
            inner: RefCell::new(Inner {
                nodes: Vec::new(),
                leaf_index: HashMap::new(),
            }),
        }
    }

    /// Tape that records gradient-relevant chains (training).
    pub fn grad() -> Self {
        Tape::new(RecordMode::Grad)
    }

    /// Tape that records everything (replay / op counting).
    pub fn trace() -> Self {
        Tape::new(RecordMode::Trace)
    }

    /// Tape that records nothing (inference hot path).
    pub fn off() -> Self {
        Tape::new(RecordMode::Off)
    }

    pub fn mode(&self) -> RecordMode {
        self.mode
    }

    pub fn node_count(&self) -> usize {
        self.inner.borrow().nodes.len()
    }

    /// Finish recording and hand back the program.
    pub fn finish(self) -> ComputationRecord {
        ComputationRecord {
            tape_id: self.id,
            nodes: self.inner.into_inner().nodes,
        }
    }

    /// Convenience: finish and run the backward pass in one go.
    pub fn reverse_accumulate(self, loss: &Tensor) -> Result<GradientMap> {
        self.finish().reverse_accumulate(loss)
    }

    // ---- string-keyed surface -------------------------------------------

    /// Apply a primitive by name with an attribute map. Typed helpers below
    /// cover the same ground for in-crate callers.
    pub fn apply_primitive(
        &self,
        name: &str,
        inputs: &[&Tensor],
        attrs: &Attrs,
    ) -> Result<Tensor> {
        let prim = parse_primitive(name, attrs)?;
        self.apply(prim, inputs)
    }

    // ---- typed helpers ---------------------------------------------------

    pub fn matmul(&self, a: &Tensor, b: &Tensor) -> Result<Tensor> {
        self.apply(Primitive::Matmul, &[a, b])
    }

    pub fn add(&self, a: &Tensor, b: &Tensor) -> Result<Tensor> {
        self.apply(Primitive::Add, &[a, b])
    }

    pub fn mul(&self, a: &Tensor, b: &Tensor) -> Result<Tensor> {
        self.apply(Primitive::Mul, &[a, b])
    }

    pub fn scale(&self, a: &Tensor, factor: f64) -> Result<Tensor> {
        self.apply(Primitive::Scale { factor }, &[a])
    }

    /// a - b, composed from `add` and `scale`.
    pub fn sub(&self, a: &Tensor, b: &Tensor) -> Result<Tensor> {
        let neg = self.scale(b, -1.0)?;
        self.add(a, &neg)
    }

    pub fn softmax_rows(&self, a: &Tensor) -> Result<Tensor> {
        self.apply(Primitive::SoftmaxRows, &[a])
    }

    pub fn sigmoid(&self, a: &Tensor) -> Result<Tensor> {
        self.apply(Primitive::Sigmoid, &[a])
    }

    pub fn gelu(&self, a: &Tensor) -> Result<Tensor> {
        self.apply(Primitive::Gelu, &[a])
    }

    pub fn layer_norm(&self, a: &Tensor, eps: f64) -> Result<Tensor> {
        self.apply(Primitive::LayerNorm { eps }, &[a])
    }

    pub fn gather_rows(&self, a: &Tensor, mask: &[bool]) -> Result<Tensor> {
        self.apply(
            Primitive::GatherRows {
                mask: Arc::new(mask.to_vec()),
            },
            &[a],
        )
    }

    pub fn scatter_rows(&self, src: &Tensor, fill: &Tensor, mask: &[bool]) -> Result<Tensor> {
        self.apply(
            Primitive::ScatterRows {
                mask: Arc::new(mask.to_vec()),
            },
            &[src, fill],
        )
    }

    pub fn sum(&self, a: &Tensor) -> Result<Tensor> {
        self.apply(Primitive::Sum, &[a])
    }

    pub fn mean(&self, a: &Tensor) -> Result<Tensor> {
        self.apply(Primitive::Mean, &[a])
    }

    pub fn square(&self, a: &Tensor) -> Result<Tensor> {
        self.apply(Primitive::Square, &[a])
    }

    pub fn concat(&self, parts: &[&Tensor], axis: usize) -> Result<Tensor> {
        self.apply(Primitive::Concat { axis }, parts)
    }

    pub fn slice(&self, a: &Tensor, axis: usize, start: usize, end: usize) -> Result<Tensor> {
        self.apply(Primitive::Slice { axis, start, end }, &[a])
    }

    pub fn transpose(&self, a: &Tensor) -> Result<Tensor> {
        self.apply(Primitive::Transpose, &[a])
    }

    pub fn broadcast(
        &self,
        a: &Tensor,
        rows: usize,
        cols: usize,
        axis: BroadcastAxis,
    ) -> Result<Tensor> {
        self.apply(Primitive::Broadcast { rows, cols, axis }, &[a])
    }

    /// mean((a - b)^2) over all elements.
    pub fn mean_squared_error(&self, a: &Tensor, b: &Tensor) -> Result<Tensor> {
        let diff = self.sub(a, b)?;
        let sq = self.square(&diff)?;
        self.mean(&sq)
    }

    // ---- core ------------------------------------------------------------

    pub fn apply(&self, prim: Primitive, inputs: &[&Tensor]) -> Result<Tensor> {
        let shapes: Vec<&[usize]> = inputs.iter().map(|t| t.shape()).collect();
        let out_shape = output_shape(&prim, &shapes)?;

        let bufs: Vec<Vec<f64>> = inputs
            .iter()
            .map(|t| kernels::widen(t.data()))
            .collect();
        let buf_refs: Vec<&[f64]> = bufs.iter().map(|b| b.as_slice()).collect();
        let out = execute_f64(&prim, &buf_refs, &shapes);
        debug_assert_eq!(out.len(), out_shape.iter().product::<usize>());
        let data = Arc::new(kernels::narrow(&out));

        // Decide whether this application goes on the record.
        let record = match self.mode {
            RecordMode::Off => false,
            RecordMode::Trace => true,
            RecordMode::Grad => inputs.iter().any(|t| {
                t.requires_grad()
                    || matches!(t.node, Some((tid, idx)) if tid == self.id && self.node_needs_grad(idx))
            }),
        };
        if !record {
            return Ok(Tensor::from_parts(out_shape, data));
        }

        let mut inner = self.inner.borrow_mut();
        let mut input_ids = Vec::with_capacity(inputs.len());
        let mut needs_grad = false;
        for t in inputs {
            let idx = match t.node {
                Some((tid, idx)) if tid == self.id => idx,
                _ => register_leaf(&mut inner, t),
            };
            needs_grad |= inner.nodes[idx].needs_grad;
            input_ids.push(idx);
        }
        let idx = inner.nodes.len();
        inner.nodes.push(Node {
            kind: NodeKind::Op {
                prim,
                inputs: input_ids,
            },
            data: Arc::clone(&data),
            shape: out_shape.clone(),
            needs_grad,
        });
        let mut out = Tensor::from_parts(out_shape, data);
        out.node = Some((self.id, idx));
        out = out.with_requires_grad(needs_grad);
        Ok(out)
    }

    fn node_needs_grad(&self, idx: usize) -> bool {
        self.inner.borrow().nodes[idx].needs_grad
    }
}

fn register_leaf(inner: &mut Inner, t: &Tensor) -> usize {
    let key = (t.key(), t.requires_grad());
    if let Some(&idx) = inner.leaf_index.get(&key) {
        return idx;
    }
    let idx = inner.nodes.len();
    inner.nodes.push(Node {
        kind: NodeKind::Leaf {
            key: t.key(),
            param: t.requires_grad(),
        },
        data: Arc::clone(t.buffer()),
        shape: t.shape().to_vec(),
        needs_grad: t.requires_grad(),
    });
    inner.leaf_index.insert(key, idx);
    idx
}

fn parse_primitive(name: &str, attrs: &Attrs) -> Result<Primitive> {
    let float = |key: &str| -> Result<f64> {
        match attrs.get(key) {
            Some(AttrValue::Float(v)) => Ok(*v),
            _ => Err(DyError::BadAttribute {
                primitive: "",
                msg: format!("missing float attribute `{key}`"),
            }),
        }
    };
    let int = |key: &str| -> Result<usize> {
        match attrs.get(key) {
            Some(AttrValue::Int(v)) => Ok(*v),
            _ => Err(DyError::BadAttribute {
                primitive: "",
                msg: format!("missing integer attribute `{key}`"),
            }),
        }
    };
    let mask = || -> Result<Arc<Vec<bool>>> {
        match attrs.get("mask") {
            Some(AttrValue::Mask(m)) => Ok(Arc::new(m.clone())),
            _ => Err(DyError::BadAttribute {
                primitive: "",
                msg: "missing mask attribute".into(),
            }),
        }
    };
    let fix = |e: DyError, prim: &'static str| -> DyError {
        match e {
            DyError::BadAttribute { msg, .. } => DyError::BadAttribute {
                primitive: prim,
                msg,
            },
            other => other,
        }
    };
    Ok(match name {
        "matmul" => Primitive::Matmul,
        "add" => Primitive::Add,
        "mul" => Primitive::Mul,
        "scale" => Primitive::Scale {
            factor: float("factor").map_err(|e| fix(e, "scale"))?,
        },
        "softmax_rows" => Primitive::SoftmaxRows,
        "sigmoid" => Primitive::Sigmoid,
        "gelu" => Primitive::Gelu,
        "layer_norm" => Primitive::LayerNorm {
            eps: float("eps").unwrap_or(1e-6),
        },
        "gather_rows" => Primitive::GatherRows {
            mask: mask().map_err(|e| fix(e, "gather_rows"))?,
        },
        "scatter_rows" => Primitive::ScatterRows {
            mask: mask().map_err(|e| fix(e, "scatter_rows"))?,
        },
        "sum" => Primitive::Sum,
        "mean" => Primitive::Mean,
        "square" => Primitive::Square,
        "concat" => Primitive::Concat {
            axis: int("axis").map_err(|e| fix(e, "concat"))?,
        },
        "slice" => Primitive::Slice {
            axis: int("axis").map_err(|e| fix(e, "slice"))?,
            start: int("start").map_err(|e| fix(e, "slice"))?,
            end: int("end").map_err(|e| fix(e, "slice"))?,
        },
        "transpose" => Primitive::Transpose,
        "broadcast" => Primitive::Broadcast {
            rows: int("rows").map_err(|e| fix(e, "broadcast"))?,
            cols: int("cols").map_err(|e| fix(e, "broadcast"))?,
            axis: match int("axis").map_err(|e| fix(e, "broadcast"))? {
                0 => BroadcastAxis::Rows,
                1 => BroadcastAxis::Cols,
                other => {
                    return Err(DyError::BadAttribute {
                        primitive: "broadcast",
                        msg: format!("axis must be 0 or 1, got {other}"),
                    })
                }
            },
        },
        other => return Err(DyError::UnknownPrimitive(other.to_string())),
    })
}

// ---- shape rules ----------------------------------------------------------

fn want_rank2(prim: &'static str, shape: &[usize]) -> Result<(usize, usize)> {
    match shape {
        [r, c] => Ok((*r, *c)),
        other => Err(DyError::invalid(format!(
            "{prim}: expected a rank-2 operand, got shape {other:?}"
        ))),
    }
}

fn output_shape(prim: &Primitive, shapes: &[&[usize]]) -> Result<Vec<usize>> {
    let arity = |n: usize| -> Result<()> {
        if shapes.len() != n {
            return Err(DyError::invalid(format!(
                "{}: expected {} operand(s), got {}",
                prim.name(),
                n,
                shapes.len()
            )));
        }
        Ok(())
    };
    match prim {
        Primitive::Matmul => {
            arity(2)?;
            let (n, k1) = want_rank2("matmul", shapes[0])?;
            let (k2, m) = want_rank2("matmul", shapes[1])?;
            if k1 != k2 {
                return Err(DyError::ShapeMismatch {
                    primitive: "matmul",
                    lhs: shapes[0].to_vec(),
                    rhs: shapes[1].to_vec(),
                });
            }
            Ok(vec![n, m])
        }
        Primitive::Add | Primitive::Mul => {
            arity(2)?;
            if shapes[0] != shapes[1] {
                return Err(DyError::ShapeMismatch {
                    primitive: if matches!(prim, Primitive::Add) {
                        "add"
                    } else {
                        "mul"
                    },
                    lhs: shapes[0].to_vec(),
                    rhs: shapes[1].to_vec(),
                });
            }
            Ok(shapes[0].to_vec())
        }
        Primitive::Scale { .. } | Primitive::Sigmoid | Primitive::Gelu | Primitive::Square => {
            arity(1)?;
            Ok(shapes[0].to_vec())
        }
        Primitive::SoftmaxRows => {
            arity(1)?;
            want_rank2("softmax_rows", shapes[0])?;
            Ok(shapes[0].to_vec())
        }
        Primitive::LayerNorm { .. } => {
            arity(1)?;
            want_rank2("layer_norm", shapes[0])?;
            Ok(shapes[0].to_vec())
        }
        Primitive::GatherRows { mask } => {
            arity(1)?;
            let (rows, cols) = want_rank2("gather_rows", shapes[0])?;
            if mask.len() != rows {
                return Err(DyError::invalid(format!(
                    "gather_rows: mask length {} does not match {} rows",
                    mask.len(),
                    rows
                )));
            }
            let kept = mask.iter().filter(|&&m| m).count();
            Ok(vec![kept, cols])
        }
        Primitive::ScatterRows { mask } => {
            arity(2)?;
            let (src_rows, src_cols) = want_rank2("scatter_rows", shapes[0])?;
            let (rows, cols) = want_rank2("scatter_rows", shapes[1])?;
            let kept = mask.iter().filter(|&&m| m).count();
            if mask.len() != rows || src_rows != kept || src_cols != cols {
                return Err(DyError::ShapeMismatch {
                    primitive: "scatter_rows",
                    lhs: shapes[0].to_vec(),
                    rhs: shapes[1].to_vec(),
                });
            }
            Ok(vec![rows, cols])
        }
        Primitive::Sum | Primitive::Mean => {
            arity(1)?;
            Ok(vec![1])
        }
        Primitive::Concat { axis } => {
            if shapes.is_empty() {
                return Err(DyError::invalid("concat: needs at least one operand"));
            }
            if *axis > 1 {
                return Err(DyError::BadAttribute {
                    primitive: "concat",
                    msg: format!("axis must be 0 or 1, got {axis}"),
                });
            }
            if shapes.iter().all(|s| s.len() == 1) {
                if *axis != 0 {
                    return Err(DyError::invalid(
                        "concat: rank-1 operands only concatenate along axis 0",
                    ));
                }
                return Ok(vec![shapes.iter().map(|s| s[0]).sum()]);
            }
            let (r0, c0) = want_rank2("concat", shapes[0])?;
            let mut rows = r0;
            let mut cols = c0;
            for s in &shapes[1..] {
                let (r, c) = want_rank2("concat", s)?;
                if *axis == 0 {
                    if c != c0 {
                        return Err(DyError::ShapeMismatch {
                            primitive: "concat",
                            lhs: shapes[0].to_vec(),
                            rhs: s.to_vec(),
                        });
                    }
                    rows += r;
                } else {
                    if r != r0 {
                        return Err(DyError::ShapeMismatch {
                            primitive: "concat",
                            lhs: shapes[0].to_vec(),
                            rhs: s.to_vec(),
                        });
                    }
                    cols += c;
                }
            }
            Ok(vec![rows, cols])
        }
        Primitive::Slice { axis, start, end } => {
            arity(1)?;
            let dim = match (shapes[0], axis) {
                ([n], 0) => *n,
                ([r, _], 0) => *r,
                ([_, c], 1) => *c,
                (s, a) => {
                    return Err(DyError::invalid(format!(
                        "slice: axis {a} is invalid for shape {s:?}"
                    )))
                }
            };
            if *start >= *end || *end > dim {
                return Err(DyError::BadAttribute {
                    primitive: "slice",
                    msg: format!("range {start}..{end} out of bounds for dimension {dim}"),
                });
            }
            Ok(match (shapes[0], axis) {
                ([_], _) => vec![end - start],
                ([_, c], 0) => vec![end - start, *c],
                ([r, _], _) => vec![*r, end - start],
                _ => unreachable!(),
            })
        }
        Primitive::Transpose => {
            arity(1)?;
            let (r, c) = want_rank2("transpose", shapes[0])?;
            Ok(vec![c, r])
        }
        Primitive::Broadcast { rows, cols, axis } => {
            arity(1)?;
            let len: usize = shapes[0].iter().product();
            let vector_ok = match shapes[0] {
                [_] => true,
                [1, _] | [_, 1] => true,
                _ => false,
            };
            if len != 1 {
                if !vector_ok {
                    return Err(DyError::invalid(format!(
                        "broadcast: input shape {:?} is neither scalar nor vector",
                        shapes[0]
                    )));
                }
                let want = match axis {
                    BroadcastAxis::Rows => *rows,
                    BroadcastAxis::Cols => *cols,
                };
                if len != want {
                    return Err(DyError::invalid(format!(
                        "broadcast: vector of {len} does not fit {axis:?} of a {rows}x{cols} target"
                    )));
                }
            }
            Ok(vec![*rows, *cols])
        }
    }
}

// ---- forward execution (f64) -----------------------------------------------

fn dims2(shape: &[usize]) -> (usize, usize) {
    match shape {
        [r, c] => (*r, *c),
        _ => unreachable!("validated rank-2"),
    }
}

pub(crate) fn execute_f64(prim: &Primitive, bufs: &[&[f64]], shapes: &[&[usize]]) -> Vec<f64> {
    match prim {
        Primitive::Matmul => {
            let (n, k) = dims2(shapes[0]);
            let (_, m) = dims2(shapes[1]);
            kernels::matmul(bufs[0], bufs[1], n, k, m)
        }
        Primitive::Add => kernels::add(bufs[0], bufs[1]),
        Primitive::Mul => kernels::mul(bufs[0], bufs[1]),
        Primitive::Scale { factor } => kernels::scale(bufs[0], *factor),
        Primitive::SoftmaxRows => {
            let (r, c) = dims2(shapes[0]);
            kernels::softmax_rows(bufs[0], r, c)
        }
        Primitive::Sigmoid => kernels::sigmoid(bufs[0]),
        Primitive::Gelu => kernels::gelu(bufs[0]),
        Primitive::LayerNorm { eps } => {
            let (r, c) = dims2(shapes[0]);
            kernels::layer_norm(bufs[0], r, c, *eps)
        }
        Primitive::GatherRows { mask } => {
            let (_, c) = dims2(shapes[0]);
            kernels::gather_rows(bufs[0], c, mask)
        }
        Primitive::ScatterRows { mask } => {
            let (_, c) = dims2(shapes[1]);
            kernels::scatter_rows(bufs[0], bufs[1], c, mask)
        }
        Primitive::Sum => vec![kernels::sum(bufs[0])],
        Primitive::Mean => vec![kernels::sum(bufs[0]) / bufs[0].len() as f64],
        Primitive::Square => kernels::square(bufs[0]),
        Primitive::Concat { axis } => {
            if *axis == 0 || shapes[0].len() == 1 {
                let mut out = Vec::with_capacity(bufs.iter().map(|b| b.len()).sum());
                for b in bufs {
                    out.extend_from_slice(b);
                }
                out
            } else {
                let rows = shapes[0][0];
                let total: usize = shapes.iter().map(|s| s[1]).sum();
                let mut out = Vec::with_capacity(rows * total);
                for r in 0..rows {
                    for (b, s) in bufs.iter().zip(shapes) {
                        let c = s[1];
                        out.extend_from_slice(&b[r * c..(r + 1) * c]);
                    }
                }
                out
            }
        }
        Primitive::Slice { axis, start, end } => match (shapes[0], axis) {
            ([_], _) => bufs[0][*start..*end].to_vec(),
            ([_, c], 0) => bufs[0][start * c..end * c].to_vec(),
            ([_, c], _) => {
                let rows = shapes[0][0];
                let mut out = Vec::with_capacity(rows * (end - start));
                for r in 0..rows {
                    out.extend_from_slice(&bufs[0][r * c + start..r * c + end]);
                }
                out
            }
            _ => unreachable!(),
        },
        Primitive::Transpose => {
            let (r, c) = dims2(shapes[0]);
            kernels::transpose(bufs[0], r, c)
        }
        Primitive::Broadcast { rows, cols, axis } => {
            kernels::broadcast(bufs[0], *rows, *cols, *axis)
        }
    }
}

/// Gradients with respect to each input, given the upstream gradient.
/// `None` marks inputs no gradient flows to (there are none today, but the
/// shape of the return type keeps accumulation uniform).
fn backward_f64(
    prim: &Primitive,
    bufs: &[&[f64]],
    shapes: &[&[usize]],
    out: &[f64],
    dy: &[f64],
) -> Vec<Option<Vec<f64>>> {
    match prim {
        Primitive::Matmul => {
            let (n, k) = dims2(shapes[0]);
            let (_, m) = dims2(shapes[1]);
            let bt = kernels::transpose(bufs[1], k, m);
            let da = kernels::matmul(dy, &bt, n, m, k);
            let at = kernels::transpose(bufs[0], n, k);
            let db = kernels::matmul(&at, dy, k, n, m);
            vec![Some(da), Some(db)]
        }
        Primitive::Add => vec![Some(dy.to_vec()), Some(dy.to_vec())],
        Primitive::Mul => vec![
            Some(kernels::mul(dy, bufs[1])),
            Some(kernels::mul(dy, bufs[0])),
        ],
        Primitive::Scale { factor } => vec![Some(kernels::scale(dy, *factor))],
        Primitive::SoftmaxRows => {
            let (r, c) = dims2(shapes[0]);
            vec![Some(kernels::softmax_rows_backward(out, dy, r, c))]
        }
        Primitive::Sigmoid => vec![Some(kernels::sigmoid_backward(out, dy))],
        Primitive::Gelu => vec![Some(kernels::gelu_backward(bufs[0], dy))],
        Primitive::LayerNorm { eps } => {
            let (r, c) = dims2(shapes[0]);
            vec![Some(kernels::layer_norm_backward(bufs[0], dy, r, c, *eps))]
        }
        Primitive::GatherRows { mask } => {
            let (rows, c) = dims2(shapes[0]);
            let zeros = vec![0.0; rows * c];
            vec![Some(kernels::scatter_rows(dy, &zeros, c, mask))]
        }
        Primitive::ScatterRows { mask } => {
            let (_, c) = dims2(shapes[1]);
            let dsrc = kernels::gather_rows(dy, c, mask);
            let mut dfill = dy.to_vec();
            for (r, &keep) in mask.iter().enumerate() {
                if keep {
                    dfill[r * c..(r + 1) * c].fill(0.0);
                }
            }
            vec![Some(dsrc), Some(dfill)]
        }
        Primitive::Sum => vec![Some(vec![dy[0]; bufs[0].len()])],
        Primitive::Mean => vec![Some(vec![dy[0] / bufs[0].len() as f64; bufs[0].len()])],
        Primitive::Square => {
            let dx = bufs[0]
                .iter()
                .zip(dy)
                .map(|(&x, &d)| 2.0 * x * d)
                .collect();
            vec![Some(dx)]
        }
        Primitive::Concat { axis } => {
            if *axis == 0 || shapes[0].len() == 1 {
                let mut offset = 0;
                bufs.iter()
                    .map(|b| {
                        let part = dy[offset..offset + b.len()].to_vec();
                        offset += b.len();
                        Some(part)
                    })
                    .collect()
            } else {
                let rows = shapes[0][0];
                let total: usize = shapes.iter().map(|s| s[1]).sum();
                let mut col0 = 0;
                shapes
                    .iter()
                    .map(|s| {
                        let c = s[1];
                        let mut part = Vec::with_capacity(rows * c);
                        for r in 0..rows {
                            part.extend_from_slice(&dy[r * total + col0..r * total + col0 + c]);
                        }
                        col0 += c;
                        Some(part)
                    })
                    .collect()
            }
        }
        Primitive::Slice { axis, start, end } => {
            let mut dx = vec![0.0; bufs[0].len()];
            match (shapes[0], axis) {
                ([_], _) => dx[*start..*end].copy_from_slice(dy),
                ([_, c], 0) => dx[start * c..end * c].copy_from_slice(dy),
                ([_, c], _) => {
                    let rows = shapes[0][0];
                    let w = end - start;
                    for r in 0..rows {
                        dx[r * c + start..r * c + end].copy_from_slice(&dy[r * w..(r + 1) * w]);
                    }
                }
                _ => unreachable!(),
            }
            vec![Some(dx)]
        }
        Primitive::Transpose => {
            let (r, c) = dims2(shapes[0]);
            vec![Some(kernels::transpose(dy, c, r))]
        }
        Primitive::Broadcast { rows, cols, axis } => {
            vec![Some(kernels::broadcast_backward(
                dy,
                *rows,
                *cols,
                bufs[0].len(),
                *axis,
            ))]
        }
    }
}

// ---- finished records -------------------------------------------------------

/// Gradients keyed by leaf identity (the parameter's shared allocation).
#[derive(Debug)]
pub struct GradientMap {
    map: HashMap<usize, Tensor>,
}

impl GradientMap {
    /// Gradient for a leaf tensor, if it was a parameter of the record.
    pub fn get(&self, leaf: &Tensor) -> Option<&Tensor> {
        self.map.get(&leaf.key())
    }

    pub fn len(&self) -> usize {
        self.map.len()
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }
}

/// A lightweight view of one recorded application, for op counting.
pub struct RecordedOp<'a> {
    pub name: &'static str,
    pub input_shapes: Vec<&'a [usize]>,
    pub output_shape: &'a [usize],
}

/// The finished program a tape produced.
pub struct ComputationRecord {
    pub(crate) tape_id: u64,
    pub(crate) nodes: Vec<Node>,
}

impl ComputationRecord {
    pub fn node_count(&self) -> usize {
        self.nodes.len()
    }

    /// Resolve a tensor produced by this record back to its node index.
    pub(crate) fn node_of(&self, t: &Tensor) -> Result<usize> {
        match t.node {
            Some((tid, idx)) if tid == self.tape_id => Ok(idx),
            _ => Err(DyError::invalid(
                "tensor was not produced by this computation record",
            )),
        }
    }

    /// Index of the gradient leaf registered for this tensor, if any.
    pub(crate) fn param_leaf_of(&self, t: &Tensor) -> Option<usize> {
        let key = t.key();
        self.nodes.iter().position(
            |n| matches!(n.kind, NodeKind::Leaf { key: k, param: true } if k == key),
        )
    }

    /// Iterate the recorded applications (leaves are skipped).
    pub fn ops(&self) -> impl Iterator<Item = RecordedOp<'_>> {
        self.nodes.iter().filter_map(|n| match &n.kind {
            NodeKind::Leaf { .. } => None,
            NodeKind::Op { prim, inputs } => Some(RecordedOp {
                name: prim.name(),
                input_shapes: inputs.iter().map(|&i| self.nodes[i].shape.as_slice()).collect(),
                output_shape: n.shape.as_slice(),
            }),
        })
    }

    /// Walk the record backward from a scalar loss, visiting each node once,
    /// and return the gradient of every parameter leaf (zero-filled when no
    /// path reaches the loss).
    pub fn reverse_accumulate(&self, loss: &Tensor) -> Result<GradientMap> {
        let loss_idx = self.node_of(loss)?;
        if self.nodes[loss_idx].shape.iter().product::<usize>() != 1 {
            return Err(DyError::invalid(format!(
                "reverse_accumulate expects a scalar loss, got shape {:?}",
                self.nodes[loss_idx].shape
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss_idx] = Some(vec![1.0]);

        for idx in (0..=loss_idx).rev() {
            if !self.nodes[idx].needs_grad {
                continue;
            }
            let (prim, inputs) = match &self.nodes[idx].kind {
                NodeKind::Leaf { .. } => continue,
                NodeKind::Op { prim, inputs } => (prim, inputs),
            };
            let Some(dy) = grads[idx].take() else {
                continue;
            };
            let bufs: Vec<Vec<f64>> = inputs
                .iter()
                .map(|&i| kernels::widen(&self.nodes[i].data))
                .collect();
            let buf_refs: Vec<&[f64]> = bufs.iter().map(|b| b.as_slice()).collect();
            let shapes: Vec<&[usize]> = inputs
                .iter()
                .map(|&i| self.nodes[i].shape.as_slice())
                .collect();
            let out = kernels::widen(&self.nodes[idx].data);
            let parts = backward_f64(prim, &buf_refs, &shapes, &out, &dy);
            for (&input_idx, part) in inputs.iter().zip(parts) {
                let Some(part) = part else { continue };
                if !self.nodes[input_idx].needs_grad {
                    continue;
                }
                match &mut grads[input_idx] {
                    Some(acc) => {
                        for (a, p) in acc.iter_mut().zip(&part) {
                            *a += p;
                        }
                    }
                    slot => *slot = Some(part),
                }
            }
        }

        let mut map = HashMap::new();
        for (idx, node) in self.nodes.iter().enumerate() {
            if let NodeKind::Leaf { key, param: true } = node.kind {
                let grad = match &grads[idx] {
                    Some(g) => kernels::narrow(g),
                    None => vec![0.0; node.data.len()],
                };
                let tensor = Tensor::from_parts(node.shape.clone(), Arc::new(grad));
                map.insert(key, tensor);
            }
        }
        Ok(GradientMap { map })
    }

    /// Re-execute the program in `f64` end to end, optionally overriding one
    /// leaf's buffer, and return the buffer of node `out_idx`.
    pub(crate) fn replay_f64(
        &self,
        out_idx: usize,
        override_leaf: Option<(usize, &[f64])>,
    ) -> Result<Vec<f64>> {
        if out_idx >= self.nodes.len() {
            return Err(DyError::invalid("replay: node index out of range"));
        }
        let mut bufs: Vec<Option<Vec<f64>>> = (0..=out_idx).map(|_| None).collect();
        for idx in 0..=out_idx {
            let value = match &self.nodes[idx].kind {
                NodeKind::Leaf { .. } => match override_leaf {
                    Some((leaf, values)) if leaf == idx => {
                        if values.len() != self.nodes[idx].data.len() {
                            return Err(DyError::invalid(
                                "replay: override length does not match leaf",
                            ));
                        }
                        values.to_vec()
                    }
                    _ => kernels::widen(&self.nodes[idx].data),
                },
                NodeKind::Op { prim, inputs } => {
                    let ins: Vec<&[f64]> = inputs
                        .iter()
                        .map(|&i| bufs[i].as_deref().expect("topological order"))
                        .collect();
                    let shapes: Vec<&[usize]> = inputs
                        .iter()
                        .map(|&i| self.nodes[i].shape.as_slice())
                        .collect();
                    execute_f64(prim, &ins, &shapes)
                }
            };
            bufs[idx] = Some(value);
        }
        Ok(bufs[out_idx].take().expect("just computed"))
    }
}
