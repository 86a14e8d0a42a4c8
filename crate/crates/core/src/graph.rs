//! Dense tensors with reverse-mode automatic differentiation.
//!
//! A [`Graph`] is a dynamic tape: every forward op is evaluated eagerly and
//! recorded, then [`Graph::backward`] replays the records in reverse to
//! accumulate gradients via the chain rule. Gradients flow to any leaf created
//! with `requires_grad`, including model *inputs* — the acquisition stage
//! differentiates an objective with respect to the knob vector through frozen
//! model parameters, so nothing here treats parameters specially.
//!
//! Tensors are row-major `Vec<f64>` buffers. Rank 0 (scalar), 1, 2 and 3
//! (conv kernels) cover every shape the models and losses need. Ops whose
//! inputs carry no gradient path are evaluated but not recorded, so
//! inference-only forward passes do not grow the tape.

use std::sync::Arc;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum GraphError {
    #[error("{op}: shape mismatch: {detail}")]
    ShapeMismatch { op: &'static str, detail: String },
    #[error("{op}: invalid argument: {detail}")]
    InvalidArgument { op: &'static str, detail: String },
    #[error("tensor contains non-finite values")]
    NonFinite,
    #[error("backward root must be a scalar, got shape {0:?}")]
    NonScalarRoot(Vec<usize>),
    #[error("log applied to non-positive value {0}")]
    LogDomain(f64),
}

type Result<T> = std::result::Result<T, GraphError>;

/// Plain tensor value: shape plus row-major storage. Used for parameters and
/// signals outside any graph; inserting it into a [`Graph`] makes it a leaf.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    values: Vec<f64>,
}

impl Tensor {
    pub fn new(values: Vec<f64>, shape: Vec<usize>) -> Result<Self> {
        if shape.iter().product::<usize>() != values.len() {
            return Err(GraphError::ShapeMismatch {
                op: "tensor",
                detail: format!("shape {:?} implies {} values, got {}", shape, shape.iter().product::<usize>(), values.len()),
            });
        }
        if !values.iter().all(|v| v.is_finite()) {
            return Err(GraphError::NonFinite);
        }
        Ok(Tensor { shape, values })
    }

    pub fn scalar(v: f64) -> Self {
        Tensor { shape: vec![], values: vec![v] }
    }

    pub fn from_vec(values: Vec<f64>) -> Result<Self> {
        let n = values.len();
        Tensor::new(values, vec![n])
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let n = shape.iter().product();
        Tensor { shape, values: vec![0.0; n] }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn numel(&self) -> usize {
        self.values.len()
    }
}

/// Index of a tensor slot inside a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct TensorId(usize);

struct Slot {
    shape: Vec<usize>,
    values: Arc<Vec<f64>>,
    grad: Option<Vec<f64>>,
    /// Leaf flag: gradients are reported for this slot after backward.
    requires_grad: bool,
    /// True when some requires_grad leaf feeds this slot; drives op recording.
    needs_grad: bool,
}

enum Op {
    Add { a: TensorId, b: TensorId },
    Sub { a: TensorId, b: TensorId },
    Mul { a: TensorId, b: TensorId },
    Scale { a: TensorId, c: f64 },
    AddScalar { a: TensorId },
    Tanh { a: TensorId },
    Sigmoid { a: TensorId },
    Log { a: TensorId },
    ClampMin { a: TensorId, floor: f64 },
    Abs { a: TensorId },
    Sum { a: TensorId },
    Mean { a: TensorId },
    Matmul { a: TensorId, b: TensorId, m: usize, k: usize, n: usize },
    BroadcastTime { a: TensorId, t: usize },
    ConcatRows { parts: Vec<TensorId>, rows: Vec<usize>, t: usize },
    SliceTime { a: TensorId, start: usize, len: usize },
    Reshape { a: TensorId },
    Frame { a: TensorId, n_fft: usize, hop: usize },
    Conv1d {
        input: TensorId,
        kernel: TensorId,
        dilation: usize,
        causal: bool,
        c_in: usize,
        c_out: usize,
        width: usize,
    },
    LstmSeq {
        input: TensorId,
        wx: TensorId,
        wh: TensorId,
        bias: TensorId,
        hidden: usize,
        /// Post-activation gates (i, f, g, o), laid out [4H x T].
        gates: Vec<f64>,
        /// Cell states [H x T].
        cell: Vec<f64>,
        /// tanh of cell states [H x T].
        cell_tanh: Vec<f64>,
    },
}

struct OpRecord {
    op: Op,
    out: TensorId,
}

/// Dynamic tape: eager forward evaluation with recorded adjoints.
#[derive(Default)]
pub struct Graph {
    slots: Vec<Slot>,
    ops: Vec<OpRecord>,
}

impl Graph {
    pub fn new() -> Self {
        Graph::default()
    }

    pub fn leaf(&mut self, values: Vec<f64>, shape: Vec<usize>, requires_grad: bool) -> Result<TensorId> {
        let t = Tensor::new(values, shape)?;
        Ok(self.push_slot(t.shape, Arc::new(t.values), requires_grad))
    }

    pub fn insert(&mut self, tensor: &Tensor, requires_grad: bool) -> TensorId {
        self.push_slot(tensor.shape.clone(), Arc::new(tensor.values.clone()), requires_grad)
    }

    /// Insert a constant whose storage is shared with the caller; no copy.
    pub fn insert_shared(&mut self, values: Arc<Vec<f64>>, shape: Vec<usize>) -> Result<TensorId> {
        if shape.iter().product::<usize>() != values.len() {
            return Err(GraphError::ShapeMismatch {
                op: "insert_shared",
                detail: format!("shape {:?} vs {} values", shape, values.len()),
            });
        }
        Ok(self.push_slot(shape, values, false))
    }

    pub fn scalar(&mut self, v: f64) -> TensorId {
        self.push_slot(vec![], Arc::new(vec![v]), false)
    }

    fn push_slot(&mut self, shape: Vec<usize>, values: Arc<Vec<f64>>, requires_grad: bool) -> TensorId {
        self.slots.push(Slot { shape, values, grad: None, requires_grad, needs_grad: requires_grad });
        TensorId(self.slots.len() - 1)
    }

    fn out_slot(&mut self, shape: Vec<usize>, values: Vec<f64>, needs_grad: bool) -> TensorId {
        self.slots.push(Slot { shape, values: Arc::new(values), grad: None, requires_grad: false, needs_grad });
        TensorId(self.slots.len() - 1)
    }

    pub fn values(&self, id: TensorId) -> &[f64] {
        &self.slots[id.0].values
    }

    pub fn shape(&self, id: TensorId) -> &[usize] {
        &self.slots[id.0].shape
    }

    pub fn numel(&self, id: TensorId) -> usize {
        self.slots[id.0].values.len()
    }

    /// Value of a single-element tensor.
    pub fn scalar_value(&self, id: TensorId) -> f64 {
        debug_assert_eq!(self.numel(id), 1);
        self.slots[id.0].values[0]
    }

    pub fn grad(&self, id: TensorId) -> Option<&[f64]> {
        self.slots[id.0].grad.as_deref()
    }

    pub fn to_tensor(&self, id: TensorId) -> Tensor {
        Tensor { shape: self.shape(id).to_vec(), values: self.values(id).to_vec() }
    }

    pub fn zero_grads(&mut self) {
        for s in &mut self.slots {
            s.grad = None;
        }
    }

    fn needs(&self, id: TensorId) -> bool {
        self.slots[id.0].needs_grad
    }

    fn record(&mut self, op: Op, out: TensorId) {
        self.ops.push(OpRecord { op, out });
    }

    // ---- elementwise -----------------------------------------------------

    fn check_same_shape(&self, op: &'static str, a: TensorId, b: TensorId) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(GraphError::ShapeMismatch {
                op,
                detail: format!("{:?} vs {:?}", self.shape(a), self.shape(b)),
            });
        }
        Ok(())
    }

    pub fn add(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        self.check_same_shape("add", a, b)?;
        let vals: Vec<f64> = self.values(a).iter().zip(self.values(b)).map(|(x, y)| x + y).collect();
        let ng = self.needs(a) || self.needs(b);
        let out = self.out_slot(self.slots[a.0].shape.clone(), vals, ng);
        if ng {
            self.record(Op::Add { a, b }, out);
        }
        Ok(out)
    }

    pub fn sub(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        self.check_same_shape("sub", a, b)?;
        let vals: Vec<f64> = self.values(a).iter().zip(self.values(b)).map(|(x, y)| x - y).collect();
        let ng = self.needs(a) || self.needs(b);
        let out = self.out_slot(self.slots[a.0].shape.clone(), vals, ng);
        if ng {
            self.record(Op::Sub { a, b }, out);
        }
        Ok(out)
    }

    pub fn mul(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        self.check_same_shape("mul", a, b)?;
        let vals: Vec<f64> = self.values(a).iter().zip(self.values(b)).map(|(x, y)| x * y).collect();
        let ng = self.needs(a) || self.needs(b);
        let out = self.out_slot(self.slots[a.0].shape.clone(), vals, ng);
        if ng {
            self.record(Op::Mul { a, b }, out);
        }
        Ok(out)
    }

    pub fn scale(&mut self, a: TensorId, c: f64) -> Result<TensorId> {
        let vals: Vec<f64> = self.values(a).iter().map(|x| c * x).collect();
        let ng = self.needs(a);
        let out = self.out_slot(self.slots[a.0].shape.clone(), vals, ng);
        if ng {
            self.record(Op::Scale { a, c }, out);
        }
        Ok(out)
    }

    pub fn add_scalar(&mut self, a: TensorId, c: f64) -> Result<TensorId> {
        let vals: Vec<f64> = self.values(a).iter().map(|x| x + c).collect();
        let ng = self.needs(a);
        let out = self.out_slot(self.slots[a.0].shape.clone(), vals, ng);
        if ng {
            self.record(Op::AddScalar { a }, out);
        }
        Ok(out)
    }

    pub fn tanh(&mut self, a: TensorId) -> Result<TensorId> {
        let vals: Vec<f64> = self.values(a).iter().map(|x| x.tanh()).collect();
        let ng = self.needs(a);
        let out = self.out_slot(self.slots[a.0].shape.clone(), vals, ng);
        if ng {
            self.record(Op::Tanh { a }, out);
        }
        Ok(out)
    }

    pub fn sigmoid(&mut self, a: TensorId) -> Result<TensorId> {
        let vals: Vec<f64> = self.values(a).iter().map(|x| sigmoid(*x)).collect();
        let ng = self.needs(a);
        let out = self.out_slot(self.slots[a.0].shape.clone(), vals, ng);
        if ng {
            self.record(Op::Sigmoid { a }, out);
        }
        Ok(out)
    }

    pub fn log(&mut self, a: TensorId) -> Result<TensorId> {
        if let Some(&bad) = self.values(a).iter().find(|v| **v <= 0.0) {
            return Err(GraphError::LogDomain(bad));
        }
        let vals: Vec<f64> = self.values(a).iter().map(|x| x.ln()).collect();
        let ng = self.needs(a);
        let out = self.out_slot(self.slots[a.0].shape.clone(), vals, ng);
        if ng {
            self.record(Op::Log { a }, out);
        }
        Ok(out)
    }

    /// max(a, floor) elementwise; gradient passes where a > floor.
    pub fn clamp_min(&mut self, a: TensorId, floor: f64) -> Result<TensorId> {
        let vals: Vec<f64> = self.values(a).iter().map(|x| x.max(floor)).collect();
        let ng = self.needs(a);
        let out = self.out_slot(self.slots[a.0].shape.clone(), vals, ng);
        if ng {
            self.record(Op::ClampMin { a, floor }, out);
        }
        Ok(out)
    }

    pub fn abs(&mut self, a: TensorId) -> Result<TensorId> {
        let vals: Vec<f64> = self.values(a).iter().map(|x| x.abs()).collect();
        let ng = self.needs(a);
        let out = self.out_slot(self.slots[a.0].shape.clone(), vals, ng);
        if ng {
            self.record(Op::Abs { a }, out);
        }
        Ok(out)
    }

    // ---- reductions ------------------------------------------------------

    pub fn sum(&mut self, a: TensorId) -> Result<TensorId> {
        let v: f64 = self.values(a).iter().sum();
        let ng = self.needs(a);
        let out = self.out_slot(vec![], vec![v], ng);
        if ng {
            self.record(Op::Sum { a }, out);
        }
        Ok(out)
    }

    pub fn mean(&mut self, a: TensorId) -> Result<TensorId> {
        let n = self.numel(a);
        if n == 0 {
            return Err(GraphError::InvalidArgument { op: "mean", detail: "empty tensor".into() });
        }
        let v: f64 = self.values(a).iter().sum::<f64>() / n as f64;
        let ng = self.needs(a);
        let out = self.out_slot(vec![], vec![v], ng);
        if ng {
            self.record(Op::Mean { a }, out);
        }
        Ok(out)
    }

    // ---- structure -------------------------------------------------------

    /// a: [m x k], b: [k x n] -> [m x n]; a rank-2 with b rank-1 [k] -> [m].
    pub fn matmul(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        let sa = self.shape(a);
        let sb = self.shape(b);
        let (m, k) = match sa {
            [m, k] => (*m, *k),
            _ => {
                return Err(GraphError::ShapeMismatch {
                    op: "matmul",
                    detail: format!("left operand must be rank 2, got {:?}", sa),
                })
            }
        };
        let (k2, n, out_shape) = match sb {
            [k2, n] => (*k2, *n, vec![m, *n]),
            [k2] => (*k2, 1, vec![m]),
            _ => {
                return Err(GraphError::ShapeMismatch {
                    op: "matmul",
                    detail: format!("right operand must be rank 1 or 2, got {:?}", sb),
                })
            }
        };
        if k != k2 {
            return Err(GraphError::ShapeMismatch {
                op: "matmul",
                detail: format!("inner dims differ: {:?} vs {:?}", sa, sb),
            });
        }
        let mut vals = vec![0.0; m * n];
        dgemm(m, k, n, 1.0, self.values(a), false, self.values(b), false, 0.0, &mut vals);
        let ng = self.needs(a) || self.needs(b);
        let out = self.out_slot(out_shape, vals, ng);
        if ng {
            self.record(Op::Matmul { a, b, m, k, n }, out);
        }
        Ok(out)
    }

    /// [d] -> [d x t] by repeating the vector along time.
    pub fn broadcast_time(&mut self, a: TensorId, t: usize) -> Result<TensorId> {
        let d = match self.shape(a) {
            [d] => *d,
            s => {
                return Err(GraphError::ShapeMismatch {
                    op: "broadcast_time",
                    detail: format!("expected rank-1 input, got {:?}", s),
                })
            }
        };
        if t == 0 {
            return Err(GraphError::InvalidArgument { op: "broadcast_time", detail: "t = 0".into() });
        }
        let mut vals = vec![0.0; d * t];
        for (i, row) in vals.chunks_exact_mut(t).enumerate() {
            row.fill(self.values(a)[i]);
        }
        let ng = self.needs(a);
        let out = self.out_slot(vec![d, t], vals, ng);
        if ng {
            self.record(Op::BroadcastTime { a, t }, out);
        }
        Ok(out)
    }

    /// Stack rank-2 tensors [r_i x T] along the row axis.
    pub fn concat_rows(&mut self, parts: &[TensorId]) -> Result<TensorId> {
        if parts.is_empty() {
            return Err(GraphError::InvalidArgument { op: "concat_rows", detail: "no inputs".into() });
        }
        let mut t = 0usize;
        let mut rows = Vec::with_capacity(parts.len());
        for (i, p) in parts.iter().enumerate() {
            match self.shape(*p) {
                [r, cols] => {
                    if i == 0 {
                        t = *cols;
                    } else if *cols != t {
                        return Err(GraphError::ShapeMismatch {
                            op: "concat_rows",
                            detail: format!("time lengths differ: {} vs {}", t, cols),
                        });
                    }
                    rows.push(*r);
                }
                s => {
                    return Err(GraphError::ShapeMismatch {
                        op: "concat_rows",
                        detail: format!("expected rank-2 input, got {:?}", s),
                    })
                }
            }
        }
        let total: usize = rows.iter().sum();
        let mut vals = Vec::with_capacity(total * t);
        for p in parts {
            vals.extend_from_slice(self.values(*p));
        }
        let ng = parts.iter().any(|p| self.needs(*p));
        let out = self.out_slot(vec![total, t], vals, ng);
        if ng {
            self.record(Op::ConcatRows { parts: parts.to_vec(), rows, t }, out);
        }
        Ok(out)
    }

    /// Slice along the last (time) axis of a rank-1 or rank-2 tensor.
    pub fn slice_time(&mut self, a: TensorId, start: usize, len: usize) -> Result<TensorId> {
        let (c, t) = match self.shape(a) {
            [t] => (1usize, *t),
            [c, t] => (*c, *t),
            s => {
                return Err(GraphError::ShapeMismatch {
                    op: "slice_time",
                    detail: format!("expected rank 1 or 2, got {:?}", s),
                })
            }
        };
        if start + len > t || len == 0 {
            return Err(GraphError::InvalidArgument {
                op: "slice_time",
                detail: format!("range {}..{} out of 0..{}", start, start + len, t),
            });
        }
        let rank1 = self.shape(a).len() == 1;
        let mut vals = Vec::with_capacity(c * len);
        for row in 0..c {
            let base = row * t + start;
            vals.extend_from_slice(&self.values(a)[base..base + len]);
        }
        let shape = if rank1 { vec![len] } else { vec![c, len] };
        let ng = self.needs(a);
        let out = self.out_slot(shape, vals, ng);
        if ng {
            self.record(Op::SliceTime { a, start, len }, out);
        }
        Ok(out)
    }

    pub fn reshape(&mut self, a: TensorId, shape: Vec<usize>) -> Result<TensorId> {
        if shape.iter().product::<usize>() != self.numel(a) {
            return Err(GraphError::ShapeMismatch {
                op: "reshape",
                detail: format!("{:?} -> {:?}", self.shape(a), shape),
            });
        }
        let vals = self.values(a).to_vec();
        let ng = self.needs(a);
        let out = self.out_slot(shape, vals, ng);
        if ng {
            self.record(Op::Reshape { a }, out);
        }
        Ok(out)
    }

    /// Extract overlapping frames from [T]: out[n, f] = a[f*hop + n],
    /// giving shape [n_fft x frames] with frames = 1 + (T - n_fft) / hop.
    pub fn frame(&mut self, a: TensorId, n_fft: usize, hop: usize) -> Result<TensorId> {
        let t = match self.shape(a) {
            [t] => *t,
            s => {
                return Err(GraphError::ShapeMismatch {
                    op: "frame",
                    detail: format!("expected rank-1 input, got {:?}", s),
                })
            }
        };
        if hop == 0 || n_fft == 0 {
            return Err(GraphError::InvalidArgument { op: "frame", detail: "n_fft and hop must be positive".into() });
        }
        if t < n_fft {
            return Err(GraphError::InvalidArgument {
                op: "frame",
                detail: format!("signal length {} shorter than n_fft {}", t, n_fft),
            });
        }
        let frames = 1 + (t - n_fft) / hop;
        let src = self.values(a);
        let mut vals = vec![0.0; n_fft * frames];
        for n in 0..n_fft {
            for f in 0..frames {
                vals[n * frames + f] = src[f * hop + n];
            }
        }
        let ng = self.needs(a);
        let out = self.out_slot(vec![n_fft, frames], vals, ng);
        if ng {
            self.record(Op::Frame { a, n_fft, hop }, out);
        }
        Ok(out)
    }

    // ---- fused model kernels ----------------------------------------------

    /// Dilated 1-D convolution. input: [C_in x T], kernel: [C_out x C_in x K].
    ///
    /// Tap convention: out[o, t] = sum_{c,j} kernel[o, c, j] * input[c, t - dilation*(K-1-j)].
    /// With `causal` the input is implicitly left-padded with zeros by
    /// dilation*(K-1) and the output keeps length T; otherwise only fully
    /// covered positions are produced (length T - dilation*(K-1)).
    pub fn conv1d_dilated(&mut self, input: TensorId, kernel: TensorId, dilation: usize, causal: bool) -> Result<TensorId> {
        let (c_in, t) = match self.shape(input) {
            [c, t] => (*c, *t),
            s => {
                return Err(GraphError::ShapeMismatch {
                    op: "conv1d_dilated",
                    detail: format!("input must be rank 2 [C_in x T], got {:?}", s),
                })
            }
        };
        let (c_out, kc_in, width) = match self.shape(kernel) {
            [o, c, k] => (*o, *c, *k),
            s => {
                return Err(GraphError::ShapeMismatch {
                    op: "conv1d_dilated",
                    detail: format!("kernel must be rank 3 [C_out x C_in x K], got {:?}", s),
                })
            }
        };
        if kc_in != c_in {
            return Err(GraphError::ShapeMismatch {
                op: "conv1d_dilated",
                detail: format!("input has C_in={} but kernel expects C_in={}", c_in, kc_in),
            });
        }
        if dilation == 0 || width == 0 {
            return Err(GraphError::InvalidArgument {
                op: "conv1d_dilated",
                detail: "dilation and kernel width must be >= 1".into(),
            });
        }
        let pad = dilation * (width - 1);
        let out_len = if causal {
            t
        } else {
            if t <= pad {
                return Err(GraphError::InvalidArgument {
                    op: "conv1d_dilated",
                    detail: format!("input length {} too short for receptive span {}", t, pad + 1),
                });
            }
            t - pad
        };
        let mut vals = vec![0.0; c_out * out_len];
        {
            let inp = self.values(input);
            let ker = self.values(kernel);
            for o in 0..c_out {
                let orow = &mut vals[o * out_len..(o + 1) * out_len];
                for c in 0..c_in {
                    let irow = &inp[c * t..(c + 1) * t];
                    for j in 0..width {
                        let w = ker[(o * c_in + c) * width + j];
                        if w == 0.0 {
                            continue;
                        }
                        let offset = dilation * (width - 1 - j);
                        if causal {
                            // out[t'] += w * in[t' - offset] for t' >= offset
                            for tt in offset..out_len {
                                orow[tt] += w * irow[tt - offset];
                            }
                        } else {
                            // out index 0 corresponds to input position pad
                            for tt in 0..out_len {
                                orow[tt] += w * irow[tt + pad - offset];
                            }
                        }
                    }
                }
            }
        }
        let ng = self.needs(input) || self.needs(kernel);
        let out = self.out_slot(vec![c_out, out_len], vals, ng);
        if ng {
            self.record(Op::Conv1d { input, kernel, dilation, causal, c_in, c_out, width }, out);
        }
        Ok(out)
    }

    /// Single LSTM layer over a full sequence, starting from zero state.
    ///
    /// input: [I x T], wx: [4H x I], wh: [4H x H], bias: [4H]; returns hidden
    /// states [H x T]. Gate layout along the 4H axis is (input, forget, cell
    /// candidate, output).
    pub fn lstm_seq(&mut self, input: TensorId, wx: TensorId, wh: TensorId, bias: TensorId, hidden: usize) -> Result<TensorId> {
        let (i_dim, t) = match self.shape(input) {
            [i, t] => (*i, *t),
            s => {
                return Err(GraphError::ShapeMismatch {
                    op: "lstm_seq",
                    detail: format!("input must be rank 2 [I x T], got {:?}", s),
                })
            }
        };
        let h = hidden;
        if self.shape(wx) != [4 * h, i_dim] {
            return Err(GraphError::ShapeMismatch {
                op: "lstm_seq",
                detail: format!("wx shape {:?}, expected [{} x {}]", self.shape(wx), 4 * h, i_dim),
            });
        }
        if self.shape(wh) != [4 * h, h] {
            return Err(GraphError::ShapeMismatch {
                op: "lstm_seq",
                detail: format!("wh shape {:?}, expected [{} x {}]", self.shape(wh), 4 * h, h),
            });
        }
        if self.shape(bias) != [4 * h] {
            return Err(GraphError::ShapeMismatch {
                op: "lstm_seq",
                detail: format!("bias shape {:?}, expected [{}]", self.shape(bias), 4 * h),
            });
        }

        // Input projection for all timesteps at once: proj = wx @ input, [4H x T].
        let mut proj = vec![0.0; 4 * h * t];
        dgemm(4 * h, i_dim, t, 1.0, self.values(wx), false, self.values(input), false, 0.0, &mut proj);

        let wh_v = self.values(wh).to_vec();
        let b_v = self.values(bias).to_vec();

        let mut gates = vec![0.0; 4 * h * t];
        let mut cell = vec![0.0; h * t];
        let mut cell_tanh = vec![0.0; h * t];
        let mut hs = vec![0.0; h * t];
        let mut h_prev = vec![0.0; h];
        let mut c_prev = vec![0.0; h];
        let mut pre = vec![0.0; 4 * h];

        for step in 0..t {
            for r in 0..4 * h {
                let mut acc = proj[r * t + step] + b_v[r];
                let wrow = &wh_v[r * h..(r + 1) * h];
                for (w, hp) in wrow.iter().zip(&h_prev) {
                    acc += w * hp;
                }
                pre[r] = acc;
            }
            for u in 0..h {
                let ig = sigmoid(pre[u]);
                let fg = sigmoid(pre[h + u]);
                let gg = pre[2 * h + u].tanh();
                let og = sigmoid(pre[3 * h + u]);
                let c = fg * c_prev[u] + ig * gg;
                let ct = c.tanh();
                let hv = og * ct;
                gates[u * t + step] = ig;
                gates[(h + u) * t + step] = fg;
                gates[(2 * h + u) * t + step] = gg;
                gates[(3 * h + u) * t + step] = og;
                cell[u * t + step] = c;
                cell_tanh[u * t + step] = ct;
                hs[u * t + step] = hv;
                c_prev[u] = c;
                h_prev[u] = hv;
            }
        }

        let ng = self.needs(input) || self.needs(wx) || self.needs(wh) || self.needs(bias);
        let out = self.out_slot(vec![h, t], hs, ng);
        if ng {
            self.record(Op::LstmSeq { input, wx, wh, bias, hidden: h, gates, cell, cell_tanh }, out);
        }
        Ok(out)
    }

    // ---- backward ----------------------------------------------------------

    /// Reverse pass from a scalar root. Every `requires_grad` leaf ends up
    /// with a gradient; leaves with no path to the root get zeros.
    pub fn backward(&mut self, root: TensorId) -> Result<()> {
        if self.numel(root) != 1 {
            return Err(GraphError::NonScalarRoot(self.shape(root).to_vec()));
        }
        self.slots[root.0].grad = Some(vec![1.0]);

        for idx in (0..self.ops.len()).rev() {
            if self.slots[self.ops[idx].out.0].grad.is_none() {
                continue;
            }
            self.backward_op(idx);
        }

        for s in &mut self.slots {
            if s.requires_grad && s.grad.is_none() {
                s.grad = Some(vec![0.0; s.values.len()]);
            }
        }
        Ok(())
    }

    fn accumulate(&mut self, id: TensorId, delta: &[f64]) {
        if !self.needs(id) {
            return;
        }
        let slot = &mut self.slots[id.0];
        match &mut slot.grad {
            Some(g) => {
                for (gi, di) in g.iter_mut().zip(delta) {
                    *gi += di;
                }
            }
            None => slot.grad = Some(delta.to_vec()),
        }
    }

    /// Gradient accumulation buffer for `id`, creating zeros on first touch.
    fn grad_buf(&mut self, id: TensorId) -> Option<&mut Vec<f64>> {
        if !self.needs(id) {
            return None;
        }
        let n = self.slots[id.0].values.len();
        let slot = &mut self.slots[id.0];
        if slot.grad.is_none() {
            slot.grad = Some(vec![0.0; n]);
        }
        slot.grad.as_mut()
    }

    fn backward_op(&mut self, idx: usize) {
        // The output grad is cloned so the borrow on ops/slots can be reshuffled;
        // buffers are small relative to the fused-kernel work they drive.
        let out = self.ops[idx].out;
        let d_out = self.slots[out.0].grad.clone().expect("checked by caller");
        // Split borrows: move the op record out temporarily.
        let record = std::mem::replace(
            &mut self.ops[idx],
            OpRecord { op: Op::AddScalar { a: out }, out },
        );
        match &record.op {
            Op::Add { a, b } => {
                self.accumulate(*a, &d_out);
                self.accumulate(*b, &d_out);
            }
            Op::Sub { a, b } => {
                self.accumulate(*a, &d_out);
                let neg: Vec<f64> = d_out.iter().map(|d| -d).collect();
                self.accumulate(*b, &neg);
            }
            Op::Mul { a, b } => {
                if self.needs(*a) {
                    let da: Vec<f64> = d_out.iter().zip(self.values(*b)).map(|(d, y)| d * y).collect();
                    self.accumulate(*a, &da);
                }
                if self.needs(*b) {
                    let db: Vec<f64> = d_out.iter().zip(self.values(*a)).map(|(d, x)| d * x).collect();
                    self.accumulate(*b, &db);
                }
            }
            Op::Scale { a, c } => {
                let da: Vec<f64> = d_out.iter().map(|d| c * d).collect();
                self.accumulate(*a, &da);
            }
            Op::AddScalar { a } => {
                self.accumulate(*a, &d_out);
            }
            Op::Tanh { a } => {
                let da: Vec<f64> = d_out.iter().zip(self.values(out)).map(|(d, y)| d * (1.0 - y * y)).collect();
                self.accumulate(*a, &da);
            }
            Op::Sigmoid { a } => {
                let da: Vec<f64> = d_out.iter().zip(self.values(out)).map(|(d, y)| d * y * (1.0 - y)).collect();
                self.accumulate(*a, &da);
            }
            Op::Log { a } => {
                let da: Vec<f64> = d_out.iter().zip(self.values(*a)).map(|(d, x)| d / x).collect();
                self.accumulate(*a, &da);
            }
            Op::ClampMin { a, floor } => {
                let da: Vec<f64> = d_out
                    .iter()
                    .zip(self.values(*a))
                    .map(|(d, x)| if *x > *floor { *d } else { 0.0 })
                    .collect();
                self.accumulate(*a, &da);
            }
            Op::Abs { a } => {
                let da: Vec<f64> = d_out
                    .iter()
                    .zip(self.values(*a))
                    .map(|(d, x)| d * if *x > 0.0 { 1.0 } else if *x < 0.0 { -1.0 } else { 0.0 })
                    .collect();
                self.accumulate(*a, &da);
            }
            Op::Sum { a } => {
                let d = d_out[0];
                if let Some(g) = self.grad_buf(*a) {
                    for gi in g.iter_mut() {
                        *gi += d;
                    }
                }
            }
            Op::Mean { a } => {
                let n = self.numel(*a) as f64;
                let d = d_out[0] / n;
                if let Some(g) = self.grad_buf(*a) {
                    for gi in g.iter_mut() {
                        *gi += d;
                    }
                }
            }
            Op::Matmul { a, b, m, k, n } => {
                let (m, k, n) = (*m, *k, *n);
                if self.needs(*a) {
                    // d_a[m x k] = d_out[m x n] @ b^T
                    let mut da = vec![0.0; m * k];
                    dgemm(m, n, k, 1.0, &d_out, false, self.values(*b), true, 0.0, &mut da);
                    self.accumulate(*a, &da);
                }
                if self.needs(*b) {
                    // d_b[k x n] = a^T @ d_out
                    let mut db = vec![0.0; k * n];
                    dgemm(k, m, n, 1.0, self.values(*a), true, &d_out, false, 0.0, &mut db);
                    self.accumulate(*b, &db);
                }
            }
            Op::BroadcastTime { a, t } => {
                let d = self.numel(*a);
                let mut da = vec![0.0; d];
                for (i, dai) in da.iter_mut().enumerate() {
                    *dai = d_out[i * t..(i + 1) * t].iter().sum();
                }
                self.accumulate(*a, &da);
            }
            Op::ConcatRows { parts, rows, t } => {
                let mut offset = 0usize;
                for (p, r) in parts.iter().zip(rows) {
                    let block = &d_out[offset * t..(offset + r) * t];
                    self.accumulate(*p, block);
                    offset += r;
                }
            }
            Op::SliceTime { a, start, len } => {
                let (c, t) = match self.shape(*a) {
                    [t] => (1usize, *t),
                    [c, t] => (*c, *t),
                    _ => unreachable!(),
                };
                let (start, len) = (*start, *len);
                if let Some(g) = self.grad_buf(*a) {
                    for row in 0..c {
                        let src = &d_out[row * len..(row + 1) * len];
                        let dst = &mut g[row * t + start..row * t + start + len];
                        for (di, si) in dst.iter_mut().zip(src) {
                            *di += si;
                        }
                    }
                }
            }
            Op::Reshape { a } => {
                self.accumulate(*a, &d_out);
            }
            Op::Frame { a, n_fft, hop } => {
                let (n_fft, hop) = (*n_fft, *hop);
                let t = self.numel(*a);
                let frames = 1 + (t - n_fft) / hop;
                if let Some(g) = self.grad_buf(*a) {
                    for n in 0..n_fft {
                        let row = &d_out[n * frames..(n + 1) * frames];
                        for (f, d) in row.iter().enumerate() {
                            g[f * hop + n] += d;
                        }
                    }
                }
            }
            Op::Conv1d { input, kernel, dilation, causal, c_in, c_out, width } => {
                self.backward_conv1d(*input, *kernel, *dilation, *causal, *c_in, *c_out, *width, &d_out);
            }
            Op::LstmSeq { input, wx, wh, bias, hidden, gates, cell, cell_tanh } => {
                self.backward_lstm(*input, *wx, *wh, *bias, *hidden, out, gates, cell, cell_tanh, &d_out);
            }
        }
        self.ops[idx] = record;
    }

    #[allow(clippy::too_many_arguments)]
    fn backward_conv1d(
        &mut self,
        input: TensorId,
        kernel: TensorId,
        dilation: usize,
        causal: bool,
        c_in: usize,
        c_out: usize,
        width: usize,
        d_out: &[f64],
    ) {
        let t = self.shape(input)[1];
        let pad = dilation * (width - 1);
        let out_len = if causal { t } else { t - pad };

        let (d_input, d_kernel) = {
            let inp = self.values(input);
            let ker = self.values(kernel);
            let mut d_input = if self.needs(input) { Some(vec![0.0; c_in * t]) } else { None };
            let mut d_kernel = if self.needs(kernel) { Some(vec![0.0; c_out * c_in * width]) } else { None };
            for o in 0..c_out {
                let drow = &d_out[o * out_len..(o + 1) * out_len];
                for c in 0..c_in {
                    let irow = &inp[c * t..(c + 1) * t];
                    for j in 0..width {
                        let offset = dilation * (width - 1 - j);
                        if let Some(g) = d_input.as_mut() {
                            let w = ker[(o * c_in + c) * width + j];
                            if w != 0.0 {
                                let grow = &mut g[c * t..(c + 1) * t];
                                if causal {
                                    for tt in offset..out_len {
                                        grow[tt - offset] += w * drow[tt];
                                    }
                                } else {
                                    for tt in 0..out_len {
                                        grow[tt + pad - offset] += w * drow[tt];
                                    }
                                }
                            }
                        }
                        if let Some(g) = d_kernel.as_mut() {
                            let mut acc = 0.0;
                            if causal {
                                for tt in offset..out_len {
                                    acc += drow[tt] * irow[tt - offset];
                                }
                            } else {
                                for tt in 0..out_len {
                                    acc += drow[tt] * irow[tt + pad - offset];
                                }
                            }
                            g[(o * c_in + c) * width + j] += acc;
                        }
                    }
                }
            }
            (d_input, d_kernel)
        };
        if let Some(g) = d_input {
            self.accumulate(input, &g);
        }
        if let Some(g) = d_kernel {
            self.accumulate(kernel, &g);
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn backward_lstm(
        &mut self,
        input: TensorId,
        wx: TensorId,
        wh: TensorId,
        bias: TensorId,
        h: usize,
        out: TensorId,
        gates: &[f64],
        cell: &[f64],
        cell_tanh: &[f64],
        d_out: &[f64],
    ) {
        let t = self.shape(input)[1];
        let i_dim = self.shape(input)[0];
        let need_wh = self.needs(wh);
        let need_wx = self.needs(wx);
        let need_bias = self.needs(bias);
        let need_input = self.needs(input);

        let (d_proj, d_wh, d_bias, d_wx, d_input) = {
            let wh_v = self.values(wh);
            let hs = self.values(out);
            let mut d_proj = vec![0.0; 4 * h * t];
            let mut d_wh = vec![0.0; 4 * h * h];
            let mut dh_next = vec![0.0; h];
            let mut dc_next = vec![0.0; h];
            let mut dpre = vec![0.0; 4 * h];

            for step in (0..t).rev() {
                for u in 0..h {
                    let ig = gates[u * t + step];
                    let fg = gates[(h + u) * t + step];
                    let gg = gates[(2 * h + u) * t + step];
                    let og = gates[(3 * h + u) * t + step];
                    let ct = cell_tanh[u * t + step];
                    let c_prev = if step == 0 { 0.0 } else { cell[u * t + step - 1] };

                    let dh = d_out[u * t + step] + dh_next[u];
                    let d_og = dh * ct;
                    let dc = dh * og * (1.0 - ct * ct) + dc_next[u];
                    let d_ig = dc * gg;
                    let d_gg = dc * ig;
                    let d_fg = dc * c_prev;
                    dc_next[u] = dc * fg;

                    dpre[u] = d_ig * ig * (1.0 - ig);
                    dpre[h + u] = d_fg * fg * (1.0 - fg);
                    dpre[2 * h + u] = d_gg * (1.0 - gg * gg);
                    dpre[3 * h + u] = d_og * og * (1.0 - og);
                }
                // dh_next = wh^T @ dpre
                for u in 0..h {
                    let mut acc = 0.0;
                    for r in 0..4 * h {
                        acc += wh_v[r * h + u] * dpre[r];
                    }
                    dh_next[u] = acc;
                }
                if need_wh && step > 0 {
                    for r in 0..4 * h {
                        let d = dpre[r];
                        if d == 0.0 {
                            continue;
                        }
                        let row = &mut d_wh[r * h..(r + 1) * h];
                        for (u, ru) in row.iter_mut().enumerate() {
                            *ru += d * hs[u * t + step - 1];
                        }
                    }
                }
                for r in 0..4 * h {
                    d_proj[r * t + step] = dpre[r];
                }
            }

            let d_bias = if need_bias {
                let mut db = vec![0.0; 4 * h];
                for (r, dbr) in db.iter_mut().enumerate() {
                    *dbr = d_proj[r * t..(r + 1) * t].iter().sum();
                }
                Some(db)
            } else {
                None
            };
            let d_wx = if need_wx {
                // d_wx[4H x I] = d_proj[4H x T] @ input^T
                let mut dwx = vec![0.0; 4 * h * i_dim];
                dgemm(4 * h, t, i_dim, 1.0, &d_proj, false, self.values(input), true, 0.0, &mut dwx);
                Some(dwx)
            } else {
                None
            };
            let d_input = if need_input {
                // d_input[I x T] = wx^T @ d_proj
                let mut din = vec![0.0; i_dim * t];
                dgemm(i_dim, 4 * h, t, 1.0, self.values(wx), true, &d_proj, false, 0.0, &mut din);
                Some(din)
            } else {
                None
            };
            (d_proj, d_wh, d_bias, d_wx, d_input)
        };
        let _ = d_proj;

        if need_wh {
            self.accumulate(wh, &d_wh);
        }
        if let Some(db) = d_bias {
            self.accumulate(bias, &db);
        }
        if let Some(dwx) = d_wx {
            self.accumulate(wx, &dwx);
        }
        if let Some(din) = d_input {
            self.accumulate(input, &din);
        }
    }
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// c = alpha * a@b + beta * c for row-major buffers, with logical transposes.
pub(crate) fn dgemm(m: usize, k: usize, n: usize, alpha: f64, a: &[f64], a_t: bool, b: &[f64], b_t: bool, beta: f64, c: &mut [f64]) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    let (rsa, csa) = if a_t { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if b_t { (1, k as isize) } else { (n as isize, 1) };
    unsafe {
        matrixmultiply::dgemm(
            m, k, n, alpha,
            a.as_ptr(), rsa, csa,
            b.as_ptr(), rsb, csb,
            beta,
            c.as_mut_ptr(), n as isize, 1,
        );
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numcheck::{central_diff, max_rel_err};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    fn rand_vec(r: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
        (0..n).map(|_| r.gen_range(-1.0..1.0)).collect()
    }

    #[test]
    fn conv_identity_kernel() {
        let mut g = Graph::new();
        let x = g.leaf(vec![1.0, 2.0, 3.0, 4.0], vec![1, 4], false).unwrap();
        let k = g.leaf(vec![1.0], vec![1, 1, 1], false).unwrap();
        for dil in [1, 3, 7] {
            let y = g.conv1d_dilated(x, k, dil, true).unwrap();
            assert_eq!(g.values(y), &[1.0, 2.0, 3.0, 4.0]);
        }
    }

    #[test]
    fn conv_dilated_two_tap() {
        // out[t] = k0*in[t-2] + k1*in[t]  (dilation 2, K=2, causal)
        let mut g = Graph::new();
        let x = g.leaf(vec![1.0, 2.0, 3.0, 4.0], vec![1, 4], false).unwrap();
        let k = g.leaf(vec![1.0, 1.0], vec![1, 1, 2], false).unwrap();
        let y = g.conv1d_dilated(x, k, 2, true).unwrap();
        assert_eq!(g.values(y), &[1.0, 2.0, 4.0, 6.0]);
    }

    #[test]
    fn conv_zero_kernel() {
        let mut g = Graph::new();
        let mut r = rng(7);
        let x_vals = rand_vec(&mut r, 16);
        let x = g.leaf(x_vals, vec![2, 8], false).unwrap();
        let k = g.leaf(vec![0.0; 3 * 2 * 2], vec![3, 2, 2], false).unwrap();
        let y = g.conv1d_dilated(x, k, 2, true).unwrap();
        assert!(g.values(y).iter().all(|v| *v == 0.0));
    }

    #[test]
    fn conv_channel_mismatch_rejected() {
        let mut g = Graph::new();
        let x = g.leaf(vec![0.0; 8], vec![2, 4], false).unwrap();
        let k = g.leaf(vec![0.0; 9], vec![3, 3, 1], false).unwrap();
        let err = g.conv1d_dilated(x, k, 1, true).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("C_in=2") && msg.contains("C_in=3"), "got: {msg}");
    }

    #[test]
    fn conv_causality() {
        // Perturbing input[t] must not change output[t'] for t' < t.
        let mut r = rng(3);
        let t_len = 32;
        let base = rand_vec(&mut r, t_len);
        let kernel = rand_vec(&mut r, 2 * 2 * 3);
        let run = |xv: &[f64]| {
            let mut g = Graph::new();
            let x = g.leaf(xv.to_vec(), vec![1, t_len], false).unwrap();
            let xs = g.concat_rows(&[x, x]).unwrap();
            let k = g.leaf(kernel.clone(), vec![2, 2, 3], false).unwrap();
            let y = g.conv1d_dilated(xs, k, 4, true).unwrap();
            g.values(y).to_vec()
        };
        let y0 = run(&base);
        for pos in [5, 17, 30] {
            let mut pert = base.clone();
            pert[pos] += 0.5;
            let y1 = run(&pert);
            for c in 0..2 {
                for t in 0..pos {
                    assert_eq!(y0[c * t_len + t], y1[c * t_len + t], "c={c} t={t} pos={pos}");
                }
            }
        }
    }

    #[test]
    fn backward_square() {
        let mut g = Graph::new();
        let w = g.leaf(vec![3.0], vec![1], true).unwrap();
        let sq = g.mul(w, w).unwrap();
        let root = g.sum(sq).unwrap();
        g.backward(root).unwrap();
        assert_eq!(g.grad(w).unwrap(), &[6.0]);
    }

    #[test]
    fn backward_unconnected_leaf_zero() {
        let mut g = Graph::new();
        let w = g.leaf(vec![3.0, -1.0], vec![2], true).unwrap();
        let v = g.leaf(vec![2.0], vec![1], true).unwrap();
        let root = g.sum(v).unwrap();
        g.backward(root).unwrap();
        assert_eq!(g.grad(w).unwrap(), &[0.0, 0.0]);
        assert_eq!(g.grad(v).unwrap(), &[1.0]);
    }

    #[test]
    fn backward_non_scalar_root_rejected() {
        let mut g = Graph::new();
        let w = g.leaf(vec![1.0, 2.0], vec![2], true).unwrap();
        assert!(matches!(g.backward(w), Err(GraphError::NonScalarRoot(_))));
    }

    #[test]
    fn backward_deterministic_after_reset() {
        let mut r = rng(11);
        let xv = rand_vec(&mut r, 24);
        let kv = rand_vec(&mut r, 1 * 1 * 3);
        let mut g = Graph::new();
        let x = g.leaf(xv, vec![1, 24], true).unwrap();
        let k = g.leaf(kv, vec![1, 1, 3], true).unwrap();
        let c = g.conv1d_dilated(x, k, 2, true).unwrap();
        let t = g.tanh(c).unwrap();
        let root = g.mean(t).unwrap();
        g.backward(root).unwrap();
        let gx1 = g.grad(x).unwrap().to_vec();
        let gk1 = g.grad(k).unwrap().to_vec();
        g.zero_grads();
        g.backward(root).unwrap();
        assert_eq!(g.grad(x).unwrap(), &gx1[..]);
        assert_eq!(g.grad(k).unwrap(), &gk1[..]);
    }

    #[test]
    fn backward_conv_tanh_mean_matches_fd() {
        let mut r = rng(42);
        let xv = rand_vec(&mut r, 20);
        let kv = rand_vec(&mut r, 2 * 2 * 2);
        let eval = |which: usize, probe: &[f64]| -> f64 {
            let mut g = Graph::new();
            let (xvals, kvals) = match which {
                0 => (probe.to_vec(), kv.clone()),
                _ => (xv.clone(), probe.to_vec()),
            };
            let x = g.leaf(xvals, vec![2, 10], false).unwrap();
            let k = g.leaf(kvals, vec![2, 2, 2], false).unwrap();
            let c = g.conv1d_dilated(x, k, 3, true).unwrap();
            let t = g.tanh(c).unwrap();
            let m = g.mean(t).unwrap();
            g.scalar_value(m)
        };
        let mut g = Graph::new();
        let x = g.leaf(xv.clone(), vec![2, 10], true).unwrap();
        let k = g.leaf(kv.clone(), vec![2, 2, 2], true).unwrap();
        let c = g.conv1d_dilated(x, k, 3, true).unwrap();
        let t = g.tanh(c).unwrap();
        let m = g.mean(t).unwrap();
        g.backward(m).unwrap();

        let fd_x = central_diff(|p| eval(0, p), &xv, 1e-5);
        let fd_k = central_diff(|p| eval(1, p), &kv, 1e-5);
        assert!(max_rel_err(g.grad(x).unwrap(), &fd_x) < 1e-6);
        assert!(max_rel_err(g.grad(k).unwrap(), &fd_k) < 1e-6);
    }

    #[test]
    fn elementwise_trivial_values() {
        let mut g = Graph::new();
        let z = g.leaf(vec![0.0], vec![1], false).unwrap();
        let t = g.tanh(z).unwrap();
        let s = g.sigmoid(z).unwrap();
        let prod = g.mul(t, s).unwrap();
        assert_eq!(g.values(prod), &[0.0]);

        let v = g.leaf(vec![1.0, 2.0], vec![2], false).unwrap();
        let b = g.broadcast_time(v, 3).unwrap();
        assert_eq!(g.values(b), &[1.0, 1.0, 1.0, 2.0, 2.0, 2.0]);
        assert_eq!(g.shape(b), &[2, 3]);

        let m = g.leaf(vec![1.0, 2.0, 3.0], vec![3], false).unwrap();
        let mm = g.mean(m).unwrap();
        assert_eq!(g.scalar_value(mm), 2.0);
    }

    #[test]
    fn incompatible_shapes_rejected() {
        let mut g = Graph::new();
        let a = g.leaf(vec![0.0; 4], vec![4], false).unwrap();
        let b = g.leaf(vec![0.0; 5], vec![5], false).unwrap();
        assert!(g.add(a, b).is_err());
        assert!(g.mul(a, b).is_err());
        let m = g.leaf(vec![0.0; 6], vec![2, 3], false).unwrap();
        assert!(g.matmul(m, a).is_err());
    }

    #[test]
    fn log_domain_rejected() {
        let mut g = Graph::new();
        let a = g.leaf(vec![1.0, -0.5], vec![2], false).unwrap();
        assert!(matches!(g.log(a), Err(GraphError::LogDomain(_))));
    }

    #[test]
    fn non_finite_leaf_rejected() {
        let mut g = Graph::new();
        assert!(matches!(g.leaf(vec![f64::NAN], vec![1], false), Err(GraphError::NonFinite)));
    }

    #[test]
    fn matmul_matches_naive() {
        let mut r = rng(5);
        let a = rand_vec(&mut r, 3 * 4);
        let b = rand_vec(&mut r, 4 * 2);
        let mut g = Graph::new();
        let ta = g.leaf(a.clone(), vec![3, 4], false).unwrap();
        let tb = g.leaf(b.clone(), vec![4, 2], false).unwrap();
        let out = g.matmul(ta, tb).unwrap();
        for i in 0..3 {
            for j in 0..2 {
                let want: f64 = (0..4).map(|p| a[i * 4 + p] * b[p * 2 + j]).sum();
                assert!((g.values(out)[i * 2 + j] - want).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn lstm_seq_matches_scalar_recurrence() {
        let h = 3;
        let i_dim = 2;
        let t_len = 5;
        let mut r = rng(9);
        let xv = rand_vec(&mut r, i_dim * t_len);
        let wx = rand_vec(&mut r, 4 * h * i_dim);
        let wh = rand_vec(&mut r, 4 * h * h);
        let b = rand_vec(&mut r, 4 * h);

        let mut g = Graph::new();
        let x = g.leaf(xv.clone(), vec![i_dim, t_len], false).unwrap();
        let twx = g.leaf(wx.clone(), vec![4 * h, i_dim], false).unwrap();
        let twh = g.leaf(wh.clone(), vec![4 * h, h], false).unwrap();
        let tb = g.leaf(b.clone(), vec![4 * h], false).unwrap();
        let out = g.lstm_seq(x, twx, twh, tb, h).unwrap();

        // Scalar-by-scalar reference recurrence.
        let sig = |v: f64| 1.0 / (1.0 + (-v).exp());
        let mut hp = vec![0.0; h];
        let mut cp = vec![0.0; h];
        for step in 0..t_len {
            let mut pre = vec![0.0; 4 * h];
            for row in 0..4 * h {
                let mut acc = b[row];
                for c in 0..i_dim {
                    acc += wx[row * i_dim + c] * xv[c * t_len + step];
                }
                for u in 0..h {
                    acc += wh[row * h + u] * hp[u];
                }
                pre[row] = acc;
            }
            let mut hn = vec![0.0; h];
            let mut cn = vec![0.0; h];
            for u in 0..h {
                let ig = sig(pre[u]);
                let fg = sig(pre[h + u]);
                let gg = pre[2 * h + u].tanh();
                let og = sig(pre[3 * h + u]);
                cn[u] = fg * cp[u] + ig * gg;
                hn[u] = og * cn[u].tanh();
                let got = g.values(out)[u * t_len + step];
                assert!((got - hn[u]).abs() < 1e-12, "u={u} step={step}: {got} vs {}", hn[u]);
            }
            hp = hn;
            cp = cn;
        }
    }

    // Per-op gradient check harness: builds a scalar objective around one op
    // and compares reverse-mode grads against central differences.
    fn gradcheck_op<F>(seed: u64, n_in: usize, build: F) -> f64
    where
        F: Fn(&mut Graph, TensorId) -> TensorId + Copy,
    {
        let mut r = rng(seed);
        let xv: Vec<f64> = (0..n_in).map(|_| r.gen_range(-2.0..2.0)).collect();
        let wv: Vec<f64> = (0..4096).map(|_| r.gen_range(-1.0..1.0)).collect();
        let eval = |probe: &[f64]| -> f64 {
            let mut g = Graph::new();
            let x = g.leaf(probe.to_vec(), vec![probe.len()], false).unwrap();
            let y = build(&mut g, x);
            let n = g.numel(y);
            let shape = g.shape(y).to_vec();
            let w = g.leaf(wv[..n].to_vec(), shape, false).unwrap();
            let p = g.mul(y, w).unwrap();
            let s = g.sum(p).unwrap();
            g.scalar_value(s)
        };
        let mut g = Graph::new();
        let x = g.leaf(xv.clone(), vec![n_in], true).unwrap();
        let y = build(&mut g, x);
        let n = g.numel(y);
        let shape = g.shape(y).to_vec();
        let w = g.leaf(wv[..n].to_vec(), shape, false).unwrap();
        let p = g.mul(y, w).unwrap();
        let s = g.sum(p).unwrap();
        g.backward(s).unwrap();
        let fd = central_diff(eval, &xv, 1e-5);
        max_rel_err(g.grad(x).unwrap(), &fd)
    }

    #[test]
    fn gradcheck_all_ops_randomized() {
        // >= 100 randomized trials across the op set, rel err < 1e-6 each.
        let mut worst: f64 = 0.0;
        let mut trials = 0;
        for seed in 0..9 {
            let n = 12;
            let checks: Vec<(&str, f64)> = vec![
                ("add", gradcheck_op(seed, n, |g, x| {
                    let y = g.scale(x, 0.7).unwrap();
                    g.add(x, y).unwrap()
                })),
                ("sub", gradcheck_op(seed + 100, n, |g, x| {
                    let y = g.tanh(x).unwrap();
                    g.sub(x, y).unwrap()
                })),
                ("mul", gradcheck_op(seed + 200, n, |g, x| {
                    let y = g.sigmoid(x).unwrap();
                    g.mul(x, y).unwrap()
                })),
                ("scale", gradcheck_op(seed + 300, n, |g, x| g.scale(x, -1.3).unwrap())),
                ("add_scalar", gradcheck_op(seed + 400, n, |g, x| g.add_scalar(x, 0.25).unwrap())),
                ("tanh", gradcheck_op(seed + 500, n, |g, x| g.tanh(x).unwrap())),
                ("sigmoid", gradcheck_op(seed + 600, n, |g, x| g.sigmoid(x).unwrap())),
                ("log", gradcheck_op(seed + 700, n, |g, x| {
                    let sq = g.mul(x, x).unwrap();
                    let pos = g.add_scalar(sq, 0.5).unwrap();
                    g.log(pos).unwrap()
                })),
                ("clamp_min", gradcheck_op(seed + 800, n, |g, x| g.clamp_min(x, 0.1).unwrap())),
                ("abs", gradcheck_op(seed + 900, n, |g, x| g.abs(x).unwrap())),
                ("sum", gradcheck_op(seed + 1000, n, |g, x| {
                    let s = g.sum(x).unwrap();
                    g.reshape(s, vec![1]).unwrap()
                })),
                ("mean", gradcheck_op(seed + 1100, n, |g, x| {
                    let m = g.mean(x).unwrap();
                    g.reshape(m, vec![1]).unwrap()
                })),
                ("matmul", gradcheck_op(seed + 1200, n, |g, x| {
                    let m = g.reshape(x, vec![3, 4]).unwrap();
                    let other = g.leaf((0..8).map(|i| 0.1 * i as f64 - 0.3).collect(), vec![4, 2], false).unwrap();
                    g.matmul(m, other).unwrap()
                })),
                ("matvec", gradcheck_op(seed + 1250, n, |g, x| {
                    let m = g.reshape(x, vec![4, 3]).unwrap();
                    let v = g.leaf(vec![0.5, -0.2, 0.9], vec![3], false).unwrap();
                    g.matmul(m, v).unwrap()
                })),
                ("broadcast_time", gradcheck_op(seed + 1300, n, |g, x| g.broadcast_time(x, 5).unwrap())),
                ("concat_rows", gradcheck_op(seed + 1400, n, |g, x| {
                    let a = g.reshape(x, vec![2, 6]).unwrap();
                    let b = g.tanh(a).unwrap();
                    g.concat_rows(&[a, b]).unwrap()
                })),
                ("slice_time", gradcheck_op(seed + 1500, n, |g, x| {
                    let a = g.reshape(x, vec![2, 6]).unwrap();
                    g.slice_time(a, 1, 4).unwrap()
                })),
                ("reshape", gradcheck_op(seed + 1600, n, |g, x| g.reshape(x, vec![3, 4]).unwrap())),
                ("frame", gradcheck_op(seed + 1700, n, |g, x| g.frame(x, 4, 2).unwrap())),
                ("conv1d", gradcheck_op(seed + 1800, n, |g, x| {
                    let a = g.reshape(x, vec![2, 6]).unwrap();
                    let k = g.leaf(vec![0.4, -0.7, 0.2, 0.5, -0.1, 0.3, 0.8, -0.6], vec![2, 2, 2], false).unwrap();
                    g.conv1d_dilated(a, k, 2, true).unwrap()
                })),
                ("conv1d_valid", gradcheck_op(seed + 1850, n, |g, x| {
                    let a = g.reshape(x, vec![1, 12]).unwrap();
                    let k = g.leaf(vec![0.4, -0.7, 0.2], vec![1, 1, 3], false).unwrap();
                    g.conv1d_dilated(a, k, 2, false).unwrap()
                })),
                ("lstm_input", gradcheck_op(seed + 1900, n, |g, x| {
                    let a = g.reshape(x, vec![3, 4]).unwrap();
                    let mut rr = rng(seed + 77);
                    let wx = g.leaf(rand_vec(&mut rr, 8 * 3), vec![8, 3], false).unwrap();
                    let wh = g.leaf(rand_vec(&mut rr, 8 * 2), vec![8, 2], false).unwrap();
                    let b = g.leaf(rand_vec(&mut rr, 8), vec![8], false).unwrap();
                    g.lstm_seq(a, wx, wh, b, 2).unwrap()
                })),
            ];
            for (name, err) in checks {
                assert!(err < 1e-6, "op {name} seed {seed}: rel err {err}");
                worst = worst.max(err);
                trials += 1;
            }
        }
        assert!(trials >= 100, "only {trials} trials");
    }

    // LSTM weight gradients: check wx / wh / bias against finite differences.
    #[test]
    fn gradcheck_lstm_weights() {
        let h = 2;
        let i_dim = 3;
        let t_len = 6;
        let mut r = rng(21);
        let xv = rand_vec(&mut r, i_dim * t_len);
        let wx0 = rand_vec(&mut r, 4 * h * i_dim);
        let wh0 = rand_vec(&mut r, 4 * h * h);
        let b0 = rand_vec(&mut r, 4 * h);
        let eval = |wx: &[f64], wh: &[f64], b: &[f64]| -> f64 {
            let mut g = Graph::new();
            let x = g.leaf(xv.clone(), vec![i_dim, t_len], false).unwrap();
            let twx = g.leaf(wx.to_vec(), vec![4 * h, i_dim], false).unwrap();
            let twh = g.leaf(wh.to_vec(), vec![4 * h, h], false).unwrap();
            let tb = g.leaf(b.to_vec(), vec![4 * h], false).unwrap();
            let out = g.lstm_seq(x, twx, twh, tb, h).unwrap();
            let m = g.mean(out).unwrap();
            g.scalar_value(m)
        };
        let mut g = Graph::new();
        let x = g.leaf(xv.clone(), vec![i_dim, t_len], false).unwrap();
        let twx = g.leaf(wx0.clone(), vec![4 * h, i_dim], true).unwrap();
        let twh = g.leaf(wh0.clone(), vec![4 * h, h], true).unwrap();
        let tb = g.leaf(b0.clone(), vec![4 * h], true).unwrap();
        let out = g.lstm_seq(x, twx, twh, tb, h).unwrap();
        let m = g.mean(out).unwrap();
        g.backward(m).unwrap();

        let fd_wx = central_diff(|p| eval(p, &wh0, &b0), &wx0, 1e-5);
        let fd_wh = central_diff(|p| eval(&wx0, p, &b0), &wh0, 1e-5);
        let fd_b = central_diff(|p| eval(&wx0, &wh0, p), &b0, 1e-5);
        assert!(max_rel_err(g.grad(twx).unwrap(), &fd_wx) < 1e-6);
        assert!(max_rel_err(g.grad(twh).unwrap(), &fd_wh) < 1e-6);
        assert!(max_rel_err(g.grad(tb).unwrap(), &fd_b) < 1e-6);
    }
}
