//! Reverse-mode autodiff over [`Matrix`] values, used to train the
//! forecaster. Ops are recorded eagerly; `backward` walks the tape in
//! reverse and accumulates gradients for leaf nodes flagged as parameters.

use crate::mat::{softmax_rows, Matrix};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct NodeId(pub usize);

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    /// C = A * B
    MatMul(usize, usize),
    /// C = A * B^T
    MatMulTransB(usize, usize),
    Add(usize, usize),
    /// Broadcast a 1 x n bias over every row of A.
    AddBias(usize, usize),
    MulElem(usize, usize),
    Scale(usize, f64),
    Relu(usize),
    SoftmaxRows(usize),
    LayerNorm {
        x: usize,
        gain: usize,
        bias: usize,
    },
    ConcatCols(Vec<usize>),
    SliceCols {
        x: usize,
        start: usize,
        len: usize,
    },
    /// Scalar mean squared error between prediction and a constant target.
    MseLoss {
        pred: usize,
        target: usize,
    },
}

struct Node {
    value: Matrix,
    grad: Option<Matrix>,
    op: Op,
    needs_grad: bool,
}

pub struct Tape {
    nodes: Vec<Node>,
}

const LN_EPS: f64 = 1e-6;

impl Tape {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn value(&self, id: NodeId) -> &Matrix {
        &self.nodes[id.0].value
    }

    pub fn grad(&self, id: NodeId) -> Option<&Matrix> {
        self.nodes[id.0].grad.as_ref()
    }

    fn push(&mut self, value: Matrix, op: Op, needs_grad: bool) -> NodeId {
        self.nodes.push(Node {
            value,
            grad: None,
            op,
            needs_grad,
        });
        NodeId(self.nodes.len() - 1)
    }

    fn needs(&self, ids: &[usize]) -> bool {
        ids.iter().any(|&i| self.nodes[i].needs_grad)
    }

    /// A trainable parameter leaf; its gradient is available after backward.
    pub fn param(&mut self, value: Matrix) -> NodeId {
        self.push(value, Op::Leaf, true)
    }

    /// A constant leaf (inputs, masks, dropout masks, positional encodings).
    pub fn constant(&mut self, value: Matrix) -> NodeId {
        self.push(value, Op::Leaf, false)
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let v = self.nodes[a.0].value.matmul(&self.nodes[b.0].value);
        let ng = self.needs(&[a.0, b.0]);
        self.push(v, Op::MatMul(a.0, b.0), ng)
    }

    pub fn matmul_transb(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let v = self.nodes[a.0].value.matmul_transb(&self.nodes[b.0].value);
        let ng = self.needs(&[a.0, b.0]);
        self.push(v, Op::MatMulTransB(a.0, b.0), ng)
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let v = self.nodes[a.0].value.add(&self.nodes[b.0].value);
        let ng = self.needs(&[a.0, b.0]);
        self.push(v, Op::Add(a.0, b.0), ng)
    }

    pub fn add_bias(&mut self, a: NodeId, bias: NodeId) -> NodeId {
        let b = &self.nodes[bias.0].value;
        assert_eq!(b.rows(), 1);
        let av = &self.nodes[a.0].value;
        assert_eq!(av.cols(), b.cols());
        let mut v = av.clone();
        for i in 0..v.rows() {
            for j in 0..v.cols() {
                v[(i, j)] += b[(0, j)];
            }
        }
        let ng = self.needs(&[a.0, bias.0]);
        self.push(v, Op::AddBias(a.0, bias.0), ng)
    }

    pub fn mul_elem(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let av = &self.nodes[a.0].value;
        let bv = &self.nodes[b.0].value;
        assert_eq!((av.rows(), av.cols()), (bv.rows(), bv.cols()));
        let data = av
            .data()
            .iter()
            .zip(bv.data())
            .map(|(x, y)| x * y)
            .collect();
        let v = Matrix::from_vec(av.rows(), av.cols(), data);
        let ng = self.needs(&[a.0, b.0]);
        self.push(v, Op::MulElem(a.0, b.0), ng)
    }

    pub fn scale(&mut self, a: NodeId, c: f64) -> NodeId {
        let v = self.nodes[a.0].value.scale(c);
        let ng = self.needs(&[a.0]);
        self.push(v, Op::Scale(a.0, c), ng)
    }

    pub fn relu(&mut self, a: NodeId) -> NodeId {
        let v = self.nodes[a.0].value.map(|x| x.max(0.0));
        let ng = self.needs(&[a.0]);
        self.push(v, Op::Relu(a.0), ng)
    }

    pub fn softmax_rows(&mut self, a: NodeId) -> NodeId {
        let v = softmax_rows(&self.nodes[a.0].value);
        let ng = self.needs(&[a.0]);
        self.push(v, Op::SoftmaxRows(a.0), ng)
    }

    pub fn layer_norm(&mut self, x: NodeId, gain: NodeId, bias: NodeId) -> NodeId {
        let xv = &self.nodes[x.0].value;
        let g = &self.nodes[gain.0].value;
        let b = &self.nodes[bias.0].value;
        assert_eq!(g.rows(), 1);
        assert_eq!(b.rows(), 1);
        assert_eq!(g.cols(), xv.cols());
        let mut v = xv.clone();
        for i in 0..v.rows() {
            let row = v.row_mut(i);
            let n = row.len() as f64;
            let mean = row.iter().sum::<f64>() / n;
            let var = row.iter().map(|e| (e - mean) * (e - mean)).sum::<f64>() / n;
            let inv = 1.0 / (var + LN_EPS).sqrt();
            for (j, e) in row.iter_mut().enumerate() {
                *e = g[(0, j)] * (*e - mean) * inv + b[(0, j)];
            }
        }
        let ng = self.needs(&[x.0, gain.0, bias.0]);
        self.push(
            v,
            Op::LayerNorm {
                x: x.0,
                gain: gain.0,
                bias: bias.0,
            },
            ng,
        )
    }

    pub fn concat_cols(&mut self, parts: &[NodeId]) -> NodeId {
        assert!(!parts.is_empty());
        let rows = self.nodes[parts[0].0].value.rows();
        let cols: usize = parts.iter().map(|p| self.nodes[p.0].value.cols()).sum();
        let mut v = Matrix::zeros(rows, cols);
        let mut at = 0;
        for p in parts {
            let pv = &self.nodes[p.0].value;
            assert_eq!(pv.rows(), rows);
            for i in 0..rows {
                for j in 0..pv.cols() {
                    v[(i, at + j)] = pv[(i, j)];
                }
            }
            at += pv.cols();
        }
        let ids: Vec<usize> = parts.iter().map(|p| p.0).collect();
        let ng = self.needs(&ids);
        self.push(v, Op::ConcatCols(ids), ng)
    }

    pub fn slice_cols(&mut self, x: NodeId, start: usize, len: usize) -> NodeId {
        let xv = &self.nodes[x.0].value;
        assert!(start + len <= xv.cols());
        let mut v = Matrix::zeros(xv.rows(), len);
        for i in 0..xv.rows() {
            for j in 0..len {
                v[(i, j)] = xv[(i, start + j)];
            }
        }
        let ng = self.needs(&[x.0]);
        self.push(
            v,
            Op::SliceCols {
                x: x.0,
                start,
                len,
            },
            ng,
        )
    }

    /// Mean squared error over all entries; returns a 1x1 node.
    pub fn mse_loss(&mut self, pred: NodeId, target: NodeId) -> NodeId {
        let p = &self.nodes[pred.0].value;
        let t = &self.nodes[target.0].value;
        assert_eq!((p.rows(), p.cols()), (t.rows(), t.cols()));
        let n = (p.rows() * p.cols()) as f64;
        let loss = p
            .data()
            .iter()
            .zip(t.data())
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            / n;
        let ng = self.needs(&[pred.0]);
        self.push(
            Matrix::from_vec(1, 1, vec![loss]),
            Op::MseLoss {
                pred: pred.0,
                target: target.0,
            },
            ng,
        )
    }

    fn accumulate(&mut self, idx: usize, delta: &Matrix) {
        if !self.nodes[idx].needs_grad {
            return;
        }
        match &mut self.nodes[idx].grad {
            Some(g) => {
                for (gv, dv) in g.data_mut().iter_mut().zip(delta.data()) {
                    *gv += dv;
                }
            }
            None => self.nodes[idx].grad = Some(delta.clone()),
        }
    }

    /// Backpropagate from a scalar output node.
    pub fn backward(&mut self, out: NodeId) {
        {
            let v = &self.nodes[out.0].value;
            assert_eq!((v.rows(), v.cols()), (1, 1), "backward needs a scalar");
        }
        self.nodes[out.0].grad = Some(Matrix::from_vec(1, 1, vec![1.0]));
        for idx in (0..=out.0).rev() {
            if !self.nodes[idx].needs_grad {
                continue;
            }
            let Some(grad) = self.nodes[idx].grad.clone() else {
                continue;
            };
            match self.nodes[idx].op.clone() {
                Op::Leaf => {}
                Op::MatMul(a, b) => {
                    let da = grad.matmul_transb(&self.nodes[b].value);
                    let db = self.nodes[a].value.transpose().matmul(&grad);
                    self.accumulate(a, &da);
                    self.accumulate(b, &db);
                }
                Op::MatMulTransB(a, b) => {
                    // C = A B^T: dA = dC B, dB = dC^T A.
                    let da = grad.matmul(&self.nodes[b].value);
                    let db = grad.transpose().matmul(&self.nodes[a].value);
                    self.accumulate(a, &da);
                    self.accumulate(b, &db);
                }
                Op::Add(a, b) => {
                    self.accumulate(a, &grad);
                    self.accumulate(b, &grad);
                }
                Op::AddBias(a, bias) => {
                    self.accumulate(a, &grad);
                    let mut db = Matrix::zeros(1, grad.cols());
                    for i in 0..grad.rows() {
                        for j in 0..grad.cols() {
                            db[(0, j)] += grad[(i, j)];
                        }
                    }
                    self.accumulate(bias, &db);
                }
                Op::MulElem(a, b) => {
                    let bv = self.nodes[b].value.clone();
                    let av = self.nodes[a].value.clone();
                    let da = Matrix::from_vec(
                        grad.rows(),
                        grad.cols(),
                        grad.data().iter().zip(bv.data()).map(|(g, x)| g * x).collect(),
                    );
                    let db = Matrix::from_vec(
                        grad.rows(),
                        grad.cols(),
                        grad.data().iter().zip(av.data()).map(|(g, x)| g * x).collect(),
                    );
                    self.accumulate(a, &da);
                    self.accumulate(b, &db);
                }
                Op::Scale(a, c) => {
                    self.accumulate(a, &grad.scale(c));
                }
                Op::Relu(a) => {
                    let av = self.nodes[a].value.clone();
                    let da = Matrix::from_vec(
                        grad.rows(),
                        grad.cols(),
                        grad.data()
                            .iter()
                            .zip(av.data())
                            .map(|(g, x)| if *x > 0.0 { *g } else { 0.0 })
                            .collect(),
                    );
                    self.accumulate(a, &da);
                }
                Op::SoftmaxRows(a) => {
                    let s = self.nodes[idx].value.clone();
                    let mut da = Matrix::zeros(grad.rows(), grad.cols());
                    for i in 0..grad.rows() {
                        let dot: f64 = grad
                            .row(i)
                            .iter()
                            .zip(s.row(i))
                            .map(|(g, sv)| g * sv)
                            .sum();
                        for j in 0..grad.cols() {
                            da[(i, j)] = s[(i, j)] * (grad[(i, j)] - dot);
                        }
                    }
                    self.accumulate(a, &da);
                }
                Op::LayerNorm { x, gain, bias } => {
                    let xv = self.nodes[x].value.clone();
                    let g = self.nodes[gain].value.clone();
                    let cols = xv.cols() as f64;
                    let mut dx = Matrix::zeros(xv.rows(), xv.cols());
                    let mut dg = Matrix::zeros(1, xv.cols());
                    let mut db = Matrix::zeros(1, xv.cols());
                    for i in 0..xv.rows() {
                        let row = xv.row(i);
                        let mean = row.iter().sum::<f64>() / cols;
                        let var =
                            row.iter().map(|e| (e - mean) * (e - mean)).sum::<f64>() / cols;
                        let inv = 1.0 / (var + LN_EPS).sqrt();
                        let xhat: Vec<f64> = row.iter().map(|e| (e - mean) * inv).collect();
                        let dy = grad.row(i);
                        let dxhat: Vec<f64> =
                            dy.iter().enumerate().map(|(j, d)| d * g[(0, j)]).collect();
                        let mean_dxhat = dxhat.iter().sum::<f64>() / cols;
                        let mean_dxhat_xhat = dxhat
                            .iter()
                            .zip(&xhat)
                            .map(|(a, b)| a * b)
                            .sum::<f64>()
                            / cols;
                        for j in 0..xv.cols() {
                            dx[(i, j)] =
                                inv * (dxhat[j] - mean_dxhat - xhat[j] * mean_dxhat_xhat);
                            dg[(0, j)] += dy[j] * xhat[j];
                            db[(0, j)] += dy[j];
                        }
                    }
                    self.accumulate(x, &dx);
                    self.accumulate(gain, &dg);
                    self.accumulate(bias, &db);
                }
                Op::ConcatCols(parts) => {
                    let mut at = 0;
                    for p in parts {
                        let pc = self.nodes[p].value.cols();
                        let mut dp = Matrix::zeros(grad.rows(), pc);
                        for i in 0..grad.rows() {
                            for j in 0..pc {
                                dp[(i, j)] = grad[(i, at + j)];
                            }
                        }
                        self.accumulate(p, &dp);
                        at += pc;
                    }
                }
                Op::SliceCols { x, start, len } => {
                    let xv_cols = self.nodes[x].value.cols();
                    let mut dx = Matrix::zeros(grad.rows(), xv_cols);
                    for i in 0..grad.rows() {
                        for j in 0..len {
                            dx[(i, start + j)] = grad[(i, j)];
                        }
                    }
                    self.accumulate(x, &dx);
                }
                Op::MseLoss { pred, target } => {
                    let p = self.nodes[pred].value.clone();
                    let t = self.nodes[target].value.clone();
                    let n = (p.rows() * p.cols()) as f64;
                    let scale = 2.0 / n * grad[(0, 0)];
                    let dp = p.sub(&t).scale(scale);
                    self.accumulate(pred, &dp);
                }
            }
        }
    }
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}
