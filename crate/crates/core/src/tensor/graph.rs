use rand::Rng;

use super::{dot, log_softmax_at, softmax_into, ParamId, ParamTape, Result, Tensor2D, TensorError};

/// Handle to a node recorded on a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

/// Contiguous row groups, one per bag, used by segment softmax and pooling.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Segments {
    offsets: Vec<usize>,
}

impl Segments {
    pub fn from_lengths(lengths: &[usize]) -> Result<Self> {
        let mut offsets = Vec::with_capacity(lengths.len() + 1);
        offsets.push(0);
        for &len in lengths {
            if len == 0 {
                return Err(TensorError::Empty("segment"));
            }
            offsets.push(offsets.last().unwrap() + len);
        }
        Ok(Self { offsets })
    }

    pub fn single(len: usize) -> Result<Self> {
        Self::from_lengths(&[len])
    }

    pub fn count(&self) -> usize {
        self.offsets.len() - 1
    }

    pub fn total_rows(&self) -> usize {
        *self.offsets.last().unwrap()
    }

    pub fn range(&self, k: usize) -> std::ops::Range<usize> {
        self.offsets[k]..self.offsets[k + 1]
    }
}

#[derive(Debug, Clone)]
enum Op {
    Input,
    Param(ParamId),
    Linear {
        x: Var,
        w: Var,
        b: Var,
    },
    Tanh(Var),
    Relu(Var),
    Dropout {
        x: Var,
        mask: Vec<f64>,
    },
    SegmentSoftmax {
        x: Var,
        segs: Segments,
    },
    SegmentPool {
        weights: Var,
        feats: Var,
        segs: Segments,
    },
    Mse {
        pred: Var,
        target: Vec<f64>,
    },
    CrossEntropy {
        logits: Var,
        labels: Vec<usize>,
        probs: Tensor2D,
    },
    Add(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Sum(Var),
    Detach,
}

#[derive(Debug, Clone)]
struct Node {
    value: Tensor2D,
    op: Op,
}

/// Records a forward pass for reverse-mode differentiation.
///
/// A graph is built fresh for every minibatch. Parameters are copied in from
/// a [`ParamTape`] and their gradients flow back into the same tape.
#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
    training: bool,
}

impl Graph {
    /// Evaluation-mode graph: dropout is the identity.
    pub fn new() -> Self {
        Self::default()
    }

    pub fn training() -> Self {
        Self {
            nodes: Vec::new(),
            training: true,
        }
    }

    pub fn is_training(&self) -> bool {
        self.training
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor2D {
        &self.nodes[v.0].value
    }

    /// Scalar value of a 1x1 node.
    pub fn scalar(&self, v: Var) -> f64 {
        self.nodes[v.0].value.data()[0]
    }

    fn push(&mut self, value: Tensor2D, op: Op, name: &'static str) -> Result<Var> {
        if !value.is_finite() {
            return Err(TensorError::NonFinite { op: name });
        }
        self.nodes.push(Node { value, op });
        Ok(Var(self.nodes.len() - 1))
    }

    pub fn input(&mut self, value: Tensor2D) -> Result<Var> {
        self.push(value, Op::Input, "input")
    }

    pub fn param(&mut self, tape: &ParamTape, id: ParamId) -> Result<Var> {
        self.push(tape.value(id).clone(), Op::Param(id), "param")
    }

    /// Constant copy of `x`; gradients stop here.
    pub fn detach(&mut self, x: Var) -> Result<Var> {
        let value = self.value(x).clone();
        self.push(value, Op::Detach, "detach")
    }

    /// `x W + b` with `b` a 1 x out row.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let (xv, wv, bv) = (self.value(x), self.value(w), self.value(b));
        if bv.rows() != 1 {
            return Err(TensorError::ShapeMismatch {
                op: "linear(bias)",
                left: wv.shape(),
                right: bv.shape(),
            });
        }
        let y = super::linear(xv, wv, bv.data())?;
        self.push(y, Op::Linear { x, w, b }, "linear")
    }

    pub fn tanh(&mut self, x: Var) -> Result<Var> {
        let y = self.value(x).map(f64::tanh);
        self.push(y, Op::Tanh(x), "tanh")
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        let y = self.value(x).map(|v| v.max(0.0));
        self.push(y, Op::Relu(x), "relu")
    }

    /// Inverted dropout. Identity (and no RNG draws) outside training mode.
    pub fn dropout<R: Rng + ?Sized>(&mut self, x: Var, rate: f64, rng: &mut R) -> Result<Var> {
        if !self.training || rate <= 0.0 {
            return Ok(x);
        }
        let keep = 1.0 - rate;
        let xv = self.value(x);
        let mask: Vec<f64> = (0..xv.len())
            .map(|_| if rng.random::<f64>() < keep { 1.0 / keep } else { 0.0 })
            .collect();
        let data = xv.data().iter().zip(&mask).map(|(a, m)| a * m).collect();
        let y = Tensor2D::new(xv.rows(), xv.cols(), data)?;
        self.push(y, Op::Dropout { x, mask }, "dropout")
    }

    /// Softmax of an `n x 1` score column within each segment.
    pub fn segment_softmax(&mut self, x: Var, segs: &Segments) -> Result<Var> {
        let xv = self.value(x);
        if xv.cols() != 1 || xv.rows() != segs.total_rows() {
            return Err(TensorError::ShapeMismatch {
                op: "segment_softmax",
                left: xv.shape(),
                right: (segs.total_rows(), 1),
            });
        }
        let mut out = vec![0.0; xv.rows()];
        for k in 0..segs.count() {
            let r = segs.range(k);
            softmax_into(&xv.data()[r.clone()], &mut out[r]);
        }
        let y = Tensor2D::new(xv.rows(), 1, out)?;
        self.push(y, Op::SegmentSoftmax { x, segs: segs.clone() }, "segment_softmax")
    }

    /// `out[k] = sum_{i in seg k} weights[i] * feats[i]`, giving `segments x d`.
    pub fn segment_pool(&mut self, weights: Var, feats: Var, segs: &Segments) -> Result<Var> {
        let (wv, fv) = (self.value(weights), self.value(feats));
        if wv.cols() != 1 || wv.rows() != fv.rows() || fv.rows() != segs.total_rows() {
            return Err(TensorError::ShapeMismatch {
                op: "segment_pool",
                left: wv.shape(),
                right: fv.shape(),
            });
        }
        let d = fv.cols();
        let mut out = Tensor2D::zeros(segs.count(), d);
        for k in 0..segs.count() {
            let out_row = &mut out.data_mut()[k * d..(k + 1) * d];
            for i in segs.range(k) {
                let a = wv.data()[i];
                for (o, f) in out_row.iter_mut().zip(fv.row(i)) {
                    *o += a * f;
                }
            }
        }
        self.push(
            out,
            Op::SegmentPool {
                weights,
                feats,
                segs: segs.clone(),
            },
            "segment_pool",
        )
    }

    /// Mean squared error of an `m x 1` prediction column.
    pub fn mse(&mut self, pred: Var, target: &[f64]) -> Result<Var> {
        let pv = self.value(pred);
        if pv.cols() != 1 {
            return Err(TensorError::ShapeMismatch {
                op: "mse",
                left: pv.shape(),
                right: (target.len(), 1),
            });
        }
        let loss = super::loss_mse(pv.data(), target)?;
        self.push(
            Tensor2D::filled(1, 1, loss),
            Op::Mse {
                pred,
                target: target.to_vec(),
            },
            "mse",
        )
    }

    /// Mean cross-entropy of row-wise softmax over `m x C` logits.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let lv = self.value(logits);
        let loss = super::loss_ce(lv, labels)?;
        let mut probs = Tensor2D::zeros(lv.rows(), lv.cols());
        for r in 0..lv.rows() {
            let c = lv.cols();
            softmax_into(lv.row(r), &mut probs.data_mut()[r * c..(r + 1) * c]);
        }
        debug_assert!(labels
            .iter()
            .enumerate()
            .all(|(r, &l)| log_softmax_at(lv.row(r), l).is_finite()));
        self.push(
            Tensor2D::filled(1, 1, loss),
            Op::CrossEntropy {
                logits,
                labels: labels.to_vec(),
                probs,
            },
            "cross_entropy",
        )
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.shape() != bv.shape() {
            return Err(TensorError::ShapeMismatch {
                op: "add",
                left: av.shape(),
                right: bv.shape(),
            });
        }
        let mut y = av.clone();
        y.add_assign(bv);
        self.push(y, Op::Add(a, b), "add")
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.shape() != bv.shape() {
            return Err(TensorError::ShapeMismatch {
                op: "mul",
                left: av.shape(),
                right: bv.shape(),
            });
        }
        let data = av.data().iter().zip(bv.data()).map(|(x, y)| x * y).collect();
        let y = Tensor2D::new(av.rows(), av.cols(), data)?;
        self.push(y, Op::Mul(a, b), "mul")
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Result<Var> {
        let y = self.value(x).map(|v| v * c);
        self.push(y, Op::Scale(x, c), "scale")
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let s = self.value(x).data().iter().sum();
        self.push(Tensor2D::filled(1, 1, s), Op::Sum(x), "sum")
    }

    /// Back-propagates from a scalar `loss`, accumulating parameter gradients
    /// into `tape`. Gradients add to whatever the tape already holds; call
    /// [`ParamTape::zero_grad`] between minibatches.
    pub fn backward(&self, loss: Var, tape: &mut ParamTape) -> Result<()> {
        if loss.0 >= self.nodes.len() {
            return Err(TensorError::NoForward);
        }
        let shape = self.value(loss).shape();
        if shape != (1, 1) {
            return Err(TensorError::NonScalarLoss(shape));
        }
        let mut grads: Vec<Option<Tensor2D>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(Tensor2D::filled(1, 1, 1.0));

        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            match &node.op {
                Op::Input | Op::Detach => {}
                Op::Param(id) => tape.accumulate_grad(*id, &g),
                Op::Linear { x, w, b } => {
                    let xv = self.value(*x);
                    let wv = self.value(*w);
                    accumulate(&mut grads, *x, g.matmul_t(wv)?);
                    accumulate(&mut grads, *w, xv.t_matmul(&g)?);
                    let mut gb = Tensor2D::zeros(1, g.cols());
                    for r in 0..g.rows() {
                        for (o, v) in gb.data_mut().iter_mut().zip(g.row(r)) {
                            *o += v;
                        }
                    }
                    accumulate(&mut grads, *b, gb);
                }
                Op::Tanh(x) => {
                    let y = &node.value;
                    let data = g
                        .data()
                        .iter()
                        .zip(y.data())
                        .map(|(gi, yi)| gi * (1.0 - yi * yi))
                        .collect();
                    accumulate(&mut grads, *x, Tensor2D::new(g.rows(), g.cols(), data)?);
                }
                Op::Relu(x) => {
                    let xv = self.value(*x);
                    let data = g
                        .data()
                        .iter()
                        .zip(xv.data())
                        .map(|(gi, xi)| if *xi > 0.0 { *gi } else { 0.0 })
                        .collect();
                    accumulate(&mut grads, *x, Tensor2D::new(g.rows(), g.cols(), data)?);
                }
                Op::Dropout { x, mask } => {
                    let data = g.data().iter().zip(mask).map(|(gi, m)| gi * m).collect();
                    accumulate(&mut grads, *x, Tensor2D::new(g.rows(), g.cols(), data)?);
                }
                Op::SegmentSoftmax { x, segs } => {
                    let y = node.value.data();
                    let mut dx = vec![0.0; y.len()];
                    for k in 0..segs.count() {
                        let r = segs.range(k);
                        let inner = dot(&y[r.clone()], &g.data()[r.clone()]);
                        for i in r {
                            dx[i] = y[i] * (g.data()[i] - inner);
                        }
                    }
                    accumulate(&mut grads, *x, Tensor2D::new(y.len(), 1, dx)?);
                }
                Op::SegmentPool { weights, feats, segs } => {
                    let wv = self.value(*weights);
                    let fv = self.value(*feats);
                    let d = fv.cols();
                    let mut dw = vec![0.0; wv.rows()];
                    let mut df = Tensor2D::zeros(fv.rows(), d);
                    for k in 0..segs.count() {
                        let gk = g.row(k);
                        for i in segs.range(k) {
                            dw[i] = dot(gk, fv.row(i));
                            let a = wv.data()[i];
                            for (o, gv) in df.data_mut()[i * d..(i + 1) * d].iter_mut().zip(gk) {
                                *o = a * gv;
                            }
                        }
                    }
                    accumulate(&mut grads, *weights, Tensor2D::new(wv.rows(), 1, dw)?);
                    accumulate(&mut grads, *feats, df);
                }
                Op::Mse { pred, target } => {
                    let pv = self.value(*pred);
                    let n = target.len() as f64;
                    let up = g.data()[0];
                    let data = pv
                        .data()
                        .iter()
                        .zip(target)
                        .map(|(p, t)| up * 2.0 * (p - t) / n)
                        .collect();
                    accumulate(&mut grads, *pred, Tensor2D::new(pv.rows(), 1, data)?);
                }
                Op::CrossEntropy { logits, labels, probs } => {
                    let up = g.data()[0];
                    let n = labels.len() as f64;
                    let c = probs.cols();
                    let mut d = probs.clone();
                    for (r, &l) in labels.iter().enumerate() {
                        d.data_mut()[r * c + l] -= 1.0;
                    }
                    for v in d.data_mut() {
                        *v *= up / n;
                    }
                    accumulate(&mut grads, *logits, d);
                }
                Op::Add(a, b) => {
                    accumulate(&mut grads, *a, g.clone());
                    accumulate(&mut grads, *b, g);
                }
                Op::Mul(a, b) => {
                    let (av, bv) = (self.value(*a), self.value(*b));
                    let ga = g.data().iter().zip(bv.data()).map(|(x, y)| x * y).collect();
                    let gb = g.data().iter().zip(av.data()).map(|(x, y)| x * y).collect();
                    accumulate(&mut grads, *a, Tensor2D::new(g.rows(), g.cols(), ga)?);
                    accumulate(&mut grads, *b, Tensor2D::new(g.rows(), g.cols(), gb)?);
                }
                Op::Scale(x, c) => {
                    accumulate(&mut grads, *x, g.map(|v| v * c));
                }
                Op::Sum(x) => {
                    let (r, c) = self.value(*x).shape();
                    accumulate(&mut grads, *x, Tensor2D::filled(r, c, g.data()[0]));
                }
            }
        }
        if !tape.all_finite() {
            return Err(TensorError::NonFinite { op: "backward" });
        }
        tape.mark_grads_ready();
        Ok(())
    }
}

fn accumulate(grads: &mut [Option<Tensor2D>], v: Var, g: Tensor2D) {
    match &mut grads[v.0] {
        Some(existing) => existing.add_assign(&g),
        slot @ None => *slot = Some(g),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn square_gradient() {
        let mut tape = ParamTape::new();
        let w = tape.register("w", Tensor2D::filled(1, 1, 3.0)).unwrap();
        let mut g = Graph::new();
        let wv = g.param(&tape, w).unwrap();
        let sq = g.mul(wv, wv).unwrap();
        let f = g.sum(sq).unwrap();
        g.backward(f, &mut tape).unwrap();
        assert_eq!(tape.grad(w).data(), &[6.0]);
    }

    #[test]
    fn sum_of_softmax_has_zero_gradient() {
        let mut tape = ParamTape::new();
        let w = tape.register("w", Tensor2D::column(&[0.3, -1.0, 2.0, 0.1])).unwrap();
        let mut g = Graph::new();
        let wv = g.param(&tape, w).unwrap();
        let segs = Segments::single(4).unwrap();
        let s = g.segment_softmax(wv, &segs).unwrap();
        let f = g.sum(s).unwrap();
        g.backward(f, &mut tape).unwrap();
        for v in tape.grad(w).data() {
            assert!(v.abs() < 1e-15, "{v}");
        }
    }

    #[test]
    fn backward_without_forward_errors() {
        let g = Graph::new();
        let mut tape = ParamTape::new();
        assert_eq!(g.backward(Var(0), &mut tape), Err(TensorError::NoForward));
    }

    #[test]
    fn backward_requires_scalar() {
        let mut tape = ParamTape::new();
        let mut g = Graph::new();
        let x = g.input(Tensor2D::zeros(2, 2)).unwrap();
        assert!(matches!(
            g.backward(x, &mut tape),
            Err(TensorError::NonScalarLoss((2, 2)))
        ));
    }

    #[test]
    fn dropout_is_identity_in_eval_mode() {
        let mut g = Graph::new();
        let x = g.input(Tensor2D::filled(2, 3, 1.5)).unwrap();
        let mut rng = rand::rng();
        let y = g.dropout(x, 0.25, &mut rng).unwrap();
        assert_eq!(x, y);
    }

    #[test]
    fn segment_pool_matches_manual_weighted_sum() {
        let mut g = Graph::new();
        let w = g.input(Tensor2D::column(&[0.25, 0.75, 1.0])).unwrap();
        let f = g
            .input(Tensor2D::new(3, 2, vec![1.0, 2.0, 3.0, 4.0, -1.0, 5.0]).unwrap())
            .unwrap();
        let segs = Segments::from_lengths(&[2, 1]).unwrap();
        let z = g.segment_pool(w, f, &segs).unwrap();
        assert_eq!(g.value(z).data(), &[2.5, 3.5, -1.0, 5.0]);
    }
}
