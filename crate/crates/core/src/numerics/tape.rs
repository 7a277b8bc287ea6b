use rand::Rng;

use super::{CsrMatrix, Tensor2};
use crate::error::{Error, Result};

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Whether stochastic layers (dropout) are active.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

enum Op<'g> {
    Leaf,
    Affine { x: Var, w: Var, b: Var },
    Propagate { adj: &'g CsrMatrix, x: Var },
    Relu(Var),
    Concat(Var, Var),
    Dropout { x: Var, mask: Vec<f64> },
    Gather { table: Var, idx: Vec<usize> },
    Msle { pred: Var, target: Vec<f64> },
}

struct Node<'g> {
    value: Tensor2,
    op: Op<'g>,
}

/// Record of primitive applications in forward order. [`Tape::backward`]
/// walks it in exact reverse.
#[derive(Default)]
pub struct Tape<'g> {
    nodes: Vec<Node<'g>>,
}

/// Adjoints of every recorded value with respect to one scalar output.
pub struct Gradients {
    grads: Vec<Option<Tensor2>>,
}

impl Gradients {
    /// `None` when `var` does not influence the output.
    pub fn get(&self, var: Var) -> Option<&Tensor2> {
        self.grads.get(var.0).and_then(Option::as_ref)
    }

    /// Gradient of `var`, or zeros of the given shape.
    pub fn get_or_zeros(&self, var: Var, rows: usize, cols: usize) -> Tensor2 {
        self.get(var)
            .cloned()
            .unwrap_or_else(|| Tensor2::zeros(rows, cols))
    }
}

/// Mean squared error between predictions in log1p space and
/// `log1p(max(0, target))`, with its gradient with respect to the predictions.
pub fn msle_loss(pred_log: &[f64], target_delta: &[f64]) -> Result<(f64, Vec<f64>)> {
    if pred_log.len() != target_delta.len() || pred_log.is_empty() {
        return Err(Error::Dimension(format!(
            "{} predictions for {} targets",
            pred_log.len(),
            target_delta.len()
        )));
    }
    let n = pred_log.len() as f64;
    let resid: Vec<f64> = pred_log
        .iter()
        .zip(target_delta)
        .map(|(p, t)| p - t.max(0.0).ln_1p())
        .collect();
    let loss = resid.iter().map(|r| r * r).sum::<f64>() / n;
    let grad = resid.iter().map(|r| 2.0 * r / n).collect();
    Ok((loss, grad))
}

impl<'g> Tape<'g> {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor2, op: Op<'g>) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    /// Records an input or parameter.
    pub fn leaf(&mut self, value: Tensor2) -> Var {
        self.push(value, Op::Leaf)
    }

    pub fn value(&self, var: Var) -> &Tensor2 {
        &self.nodes[var.0].value
    }

    /// `x · w + b`, with `b` a `1 × cols(w)` row broadcast over rows.
    pub fn affine(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let (xv, wv, bv) = (self.value(x), self.value(w), self.value(b));
        if bv.rows() != 1 || bv.cols() != wv.cols() {
            return Err(Error::Dimension(format!(
                "bias {}x{} for weights {}x{}",
                bv.rows(),
                bv.cols(),
                wv.rows(),
                wv.cols()
            )));
        }
        let mut y = xv.matmul(wv)?;
        let bias = bv.row(0).to_vec();
        for r in 0..y.rows() {
            for (o, b) in y.row_mut(r).iter_mut().zip(&bias) {
                *o += b;
            }
        }
        Ok(self.push(y, Op::Affine { x, w, b }))
    }

    /// `adj · x` for a constant sparse `adj`.
    pub fn propagate(&mut self, adj: &'g CsrMatrix, x: Var) -> Result<Var> {
        let y = adj.matmul(self.value(x))?;
        Ok(self.push(y, Op::Propagate { adj, x }))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let y = self.value(x).map(|v| v.max(0.0));
        self.push(y, Op::Relu(x))
    }

    /// Concatenation along the feature (column) axis.
    pub fn concat(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.rows() != bv.rows() {
            return Err(Error::Dimension(format!(
                "concat of {} and {} rows",
                av.rows(),
                bv.rows()
            )));
        }
        let cols = av.cols() + bv.cols();
        let mut data = Vec::with_capacity(av.rows() * cols);
        for r in 0..av.rows() {
            data.extend_from_slice(av.row(r));
            data.extend_from_slice(bv.row(r));
        }
        let y = Tensor2::new(av.rows(), cols, data)?;
        Ok(self.push(y, Op::Concat(a, b)))
    }

    /// Inverted dropout: in training mode each entry is zeroed with
    /// probability `rate` and survivors are scaled by `1 / (1 - rate)`.
    /// Evaluation mode returns `x` itself.
    pub fn dropout<R: Rng>(&mut self, x: Var, rate: f64, mode: Mode, rng: &mut R) -> Result<Var> {
        if !(0.0..1.0).contains(&rate) {
            return Err(Error::Config(format!("dropout rate {rate} outside [0, 1)")));
        }
        if mode == Mode::Eval || rate == 0.0 {
            return Ok(x);
        }
        let xv = self.value(x);
        let keep = 1.0 / (1.0 - rate);
        let mask: Vec<f64> = (0..xv.data().len())
            .map(|_| {
                if rng.random::<f64>() < rate {
                    0.0
                } else {
                    keep
                }
            })
            .collect();
        let data = xv.data().iter().zip(&mask).map(|(v, m)| v * m).collect();
        let y = Tensor2::new(xv.rows(), xv.cols(), data)?;
        Ok(self.push(y, Op::Dropout { x, mask }))
    }

    /// Rows `idx` of `table` (embedding lookup).
    pub fn gather(&mut self, table: Var, idx: &[usize]) -> Result<Var> {
        let tv = self.value(table);
        if let Some(&i) = idx.iter().find(|&&i| i >= tv.rows()) {
            return Err(Error::Dimension(format!(
                "row {i} of a {}-row table",
                tv.rows()
            )));
        }
        let data = idx
            .iter()
            .flat_map(|&i| tv.row(i).iter().copied())
            .collect();
        let y = Tensor2::new(idx.len(), tv.cols(), data)?;
        Ok(self.push(
            y,
            Op::Gather {
                table,
                idx: idx.to_vec(),
            },
        ))
    }

    /// Scalar MSLE between a column of log1p-space predictions and raw deltas.
    pub fn msle(&mut self, pred: Var, target_delta: &[f64]) -> Result<Var> {
        let pv = self.value(pred);
        if pv.cols() != 1 {
            return Err(Error::Dimension(format!(
                "prediction has {} columns",
                pv.cols()
            )));
        }
        let (loss, _) = msle_loss(pv.data(), target_delta)?;
        let target = target_delta.iter().map(|t| t.max(0.0)).collect();
        let y = Tensor2::new(1, 1, vec![loss])?;
        Ok(self.push(y, Op::Msle { pred, target }))
    }

    /// Reverse pass from a `1 × 1` output.
    pub fn backward(&self, output: Var) -> Result<Gradients> {
        if self.value(output).shape() != (1, 1) {
            return Err(Error::Dimension("backward from a non-scalar".into()));
        }
        let mut grads: Vec<Option<Tensor2>> = vec![None; self.nodes.len()];
        grads[output.0] = Some(Tensor2::new(1, 1, vec![1.0])?);

        fn accumulate(grads: &mut [Option<Tensor2>], var: Var, g: Tensor2) {
            match &mut grads[var.0] {
                Some(existing) => existing.add_assign(&g),
                slot => *slot = Some(g),
            }
        }

        for idx in (0..=output.0).rev() {
            let Some(dy) = grads[idx].take() else {
                continue;
            };
            let node = &self.nodes[idx];
            match &node.op {
                Op::Leaf => {}
                Op::Affine { x, w, b } => {
                    let dx = dy.matmul_t(self.value(*w))?;
                    let dw = self.value(*x).t_matmul(&dy)?;
                    let mut db = Tensor2::zeros(1, dy.cols());
                    for r in 0..dy.rows() {
                        for (d, g) in db.row_mut(0).iter_mut().zip(dy.row(r)) {
                            *d += g;
                        }
                    }
                    accumulate(&mut grads, *x, dx);
                    accumulate(&mut grads, *w, dw);
                    accumulate(&mut grads, *b, db);
                }
                Op::Propagate { adj, x } => {
                    accumulate(&mut grads, *x, adj.t_matmul(&dy)?);
                }
                Op::Relu(x) => {
                    let out = &node.value;
                    let data = dy
                        .data()
                        .iter()
                        .zip(out.data())
                        .map(|(g, y)| if *y > 0.0 { *g } else { 0.0 })
                        .collect();
                    accumulate(&mut grads, *x, Tensor2::new(dy.rows(), dy.cols(), data)?);
                }
                Op::Concat(a, b) => {
                    let ac = self.value(*a).cols();
                    let bc = self.value(*b).cols();
                    let mut da = Vec::with_capacity(dy.rows() * ac);
                    let mut db = Vec::with_capacity(dy.rows() * bc);
                    for r in 0..dy.rows() {
                        da.extend_from_slice(&dy.row(r)[..ac]);
                        db.extend_from_slice(&dy.row(r)[ac..]);
                    }
                    accumulate(&mut grads, *a, Tensor2::new(dy.rows(), ac, da)?);
                    accumulate(&mut grads, *b, Tensor2::new(dy.rows(), bc, db)?);
                }
                Op::Dropout { x, mask } => {
                    let data = dy.data().iter().zip(mask).map(|(g, m)| g * m).collect();
                    accumulate(&mut grads, *x, Tensor2::new(dy.rows(), dy.cols(), data)?);
                }
                Op::Gather { table, idx } => {
                    let tv = self.value(*table);
                    let mut dt = Tensor2::zeros(tv.rows(), tv.cols());
                    for (r, &i) in idx.iter().enumerate() {
                        for (d, g) in dt.row_mut(i).iter_mut().zip(dy.row(r)) {
                            *d += g;
                        }
                    }
                    accumulate(&mut grads, *table, dt);
                }
                Op::Msle { pred, target } => {
                    let (_, g) = msle_loss(self.value(*pred).data(), target)?;
                    let scale = dy.get(0, 0);
                    let g: Vec<f64> = g.into_iter().map(|v| v * scale).collect();
                    accumulate(&mut grads, *pred, Tensor2::new(g.len(), 1, g)?);
                }
            }
            grads[idx] = Some(dy);
        }
        Ok(Gradients { grads })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn t(rows: &[Vec<f64>]) -> Tensor2 {
        Tensor2::from_rows(rows).unwrap()
    }

    #[test]
    fn affine_identity_and_arithmetic() {
        let mut tape = Tape::new();
        let x = tape.leaf(t(&[vec![1.0, 0.0]]));
        let w = tape.leaf(t(&[vec![1.0, 0.0], vec![0.0, 1.0]]));
        let b = tape.leaf(Tensor2::zeros(1, 2));
        let y = tape.affine(x, w, b).unwrap();
        assert_eq!(tape.value(y).row(0), &[1.0, 0.0]);

        let x = tape.leaf(t(&[vec![1.0, 2.0]]));
        let w = tape.leaf(t(&[vec![1.0], vec![1.0]]));
        let b = tape.leaf(t(&[vec![3.0]]));
        let y = tape.affine(x, w, b).unwrap();
        assert_eq!(tape.value(y).data(), &[6.0]);

        let bad = tape.leaf(Tensor2::zeros(3, 1));
        assert!(matches!(tape.affine(x, bad, b), Err(Error::Dimension(_))));
        let wide_bias = tape.leaf(Tensor2::zeros(1, 2));
        assert!(tape.affine(x, w, wide_bias).is_err());
    }

    #[test]
    fn relu_concat_dropout_definitions() {
        let mut tape = Tape::new();
        let x = tape.leaf(t(&[vec![-1.0, 2.0]]));
        let r = tape.relu(x);
        assert_eq!(tape.value(r).row(0), &[0.0, 2.0]);

        let a = tape.leaf(t(&[vec![1.0]]));
        let b = tape.leaf(t(&[vec![2.0]]));
        let c = tape.concat(a, b).unwrap();
        assert_eq!(tape.value(c).row(0), &[1.0, 2.0]);

        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let d = tape.dropout(x, 0.5, Mode::Eval, &mut rng).unwrap();
        assert_eq!(d, x);
        assert!(tape.dropout(x, 1.0, Mode::Train, &mut rng).is_err());
        assert!(tape.dropout(x, -0.1, Mode::Train, &mut rng).is_err());
        let d = tape.dropout(x, 0.5, Mode::Train, &mut rng).unwrap();
        assert!(tape
            .value(d)
            .data()
            .iter()
            .zip([-1.0, 2.0])
            .all(|(v, x)| *v == 0.0 || *v == 2.0 * x));
    }

    #[test]
    fn msle_values() {
        let (l, _) = msle_loss(&[3f64.ln_1p()], &[3.0]).unwrap();
        assert_eq!(l, 0.0);
        let (l, g) = msle_loss(&[0.0], &[std::f64::consts::E - 1.0]).unwrap();
        assert!((l - 1.0).abs() < 1e-15);
        assert!((g[0] + 2.0).abs() < 1e-15);
        // negative targets clamp to zero
        let (l, _) = msle_loss(&[0.0], &[-5.0]).unwrap();
        assert_eq!(l, 0.0);
        assert!(msle_loss(&[0.0], &[]).is_err());
    }

    #[test]
    fn gather_accumulates_repeated_rows() {
        let mut tape = Tape::new();
        let table = tape.leaf(t(&[vec![1.0, 2.0], vec![3.0, 4.0]]));
        let g = tape.gather(table, &[1, 1, 0]).unwrap();
        assert_eq!(tape.value(g).row(1), &[3.0, 4.0]);
        let w = tape.leaf(t(&[vec![1.0], vec![1.0]]));
        let b = tape.leaf(Tensor2::zeros(1, 1));
        let p = tape.affine(g, w, b).unwrap();
        let loss = tape.msle(p, &[0.0, 0.0, 0.0]).unwrap();
        let grads = tape.backward(loss).unwrap();
        let dt = grads.get(table).unwrap();
        // dL/dp_r = 2 p_r / 3, p = [7, 7, 3]
        assert!((dt.get(1, 0) - 2.0 * 14.0 / 3.0).abs() < 1e-12);
        assert!((dt.get(0, 1) - 2.0 * 3.0 / 3.0).abs() < 1e-12);
        assert!(tape.gather(table, &[2]).is_err());
    }
}
