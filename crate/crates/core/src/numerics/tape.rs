//! Reverse-mode differentiation over a linear record of operations.

use super::ops::{selu_derivative, selu_scalar, sigmoid, softplus};
use super::params::ParamStore;
use super::tensor::{matmul, matmul_a_bt, matmul_at_b, Tensor};
use crate::error::{Error, Result};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    Input,
    Param(String),
    MatMul(Var, Var),
    AddBias(Var, Var),
    Add(Var, Var),
    Selu(Var),
    Scale(Var, f64),
    Sigmoid(Var),
    Sum(Var),
    /// Output row `i` is the elementwise max over `src` rows in group `i`.
    /// `winners[i * d + j]` is the source row that won column `j`.
    SegmentMax {
        src: Var,
        winners: Vec<Option<usize>>,
    },
    L2NormalizeRows(Var),
    /// Logit per `(row of a, row of b)` pair.
    PairDot {
        a: Var,
        b: Var,
        pairs: Vec<(usize, usize)>,
    },
    /// Summed binary cross entropy over a vector of logits.
    BceWithLogits {
        logits: Var,
        labels: Vec<f64>,
    },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
}

/// Records a forward computation so that [`Tape::backward`] can replay it.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradients of a scalar with respect to every recorded value.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, var: Var) -> Option<&Tensor> {
        self.grads.get(var.0).and_then(Option::as_ref)
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, var: Var) -> &Tensor {
        &self.nodes[var.0].value
    }

    fn push(&mut self, value: Tensor, op: Op, name: &str) -> Result<Var> {
        let value = value.ensure_finite(name)?;
        self.nodes.push(Node { value, op });
        Ok(Var(self.nodes.len() - 1))
    }

    pub fn input(&mut self, value: Tensor) -> Result<Var> {
        self.push(value, Op::Input, "input")
    }

    pub fn param(&mut self, store: &ParamStore, name: &str) -> Result<Var> {
        let value = store.get(name)?.clone();
        self.push(value, Op::Param(name.to_string()), name)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (n, k) = self.value(a).dims2();
        let (k2, m) = self.value(b).dims2();
        if k != k2 {
            return Err(Error::invalid(format!(
                "matmul: {:?} · {:?}",
                self.value(a).shape(),
                self.value(b).shape()
            )));
        }
        let out = matmul(self.value(a).values(), self.value(b).values(), n, k, m);
        self.push(Tensor::matrix(n, m, out)?, Op::MatMul(a, b), "matmul")
    }

    /// Adds a length-d vector to every row of an n×d matrix.
    pub fn add_bias(&mut self, a: Var, bias: Var) -> Result<Var> {
        let (n, d) = self.value(a).dims2();
        let b = self.value(bias);
        if b.len() != d {
            return Err(Error::invalid(format!("add_bias: bias {} vs width {d}", b.len())));
        }
        let mut out = self.value(a).values().to_vec();
        for row in out.chunks_mut(d) {
            for (o, v) in row.iter_mut().zip(b.values()) {
                *o += v;
            }
        }
        self.push(Tensor::matrix(n, d, out)?, Op::AddBias(a, bias), "add_bias")
    }

    /// `input · weight + bias`.
    pub fn linear(&mut self, input: Var, weight: Var, bias: Var) -> Result<Var> {
        let prod = self.matmul(input, weight)?;
        self.add_bias(prod, bias)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (x, y) = (self.value(a), self.value(b));
        if x.shape() != y.shape() {
            return Err(Error::invalid(format!("add: {:?} + {:?}", x.shape(), y.shape())));
        }
        let out: Vec<f64> = x.values().iter().zip(y.values()).map(|(p, q)| p + q).collect();
        let shape = x.shape().to_vec();
        self.push(Tensor::new(shape, out)?, Op::Add(a, b), "add")
    }

    pub fn selu(&mut self, a: Var) -> Result<Var> {
        let out = self.value(a).map(selu_scalar);
        self.push(out, Op::Selu(a), "selu")
    }

    pub fn scale(&mut self, a: Var, factor: f64) -> Result<Var> {
        let out = self.value(a).map(|v| v * factor);
        self.push(out, Op::Scale(a, factor), "scale")
    }

    pub fn sigmoid(&mut self, a: Var) -> Result<Var> {
        let out = self.value(a).map(sigmoid);
        self.push(out, Op::Sigmoid(a), "sigmoid")
    }

    /// Sum of all entries as a scalar.
    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let total = self.value(a).values().iter().sum();
        self.push(Tensor::scalar(total), Op::Sum(a), "sum")
    }

    /// Max-pools rows of `src` into one output row per group. Empty groups
    /// produce a zero row. Ties go to the earliest row in the group.
    pub fn segment_max(&mut self, src: Var, groups: &[Vec<usize>]) -> Result<Var> {
        let (rows, d) = self.value(src).dims2();
        let values = self.value(src).values();
        let mut out = vec![0.0; groups.len() * d];
        let mut winners = vec![None; groups.len() * d];
        for (g, members) in groups.iter().enumerate() {
            let Some((&first, rest)) = members.split_first() else {
                continue;
            };
            if let Some(&bad) = members.iter().find(|&&r| r >= rows) {
                return Err(Error::invalid(format!("segment_max: row {bad} out of {rows}")));
            }
            let dst = &mut out[g * d..(g + 1) * d];
            let win = &mut winners[g * d..(g + 1) * d];
            dst.copy_from_slice(&values[first * d..(first + 1) * d]);
            win.fill(Some(first));
            for &r in rest {
                for (j, &v) in values[r * d..(r + 1) * d].iter().enumerate() {
                    if v > dst[j] {
                        dst[j] = v;
                        win[j] = Some(r);
                    }
                }
            }
        }
        let t = Tensor::matrix(groups.len(), d, out)?;
        self.push(t, Op::SegmentMax { src, winners }, "segment_max")
    }

    pub fn l2_normalize_rows(&mut self, a: Var) -> Result<Var> {
        let x = self.value(a);
        let (n, d) = x.dims2();
        let mut out = x.values().to_vec();
        for row in out.chunks_mut(d) {
            let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
            if norm > 0.0 {
                row.iter_mut().for_each(|v| *v /= norm);
            }
        }
        self.push(Tensor::matrix(n, d, out)?, Op::L2NormalizeRows(a), "l2_normalize")
    }

    /// Inner products `a[i] · b[j]` for each `(i, j)`, as a vector.
    pub fn pair_dot(&mut self, a: Var, b: Var, pairs: &[(usize, usize)]) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.cols() != tb.cols() {
            return Err(Error::invalid("pair_dot: width mismatch"));
        }
        let (ra, rb) = (ta.rows(), tb.rows());
        let mut out = Vec::with_capacity(pairs.len());
        for &(i, j) in pairs {
            if i >= ra || j >= rb {
                return Err(Error::invalid(format!("pair_dot: pair ({i}, {j}) out of range")));
            }
            out.push(ta.row(i).iter().zip(tb.row(j)).map(|(x, y)| x * y).sum());
        }
        self.push(
            Tensor::vector(out),
            Op::PairDot {
                a,
                b,
                pairs: pairs.to_vec(),
            },
            "pair_dot",
        )
    }

    /// Sum of binary cross entropy over logits with {0,1} labels.
    pub fn bce_with_logits(&mut self, logits: Var, labels: &[f64]) -> Result<Var> {
        let z = self.value(logits);
        if z.len() != labels.len() {
            return Err(Error::invalid("bce: label count mismatch"));
        }
        let loss: f64 = z
            .values()
            .iter()
            .zip(labels)
            .map(|(&zi, &y)| softplus(zi) - y * zi)
            .sum();
        self.push(
            Tensor::scalar(loss),
            Op::BceWithLogits {
                logits,
                labels: labels.to_vec(),
            },
            "bce",
        )
    }

    /// Exact reverse-mode gradients of the scalar at `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if self.nodes.is_empty() || loss.0 >= self.nodes.len() {
            return Err(Error::State("backward called before any forward computation"));
        }
        if self.value(loss).len() != 1 {
            return Err(Error::State("backward needs a scalar loss"));
        }
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::new(self.value(loss).shape().to_vec(), vec![1.0])?);

        for idx in (0..=loss.0).rev() {
            let Some(upstream) = grads[idx].take() else {
                continue;
            };
            let node = &self.nodes[idx];
            let g = upstream.values();
            match &node.op {
                Op::Input | Op::Param(_) => {}
                Op::MatMul(a, b) => {
                    let (n, k) = self.value(*a).dims2();
                    let m = self.value(*b).cols();
                    let ga = matmul_a_bt(g, self.value(*b).values(), n, m, k);
                    let gb = matmul_at_b(self.value(*a).values(), g, n, k, m);
                    accumulate(&mut grads, *a, self.value(*a), ga);
                    accumulate(&mut grads, *b, self.value(*b), gb);
                }
                Op::AddBias(a, bias) => {
                    let d = self.value(*bias).len();
                    let mut gb = vec![0.0; d];
                    for row in g.chunks(d) {
                        for (acc, v) in gb.iter_mut().zip(row) {
                            *acc += v;
                        }
                    }
                    accumulate(&mut grads, *a, self.value(*a), g.to_vec());
                    accumulate(&mut grads, *bias, self.value(*bias), gb);
                }
                Op::Add(a, b) => {
                    accumulate(&mut grads, *a, self.value(*a), g.to_vec());
                    accumulate(&mut grads, *b, self.value(*b), g.to_vec());
                }
                Op::Selu(a) => {
                    let x = self.value(*a).values();
                    let ga = x.iter().zip(g).map(|(&xi, &gi)| gi * selu_derivative(xi)).collect();
                    accumulate(&mut grads, *a, self.value(*a), ga);
                }
                Op::Scale(a, f) => {
                    let ga = g.iter().map(|v| v * f).collect();
                    accumulate(&mut grads, *a, self.value(*a), ga);
                }
                Op::Sigmoid(a) => {
                    let y = node.value.values();
                    let ga = y.iter().zip(g).map(|(&yi, &gi)| gi * yi * (1.0 - yi)).collect();
                    accumulate(&mut grads, *a, self.value(*a), ga);
                }
                Op::Sum(a) => {
                    let ga = vec![g[0]; self.value(*a).len()];
                    accumulate(&mut grads, *a, self.value(*a), ga);
                }
                Op::SegmentMax { src, winners } => {
                    let d = self.value(*src).cols();
                    let mut gs = vec![0.0; self.value(*src).len()];
                    for (pos, winner) in winners.iter().enumerate() {
                        if let Some(r) = winner {
                            gs[r * d + pos % d] += g[pos];
                        }
                    }
                    accumulate(&mut grads, *src, self.value(*src), gs);
                }
                Op::L2NormalizeRows(a) => {
                    let x = self.value(*a);
                    let y = node.value.values();
                    let d = x.cols();
                    let mut ga = vec![0.0; x.len()];
                    for r in 0..x.rows() {
                        let xr = x.row(r);
                        let norm = xr.iter().map(|v| v * v).sum::<f64>().sqrt();
                        if norm == 0.0 {
                            continue;
                        }
                        let yr = &y[r * d..(r + 1) * d];
                        let gr = &g[r * d..(r + 1) * d];
                        let dot: f64 = yr.iter().zip(gr).map(|(p, q)| p * q).sum();
                        for j in 0..d {
                            ga[r * d + j] = (gr[j] - yr[j] * dot) / norm;
                        }
                    }
                    accumulate(&mut grads, *a, x, ga);
                }
                Op::PairDot { a, b, pairs } => {
                    let (ta, tb) = (self.value(*a), self.value(*b));
                    let d = ta.cols();
                    let mut ga = vec![0.0; ta.len()];
                    let mut gb = vec![0.0; tb.len()];
                    for (&(i, j), &gi) in pairs.iter().zip(g) {
                        for c in 0..d {
                            ga[i * d + c] += gi * tb.values()[j * d + c];
                            gb[j * d + c] += gi * ta.values()[i * d + c];
                        }
                    }
                    accumulate(&mut grads, *a, ta, ga);
                    accumulate(&mut grads, *b, tb, gb);
                }
                Op::BceWithLogits { logits, labels } => {
                    let z = self.value(*logits);
                    let ga = z
                        .values()
                        .iter()
                        .zip(labels)
                        .map(|(&zi, &y)| g[0] * (sigmoid(zi) - y))
                        .collect();
                    accumulate(&mut grads, *logits, z, ga);
                }
            }
            grads[idx] = Some(upstream);
        }
        Ok(Gradients { grads })
    }

    /// Runs [`Tape::backward`] and adds parameter gradients into `store`.
    pub fn backward_into(&self, loss: Var, store: &mut ParamStore) -> Result<Gradients> {
        let grads = self.backward(loss)?;
        for (idx, node) in self.nodes.iter().enumerate() {
            if let (Op::Param(name), Some(g)) = (&node.op, &grads.grads[idx]) {
                if !g.is_finite() {
                    return Err(Error::Numeric(format!("gradient of {name}")));
                }
                store.accumulate_grad(name, g)?;
            }
        }
        Ok(grads)
    }
}

fn accumulate(grads: &mut [Option<Tensor>], var: Var, like: &Tensor, delta: Vec<f64>) {
    match &mut grads[var.0] {
        Some(existing) => {
            for (e, d) in existing.values_mut().iter_mut().zip(delta) {
                *e += d;
            }
        }
        slot @ None => {
            *slot = Some(Tensor::new(like.shape().to_vec(), delta).expect("gradient shape mirrors value"));
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Tensor {
        let v = (0..rows * cols).map(|_| rng.random_range(-1.0..1.0)).collect();
        Tensor::matrix(rows, cols, v).unwrap()
    }

    /// Central-difference check of d(loss)/d(input) for a closure that
    /// builds the loss from a single input tensor.
    fn check_input_gradient(x: Tensor, build: impl Fn(&mut Tape, Var) -> Var) {
        let mut tape = Tape::new();
        let xv = tape.input(x.clone()).unwrap();
        let loss = build(&mut tape, xv);
        let grads = tape.backward(loss).unwrap();
        let analytic = grads.get(xv).unwrap().clone();
        let eval = |t: Tensor| {
            let mut tape = Tape::new();
            let v = tape.input(t).unwrap();
            let l = build(&mut tape, v);
            tape.value(l).values()[0]
        };
        let h = 1e-5;
        for i in 0..x.len() {
            let mut plus = x.clone();
            plus.values_mut()[i] += h;
            let mut minus = x.clone();
            minus.values_mut()[i] -= h;
            let numeric = (eval(plus) - eval(minus)) / (2.0 * h);
            let a = analytic.values()[i];
            let scale = a.abs().max(numeric.abs()).max(1e-6);
            assert!(
                (a - numeric).abs() / scale < 1e-4,
                "coordinate {i}: analytic {a} vs numeric {numeric}"
            );
        }
    }

    #[test]
    fn sigmoid_slope_at_zero() {
        let mut tape = Tape::new();
        let x = tape.input(Tensor::vector(vec![0.0])).unwrap();
        let y = tape.sigmoid(x).unwrap();
        let g = tape.backward(y).unwrap();
        assert_eq!(g.get(x).unwrap().values(), &[0.25]);
    }

    #[test]
    fn bce_gradient_is_probability_minus_label() {
        let mut tape = Tape::new();
        let z = tape.input(Tensor::vector(vec![0.0, 2.0])).unwrap();
        let loss = tape.bce_with_logits(z, &[0.0, 1.0]).unwrap();
        let g = tape.backward(loss).unwrap();
        let gz = g.get(z).unwrap().values();
        assert!((gz[0] - 0.5).abs() < 1e-15);
        assert!((gz[1] - (sigmoid(2.0) - 1.0)).abs() < 1e-15);
    }

    #[test]
    fn matmul_bias_selu_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let w = random(&mut rng, 4, 3);
        let b = random(&mut rng, 1, 3).reshape(vec![3]).unwrap();
        let x = random(&mut rng, 5, 4);
        check_input_gradient(x, |tape, xv| {
            let wv = tape.input(w.clone()).unwrap();
            let bv = tape.input(b.clone()).unwrap();
            let h = tape.linear(xv, wv, bv).unwrap();
            let s = tape.selu(h).unwrap();
            let logits = tape.pair_dot(s, s, &[(0, 1), (2, 4), (3, 3)]).unwrap();
            tape.bce_with_logits(logits, &[1.0, 0.0, 1.0]).unwrap()
        });
    }

    #[test]
    fn segment_max_gradient_routes_to_winner() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let x = random(&mut rng, 6, 4);
        let groups = vec![vec![0, 2, 5], vec![], vec![1, 3], vec![4]];
        check_input_gradient(x, |tape, xv| {
            let m = tape.segment_max(xv, &groups).unwrap();
            let s = tape.scale(m, 3.0).unwrap();
            let logits = tape.pair_dot(s, s, &[(0, 2), (1, 3), (3, 0)]).unwrap();
            tape.bce_with_logits(logits, &[0.0, 1.0, 1.0]).unwrap()
        });
    }

    #[test]
    fn segment_max_ties_pick_first_member() {
        let mut tape = Tape::new();
        let x = tape
            .input(Tensor::matrix(2, 2, vec![1.0, 2.0, 1.0, 0.0]).unwrap())
            .unwrap();
        let m = tape.segment_max(x, &[vec![0, 1]]).unwrap();
        let loss_in = tape.pair_dot(m, m, &[(0, 0)]).unwrap();
        let loss = tape.bce_with_logits(loss_in, &[1.0]).unwrap();
        let g = tape.backward(loss).unwrap();
        let gx = g.get(x).unwrap().values();
        assert_ne!(gx[0], 0.0);
        assert_eq!(gx[2], 0.0);
    }

    #[test]
    fn l2_normalize_gradient() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let x = random(&mut rng, 3, 4);
        check_input_gradient(x, |tape, xv| {
            let n = tape.l2_normalize_rows(xv).unwrap();
            let s = tape.scale(n, 2.5).unwrap();
            let logits = tape.pair_dot(s, s, &[(0, 1), (1, 2)]).unwrap();
            tape.bce_with_logits(logits, &[1.0, 0.0]).unwrap()
        });
    }

    #[test]
    fn zero_scorer_weights_give_zero_embedding_gradient() {
        let mut tape = Tape::new();
        let emb = tape
            .input(Tensor::matrix(2, 3, vec![0.3, -1.0, 2.0, 0.5, 0.1, -0.7]).unwrap())
            .unwrap();
        let zero_w = tape.input(Tensor::zeros(&[3, 3])).unwrap();
        let projected = tape.matmul(emb, zero_w).unwrap();
        let logits = tape.pair_dot(projected, projected, &[(0, 1)]).unwrap();
        let loss = tape.bce_with_logits(logits, &[1.0]).unwrap();
        let g = tape.backward(loss).unwrap();
        assert!(g.get(emb).unwrap().values().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn backward_on_empty_tape_is_state_error() {
        let tape = Tape::new();
        assert!(matches!(tape.backward(Var(0)), Err(Error::State(_))));
    }

    #[test]
    fn non_finite_forward_is_rejected() {
        let mut tape = Tape::new();
        assert!(tape.input(Tensor::vector(vec![f64::NAN])).unwrap_err().is_numeric());
        let big = tape.input(Tensor::vector(vec![1e300])).unwrap();
        assert!(tape.scale(big, 1e10).unwrap_err().is_numeric());
    }
}
