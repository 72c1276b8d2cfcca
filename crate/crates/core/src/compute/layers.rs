//! The network layers built from tape primitives.

use rand::Rng;

use super::params::{ParamId, ParamStore};
use super::tape::{Tape, Var};
use crate::error::{Error, Result};

/// Dense layer `x·W + b`.
#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
}

impl Linear {
    pub fn register<R: Rng>(
        store: &mut ParamStore,
        prefix: &str,
        fan_in: usize,
        fan_out: usize,
        rng: &mut R,
    ) -> Result<Self> {
        Ok(Self {
            weight: store.add_xavier(format!("{prefix}.weight"), fan_in, fan_out, rng)?,
            bias: store.add_constant(format!("{prefix}.bias"), 1, fan_out, 0.0)?,
        })
    }

    pub fn forward(&self, tape: &mut Tape, x: Var) -> Result<Var> {
        let w = tape.param(self.weight);
        let b = tape.param(self.bias);
        let y = tape.matmul(x, w)?;
        tape.add_bias(y, b)
    }
}

/// One-dimensional convolution over a token sequence: window `k`, stride 1.
/// The filter bank is stored as a `(k·D) × F` matrix.
#[derive(Clone, Debug)]
pub struct Conv1d {
    pub window: usize,
    pub filters: Linear,
}

impl Conv1d {
    pub fn register<R: Rng>(
        store: &mut ParamStore,
        prefix: &str,
        window: usize,
        input_dim: usize,
        filters: usize,
        rng: &mut R,
    ) -> Result<Self> {
        Ok(Self {
            window,
            filters: Linear::register(store, prefix, window * input_dim, filters, rng)?,
        })
    }

    /// `n × D` in, `(n − k + 1) × F` out.
    pub fn forward(&self, tape: &mut Tape, x: Var) -> Result<Var> {
        let windows = tape.unfold(x, self.window)?;
        let y = self.filters.forward(tape, windows)?;
        tape.check_finite(y, "conv1d")
    }
}

#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
}

impl LayerNorm {
    pub fn register(store: &mut ParamStore, prefix: &str, dim: usize) -> Result<Self> {
        Ok(Self {
            gamma: store.add_constant(format!("{prefix}.gamma"), 1, dim, 1.0)?,
            beta: store.add_constant(format!("{prefix}.beta"), 1, dim, 0.0)?,
        })
    }

    pub fn forward(&self, tape: &mut Tape, x: Var) -> Result<Var> {
        let g = tape.param(self.gamma);
        let b = tape.param(self.beta);
        tape.layer_norm(x, g, b)
    }
}

/// Multi-head self-attention sublayer: `LayerNorm(x + Attention(x))`.
#[derive(Clone, Debug)]
pub struct SelfAttention {
    pub heads: usize,
    pub query: Linear,
    pub key: Linear,
    pub value: Linear,
    pub output: Linear,
    pub norm: LayerNorm,
}

impl SelfAttention {
    pub fn register<R: Rng>(
        store: &mut ParamStore,
        prefix: &str,
        dim: usize,
        heads: usize,
        rng: &mut R,
    ) -> Result<Self> {
        if heads == 0 || dim % heads != 0 {
            return Err(Error::Config(format!(
                "hidden dimension {dim} is not divisible by {heads} heads"
            )));
        }
        Ok(Self {
            heads,
            query: Linear::register(store, &format!("{prefix}.query"), dim, dim, rng)?,
            key: Linear::register(store, &format!("{prefix}.key"), dim, dim, rng)?,
            value: Linear::register(store, &format!("{prefix}.value"), dim, dim, rng)?,
            output: Linear::register(store, &format!("{prefix}.output"), dim, dim, rng)?,
            norm: LayerNorm::register(store, &format!("{prefix}.norm"), dim)?,
        })
    }

    pub fn forward(&self, tape: &mut Tape, x: Var, dropout: f64) -> Result<Var> {
        let dim = tape.value(x).cols();
        if dim % self.heads != 0 {
            return Err(Error::Config(format!(
                "hidden dimension {dim} is not divisible by {} heads",
                self.heads
            )));
        }
        let head_dim = dim / self.heads;
        let q = self.query.forward(tape, x)?;
        let k = self.key.forward(tape, x)?;
        let v = self.value.forward(tape, x)?;
        let scale = 1.0 / (head_dim as f64).sqrt();

        let mut head_outputs = Vec::with_capacity(self.heads);
        for h in 0..self.heads {
            let (lo, hi) = (h * head_dim, (h + 1) * head_dim);
            let qh = tape.slice_cols(q, lo, hi)?;
            let kh = tape.slice_cols(k, lo, hi)?;
            let vh = tape.slice_cols(v, lo, hi)?;
            let kt = tape.transpose(kh);
            let scores = tape.matmul(qh, kt)?;
            let scores = tape.scale(scores, scale);
            let weights = tape.softmax_rows(scores);
            head_outputs.push(tape.matmul(weights, vh)?);
        }
        let joined = tape.concat_cols(&head_outputs)?;
        let attended = self.output.forward(tape, joined)?;
        let attended = tape.dropout(attended, dropout);
        let residual = tape.add(x, attended)?;
        let out = self.norm.forward(tape, residual)?;
        tape.check_finite(out, "self-attention")
    }
}

/// Encoder block: self-attention sublayer followed by a position-wise
/// feedforward sublayer, each with residual connection and layer norm.
#[derive(Clone, Debug)]
pub struct TransformerBlock {
    pub attention: SelfAttention,
    pub inner: Linear,
    pub outer: Linear,
    pub norm: LayerNorm,
}

impl TransformerBlock {
    pub fn register<R: Rng>(
        store: &mut ParamStore,
        prefix: &str,
        dim: usize,
        heads: usize,
        ffn_dim: usize,
        rng: &mut R,
    ) -> Result<Self> {
        Ok(Self {
            attention: SelfAttention::register(store, &format!("{prefix}.attention"), dim, heads, rng)?,
            inner: Linear::register(store, &format!("{prefix}.ffn.inner"), dim, ffn_dim, rng)?,
            outer: Linear::register(store, &format!("{prefix}.ffn.outer"), ffn_dim, dim, rng)?,
            norm: LayerNorm::register(store, &format!("{prefix}.ffn.norm"), dim)?,
        })
    }

    pub fn forward(&self, tape: &mut Tape, x: Var, dropout: f64) -> Result<Var> {
        let y = self.attention.forward(tape, x, dropout)?;
        let h = self.inner.forward(tape, y)?;
        let h = tape.relu(h);
        let h = self.outer.forward(tape, h)?;
        let h = tape.dropout(h, dropout);
        let residual = tape.add(y, h)?;
        let out = self.norm.forward(tape, residual)?;
        tape.check_finite(out, "transformer block")
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::compute::gradcheck::{finite_difference_check, CheckOptions};
    use crate::compute::Tensor;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn random_input(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Tensor {
        let data = (0..rows * cols).map(|_| rng.gen_range(-1.0..1.0)).collect();
        Tensor::matrix(rows, cols, data).unwrap()
    }

    #[test]
    fn conv_output_shape() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut store = ParamStore::new();
        let conv = Conv1d::register(&mut store, "conv", 3, 5, 8, &mut rng).unwrap();
        let mut tape = Tape::new(&store);
        let x = tape.constant(random_input(&mut rng, 10, 5));
        let y = conv.forward(&mut tape, x).unwrap();
        assert_eq!(tape.value(y).shape(), &[8, 8]);
    }

    #[test]
    fn conv_with_zero_filters_is_zero() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut store = ParamStore::new();
        let conv = Conv1d::register(&mut store, "conv", 2, 4, 6, &mut rng).unwrap();
        store.get_mut(conv.filters.weight).value.fill(0.0);
        let mut tape = Tape::new(&store);
        let x = tape.constant(random_input(&mut rng, 7, 4));
        let y = conv.forward(&mut tape, x).unwrap();
        assert!(tape.value(y).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn conv_rejects_short_sequence() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut store = ParamStore::new();
        let conv = Conv1d::register(&mut store, "conv", 4, 2, 2, &mut rng).unwrap();
        let mut tape = Tape::new(&store);
        let x = tape.constant(random_input(&mut rng, 3, 2));
        assert!(matches!(
            conv.forward(&mut tape, x),
            Err(Error::EmptyOutput { len: 3, window: 4 })
        ));
    }

    #[test]
    fn conv_output_row_depends_only_on_its_window() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let mut store = ParamStore::new();
        let conv = Conv1d::register(&mut store, "conv", 3, 2, 3, &mut rng).unwrap();
        let base = random_input(&mut rng, 8, 2);
        let mut changed = base.clone();
        changed.data_mut()[7 * 2] += 1.0; // row 7 only feeds output rows 5
        let run = |t: Tensor| {
            let mut tape = Tape::new(&store);
            let x = tape.constant(t);
            let y = conv.forward(&mut tape, x).unwrap();
            tape.value(y).clone()
        };
        let (a, b) = (run(base), run(changed));
        for r in 0..6 {
            let same = a.row(r) == b.row(r);
            assert_eq!(same, r < 5, "row {r}");
        }
    }

    #[test]
    fn heads_must_divide_width() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let mut store = ParamStore::new();
        assert!(matches!(
            SelfAttention::register(&mut store, "attn", 10, 3, &mut rng),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn zero_value_projection_reduces_to_layer_norm() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let mut store = ParamStore::new();
        let attn = SelfAttention::register(&mut store, "attn", 8, 2, &mut rng).unwrap();
        store.get_mut(attn.value.weight).value.fill(0.0);
        let input = random_input(&mut rng, 4, 8);
        let mut tape = Tape::new(&store);
        let x = tape.constant(input.clone());
        let y = attn.forward(&mut tape, x, 0.0).unwrap();
        for r in 0..4 {
            let row = input.row(r);
            let mean = row.iter().sum::<f64>() / 8.0;
            let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 8.0;
            for (c, v) in row.iter().enumerate() {
                let expected = (v - mean) / (var + crate::compute::LAYER_NORM_EPS).sqrt();
                assert!((tape.value(y).row(r)[c] - expected).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn attention_is_permutation_equivariant() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let mut store = ParamStore::new();
        let block = TransformerBlock::register(&mut store, "block", 8, 2, 16, &mut rng).unwrap();
        let input = random_input(&mut rng, 5, 8);
        let perm = [3usize, 0, 4, 1, 2];
        let permuted =
            Tensor::from_rows(&perm.iter().map(|&r| input.row(r).to_vec()).collect::<Vec<_>>()).unwrap();
        let run = |t: Tensor| {
            let mut tape = Tape::new(&store);
            let x = tape.constant(t);
            let y = block.forward(&mut tape, x, 0.0).unwrap();
            tape.value(y).clone()
        };
        let (a, b) = (run(input), run(permuted));
        for (i, &r) in perm.iter().enumerate() {
            for (x, y) in b.row(i).iter().zip(a.row(r)) {
                assert!((x - y).abs() < 1e-12);
            }
        }
    }

    struct LayerObjective<F> {
        build: F,
    }

    impl<F> crate::compute::Objective for LayerObjective<F>
    where
        F: Fn(&mut Tape) -> Result<Var>,
    {
        fn loss(&mut self, store: &ParamStore) -> Result<f64> {
            let mut tape = Tape::new(store);
            let out = (self.build)(&mut tape)?;
            Ok(tape.value(out).data()[0])
        }

        fn gradient(&mut self, store: &ParamStore) -> Result<(f64, crate::compute::Gradients)> {
            let mut tape = Tape::new(store);
            let out = (self.build)(&mut tape)?;
            Ok((tape.value(out).data()[0], tape.backward(out)?))
        }
    }

    /// Reduces `y` to the scalar `r · y · c` with fixed random `r` and `c`,
    /// so every output coordinate contributes to the checked loss.
    fn bilinear_readout(tape: &mut Tape, y: Var, rng: &mut ChaCha8Rng) -> Result<Var> {
        let (n, m) = (tape.value(y).rows(), tape.value(y).cols());
        let r = tape.constant(random_input(rng, 1, n));
        let c = tape.constant(random_input(rng, m, 1));
        let yc = tape.matmul(y, c)?;
        tape.matmul(r, yc)
    }

    #[test]
    fn conv_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let mut store = ParamStore::new();
        let conv = Conv1d::register(&mut store, "conv", 3, 4, 5, &mut rng).unwrap();
        let input = random_input(&mut rng, 9, 4);
        let readout_seed = rng.gen::<u64>();
        let mut objective = LayerObjective {
            build: |tape: &mut Tape| {
                let x = tape.constant(input.clone());
                let y = conv.forward(tape, x)?;
                bilinear_readout(tape, y, &mut ChaCha8Rng::seed_from_u64(readout_seed))
            },
        };
        let report =
            finite_difference_check(&mut store, &mut objective, &CheckOptions::exhaustive()).unwrap();
        assert!(report.max_relative_error() < 1e-4, "{report:?}");
    }

    #[test]
    fn attention_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mut store = ParamStore::new();
        let attn = SelfAttention::register(&mut store, "attn", 8, 2, &mut rng).unwrap();
        let input = random_input(&mut rng, 4, 8);
        let readout_seed = rng.gen::<u64>();
        let mut objective = LayerObjective {
            build: |tape: &mut Tape| {
                let x = tape.constant(input.clone());
                let y = attn.forward(tape, x, 0.0)?;
                bilinear_readout(tape, y, &mut ChaCha8Rng::seed_from_u64(readout_seed))
            },
        };
        let report =
            finite_difference_check(&mut store, &mut objective, &CheckOptions::exhaustive()).unwrap();
        assert!(report.max_relative_error() < 1e-4, "{report:?}");
    }
}
