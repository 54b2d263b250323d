//! Peephole LSTM over the time axis, and its bidirectional composition.
//!
//! Gate pre-activations are stored in column blocks `[input | forget | cell
//! | output]` of width `N`. With `c` the cell state:
//!
//! ```text
//! i = sigmoid(x Wx_i + h' Wh_i + p_i * c' + b_i)
//! f = sigmoid(x Wx_f + h' Wh_f + p_f * c' + b_f)
//! g = tanh(x Wx_g + h' Wh_g + b_g)
//! c = f * c' + i * g
//! o = sigmoid(x Wx_o + h' Wh_o + p_o * c + b_o)
//! h = o * tanh(c)
//! ```
//!
//! where primes denote the previous step in reading order. Initial states
//! are zero.

use rand::Rng;

use crate::error::{Error, Result};
use crate::scalar::Scalar;

use super::activation::sigmoid;
use super::{init, Tensor};

/// Gradient is propagated back through at most this many steps.
pub const DEFAULT_BPTT_STEPS: usize = 500;

/// Recurrent weights are drawn from `U(-RECURRENT_INIT, RECURRENT_INIT)`.
pub const RECURRENT_INIT: f64 = 0.1;

#[derive(Debug, Clone, PartialEq)]
pub struct Lstm<T> {
    /// `[in_features, 4N]`
    pub input_weights: Tensor<T>,
    /// `[N, 4N]`
    pub hidden_weights: Tensor<T>,
    /// `[4N]`
    pub bias: Tensor<T>,
    /// `[3, N]`: input, forget and output gate peepholes.
    pub peepholes: Tensor<T>,
    /// Reads the sequence from the last step to the first.
    pub reverse: bool,
    /// Truncation horizon for backpropagation through time; `None` is full BPTT.
    pub bptt_steps: Option<usize>,
}

#[derive(Debug, Clone)]
pub struct LstmCache<T> {
    input: Tensor<T>,
    /// Post-nonlinearity gates per step (reading order), `[T, B, 4N]`.
    gates: Vec<T>,
    cells: Vec<T>,
    cell_tanh: Vec<T>,
    hidden: Vec<T>,
}

impl<T: Scalar> Lstm<T> {
    pub fn new<R: Rng + ?Sized>(in_features: usize, hidden: usize, reverse: bool, rng: &mut R) -> Self {
        Lstm {
            input_weights: init::uniform(&[in_features, 4 * hidden], RECURRENT_INIT, rng),
            hidden_weights: init::uniform(&[hidden, 4 * hidden], RECURRENT_INIT, rng),
            bias: Tensor::zeros(&[4 * hidden]),
            peepholes: init::uniform(&[3, hidden], RECURRENT_INIT, rng),
            reverse,
            bptt_steps: Some(DEFAULT_BPTT_STEPS),
        }
    }

    pub fn in_features(&self) -> usize {
        self.input_weights.shape()[0]
    }

    pub fn hidden_size(&self) -> usize {
        self.hidden_weights.shape()[0]
    }

    fn time_index(&self, step: usize, len: usize) -> usize {
        if self.reverse {
            len - 1 - step
        } else {
            step
        }
    }

    pub fn forward(&self, input: &Tensor<T>) -> Result<(Tensor<T>, LstmCache<T>)> {
        let (b, len, cin) = input.dims3("lstm")?;
        if cin != self.in_features() {
            return Err(Error::dim("lstm", format!("{} input features", self.in_features()), cin));
        }
        let n = self.hidden_size();
        let g4 = 4 * n;
        let mut xa = vec![T::zero(); b * len * g4];
        T::gemm(false, false, b * len, cin, g4, T::one(), input.data(), self.input_weights.data(), T::zero(), &mut xa);

        let (p_i, rest) = self.peepholes.data().split_at(n);
        let (p_f, p_o) = rest.split_at(n);
        let bias = self.bias.data();
        let mut gates = vec![T::zero(); len * b * g4];
        let mut cells = vec![T::zero(); len * b * n];
        let mut cell_tanh = vec![T::zero(); len * b * n];
        let mut hidden = vec![T::zero(); len * b * n];
        let mut out = Tensor::zeros(&[b, len, n]);
        let mut pre = vec![T::zero(); b * g4];
        let zeros = vec![T::zero(); b * n];

        for s in 0..len {
            let t = self.time_index(s, len);
            for bi in 0..b {
                let src = &xa[(bi * len + t) * g4..][..g4];
                for ((p, &x), &bb) in pre[bi * g4..][..g4].iter_mut().zip(src).zip(bias) {
                    *p = x + bb;
                }
            }
            let (h_prev, c_prev) = if s == 0 {
                (&zeros[..], &zeros[..])
            } else {
                (&hidden[(s - 1) * b * n..][..b * n], &cells[(s - 1) * b * n..][..b * n])
            };
            if s > 0 {
                T::gemm(false, false, b, n, g4, T::one(), h_prev, self.hidden_weights.data(), T::one(), &mut pre);
            }
            let mut c_now = vec![T::zero(); b * n];
            let mut tc_now = vec![T::zero(); b * n];
            let mut h_now = vec![T::zero(); b * n];
            let gs = &mut gates[s * b * g4..][..b * g4];
            for bi in 0..b {
                let a = &pre[bi * g4..][..g4];
                let g_row = &mut gs[bi * g4..][..g4];
                for j in 0..n {
                    let cp = c_prev[bi * n + j];
                    let i = sigmoid(a[j] + p_i[j] * cp);
                    let f = sigmoid(a[n + j] + p_f[j] * cp);
                    let g = a[2 * n + j].tanh();
                    let c = f * cp + i * g;
                    let o = sigmoid(a[3 * n + j] + p_o[j] * c);
                    let tc = c.tanh();
                    g_row[j] = i;
                    g_row[n + j] = f;
                    g_row[2 * n + j] = g;
                    g_row[3 * n + j] = o;
                    c_now[bi * n + j] = c;
                    tc_now[bi * n + j] = tc;
                    h_now[bi * n + j] = o * tc;
                }
            }
            let od = out.data_mut();
            for bi in 0..b {
                od[(bi * len + t) * n..][..n].copy_from_slice(&h_now[bi * n..][..n]);
            }
            cells[s * b * n..][..b * n].copy_from_slice(&c_now);
            cell_tanh[s * b * n..][..b * n].copy_from_slice(&tc_now);
            hidden[s * b * n..][..b * n].copy_from_slice(&h_now);
        }
        let cache = LstmCache {
            input: input.clone(),
            gates,
            cells,
            cell_tanh,
            hidden,
        };
        Ok((out, cache))
    }

    /// Accumulates `[dWx, dWh, db, dp]` into `grads`; returns the input gradient.
    pub fn backward(&self, cache: &LstmCache<T>, grad_out: &Tensor<T>, grads: &mut [Tensor<T>]) -> Result<Tensor<T>> {
        let (b, len, cin) = cache.input.dims3("lstm")?;
        let n = self.hidden_size();
        let g4 = 4 * n;
        let dy = grad_out.data();
        let (p_i, rest) = self.peepholes.data().split_at(n);
        let (p_f, p_o) = rest.split_at(n);
        let one = T::one();

        let mut dxa = vec![T::zero(); b * len * g4];
        let mut dh_next = vec![T::zero(); b * n];
        let mut dc_next = vec![T::zero(); b * n];
        let mut da = vec![T::zero(); b * g4];
        let mut dpeep = vec![T::zero(); 3 * n];
        let stop = self.bptt_steps.map_or(0, |k| len.saturating_sub(k));
        let zeros = vec![T::zero(); b * n];

        let [d_wx, d_wh, d_b, d_p] = grads else {
            return Err(Error::dim("lstm", "4 gradient tensors", grads.len()));
        };

        for s in (stop..len).rev() {
            let t = self.time_index(s, len);
            let gs = &cache.gates[s * b * g4..][..b * g4];
            let cs = &cache.cells[s * b * n..][..b * n];
            let tcs = &cache.cell_tanh[s * b * n..][..b * n];
            let c_prev = if s == 0 { &zeros[..] } else { &cache.cells[(s - 1) * b * n..][..b * n] };
            for bi in 0..b {
                let g_row = &gs[bi * g4..][..g4];
                let da_row = &mut da[bi * g4..][..g4];
                for j in 0..n {
                    let k = bi * n + j;
                    let (i, f, g, o) = (g_row[j], g_row[n + j], g_row[2 * n + j], g_row[3 * n + j]);
                    let (c, tc, cp) = (cs[k], tcs[k], c_prev[k]);
                    let dh = dy[(bi * len + t) * n + j] + dh_next[k];
                    let dao = dh * tc * o * (one - o);
                    let dc = dc_next[k] + dh * o * (one - tc * tc) + dao * p_o[j];
                    let dai = dc * g * i * (one - i);
                    let dag = dc * i * (one - g * g);
                    let daf = dc * cp * f * (one - f);
                    dc_next[k] = dc * f + dai * p_i[j] + daf * p_f[j];
                    dpeep[j] += dai * cp;
                    dpeep[n + j] += daf * cp;
                    dpeep[2 * n + j] += dao * c;
                    da_row[j] = dai;
                    da_row[n + j] = daf;
                    da_row[2 * n + j] = dag;
                    da_row[3 * n + j] = dao;
                }
            }
            if s > 0 {
                let h_prev = &cache.hidden[(s - 1) * b * n..][..b * n];
                T::gemm(true, false, n, b, g4, one, h_prev, &da, one, d_wh.data_mut());
            }
            T::gemm(false, true, b, g4, n, one, &da, self.hidden_weights.data(), T::zero(), &mut dh_next);
            let db = d_b.data_mut();
            for row in da.chunks_exact(g4) {
                for (d, &g) in db.iter_mut().zip(row) {
                    *d += g;
                }
            }
            for bi in 0..b {
                dxa[(bi * len + t) * g4..][..g4].copy_from_slice(&da[bi * g4..][..g4]);
            }
        }
        for (d, &g) in d_p.data_mut().iter_mut().zip(&dpeep) {
            *d += g;
        }
        T::gemm(true, false, cin, b * len, g4, one, cache.input.data(), &dxa, one, d_wx.data_mut());
        let mut dx = Tensor::zeros(&[b, len, cin]);
        T::gemm(false, true, b * len, g4, cin, one, &dxa, self.input_weights.data(), T::zero(), dx.data_mut());
        Ok(dx)
    }

    pub fn params(&self) -> Vec<&Tensor<T>> {
        vec![&self.input_weights, &self.hidden_weights, &self.bias, &self.peepholes]
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor<T>> {
        vec![
            &mut self.input_weights,
            &mut self.hidden_weights,
            &mut self.bias,
            &mut self.peepholes,
        ]
    }
}

/// Two LSTMs reading the sequence in opposite directions, outputs
/// concatenated per time step as `[forward | backward]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Bidirectional<T> {
    pub forward: Lstm<T>,
    pub backward: Lstm<T>,
}

#[derive(Debug, Clone)]
pub struct BidirectionalCache<T> {
    forward: LstmCache<T>,
    backward: LstmCache<T>,
}

impl<T: Scalar> Bidirectional<T> {
    pub fn new<R: Rng + ?Sized>(in_features: usize, hidden: usize, rng: &mut R) -> Self {
        Bidirectional {
            forward: Lstm::new(in_features, hidden, false, rng),
            backward: Lstm::new(in_features, hidden, true, rng),
        }
    }

    pub fn hidden_size(&self) -> usize {
        self.forward.hidden_size()
    }

    pub fn output_features(&self) -> usize {
        self.forward.hidden_size() + self.backward.hidden_size()
    }

    pub fn set_bptt_steps(&mut self, steps: Option<usize>) {
        self.forward.bptt_steps = steps;
        self.backward.bptt_steps = steps;
    }

    pub fn forward(&self, input: &Tensor<T>) -> Result<(Tensor<T>, BidirectionalCache<T>)> {
        if self.forward.hidden_size() != self.backward.hidden_size() {
            return Err(Error::dim(
                "bilstm",
                format!("equal halves of {}", self.forward.hidden_size()),
                self.backward.hidden_size(),
            ));
        }
        let (yf, cf) = self.forward.forward(input)?;
        let (yb, cb) = self.backward.forward(input)?;
        let (b, len, n) = yf.dims3("bilstm")?;
        let mut out = Tensor::zeros(&[b, len, 2 * n]);
        for ((row, f), bk) in out
            .data_mut()
            .chunks_exact_mut(2 * n)
            .zip(yf.data().chunks_exact(n))
            .zip(yb.data().chunks_exact(n))
        {
            row[..n].copy_from_slice(f);
            row[n..].copy_from_slice(bk);
        }
        Ok((out, BidirectionalCache { forward: cf, backward: cb }))
    }

    pub fn backward(&self, cache: &BidirectionalCache<T>, grad_out: &Tensor<T>, grads: &mut [Tensor<T>]) -> Result<Tensor<T>> {
        let (b, len, n2) = grad_out.dims3("bilstm")?;
        let n = n2 / 2;
        let mut gf = Tensor::zeros(&[b, len, n]);
        let mut gb = Tensor::zeros(&[b, len, n]);
        for ((row, f), bk) in grad_out
            .data()
            .chunks_exact(n2)
            .zip(gf.data_mut().chunks_exact_mut(n))
            .zip(gb.data_mut().chunks_exact_mut(n))
        {
            f.copy_from_slice(&row[..n]);
            bk.copy_from_slice(&row[n..]);
        }
        let (fwd_grads, bwd_grads) = grads.split_at_mut(4);
        let mut dx = self.forward.backward(&cache.forward, &gf, fwd_grads)?;
        dx.add_assign(&self.backward.backward(&cache.backward, &gb, bwd_grads)?);
        Ok(dx)
    }

    pub fn params(&self) -> Vec<&Tensor<T>> {
        let mut p = self.forward.params();
        p.extend(self.backward.params());
        p
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor<T>> {
        let mut p = self.forward.params_mut();
        p.extend(self.backward.params_mut());
        p
    }
}
