//! Small recurrent networks with hand-written backpropagation.
//!
//! Topology: `layers` dense ReLU layers, one recurrent layer (GRU or plain
//! tanh RNN), then a linear head. Parameters live in a flat list of 2-D
//! arrays (biases are `1 × n`), which keeps optimisers, gradient clipping,
//! serialisation and finite-difference checks uniform.
//!
//! Sequences are time-major: a `T × B` batch is a `(T·B) × in` matrix whose
//! rows `t·B .. (t+1)·B` hold step `t`.

use ndarray::{concatenate, s, Array2, ArrayView2, Axis, Zip};
use rand::Rng;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CellKind {
    #[default]
    Gru,
    Rnn,
}

impl CellKind {
    fn gates(self) -> usize {
        match self {
            CellKind::Gru => 3,
            CellKind::Rnn => 1,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct NetConfig {
    pub input: usize,
    pub hidden: usize,
    pub layers: usize,
    pub cell: CellKind,
    pub output: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Network {
    pub config: NetConfig,
    pub params: Vec<Array2<f64>>,
}

/// Everything the backward pass needs from a sequence forward pass.
pub struct SeqCache {
    steps: usize,
    batch: usize,
    /// Input and post-ReLU output of every dense layer, stacked over time.
    dense_in: Vec<Array2<f64>>,
    dense_pre: Vec<Array2<f64>>,
    /// Hidden state entering each step (`steps + 1` entries, last is final).
    hidden: Vec<Array2<f64>>,
    /// GRU: `[r, z, n, h·W_hn + b_hn]`; RNN: `[h']` per step.
    gates: Vec<Vec<Array2<f64>>>,
    recurrent_out: Array2<f64>,
}

impl SeqCache {
    pub fn final_hidden(&self) -> &Array2<f64> {
        &self.hidden[self.steps]
    }
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

fn add_bias(m: &mut Array2<f64>, b: &Array2<f64>) {
    *m += &b.row(0);
}

fn column_sums(m: &Array2<f64>) -> Array2<f64> {
    m.sum_axis(Axis(0)).insert_axis(Axis(0))
}

impl Network {
    /// Uniform fan-in initialisation; the head is scaled by `head_gain`.
    pub fn new(config: NetConfig, head_gain: f64, rng: &mut impl Rng) -> Self {
        let mut params = Vec::new();
        let mut uniform = |rows: usize, cols: usize, scale: f64| {
            Array2::from_shape_simple_fn((rows, cols), || rng.random_range(-scale..scale))
        };
        let mut fan_in = config.input;
        for _ in 0..config.layers {
            let bound = (6.0 / fan_in as f64).sqrt();
            params.push(uniform(fan_in, config.hidden, bound));
            params.push(Array2::zeros((1, config.hidden)));
            fan_in = config.hidden;
        }
        let g = config.cell.gates() * config.hidden;
        let bound = (1.0 / config.hidden as f64).sqrt();
        params.push(uniform(fan_in, g, bound));
        params.push(uniform(config.hidden, g, bound));
        params.push(uniform(1, g, bound));
        params.push(uniform(1, g, bound));
        let bound = (1.0 / config.hidden as f64).sqrt() * head_gain;
        params.push(uniform(config.hidden, config.output, bound));
        params.push(Array2::zeros((1, config.output)));
        Self { config, params }
    }

    pub fn zeros(config: NetConfig, rng: &mut impl Rng) -> Self {
        let mut net = Self::new(config, 1.0, rng);
        net.params.iter_mut().for_each(|p| p.fill(0.0));
        net
    }

    pub fn zero_grads(&self) -> Vec<Array2<f64>> {
        self.params.iter().map(|p| Array2::zeros(p.raw_dim())).collect()
    }

    pub fn num_parameters(&self) -> usize {
        self.params.iter().map(|p| p.len()).sum()
    }

    fn recurrent_index(&self) -> usize {
        2 * self.config.layers
    }

    pub fn initial_hidden(&self, batch: usize) -> Array2<f64> {
        Array2::zeros((batch, self.config.hidden))
    }

    /// One step for a batch; returns `(output, new hidden)`.
    pub fn step(&self, x: ArrayView2<'_, f64>, h: ArrayView2<'_, f64>) -> (Array2<f64>, Array2<f64>) {
        let (out, cache) = self.forward_seq(&x.to_owned(), &h.to_owned(), 1);
        let hidden = cache.hidden[1].clone();
        (out, hidden)
    }

    pub fn forward_seq(&self, x: &Array2<f64>, h0: &Array2<f64>, steps: usize) -> (Array2<f64>, SeqCache) {
        let batch = h0.nrows();
        assert_eq!(x.nrows(), steps * batch, "sequence rows must equal steps × batch");
        assert_eq!(x.ncols(), self.config.input, "input width mismatch");
        let hsz = self.config.hidden;
        let mut dense_in = Vec::with_capacity(self.config.layers);
        let mut dense_pre = Vec::with_capacity(self.config.layers);
        let mut a = x.clone();
        for l in 0..self.config.layers {
            let mut z = a.dot(&self.params[2 * l]);
            add_bias(&mut z, &self.params[2 * l + 1]);
            dense_in.push(a);
            a = z.mapv(|v| v.max(0.0));
            dense_pre.push(z);
        }
        let ri = self.recurrent_index();
        let (wi, wh, bi, bh) = (
            &self.params[ri],
            &self.params[ri + 1],
            &self.params[ri + 2],
            &self.params[ri + 3],
        );
        let mut xi = a.dot(wi);
        add_bias(&mut xi, bi);
        let mut hidden = Vec::with_capacity(steps + 1);
        hidden.push(h0.clone());
        let mut gates = Vec::with_capacity(steps);
        let mut outs = Vec::with_capacity(steps);
        for t in 0..steps {
            let hp = &hidden[t];
            let mut hh = hp.dot(wh);
            add_bias(&mut hh, bh);
            let xt = xi.slice(s![t * batch..(t + 1) * batch, ..]);
            match self.config.cell {
                CellKind::Gru => {
                    let mut r = Array2::zeros((batch, hsz));
                    let mut z = Array2::zeros((batch, hsz));
                    let mut n = Array2::zeros((batch, hsz));
                    let hn = hh.slice(s![.., 2 * hsz..]).to_owned();
                    Zip::from(&mut r)
                        .and(xt.slice(s![.., ..hsz]))
                        .and(hh.slice(s![.., ..hsz]))
                        .for_each(|r, &a, &b| *r = sigmoid(a + b));
                    Zip::from(&mut z)
                        .and(xt.slice(s![.., hsz..2 * hsz]))
                        .and(hh.slice(s![.., hsz..2 * hsz]))
                        .for_each(|z, &a, &b| *z = sigmoid(a + b));
                    Zip::from(&mut n)
                        .and(xt.slice(s![.., 2 * hsz..]))
                        .and(&r)
                        .and(&hn)
                        .for_each(|n, &a, &r, &c| *n = (a + r * c).tanh());
                    let mut hnew = Array2::zeros((batch, hsz));
                    Zip::from(&mut hnew)
                        .and(&z)
                        .and(&n)
                        .and(hp)
                        .for_each(|h, &z, &n, &p| *h = (1.0 - z) * n + z * p);
                    outs.push(hnew.clone());
                    hidden.push(hnew);
                    gates.push(vec![r, z, n, hn]);
                }
                CellKind::Rnn => {
                    let hnew = (&xt + &hh).mapv(f64::tanh);
                    outs.push(hnew.clone());
                    hidden.push(hnew.clone());
                    gates.push(vec![hnew]);
                }
            }
        }
        let views: Vec<ArrayView2<'_, f64>> = outs.iter().map(|o| o.view()).collect();
        let recurrent_out = concatenate(Axis(0), &views).expect("uniform step shapes");
        let hi = ri + 4;
        let mut out = recurrent_out.dot(&self.params[hi]);
        add_bias(&mut out, &self.params[hi + 1]);
        dense_in.push(a);
        let cache = SeqCache {
            steps,
            batch,
            dense_in,
            dense_pre,
            hidden,
            gates,
            recurrent_out,
        };
        (out, cache)
    }

    /// Gradients of a scalar loss given `d_out = ∂loss/∂output`.
    /// Returns parameter gradients and the gradient with respect to the input.
    pub fn backward(&self, cache: &SeqCache, d_out: &Array2<f64>) -> (Vec<Array2<f64>>, Array2<f64>) {
        let mut grads = self.zero_grads();
        let (steps, batch, hsz) = (cache.steps, cache.batch, self.config.hidden);
        let ri = self.recurrent_index();
        let hi = ri + 4;
        grads[hi] = cache.recurrent_out.t().dot(d_out);
        grads[hi + 1] = column_sums(d_out);
        let d_rec = d_out.dot(&self.params[hi].t());

        let g = self.config.cell.gates() * hsz;
        let mut d_xi = Array2::zeros((steps * batch, g));
        let mut d_wh = Array2::zeros((hsz, g));
        let mut d_bh = Array2::zeros((1, g));
        let mut dh_next = Array2::<f64>::zeros((batch, hsz));
        let wh = &self.params[ri + 1];
        for t in (0..steps).rev() {
            let dh = &d_rec.slice(s![t * batch..(t + 1) * batch, ..]) + &dh_next;
            let hp = &cache.hidden[t];
            let mut gx = d_xi.slice_mut(s![t * batch..(t + 1) * batch, ..]);
            let gh = match self.config.cell {
                CellKind::Gru => {
                    let [r, z, n, hn] = &cache.gates[t][..] else {
                        unreachable!("GRU caches four gate arrays")
                    };
                    let mut gh = Array2::zeros((batch, g));
                    let mut dh_prev = Array2::zeros((batch, hsz));
                    for b in 0..batch {
                        for j in 0..hsz {
                            let (rv, zv, nv, hnv, hpv) = (r[[b, j]], z[[b, j]], n[[b, j]], hn[[b, j]], hp[[b, j]]);
                            let d = dh[[b, j]];
                            let dn = d * (1.0 - zv);
                            let dz = d * (hpv - nv);
                            dh_prev[[b, j]] = d * zv;
                            let dan = dn * (1.0 - nv * nv);
                            let dr = dan * hnv;
                            let daz = dz * zv * (1.0 - zv);
                            let dar = dr * rv * (1.0 - rv);
                            gx[[b, j]] = dar;
                            gx[[b, hsz + j]] = daz;
                            gx[[b, 2 * hsz + j]] = dan;
                            gh[[b, j]] = dar;
                            gh[[b, hsz + j]] = daz;
                            gh[[b, 2 * hsz + j]] = dan * rv;
                        }
                    }
                    dh_next = dh_prev;
                    gh
                }
                CellKind::Rnn => {
                    let hnew = &cache.gates[t][0];
                    let da = &dh * &hnew.mapv(|v| 1.0 - v * v);
                    gx.assign(&da);
                    dh_next = Array2::zeros((batch, hsz));
                    da
                }
            };
            d_wh += &hp.t().dot(&gh);
            d_bh += &column_sums(&gh);
            dh_next += &gh.dot(&wh.t());
        }
        let rec_in = &cache.dense_in[self.config.layers];
        grads[ri] = rec_in.t().dot(&d_xi);
        grads[ri + 1] = d_wh;
        grads[ri + 2] = column_sums(&d_xi);
        grads[ri + 3] = d_bh;
        let mut da = d_xi.dot(&self.params[ri].t());
        for l in (0..self.config.layers).rev() {
            let mut dz = da;
            Zip::from(&mut dz)
                .and(&cache.dense_pre[l])
                .for_each(|d, &z| {
                    if z <= 0.0 {
                        *d = 0.0
                    }
                });
            grads[2 * l] = cache.dense_in[l].t().dot(&dz);
            grads[2 * l + 1] = column_sums(&dz);
            da = dz.dot(&self.params[2 * l].t());
        }
        (grads, da)
    }
}

pub fn global_norm(grads: &[Array2<f64>]) -> f64 {
    grads
        .iter()
        .map(|g| g.iter().map(|v| v * v).sum::<f64>())
        .sum::<f64>()
        .sqrt()
}

/// Scales gradients so their global norm is at most `max_norm`; returns the
/// norm before clipping.
pub fn clip_grad_norm(grads: &mut [Array2<f64>], max_norm: f64) -> f64 {
    let norm = global_norm(grads);
    if norm > max_norm && norm > 0.0 {
        let scale = max_norm / norm;
        grads.iter_mut().for_each(|g| *g *= scale);
    }
    norm
}

/// RMSprop with the usual defaults: `v ← αv + (1−α)g²`, `p ← p − lr·g/(√v + ε)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RmsProp {
    pub lr: f64,
    pub alpha: f64,
    pub eps: f64,
    square_avg: Vec<Array2<f64>>,
}

impl RmsProp {
    pub fn new(net: &Network, lr: f64, alpha: f64, eps: f64) -> Self {
        Self {
            lr,
            alpha,
            eps,
            square_avg: net.zero_grads(),
        }
    }

    pub fn step(&mut self, net: &mut Network, grads: &[Array2<f64>]) {
        let (lr, alpha, eps) = (self.lr, self.alpha, self.eps);
        for ((p, g), v) in net.params.iter_mut().zip(grads).zip(&mut self.square_avg) {
            Zip::from(p).and(g).and(v).for_each(|p, &g, v| {
                *v = alpha * *v + (1.0 - alpha) * g * g;
                *p -= lr * g / (v.sqrt() + eps);
            });
        }
    }
}

/// Softmax over the allowed entries; disallowed entries get probability 0.
pub fn masked_softmax(logits: &[f64], allowed: &[bool]) -> Vec<f64> {
    let max = logits
        .iter()
        .zip(allowed)
        .filter(|(_, &a)| a)
        .map(|(&l, _)| l)
        .fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits
        .iter()
        .zip(allowed)
        .map(|(&l, &a)| if a { (l - max).exp() } else { 0.0 })
        .collect();
    let total: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / total).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn tiny(cell: CellKind) -> Network {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        Network::new(
            NetConfig {
                input: 5,
                hidden: 8,
                layers: 2,
                cell,
                output: 3,
            },
            1.0,
            &mut rng,
        )
    }

    fn loss(net: &Network, x: &Array2<f64>, h0: &Array2<f64>, w: &Array2<f64>) -> f64 {
        let (out, _) = net.forward_seq(x, h0, 3);
        (&out * w).sum()
    }

    fn check(cell: CellKind) {
        let net = tiny(cell);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let x = Array2::from_shape_simple_fn((3 * 2, 5), || rng.random_range(-1.0..1.0));
        let h0 = Array2::from_shape_simple_fn((2, 8), || rng.random_range(-0.5..0.5));
        let w = Array2::from_shape_simple_fn((6, 3), || rng.random_range(-1.0..1.0));
        let (_, cache) = net.forward_seq(&x, &h0, 3);
        let (grads, dx) = net.backward(&cache, &w);
        let h = 1e-6;
        for (k, p) in net.params.iter().enumerate() {
            for idx in 0..p.len() {
                let mut plus = net.clone();
                plus.params[k].as_slice_mut().unwrap()[idx] += h;
                let mut minus = net.clone();
                minus.params[k].as_slice_mut().unwrap()[idx] -= h;
                let numeric = (loss(&plus, &x, &h0, &w) - loss(&minus, &x, &h0, &w)) / (2.0 * h);
                let analytic = grads[k].as_slice().unwrap()[idx];
                let rel = (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-6);
                assert!(rel < 1e-4, "param {k}[{idx}]: {analytic} vs {numeric}");
            }
        }
        let mut xp = x.clone();
        xp[[1, 2]] += h;
        let mut xm = x.clone();
        xm[[1, 2]] -= h;
        let numeric = (loss(&net, &xp, &h0, &w) - loss(&net, &xm, &h0, &w)) / (2.0 * h);
        assert!((dx[[1, 2]] - numeric).abs() < 1e-6);
    }

    #[test]
    fn gru_gradients_match_finite_differences() {
        check(CellKind::Gru);
    }

    #[test]
    fn rnn_gradients_match_finite_differences() {
        check(CellKind::Rnn);
    }

    #[test]
    fn step_matches_sequence() {
        let net = tiny(CellKind::Gru);
        let x = Array2::from_shape_fn((2, 5), |(i, j)| (i + j) as f64 * 0.1);
        let h0 = net.initial_hidden(1);
        let (seq_out, _) = net.forward_seq(&x, &h0, 2);
        let (o1, h1) = net.step(x.slice(s![0..1, ..]), h0.view());
        let (o2, _) = net.step(x.slice(s![1..2, ..]), h1.view());
        assert_eq!(seq_out.row(0), o1.row(0));
        assert_eq!(seq_out.row(1), o2.row(0));
    }

    #[test]
    fn masked_softmax_ignores_masked_logits() {
        let p = masked_softmax(&[1.0, 2.0, 50.0, 0.0], &[true, true, false, true]);
        assert_eq!(p[2], 0.0);
        assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        let q = masked_softmax(&[1.0, 2.0, -50.0, 0.0], &[true, true, false, true]);
        assert_eq!(p, q);
        assert_eq!(masked_softmax(&[3.0, 1.0], &[false, true]), vec![0.0, 1.0]);
    }
}
