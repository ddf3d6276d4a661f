//! Lookahead predictors for offloaded experts.
//!
//! The inter-expert predictor is a learned linear map per layer that
//! scores the experts of layer `i` from the hidden state entering layer
//! `i - 1`. The intra-expert predictor has no parameters: it multiplies
//! that same earlier hidden state with the next layer's quantized up
//! projection and thresholds the result.

use std::fmt::Write as _;
use std::fs::File;
use std::io::{BufReader, Read, Write};
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::binio;
use crate::error::{Error, Result};
use crate::la::{gemv, top_k, Matrix, Order};
use crate::model::{CompressedModel, ExpertBank, TokenTrace};
use crate::quant::{qgemv, QuantizedMatrix};
use crate::sparsify::active_channels;

pub const PREDICTOR_MAGIC: &[u8; 4] = b"FLOP";
pub const PREDICTOR_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub epochs: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 4.0,
            epochs: 1000,
            seed: 0,
        }
    }
}

/// Pairs of (hidden state entering layer `i - 1`, experts routed at
/// layer `i`), grouped by target layer. Index 0 is always empty.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ExpertTrace {
    pub layers: Vec<Vec<(Vec<f32>, Vec<usize>)>>,
}

impl ExpertTrace {
    pub fn from_tokens(tokens: &[TokenTrace]) -> Self {
        let m = tokens.first().map_or(0, |t| t.layers.len());
        let mut layers = vec![Vec::new(); m];
        for t in tokens {
            for (i, layer) in layers.iter_mut().enumerate().skip(1) {
                layer.push((t.layers[i - 1].input.clone(), t.layers[i].route.indices.clone()));
            }
        }
        Self { layers }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct InterExpertPredictor {
    experts: usize,
    d_hidden: usize,
    top_k: usize,
    config: TrainConfig,
    /// `maps[i - 1]` scores layer `i`; `d_hidden x experts`, row-major.
    maps: Vec<Matrix>,
    biases: Vec<Vec<f32>>,
    loss_history: Vec<Vec<f64>>,
}

fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// Mean one-vs-all logistic loss, `log(1 + e^z) - y·z` summed over
/// experts and averaged over samples.
fn logistic_loss(w: &[f64], b: &[f64], xs: &[Vec<f64>], ys: &[Vec<f64>], n: usize) -> f64 {
    let mut total = 0.0;
    for (x, y) in xs.iter().zip(ys) {
        for j in 0..n {
            let z = b[j] + x.iter().enumerate().map(|(r, xr)| xr * w[r * n + j]).sum::<f64>();
            let softplus = if z > 0.0 {
                z + (-z).exp().ln_1p()
            } else {
                z.exp().ln_1p()
            };
            total += softplus - y[j] * z;
        }
    }
    total / xs.len() as f64
}

/// Full-batch gradient descent for one layer; returns the weights, bias
/// and the loss before each epoch plus after the last.
fn fit_layer(
    pairs: &[(Vec<f32>, Vec<usize>)],
    n: usize,
    dh: usize,
    cfg: &TrainConfig,
    rng: &mut ChaCha8Rng,
) -> Result<(Vec<f64>, Vec<f64>, Vec<f64>)> {
    let xs: Vec<Vec<f64>> = pairs
        .iter()
        .map(|(x, _)| {
            if x.len() == dh {
                Ok(x.iter().map(|&v| f64::from(v)).collect())
            } else {
                Err(Error::dims("trace hidden state length", dh, x.len()))
            }
        })
        .collect::<Result<_>>()?;
    let ys: Vec<Vec<f64>> = pairs
        .iter()
        .map(|(_, set)| {
            let mut y = vec![0.0; n];
            for &j in set {
                if j >= n {
                    return Err(Error::invalid(format!("expert index {j} out of range 0..{n}")));
                }
                y[j] = 1.0;
            }
            Ok(y)
        })
        .collect::<Result<_>>()?;
    let init = Normal::new(0.0, 1e-3).expect("valid std");
    let mut w: Vec<f64> = (0..dh * n).map(|_| init.sample(rng)).collect();
    let mut b = vec![0.0f64; n];
    let count = xs.len() as f64;
    let mut history = Vec::with_capacity(cfg.epochs + 1);
    let mut gw = vec![0.0f64; dh * n];
    let mut gb = vec![0.0f64; n];
    let mut z = vec![0.0f64; n];
    for _ in 0..cfg.epochs {
        gw.fill(0.0);
        gb.fill(0.0);
        let mut loss = 0.0;
        for (x, y) in xs.iter().zip(&ys) {
            z.copy_from_slice(&b);
            for (r, &xr) in x.iter().enumerate() {
                for (zj, wj) in z.iter_mut().zip(&w[r * n..(r + 1) * n]) {
                    *zj += xr * wj;
                }
            }
            for j in 0..n {
                let zj = z[j];
                loss += if zj > 0.0 {
                    zj + (-zj).exp().ln_1p()
                } else {
                    zj.exp().ln_1p()
                } - y[j] * zj;
                z[j] = sigmoid(zj) - y[j];
            }
            for (r, &xr) in x.iter().enumerate() {
                for (g, d) in gw[r * n..(r + 1) * n].iter_mut().zip(&z) {
                    *g += xr * d;
                }
            }
            for (g, d) in gb.iter_mut().zip(&z) {
                *g += d;
            }
        }
        history.push(loss / count);
        let step = cfg.learning_rate / count;
        for (wi, g) in w.iter_mut().zip(&gw) {
            *wi -= step * g;
        }
        for (bi, g) in b.iter_mut().zip(&gb) {
            *bi -= step * g;
        }
    }
    history.push(logistic_loss(&w, &b, &xs, &ys, n));
    Ok((w, b, history))
}

/// Fits one linear map per layer `i >= 1` with one-vs-all logistic loss.
pub fn train_inter(
    trace: &ExpertTrace,
    experts: usize,
    d_hidden: usize,
    top_k: usize,
    cfg: &TrainConfig,
) -> Result<InterExpertPredictor> {
    if trace.layers.len() < 2 {
        return Err(Error::invalid("trace needs at least two layers"));
    }
    if top_k == 0 || top_k > experts {
        return Err(Error::invalid(format!("top_k {top_k} outside 1..={experts}")));
    }
    if !(cfg.learning_rate > 0.0 && cfg.learning_rate.is_finite()) {
        return Err(Error::invalid("learning rate must be positive"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut maps = Vec::new();
    let mut biases = Vec::new();
    let mut loss_history = Vec::new();
    for (i, pairs) in trace.layers.iter().enumerate().skip(1) {
        if pairs.is_empty() {
            return Err(Error::invalid(format!("trace has no samples for layer {i}")));
        }
        let (w, b, hist) = fit_layer(pairs, experts, d_hidden, cfg, &mut rng)?;
        let map = Matrix::new(
            d_hidden,
            experts,
            Order::RowMajor,
            w.iter().map(|&v| v as f32).collect(),
        )
        .map_err(|_| Error::NonFinite("trained predictor weights"))?;
        maps.push(map);
        biases.push(b.iter().map(|&v| v as f32).collect());
        loss_history.push(hist);
    }
    Ok(InterExpertPredictor {
        experts,
        d_hidden,
        top_k,
        config: *cfg,
        maps,
        biases,
        loss_history,
    })
}

impl InterExpertPredictor {
    pub fn layers(&self) -> usize {
        self.maps.len() + 1
    }

    pub fn experts(&self) -> usize {
        self.experts
    }

    pub fn top_k(&self) -> usize {
        self.top_k
    }

    pub fn train_config(&self) -> &TrainConfig {
        &self.config
    }

    /// Mean training loss per epoch for `layer`, with the final loss last.
    /// Empty for a predictor read from disk.
    pub fn loss_history(&self, layer: usize) -> &[f64] {
        layer
            .checked_sub(1)
            .and_then(|i| self.loss_history.get(i))
            .map_or(&[], Vec::as_slice)
    }

    pub fn scores(&self, x: &[f32], layer: usize) -> Result<Vec<f32>> {
        if layer == 0 {
            return Err(Error::invalid(
                "layer 0 has no predictor; it is fetched without lookahead",
            ));
        }
        let map = self
            .maps
            .get(layer - 1)
            .ok_or_else(|| Error::invalid(format!("layer {layer} out of range 1..{}", self.layers())))?;
        if x.len() != self.d_hidden {
            return Err(Error::dims("predictor input length", self.d_hidden, x.len()));
        }
        let mut s = gemv(map, x)?;
        for (v, b) in s.iter_mut().zip(&self.biases[layer - 1]) {
            *v += b;
        }
        Ok(s)
    }

    pub fn write_to(&self, w: &mut impl Write) -> Result<()> {
        w.write_all(PREDICTOR_MAGIC)?;
        binio::write_u32(w, PREDICTOR_VERSION)?;
        for v in [
            self.layers(),
            self.experts,
            self.d_hidden,
            self.top_k,
            self.config.epochs,
        ] {
            binio::write_usize_u32(w, v)?;
        }
        binio::write_u64(w, self.config.learning_rate.to_bits())?;
        binio::write_u64(w, self.config.seed)?;
        for (m, b) in self.maps.iter().zip(&self.biases) {
            binio::write_f32s(w, m.as_slice())?;
            binio::write_f32s(w, b)?;
        }
        Ok(())
    }

    pub fn read_from(r: &mut impl Read) -> Result<Self> {
        binio::expect_magic(r, PREDICTOR_MAGIC)?;
        binio::expect_version(r, PREDICTOR_VERSION)?;
        let mut d = [0usize; 5];
        for v in &mut d {
            *v = binio::read_u32(r)? as usize;
        }
        let [layers, experts, d_hidden, top_k, epochs] = d;
        if layers < 2 || experts == 0 || d_hidden == 0 || top_k == 0 || top_k > experts {
            return Err(Error::Corrupt("bad predictor header".into()));
        }
        let learning_rate = f64::from_bits(binio::read_u64(r)?);
        let seed = binio::read_u64(r)?;
        let mut maps = Vec::with_capacity(layers - 1);
        let mut biases = Vec::with_capacity(layers - 1);
        for _ in 1..layers {
            maps.push(binio::read_matrix(r, d_hidden, experts, Order::RowMajor)?);
            let b = binio::read_f32s(r, experts)?;
            if b.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFinite("predictor bias"));
            }
            biases.push(b);
        }
        binio::expect_eof(r)?;
        Ok(Self {
            experts,
            d_hidden,
            top_k,
            config: TrainConfig {
                learning_rate,
                epochs,
                seed,
            },
            maps,
            biases,
            loss_history: Vec::new(),
        })
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut buf = Vec::new();
        self.write_to(&mut buf).expect("writing to memory cannot fail");
        buf
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::read_from(&mut BufReader::new(File::open(path)?))
    }
}

/// Highest-scoring `prefetch_count` experts for `layer`, ascending.
pub fn predict_experts(p: &InterExpertPredictor, x: &[f32], layer: usize, prefetch_count: usize) -> Result<Vec<usize>> {
    if prefetch_count < p.top_k || prefetch_count > p.experts {
        return Err(Error::invalid(format!(
            "prefetch count {prefetch_count} outside {}..={}",
            p.top_k, p.experts
        )));
    }
    top_k(&p.scores(x, layer)?, prefetch_count)
}

/// Channels of the next expert predicted active from an earlier hidden
/// state: `|x_prev · up_next| >= t`, ascending.
pub fn predict_mask(x_prev: &[f32], up_next: &QuantizedMatrix, t: f32) -> Result<Vec<usize>> {
    if t.is_nan() || t < 0.0 {
        return Err(Error::invalid(format!("threshold must be >= 0, got {t}")));
    }
    Ok(active_channels(&qgemv(up_next, x_prev)?, t))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PredictionMetrics {
    pub precision: f64,
    pub recall: f64,
    pub samples: usize,
}

fn overlap(pred: &[usize], truth: &[usize]) -> usize {
    // both ascending
    let (mut i, mut j, mut n) = (0, 0, 0);
    while i < pred.len() && j < truth.len() {
        match pred[i].cmp(&truth[j]) {
            std::cmp::Ordering::Less => i += 1,
            std::cmp::Ordering::Greater => j += 1,
            std::cmp::Ordering::Equal => {
                n += 1;
                i += 1;
                j += 1;
            }
        }
    }
    n
}

fn sorted_dedup(v: &[usize]) -> Vec<usize> {
    let mut v = v.to_vec();
    v.sort_unstable();
    v.dedup();
    v
}

/// Averages per-sample precision and recall. An empty prediction has
/// precision 1 only when the truth is empty too; an empty truth has
/// recall 1.
pub fn eval_predictions(pred: &[Vec<usize>], truth: &[Vec<usize>]) -> Result<PredictionMetrics> {
    if pred.len() != truth.len() {
        return Err(Error::dims("prediction count", truth.len(), pred.len()));
    }
    let (mut p_sum, mut r_sum) = (0.0f64, 0.0f64);
    for (p, t) in pred.iter().zip(truth) {
        let (p, t) = (sorted_dedup(p), sorted_dedup(t));
        let hit = overlap(&p, &t) as f64;
        p_sum += match (p.is_empty(), t.is_empty()) {
            (true, true) => 1.0,
            (true, false) => 0.0,
            _ => hit / p.len() as f64,
        };
        r_sum += if t.is_empty() { 1.0 } else { hit / t.len() as f64 };
    }
    let n = pred.len();
    let avg = |s: f64| if n == 0 { 0.0 } else { s / n as f64 };
    Ok(PredictionMetrics {
        precision: avg(p_sum),
        recall: avg(r_sum),
        samples: n,
    })
}

/// `layer,precision,recall,samples`.
pub fn metrics_csv(rows: &[(usize, PredictionMetrics)]) -> String {
    let mut s = String::from("layer,precision,recall,samples\n");
    for (layer, m) in rows {
        let _ = writeln!(s, "{layer},{},{},{}", m.precision, m.recall, m.samples);
    }
    s
}

/// Inter-expert metrics per layer `i >= 1` over a trace.
pub fn eval_inter(
    p: &InterExpertPredictor,
    trace: &ExpertTrace,
    prefetch_count: usize,
) -> Result<Vec<(usize, PredictionMetrics)>> {
    let mut out = Vec::new();
    for (i, pairs) in trace.layers.iter().enumerate().skip(1) {
        let pred = pairs
            .iter()
            .map(|(x, _)| predict_experts(p, x, i, prefetch_count))
            .collect::<Result<Vec<_>>>()?;
        let truth: Vec<Vec<usize>> = pairs.iter().map(|(_, t)| t.clone()).collect();
        out.push((i, eval_predictions(&pred, &truth)?));
    }
    Ok(out)
}

/// Intra-expert metrics per layer `i >= 1`: for every routed expert of
/// layer `i`, the mask predicted from the hidden state entering layer
/// `i - 1` against the mask actually used.
pub fn eval_reuse(model: &CompressedModel, traces: &[TokenTrace]) -> Result<Vec<(usize, PredictionMetrics)>> {
    let m = model.config().layers;
    let mut out = Vec::new();
    for i in 1..m {
        let mut pred = Vec::new();
        let mut truth = Vec::new();
        for t in traces {
            let prev = &t.layers[i - 1].input;
            let layer = &t.layers[i];
            for (slot, &j) in layer.route.indices.iter().enumerate() {
                let e = model.expert(i, j);
                pred.push(predict_mask(prev, e.up_q(), e.threshold())?);
                truth.push(layer.active[slot].clone());
            }
        }
        out.push((i, eval_predictions(&pred, &truth)?));
    }
    Ok(out)
}

/// Bytes for low-rank learned predictors: `(d_h·r + r·d_i)·2·blocks`.
pub fn learned_predictor_footprint(d_hidden: u64, d_intermediate: u64, rank: u64, blocks: u64) -> u64 {
    (d_hidden * rank + rank * d_intermediate) * 2 * blocks
}

/// Bytes for per-state sign-bit tables: `d_i·states·4·blocks`.
pub fn sign_bit_footprint(d_intermediate: u64, states: u64, blocks: u64) -> u64 {
    d_intermediate * states * 4 * blocks
}
