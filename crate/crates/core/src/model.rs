//! SwiGLU experts, top-k routing, MoE layers and the two model files.
//!
//! Weight orientation: activations are row vectors multiplied from the
//! left. `gate` and `up` are `d_hidden x d_intermediate` column-major so
//! one intermediate channel is one contiguous column. `down_t` holds the
//! down projection transposed, also `d_hidden x d_intermediate`
//! column-major, so channel `i` of the down projection is column `i`.

use std::fs::File;
use std::io::{BufReader, Read, Write};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};

use crate::binio;
use crate::error::{Error, Result};
use crate::la::{combine_columns, gemv, gemv_columns, gemv_t, silu_scalar, softmax, top_k, Matrix, Order};
use crate::quant::{self, qgemv, QuantConfig, QuantizedMatrix};
use crate::sparsify::{active_channels, ThresholdTable};

pub const DENSE_MAGIC: &[u8; 4] = b"FLOE";
pub const COMPRESSED_MAGIC: &[u8; 4] = b"FLOQ";
pub const FORMAT_VERSION: u32 = 1;
const HEADER_BYTES: u64 = 4 + 4 + 5 * 4 + 8;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct MoeConfig {
    pub layers: usize,
    pub experts: usize,
    pub top_k: usize,
    pub d_hidden: usize,
    pub d_intermediate: usize,
    pub seed: u64,
}

impl MoeConfig {
    pub fn validate(&self) -> Result<()> {
        let dims = [
            ("layers", self.layers),
            ("experts", self.experts),
            ("top_k", self.top_k),
            ("d_hidden", self.d_hidden),
            ("d_intermediate", self.d_intermediate),
        ];
        for (name, v) in dims {
            if v == 0 {
                return Err(Error::invalid(format!("{name} must be >= 1")));
            }
            if u32::try_from(v).is_err() {
                return Err(Error::invalid(format!("{name} = {v} does not fit in u32")));
            }
        }
        if self.top_k > self.experts {
            return Err(Error::invalid(format!(
                "top_k = {} exceeds experts = {}",
                self.top_k, self.experts
            )));
        }
        Ok(())
    }

    fn write_header(&self, w: &mut impl Write, magic: &[u8; 4]) -> Result<()> {
        w.write_all(magic)?;
        binio::write_u32(w, FORMAT_VERSION)?;
        for v in [
            self.layers,
            self.experts,
            self.top_k,
            self.d_hidden,
            self.d_intermediate,
        ] {
            binio::write_usize_u32(w, v)?;
        }
        binio::write_u64(w, self.seed)
    }

    fn read_header(r: &mut impl Read, magic: &[u8; 4]) -> Result<Self> {
        binio::expect_magic(r, magic)?;
        binio::expect_version(r, FORMAT_VERSION)?;
        let mut d = [0usize; 5];
        for v in &mut d {
            *v = binio::read_u32(r)? as usize;
        }
        let cfg = MoeConfig {
            layers: d[0],
            experts: d[1],
            top_k: d[2],
            d_hidden: d[3],
            d_intermediate: d[4],
            seed: binio::read_u64(r)?,
        };
        cfg.validate().map_err(|e| Error::Corrupt(format!("bad header: {e}")))?;
        Ok(cfg)
    }

    fn shared_floats_per_layer(&self) -> u64 {
        let dh = self.d_hidden as u64;
        dh * self.experts as u64 + dh * dh
    }

    /// Exact size of a dense model file.
    pub fn dense_file_size(&self) -> u64 {
        let per_expert = 3 * self.d_hidden as u64 * self.d_intermediate as u64;
        let per_layer = self.shared_floats_per_layer() + self.experts as u64 * per_expert;
        HEADER_BYTES + 4 * self.layers as u64 * per_layer
    }

    /// Exact size of a compressed model file.
    pub fn compressed_file_size(&self, bits: u8, group_size: usize) -> u64 {
        let (dh, di) = (self.d_hidden, self.d_intermediate);
        let per_expert = quant::stored_bytes_for(dh, di, bits, group_size, true) + 4 * 2 * (dh * di) as u64 + 4;
        let per_layer = 4 * self.shared_floats_per_layer() + self.experts as u64 * per_expert;
        HEADER_BYTES + 1 + 4 + self.layers as u64 * per_layer
    }
}

fn check_expert_matrix(m: &Matrix, what: &'static str, dh: usize, di: usize) -> Result<()> {
    if m.rows() != dh {
        return Err(Error::dims(what, dh, m.rows()));
    }
    if m.cols() != di {
        return Err(Error::dims(what, di, m.cols()));
    }
    if m.order() != Order::ColMajor {
        return Err(Error::invalid(format!("{what} must be column-major")));
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExpertWeights {
    gate: Matrix,
    up: Matrix,
    down_t: Matrix,
}

impl ExpertWeights {
    pub fn new(gate: Matrix, up: Matrix, down_t: Matrix) -> Result<Self> {
        let (dh, di) = (gate.rows(), gate.cols());
        check_expert_matrix(&gate, "gate", dh, di)?;
        check_expert_matrix(&up, "up", dh, di)?;
        check_expert_matrix(&down_t, "down_t", dh, di)?;
        Ok(Self { gate, up, down_t })
    }

    /// Gaussian weights with standard deviation `std`; the down projection
    /// is further multiplied by `down_scale`.
    pub fn random(d_hidden: usize, d_intermediate: usize, std: f32, down_scale: f32, rng: &mut impl Rng) -> Self {
        let normal = Normal::new(0.0f32, std).expect("std is finite and >= 0");
        let mut draw = |scale: f32| {
            Matrix::from_fn(d_hidden, d_intermediate, Order::ColMajor, |_, _| {
                scale * normal.sample(rng)
            })
        };
        let gate = draw(1.0);
        let up = draw(1.0);
        let down_t = draw(down_scale);
        Self { gate, up, down_t }
    }

    pub fn d_hidden(&self) -> usize {
        self.gate.rows()
    }

    pub fn d_intermediate(&self) -> usize {
        self.gate.cols()
    }

    pub fn gate(&self) -> &Matrix {
        &self.gate
    }

    pub fn up(&self) -> &Matrix {
        &self.up
    }

    pub fn down_t(&self) -> &Matrix {
        &self.down_t
    }

    /// Dense bytes of all three projections at `element_bytes` per weight.
    pub fn dense_bytes(&self, element_bytes: u64) -> u64 {
        3 * (self.d_hidden() * self.d_intermediate()) as u64 * element_bytes
    }

    fn write_to(&self, w: &mut impl Write) -> Result<()> {
        for m in [&self.gate, &self.up, &self.down_t] {
            binio::write_f32s(w, m.as_slice())?;
        }
        Ok(())
    }

    fn read_from(r: &mut impl Read, dh: usize, di: usize) -> Result<Self> {
        let gate = binio::read_matrix(r, dh, di, Order::ColMajor)?;
        let up = binio::read_matrix(r, dh, di, Order::ColMajor)?;
        let down_t = binio::read_matrix(r, dh, di, Order::ColMajor)?;
        Self::new(gate, up, down_t)
    }
}

/// Up projection quantized; gate and down kept dense and read only on the
/// channels selected by the threshold.
#[derive(Debug, Clone, PartialEq)]
pub struct CompressedExpert {
    up_q: QuantizedMatrix,
    gate: Matrix,
    down_t: Matrix,
    threshold: f32,
}

impl CompressedExpert {
    pub fn new(up_q: QuantizedMatrix, gate: Matrix, down_t: Matrix, threshold: f32) -> Result<Self> {
        let (dh, di) = (gate.rows(), gate.cols());
        check_expert_matrix(&gate, "gate", dh, di)?;
        check_expert_matrix(&down_t, "down_t", dh, di)?;
        if up_q.rows() != dh {
            return Err(Error::dims("quantized up rows", dh, up_q.rows()));
        }
        if up_q.cols() != di {
            return Err(Error::dims("quantized up cols", di, up_q.cols()));
        }
        check_threshold(threshold)?;
        Ok(Self {
            up_q,
            gate,
            down_t,
            threshold,
        })
    }

    pub fn d_hidden(&self) -> usize {
        self.gate.rows()
    }

    pub fn d_intermediate(&self) -> usize {
        self.gate.cols()
    }

    pub fn up_q(&self) -> &QuantizedMatrix {
        &self.up_q
    }

    pub fn gate(&self) -> &Matrix {
        &self.gate
    }

    pub fn down_t(&self) -> &Matrix {
        &self.down_t
    }

    /// Raw gate weights; lets callers overwrite channels, e.g. to prove
    /// that unselected channels are never read.
    pub fn gate_data_mut(&mut self) -> &mut [f32] {
        self.gate.as_mut_slice()
    }

    pub fn down_t_data_mut(&mut self) -> &mut [f32] {
        self.down_t.as_mut_slice()
    }

    pub fn threshold(&self) -> f32 {
        self.threshold
    }

    pub fn set_threshold(&mut self, t: f32) -> Result<()> {
        check_threshold(t)?;
        self.threshold = t;
        Ok(())
    }

    /// Bytes of one gate column plus one down channel.
    pub fn channel_bytes(&self, element_bytes: u64) -> u64 {
        2 * self.d_hidden() as u64 * element_bytes
    }

    /// Quantized up projection including per-group metadata.
    pub fn up_bytes(&self) -> u64 {
        self.up_q.stored_bytes(true)
    }

    fn write_to(&self, w: &mut impl Write) -> Result<()> {
        self.up_q.write_payload(w)?;
        binio::write_f32s(w, self.gate.as_slice())?;
        binio::write_f32s(w, self.down_t.as_slice())?;
        binio::write_f32s(w, &[self.threshold])
    }

    fn read_from(r: &mut impl Read, dh: usize, di: usize, bits: u8, group_size: usize) -> Result<Self> {
        let up_q = QuantizedMatrix::read_payload(r, dh, di, bits, group_size)?;
        let gate = binio::read_matrix(r, dh, di, Order::ColMajor)?;
        let down_t = binio::read_matrix(r, dh, di, Order::ColMajor)?;
        let threshold = binio::read_f32s(r, 1)?[0];
        Self::new(up_q, gate, down_t, threshold).map_err(|e| Error::Corrupt(e.to_string()))
    }
}

fn check_threshold(t: f32) -> Result<()> {
    if t >= 0.0 && t.is_finite() {
        Ok(())
    } else {
        Err(Error::invalid(format!("threshold must be finite and >= 0, got {t}")))
    }
}

fn check_input(x: &[f32], d_hidden: usize) -> Result<()> {
    if x.len() != d_hidden {
        return Err(Error::dims("expert input length", d_hidden, x.len()));
    }
    Ok(())
}

/// One expert evaluation with the intermediate quantities a trace needs.
#[derive(Debug, Clone, PartialEq)]
pub struct ExpertPass {
    pub output: Vec<f32>,
    /// Up-projection activations for every channel.
    pub up: Vec<f32>,
    /// Channels whose gate column and down channel were used, ascending.
    pub active: Vec<usize>,
}

fn dense_pass(e: &ExpertWeights, x: &[f32]) -> Result<ExpertPass> {
    check_input(x, e.d_hidden())?;
    let g = gemv(&e.gate, x)?;
    let up = gemv(&e.up, x)?;
    let a: Vec<f32> = g.iter().zip(&up).map(|(&g, &u)| silu_scalar(g) * u).collect();
    let output = gemv_t(&e.down_t, &a)?;
    Ok(ExpertPass {
        output,
        up,
        active: (0..e.d_intermediate()).collect(),
    })
}

fn sparse_pass(e: &CompressedExpert, x: &[f32]) -> Result<ExpertPass> {
    check_input(x, e.d_hidden())?;
    let up = qgemv(&e.up_q, x)?;
    let active = active_channels(&up, e.threshold);
    let g = gemv_columns(&e.gate, x, &active)?;
    let a: Vec<f32> = g.iter().zip(&active).map(|(&g, &i)| silu_scalar(g) * up[i]).collect();
    let output = combine_columns(&e.down_t, &a, &active)?;
    Ok(ExpertPass { output, up, active })
}

/// `(silu(x·gate) ⊙ (x·up))·down`.
pub fn expert_forward(e: &ExpertWeights, x: &[f32]) -> Result<Vec<f32>> {
    Ok(dense_pass(e, x)?.output)
}

/// Quantized up projection, then only the channels with `|v| >= t` touch
/// the gate and down weights.
pub fn expert_forward_sparse(e: &CompressedExpert, x: &[f32]) -> Result<Vec<f32>> {
    Ok(sparse_pass(e, x)?.output)
}

pub fn expert_forward_sparse_traced(e: &CompressedExpert, x: &[f32]) -> Result<ExpertPass> {
    sparse_pass(e, x)
}

#[derive(Debug, Clone, PartialEq)]
pub struct Route {
    /// Selected experts, ascending.
    pub indices: Vec<usize>,
    /// Mixture weights aligned with `indices`, summing to one.
    pub weights: Vec<f32>,
}

pub fn route(router: &Matrix, x: &[f32], k: usize) -> Result<Route> {
    let logits = gemv(router, x)?;
    let indices = top_k(&logits, k)?;
    let picked: Vec<f32> = indices.iter().map(|&i| logits[i]).collect();
    Ok(Route {
        weights: softmax(&picked),
        indices,
    })
}

/// Shared view of dense and compressed models for the layer loop.
pub trait ExpertBank: Sync {
    fn config(&self) -> &MoeConfig;
    fn router(&self, layer: usize) -> &Matrix;
    fn mixing(&self, layer: usize) -> &Matrix;
    fn run_expert(&self, layer: usize, expert: usize, h: &[f32]) -> Result<ExpertPass>;
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerTrace {
    /// Hidden state entering the MoE block, after mixing.
    pub input: Vec<f32>,
    pub route: Route,
    /// Per routed slot, aligned with `route.indices`.
    pub up_activations: Vec<Vec<f32>>,
    pub active: Vec<Vec<usize>>,
    pub output: Vec<f32>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TokenTrace {
    pub layers: Vec<LayerTrace>,
}

impl TokenTrace {
    pub fn output(&self) -> &[f32] {
        &self.layers.last().expect("at least one layer").output
    }
}

fn check_layer<B: ExpertBank + ?Sized>(bank: &B, layer: usize) -> Result<()> {
    let m = bank.config().layers;
    if layer >= m {
        return Err(Error::invalid(format!("layer {layer} out of range 0..{m}")));
    }
    Ok(())
}

pub fn layer_forward_traced<B: ExpertBank + ?Sized>(bank: &B, layer: usize, x: &[f32]) -> Result<LayerTrace> {
    check_layer(bank, layer)?;
    let cfg = bank.config();
    check_input(x, cfg.d_hidden)?;
    let mixed = gemv(bank.mixing(layer), x)?;
    let h: Vec<f32> = x.iter().zip(&mixed).map(|(a, b)| a + b).collect();
    let route = route(bank.router(layer), &h, cfg.top_k)?;
    let mut y = h.clone();
    let mut up_activations = Vec::with_capacity(cfg.top_k);
    let mut active = Vec::with_capacity(cfg.top_k);
    for (&j, &w) in route.indices.iter().zip(&route.weights) {
        let pass = bank.run_expert(layer, j, &h)?;
        for (acc, o) in y.iter_mut().zip(&pass.output) {
            *acc += w * o;
        }
        up_activations.push(pass.up);
        active.push(pass.active);
    }
    Ok(LayerTrace {
        input: h,
        route,
        up_activations,
        active,
        output: y,
    })
}

/// `h = x + x·M`, then `y = h + Σ w_j·expert_j(h)` over the routed experts.
pub fn layer_forward<B: ExpertBank + ?Sized>(bank: &B, layer: usize, x: &[f32]) -> Result<Vec<f32>> {
    Ok(layer_forward_traced(bank, layer, x)?.output)
}

/// Runs one token through every layer.
pub fn forward_token<B: ExpertBank + ?Sized>(bank: &B, x: &[f32]) -> Result<TokenTrace> {
    let mut layers = Vec::with_capacity(bank.config().layers);
    let mut cur = x.to_vec();
    for i in 0..bank.config().layers {
        let t = layer_forward_traced(bank, i, &cur)?;
        cur.clone_from(&t.output);
        layers.push(t);
    }
    Ok(TokenTrace { layers })
}

fn check_shared(cfg: &MoeConfig, routers: &[Matrix], mixing: &[Matrix]) -> Result<()> {
    if routers.len() != cfg.layers {
        return Err(Error::dims("router count", cfg.layers, routers.len()));
    }
    if mixing.len() != cfg.layers {
        return Err(Error::dims("mixing count", cfg.layers, mixing.len()));
    }
    for r in routers {
        if r.rows() != cfg.d_hidden || r.cols() != cfg.experts || r.order() != Order::RowMajor {
            return Err(Error::invalid("router must be d_hidden x experts, row-major"));
        }
    }
    for m in mixing {
        if m.rows() != cfg.d_hidden || m.cols() != cfg.d_hidden || m.order() != Order::RowMajor {
            return Err(Error::invalid("mixing matrix must be d_hidden x d_hidden, row-major"));
        }
    }
    Ok(())
}

fn check_expert_grid<T>(cfg: &MoeConfig, experts: &[Vec<T>], dims: impl Fn(&T) -> (usize, usize)) -> Result<()> {
    if experts.len() != cfg.layers {
        return Err(Error::dims("expert layer count", cfg.layers, experts.len()));
    }
    for layer in experts {
        if layer.len() != cfg.experts {
            return Err(Error::dims("experts per layer", cfg.experts, layer.len()));
        }
        for e in layer {
            let (dh, di) = dims(e);
            if dh != cfg.d_hidden {
                return Err(Error::dims("expert d_hidden", cfg.d_hidden, dh));
            }
            if di != cfg.d_intermediate {
                return Err(Error::dims("expert d_intermediate", cfg.d_intermediate, di));
            }
        }
    }
    Ok(())
}

fn read_shared(r: &mut impl Read, cfg: &MoeConfig) -> Result<(Matrix, Matrix)> {
    let router = binio::read_matrix(r, cfg.d_hidden, cfg.experts, Order::RowMajor)?;
    let mixing = binio::read_matrix(r, cfg.d_hidden, cfg.d_hidden, Order::RowMajor)?;
    Ok((router, mixing))
}

fn check_file_len(path: &Path, expected: u64) -> Result<File> {
    let f = File::open(path)?;
    let len = f.metadata()?.len();
    if len != expected {
        return Err(Error::Corrupt(format!(
            "{}: {len} bytes, header implies {expected}",
            path.display()
        )));
    }
    Ok(f)
}

fn peek_config(path: &Path, magic: &[u8; 4]) -> Result<MoeConfig> {
    let mut r = BufReader::new(File::open(path)?);
    MoeConfig::read_header(&mut r, magic)
}

#[derive(Debug, Clone, PartialEq)]
pub struct MoeModel {
    config: MoeConfig,
    routers: Vec<Matrix>,
    mixing: Vec<Matrix>,
    experts: Vec<Vec<ExpertWeights>>,
}

impl MoeModel {
    pub fn new(
        config: MoeConfig,
        routers: Vec<Matrix>,
        mixing: Vec<Matrix>,
        experts: Vec<Vec<ExpertWeights>>,
    ) -> Result<Self> {
        config.validate()?;
        check_shared(&config, &routers, &mixing)?;
        check_expert_grid(&config, &experts, |e| (e.d_hidden(), e.d_intermediate()))?;
        Ok(Self {
            config,
            routers,
            mixing,
            experts,
        })
    }

    pub fn expert(&self, layer: usize, expert: usize) -> &ExpertWeights {
        &self.experts[layer][expert]
    }

    pub fn write_to(&self, w: &mut impl Write) -> Result<()> {
        self.config.write_header(w, DENSE_MAGIC)?;
        for i in 0..self.config.layers {
            binio::write_f32s(w, self.routers[i].as_slice())?;
            binio::write_f32s(w, self.mixing[i].as_slice())?;
            for e in &self.experts[i] {
                e.write_to(w)?;
            }
        }
        Ok(())
    }

    pub fn read_from(r: &mut impl Read) -> Result<Self> {
        let cfg = MoeConfig::read_header(r, DENSE_MAGIC)?;
        let mut routers = Vec::with_capacity(cfg.layers);
        let mut mixing = Vec::with_capacity(cfg.layers);
        let mut experts = Vec::with_capacity(cfg.layers);
        for _ in 0..cfg.layers {
            let (rt, mx) = read_shared(r, &cfg)?;
            routers.push(rt);
            mixing.push(mx);
            let layer = (0..cfg.experts)
                .map(|_| ExpertWeights::read_from(r, cfg.d_hidden, cfg.d_intermediate))
                .collect::<Result<Vec<_>>>()?;
            experts.push(layer);
        }
        binio::expect_eof(r)?;
        Self::new(cfg, routers, mixing, experts)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut buf = Vec::with_capacity(self.config.dense_file_size() as usize);
        self.write_to(&mut buf).expect("writing to memory cannot fail");
        buf
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let cfg = peek_config(path, DENSE_MAGIC)?;
        let f = check_file_len(path, cfg.dense_file_size())?;
        Self::read_from(&mut BufReader::new(f))
    }
}

impl ExpertBank for MoeModel {
    fn config(&self) -> &MoeConfig {
        &self.config
    }

    fn router(&self, layer: usize) -> &Matrix {
        &self.routers[layer]
    }

    fn mixing(&self, layer: usize) -> &Matrix {
        &self.mixing[layer]
    }

    fn run_expert(&self, layer: usize, expert: usize, h: &[f32]) -> Result<ExpertPass> {
        dense_pass(&self.experts[layer][expert], h)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CompressedModel {
    config: MoeConfig,
    bits: u8,
    group_size: usize,
    routers: Vec<Matrix>,
    mixing: Vec<Matrix>,
    experts: Vec<Vec<CompressedExpert>>,
}

impl CompressedModel {
    pub fn new(
        config: MoeConfig,
        routers: Vec<Matrix>,
        mixing: Vec<Matrix>,
        experts: Vec<Vec<CompressedExpert>>,
    ) -> Result<Self> {
        config.validate()?;
        check_shared(&config, &routers, &mixing)?;
        check_expert_grid(&config, &experts, |e| (e.d_hidden(), e.d_intermediate()))?;
        let first = &experts[0][0].up_q;
        let (bits, group_size) = (first.bits(), first.group_size());
        if experts
            .iter()
            .flatten()
            .any(|e| e.up_q.bits() != bits || e.up_q.group_size() != group_size)
        {
            return Err(Error::invalid("all experts must share bits and group size"));
        }
        Ok(Self {
            config,
            bits,
            group_size,
            routers,
            mixing,
            experts,
        })
    }

    pub fn bits(&self) -> u8 {
        self.bits
    }

    pub fn group_size(&self) -> usize {
        self.group_size
    }

    pub fn expert(&self, layer: usize, expert: usize) -> &CompressedExpert {
        &self.experts[layer][expert]
    }

    pub fn expert_mut(&mut self, layer: usize, expert: usize) -> &mut CompressedExpert {
        &mut self.experts[layer][expert]
    }

    pub fn thresholds(&self) -> ThresholdTable {
        let t = self.experts.iter().flatten().map(|e| e.threshold).collect();
        ThresholdTable::new(self.config.layers, self.config.experts, 0.0, t)
            .expect("expert thresholds are validated on construction")
    }

    pub fn write_to(&self, w: &mut impl Write) -> Result<()> {
        self.config.write_header(w, COMPRESSED_MAGIC)?;
        binio::write_u8(w, self.bits)?;
        binio::write_usize_u32(w, self.group_size)?;
        for i in 0..self.config.layers {
            binio::write_f32s(w, self.routers[i].as_slice())?;
            binio::write_f32s(w, self.mixing[i].as_slice())?;
            for e in &self.experts[i] {
                e.write_to(w)?;
            }
        }
        Ok(())
    }

    pub fn read_from(r: &mut impl Read) -> Result<Self> {
        let cfg = MoeConfig::read_header(r, COMPRESSED_MAGIC)?;
        let bits = binio::read_u8(r)?;
        let group_size = binio::read_u32(r)? as usize;
        let mut routers = Vec::with_capacity(cfg.layers);
        let mut mixing = Vec::with_capacity(cfg.layers);
        let mut experts = Vec::with_capacity(cfg.layers);
        for _ in 0..cfg.layers {
            let (rt, mx) = read_shared(r, &cfg)?;
            routers.push(rt);
            mixing.push(mx);
            let layer = (0..cfg.experts)
                .map(|_| CompressedExpert::read_from(r, cfg.d_hidden, cfg.d_intermediate, bits, group_size))
                .collect::<Result<Vec<_>>>()?;
            experts.push(layer);
        }
        binio::expect_eof(r)?;
        Self::new(cfg, routers, mixing, experts)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut buf = Vec::with_capacity(self.config.compressed_file_size(self.bits, self.group_size) as usize);
        self.write_to(&mut buf).expect("writing to memory cannot fail");
        buf
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let mut r = BufReader::new(File::open(path)?);
        let cfg = MoeConfig::read_header(&mut r, COMPRESSED_MAGIC)?;
        let bits = binio::read_u8(&mut r)?;
        let group_size = binio::read_u32(&mut r)? as usize;
        if !quant::SUPPORTED_BITS.contains(&bits) || group_size == 0 {
            return Err(Error::Corrupt(format!(
                "bad quantization header: bits {bits}, group size {group_size}"
            )));
        }
        let f = check_file_len(path, cfg.compressed_file_size(bits, group_size))?;
        Self::read_from(&mut BufReader::new(f))
    }
}

impl ExpertBank for CompressedModel {
    fn config(&self) -> &MoeConfig {
        &self.config
    }

    fn router(&self, layer: usize) -> &Matrix {
        &self.routers[layer]
    }

    fn mixing(&self, layer: usize) -> &Matrix {
        &self.mixing[layer]
    }

    fn run_expert(&self, layer: usize, expert: usize, h: &[f32]) -> Result<ExpertPass> {
        sparse_pass(&self.experts[layer][expert], h)
    }
}

pub fn compress_expert(e: &ExpertWeights, quant: &QuantConfig, threshold: f32) -> Result<CompressedExpert> {
    let up_q = quant::quantize_with(&e.up, quant)?;
    CompressedExpert::new(up_q, e.gate.clone(), e.down_t.clone(), threshold)
}

pub fn compress_model(model: &MoeModel, thresholds: &ThresholdTable, quant: &QuantConfig) -> Result<CompressedModel> {
    let cfg = model.config;
    if thresholds.layers() != cfg.layers || thresholds.experts() != cfg.experts {
        return Err(Error::invalid(format!(
            "threshold table is {}x{}, model is {}x{}",
            thresholds.layers(),
            thresholds.experts(),
            cfg.layers,
            cfg.experts
        )));
    }
    let experts = model
        .experts
        .iter()
        .enumerate()
        .map(|(i, layer)| {
            layer
                .iter()
                .enumerate()
                .map(|(j, e)| compress_expert(e, quant, thresholds.get(i, j)))
                .collect::<Result<Vec<_>>>()
        })
        .collect::<Result<Vec<_>>>()?;
    CompressedModel::new(cfg, model.routers.clone(), model.mixing.clone(), experts)
}

/// Knobs for synthetic model generation beyond the shape.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GenOptions {
    /// Multiplies both the mixing matrices and the down projections, so
    /// it controls how far the hidden state moves from one MoE block to
    /// the next. At 0 every layer sees the same MoE input.
    pub drift_scale: f32,
}

impl Default for GenOptions {
    fn default() -> Self {
        Self { drift_scale: 1.0 }
    }
}

pub fn gen_model(config: &MoeConfig) -> Result<MoeModel> {
    gen_model_with(config, &GenOptions::default())
}

/// Every weight is drawn from N(0, 1/d_hidden) by one seeded generator in
/// file order, so equal seeds give bit-identical models.
pub fn gen_model_with(config: &MoeConfig, opts: &GenOptions) -> Result<MoeModel> {
    config.validate()?;
    if !(opts.drift_scale.is_finite() && opts.drift_scale >= 0.0) {
        return Err(Error::invalid("drift scale must be finite and >= 0"));
    }
    let (dh, di) = (config.d_hidden, config.d_intermediate);
    let std = (1.0 / dh as f64).sqrt() as f32;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let eps = opts.drift_scale;
    let mut routers = Vec::with_capacity(config.layers);
    let mut mixing = Vec::with_capacity(config.layers);
    let mut experts = Vec::with_capacity(config.layers);
    for _ in 0..config.layers {
        routers.push(Matrix::from_fn(dh, config.experts, Order::RowMajor, |_, _| {
            std * normal(&mut rng)
        }));
        mixing.push(Matrix::from_fn(dh, dh, Order::RowMajor, |_, _| {
            eps * std * normal(&mut rng)
        }));
        let layer = (0..config.experts)
            .map(|_| ExpertWeights::random(dh, di, std, eps, &mut rng))
            .collect();
        experts.push(layer);
    }
    MoeModel::new(*config, routers, mixing, experts)
}

fn normal(rng: &mut impl Rng) -> f32 {
    StandardNormal.sample(rng)
}

/// Standard-normal token embeddings, independent of the model weights
/// drawn from the same seed.
pub fn gen_tokens(d_hidden: usize, count: usize, seed: u64) -> Vec<Vec<f32>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(1);
    (0..count)
        .map(|_| (0..d_hidden).map(|_| StandardNormal.sample(&mut rng)).collect())
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg(layers: usize, experts: usize, top_k: usize, dh: usize, di: usize, seed: u64) -> MoeConfig {
        MoeConfig {
            layers,
            experts,
            top_k,
            d_hidden: dh,
            d_intermediate: di,
            seed,
        }
    }

    /// Literal transcription on nested vectors, no shared kernels.
    fn naive_expert(e: &ExpertWeights, x: &[f32]) -> Vec<f32> {
        let (dh, di) = (e.d_hidden(), e.d_intermediate());
        let mut a = vec![0.0f32; di];
        for (j, aj) in a.iter_mut().enumerate() {
            let mut g = 0.0f32;
            let mut u = 0.0f32;
            for (i, &xi) in x.iter().enumerate() {
                g += xi * e.gate.get(i, j);
                u += xi * e.up.get(i, j);
            }
            *aj = g / (1.0 + (-g).exp()) * u;
        }
        let mut y = vec![0.0f32; dh];
        for (j, &aj) in a.iter().enumerate() {
            for (k, yk) in y.iter_mut().enumerate() {
                // down[j][k] is the transposed store at (k, j)
                *yk += aj * e.down_t.get(k, j);
            }
        }
        y
    }

    fn seeded_expert(dh: usize, di: usize, seed: u64) -> ExpertWeights {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        ExpertWeights::random(dh, di, (1.0 / dh as f32).sqrt(), 1.0, &mut rng)
    }

    fn seeded_x(n: usize, seed: u64) -> Vec<f32> {
        gen_tokens(n, 1, seed).pop().unwrap()
    }

    #[test]
    fn expert_matches_naive_exactly() {
        let e = seeded_expert(8, 16, 3);
        let x = seeded_x(8, 4);
        assert_eq!(expert_forward(&e, &x).unwrap(), naive_expert(&e, &x));
        assert_eq!(expert_forward(&e, &[0.0; 8]).unwrap(), vec![0.0; 8]);
        assert!(expert_forward(&e, &[0.0; 7]).is_err());
    }

    #[test]
    fn saturated_gate_passes_up_through() {
        let (dh, di) = (4, 6);
        let gate = Matrix::from_fn(dh, di, Order::ColMajor, |_, _| 50.0);
        let up = Matrix::from_fn(dh, di, Order::ColMajor, |r, c| if r == c { 1.0 } else { 0.0 });
        let down_t = Matrix::from_fn(dh, di, Order::ColMajor, |r, c| (r * di + c) as f32 * 0.1);
        let e = ExpertWeights::new(gate, up, down_t).unwrap();
        let x = [1.0, 0.5, 2.0, 0.25];
        let y = expert_forward(&e, &x).unwrap();
        // silu(50·Σx) == Σx·50 in f32, so a = (Σx·50)·x_padded
        let s: f32 = 50.0 * x.iter().sum::<f32>();
        for (k, yk) in y.iter().enumerate() {
            let want: f32 = (0..dh).map(|c| s * x[c] * e.down_t.get(k, c)).sum();
            assert!((yk - want).abs() <= 1e-3 * want.abs().max(1.0), "{yk} vs {want}");
        }
    }

    #[test]
    fn sparse_matches_masked_dense() {
        let e = seeded_expert(64, 256, 9);
        let x = seeded_x(64, 10);
        let mut c = compress_expert(&e, &QuantConfig::new(8, 64), 0.0).unwrap();
        let v = qgemv(c.up_q(), &x).unwrap();
        let mut mags: Vec<f32> = v.iter().map(|a| a.abs()).collect();
        mags.sort_by(f32::total_cmp);
        let t = mags[mags.len() / 2];
        c.set_threshold(t).unwrap();
        let g = gemv(e.gate(), &x).unwrap();
        let a: Vec<f32> = g
            .iter()
            .zip(&v)
            .map(|(&g, &v)| if v.abs() >= t { silu_scalar(g) * v } else { 0.0 })
            .collect();
        let want = gemv_t(e.down_t(), &a).unwrap();
        let got = expert_forward_sparse(&c, &x).unwrap();
        for (g, w) in got.iter().zip(&want) {
            assert!((g - w).abs() <= 1e-6 * w.abs().max(1e-3), "{g} vs {w}");
        }
        c.set_threshold(f32::MAX).unwrap();
        assert_eq!(expert_forward_sparse(&c, &x).unwrap(), vec![0.0; 64]);
    }

    #[test]
    fn poisoned_unselected_channels_stay_unread() {
        let e = seeded_expert(16, 64, 11);
        let x = seeded_x(16, 12);
        let mut c = compress_expert(&e, &QuantConfig::new(4, 64), 0.0).unwrap();
        let v = qgemv(c.up_q(), &x).unwrap();
        let t = 0.5 * v.iter().fold(0.0f32, |m, a| m.max(a.abs()));
        c.set_threshold(t).unwrap();
        let dh = c.d_hidden();
        for i in (0..64).filter(|&i| v[i].abs() < t) {
            c.gate_data_mut()[i * dh..(i + 1) * dh].fill(f32::NAN);
            c.down_t_data_mut()[i * dh..(i + 1) * dh].fill(f32::NAN);
        }
        assert!(expert_forward_sparse(&c, &x).unwrap().iter().all(|y| y.is_finite()));
    }

    #[test]
    fn route_cases() {
        let r = Matrix::new(1, 2, Order::RowMajor, vec![1.0, 1.0]).unwrap();
        let out = route(&r, &[2.0], 2).unwrap();
        assert_eq!(out.indices, [0, 1]);
        assert_eq!(out.weights, [0.5, 0.5]);
        let out = route(&r, &[2.0], 1).unwrap();
        assert_eq!(out.weights, [1.0]);
        assert!(route(&r, &[2.0, 1.0], 1).is_err());
    }

    #[test]
    fn zero_experts_pass_residual_through() {
        let c = cfg(1, 3, 2, 4, 5, 1);
        let mut m = gen_model(&c).unwrap();
        for e in &mut m.experts[0] {
            e.down_t = Matrix::zeros(4, 5, Order::ColMajor);
        }
        let x = [0.3, -1.0, 2.0, 0.5];
        let mixed = gemv(&m.mixing[0], &x).unwrap();
        let h: Vec<f32> = x.iter().zip(&mixed).map(|(a, b)| a + b).collect();
        assert_eq!(layer_forward(&m, 0, &x).unwrap(), h);
        assert!(layer_forward(&m, 1, &x).is_err());
    }

    #[test]
    fn layer_matches_monolithic_oracle() {
        let c = cfg(2, 4, 2, 16, 32, 5);
        let m = gen_model(&c).unwrap();
        let x = seeded_x(16, 6);
        let mut cur = x.clone();
        for i in 0..2 {
            let mut h = cur.clone();
            for (k, hk) in h.iter_mut().enumerate() {
                let mut acc = 0.0f32;
                for (r, &xr) in cur.iter().enumerate() {
                    acc += xr * m.mixing[i].get(r, k);
                }
                *hk += acc;
            }
            let logits: Vec<f32> = (0..4)
                .map(|j| {
                    h.iter()
                        .enumerate()
                        .fold(0.0f32, |s, (r, &hr)| s + hr * m.routers[i].get(r, j))
                })
                .collect();
            let mut order: Vec<usize> = (0..4).collect();
            order.sort_by(|&a, &b| logits[b].total_cmp(&logits[a]).then(a.cmp(&b)));
            let mut sel = order[..2].to_vec();
            sel.sort_unstable();
            let mx = logits[sel[0]].max(logits[sel[1]]);
            let ex: Vec<f64> = sel.iter().map(|&j| f64::from(logits[j] - mx).exp()).collect();
            let z: f64 = ex.iter().sum();
            let mut y = h.clone();
            for (s, &j) in sel.iter().enumerate() {
                let w = (ex[s] / z) as f32;
                for (yk, o) in y.iter_mut().zip(naive_expert(&m.experts[i][j], &h)) {
                    *yk += w * o;
                }
            }
            assert_eq!(layer_forward(&m, i, &cur).unwrap(), y);
            cur = y;
        }
    }

    #[test]
    fn dense_file_size_and_round_trip() {
        let c = cfg(2, 4, 2, 32, 64, 7);
        assert_eq!(c.dense_file_size(), 205_860);
        let m = gen_model(&c).unwrap();
        let bytes = m.to_bytes();
        assert_eq!(bytes.len() as u64, c.dense_file_size());
        assert_eq!(bytes, gen_model(&c).unwrap().to_bytes());
        let back = MoeModel::read_from(&mut bytes.as_slice()).unwrap();
        assert_eq!(back.to_bytes(), bytes);
        assert!(MoeModel::read_from(&mut &bytes[..bytes.len() - 1]).is_err());
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(MoeModel::read_from(&mut bad.as_slice()).is_err());
    }

    #[test]
    fn compressed_round_trip_is_byte_stable() {
        let c = cfg(2, 3, 1, 16, 48, 8);
        let m = gen_model(&c).unwrap();
        let t = ThresholdTable::new(2, 3, 0.5, vec![0.1, 0.2, 0.3, 0.0, 0.05, 1.0]).unwrap();
        let q = compress_model(&m, &t, &QuantConfig::new(3, 32)).unwrap();
        let bytes = q.to_bytes();
        assert_eq!(bytes.len() as u64, c.compressed_file_size(3, 32));
        let back = CompressedModel::read_from(&mut bytes.as_slice()).unwrap();
        assert_eq!(back.to_bytes(), bytes);
        assert_eq!(back.expert(1, 2).threshold(), 1.0);
    }

    #[test]
    fn generated_weight_variance() {
        let m = gen_model(&cfg(1, 2, 1, 64, 128, 3)).unwrap();
        for e in &m.experts[0] {
            for w in [e.gate(), e.up(), e.down_t()] {
                let n = w.as_slice().len() as f64;
                let mean: f64 = w.as_slice().iter().map(|&v| f64::from(v)).sum::<f64>() / n;
                let var: f64 = w.as_slice().iter().map(|&v| (f64::from(v) - mean).powi(2)).sum::<f64>() / (n - 1.0);
                assert!((var * 64.0 - 1.0).abs() < 0.2, "{var}");
            }
        }
    }

    #[test]
    fn zero_drift_keeps_moe_input_fixed() {
        let c = cfg(3, 4, 2, 16, 32, 2);
        let m = gen_model_with(&c, &GenOptions { drift_scale: 0.0 }).unwrap();
        let x = seeded_x(16, 1);
        let t = forward_token(&m, &x).unwrap();
        assert_eq!(t.layers[0].input, x);
        assert_eq!(t.layers[2].input, x);
        assert_eq!(t.output(), x.as_slice());
    }

    #[test]
    fn zero_expert_compresses_to_zero_codes() {
        let z = Matrix::zeros(8, 16, Order::ColMajor);
        let e = ExpertWeights::new(z.clone(), z.clone(), z).unwrap();
        let c = compress_expert(&e, &QuantConfig::new(2, 64), 0.3).unwrap();
        assert!(c.up_q().unpacked_codes().iter().all(|&k| k == 0));
        assert_eq!(expert_forward_sparse(&c, &[1.0; 8]).unwrap(), vec![0.0; 8]);
    }

    #[test]
    fn config_validation() {
        assert!(cfg(1, 2, 3, 4, 4, 0).validate().is_err());
        assert!(cfg(0, 2, 1, 4, 4, 0).validate().is_err());
        assert!(cfg(1, 2, 2, 4, 4, 0).validate().is_ok());
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #![proptest_config(ProptestConfig::with_cases(32))]

            #[test]
            fn sparse_agrees_with_masked_dense(seed in any::<u64>(), frac in 0.0f32..1.0) {
                let e = seeded_expert(16, 64, seed);
                let x = seeded_x(16, seed ^ 0x5a5a);
                let mut c = compress_expert(&e, &QuantConfig::new(8, 64), 0.0).unwrap();
                let v = qgemv(c.up_q(), &x).unwrap();
                let t = frac * v.iter().fold(0.0f32, |m, a| m.max(a.abs()));
                c.set_threshold(t).unwrap();
                let g = gemv(e.gate(), &x).unwrap();
                let a: Vec<f32> = g.iter().zip(&v)
                    .map(|(&g, &v)| if v.abs() >= t { silu_scalar(g) * v } else { 0.0 })
                    .collect();
                let want = gemv_t(e.down_t(), &a).unwrap();
                let got = expert_forward_sparse(&c, &x).unwrap();
                for (g, w) in got.iter().zip(&want) {
                    prop_assert!((g - w).abs() <= 1e-6 * w.abs().max(1e-3));
                }
            }

            #[test]
            fn route_weights_sum_to_one(seed in any::<u64>(), k in 1usize..=6) {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                let r = Matrix::from_fn(8, 6, Order::RowMajor, |_, _| StandardNormal.sample(&mut rng));
                let x = seeded_x(8, seed);
                let out = route(&r, &x, k).unwrap();
                prop_assert_eq!(out.indices.len(), k);
                let s: f32 = out.weights.iter().sum();
                prop_assert!((s - 1.0).abs() <= 1e-6);
            }
        }
    }
}
