//! Compact transfer layout, a parametric host-to-device transfer model,
//! a byte-budgeted LRU expert cache and a pipelined decode simulator.
//!
//! The simulator walks tokens layer by layer on one logical clock. While
//! layer `i` computes, the experts and channels predicted for layer
//! `i + 1` are queued on a single FIFO link. When layer `i + 1` starts it
//! waits for the prefetched items it actually uses (stall), then fetches
//! whatever is still missing (sync fetch), then computes.

use std::fmt::Write as _;

use crate::error::{Error, Result};
use crate::model::{forward_token, CompressedExpert, CompressedModel, ExpertBank, TokenTrace};
use crate::predictors::{predict_experts, predict_mask, InterExpertPredictor};

/// Nominal bytes per dense weight (16-bit).
pub const DEFAULT_ELEMENT_BYTES: u64 = 2;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TransferModel {
    /// Bytes per second on the wire.
    pub bandwidth: f64,
    /// Seconds of fixed cost per request.
    pub request_overhead: f64,
    /// Bytes per second for gathering data on the host side.
    pub pack_rate: f64,
    /// Requests in flight at once; divides the per-request overhead.
    pub streams: usize,
}

impl TransferModel {
    pub fn new(bandwidth: f64, request_overhead: f64, pack_rate: f64, streams: usize) -> Result<Self> {
        let ok = |v: f64| v > 0.0 && !v.is_nan();
        if !(ok(bandwidth) && ok(request_overhead) && ok(pack_rate) && streams > 0) {
            return Err(Error::invalid("transfer model parameters must all be positive"));
        }
        Ok(Self {
            bandwidth,
            request_overhead,
            pack_rate,
            streams,
        })
    }
}

/// `n_requests·overhead/streams + bytes/pack_rate + bytes/bandwidth`.
pub fn transfer_time(bytes: u64, n_requests: u64, tm: &TransferModel) -> f64 {
    let b = bytes as f64;
    n_requests as f64 * tm.request_overhead / tm.streams as f64 + b / tm.pack_rate + b / tm.bandwidth
}

/// Channel record `i` is gate column `i` followed by down channel `i`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CompactLayout {
    pub element_bytes: u64,
    /// Channels per transfer request.
    pub chunk_size: usize,
}

impl CompactLayout {
    pub fn new(element_bytes: u64, chunk_size: usize) -> Result<Self> {
        if element_bytes == 0 || chunk_size == 0 {
            return Err(Error::invalid("element bytes and chunk size must be >= 1"));
        }
        Ok(Self {
            element_bytes,
            chunk_size,
        })
    }

    pub fn record_bytes(&self, d_hidden: usize) -> u64 {
        2 * d_hidden as u64 * self.element_bytes
    }

    /// Requests for `channels` co-located records.
    pub fn requests(&self, channels: usize) -> u64 {
        channels.div_ceil(self.chunk_size) as u64
    }

    /// Requests when gate columns and down channels travel separately.
    pub fn split_requests(&self, channels: usize) -> u64 {
        2 * self.requests(channels)
    }
}

/// Masked channel records of one expert, ready to ship.
#[derive(Debug, Clone, PartialEq)]
pub struct PackedSelection {
    pub d_hidden: usize,
    pub channels: Vec<usize>,
    /// Records back to back, `2·d_hidden` values each.
    pub records: Vec<f32>,
    /// Record ranges per request, in channel units.
    pub requests: Vec<std::ops::Range<usize>>,
    /// Nominal bytes at the layout's element size.
    pub bytes: u64,
}

impl PackedSelection {
    /// `(channel, gate column, down channel)` per record.
    pub fn unpack(&self) -> Vec<(usize, &[f32], &[f32])> {
        let dh = self.d_hidden;
        self.channels
            .iter()
            .zip(self.records.chunks_exact(2 * dh))
            .map(|(&c, r)| (c, &r[..dh], &r[dh..]))
            .collect()
    }
}

pub fn pack_compact(e: &CompressedExpert, mask: &[bool], layout: &CompactLayout) -> Result<PackedSelection> {
    let (dh, di) = (e.d_hidden(), e.d_intermediate());
    if mask.len() != di {
        return Err(Error::dims("mask length", di, mask.len()));
    }
    let channels: Vec<usize> = mask.iter().enumerate().filter_map(|(i, &m)| m.then_some(i)).collect();
    let mut records = Vec::with_capacity(channels.len() * 2 * dh);
    for &c in &channels {
        records.extend_from_slice(e.gate().column(c).expect("gate is column-major"));
        records.extend_from_slice(e.down_t().column(c).expect("down_t is column-major"));
    }
    let requests = (0..channels.len())
        .step_by(layout.chunk_size)
        .map(|s| s..(s + layout.chunk_size).min(channels.len()))
        .collect();
    Ok(PackedSelection {
        d_hidden: dh,
        bytes: channels.len() as u64 * layout.record_bytes(dh),
        channels,
        records,
        requests,
    })
}

pub fn mask_from_indices(indices: &[usize], len: usize) -> Vec<bool> {
    let mut m = vec![false; len];
    for &i in indices {
        m[i] = true;
    }
    m
}

/// `c0 + c1·flops` per layer, where an expert costs its dense up
/// projection plus the kept fraction of gate and down.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ComputeModel {
    pub c0: f64,
    pub c1: f64,
}

impl ComputeModel {
    pub fn new(c0: f64, c1: f64) -> Result<Self> {
        if !(c0 >= 0.0 && c1 >= 0.0 && c0.is_finite() && c1.is_finite()) {
            return Err(Error::invalid("compute constants must be finite and >= 0"));
        }
        Ok(Self { c0, c1 })
    }

    pub fn expert_flops(d_hidden: usize, d_intermediate: usize, active: usize) -> f64 {
        let (dh, di) = (d_hidden as f64, d_intermediate as f64);
        let density = active as f64 / di;
        2.0 * dh * di + density * 4.0 * dh * di
    }

    pub fn layer_time(&self, flops: f64) -> f64 {
        self.c0 + self.c1 * flops
    }
}

/// Bytes one expert needs per token: dense versus a quantized up
/// projection plus the kept fraction of gate and down channels.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ExpertFootprint {
    pub dense_bytes: u64,
    pub up_bytes: u64,
    pub up_metadata_bytes: u64,
    pub channel_bytes: f64,
}

impl ExpertFootprint {
    pub fn new(
        d_hidden: usize,
        d_intermediate: usize,
        bits: u8,
        group_size: usize,
        density: f64,
        element_bytes: u64,
    ) -> Result<Self> {
        if !crate::quant::SUPPORTED_BITS.contains(&bits) || group_size == 0 {
            return Err(Error::invalid(format!(
                "unsupported quantization {bits} bits / group {group_size}"
            )));
        }
        if !(0.0..=1.0).contains(&density) {
            return Err(Error::invalid("density must be in [0, 1]"));
        }
        let n = d_hidden as u64 * d_intermediate as u64;
        let up = crate::quant::stored_bytes_for(d_hidden, d_intermediate, bits, group_size, false);
        let with_meta = crate::quant::stored_bytes_for(d_hidden, d_intermediate, bits, group_size, true);
        Ok(Self {
            dense_bytes: 3 * n * element_bytes,
            up_bytes: up,
            up_metadata_bytes: with_meta - up,
            channel_bytes: density * (2 * n * element_bytes) as f64,
        })
    }

    /// Dense over compressed, quantization metadata excluded.
    pub fn nominal_ratio(&self) -> f64 {
        self.dense_bytes as f64 / (self.up_bytes as f64 + self.channel_bytes)
    }

    pub fn ratio_with_metadata(&self) -> f64 {
        self.dense_bytes as f64 / ((self.up_bytes + self.up_metadata_bytes) as f64 + self.channel_bytes)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum ExpertPrefetch<'a> {
    /// Top-scoring experts from the learned predictor.
    Learned {
        predictor: &'a InterExpertPredictor,
        count: usize,
    },
    /// Exactly the experts the router will pick.
    Oracle,
    /// Nothing is prefetched.
    Disabled,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ChannelPrefetch {
    /// Earlier hidden state times the next expert's quantized up projection.
    Reuse,
    /// The channels the next layer will really use.
    Oracle,
    /// Every channel of a predicted expert.
    Full,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SimConfig<'a> {
    pub transfer: TransferModel,
    pub layout: CompactLayout,
    /// When false, gate columns and down channels are separate requests.
    pub compact: bool,
    pub vram_budget: u64,
    pub compute: ComputeModel,
    pub experts: ExpertPrefetch<'a>,
    pub channels: ChannelPrefetch,
    /// Keep every first-layer expert resident; that layer has no lookahead.
    pub pin_first_layer: bool,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LayerTiming {
    pub token: usize,
    pub layer: usize,
    pub compute_s: f64,
    /// Link time of the prefetches aimed at this layer.
    pub transfer_s: f64,
    pub stall_s: f64,
    pub sync_fetch_s: f64,
}

impl LayerTiming {
    pub fn latency(&self) -> f64 {
        self.stall_s + self.sync_fetch_s + self.compute_s
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct ByteAccounting {
    /// Bytes the true activations needed.
    pub demanded: u64,
    /// Demanded bytes already resident from an earlier layer or token.
    pub cache_hits: u64,
    /// Demanded bytes that came over the link for this use.
    pub useful: u64,
    /// Prefetched bytes that their layer did not use.
    pub wasted: u64,
}

impl ByteAccounting {
    pub fn transferred(&self) -> u64 {
        self.useful + self.wasted
    }

    pub fn balanced(&self) -> bool {
        self.useful + self.cache_hits == self.demanded
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DecodeTimeline {
    pub layers: Vec<LayerTiming>,
    pub token_latencies: Vec<f64>,
    pub bytes: ByteAccounting,
    /// Requests carrying whole quantized up projections.
    pub up_requests: u64,
    /// Requests carrying channel records.
    pub channel_requests: u64,
}

impl DecodeTimeline {
    pub fn requests(&self) -> u64 {
        self.up_requests + self.channel_requests
    }

    pub fn total_s(&self) -> f64 {
        self.token_latencies.iter().sum()
    }

    pub fn tps(&self) -> f64 {
        self.token_latencies.len() as f64 / self.total_s()
    }

    pub fn total_stall_s(&self) -> f64 {
        self.layers.iter().map(|l| l.stall_s).sum()
    }

    pub fn total_compute_s(&self) -> f64 {
        self.layers.iter().map(|l| l.compute_s).sum()
    }

    pub fn cache_hit_rate(&self) -> f64 {
        if self.bytes.demanded == 0 {
            0.0
        } else {
            self.bytes.cache_hits as f64 / self.bytes.demanded as f64
        }
    }
}

/// `token,layer,compute_s,transfer_s,stall_s,sync_fetch_s`.
pub fn timeline_csv(t: &DecodeTimeline) -> String {
    let mut s = String::from("token,layer,compute_s,transfer_s,stall_s,sync_fetch_s\n");
    for l in &t.layers {
        let _ = writeln!(
            s,
            "{},{},{},{},{},{}",
            l.token, l.layer, l.compute_s, l.transfer_s, l.stall_s, l.sync_fetch_s
        );
    }
    s
}

/// `token,latency_s,tps`, one row per token.
pub fn token_csv(t: &DecodeTimeline) -> String {
    let mut s = String::from("token,latency_s,tps\n");
    for (i, l) in t.token_latencies.iter().enumerate() {
        let _ = writeln!(s, "{i},{l},{}", 1.0 / l);
    }
    s
}

/// `tokens,total_s,tps,bytes_transferred,cache_hit_rate`; bytes count
/// everything that crossed the link.
pub fn report_tps(t: &DecodeTimeline) -> Result<String> {
    if t.token_latencies.is_empty() {
        return Err(Error::invalid("timeline has no tokens"));
    }
    let mut s = String::from("tokens,total_s,tps,bytes_transferred,cache_hit_rate\n");
    let _ = writeln!(
        s,
        "{},{},{},{},{}",
        t.token_latencies.len(),
        t.total_s(),
        t.tps(),
        t.bytes.transferred(),
        t.cache_hit_rate()
    );
    Ok(s)
}

#[derive(Debug, Clone)]
struct Entry {
    layer: usize,
    expert: usize,
    up: bool,
    channels: Vec<bool>,
    count: usize,
    last_used: u64,
    pinned: bool,
    /// Prefetched but not yet consumed, with arrival times.
    fresh_up: Option<f64>,
    fresh: Vec<(usize, f64)>,
}

/// Resident experts under a byte budget. Each entry holds the quantized
/// up projection and any subset of channel records; eviction removes a
/// whole entry, least recently used first.
#[derive(Debug, Clone)]
pub struct CacheState {
    capacity: u64,
    used: u64,
    up_bytes: u64,
    record_bytes: u64,
    d_intermediate: usize,
    tick: u64,
    entries: Vec<Entry>,
}

impl CacheState {
    pub fn new(capacity: u64, up_bytes: u64, record_bytes: u64, d_intermediate: usize) -> Self {
        Self {
            capacity,
            used: 0,
            up_bytes,
            record_bytes,
            d_intermediate,
            tick: 0,
            entries: Vec::new(),
        }
    }

    pub fn capacity(&self) -> u64 {
        self.capacity
    }

    pub fn used(&self) -> u64 {
        self.used
    }

    pub fn resident(&self) -> Vec<(usize, usize, u64)> {
        self.entries
            .iter()
            .map(|e| (e.layer, e.expert, self.entry_bytes(e)))
            .collect()
    }

    fn entry_bytes(&self, e: &Entry) -> u64 {
        u64::from(e.up) * self.up_bytes + e.count as u64 * self.record_bytes
    }

    fn find(&self, layer: usize, expert: usize) -> Option<usize> {
        self.entries.iter().position(|e| e.layer == layer && e.expert == expert)
    }

    fn has_up(&self, layer: usize, expert: usize) -> bool {
        self.find(layer, expert).is_some_and(|i| self.entries[i].up)
    }

    fn has_channel(&self, layer: usize, expert: usize, c: usize) -> bool {
        self.find(layer, expert).is_some_and(|i| self.entries[i].channels[c])
    }

    pub fn touch(&mut self, layer: usize, expert: usize) {
        self.tick += 1;
        if let Some(i) = self.find(layer, expert) {
            self.entries[i].last_used = self.tick;
        }
    }

    /// Evicts least-recently-used entries other than `keep` and `locked`
    /// until `extra` more bytes fit. Returns false, evicting nothing, if
    /// that is impossible.
    fn make_room(&mut self, extra: u64, keep: (usize, usize), locked: &[(usize, usize)]) -> bool {
        let evictable = |e: &Entry| {
            !e.pinned
                && (e.layer, e.expert) != keep
                && !locked.contains(&(e.layer, e.expert))
                && e.fresh_up.is_none()
                && e.fresh.is_empty()
        };
        let freeable: u64 = self
            .entries
            .iter()
            .filter(|e| evictable(e))
            .map(|e| self.entry_bytes(e))
            .sum();
        if self.used + extra > self.capacity.saturating_add(freeable) {
            return false;
        }
        while self.used + extra > self.capacity {
            let (idx, _) = self
                .entries
                .iter()
                .enumerate()
                .filter(|(_, e)| evictable(e))
                .min_by_key(|(_, e)| e.last_used)
                .expect("enough evictable bytes were counted");
            let e = self.entries.swap_remove(idx);
            self.used -= self.entry_bytes(&e);
        }
        true
    }

    /// Adds the up projection (if `up`) and `channels` to an entry. With
    /// `arrival` set the items are marked as an unconsumed prefetch.
    /// Returns false when the budget cannot hold them.
    fn insert(
        &mut self,
        layer: usize,
        expert: usize,
        up: bool,
        channels: &[usize],
        arrival: Option<f64>,
        locked: &[(usize, usize)],
    ) -> bool {
        let idx = self.find(layer, expert);
        let add_up = up && !idx.is_some_and(|i| self.entries[i].up);
        let new: Vec<usize> = channels
            .iter()
            .copied()
            .filter(|&c| !idx.is_some_and(|i| self.entries[i].channels[c]))
            .collect();
        let extra = u64::from(add_up) * self.up_bytes + new.len() as u64 * self.record_bytes;
        if !self.make_room(extra, (layer, expert), locked) {
            return false;
        }
        self.tick += 1;
        let idx = match self.find(layer, expert) {
            Some(i) => i,
            None => {
                self.entries.push(Entry {
                    layer,
                    expert,
                    up: false,
                    channels: vec![false; self.d_intermediate],
                    count: 0,
                    last_used: self.tick,
                    pinned: false,
                    fresh_up: None,
                    fresh: Vec::new(),
                });
                self.entries.len() - 1
            }
        };
        let e = &mut self.entries[idx];
        e.last_used = self.tick;
        if add_up {
            e.up = true;
            if let Some(t) = arrival {
                e.fresh_up = Some(t);
            }
        }
        for &c in &new {
            e.channels[c] = true;
            if let Some(t) = arrival {
                e.fresh.push((c, t));
            }
        }
        e.count += new.len();
        self.used += extra;
        true
    }
}

/// Channel requests for one expert transfer under the chosen layout.
fn channel_requests(layout: &CompactLayout, compact: bool, channels: usize) -> u64 {
    if compact {
        layout.requests(channels)
    } else {
        layout.split_requests(channels)
    }
}

struct Link {
    free_at: f64,
}

impl Link {
    /// Queues a transfer at `now`; returns (arrival, duration).
    fn send(&mut self, now: f64, bytes: u64, requests: u64, tm: &TransferModel) -> (f64, f64) {
        let d = transfer_time(bytes, requests, tm);
        let start = now.max(self.free_at);
        self.free_at = start + d;
        (self.free_at, d)
    }
}

/// Smallest budget the simulator accepts: every pinned expert plus one
/// full compressed expert.
pub fn min_vram_budget(model: &CompressedModel, layout: &CompactLayout, pin_first_layer: bool) -> u64 {
    let cfg = model.config();
    let e = model.expert(0, 0);
    let full = e.up_bytes() + cfg.d_intermediate as u64 * layout.record_bytes(cfg.d_hidden);
    let pinned = if pin_first_layer { cfg.experts as u64 * full } else { 0 };
    pinned + full
}

/// Runs every token through the compressed model and replays the
/// resulting activations on the simulated device.
pub fn simulate_decode(model: &CompressedModel, tokens: &[Vec<f32>], cfg: &SimConfig) -> Result<DecodeTimeline> {
    let traces = tokens
        .iter()
        .map(|x| forward_token(model, x))
        .collect::<Result<Vec<_>>>()?;
    simulate_traces(model, &traces, cfg)
}

fn predicted_mask(
    model: &CompressedModel,
    cfg: &SimConfig,
    trace: &TokenTrace,
    layer: usize,
    expert: usize,
) -> Result<Vec<usize>> {
    let e = model.expert(layer, expert);
    match cfg.channels {
        ChannelPrefetch::Full => Ok((0..e.d_intermediate()).collect()),
        ChannelPrefetch::Reuse => predict_mask(&trace.layers[layer - 1].input, e.up_q(), e.threshold()),
        ChannelPrefetch::Oracle => predict_mask(&trace.layers[layer].input, e.up_q(), e.threshold()),
    }
}

/// Same as [`simulate_decode`] on precomputed token traces.
pub fn simulate_traces(model: &CompressedModel, traces: &[TokenTrace], cfg: &SimConfig) -> Result<DecodeTimeline> {
    if traces.is_empty() {
        return Err(Error::invalid("no tokens to simulate"));
    }
    let mc = *model.config();
    let (m, dh, di) = (mc.layers, mc.d_hidden, mc.d_intermediate);
    let layout = cfg.layout;
    let rec = layout.record_bytes(dh);
    let up_bytes = model.expert(0, 0).up_bytes();
    let floor = min_vram_budget(model, &layout, cfg.pin_first_layer);
    if cfg.vram_budget < floor {
        return Err(Error::CacheCapacity {
            capacity: cfg.vram_budget,
            required: floor,
            what: if cfg.pin_first_layer {
                "the pinned first layer plus one compressed expert"
            } else {
                "one compressed expert"
            },
        });
    }
    if let ExpertPrefetch::Learned { predictor, count } = cfg.experts {
        if predictor.layers() != m || predictor.experts() != mc.experts {
            return Err(Error::invalid("predictor shape does not match the model"));
        }
        if count < predictor.top_k() || count > mc.experts {
            return Err(Error::invalid(format!(
                "prefetch count {count} outside {}..={}",
                predictor.top_k(),
                mc.experts
            )));
        }
    }

    let mut cache = CacheState::new(cfg.vram_budget, up_bytes, rec, di);
    if cfg.pin_first_layer {
        let all: Vec<usize> = (0..di).collect();
        for j in 0..mc.experts {
            let ok = cache.insert(0, j, true, &all, None, &[]);
            debug_assert!(ok);
            let i = cache.find(0, j).expect("just inserted");
            cache.entries[i].pinned = true;
        }
    }

    let mut link = Link { free_at: 0.0 };
    let mut clock = 0.0f64;
    let mut bytes = ByteAccounting::default();
    let (mut up_requests, mut ch_requests) = (0u64, 0u64);
    let mut layers = Vec::with_capacity(traces.len() * m);
    let mut token_latencies = Vec::with_capacity(traces.len());
    // link time of prefetches aimed at the next layer
    let mut pending_transfer = 0.0f64;

    for (tok, trace) in traces.iter().enumerate() {
        let mut latency = 0.0f64;
        for i in 0..m {
            let start = clock;
            let lt = &trace.layers[i];
            let routed: Vec<(usize, usize)> = lt.route.indices.iter().map(|&j| (i, j)).collect();

            // wait for prefetched items this layer uses
            let mut ready = start;
            let mut missing_bytes = 0u64;
            let (mut missing_up, mut missing_ch) = (0u64, 0u64);
            let mut sync_items: Vec<(usize, bool, Vec<usize>)> = Vec::new();
            for (slot, &j) in lt.route.indices.iter().enumerate() {
                let mask = &lt.active[slot];
                bytes.demanded += up_bytes + mask.len() as u64 * rec;
                let idx = cache.find(i, j);
                let mut need_up = true;
                let mut need: Vec<usize> = Vec::new();
                if let Some(ix) = idx {
                    let e = &mut cache.entries[ix];
                    if e.up {
                        need_up = false;
                        match e.fresh_up.take() {
                            Some(t) => {
                                ready = ready.max(t);
                                bytes.useful += up_bytes;
                            }
                            None => bytes.cache_hits += up_bytes,
                        }
                    }
                    for &c in mask {
                        if e.channels[c] {
                            match e.fresh.iter().position(|&(fc, _)| fc == c) {
                                Some(p) => {
                                    let (_, t) = e.fresh.swap_remove(p);
                                    ready = ready.max(t);
                                    bytes.useful += rec;
                                }
                                None => bytes.cache_hits += rec,
                            }
                        } else {
                            need.push(c);
                        }
                    }
                } else {
                    need.clone_from(mask);
                }
                if need_up || !need.is_empty() {
                    missing_bytes += u64::from(need_up) * up_bytes + need.len() as u64 * rec;
                    missing_up += u64::from(need_up);
                    missing_ch += channel_requests(&layout, cfg.compact, need.len());
                    sync_items.push((j, need_up, need));
                }
            }
            // prefetched items of this layer that went unused
            for e in cache.entries.iter_mut().filter(|e| e.layer == i) {
                if e.fresh_up.take().is_some() {
                    bytes.wasted += up_bytes;
                }
                bytes.wasted += e.fresh.len() as u64 * rec;
                e.fresh.clear();
            }
            let stall = ready - start;

            // fetch what is still missing
            let mut compute_start = ready;
            if missing_bytes > 0 {
                let (arrival, _) = link.send(ready, missing_bytes, missing_up + missing_ch, &cfg.transfer);
                up_requests += missing_up;
                ch_requests += missing_ch;
                bytes.useful += missing_bytes;
                compute_start = arrival;
                for (j, up, need) in &sync_items {
                    // streamed through when the budget cannot hold it
                    let _ = cache.insert(i, *j, *up, need, None, &routed);
                }
            }
            let sync = compute_start - ready;
            for &(_, j) in &routed {
                cache.touch(i, j);
            }

            // prefetch for the next layer while this one computes
            let transfer_s = std::mem::take(&mut pending_transfer);
            if i + 1 < m {
                let next = i + 1;
                let predicted: Vec<usize> = match cfg.experts {
                    ExpertPrefetch::Disabled => Vec::new(),
                    ExpertPrefetch::Oracle => trace.layers[next].route.indices.clone(),
                    ExpertPrefetch::Learned { predictor, count } => predict_experts(predictor, &lt.input, next, count)?,
                };
                for j in predicted {
                    let mask = predicted_mask(model, cfg, trace, next, j)?;
                    let up = !cache.has_up(next, j);
                    let new: Vec<usize> = mask.into_iter().filter(|&c| !cache.has_channel(next, j, c)).collect();
                    if !up && new.is_empty() {
                        continue;
                    }
                    let b = u64::from(up) * up_bytes + new.len() as u64 * rec;
                    let r_ch = channel_requests(&layout, cfg.compact, new.len());
                    // the arrival time is only known once queued, so
                    // reserve space first and fill it in after
                    if !cache.insert(next, j, up, &new, Some(f64::INFINITY), &routed) {
                        continue;
                    }
                    let (arrival, d) = link.send(compute_start, b, u64::from(up) + r_ch, &cfg.transfer);
                    up_requests += u64::from(up);
                    ch_requests += r_ch;
                    pending_transfer += d;
                    let ix = cache.find(next, j).expect("just inserted");
                    let e = &mut cache.entries[ix];
                    if up {
                        e.fresh_up = Some(arrival);
                    }
                    for f in e.fresh.iter_mut().filter(|f| f.1 == f64::INFINITY) {
                        f.1 = arrival;
                    }
                }
            }

            let flops: f64 = lt
                .active
                .iter()
                .map(|a| ComputeModel::expert_flops(dh, di, a.len()))
                .sum();
            let compute = cfg.compute.layer_time(flops);
            clock = compute_start + compute;
            let timing = LayerTiming {
                token: tok,
                layer: i,
                compute_s: compute,
                transfer_s,
                stall_s: stall,
                sync_fetch_s: sync,
            };
            latency += timing.latency();
            layers.push(timing);
        }
        token_latencies.push(latency);
    }
    Ok(DecodeTimeline {
        layers,
        token_latencies,
        bytes,
        up_requests,
        channel_requests: ch_requests,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{compress_expert, ExpertWeights};
    use crate::quant::QuantConfig;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn transfer_time_cases() {
        let tm = TransferModel::new(25e9, 5e-6, 100e9, 1).unwrap();
        assert_eq!(transfer_time(0, 0, &tm), 0.0);
        let t = transfer_time(16_384, 1, &tm);
        assert!((t - (5e-6 + 1.6384e-7 + 6.5536e-7)).abs() < 1e-15);
        assert!((t - 5.82e-6).abs() < 1e-8);
        let l1 = CompactLayout::new(2, 8).unwrap();
        let l2 = CompactLayout::new(2, 16).unwrap();
        let b = 100 * l1.record_bytes(4096);
        assert!(transfer_time(b, l2.requests(100), &tm) < transfer_time(b, l1.requests(100), &tm));
        assert!(TransferModel::new(0.0, 1.0, 1.0, 1).is_err());
    }

    #[test]
    fn footprint_at_large_dims() {
        let f = ExpertFootprint::new(4096, 14336, 2, 64, 0.1, 2).unwrap();
        // 6 bytes per weight dense, 0.25 + 0.1·4 compressed
        assert!((f.nominal_ratio() - 6.0 / 0.65).abs() < 1e-9);
        assert!((f.ratio_with_metadata() - 6.0 / 0.7125).abs() < 1e-9);
        assert!(ExpertFootprint::new(8, 8, 5, 64, 0.1, 2).is_err());
    }

    #[test]
    fn compact_layout_counts() {
        let l = CompactLayout::new(2, 16).unwrap();
        assert_eq!(l.record_bytes(4096), 16_384);
        for n in [0, 1, 15, 16, 17, 1000] {
            assert_eq!(l.split_requests(n), 2 * l.requests(n));
        }
    }

    fn small_expert() -> CompressedExpert {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let e = ExpertWeights::random(8, 20, 0.3, 1.0, &mut rng);
        compress_expert(&e, &QuantConfig::new(2, 64), 0.1).unwrap()
    }

    #[test]
    fn pack_round_trip() {
        let e = small_expert();
        let l = CompactLayout::new(2, 3).unwrap();
        let mask = mask_from_indices(&[0, 3, 4, 9, 19], 20);
        let p = pack_compact(&e, &mask, &l).unwrap();
        assert_eq!(p.bytes, 5 * 32);
        assert_eq!(p.requests, vec![0..3, 3..5]);
        for (c, g, d) in p.unpack() {
            assert_eq!(g, e.gate().column(c).unwrap());
            assert_eq!(d, e.down_t().column(c).unwrap());
        }
        let empty = pack_compact(&e, &[false; 20], &l).unwrap();
        assert_eq!((empty.bytes, empty.requests.len()), (0, 0));
        assert!(pack_compact(&e, &[true; 3], &l).is_err());
    }

    #[test]
    fn cache_evicts_least_recent() {
        let mut c = CacheState::new(100, 10, 5, 8);
        assert!(c.insert(1, 0, true, &[0, 1], None, &[])); // 20
        assert!(c.insert(1, 1, true, &[0, 1, 2, 3], None, &[])); // 30
        assert!(c.insert(2, 0, true, &[0, 1, 2, 3, 4, 5, 6, 7], None, &[])); // 50
        assert_eq!(c.used(), 100);
        c.touch(1, 0);
        assert!(c.insert(2, 1, true, &[], None, &[]));
        // (1, 1) was least recently used
        let keys: Vec<(usize, usize)> = c.resident().iter().map(|r| (r.0, r.1)).collect();
        assert!(!keys.contains(&(1, 1)) && keys.contains(&(1, 0)));
        assert!(c.used() <= c.capacity());
        // locked entries survive even when that means refusing
        assert!(!c.insert(3, 0, true, &[0, 1, 2, 3, 4, 5, 6, 7], None, &[(1, 0), (2, 0), (2, 1)]));
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #[test]
            fn cache_stays_within_capacity(
                ops in prop::collection::vec((0usize..3, 0usize..4, any::<bool>(), prop::collection::vec(0usize..8, 0..8)), 1..60),
                cap in 20u64..200,
            ) {
                let mut c = CacheState::new(cap, 10, 5, 8);
                for (l, e, up, ch) in ops {
                    let _ = c.insert(l, e, up, &ch, None, &[]);
                    prop_assert!(c.used() <= c.capacity());
                    let sum: u64 = c.resident().iter().map(|r| r.2).sum();
                    prop_assert_eq!(sum, c.used());
                }
            }
        }
    }
}
