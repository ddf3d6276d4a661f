//! Magnitude sparsity and per-expert threshold calibration.
//!
//! A threshold `t` keeps entries with `|a| >= t` and zeroes the rest.
//! Calibration picks, per (layer, expert), the smallest sampled magnitude
//! whose empirical CDF reaches the target sparsity `k`.

use std::fmt::Write as _;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::la::cosine;
use crate::model::{forward_token, ExpertBank};

pub const DEFAULT_RESERVOIR: usize = 1 << 16;
pub const MIN_CALIBRATION_SAMPLES: usize = 1000;

fn check_threshold(t: f32) -> Result<()> {
    if t >= 0.0 {
        Ok(())
    } else {
        Err(Error::invalid(format!("threshold must be >= 0, got {t}")))
    }
}

pub fn apply_sparsity(a: &[f32], t: f32) -> Result<Vec<f32>> {
    check_threshold(t)?;
    Ok(a.iter().map(|&v| if v.abs() >= t { v } else { 0.0 }).collect())
}

/// Fraction of entries with `|a| >= t`; an empty slice has density 0.
pub fn realized_density(a: &[f32], t: f32) -> Result<f64> {
    check_threshold(t)?;
    if a.is_empty() {
        return Ok(0.0);
    }
    let kept = a.iter().filter(|v| v.abs() >= t).count();
    Ok(kept as f64 / a.len() as f64)
}

/// Indices kept by the threshold, ascending.
pub fn active_channels(a: &[f32], t: f32) -> Vec<usize> {
    a.iter()
        .enumerate()
        .filter_map(|(i, v)| (v.abs() >= t).then_some(i))
        .collect()
}

/// `min{v : ECDF(v) >= k}` over the given magnitudes; `k = 0` maps to 0.
pub fn quantile_threshold(magnitudes: &mut [f32], k: f64) -> Result<f32> {
    if !(0.0..1.0).contains(&k) {
        return Err(Error::invalid(format!("target sparsity {k} outside [0, 1)")));
    }
    if magnitudes.is_empty() {
        return Err(Error::invalid("no samples to calibrate from"));
    }
    if k == 0.0 {
        return Ok(0.0);
    }
    let n = magnitudes.len();
    // smallest rank r (1-based) with r / n >= k
    let rank = ((k * n as f64) - 1e-9).ceil().max(1.0) as usize;
    let (_, nth, _) = magnitudes.select_nth_unstable_by(rank - 1, f32::total_cmp);
    Ok(*nth)
}

/// Per-(layer, expert) reservoir of `|a_up|` magnitudes.
#[derive(Debug, Clone)]
pub struct ActivationSampleSet {
    layers: usize,
    experts: usize,
    cap: usize,
    cells: Vec<Reservoir>,
}

#[derive(Debug, Clone, Default)]
struct Reservoir {
    samples: Vec<f32>,
    seen: u64,
    visits: u64,
}

impl ActivationSampleSet {
    pub fn new(layers: usize, experts: usize, cap: usize) -> Self {
        Self {
            layers,
            experts,
            cap: cap.max(1),
            cells: vec![Reservoir::default(); layers * experts],
        }
    }

    pub fn layers(&self) -> usize {
        self.layers
    }

    pub fn experts(&self) -> usize {
        self.experts
    }

    fn cell(&self, layer: usize, expert: usize) -> &Reservoir {
        &self.cells[layer * self.experts + expert]
    }

    /// Records the magnitudes of one expert visit. Once the reservoir is
    /// full each new value replaces a uniformly chosen slot with
    /// probability `cap / seen`.
    pub fn record(&mut self, layer: usize, expert: usize, values: &[f32], rng: &mut impl Rng) {
        let cap = self.cap;
        let cell = &mut self.cells[layer * self.experts + expert];
        cell.visits += 1;
        for &v in values {
            let m = v.abs();
            if !m.is_finite() {
                continue;
            }
            cell.seen += 1;
            if cell.samples.len() < cap {
                cell.samples.push(m);
            } else {
                let slot = rng.random_range(0..cell.seen);
                if (slot as usize) < cap {
                    cell.samples[slot as usize] = m;
                }
            }
        }
    }

    pub fn samples(&self, layer: usize, expert: usize) -> &[f32] {
        &self.cell(layer, expert).samples
    }

    /// Values offered to the reservoir, including those not retained.
    pub fn seen(&self, layer: usize, expert: usize) -> u64 {
        self.cell(layer, expert).seen
    }

    pub fn visits(&self, layer: usize, expert: usize) -> u64 {
        self.cell(layer, expert).visits
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ThresholdTable {
    layers: usize,
    experts: usize,
    target_sparsity: f64,
    thresholds: Vec<f32>,
}

impl ThresholdTable {
    pub fn new(layers: usize, experts: usize, target_sparsity: f64, thresholds: Vec<f32>) -> Result<Self> {
        if thresholds.len() != layers * experts {
            return Err(Error::dims("threshold table size", layers * experts, thresholds.len()));
        }
        if thresholds.iter().any(|t| !(*t >= 0.0 && t.is_finite())) {
            return Err(Error::invalid("thresholds must be finite and >= 0"));
        }
        if !(0.0..1.0).contains(&target_sparsity) {
            return Err(Error::invalid(format!(
                "target sparsity {target_sparsity} outside [0, 1)"
            )));
        }
        Ok(Self {
            layers,
            experts,
            target_sparsity,
            thresholds,
        })
    }

    /// Every expert gets the same threshold.
    pub fn uniform(layers: usize, experts: usize, t: f32) -> Result<Self> {
        Self::new(layers, experts, 0.0, vec![t; layers * experts])
    }

    pub fn layers(&self) -> usize {
        self.layers
    }

    pub fn experts(&self) -> usize {
        self.experts
    }

    pub fn target_sparsity(&self) -> f64 {
        self.target_sparsity
    }

    pub fn get(&self, layer: usize, expert: usize) -> f32 {
        self.thresholds[layer * self.experts + expert]
    }

    /// `layer,expert,threshold,target_sparsity`, one row per expert.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("layer,expert,threshold,target_sparsity\n");
        for l in 0..self.layers {
            for e in 0..self.experts {
                let _ = writeln!(s, "{l},{e},{},{}", self.get(l, e), self.target_sparsity);
            }
        }
        s
    }

    pub fn from_csv(text: &str) -> Result<Self> {
        let mut lines = text.lines();
        if lines.next().map(str::trim) != Some("layer,expert,threshold,target_sparsity") {
            return Err(Error::Corrupt("threshold CSV header mismatch".into()));
        }
        let mut rows = Vec::new();
        for (n, line) in lines.enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let bad = || Error::Corrupt(format!("threshold CSV line {}: {line:?}", n + 2));
            let f: Vec<&str> = line.split(',').collect();
            if f.len() != 4 {
                return Err(bad());
            }
            let layer: usize = f[0].parse().map_err(|_| bad())?;
            let expert: usize = f[1].parse().map_err(|_| bad())?;
            let t: f32 = f[2].parse().map_err(|_| bad())?;
            let k: f64 = f[3].parse().map_err(|_| bad())?;
            rows.push((layer, expert, t, k));
        }
        let layers = rows.iter().map(|r| r.0 + 1).max().unwrap_or(0);
        let experts = rows.iter().map(|r| r.1 + 1).max().unwrap_or(0);
        let k = rows.first().map_or(0.0, |r| r.3);
        let mut thresholds = vec![f32::NAN; layers * experts];
        for (l, e, t, kk) in rows {
            if kk != k {
                return Err(Error::Corrupt("mixed target sparsity in threshold CSV".into()));
            }
            thresholds[l * experts + e] = t;
        }
        if thresholds.iter().any(|t| t.is_nan()) {
            return Err(Error::Corrupt("threshold CSV does not cover every expert".into()));
        }
        Self::new(layers, experts, k, thresholds)
    }
}

/// Per-expert quantile thresholds. Experts are calibrated independently,
/// so the result does not depend on how the work is split across threads.
pub fn calibrate(samples: &ActivationSampleSet, k: f64) -> Result<ThresholdTable> {
    calibrate_with_min(samples, k, MIN_CALIBRATION_SAMPLES)
}

pub fn calibrate_with_min(samples: &ActivationSampleSet, k: f64, min_samples: usize) -> Result<ThresholdTable> {
    if !(0.0..1.0).contains(&k) {
        return Err(Error::invalid(format!("target sparsity {k} outside [0, 1)")));
    }
    let thresholds = samples
        .cells
        .par_iter()
        .enumerate()
        .map(|(idx, cell)| {
            if cell.samples.is_empty() {
                return Err(Error::invalid(format!(
                    "expert ({}, {}) has no calibration samples",
                    idx / samples.experts,
                    idx % samples.experts
                )));
            }
            if cell.samples.len() < min_samples {
                return Err(Error::invalid(format!(
                    "expert ({}, {}) has {} samples, need at least {min_samples}",
                    idx / samples.experts,
                    idx % samples.experts,
                    cell.samples.len()
                )));
            }
            let mut sorted = cell.samples.clone();
            quantile_threshold(&mut sorted, k)
        })
        .collect::<Result<Vec<f32>>>()?;
    ThresholdTable::new(samples.layers, samples.experts, k, thresholds)
}

/// Mean cosine similarity between MoE inputs of consecutive layers.
#[derive(Debug, Clone, PartialEq)]
pub struct SimilarityReport {
    /// Entry `i` compares the inputs of layers `i` and `i + 1`.
    pub mean_similarity: Vec<f64>,
    pub samples: usize,
}

impl SimilarityReport {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("transition,mean_cosine,samples\n");
        for (i, v) in self.mean_similarity.iter().enumerate() {
            let _ = writeln!(s, "{i},{v},{}", self.samples);
        }
        s
    }
}

/// Runs every token through the model, sampling `|a_up|` of each routed
/// expert and the cosine similarity between consecutive MoE inputs.
pub fn collect_stats<B: ExpertBank>(
    model: &B,
    tokens: &[Vec<f32>],
    cap: usize,
    seed: u64,
) -> Result<(ActivationSampleSet, SimilarityReport)> {
    if tokens.is_empty() {
        return Err(Error::invalid("token stream is empty"));
    }
    let cfg = model.config();
    let mut set = ActivationSampleSet::new(cfg.layers, cfg.experts, cap);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let transitions = cfg.layers.saturating_sub(1);
    let mut sims = vec![0.0f64; transitions];
    for x in tokens {
        let trace = forward_token(model, x)?;
        for (l, layer) in trace.layers.iter().enumerate() {
            for (slot, &e) in layer.route.indices.iter().enumerate() {
                set.record(l, e, &layer.up_activations[slot], &mut rng);
            }
        }
        for (i, s) in sims.iter_mut().enumerate() {
            *s += f64::from(cosine(&trace.layers[i].input, &trace.layers[i + 1].input)?);
        }
    }
    let n = tokens.len();
    Ok((
        set,
        SimilarityReport {
            mean_similarity: sims.into_iter().map(|s| s / n as f64).collect(),
            samples: n,
        },
    ))
}
