//! Group-wise affine low-bit quantization.
//!
//! Elements are taken in column-major order and split into groups of
//! `group_size` consecutive elements; each group has its own `scale` and
//! `zero`, and an element is stored as `code = round((x - zero) / scale)`.
//! Codes are bit-packed little-endian: code `e` occupies stream bits
//! `[e·b, (e+1)·b)`, bit `n` living in byte `n / 8` at position `n % 8`.
//!
//! In memory the per-group metadata is f32. The on-disk form stores it as
//! IEEE half precision, which is also what [`QuantizedMatrix::stored_bytes`]
//! accounts for.

use std::io::{Read, Write};

use half::f16;

use crate::binio;
use crate::error::{Error, Result};
use crate::la::{Matrix, Order};

pub const SUPPORTED_BITS: [u8; 5] = [1, 2, 3, 4, 8];
pub const DEFAULT_GROUP_SIZE: usize = 64;
const REFINE_ITERS: usize = 10;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct QuantConfig {
    pub bits: u8,
    pub group_size: usize,
    /// Least-squares refinement of `(scale, zero)` after min-max init.
    pub refine: bool,
}

impl QuantConfig {
    pub fn new(bits: u8, group_size: usize) -> Self {
        Self {
            bits,
            group_size,
            refine: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct QuantizedMatrix {
    rows: usize,
    cols: usize,
    bits: u8,
    group_size: usize,
    codes: Vec<u8>,
    scales: Vec<f32>,
    zeros: Vec<f32>,
}

fn check_bits(bits: u8) -> Result<()> {
    if SUPPORTED_BITS.contains(&bits) {
        Ok(())
    } else {
        Err(Error::invalid(format!(
            "unsupported bit width {bits}, expected one of {SUPPORTED_BITS:?}"
        )))
    }
}

pub fn packed_len(n_codes: usize, bits: u8) -> usize {
    (n_codes * bits as usize).div_ceil(8)
}

/// Packs `codes` (each `< 2^bits`) into a little-endian bit stream.
pub fn pack_codes(codes: &[u8], bits: u8) -> Vec<u8> {
    let b = bits as usize;
    let mut out = vec![0u8; packed_len(codes.len(), bits)];
    if b == 8 {
        out.copy_from_slice(codes);
        return out;
    }
    let mask = (1u16 << b) - 1;
    for (e, &c) in codes.iter().enumerate() {
        let bit = e * b;
        let (byte, off) = (bit / 8, bit % 8);
        let v = (u16::from(c) & mask) << off;
        out[byte] |= v as u8;
        if off + b > 8 {
            out[byte + 1] |= (v >> 8) as u8;
        }
    }
    out
}

#[inline]
fn code_at(packed: &[u8], bits: u8, e: usize) -> u8 {
    let b = bits as usize;
    let bit = e * b;
    let (byte, off) = (bit / 8, bit % 8);
    let lo = u16::from(packed[byte]);
    let hi = if off + b > 8 { u16::from(packed[byte + 1]) } else { 0 };
    (((lo | (hi << 8)) >> off) & ((1u16 << b) - 1)) as u8
}

/// Decodes codes `start..start + out.len()` into `out` as f32.
fn decode_into(packed: &[u8], bits: u8, start: usize, out: &mut [f32]) {
    let b = bits as usize;
    let aligned = (start * b).is_multiple_of(8) && 8usize.is_multiple_of(b);
    if !aligned {
        for (i, o) in out.iter_mut().enumerate() {
            *o = f32::from(code_at(packed, bits, start + i));
        }
        return;
    }
    let per_byte = 8 / b;
    let first = start * b / 8;
    let full = out.len() / per_byte;
    let mask = ((1u16 << b) - 1) as u8;
    match bits {
        8 => {
            let n = out.len();
            for (o, &c) in out.iter_mut().zip(&packed[first..first + n]) {
                *o = f32::from(c);
            }
        }
        _ => {
            for (chunk, &byte) in out.chunks_exact_mut(per_byte).zip(&packed[first..first + full]) {
                for (k, o) in chunk.iter_mut().enumerate() {
                    *o = f32::from((byte >> (k * b)) & mask);
                }
            }
            for (i, o) in out.iter_mut().enumerate().skip(full * per_byte) {
                *o = f32::from(code_at(packed, bits, start + i));
            }
        }
    }
}

/// Inverse of [`pack_codes`]; rejects streams with nonzero padding bits.
pub fn unpack_codes(packed: &[u8], bits: u8, n: usize) -> Result<Vec<u8>> {
    check_bits(bits)?;
    check_packing(packed, bits, n)?;
    Ok((0..n).map(|e| code_at(packed, bits, e)).collect())
}

fn check_packing(packed: &[u8], bits: u8, n: usize) -> Result<()> {
    let want = packed_len(n, bits);
    if packed.len() != want {
        return Err(Error::Corrupt(format!("packed code length {} != {want}", packed.len())));
    }
    let used = n * bits as usize;
    if !used.is_multiple_of(8) {
        let tail = packed[want - 1] >> (used % 8);
        if tail != 0 {
            return Err(Error::Corrupt("nonzero trailing bits in packed codes".into()));
        }
    }
    Ok(())
}

fn group_codes(values: &[f32], scale: f32, zero: f32, levels: f32, out: &mut Vec<u8>) {
    for &x in values {
        out.push(((x - zero) / scale).round().clamp(0.0, levels) as u8);
    }
}

fn group_sse(values: &[f32], codes: &[u8], scale: f32, zero: f32) -> f64 {
    values
        .iter()
        .zip(codes)
        .map(|(&x, &c)| {
            let d = f64::from(x) - f64::from(f32::from(c) * scale + zero);
            d * d
        })
        .sum()
}

/// Alternates a closed-form least-squares fit of `(scale, zero)` with
/// re-coding, keeping a step only when the group error drops.
fn refine_group(values: &[f32], levels: f32, scale: &mut f32, zero: &mut f32, codes: &mut Vec<u8>) {
    let mut best = group_sse(values, codes, *scale, *zero);
    let mut trial = Vec::with_capacity(values.len());
    for _ in 0..REFINE_ITERS {
        let n = values.len() as f64;
        let (mut sc, mut sx, mut scc, mut scx) = (0.0f64, 0.0, 0.0, 0.0);
        for (&x, &c) in values.iter().zip(codes.iter()) {
            let (c, x) = (f64::from(c), f64::from(x));
            sc += c;
            sx += x;
            scc += c * c;
            scx += c * x;
        }
        let var = scc - sc * sc / n;
        if var <= 0.0 {
            break;
        }
        let s = ((scx - sc * sx / n) / var) as f32;
        let z = ((sx - f64::from(s) * sc) / n) as f32;
        if !(s > 0.0 && s.is_finite() && z.is_finite()) {
            break;
        }
        trial.clear();
        group_codes(values, s, z, levels, &mut trial);
        let err = group_sse(values, &trial, s, z);
        if err >= best {
            break;
        }
        best = err;
        *scale = s;
        *zero = z;
        std::mem::swap(codes, &mut trial);
    }
}

pub fn quantize(m: &Matrix, bits: u8, group_size: usize) -> Result<QuantizedMatrix> {
    quantize_with(m, &QuantConfig::new(bits, group_size))
}

pub fn quantize_with(m: &Matrix, cfg: &QuantConfig) -> Result<QuantizedMatrix> {
    check_bits(cfg.bits)?;
    if cfg.group_size == 0 {
        return Err(Error::invalid("group_size must be >= 1"));
    }
    let col = m.to_order(Order::ColMajor);
    let data = col.as_slice();
    if data.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("quantize input"));
    }
    let levels = ((1u32 << cfg.bits) - 1) as f32;
    let n_groups = data.len().div_ceil(cfg.group_size);
    let mut scales = Vec::with_capacity(n_groups);
    let mut zeros = Vec::with_capacity(n_groups);
    let mut codes = Vec::with_capacity(data.len());
    let mut buf = Vec::with_capacity(cfg.group_size);
    for group in data.chunks(cfg.group_size) {
        let (lo, hi) = group.iter().fold((f32::INFINITY, f32::NEG_INFINITY), |(lo, hi), &x| {
            (lo.min(x), hi.max(x))
        });
        let mut scale = if hi > lo { (hi - lo) / levels } else { 1.0 };
        if scale.is_nan() || scale <= 0.0 {
            // range below f32 resolution after division
            scale = f32::MIN_POSITIVE;
        }
        let mut zero = lo;
        buf.clear();
        group_codes(group, scale, zero, levels, &mut buf);
        if cfg.refine && hi > lo {
            refine_group(group, levels, &mut scale, &mut zero, &mut buf);
        }
        scales.push(scale);
        zeros.push(zero);
        codes.extend_from_slice(&buf);
    }
    Ok(QuantizedMatrix {
        rows: m.rows(),
        cols: m.cols(),
        bits: cfg.bits,
        group_size: cfg.group_size,
        codes: pack_codes(&codes, cfg.bits),
        scales,
        zeros,
    })
}

/// Dequantized matrix in column-major order.
pub fn dequantize(q: &QuantizedMatrix) -> Result<Matrix> {
    q.validate()?;
    let n = q.rows * q.cols;
    let mut data = vec![0.0f32; n];
    decode_into(&q.codes, q.bits, 0, &mut data);
    for (g, chunk) in data.chunks_mut(q.group_size).enumerate() {
        let (s, z) = (q.scales[g], q.zeros[g]);
        for v in chunk {
            *v = *v * s + z;
        }
    }
    Matrix::new(q.rows, q.cols, Order::ColMajor, data)
}

/// `x·Q` with per-group dequantization folded into the reduction:
/// each group segment contributes `scale·Σ x·code + zero·Σ x`.
pub fn qgemv(q: &QuantizedMatrix, x: &[f32]) -> Result<Vec<f32>> {
    if x.len() != q.rows {
        return Err(Error::dims("qgemv input length", q.rows, x.len()));
    }
    let mut out = vec![0.0f32; q.cols];
    let mut codes = vec![0.0f32; q.rows];
    let gs = q.group_size;
    for (c, o) in out.iter_mut().enumerate() {
        let base = c * q.rows;
        decode_into(&q.codes, q.bits, base, &mut codes);
        let mut acc = 0.0f32;
        let mut r = 0;
        while r < q.rows {
            let e = base + r;
            let g = e / gs;
            let end = (((g + 1) * gs) - base).min(q.rows);
            let (sxc, sx) = lane_sums(&x[r..end], &codes[r..end]);
            acc += q.scales[g] * sxc + q.zeros[g] * sx;
            r = end;
        }
        *o = acc;
    }
    Ok(out)
}

/// `(Σ x·c, Σ x)` with eight independent accumulators.
#[inline]
fn lane_sums(x: &[f32], c: &[f32]) -> (f32, f32) {
    let mut axc = [0.0f32; 8];
    let mut ax = [0.0f32; 8];
    let xs = x.chunks_exact(8);
    let cs = c.chunks_exact(8);
    let (xr, cr) = (xs.remainder(), cs.remainder());
    for (xc, cc) in xs.zip(cs) {
        for l in 0..8 {
            axc[l] += xc[l] * cc[l];
            ax[l] += xc[l];
        }
    }
    let mut sxc: f32 = axc.iter().sum();
    let mut sx: f32 = ax.iter().sum();
    for (a, b) in xr.iter().zip(cr) {
        sxc += a * b;
        sx += a;
    }
    (sxc, sx)
}

impl QuantizedMatrix {
    /// Assembles a matrix from raw parts, checking every invariant.
    pub fn from_parts(
        rows: usize,
        cols: usize,
        bits: u8,
        group_size: usize,
        codes: Vec<u8>,
        scales: Vec<f32>,
        zeros: Vec<f32>,
    ) -> Result<Self> {
        let q = Self {
            rows,
            cols,
            bits,
            group_size,
            codes,
            scales,
            zeros,
        };
        q.validate()?;
        Ok(q)
    }

    pub fn validate(&self) -> Result<()> {
        check_bits(self.bits)?;
        if self.group_size == 0 {
            return Err(Error::Corrupt("group_size is zero".into()));
        }
        let groups = self.num_groups();
        if self.scales.len() != groups || self.zeros.len() != groups {
            return Err(Error::Corrupt(format!(
                "expected {groups} groups of metadata, got {} scales / {} zeros",
                self.scales.len(),
                self.zeros.len()
            )));
        }
        if self.scales.iter().any(|s| !(*s > 0.0 && s.is_finite())) {
            return Err(Error::Corrupt("non-positive or non-finite scale".into()));
        }
        if self.zeros.iter().any(|z| !z.is_finite()) {
            return Err(Error::Corrupt("non-finite zero point".into()));
        }
        check_packing(&self.codes, self.bits, self.rows * self.cols)
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn bits(&self) -> u8 {
        self.bits
    }

    pub fn group_size(&self) -> usize {
        self.group_size
    }

    pub fn num_groups(&self) -> usize {
        (self.rows * self.cols).div_ceil(self.group_size)
    }

    pub fn packed_codes(&self) -> &[u8] {
        &self.codes
    }

    pub fn scales(&self) -> &[f32] {
        &self.scales
    }

    pub fn zeros(&self) -> &[f32] {
        &self.zeros
    }

    /// Code of logical element `(r, c)`.
    pub fn code(&self, r: usize, c: usize) -> u8 {
        assert!(r < self.rows && c < self.cols, "index out of bounds");
        code_at(&self.codes, self.bits, c * self.rows + r)
    }

    pub fn unpacked_codes(&self) -> Vec<u8> {
        (0..self.rows * self.cols)
            .map(|e| code_at(&self.codes, self.bits, e))
            .collect()
    }

    /// Storage footprint: packed codes, plus 16-bit scale and zero per
    /// group when `include_metadata` is set.
    pub fn stored_bytes(&self, include_metadata: bool) -> u64 {
        stored_bytes_for(self.rows, self.cols, self.bits, self.group_size, include_metadata)
    }

    /// Writes codes, then half-precision scales, then zeros.
    pub(crate) fn write_payload(&self, w: &mut impl Write) -> Result<()> {
        w.write_all(&self.codes)?;
        for (meta, is_scale) in [(&self.scales, true), (&self.zeros, false)] {
            let mut buf = Vec::with_capacity(meta.len() * 2);
            for &v in meta.iter() {
                buf.extend_from_slice(&to_half(v, is_scale).to_le_bytes());
            }
            w.write_all(&buf)?;
        }
        Ok(())
    }

    pub(crate) fn read_payload(
        r: &mut impl Read,
        rows: usize,
        cols: usize,
        bits: u8,
        group_size: usize,
    ) -> Result<Self> {
        check_bits(bits)?;
        if group_size == 0 {
            return Err(Error::Corrupt("group_size is zero".into()));
        }
        let codes = binio::read_bytes(r, packed_len(rows * cols, bits))?;
        let groups = (rows * cols).div_ceil(group_size);
        let mut read_meta = || -> Result<Vec<f32>> {
            let raw = binio::read_bytes(r, groups * 2)?;
            Ok(raw
                .chunks_exact(2)
                .map(|b| f16::from_le_bytes([b[0], b[1]]).to_f32())
                .collect())
        };
        let scales = read_meta()?;
        let zeros = read_meta()?;
        Self::from_parts(rows, cols, bits, group_size, codes, scales, zeros)
    }
}

/// Half-precision encoding; scales never round to zero or overflow.
fn to_half(v: f32, is_scale: bool) -> f16 {
    let h = f16::from_f32(v);
    if !is_scale {
        return if h.is_infinite() {
            if v > 0.0 {
                f16::MAX
            } else {
                f16::MIN
            }
        } else {
            h
        };
    }
    if h.is_infinite() {
        f16::MAX
    } else if h.to_f32() <= 0.0 {
        f16::from_bits(1)
    } else {
        h
    }
}

pub fn stored_bytes_for(rows: usize, cols: usize, bits: u8, group_size: usize, include_metadata: bool) -> u64 {
    let n = rows as u64 * cols as u64;
    let codes = (n * u64::from(bits)).div_ceil(8);
    if include_metadata {
        codes + n.div_ceil(group_size as u64) * 4
    } else {
        codes
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, StandardNormal};

    fn gaussian(rows: usize, cols: usize, seed: u64) -> Matrix {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Matrix::from_fn(rows, cols, Order::ColMajor, |_, _| StandardNormal.sample(&mut rng))
    }

    #[test]
    fn constant_matrix_round_trips_exactly() {
        let m = Matrix::from_fn(5, 7, Order::RowMajor, |_, _| 0.3);
        for bits in SUPPORTED_BITS {
            let q = quantize(&m, bits, 4).unwrap();
            assert!(q.scales().iter().all(|&s| s == 1.0));
            assert_eq!(dequantize(&q).unwrap().to_order(Order::RowMajor), m);
        }
    }

    #[test]
    fn on_grid_values_are_exact() {
        let m = Matrix::new(4, 1, Order::ColMajor, vec![0.0, 1.0, 2.0, 3.0]).unwrap();
        let q = quantize(&m, 2, 4).unwrap();
        assert_eq!(q.unpacked_codes(), [0, 1, 2, 3]);
        assert_eq!(q.scales(), [1.0]);
        assert_eq!(q.zeros(), [0.0]);
        assert_eq!(dequantize(&q).unwrap(), m);
    }

    #[test]
    fn two_bit_error_bounded_by_half_scale() {
        let m = gaussian(64, 64, 1);
        let q = quantize(&m, 2, 64).unwrap();
        let d = dequantize(&q).unwrap();
        for (e, (x, y)) in m.as_slice().iter().zip(d.as_slice()).enumerate() {
            let s = q.scales()[e / 64];
            assert!((x - y).abs() <= s / 2.0 + 1e-6, "element {e}");
        }
    }

    #[test]
    fn eight_bit_error_bound() {
        let m = gaussian(48, 40, 2);
        let q = quantize(&m, 8, 64).unwrap();
        let d = dequantize(&q).unwrap();
        for (g, (xs, ys)) in m.as_slice().chunks(64).zip(d.as_slice().chunks(64)).enumerate() {
            let lo = xs.iter().copied().fold(f32::INFINITY, f32::min);
            let hi = xs.iter().copied().fold(f32::NEG_INFINITY, f32::max);
            let bound = (hi - lo) / 510.0 + 1e-6;
            for (x, y) in xs.iter().zip(ys) {
                assert!((x - y).abs() <= bound, "group {g}");
            }
        }
    }

    #[test]
    fn requantizing_dequantized_is_fixed_point() {
        for bits in SUPPORTED_BITS {
            let q = quantize(&gaussian(30, 11, 3), bits, 16).unwrap();
            let again = quantize(&dequantize(&q).unwrap(), bits, 16).unwrap();
            assert_eq!(again.unpacked_codes(), q.unpacked_codes(), "bits {bits}");
        }
    }

    #[test]
    fn zero_codes_give_group_zeros() {
        let q = QuantizedMatrix::from_parts(3, 2, 2, 4, vec![0, 0], vec![0.5, 2.0], vec![-1.0, 4.0]).unwrap();
        let d = dequantize(&q).unwrap();
        assert_eq!(d.as_slice(), [-1.0, -1.0, -1.0, -1.0, 4.0, 4.0]);
    }

    #[test]
    fn corrupt_trailing_bits_rejected() {
        // 3 codes × 2 bits = 6 bits; the top two bits of the only byte are padding
        let bad = QuantizedMatrix::from_parts(3, 1, 2, 3, vec![0b1100_0000], vec![1.0], vec![0.0]);
        assert!(matches!(bad, Err(Error::Corrupt(_))));
        assert!(unpack_codes(&[0b1000_0000], 3, 2).is_err());
    }

    #[test]
    fn rejects_bad_config_and_input() {
        let m = gaussian(2, 2, 0);
        assert!(quantize(&m, 5, 4).is_err());
        assert!(quantize(&m, 2, 0).is_err());
        let mut bad = m.clone();
        bad.as_mut_slice()[0] = f32::INFINITY;
        assert!(matches!(quantize(&bad, 2, 4), Err(Error::NonFinite(_))));
    }

    #[test]
    fn qgemv_matches_dequantized_gemv() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        for (bits, gs, rows, cols) in [(2, 64, 64, 96), (3, 50, 37, 19), (8, 64, 64, 64), (4, 7, 13, 9)] {
            let q = quantize(&gaussian(rows, cols, 9 + bits as u64), bits, gs).unwrap();
            let x: Vec<f32> = (0..rows).map(|_| StandardNormal.sample(&mut rng)).collect();
            let got = qgemv(&q, &x).unwrap();
            let want = crate::la::gemv(&dequantize(&q).unwrap(), &x).unwrap();
            let scale = want.iter().fold(0.0f32, |m, v| m.max(v.abs()));
            for (a, b) in got.iter().zip(&want) {
                assert!((a - b).abs() <= 1e-4 * scale, "bits {bits}: {a} vs {b}");
            }
        }
    }

    #[test]
    fn qgemv_identity_and_zero() {
        let eye = Matrix::identity(16, Order::ColMajor);
        let q = quantize(&eye, 8, 64).unwrap();
        let x: Vec<f32> = (0..16).map(|i| i as f32 * 0.25 - 2.0).collect();
        for (a, b) in qgemv(&q, &x).unwrap().iter().zip(&x) {
            assert!((a - b).abs() < 1e-5);
        }
        let z = QuantizedMatrix::from_parts(4, 4, 2, 8, vec![0; 4], vec![1.0; 2], vec![0.0; 2]).unwrap();
        assert_eq!(qgemv(&z, &[1.0, 2.0, 3.0, 4.0]).unwrap(), [0.0; 4]);
        assert!(qgemv(&z, &[1.0]).is_err());
    }

    #[test]
    fn stored_bytes_arithmetic() {
        assert_eq!(stored_bytes_for(4096, 14336, 2, 64, false), 14_680_064);
        let q = quantize(&gaussian(8, 8, 1), 8, 64).unwrap();
        assert_eq!(q.stored_bytes(true) - q.stored_bytes(false), 4);
        assert_eq!(stored_bytes_for(3, 3, 3, 4, true), 4 + 3 * 4);
    }

    #[test]
    fn mse_non_increasing_in_bits() {
        let m = gaussian(64, 32, 21);
        let mut prev = f64::INFINITY;
        for bits in SUPPORTED_BITS {
            let d = dequantize(&quantize(&m, bits, 64).unwrap()).unwrap();
            let mse = m
                .as_slice()
                .iter()
                .zip(d.as_slice())
                .map(|(a, b)| f64::from(a - b).powi(2))
                .sum::<f64>();
            assert!(mse <= prev, "bits {bits}");
            prev = mse;
        }
    }

    #[test]
    fn refinement_never_increases_error() {
        let m = gaussian(64, 16, 5);
        let sse = |q: &QuantizedMatrix| {
            let d = dequantize(q).unwrap();
            m.as_slice()
                .iter()
                .zip(d.as_slice())
                .map(|(a, b)| f64::from(a - b).powi(2))
                .sum::<f64>()
        };
        for bits in [1, 2, 3] {
            let plain = quantize(&m, bits, 64).unwrap();
            let refined = quantize_with(
                &m,
                &QuantConfig {
                    bits,
                    group_size: 64,
                    refine: true,
                },
            )
            .unwrap();
            assert!(sse(&refined) <= sse(&plain) * (1.0 + 1e-9), "bits {bits}");
        }
    }

    #[test]
    fn half_payload_round_trip_is_stable() {
        let q = quantize(&gaussian(20, 10, 6), 3, 16).unwrap();
        let mut a = Vec::new();
        q.write_payload(&mut a).unwrap();
        let back = QuantizedMatrix::read_payload(&mut a.as_slice(), 20, 10, 3, 16).unwrap();
        assert_eq!(back.unpacked_codes(), q.unpacked_codes());
        let mut b = Vec::new();
        back.write_payload(&mut b).unwrap();
        assert_eq!(a, b);
    }

    mod props {
        use super::super::*;
        use proptest::prelude::*;

        proptest! {
            #[test]
            fn pack_unpack_lossless(
                bits in prop::sample::select(SUPPORTED_BITS.to_vec()),
                raw in prop::collection::vec(any::<u8>(), 0..200),
            ) {
                let codes: Vec<u8> = raw.iter().map(|c| (u16::from(*c) % (1u16 << bits)) as u8).collect();
                let packed = pack_codes(&codes, bits);
                prop_assert_eq!(packed.len(), packed_len(codes.len(), bits));
                prop_assert_eq!(unpack_codes(&packed, bits, codes.len()).unwrap(), codes);
            }

            #[test]
            fn round_trip_error_bound(
                bits in prop::sample::select(SUPPORTED_BITS.to_vec()),
                gs in 1usize..40,
                data in prop::collection::vec(-100.0f32..100.0, 1..120),
            ) {
                let n = data.len();
                let m = Matrix::new(n, 1, Order::ColMajor, data).unwrap();
                let q = quantize(&m, bits, gs).unwrap();
                let d = dequantize(&q).unwrap();
                for (e, (x, y)) in m.as_slice().iter().zip(d.as_slice()).enumerate() {
                    let s = q.scales()[e / gs];
                    prop_assert!((x - y).abs() <= s / 2.0 + 1e-4 * x.abs().max(1.0));
                }
            }
        }
    }
}
