//! Fixed-point formats, symmetric weight quantization, the MAC-to-VMEM scaler,
//! and the straight-line fixed-point LD-LIF reference that the macro model is
//! checked against.

use std::io::{Read, Write};

use serde::{Deserialize, Serialize};

use crate::error::{param, shape, Error, Result};
use crate::neuron::{SpikeTrain, SpikeVector, WeightMatrix};

/// Smallest sum a 256-row column of signed 4-bit weights can produce.
pub const MAC_MIN: i32 = -2048;
/// Largest sum a 256-row column of signed 4-bit weights can produce.
pub const MAC_MAX: i32 = 1792;

/// Signed two's-complement word of `total_bits` with `frac_bits` fractional
/// bits.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct FixedPointFormat {
    pub total_bits: u32,
    pub frac_bits: u32,
}

impl Default for FixedPointFormat {
    fn default() -> Self {
        Self {
            total_bits: 10,
            frac_bits: 4,
        }
    }
}

impl FixedPointFormat {
    pub fn new(total_bits: u32, frac_bits: u32) -> Result<Self> {
        let f = Self {
            total_bits,
            frac_bits,
        };
        f.validate()?;
        Ok(f)
    }

    pub fn validate(&self) -> Result<()> {
        if !(1..=32).contains(&self.total_bits) || self.frac_bits >= self.total_bits {
            return Err(param(format!(
                "invalid fixed-point format: total_bits={} frac_bits={}",
                self.total_bits, self.frac_bits
            )));
        }
        Ok(())
    }

    #[inline]
    pub fn min_raw(&self) -> i32 {
        (-(1i64 << (self.total_bits - 1))) as i32
    }

    #[inline]
    pub fn max_raw(&self) -> i32 {
        ((1i64 << (self.total_bits - 1)) - 1) as i32
    }

    pub fn contains(&self, raw: i64) -> bool {
        raw >= self.min_raw() as i64 && raw <= self.max_raw() as i64
    }

    /// Reduce modulo `2^total_bits` and sign-interpret.
    #[inline]
    pub fn wrap(&self, raw: i64) -> i32 {
        let shift = 64 - self.total_bits;
        ((raw << shift) >> shift) as i32
    }

    #[inline]
    pub fn saturate(&self, raw: i64) -> i32 {
        raw.clamp(self.min_raw() as i64, self.max_raw() as i64) as i32
    }

    #[inline]
    pub fn sign_bit(&self, raw: i32) -> bool {
        (raw >> (self.total_bits - 1)) & 1 == 1
    }

    /// Value of one raw step.
    pub fn ulp(&self) -> f64 {
        (-(self.frac_bits as f64)).exp2()
    }

    pub fn max_value(&self) -> f64 {
        self.max_raw() as f64 * self.ulp()
    }
}

/// Round to nearest, then saturate into the format's range. NaN maps to 0.
pub fn to_fixed(x: f64, fmt: &FixedPointFormat) -> i32 {
    if x.is_nan() {
        return 0;
    }
    let scaled = (x * (fmt.frac_bits as f64).exp2()).round();
    if scaled >= fmt.max_raw() as f64 {
        fmt.max_raw()
    } else if scaled <= fmt.min_raw() as f64 {
        fmt.min_raw()
    } else {
        scaled as i32
    }
}

pub fn from_fixed(raw: i32, fmt: &FixedPointFormat) -> f64 {
    raw as f64 * fmt.ulp()
}

/// Signed `bits`-wide integer weights with one per-layer scale.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct QuantizedWeights {
    pub rows: usize,
    pub cols: usize,
    pub q: Vec<i8>,
    pub scale: f64,
    pub bits: u32,
}

pub fn weight_range(bits: u32) -> (i32, i32) {
    (-(1 << (bits - 1)), (1 << (bits - 1)) - 1)
}

fn check_bits(bits: u32) -> Result<()> {
    if !(2..=8).contains(&bits) {
        return Err(param(format!("weight bits must be in 2..=8, got {bits}")));
    }
    Ok(())
}

impl QuantizedWeights {
    pub fn new(rows: usize, cols: usize, q: Vec<i8>, scale: f64, bits: u32) -> Result<Self> {
        check_bits(bits)?;
        if q.len() != rows * cols {
            return Err(shape(format!(
                "{} weights for a {rows}x{cols} matrix",
                q.len()
            )));
        }
        if !(scale > 0.0) || !scale.is_finite() {
            return Err(param(format!(
                "scale must be positive and finite, got {scale}"
            )));
        }
        let (lo, hi) = weight_range(bits);
        if let Some(w) = q.iter().find(|&&w| (w as i32) < lo || (w as i32) > hi) {
            return Err(param(format!(
                "weight {w} outside the {bits}-bit signed range"
            )));
        }
        Ok(Self {
            rows,
            cols,
            q,
            scale,
            bits,
        })
    }

    #[inline]
    pub fn get(&self, r: usize, c: usize) -> i8 {
        self.q[r * self.cols + c]
    }

    pub fn row(&self, r: usize) -> &[i8] {
        &self.q[r * self.cols..(r + 1) * self.cols]
    }

    pub fn dequantize(&self) -> WeightMatrix {
        WeightMatrix {
            rows: self.rows,
            cols: self.cols,
            data: self.q.iter().map(|&q| q as f64 * self.scale).collect(),
        }
    }

    /// Exact integer `q * s` per output row.
    pub fn mac(&self, s: &SpikeVector) -> Vec<i64> {
        let active: Vec<usize> = s.active().collect();
        (0..self.rows)
            .map(|r| {
                let row = self.row(r);
                active.iter().map(|&c| row[c] as i64).sum()
            })
            .collect()
    }

    /// Flat little-endian blob: `bits: u8`, `rows: u32`, `cols: u32`,
    /// `scale: f64`, then `rows * cols` row-major `i8` weights.
    pub fn write_blob<W: Write>(&self, mut w: W) -> Result<()> {
        w.write_all(&[self.bits as u8])?;
        w.write_all(&(self.rows as u32).to_le_bytes())?;
        w.write_all(&(self.cols as u32).to_le_bytes())?;
        w.write_all(&self.scale.to_le_bytes())?;
        let bytes: Vec<u8> = self.q.iter().map(|&q| q as u8).collect();
        w.write_all(&bytes)?;
        Ok(())
    }

    pub fn read_blob<R: Read>(mut r: R) -> Result<Self> {
        let mut b1 = [0u8; 1];
        let mut b4 = [0u8; 4];
        let mut b8 = [0u8; 8];
        r.read_exact(&mut b1)?;
        let bits = b1[0] as u32;
        r.read_exact(&mut b4)?;
        let rows = u32::from_le_bytes(b4) as usize;
        r.read_exact(&mut b4)?;
        let cols = u32::from_le_bytes(b4) as usize;
        r.read_exact(&mut b8)?;
        let scale = f64::from_le_bytes(b8);
        let n = rows
            .checked_mul(cols)
            .ok_or_else(|| Error::Format("weight blob dimensions overflow".into()))?;
        // Read through `take` so a corrupt header cannot force a huge
        // allocation up front.
        let mut q = Vec::new();
        r.by_ref().take(n as u64).read_to_end(&mut q)?;
        if q.len() != n {
            return Err(Error::Format("weight blob truncated".into()));
        }
        Self::new(
            rows,
            cols,
            q.into_iter().map(|b| b as i8).collect(),
            scale,
            bits,
        )
        .map_err(|e| Error::Format(format!("bad weight blob: {e}")))
    }
}

/// Symmetric per-tensor quantization: `scale = max|w| / (2^(bits-1) - 1)`,
/// `q = clamp(round(w / scale))`. An all-zero matrix gets `scale = 1`.
pub fn quantize_weights(w: &WeightMatrix, bits: u32) -> Result<QuantizedWeights> {
    check_bits(bits)?;
    let (lo, hi) = weight_range(bits);
    let max_abs = w.data.iter().fold(0.0f64, |m, x| m.max(x.abs()));
    let scale = if max_abs > 0.0 {
        max_abs / hi as f64
    } else {
        1.0
    };
    let q = w
        .data
        .iter()
        .map(|&x| ((x / scale).round() as i32).clamp(lo, hi) as i8)
        .collect();
    QuantizedWeights::new(w.rows, w.cols, q, scale, bits)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum Rounding {
    Truncate,
    #[default]
    RoundHalfUp,
}

/// Alignment of the wide MAC sum to the VMEM word.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ScalerConfig {
    pub shift: u32,
    pub rounding: Rounding,
    pub saturate: bool,
}

impl Default for ScalerConfig {
    fn default() -> Self {
        Self {
            shift: 2,
            rounding: Rounding::RoundHalfUp,
            saturate: true,
        }
    }
}

impl ScalerConfig {
    pub fn validate(&self) -> Result<()> {
        if self.shift > 12 {
            return Err(param(format!(
                "scaler shift must be <= 12, got {}",
                self.shift
            )));
        }
        Ok(())
    }
}

/// Scales a single-tile MAC sum, which must lie in `[MAC_MIN, MAC_MAX]`.
pub fn scale_mac(mac_raw: i32, cfg: &ScalerConfig, fmt: &FixedPointFormat) -> Result<i32> {
    if !(MAC_MIN..=MAC_MAX).contains(&mac_raw) {
        return Err(Error::Contract(format!(
            "MAC sum {mac_raw} outside [{MAC_MIN}, {MAC_MAX}]"
        )));
    }
    cfg.validate()?;
    Ok(scale_wide(mac_raw as i64, cfg, fmt))
}

/// Scaler without the single-tile range contract; used when several row
/// tiles have been accumulated before scaling.
pub fn scale_wide(acc: i64, cfg: &ScalerConfig, fmt: &FixedPointFormat) -> i32 {
    let shifted = match (cfg.rounding, cfg.shift) {
        (_, 0) => acc,
        (Rounding::Truncate, s) => acc >> s,
        (Rounding::RoundHalfUp, s) => (acc + (1i64 << (s - 1))) >> s,
    };
    if cfg.saturate {
        fmt.saturate(shifted)
    } else {
        fmt.wrap(shifted)
    }
}

/// One fixed-point LD-LIF update evaluated in wide integers and reduced
/// modulo the word width at the end.
///
/// Returns `(v_next, spike)`. The spike rule is the sign of
/// `v + mac - dcy - th`, which is `v + mac - dcy >= th` whenever nothing
/// wraps.
#[inline]
pub fn fixed_ld_lif_step(
    v: i32,
    mac: i32,
    dcy: i32,
    th: i32,
    fmt: &FixedPointFormat,
) -> (i32, bool) {
    let pre = v as i64 + mac as i64 - dcy as i64;
    if fmt.wrap(pre - th as i64) >= 0 {
        (0, true)
    } else {
        (fmt.wrap(pre), false)
    }
}

/// A layer ready for integer inference: quantized weights plus the raw VMEM
/// decay and threshold words.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FixedLayer {
    pub weights: QuantizedWeights,
    pub dcy: i32,
    pub th: i32,
}

/// Integer reference for a whole layer: exact MAC over all inputs, one scaler
/// application, then `fixed_ld_lif_step`. Starts from `v = 0`.
pub fn fixed_layer_forward(
    layer: &FixedLayer,
    scaler: &ScalerConfig,
    fmt: &FixedPointFormat,
    input: &SpikeTrain,
) -> Result<SpikeTrain> {
    if input.width != layer.weights.cols {
        return Err(shape(format!(
            "input train has width {} but layer expects {}",
            input.width, layer.weights.cols
        )));
    }
    scaler.validate()?;
    let mut v = vec![0i32; layer.weights.rows];
    let frames = input
        .frames
        .iter()
        .map(|s| {
            let macs = layer.weights.mac(s);
            let out = v
                .iter_mut()
                .zip(macs)
                .map(|(v, acc)| {
                    let mac = scale_wide(acc, scaler, fmt);
                    let (next, spike) = fixed_ld_lif_step(*v, mac, layer.dcy, layer.th, fmt);
                    *v = next;
                    spike
                })
                .collect::<Vec<bool>>();
            SpikeVector::from(out)
        })
        .collect();
    Ok(SpikeTrain {
        width: layer.weights.rows,
        frames,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn fmt10() -> FixedPointFormat {
        FixedPointFormat::new(10, 4).unwrap()
    }

    #[test]
    fn format_bounds() {
        let f = fmt10();
        assert_eq!((f.min_raw(), f.max_raw()), (-512, 511));
        assert_eq!(f.wrap(512), -512);
        assert_eq!(f.wrap(600), -424);
        assert_eq!(f.wrap(-513), 511);
        assert!(FixedPointFormat::new(0, 0).is_err());
        assert!(FixedPointFormat::new(33, 0).is_err());
        assert!(FixedPointFormat::new(8, 8).is_err());
        let f32b = FixedPointFormat::new(32, 0).unwrap();
        assert_eq!((f32b.min_raw(), f32b.max_raw()), (i32::MIN, i32::MAX));
        let f1 = FixedPointFormat::new(1, 0).unwrap();
        assert_eq!((f1.min_raw(), f1.max_raw()), (-1, 0));
    }

    #[test]
    fn to_fixed_examples() {
        let f = fmt10();
        assert_eq!(to_fixed(0.0, &f), 0);
        assert_eq!(to_fixed(0.5, &f), 8);
        assert_eq!(to_fixed(f.max_value() + f.ulp(), &f), 511);
        assert_eq!(to_fixed(-1e9, &f), -512);
        assert_eq!(to_fixed(f64::NAN, &f), 0);
    }

    #[test]
    fn quantize_examples() {
        let q = quantize_weights(&WeightMatrix::from_rows(&[vec![0.0, 0.0]]).unwrap(), 4).unwrap();
        assert_eq!((q.q.clone(), q.scale), (vec![0, 0], 1.0));

        let q = quantize_weights(&WeightMatrix::from_rows(&[vec![7.0, -8.0]]).unwrap(), 4).unwrap();
        assert_eq!(q.scale, 8.0 / 7.0);
        assert_eq!(q.q, vec![6, -7]);

        let q = quantize_weights(&WeightMatrix::from_rows(&[vec![1.0, -1.0]]).unwrap(), 3).unwrap();
        assert_eq!(q.scale, 1.0 / 3.0);
        assert_eq!(q.q, vec![3, -3]);

        let w = WeightMatrix::zeros(1, 1);
        assert!(quantize_weights(&w, 1).is_err());
        assert!(quantize_weights(&w, 9).is_err());
    }

    /// Nearest level by exhaustive search over the representable codes.
    fn brute_force_code(x: f64, scale: f64, bits: u32) -> i32 {
        let (lo, hi) = weight_range(bits);
        (lo..=hi)
            .min_by(|&a, &b| {
                let da = (a as f64 * scale - x).abs();
                let db = (b as f64 * scale - x).abs();
                da.partial_cmp(&db).unwrap().then(b.abs().cmp(&a.abs()))
            })
            .unwrap()
    }

    #[test]
    fn quantize_matches_brute_force_rounding() {
        for (row, bits) in [
            (vec![7.0, -8.0], 4),
            (vec![1.0, -1.0], 3),
            (vec![0.3, -0.11, 0.29, 0.05], 4),
        ] {
            let w = WeightMatrix::from_rows(std::slice::from_ref(&row)).unwrap();
            let q = quantize_weights(&w, bits).unwrap();
            for (x, &code) in row.iter().zip(&q.q) {
                assert_eq!(code as i32, brute_force_code(*x, q.scale, bits), "x={x}");
            }
        }
    }

    #[test]
    fn scale_mac_examples() {
        let f = fmt10();
        let cfg = |shift| ScalerConfig {
            shift,
            rounding: Rounding::RoundHalfUp,
            saturate: true,
        };
        assert_eq!(scale_mac(0, &cfg(2), &f).unwrap(), 0);
        assert_eq!(scale_mac(-2048, &cfg(2), &f).unwrap(), -512);
        assert_eq!(scale_mac(1792, &cfg(1), &f).unwrap(), 511);
        assert!(scale_mac(1793, &cfg(1), &f).is_err());
        assert!(scale_mac(-2049, &cfg(1), &f).is_err());
        assert!(scale_mac(0, &cfg(13), &f).is_err());

        let trunc = ScalerConfig {
            shift: 1,
            rounding: Rounding::Truncate,
            saturate: false,
        };
        assert_eq!(scale_mac(-3, &trunc, &f).unwrap(), -2);
        assert_eq!(scale_mac(-3, &cfg(1), &f).unwrap(), -1);
        assert_eq!(scale_mac(5, &cfg(1), &f).unwrap(), 3);
        // 1792 >> 1 = 896 wraps to 896 - 1024
        assert_eq!(scale_mac(1792, &trunc, &f).unwrap(), -128);
    }

    #[test]
    fn blob_round_trip_and_rejection() {
        let q = QuantizedWeights::new(2, 3, vec![-8, 7, 0, 1, -1, 3], 0.125, 4).unwrap();
        let mut buf = Vec::new();
        q.write_blob(&mut buf).unwrap();
        assert_eq!(buf.len(), 1 + 4 + 4 + 8 + 6);
        assert_eq!(buf[0], 4);
        assert_eq!(&buf[17..], &[0xf8, 7, 0, 1, 0xff, 3]);
        assert_eq!(QuantizedWeights::read_blob(&buf[..]).unwrap(), q);

        let mut bad = buf.clone();
        bad[17] = 0x80; // -128 is not a 4-bit weight
        assert!(QuantizedWeights::read_blob(&bad[..]).is_err());
        assert!(QuantizedWeights::read_blob(&buf[..10]).is_err());

        // Claims 2^32 - 1 squared entries but carries none.
        let mut huge = vec![4u8];
        huge.extend_from_slice(&u32::MAX.to_le_bytes());
        huge.extend_from_slice(&u32::MAX.to_le_bytes());
        huge.extend_from_slice(&1.0f64.to_le_bytes());
        assert!(matches!(
            QuantizedWeights::read_blob(&huge[..]),
            Err(Error::Format(_))
        ));
    }

    #[test]
    fn fixed_step_matches_straight_line_when_nothing_wraps() {
        let f = fmt10();
        assert_eq!(fixed_ld_lif_step(5, 3, 2, 4, &f), (0, true));
        assert_eq!(fixed_ld_lif_step(0, 0, 0, 16, &f), (0, false));
        assert_eq!(fixed_ld_lif_step(10, 2, -3, 20, &f), (15, false));
        // exactly at threshold
        assert_eq!(fixed_ld_lif_step(10, 2, 2, 10, &f), (0, true));
    }

    #[test]
    fn mac_range_is_exact_for_small_row_counts() {
        // Exhaustive over every 4-bit weight and input bit for 2 rows; the
        // bound scales linearly with row count.
        let rows = 2;
        let (mut lo, mut hi) = (i32::MAX, i32::MIN);
        for w0 in -8..=7 {
            for w1 in -8..=7 {
                for bits in 0..4u32 {
                    let s = (bits & 1) as i32 * w0 + ((bits >> 1) & 1) as i32 * w1;
                    lo = lo.min(s);
                    hi = hi.max(s);
                }
            }
        }
        assert_eq!((lo, hi), (-8 * rows, 7 * rows));
        assert_eq!((MAC_MIN, MAC_MAX), (-8 * 256, 7 * 256));
    }

    proptest! {
        #[test]
        fn quantization_error_is_at_most_half_a_step(
            w in proptest::collection::vec(-5.0f64..5.0, 1..40),
            bits in 2u32..=8,
        ) {
            let m = WeightMatrix::new(1, w.len(), w.clone()).unwrap();
            let q = quantize_weights(&m, bits).unwrap();
            let d = q.dequantize();
            for (a, b) in w.iter().zip(&d.data) {
                prop_assert!((a - b).abs() <= q.scale / 2.0 + 1e-12 * q.scale.max(1.0));
            }
        }

        #[test]
        fn to_fixed_monotone_and_accurate(a in -40.0f64..40.0, b in -40.0f64..40.0) {
            let f = fmt10();
            let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
            prop_assert!(to_fixed(lo, &f) <= to_fixed(hi, &f));
            if lo.abs() < f.max_value() {
                prop_assert!((from_fixed(to_fixed(lo, &f), &f) - lo).abs() <= f.ulp() / 2.0);
            }
        }

        #[test]
        fn scaler_with_zero_shift_is_identity(x in -512i32..=511) {
            let cfg = ScalerConfig { shift: 0, rounding: Rounding::Truncate, saturate: false };
            prop_assert_eq!(scale_mac(x, &cfg, &fmt10()).unwrap(), x);
        }

        #[test]
        fn mac_of_256_rows_stays_in_range(
            w in proptest::collection::vec(-8i8..=7, 256),
            s in proptest::collection::vec(any::<bool>(), 256),
        ) {
            let q = QuantizedWeights::new(1, 256, w, 1.0, 4).unwrap();
            let acc = q.mac(&s.into())[0];
            prop_assert!((MAC_MIN as i64..=MAC_MAX as i64).contains(&acc));
        }
    }
}
