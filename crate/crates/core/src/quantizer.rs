//! The quantization channel: uniform mid-rise quantizers, quantized complex
//! observations on a sampling set, and their JSON file format.

use std::collections::HashSet;
use std::fmt;
use std::str::FromStr;

use num_complex::Complex64;
use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::error::{invalid, Error, Result};
use crate::numerics::{CMat, GaussInterval};

pub const MAX_BITS: u32 = 16;

/// A scalar quantizer with `2^B` cells `[t_b, t_{b+1})`, `t_0 = -inf`,
/// `t_{2^B} = +inf`.
#[derive(Debug, Clone, PartialEq)]
pub struct QuantizerSpec {
    bits: u32,
    thresholds: Vec<f64>,
    codewords: Vec<f64>,
    step: f64,
    sigma_z: f64,
}

impl QuantizerSpec {
    pub fn bits(&self) -> u32 {
        self.bits
    }

    /// Interior thresholds `t_1 .. t_{2^B - 1}`.
    pub fn thresholds(&self) -> &[f64] {
        &self.thresholds
    }

    pub fn codewords(&self) -> &[f64] {
        &self.codewords
    }

    pub fn step(&self) -> f64 {
        self.step
    }

    pub fn sigma_z(&self) -> f64 {
        self.sigma_z
    }

    pub fn levels(&self) -> usize {
        self.codewords.len()
    }

    pub fn quantize_real(&self, a: f64) -> u32 {
        quantize_real(a, self)
    }

    pub fn bin_interval(&self, b: u32) -> Result<GaussInterval> {
        bin_interval(b, self)
    }

    pub fn codeword(&self, b: u32) -> f64 {
        self.codewords[b as usize]
    }
}

/// Uniform quantizer whose finite cells tile `[-3σ_z/√2, 3σ_z/√2]` with step
/// `Δ = 3σ_z / 2^(B - 1/2)`; the one-bit quantizer is the sign quantizer.
pub fn build_uniform_quantizer(bits: u32, sigma_z: f64) -> Result<QuantizerSpec> {
    if bits == 0 || bits > MAX_BITS {
        return Err(invalid(format!("bit depth must be in 1..={MAX_BITS}, got {bits}")));
    }
    if !(sigma_z > 0.0) || !sigma_z.is_finite() {
        return Err(invalid(format!("sigma_z must be positive, got {sigma_z}")));
    }
    let levels = 1usize << bits;
    let step = 3.0 * sigma_z / 2f64.powf(bits as f64 - 0.5);

    let (thresholds, codewords) = if bits == 1 {
        let c = sigma_z * std::f64::consts::FRAC_1_SQRT_2;
        (vec![0.0], vec![-c, c])
    } else {
        let range = 3.0 * sigma_z * std::f64::consts::FRAC_1_SQRT_2;
        let thresholds = (1..levels).map(|b| -range + b as f64 * step).collect();
        let codewords = (0..levels).map(|b| -range + (b as f64 + 0.5) * step).collect();
        (thresholds, codewords)
    };

    Ok(QuantizerSpec { bits, thresholds, codewords, step, sigma_z })
}

/// Index `b` of the cell with `a ∈ [t_b, t_{b+1})`.
pub fn quantize_real(a: f64, spec: &QuantizerSpec) -> u32 {
    spec.thresholds.partition_point(|&t| t <= a) as u32
}

pub fn bin_interval(b: u32, spec: &QuantizerSpec) -> Result<GaussInterval> {
    let b = b as usize;
    if b >= spec.levels() {
        return Err(invalid(format!("bin {b} out of range for a {}-bit quantizer", spec.bits)));
    }
    let lo = if b == 0 { f64::NEG_INFINITY } else { spec.thresholds[b - 1] };
    let hi = if b + 1 == spec.levels() { f64::INFINITY } else { spec.thresholds[b] };
    Ok(GaussInterval { lo, hi })
}

/// Bit depth of an observation channel; `Unquantized` is the `B = ∞` limit.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum BitDepth {
    Finite(u32),
    Unquantized,
}

impl BitDepth {
    pub fn finite(self) -> Option<u32> {
        match self {
            BitDepth::Finite(b) => Some(b),
            BitDepth::Unquantized => None,
        }
    }
}

impl fmt::Display for BitDepth {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            BitDepth::Finite(b) => write!(f, "{b}"),
            BitDepth::Unquantized => f.write_str("inf"),
        }
    }
}

impl FromStr for BitDepth {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "inf" | "infinity" | "unquantized" | "∞" => Ok(BitDepth::Unquantized),
            t => t
                .parse::<u32>()
                .map_err(|_| invalid(format!("bit depth must be an integer or \"inf\", got {s:?}")))
                .and_then(|b| {
                    if b == 0 || b > MAX_BITS {
                        Err(invalid(format!("bit depth must be in 1..={MAX_BITS}, got {b}")))
                    } else {
                        Ok(BitDepth::Finite(b))
                    }
                }),
        }
    }
}

impl Serialize for BitDepth {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        match self {
            BitDepth::Finite(b) => s.serialize_u32(*b),
            BitDepth::Unquantized => s.serialize_str("inf"),
        }
    }
}

impl<'de> Deserialize<'de> for BitDepth {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Raw {
            Int(u32),
            Text(String),
        }
        match Raw::deserialize(d)? {
            Raw::Int(b) => BitDepth::from_str(&b.to_string()).map_err(serde::de::Error::custom),
            Raw::Text(t) => BitDepth::from_str(&t).map_err(serde::de::Error::custom),
        }
    }
}

/// What was recorded for each observed entry.
#[derive(Debug, Clone, PartialEq)]
pub enum Measurements {
    /// Cell indices of the real and imaginary parts.
    Quantized { spec: QuantizerSpec, bins: Vec<[u32; 2]> },
    /// The unquantized channel keeps the noisy values themselves.
    Unquantized { values: Vec<Complex64> },
}

/// Observed entries `Ω` of an `m × n` matrix with their measurements.
#[derive(Debug, Clone, PartialEq)]
pub struct ObservedMatrix {
    pub m: usize,
    pub n: usize,
    pub sigma_z: f64,
    pub omega: Vec<(usize, usize)>,
    pub measurements: Measurements,
}

impl ObservedMatrix {
    pub fn len(&self) -> usize {
        self.omega.len()
    }

    pub fn is_empty(&self) -> bool {
        self.omega.is_empty()
    }

    pub fn bit_depth(&self) -> BitDepth {
        match &self.measurements {
            Measurements::Quantized { spec, .. } => BitDepth::Finite(spec.bits()),
            Measurements::Unquantized { .. } => BitDepth::Unquantized,
        }
    }

    pub fn quantizer(&self) -> Option<&QuantizerSpec> {
        match &self.measurements {
            Measurements::Quantized { spec, .. } => Some(spec),
            Measurements::Unquantized { .. } => None,
        }
    }

    /// Codeword (or raw value) of every observed entry, in `omega` order.
    pub fn dequantized(&self) -> Vec<Complex64> {
        match &self.measurements {
            Measurements::Quantized { spec, bins } => {
                bins.iter().map(|&[re, im]| Complex64::new(spec.codeword(re), spec.codeword(im))).collect()
            }
            Measurements::Unquantized { values } => values.clone(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let count = match &self.measurements {
            Measurements::Quantized { spec, bins } => {
                if let Some(bad) = bins.iter().flatten().find(|&&b| b as usize >= spec.levels()) {
                    return Err(invalid(format!("bin index {bad} out of range for B={}", spec.bits())));
                }
                bins.len()
            }
            Measurements::Unquantized { values } => {
                if values.iter().any(|z| !z.re.is_finite() || !z.im.is_finite()) {
                    return Err(invalid("non-finite unquantized observation"));
                }
                values.len()
            }
        };
        if count != self.omega.len() {
            return Err(Error::DimensionMismatch(format!("{} indices but {count} measurements", self.omega.len())));
        }
        let mut seen = HashSet::with_capacity(self.omega.len());
        for &(i, j) in &self.omega {
            if i >= self.m || j >= self.n {
                return Err(invalid(format!("index ({i}, {j}) outside {}x{}", self.m, self.n)));
            }
            if !seen.insert((i, j)) {
                return Err(invalid(format!("duplicate observation at ({i}, {j})")));
            }
        }
        Ok(())
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }
}

/// Quantizes the real and imaginary parts of `w` on `omega` separately.
pub fn quantize_complex_matrix(w: &CMat, omega: &[(usize, usize)], spec: &QuantizerSpec) -> ObservedMatrix {
    let bins = omega
        .iter()
        .map(|&(i, j)| {
            let z = w[(i, j)];
            [quantize_real(z.re, spec), quantize_real(z.im, spec)]
        })
        .collect();
    ObservedMatrix {
        m: w.nrows(),
        n: w.ncols(),
        sigma_z: spec.sigma_z(),
        omega: omega.to_vec(),
        measurements: Measurements::Quantized { spec: spec.clone(), bins },
    }
}

/// Keeps the entries of `w` on `omega` without quantization.
pub fn observe_unquantized(w: &CMat, omega: &[(usize, usize)], sigma_z: f64) -> ObservedMatrix {
    ObservedMatrix {
        m: w.nrows(),
        n: w.ncols(),
        sigma_z,
        omega: omega.to_vec(),
        measurements: Measurements::Unquantized { values: omega.iter().map(|&(i, j)| w[(i, j)]).collect() },
    }
}

// On-disk form: {m, n, B, sigma_z, entries: [[i, j, re, im], ...]}. Quantized
// files carry bin indices; `B: null` files carry the raw values.
#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ObservedFile {
    m: usize,
    n: usize,
    #[serde(rename = "B")]
    bits: Option<u32>,
    sigma_z: f64,
    entries: Vec<(usize, usize, serde_json::Number, serde_json::Number)>,
}

impl Serialize for ObservedMatrix {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        let num =
            |x: f64| serde_json::Number::from_f64(x).ok_or_else(|| serde::ser::Error::custom("non-finite observation"));
        let entries = match &self.measurements {
            Measurements::Quantized { bins, .. } => self
                .omega
                .iter()
                .zip(bins)
                .map(|(&(i, j), &[re, im])| Ok((i, j, re.into(), im.into())))
                .collect::<std::result::Result<Vec<_>, S::Error>>()?,
            Measurements::Unquantized { values } => self
                .omega
                .iter()
                .zip(values)
                .map(|(&(i, j), z)| Ok((i, j, num(z.re)?, num(z.im)?)))
                .collect::<std::result::Result<Vec<_>, S::Error>>()?,
        };
        ObservedFile { m: self.m, n: self.n, bits: self.bit_depth().finite(), sigma_z: self.sigma_z, entries }
            .serialize(s)
    }
}

impl<'de> Deserialize<'de> for ObservedMatrix {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        use serde::de::Error as _;
        let file = ObservedFile::deserialize(d)?;
        let omega = file.entries.iter().map(|e| (e.0, e.1)).collect();
        let measurements = match file.bits {
            Some(bits) => {
                let spec = build_uniform_quantizer(bits, file.sigma_z).map_err(D::Error::custom)?;
                let bin = |x: &serde_json::Number| {
                    x.as_u64()
                        .and_then(|b| u32::try_from(b).ok())
                        .ok_or_else(|| D::Error::custom(format!("bin index must be a non-negative integer, got {x}")))
                };
                let bins = file
                    .entries
                    .iter()
                    .map(|e| Ok([bin(&e.2)?, bin(&e.3)?]))
                    .collect::<std::result::Result<Vec<_>, D::Error>>()?;
                Measurements::Quantized { spec, bins }
            }
            None => {
                let val = |x: &serde_json::Number| x.as_f64().ok_or_else(|| D::Error::custom("bad value"));
                let values = file
                    .entries
                    .iter()
                    .map(|e| Ok(Complex64::new(val(&e.2)?, val(&e.3)?)))
                    .collect::<std::result::Result<Vec<_>, D::Error>>()?;
                Measurements::Unquantized { values }
            }
        };
        let obs = ObservedMatrix { m: file.m, n: file.n, sigma_z: file.sigma_z, omega, measurements };
        obs.validate().map_err(D::Error::custom)?;
        Ok(obs)
    }
}
