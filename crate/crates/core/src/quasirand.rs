//! Sobol low-discrepancy sequence over the unit hypercube.
//!
//! Direction numbers come from the bundled Joe-Kuo table
//! (`data/new-joe-kuo-6.128.txt`, one line per dimension `d s a m_1 .. m_s`).
//! Dimension 1 is the van der Corput sequence and has no table row.
//!
//! Points are produced in Gray-code order, which visits the same set of
//! points as the plain binary expansion for every prefix of length `2^k`.
//! [`SobolGenerator::point_at`] evaluates the binary expansion directly.

use alloc::vec::Vec;

use thiserror::Error;

/// Number of bits in every direction number; coordinates are `k / 2^MAX_BITS`.
pub const MAX_BITS: usize = 30;

const JOE_KUO_TABLE: &str = include_str!("../data/new-joe-kuo-6.128.txt");

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum SobolError {
    #[error("sobol dimension must be at least 1")]
    ZeroDimension,
    #[error("sobol dimension {requested} exceeds the bundled direction-number table ({supported} dimensions)")]
    UnsupportedDimension { requested: usize, supported: usize },
    #[error("malformed direction-number table at line {line}: {reason}")]
    MalformedTable { line: usize, reason: &'static str },
    #[error("sobol sequence exhausted after 2^{MAX_BITS} points")]
    Exhausted,
}

/// One row of the Joe-Kuo table: primitive polynomial of degree `degree`
/// with interior coefficients packed in `coefficients`, plus initial `m_i`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PrimitivePolynomial {
    pub dimension: usize,
    pub degree: usize,
    pub coefficients: u32,
    pub initial: Vec<u32>,
}

/// Parses a direction-number table in Joe-Kuo text format. The header line
/// (starting with `d`) and blank lines are skipped.
pub fn parse_direction_table(text: &str) -> Result<Vec<PrimitivePolynomial>, SobolError> {
    let mut rows = Vec::new();
    for (idx, raw) in text.lines().enumerate() {
        let line = idx + 1;
        let trimmed = raw.trim();
        if trimmed.is_empty() || trimmed.starts_with('d') || trimmed.starts_with('#') {
            continue;
        }
        let mut fields = trimmed.split_whitespace().map(|f| f.parse::<u32>());
        let mut next = |reason| match fields.next() {
            Some(Ok(v)) => Ok(v),
            _ => Err(SobolError::MalformedTable { line, reason }),
        };
        let dimension = next("missing dimension")? as usize;
        let degree = next("missing degree")? as usize;
        let coefficients = next("missing coefficients")?;
        if degree == 0 || degree > MAX_BITS {
            return Err(SobolError::MalformedTable { line, reason: "degree out of range" });
        }
        let mut initial = Vec::with_capacity(degree);
        for i in 0..degree {
            let m = next("too few initial direction numbers")?;
            // m_i must be odd and below 2^i
            if m % 2 == 0 || m >= (1 << (i + 1)) {
                return Err(SobolError::MalformedTable { line, reason: "invalid initial direction number" });
            }
            initial.push(m);
        }
        if fields.next().is_some() {
            return Err(SobolError::MalformedTable { line, reason: "trailing fields" });
        }
        rows.push(PrimitivePolynomial { dimension, degree, coefficients, initial });
    }
    Ok(rows)
}

/// Rows of the bundled table (dimensions 2 and up).
pub fn bundled_table() -> Vec<PrimitivePolynomial> {
    parse_direction_table(JOE_KUO_TABLE).expect("bundled direction-number table is well formed")
}

/// Highest dimension supported by the bundled table.
pub fn max_dimension() -> usize {
    bundled_table().len() + 1
}

/// Scaled direction numbers `V_j = m_j * 2^(MAX_BITS - j)` for one dimension.
///
/// The first `degree` values are the table's `m_j`; later values follow the
/// standard recurrence
/// `m_j = 2 a_1 m_{j-1} ^ 4 a_2 m_{j-2} ^ ... ^ 2^s m_{j-s} ^ m_{j-s}`.
pub fn direction_numbers(poly: Option<&PrimitivePolynomial>) -> [u32; MAX_BITS] {
    let mut v = [0u32; MAX_BITS];
    match poly {
        None => {
            for (j, vj) in v.iter_mut().enumerate() {
                *vj = 1 << (MAX_BITS - 1 - j);
            }
        }
        Some(p) => {
            let s = p.degree;
            let mut m = [0u32; MAX_BITS];
            let n_init = s.min(MAX_BITS);
            m[..n_init].copy_from_slice(&p.initial[..n_init]);
            for j in s..MAX_BITS {
                let mut next = m[j - s] ^ (m[j - s] << s);
                for k in 1..s {
                    let bit = (p.coefficients >> (s - 1 - k)) & 1;
                    if bit == 1 {
                        next ^= m[j - k] << k;
                    }
                }
                m[j] = next;
            }
            for j in 0..MAX_BITS {
                v[j] = m[j] << (MAX_BITS - 1 - j);
            }
        }
    }
    v
}

/// Gray-code Sobol generator.
#[derive(Debug, Clone, PartialEq)]
pub struct SobolGenerator {
    dimension: usize,
    directions: Vec<[u32; MAX_BITS]>,
    state: Vec<u32>,
    counter: u64,
}

impl SobolGenerator {
    /// Builds a generator for `dimension` coordinates and discards the first
    /// `seed_skip` points. With `seed_skip = 0` the first point is the origin.
    pub fn new(dimension: usize, seed_skip: u64) -> Result<Self, SobolError> {
        if dimension == 0 {
            return Err(SobolError::ZeroDimension);
        }
        let table = bundled_table();
        let supported = table.len() + 1;
        if dimension > supported {
            return Err(SobolError::UnsupportedDimension { requested: dimension, supported });
        }
        let directions: Vec<_> = (0..dimension)
            .map(|d| direction_numbers(if d == 0 { None } else { Some(&table[d - 1]) }))
            .collect();
        let mut gen = Self { dimension, directions, state: alloc::vec![0; dimension], counter: 0 };
        gen.skip_to(seed_skip)?;
        Ok(gen)
    }

    pub fn dimension(&self) -> usize {
        self.dimension
    }

    /// Index of the next point to be returned.
    pub fn counter(&self) -> u64 {
        self.counter
    }

    pub fn directions(&self) -> &[[u32; MAX_BITS]] {
        &self.directions
    }

    /// Jumps to sequence index `index` by evaluating its Gray code directly.
    pub fn skip_to(&mut self, index: u64) -> Result<(), SobolError> {
        if index >= 1 << MAX_BITS {
            return Err(SobolError::Exhausted);
        }
        let gray = index ^ (index >> 1);
        for (d, slot) in self.state.iter_mut().enumerate() {
            *slot = xor_bits(&self.directions[d], gray);
        }
        self.counter = index;
        Ok(())
    }

    /// Returns the next point and advances the counter.
    pub fn next_point(&mut self) -> Result<Vec<f64>, SobolError> {
        let mut out = alloc::vec![0.0; self.dimension];
        self.next_into(&mut out)?;
        Ok(out)
    }

    /// Writes the next point into `out` (length must equal the dimension).
    pub fn next_into(&mut self, out: &mut [f64]) -> Result<(), SobolError> {
        if self.counter >= 1 << MAX_BITS {
            return Err(SobolError::Exhausted);
        }
        assert_eq!(out.len(), self.dimension, "output buffer dimension");
        let scale = 1.0 / (1u64 << MAX_BITS) as f64;
        for (o, s) in out.iter_mut().zip(&self.state) {
            *o = f64::from(*s) * scale;
        }
        // flip the direction number at the lowest zero bit of the counter
        let c = (!self.counter).trailing_zeros() as usize;
        if c < MAX_BITS {
            for (s, dir) in self.state.iter_mut().zip(&self.directions) {
                *s ^= dir[c];
            }
        }
        self.counter += 1;
        Ok(())
    }

    /// Point with binary-expansion index `n`: `x_{n,d} = XOR_m b_m V_{d,m} / 2^MAX_BITS`
    /// where `b_m` are the bits of `n` itself (no Gray code).
    pub fn point_at(&self, n: u64) -> Vec<f64> {
        let scale = 1.0 / (1u64 << MAX_BITS) as f64;
        self.directions.iter().map(|dir| f64::from(xor_bits(dir, n)) * scale).collect()
    }

    /// Draws `count` consecutive points.
    pub fn take_points(&mut self, count: usize) -> Result<Vec<Vec<f64>>, SobolError> {
        (0..count).map(|_| self.next_point()).collect()
    }
}

fn xor_bits(dir: &[u32; MAX_BITS], bits: u64) -> u32 {
    let mut acc = 0;
    for (j, v) in dir.iter().enumerate() {
        if (bits >> j) & 1 == 1 {
            acc ^= v;
        }
    }
    acc
}
