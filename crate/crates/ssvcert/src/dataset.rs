//! Sample matrices with generation metadata, and the line-based text format
//! shared by the CLI and test fixtures: a one-line JSON header followed by
//! `n` lines of `d` space-separated decimal values.

use std::fmt::Write as _;
use std::io::{BufRead, BufReader, Read, Write};

use nalgebra::DMatrix;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::{Error, Result};

/// Generation metadata carried alongside a sample matrix.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct DatasetMeta {
    pub n: usize,
    pub d: usize,
    pub dtype: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    pub generator: String,
    /// True mean of the sampling law, when synthetic.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub true_mean: Option<Vec<f64>>,
    /// True covariance (row-major d×d), when synthetic.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub true_cov: Option<Vec<f64>>,
}

/// An n×d real sample matrix; rows are observations.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub data: DMatrix<f64>,
    pub meta: DatasetMeta,
}

impl Dataset {
    pub fn new(data: DMatrix<f64>, generator: &str, seed: Option<u64>) -> Self {
        let meta = DatasetMeta {
            n: data.nrows(),
            d: data.ncols(),
            dtype: "f64".to_owned(),
            seed,
            generator: generator.to_owned(),
            true_mean: None,
            true_cov: None,
        };
        Self { data, meta }
    }

    pub fn n(&self) -> usize {
        self.data.nrows()
    }

    pub fn d(&self) -> usize {
        self.data.ncols()
    }

    /// Row `i` as a slice-backed vector view.
    pub fn row(&self, i: usize) -> nalgebra::RowDVector<f64> {
        self.data.row(i).into_owned()
    }

    /// Standard Gaussian entries.
    pub fn gaussian(n: usize, d: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let data = DMatrix::from_fn(n, d, |_, _| standard_normal(&mut rng));
        let mut ds = Self::new(data, "gaussian", Some(seed));
        ds.meta.true_mean = Some(vec![0.0; d]);
        ds.meta.true_cov = Some(identity_flat(d));
        ds
    }

    /// Independent ±1 entries.
    pub fn rademacher(n: usize, d: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let data = DMatrix::from_fn(n, d, |_, _| if rng.gen::<bool>() { 1.0 } else { -1.0 });
        let mut ds = Self::new(data, "rademacher", Some(seed));
        ds.meta.true_mean = Some(vec![0.0; d]);
        ds.meta.true_cov = Some(identity_flat(d));
        ds
    }

    /// Student-t entries with `dof` degrees of freedom, scaled to unit
    /// variance (requires `dof ≥ 3`).
    pub fn scaled_t(n: usize, d: usize, dof: usize, seed: u64) -> Result<Self> {
        if dof < 3 {
            return Err(Error::InvalidArgument("scaled-t requires dof >= 3".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let scale = ((dof as f64 - 2.0) / dof as f64).sqrt();
        let data = DMatrix::from_fn(n, d, |_, _| {
            let z = standard_normal(&mut rng);
            let mut chi2 = 0.0;
            for _ in 0..dof {
                let g = standard_normal(&mut rng);
                chi2 += g * g;
            }
            scale * z / (chi2 / dof as f64).sqrt()
        });
        let mut ds = Self::new(data, "scaled-t", Some(seed));
        ds.meta.true_mean = Some(vec![0.0; d]);
        ds.meta.true_cov = Some(identity_flat(d));
        Ok(ds)
    }

    /// Serialize into the line-based text format.
    pub fn write_to(&self, mut w: impl Write) -> Result<()> {
        let header = serde_json::to_string(&self.meta)
            .map_err(|e| Error::Parse(format!("header encode: {e}")))?;
        let mut buf = String::with_capacity(self.n() * self.d() * 20 + header.len() + 2);
        buf.push_str(&header);
        buf.push('\n');
        for i in 0..self.n() {
            for j in 0..self.d() {
                if j > 0 {
                    buf.push(' ');
                }
                // Shortest round-trip formatting keeps files diffable and
                // byte-deterministic for a fixed seed.
                let _ = write!(buf, "{}", self.data[(i, j)]);
            }
            buf.push('\n');
        }
        w.write_all(buf.as_bytes())?;
        Ok(())
    }

    /// Parse the line-based text format.
    pub fn read_from(r: impl Read) -> Result<Self> {
        let mut lines = BufReader::new(r).lines();
        let header = lines
            .next()
            .ok_or_else(|| Error::Parse("empty dataset file".into()))??;
        let meta: DatasetMeta = serde_json::from_str(&header)
            .map_err(|e| Error::Parse(format!("dataset header: {e}")))?;
        let mut data = DMatrix::zeros(meta.n, meta.d);
        for i in 0..meta.n {
            let line = lines
                .next()
                .ok_or_else(|| Error::Parse(format!("expected {} data rows, got {i}", meta.n)))??;
            let mut vals = line.split_ascii_whitespace();
            for j in 0..meta.d {
                let tok = vals
                    .next()
                    .ok_or_else(|| Error::Parse(format!("row {i}: expected {} values", meta.d)))?;
                data[(i, j)] = tok
                    .parse()
                    .map_err(|e| Error::Parse(format!("row {i} col {j}: {e}")))?;
            }
            if vals.next().is_some() {
                return Err(Error::Parse(format!("row {i}: too many values")));
            }
        }
        Ok(Self { data, meta })
    }

    pub fn save(&self, path: &std::path::Path) -> Result<()> {
        let f = std::fs::File::create(path)?;
        self.write_to(std::io::BufWriter::new(f))
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        let f = std::fs::File::open(path)?;
        Self::read_from(f)
    }
}

fn identity_flat(d: usize) -> Vec<f64> {
    let mut v = vec![0.0; d * d];
    for i in 0..d {
        v[i * d + i] = 1.0;
    }
    v
}

/// One standard-normal draw (Box–Muller, consuming two uniforms).
pub fn standard_normal(rng: &mut impl Rng) -> f64 {
    loop {
        let u1: f64 = rng.gen();
        let u2: f64 = rng.gen();
        if u1 > 0.0 {
            let r = (-2.0 * u1.ln()).sqrt();
            let v = r * (2.0 * std::f64::consts::PI * u2).cos();
            if v.is_finite() {
                return v;
            }
        }
    }
}

/// Fill a vector with i.i.d. standard normals.
pub fn normal_vector(len: usize, rng: &mut impl Rng) -> Vec<f64> {
    (0..len).map(|_| standard_normal(rng)).collect()
}

/// Uniformly random unit vector.
pub fn random_unit_vector(d: usize, rng: &mut impl Rng) -> Vec<f64> {
    loop {
        let mut v = normal_vector(d, rng);
        let norm: f64 = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm > 1e-12 {
            for x in &mut v {
                *x /= norm;
            }
            return v;
        }
    }
}

/// A Haar-random rotation (orthogonal matrix with determinant ±1), via QR of
/// a Gaussian matrix with sign-fixed diagonal.
pub fn random_rotation(d: usize, rng: &mut impl Rng) -> DMatrix<f64> {
    let g = DMatrix::from_fn(d, d, |_, _| standard_normal(rng));
    let qr = g.qr();
    let mut q = qr.q();
    let r = qr.r();
    for j in 0..d {
        if r[(j, j)] < 0.0 {
            for i in 0..d {
                q[(i, j)] = -q[(i, j)];
            }
        }
    }
    q
}
