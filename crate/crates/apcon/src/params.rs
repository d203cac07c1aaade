//! Flat parameter storage with named segments.
//!
//! Every network weight or bias block occupies one contiguous row-major
//! slice of a single `Vec<f64>`, so optimizers and gradients work on flat
//! arrays while the tape views segments as matrices.

use std::collections::HashMap;
use std::io::{Read, Write};
use std::path::Path;
use std::sync::Arc;

use rand::distributions::{Distribution, Uniform};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

/// How a segment is filled by `ParameterVector::init`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Init {
    /// Uniform on +-sqrt(6 / (rows + cols)).
    GlorotUniform,
    Zeros,
    Ones,
}

/// One named weight/bias block, viewed as a rows x cols row-major matrix.
#[derive(Debug, Clone)]
pub struct Segment {
    pub name: String,
    pub offset: usize,
    pub rows: usize,
    pub cols: usize,
    pub init: Init,
}

impl Segment {
    pub fn len(&self) -> usize {
        self.rows * self.cols
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Ordered segment table; total length is the sum of segment lengths.
#[derive(Debug, Default)]
pub struct ParameterLayout {
    segments: Vec<Segment>,
    by_name: HashMap<String, usize>,
    total: usize,
}

impl ParameterLayout {
    pub fn new() -> Self {
        Self::default()
    }

    /// Appends a segment and returns its index. Names must be unique.
    pub fn push(&mut self, name: &str, rows: usize, cols: usize, init: Init) -> usize {
        assert!(rows > 0 && cols > 0, "empty segment {name}");
        assert!(
            !self.by_name.contains_key(name),
            "duplicate segment name {name}"
        );
        let idx = self.segments.len();
        self.segments.push(Segment {
            name: name.to_string(),
            offset: self.total,
            rows,
            cols,
            init,
        });
        self.by_name.insert(name.to_string(), idx);
        self.total += rows * cols;
        idx
    }

    pub fn segments(&self) -> &[Segment] {
        &self.segments
    }

    pub fn segment(&self, idx: usize) -> &Segment {
        &self.segments[idx]
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.by_name.get(name).copied()
    }

    pub fn total_len(&self) -> usize {
        self.total
    }

    /// Name of the segment containing flat index `i`, for diagnostics.
    pub fn segment_name_at(&self, i: usize) -> &str {
        for seg in &self.segments {
            if i >= seg.offset && i < seg.offset + seg.len() {
                return &seg.name;
            }
        }
        "<out of range>"
    }
}

/// Flat values plus their shared layout.
#[derive(Debug, Clone)]
pub struct ParameterVector {
    pub layout: Arc<ParameterLayout>,
    pub values: Vec<f64>,
}

impl ParameterVector {
    /// Fills each segment from its `Init` rule with a seed-derived stream.
    pub fn init(layout: Arc<ParameterLayout>, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut values = vec![0.0; layout.total_len()];
        for seg in layout.segments() {
            let slice = &mut values[seg.offset..seg.offset + seg.len()];
            match seg.init {
                Init::Zeros => slice.fill(0.0),
                Init::Ones => slice.fill(1.0),
                Init::GlorotUniform => {
                    let limit = (6.0 / (seg.rows + seg.cols) as f64).sqrt();
                    let dist = Uniform::new_inclusive(-limit, limit);
                    for v in slice.iter_mut() {
                        *v = dist.sample(&mut rng);
                    }
                }
            }
        }
        Self { layout, values }
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn segment_values(&self, idx: usize) -> &[f64] {
        let seg = self.layout.segment(idx);
        &self.values[seg.offset..seg.offset + seg.len()]
    }

    /// Total number of scalar parameters.
    pub fn param_count(&self) -> usize {
        self.values.len()
    }

    /// Writes the self-describing container: magic, version, segment table
    /// (name, offset, rows, cols), then the values as little-endian f64.
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
        self.write_to(&mut w)
    }

    pub fn write_to(&self, w: &mut impl Write) -> Result<()> {
        w.write_all(b"APPV")?;
        w.write_all(&1u32.to_le_bytes())?;
        w.write_all(&(self.layout.segments().len() as u64).to_le_bytes())?;
        for seg in self.layout.segments() {
            let name = seg.name.as_bytes();
            w.write_all(&(name.len() as u32).to_le_bytes())?;
            w.write_all(name)?;
            w.write_all(&(seg.offset as u64).to_le_bytes())?;
            w.write_all(&(seg.rows as u64).to_le_bytes())?;
            w.write_all(&(seg.cols as u64).to_le_bytes())?;
        }
        w.write_all(&(self.values.len() as u64).to_le_bytes())?;
        for v in &self.values {
            w.write_all(&v.to_le_bytes())?;
        }
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut r = std::io::BufReader::new(std::fs::File::open(path)?);
        Self::read_from(&mut r)
    }

    pub fn read_from(r: &mut impl Read) -> Result<Self> {
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic)?;
        if &magic != b"APPV" {
            return Err(Error::Format("bad parameter container magic".into()));
        }
        let version = read_u32(r)?;
        if version != 1 {
            return Err(Error::Format(format!(
                "unsupported parameter container version {version}"
            )));
        }
        let n_segs = read_u64(r)? as usize;
        let mut layout = ParameterLayout::new();
        let mut expected_offset = 0usize;
        for _ in 0..n_segs {
            let name_len = read_u32(r)? as usize;
            let mut name = vec![0u8; name_len];
            r.read_exact(&mut name)?;
            let name = String::from_utf8(name)
                .map_err(|_| Error::Format("segment name is not utf-8".into()))?;
            let offset = read_u64(r)? as usize;
            let rows = read_u64(r)? as usize;
            let cols = read_u64(r)? as usize;
            if offset != expected_offset {
                return Err(Error::Format(format!(
                    "segment {name} offset {offset} does not follow the previous segment"
                )));
            }
            // Init rule is not persisted; loaded vectors are never re-initialized.
            layout.push(&name, rows, cols, Init::Zeros);
            expected_offset += rows * cols;
        }
        let total = read_u64(r)? as usize;
        if total != layout.total_len() {
            return Err(Error::Format(format!(
                "value count {total} does not match segment table total {}",
                layout.total_len()
            )));
        }
        let mut values = vec![0.0f64; total];
        let mut buf = [0u8; 8];
        for v in values.iter_mut() {
            r.read_exact(&mut buf)?;
            *v = f64::from_le_bytes(buf);
        }
        Ok(Self {
            layout: Arc::new(layout),
            values,
        })
    }
}

fn read_u32(r: &mut impl Read) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn read_u64(r: &mut impl Read) -> Result<u64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)?;
    Ok(u64::from_le_bytes(b))
}
