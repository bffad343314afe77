//! Embedding bags: the per-slide unit of weakly supervised work.
//!
//! # `CEB1` layout
//!
//! All integers and floats are little-endian.
//!
//! | field     | type              |
//! |-----------|-------------------|
//! | magic     | `b"CEB1"`         |
//! | version   | u32 (= 1)         |
//! | N         | u32               |
//! | D         | u32               |
//! | id length | u16               |
//! | slide id  | UTF-8 bytes       |
//! | label     | i32 (-1 = none)   |
//! | coords    | N x 2 i32 (x, y)  |
//! | values    | N x D f32         |

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::Path;

use ndarray::Array2;
use rand::seq::{index, SliceRandom};
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, FormatError, Result};
use crate::rng;

pub const MAGIC: [u8; 4] = *b"CEB1";
pub const VERSION: u32 = 1;

/// Feature index carrying the positive-class signal in synthetic bags.
pub const SIGNAL_AXIS: usize = 0;
/// Feature index carrying the out-of-distribution shift in synthetic bags.
pub const OOD_AXIS: usize = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct EmbeddingBag {
    pub slide_id: String,
    /// N x D patch embeddings.
    pub instances: Array2<f32>,
    /// Patch top-left corners, one per instance.
    pub coords: Vec<(i32, i32)>,
    pub label: Option<usize>,
}

impl EmbeddingBag {
    pub fn new(
        slide_id: impl Into<String>,
        instances: Array2<f32>,
        coords: Vec<(i32, i32)>,
        label: Option<usize>,
    ) -> Result<Self> {
        let bag = EmbeddingBag {
            slide_id: slide_id.into(),
            instances,
            coords,
            label,
        };
        bag.validate()?;
        Ok(bag)
    }

    pub fn validate(&self) -> Result<()> {
        if self.len() == 0 {
            return Err(FormatError::ZeroInstances.into());
        }
        if self.dim() == 0 {
            return Err(FormatError::ZeroDim.into());
        }
        if self.coords.len() != self.len() {
            return Err(Error::invalid(format!(
                "bag {} has {} coords for {} instances",
                self.slide_id,
                self.coords.len(),
                self.len()
            )));
        }
        if self.instances.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!("embedding in bag {}", self.slide_id)));
        }
        if self.slide_id.len() > u16::MAX as usize {
            return Err(FormatError::SlideIdTooLong.into());
        }
        if let Some(l) = self.label {
            if l > i32::MAX as usize {
                return Err(Error::invalid("label does not fit in i32"));
            }
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.instances.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn dim(&self) -> usize {
        self.instances.ncols()
    }

    pub fn instances_f64(&self) -> Array2<f64> {
        self.instances.mapv(f64::from)
    }

    pub fn encoded_len(&self) -> usize {
        4 + 4 + 4 + 4 + 2 + self.slide_id.len() + 4 + 8 * self.len() + 4 * self.len() * self.dim()
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        self.validate()?;
        let mut out = Vec::with_capacity(self.encoded_len());
        out.extend_from_slice(&MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(self.len() as u32).to_le_bytes());
        out.extend_from_slice(&(self.dim() as u32).to_le_bytes());
        out.extend_from_slice(&(self.slide_id.len() as u16).to_le_bytes());
        out.extend_from_slice(self.slide_id.as_bytes());
        let label = self.label.map_or(-1i32, |l| l as i32);
        out.extend_from_slice(&label.to_le_bytes());
        for &(x, y) in &self.coords {
            out.extend_from_slice(&x.to_le_bytes());
            out.extend_from_slice(&y.to_le_bytes());
        }
        for row in self.instances.rows() {
            for &v in row {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { buf: bytes, pos: 0 };
        let magic: [u8; 4] = r.take(4)?.try_into().unwrap();
        if magic != MAGIC {
            return Err(FormatError::BadMagic(magic).into());
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(FormatError::BadVersion(version).into());
        }
        let n = r.u32()? as usize;
        let d = r.u32()? as usize;
        if n == 0 {
            return Err(FormatError::ZeroInstances.into());
        }
        if d == 0 {
            return Err(FormatError::ZeroDim.into());
        }
        let id_len = r.u16()? as usize;
        let slide_id = std::str::from_utf8(r.take(id_len)?)
            .map_err(|_| FormatError::InvalidSlideId)?
            .to_owned();
        let label = r.i32()?;
        let needed = n
            .checked_mul(8)
            .and_then(|c| n.checked_mul(d)?.checked_mul(4)?.checked_add(c))
            .ok_or(FormatError::Truncated {
                needed: usize::MAX,
                available: bytes.len() - r.pos,
            })?;
        if r.remaining() < needed {
            return Err(FormatError::Truncated {
                needed,
                available: r.remaining(),
            }
            .into());
        }
        let mut coords = Vec::with_capacity(n);
        for _ in 0..n {
            coords.push((r.i32()?, r.i32()?));
        }
        let mut values = Vec::with_capacity(n * d);
        for _ in 0..n * d {
            values.push(f32::from_le_bytes(r.take(4)?.try_into().unwrap()));
        }
        if r.remaining() != 0 {
            return Err(FormatError::TrailingBytes(r.remaining()).into());
        }
        let instances = Array2::from_shape_vec((n, d), values)
            .map_err(|e| Error::invalid(e.to_string()))?;
        EmbeddingBag::new(
            slide_id,
            instances,
            coords,
            if label < 0 { None } else { Some(label as usize) },
        )
    }

    /// Writes to a temporary sibling file and renames it into place.
    pub fn write_file(&self, path: &Path) -> Result<()> {
        write_atomic(path, &self.to_bytes()?)
    }

    pub fn read_file(path: &Path) -> Result<Self> {
        EmbeddingBag::from_bytes(&fs::read(path)?)
    }
}

pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let name = path
        .file_name()
        .ok_or_else(|| Error::invalid(format!("not a file path: {}", path.display())))?;
    let mut tmp_name = std::ffi::OsString::from(".");
    tmp_name.push(name);
    tmp_name.push(".tmp");
    let tmp = path.with_file_name(tmp_name);
    {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
    }
    fs::rename(&tmp, path)?;
    Ok(())
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn remaining(&self) -> usize {
        self.buf.len() - self.pos
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.remaining() < n {
            return Err(FormatError::Truncated {
                needed: n,
                available: self.remaining(),
            }
            .into());
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn i32(&mut self) -> Result<i32> {
        Ok(i32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SyntheticSpec {
    pub bags_per_class: usize,
    pub instances_per_bag: usize,
    pub dim: usize,
    pub signal_instances: usize,
    /// Mean shift of signal instances along [`SIGNAL_AXIS`].
    pub separation: f64,
    /// Mean shift of every instance of an OOD bag along [`OOD_AXIS`].
    pub ood_shift: f64,
    pub ood_bags: usize,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        SyntheticSpec {
            bags_per_class: 100,
            instances_per_bag: 50,
            dim: 32,
            signal_instances: 3,
            separation: 6.0,
            ood_shift: 6.0,
            ood_bags: 0,
            seed: 42,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticSet {
    /// Negative bags (label 0) then positive bags (label 1).
    pub bags: Vec<EmbeddingBag>,
    /// Ground-truth signal instance indices, parallel to `bags`; empty for
    /// negatives.
    pub signal: Vec<Vec<usize>>,
    /// Unlabeled out-of-distribution bags.
    pub ood: Vec<EmbeddingBag>,
}

impl SyntheticSet {
    pub fn labels(&self) -> Vec<usize> {
        self.bags.iter().map(|b| b.label.unwrap_or(0)).collect()
    }
}

fn grid_coords(n: usize) -> Vec<(i32, i32)> {
    let side = (n as f64).sqrt().ceil().max(1.0) as usize;
    (0..n)
        .map(|i| (((i % side) * 256) as i32, ((i / side) * 256) as i32))
        .collect()
}

fn noise_matrix(rng: &mut rng::Rng, n: usize, d: usize) -> Array2<f32> {
    Array2::from_shape_simple_fn((n, d), || {
        let v: f64 = StandardNormal.sample(rng);
        v as f32
    })
}

pub fn generate_synthetic_bags(spec: &SyntheticSpec) -> Result<SyntheticSet> {
    if spec.bags_per_class == 0 || spec.instances_per_bag == 0 || spec.dim == 0 {
        return Err(Error::invalid("synthetic spec sizes must be positive"));
    }
    if spec.signal_instances == 0 {
        return Err(Error::invalid("signal instance count must be positive"));
    }
    if spec.signal_instances > spec.instances_per_bag {
        return Err(Error::invalid(format!(
            "signal instance count {} exceeds bag size {}",
            spec.signal_instances, spec.instances_per_bag
        )));
    }
    if !(spec.separation >= 0.0) || !(spec.ood_shift >= 0.0) {
        return Err(Error::invalid("separation and OOD shift must be non-negative"));
    }
    if spec.ood_bags > 0 && spec.dim <= OOD_AXIS {
        return Err(Error::invalid("OOD bags need at least two dimensions"));
    }
    let (n, d) = (spec.instances_per_bag, spec.dim);
    let coords = grid_coords(n);
    let mut bags = Vec::with_capacity(2 * spec.bags_per_class);
    let mut signal = Vec::with_capacity(2 * spec.bags_per_class);
    let mut stream = 0u64;
    for label in 0..2usize {
        for i in 0..spec.bags_per_class {
            let mut rng = rng::stream(spec.seed, stream);
            stream += 1;
            let mut x = noise_matrix(&mut rng, n, d);
            let mut idx = Vec::new();
            if label == 1 {
                idx = index::sample(&mut rng, n, spec.signal_instances).into_vec();
                idx.sort_unstable();
                for &k in &idx {
                    x[[k, SIGNAL_AXIS]] += spec.separation as f32;
                }
            }
            let id = format!("{}_{:04}", if label == 1 { "pos" } else { "neg" }, i);
            bags.push(EmbeddingBag::new(id, x, coords.clone(), Some(label))?);
            signal.push(idx);
        }
    }
    let mut ood = Vec::with_capacity(spec.ood_bags);
    for i in 0..spec.ood_bags {
        let mut rng = rng::stream(spec.seed, stream);
        stream += 1;
        let mut x = noise_matrix(&mut rng, n, d);
        x.column_mut(OOD_AXIS)
            .mapv_inplace(|v| v + spec.ood_shift as f32);
        ood.push(EmbeddingBag::new(format!("ood_{i:04}"), x, coords.clone(), None)?);
    }
    Ok(SyntheticSet { bags, signal, ood })
}

/// Per-sample fold assignment.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatasetSplit {
    pub k: usize,
    pub seed: u64,
    pub folds: Vec<usize>,
}

impl DatasetSplit {
    pub fn fold_indices(&self, fold: usize) -> Vec<usize> {
        (0..self.folds.len())
            .filter(|&i| self.folds[i] == fold)
            .collect()
    }

    /// Fold `test` held out, fold `(test + 1) % k` for validation, the rest
    /// for training.
    pub fn train_val_test(&self, test: usize) -> (Vec<usize>, Vec<usize>, Vec<usize>) {
        let val = (test + 1) % self.k;
        let mut tr = Vec::new();
        let mut va = Vec::new();
        let mut te = Vec::new();
        for (i, &f) in self.folds.iter().enumerate() {
            if f == test {
                te.push(i);
            } else if f == val {
                va.push(i);
            } else {
                tr.push(i);
            }
        }
        (tr, va, te)
    }
}

fn group_by_class(labels: &[usize]) -> BTreeMap<usize, Vec<usize>> {
    let mut by_class: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for (i, &l) in labels.iter().enumerate() {
        by_class.entry(l).or_default().push(i);
    }
    by_class
}

/// Shuffles each class and deals its members round-robin across folds. The
/// dealing position carries over between classes so small classes do not
/// pile into the first fold.
pub fn stratified_kfold(labels: &[usize], k: usize, seed: u64) -> Result<DatasetSplit> {
    if k < 2 {
        return Err(Error::invalid(format!("fold count must be at least 2, got {k}")));
    }
    if k > labels.len() {
        return Err(Error::invalid(format!(
            "fold count {k} exceeds sample count {}",
            labels.len()
        )));
    }
    let mut rng = rng::from_seed(seed);
    let mut folds = vec![0usize; labels.len()];
    let mut next = 0usize;
    for (_, mut members) in group_by_class(labels) {
        members.shuffle(&mut rng);
        for i in members {
            folds[i] = next;
            next = (next + 1) % k;
        }
    }
    Ok(DatasetSplit { k, seed, folds })
}

/// Exactly `k_per_class` indices from every class, sorted ascending.
pub fn few_shot_sample(labels: &[usize], k_per_class: usize, seed: u64) -> Result<Vec<usize>> {
    let by_class = group_by_class(labels);
    for (&class, members) in &by_class {
        if members.len() < k_per_class {
            return Err(Error::InsufficientClass {
                class,
                available: members.len(),
                requested: k_per_class,
            });
        }
    }
    let mut rng = rng::from_seed(seed);
    let mut out = Vec::with_capacity(k_per_class * by_class.len());
    for members in by_class.values() {
        let picked = index::sample(&mut rng, members.len(), k_per_class);
        out.extend(picked.iter().map(|j| members[j]));
    }
    out.sort_unstable();
    Ok(out)
}

/// Randomly permutes labels (the shuffled-label control).
pub fn permute_labels(labels: &[usize], seed: u64) -> Vec<usize> {
    let mut out = labels.to_vec();
    let mut rng = rng::from_seed(seed);
    out.shuffle(&mut rng);
    out
}

/// Draws a standard-normal instance, shifted along [`SIGNAL_AXIS`] when
/// `signal` is set. Used for instance-level checks of the generator model.
pub fn sample_instance(rng: &mut rng::Rng, dim: usize, separation: f64, signal: bool) -> Vec<f64> {
    let mut v: Vec<f64> = (0..dim).map(|_| StandardNormal.sample(rng)).collect();
    if signal {
        v[SIGNAL_AXIS] += separation;
    }
    v
}
