//! The train-only retrieval library: offset-anchored history keys paired with a
//! descriptor of how each chain's continuation departs from its history.

use std::fs::File;
use std::io::{BufWriter, Read, Write};
use std::path::Path;
use std::sync::OnceLock;

use ndarray::{Array2, ArrayView2, Zip};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::dataset::Chain;
use crate::error::{Error, Result};
use crate::search::KeyIndex;

/// Default ratio stabilizer.
pub const DEFAULT_EPSILON: f64 = 1e-4;

/// How a chain's continuation is encoded relative to its history.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Descriptor {
    /// `(F - H) / (H + eps * sign(H))`
    Ratio,
    /// `F - H`
    Residual,
}

impl Descriptor {
    fn code(self) -> u8 {
        match self {
            Descriptor::Ratio => 0,
            Descriptor::Residual => 1,
        }
    }

    fn from_code(code: u8) -> Result<Self> {
        match code {
            0 => Ok(Descriptor::Ratio),
            1 => Ok(Descriptor::Residual),
            other => Err(Error::Malformed(format!("unknown descriptor code {other}"))),
        }
    }
}

impl std::str::FromStr for Descriptor {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "ratio" => Ok(Descriptor::Ratio),
            "residual" => Ok(Descriptor::Residual),
            other => Err(Error::config(format!("unknown descriptor {other:?}"))),
        }
    }
}

/// Sign with `sign(0) = +1`, so `h + eps * sign(h)` never vanishes.
#[inline]
fn sign_nonzero(x: f64) -> f64 {
    if x >= 0.0 {
        1.0
    } else {
        -1.0
    }
}

#[inline]
fn ratio_denominator(h: f64, epsilon: f64) -> f64 {
    h + epsilon * sign_nonzero(h)
}

/// Elementwise relative change of `f` with respect to `h`.
pub fn ratio(h: ArrayView2<'_, f64>, f: ArrayView2<'_, f64>, epsilon: f64) -> Result<Array2<f64>> {
    check_same_shape(h, f)?;
    if !(epsilon > 0.0) {
        return Err(Error::config("ratio epsilon must be positive"));
    }
    Ok(Zip::from(&h)
        .and(&f)
        .map_collect(|&h, &f| (f - h) / ratio_denominator(h, epsilon)))
}

/// Recovers `f` from `h` and its ratio descriptor.
pub fn invert_ratio(h: ArrayView2<'_, f64>, r: ArrayView2<'_, f64>, epsilon: f64) -> Array2<f64> {
    Zip::from(&h)
        .and(&r)
        .map_collect(|&h, &r| h + r * ratio_denominator(h, epsilon))
}

pub fn residual_descriptor(h: ArrayView2<'_, f64>, f: ArrayView2<'_, f64>) -> Result<Array2<f64>> {
    check_same_shape(h, f)?;
    Ok(&f - &h)
}

/// Subtracts the final row from every row; the last row becomes exactly zero.
pub fn offset_last_step(w: ArrayView2<'_, f64>) -> Array2<f64> {
    assert!(w.nrows() >= 1, "offset_last_step needs at least one row");
    let last = w.row(w.nrows() - 1).to_owned();
    &w - &last
}

fn check_same_shape(a: ArrayView2<'_, f64>, b: ArrayView2<'_, f64>) -> Result<()> {
    if a.dim() != b.dim() {
        return Err(Error::shape(format!("{:?} vs {:?}", a.dim(), b.dim())));
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq)]
pub struct LibraryEntry {
    /// History with its last step subtracted.
    pub key: Array2<f64>,
    /// Continuation descriptor.
    pub value: Array2<f64>,
    /// Start row of the source chain in series coordinates.
    pub source_start: usize,
}

/// Immutable once built. The correlation index over the keys is derived on
/// first use and shared between readers.
#[derive(Debug)]
pub struct RetrievalLibrary {
    entries: Vec<LibraryEntry>,
    seq_len: usize,
    channels: usize,
    epsilon: f64,
    descriptor: Descriptor,
    fingerprint: [u8; 32],
    index: OnceLock<KeyIndex>,
}

impl Clone for RetrievalLibrary {
    fn clone(&self) -> Self {
        Self {
            entries: self.entries.clone(),
            seq_len: self.seq_len,
            channels: self.channels,
            epsilon: self.epsilon,
            descriptor: self.descriptor,
            fingerprint: self.fingerprint,
            index: OnceLock::new(),
        }
    }
}

impl PartialEq for RetrievalLibrary {
    fn eq(&self, other: &Self) -> bool {
        self.seq_len == other.seq_len
            && self.channels == other.channels
            && self.epsilon.to_bits() == other.epsilon.to_bits()
            && self.descriptor == other.descriptor
            && self.fingerprint == other.fingerprint
            && self.entries == other.entries
    }
}

/// One entry per chain, ordered by chain start.
pub fn build_library(chains: &[Chain], epsilon: f64, descriptor: Descriptor) -> Result<RetrievalLibrary> {
    let first = chains.first().ok_or(Error::EmptyLibrary)?;
    let (seq_len, channels) = first.history.dim();
    if !(epsilon > 0.0) || !epsilon.is_finite() {
        return Err(Error::config("library epsilon must be positive and finite"));
    }
    for chain in chains {
        if chain.history.dim() != (seq_len, channels)
            || chain.continuation.dim() != (seq_len, channels)
            || chain.target.ncols() != channels
        {
            return Err(Error::shape(format!(
                "chain at {} does not match the first chain's shape",
                chain.start
            )));
        }
    }
    let mut order: Vec<&Chain> = chains.iter().collect();
    order.sort_by_key(|c| c.start);

    let entries = order
        .par_iter()
        .map(|chain| {
            let value = match descriptor {
                Descriptor::Ratio => ratio(chain.history.view(), chain.continuation.view(), epsilon)?,
                Descriptor::Residual => residual_descriptor(chain.history.view(), chain.continuation.view())?,
            };
            Ok(LibraryEntry {
                key: offset_last_step(chain.history.view()),
                value,
                source_start: chain.start,
            })
        })
        .collect::<Result<Vec<_>>>()?;

    let fingerprint = fingerprint_chains(&order, epsilon, descriptor);
    Ok(RetrievalLibrary {
        entries,
        seq_len,
        channels,
        epsilon,
        descriptor,
        fingerprint,
        index: OnceLock::new(),
    })
}

fn fingerprint_chains(chains: &[&Chain], epsilon: f64, descriptor: Descriptor) -> [u8; 32] {
    let mut hasher = Sha256::new();
    hasher.update(b"retrocast-library");
    hasher.update(FORMAT_VERSION.to_le_bytes());
    hasher.update(epsilon.to_bits().to_le_bytes());
    hasher.update([descriptor.code()]);
    hasher.update((chains.len() as u64).to_le_bytes());
    for chain in chains {
        hasher.update((chain.start as u64).to_le_bytes());
        for block in [&chain.history, &chain.target, &chain.continuation] {
            hasher.update((block.nrows() as u64).to_le_bytes());
            hasher.update((block.ncols() as u64).to_le_bytes());
            for v in block.iter() {
                hasher.update(v.to_le_bytes());
            }
        }
    }
    hasher.finalize().into()
}

impl RetrievalLibrary {
    pub fn entries(&self) -> &[LibraryEntry] {
        &self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn seq_len(&self) -> usize {
        self.seq_len
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn epsilon(&self) -> f64 {
        self.epsilon
    }

    pub fn descriptor(&self) -> Descriptor {
        self.descriptor
    }

    pub fn fingerprint(&self) -> &[u8; 32] {
        &self.fingerprint
    }

    pub fn fingerprint_hex(&self) -> String {
        hex::encode(self.fingerprint)
    }

    pub(crate) fn key_index(&self) -> &KeyIndex {
        self.index.get_or_init(|| KeyIndex::build(self))
    }

    /// Writes the library with 64-bit floats.
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        self.save_with_precision(path, Precision::F64)
    }

    pub fn save_with_precision(&self, path: impl AsRef<Path>, precision: Precision) -> Result<()> {
        let mut out = BufWriter::new(File::create(path)?);
        self.write_to(&mut out, precision)?;
        out.flush()?;
        Ok(())
    }

    pub fn write_to<W: Write>(&self, out: &mut W, precision: Precision) -> Result<()> {
        out.write_all(MAGIC)?;
        out.write_all(&FORMAT_VERSION.to_le_bytes())?;
        out.write_all(&(self.seq_len as u32).to_le_bytes())?;
        out.write_all(&(self.channels as u32).to_le_bytes())?;
        out.write_all(&[self.descriptor.code(), precision.width() as u8, 0, 0])?;
        out.write_all(&(self.entries.len() as u64).to_le_bytes())?;
        out.write_all(&self.epsilon.to_le_bytes())?;
        out.write_all(&self.fingerprint)?;
        for entry in &self.entries {
            out.write_all(&(entry.source_start as u64).to_le_bytes())?;
            for block in [&entry.key, &entry.value] {
                for &v in block.iter() {
                    match precision {
                        Precision::F64 => out.write_all(&v.to_le_bytes())?,
                        Precision::F32 => out.write_all(&(v as f32).to_le_bytes())?,
                    }
                }
            }
        }
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let mut file = File::open(path).map_err(|source| Error::Open {
            path: path.to_path_buf(),
            source,
        })?;
        let mut bytes = Vec::new();
        file.read_to_end(&mut bytes)?;
        Self::from_bytes(&bytes)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < MAGIC.len() || &bytes[..MAGIC.len()] != MAGIC {
            return Err(Error::BadMagic { expected: "RCASTLIB" });
        }
        if bytes.len() < HEADER_LEN {
            return Err(Error::Truncated {
                expected: HEADER_LEN as u64,
                actual: bytes.len() as u64,
            });
        }
        let mut cur = Cursor::new(&bytes[MAGIC.len()..HEADER_LEN]);
        let version = cur.u32();
        if version != FORMAT_VERSION {
            return Err(Error::UnsupportedVersion {
                found: version,
                supported: FORMAT_VERSION,
            });
        }
        let seq_len = cur.u32() as usize;
        let channels = cur.u32() as usize;
        let flags = cur.take(4);
        let descriptor = Descriptor::from_code(flags[0])?;
        let precision = Precision::from_width(flags[1])?;
        let n = cur.u64();
        let epsilon = f64::from_le_bytes(cur.take(8).try_into().unwrap());
        let fingerprint: [u8; 32] = cur.take(32).try_into().unwrap();
        if seq_len == 0 || channels == 0 {
            return Err(Error::Malformed("zero-sized entries".into()));
        }

        let cell = seq_len * channels;
        let entry_len = 8 + 2 * cell * precision.width();
        let expected = (HEADER_LEN as u64).saturating_add(n.saturating_mul(entry_len as u64));
        if (bytes.len() as u64) < expected {
            return Err(Error::Truncated {
                expected,
                actual: bytes.len() as u64,
            });
        }
        if (bytes.len() as u64) > expected {
            return Err(Error::Malformed(format!(
                "{} trailing bytes after the last entry",
                bytes.len() as u64 - expected
            )));
        }

        let mut cur = Cursor::new(&bytes[HEADER_LEN..]);
        let read_block = |cur: &mut Cursor<'_>| -> Array2<f64> {
            let data: Vec<f64> = (0..cell)
                .map(|_| match precision {
                    Precision::F64 => f64::from_le_bytes(cur.take(8).try_into().unwrap()),
                    Precision::F32 => f32::from_le_bytes(cur.take(4).try_into().unwrap()) as f64,
                })
                .collect();
            Array2::from_shape_vec((seq_len, channels), data).expect("block size checked")
        };
        let mut entries = Vec::with_capacity(n as usize);
        for _ in 0..n {
            let source_start = cur.u64() as usize;
            let key = read_block(&mut cur);
            let value = read_block(&mut cur);
            entries.push(LibraryEntry {
                key,
                value,
                source_start,
            });
        }
        if entries.is_empty() {
            return Err(Error::EmptyLibrary);
        }
        Ok(Self {
            entries,
            seq_len,
            channels,
            epsilon,
            descriptor,
            fingerprint,
            index: OnceLock::new(),
        })
    }
}

/// Float width used in the library file.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Precision {
    F64,
    /// Lossy opt-in that halves the file size.
    F32,
}

impl Precision {
    fn width(self) -> usize {
        match self {
            Precision::F64 => 8,
            Precision::F32 => 4,
        }
    }

    fn from_width(w: u8) -> Result<Self> {
        match w {
            8 => Ok(Precision::F64),
            4 => Ok(Precision::F32),
            other => Err(Error::Malformed(format!("unknown float width {other}"))),
        }
    }
}

const MAGIC: &[u8; 8] = b"RCASTLIB";
const FORMAT_VERSION: u32 = 1;
/// magic, version, seq_len, channels, flags, n, epsilon, fingerprint
const HEADER_LEN: usize = 8 + 4 + 4 + 4 + 4 + 8 + 8 + 32;

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn new(bytes: &'a [u8]) -> Self {
        Self { bytes, pos: 0 }
    }

    fn take(&mut self, n: usize) -> &'a [u8] {
        let out = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        out
    }

    fn u32(&mut self) -> u32 {
        u32::from_le_bytes(self.take(4).try_into().unwrap())
    }

    fn u64(&mut self) -> u64 {
        u64::from_le_bytes(self.take(8).try_into().unwrap())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::{extract_chains, Partition};
    use approx::assert_relative_eq;
    use ndarray::array;
    use proptest::prelude::*;

    #[test]
    fn ratio_of_doubling_is_one() {
        let h = array![[1.0], [2.0], [4.0]];
        let f = array![[2.0], [4.0], [8.0]];
        let r = ratio(h.view(), f.view(), 1e-9).unwrap();
        for v in r.iter() {
            assert!((v - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn ratio_is_zero_when_nothing_changes() {
        let h = array![[1.0, -3.0], [0.0, 2.5]];
        assert!(ratio(h.view(), h.view(), 1e-4).unwrap().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn ratio_at_zero_history_uses_positive_sign() {
        let r = ratio(array![[0.0]].view(), array![[1.0]].view(), 1e-4).unwrap();
        assert_relative_eq!(r[[0, 0]], 1e4, max_relative = 1e-12);
    }

    #[test]
    fn residual_is_difference() {
        let h = array![[1.0], [2.0]];
        let f = array![[3.0], [5.0]];
        assert_eq!(residual_descriptor(h.view(), f.view()).unwrap(), array![[2.0], [3.0]]);
        assert_eq!(
            residual_descriptor(array![[0.0], [0.0]].view(), array![[1.0], [-1.0]].view()).unwrap(),
            array![[1.0], [-1.0]]
        );
        assert!(residual_descriptor(h.view(), h.view())
            .unwrap()
            .iter()
            .all(|&v| v == 0.0));
    }

    #[test]
    fn offsetting_anchors_last_row() {
        let w = array![[1.0], [2.0], [3.0]];
        let o = offset_last_step(w.view());
        assert_eq!(o, array![[-2.0], [-1.0], [0.0]]);
        assert_eq!(offset_last_step(o.view()), o);
        assert!(offset_last_step(array![[4.0, 1.0], [4.0, 1.0]].view())
            .iter()
            .all(|&v| v == 0.0));
    }

    fn series_chains(len: usize, l: usize, t: usize) -> Vec<Chain> {
        let values = Array2::from_shape_fn((len, 2), |(i, c)| {
            ((i as f64) * 0.37 + c as f64).sin() * 3.0 + 0.1 * i as f64
        });
        extract_chains(&Partition::new(0, values), l, t, 1).unwrap()
    }

    #[test]
    fn single_static_chain_gives_zero_ratio() {
        let h = array![[1.0, 2.0], [3.0, 4.0]];
        let chain = Chain {
            history: h.clone(),
            target: array![[0.0, 0.0]],
            continuation: h.clone(),
            start: 0,
        };
        let lib = build_library(&[chain], DEFAULT_EPSILON, Descriptor::Ratio).unwrap();
        assert_eq!(lib.len(), 1);
        let e = &lib.entries()[0];
        assert!(e.value.iter().all(|&v| v == 0.0));
        assert!(e.key.row(1).iter().all(|&v| v == 0.0));
    }

    #[test]
    fn one_entry_per_chain_and_deterministic() {
        let (l, t, n) = (6, 3, 9);
        let chains = series_chains(2 * l + t + n - 1, l, t);
        let a = build_library(&chains, DEFAULT_EPSILON, Descriptor::Ratio).unwrap();
        let b = build_library(&chains, DEFAULT_EPSILON, Descriptor::Ratio).unwrap();
        assert_eq!(a.len(), n);
        assert_eq!(a.fingerprint(), b.fingerprint());
        assert_eq!(a, b);
        let c = build_library(&chains, 2e-4, Descriptor::Ratio).unwrap();
        assert_ne!(a.fingerprint(), c.fingerprint());
    }

    #[test]
    fn empty_chain_list_is_an_error() {
        assert!(matches!(
            build_library(&[], DEFAULT_EPSILON, Descriptor::Ratio),
            Err(Error::EmptyLibrary)
        ));
    }

    #[test]
    fn file_round_trip_is_bit_exact() {
        let chains = series_chains(40, 5, 2);
        let lib = build_library(&chains, DEFAULT_EPSILON, Descriptor::Residual).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("lib.bin");
        lib.save(&path).unwrap();
        let back = RetrievalLibrary::load(&path).unwrap();
        assert_eq!(back, lib);
        for (a, b) in back.entries().iter().zip(lib.entries()) {
            assert!(a
                .value
                .iter()
                .zip(b.value.iter())
                .all(|(x, y)| x.to_bits() == y.to_bits()));
        }
    }

    #[test]
    fn f32_mode_is_lossy_but_close() {
        let chains = series_chains(30, 4, 2);
        let lib = build_library(&chains, DEFAULT_EPSILON, Descriptor::Ratio).unwrap();
        let mut bytes = Vec::new();
        lib.write_to(&mut bytes, Precision::F32).unwrap();
        let back = RetrievalLibrary::from_bytes(&bytes).unwrap();
        assert_eq!(back.fingerprint(), lib.fingerprint());
        for (a, b) in back.entries().iter().zip(lib.entries()) {
            for (x, y) in a.value.iter().zip(b.value.iter()) {
                assert_relative_eq!(*x, *y, max_relative = 1e-6, epsilon = 1e-6);
            }
        }
    }

    #[test]
    fn wrong_magic_and_version_are_rejected() {
        let lib = build_library(&series_chains(20, 3, 2), DEFAULT_EPSILON, Descriptor::Ratio).unwrap();
        let mut bytes = Vec::new();
        lib.write_to(&mut bytes, Precision::F64).unwrap();

        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(
            RetrievalLibrary::from_bytes(&bad),
            Err(Error::BadMagic { .. })
        ));

        let mut bad = bytes.clone();
        bad[8] = 99;
        assert!(matches!(
            RetrievalLibrary::from_bytes(&bad),
            Err(Error::UnsupportedVersion { found: 99, .. })
        ));
    }

    #[test]
    fn truncated_payload_is_rejected() {
        let lib = build_library(&series_chains(20, 3, 2), DEFAULT_EPSILON, Descriptor::Ratio).unwrap();
        let mut bytes = Vec::new();
        lib.write_to(&mut bytes, Precision::F64).unwrap();
        bytes.truncate(bytes.len() - 9);
        assert!(matches!(
            RetrievalLibrary::from_bytes(&bytes),
            Err(Error::Truncated { .. })
        ));
        assert!(matches!(
            RetrievalLibrary::from_bytes(&bytes[..20]),
            Err(Error::Truncated { .. })
        ));
    }

    proptest! {
        #[test]
        fn ratio_inverts_exactly(
            h in proptest::collection::vec(-50.0f64..50.0, 12),
            f in proptest::collection::vec(-50.0f64..50.0, 12),
        ) {
            let h = Array2::from_shape_vec((6, 2), h).unwrap();
            let f = Array2::from_shape_vec((6, 2), f).unwrap();
            let eps = DEFAULT_EPSILON;
            let r = ratio(h.view(), f.view(), eps).unwrap();
            prop_assert!(r.iter().all(|v| v.is_finite()));
            let back = invert_ratio(h.view(), r.view(), eps);
            for (a, b) in back.iter().zip(f.iter()) {
                let scale = b.abs().max(h.iter().fold(0.0f64, |m, v| m.max(v.abs()))).max(1.0);
                prop_assert!((a - b).abs() <= 1e-9 * scale, "{a} vs {b}");
            }
        }

        #[test]
        fn every_key_ends_at_zero(seed in 0u64..1000) {
            let len = 30 + (seed % 7) as usize;
            let values = Array2::from_shape_fn((len, 3), |(i, c)| ((i as u64 * 31 + c as u64 * 17 + seed) % 23) as f64 - 11.0);
            let chains = extract_chains(&Partition::new(0, values), 5, 2, 1).unwrap();
            let lib = build_library(&chains, DEFAULT_EPSILON, Descriptor::Ratio).unwrap();
            for e in lib.entries() {
                prop_assert!(e.key.row(4).iter().all(|&v| v == 0.0));
                prop_assert!(e.value.iter().all(|v| v.is_finite()));
            }
        }
    }
}
