//! Encoder activation capture and the on-disk activation corpus.
//!
//! File layout, all little endian:
//!
//! | offset          | bytes      | content                                          |
//! |-----------------|------------|--------------------------------------------------|
//! | 0               | 4          | magic `TACT`                                     |
//! | 4               | 4          | version (`u32`, 1)                               |
//! | 8               | 4          | `d_model` (`u32`)                                |
//! | 12              | 4          | nodes per instance (`u32`)                       |
//! | 16              | 8          | instance count (`u64`)                           |
//! | 24              | 8          | base seed (`u64`)                                |
//! | 32              | 4          | distribution code (`u32`)                        |
//! | 36              | 4          | reserved, zero                                   |
//! | 40              | 32         | SHA-256 of the policy checkpoint                 |
//! | 72              | 56         | zero padding                                     |
//! | 128             | `s` each   | records: `u32` instance, `u32` node, `d × f32`   |
//! | 128 + R·s       | 16         | trailer: `TEND`, `u64` record count, `u32` CRC-32 |
//!
//! with record stride `s = 8 + 4·d_model` and `R = instances × nodes`.
//! Record `(i, j)` sits at `128 + (i·nodes + j)·s`. The CRC covers all record
//! bytes. A writer that is dropped or fails before finishing writes `TBAD` in
//! place of `TEND`, so incomplete corpora are rejected on load.
//!
//! Instance `i` of a capture with base seed `b` is
//! `generate(distribution, n, SeedTree::new(b).child(i).seed())`, the same
//! instances [`generate_batch`] produces.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Seek, SeekFrom, Write};
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::container::file_sha256;
use crate::numerics::SeedTree;
use crate::policy::Policy;
use crate::tsp::{generate, Distribution, TspInstance};

pub const MAGIC: &[u8; 4] = b"TACT";
pub const VERSION: u32 = 1;
pub const HEADER_LEN: u64 = 128;
pub const TRAILER_LEN: u64 = 16;
const TRAILER_OK: &[u8; 4] = b"TEND";
const TRAILER_BAD: &[u8; 4] = b"TBAD";

#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct CaptureHeader {
    pub d_model: u32,
    pub nodes_per_instance: u32,
    pub instance_count: u64,
    pub seed: u64,
    pub distribution: Distribution,
    #[serde(serialize_with = "hex_bytes")]
    pub checkpoint_sha256: [u8; 32],
}

fn hex_bytes<S: serde::Serializer>(b: &[u8; 32], s: S) -> std::result::Result<S::Ok, S::Error> {
    s.serialize_str(&hex::encode(b))
}

impl CaptureHeader {
    pub fn record_count(&self) -> u64 {
        self.instance_count * u64::from(self.nodes_per_instance)
    }

    pub fn stride(&self) -> u64 {
        8 + 4 * u64::from(self.d_model)
    }

    /// Byte offset of record `index`.
    pub fn offset_of(&self, index: u64) -> u64 {
        HEADER_LEN + index * self.stride()
    }

    pub fn file_len(&self) -> u64 {
        self.offset_of(self.record_count()) + TRAILER_LEN
    }

    pub fn checkpoint_hex(&self) -> String {
        hex::encode(self.checkpoint_sha256)
    }

    /// The `i`-th captured instance.
    pub fn instance(&self, i: u64) -> Result<TspInstance> {
        capture_instance(self.distribution, self.nodes_per_instance as usize, self.seed, i)
    }

    fn to_bytes(&self) -> [u8; HEADER_LEN as usize] {
        let mut b = [0u8; HEADER_LEN as usize];
        b[0..4].copy_from_slice(MAGIC);
        b[4..8].copy_from_slice(&VERSION.to_le_bytes());
        b[8..12].copy_from_slice(&self.d_model.to_le_bytes());
        b[12..16].copy_from_slice(&self.nodes_per_instance.to_le_bytes());
        b[16..24].copy_from_slice(&self.instance_count.to_le_bytes());
        b[24..32].copy_from_slice(&self.seed.to_le_bytes());
        b[32..36].copy_from_slice(&self.distribution.code().to_le_bytes());
        b[40..72].copy_from_slice(&self.checkpoint_sha256);
        b
    }

    fn from_bytes(b: &[u8; HEADER_LEN as usize]) -> Result<Self> {
        if &b[0..4] != MAGIC {
            return Err(Error::Format("not an activation capture (bad magic)".into()));
        }
        let u32_at = |o: usize| u32::from_le_bytes(b[o..o + 4].try_into().expect("4 bytes"));
        let u64_at = |o: usize| u64::from_le_bytes(b[o..o + 8].try_into().expect("8 bytes"));
        let version = u32_at(4);
        if version != VERSION {
            return Err(Error::Format(format!("unsupported capture version {version}")));
        }
        let code = u32_at(32);
        let distribution =
            Distribution::from_code(code).ok_or_else(|| Error::Format(format!("unknown distribution code {code}")))?;
        let h = CaptureHeader {
            d_model: u32_at(8),
            nodes_per_instance: u32_at(12),
            instance_count: u64_at(16),
            seed: u64_at(24),
            distribution,
            checkpoint_sha256: b[40..72].try_into().expect("32 bytes"),
        };
        if h.d_model == 0 || h.nodes_per_instance == 0 {
            return Err(Error::Format("capture header has zero d_model or node count".into()));
        }
        Ok(h)
    }
}

/// Instance `index` of a capture run with base seed `seed`.
pub fn capture_instance(distribution: Distribution, n: usize, seed: u64, index: u64) -> Result<TspInstance> {
    generate(distribution, n, SeedTree::new(seed).child(index).seed())
}

/// Streaming writer. Instances must be written in order, exactly
/// `instance_count` of them, before [`CaptureWriter::finish`].
pub struct CaptureWriter {
    header: CaptureHeader,
    path: PathBuf,
    out: Option<BufWriter<File>>,
    written: u64,
    crc: crc32fast::Hasher,
}

impl CaptureWriter {
    pub fn create(path: &Path, header: CaptureHeader) -> Result<Self> {
        if let Some(dir) = path.parent() {
            std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        let file = File::create(path).map_err(|e| Error::io(path, e))?;
        let mut out = BufWriter::with_capacity(1 << 20, file);
        out.write_all(&header.to_bytes()).map_err(|e| Error::io(path, e))?;
        Ok(CaptureWriter { header, path: path.to_path_buf(), out: Some(out), written: 0, crc: crc32fast::Hasher::new() })
    }

    pub fn header(&self) -> &CaptureHeader {
        &self.header
    }

    /// Appends one instance: `nodes × d_model` values, row per node.
    pub fn write_instance(&mut self, vectors: &[f32]) -> Result<()> {
        let n = self.header.nodes_per_instance as usize;
        let d = self.header.d_model as usize;
        if vectors.len() != n * d {
            return Err(Error::Format(format!(
                "instance has {} values, capture expects {n} nodes × d_model {d}",
                vectors.len()
            )));
        }
        if self.written >= self.header.instance_count {
            return Err(Error::Contract(format!("capture already holds {} instances", self.written)));
        }
        if let Some(bad) = vectors.iter().position(|v| !v.is_finite()) {
            return Err(Error::Numerical(format!("non-finite activation at node {} of instance {}", bad / d, self.written)));
        }
        let mut rec = Vec::with_capacity(n * (8 + 4 * d));
        let instance = u32::try_from(self.written).map_err(|_| Error::Capacity("more than 2^32 instances".into()))?;
        for (j, row) in vectors.chunks_exact(d).enumerate() {
            rec.extend_from_slice(&instance.to_le_bytes());
            rec.extend_from_slice(&(j as u32).to_le_bytes());
            for v in row {
                rec.extend_from_slice(&v.to_le_bytes());
            }
        }
        self.crc.update(&rec);
        let out = self.out.as_mut().ok_or_else(|| Error::Contract("capture writer already closed".into()))?;
        if let Err(e) = out.write_all(&rec) {
            self.abandon();
            return Err(Error::io(&self.path, e));
        }
        self.written += 1;
        Ok(())
    }

    /// Writes the trailer and flushes.
    pub fn finish(mut self) -> Result<CaptureHeader> {
        if self.written != self.header.instance_count {
            self.abandon();
            return Err(Error::Contract(format!(
                "capture finished after {} of {} instances",
                self.written, self.header.instance_count
            )));
        }
        let mut out = self.out.take().expect("open until finish");
        let mut trailer = Vec::with_capacity(TRAILER_LEN as usize);
        trailer.extend_from_slice(TRAILER_OK);
        trailer.extend_from_slice(&self.header.record_count().to_le_bytes());
        trailer.extend_from_slice(&self.crc.clone().finalize().to_le_bytes());
        out.write_all(&trailer).and_then(|_| out.flush()).map_err(|e| Error::io(&self.path, e))?;
        Ok(self.header.clone())
    }

    /// Best-effort invalid marker after a failed or interrupted write.
    fn abandon(&mut self) {
        if let Some(mut out) = self.out.take() {
            let _ = out.write_all(TRAILER_BAD).and_then(|_| out.flush());
        }
    }
}

impl Drop for CaptureWriter {
    fn drop(&mut self) {
        self.abandon();
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ActivationRecord {
    pub instance: u32,
    pub node: u32,
    pub vector: Vec<f32>,
}

/// A validated capture file with random-access and sequential reads.
pub struct ActivationDataset {
    path: PathBuf,
    header: CaptureHeader,
    file: BufReader<File>,
}

impl ActivationDataset {
    /// Opens and fully validates `path`: header, length, trailer and CRC.
    pub fn open(path: &Path) -> Result<Self> {
        let file = File::open(path).map_err(|e| Error::io(path, e))?;
        let len = file.metadata().map_err(|e| Error::io(path, e))?.len();
        let mut file = BufReader::with_capacity(1 << 20, file);
        if len < HEADER_LEN {
            return Err(Error::Integrity { offset: len, message: "file ends inside the header".into() });
        }
        let mut hb = [0u8; HEADER_LEN as usize];
        file.read_exact(&mut hb).map_err(|e| Error::io(path, e))?;
        let header = CaptureHeader::from_bytes(&hb)?;
        let trailer_at = header.offset_of(header.record_count());
        if len < header.file_len() {
            // a `TBAD` marker directly after the last complete record
            let message = if len >= HEADER_LEN + 4 && Self::has_bad_marker(&mut file, len, path)? {
                "capture was not completed (invalid marker)".to_string()
            } else {
                format!("file truncated: {len} bytes, header implies {}", header.file_len())
            };
            return Err(Error::Integrity { offset: len.min(trailer_at), message });
        }
        if len > header.file_len() {
            return Err(Error::Integrity {
                offset: header.file_len(),
                message: format!("{} unexpected bytes after the trailer", len - header.file_len()),
            });
        }
        let mut crc = crc32fast::Hasher::new();
        let mut remaining = trailer_at - HEADER_LEN;
        let mut buf = vec![0u8; 1 << 20];
        while remaining > 0 {
            let take = remaining.min(buf.len() as u64) as usize;
            file.read_exact(&mut buf[..take]).map_err(|e| Error::io(path, e))?;
            crc.update(&buf[..take]);
            remaining -= take as u64;
        }
        let mut tb = [0u8; TRAILER_LEN as usize];
        file.read_exact(&mut tb).map_err(|e| Error::io(path, e))?;
        if &tb[0..4] == TRAILER_BAD {
            return Err(Error::Integrity { offset: trailer_at, message: "capture was not completed (invalid marker)".into() });
        }
        if &tb[0..4] != TRAILER_OK {
            return Err(Error::Integrity { offset: trailer_at, message: "missing trailer marker".into() });
        }
        let count = u64::from_le_bytes(tb[4..12].try_into().expect("8 bytes"));
        if count != header.record_count() {
            return Err(Error::Integrity {
                offset: trailer_at + 4,
                message: format!("trailer counts {count} records, header implies {}", header.record_count()),
            });
        }
        let stored = u32::from_le_bytes(tb[12..16].try_into().expect("4 bytes"));
        let actual = crc.finalize();
        if stored != actual {
            return Err(Error::Integrity {
                offset: trailer_at + 12,
                message: format!("record checksum {actual:08x} does not match trailer {stored:08x}"),
            });
        }
        Ok(ActivationDataset { path: path.to_path_buf(), header, file })
    }

    fn has_bad_marker(file: &mut BufReader<File>, len: u64, path: &Path) -> Result<bool> {
        let mut tag = [0u8; 4];
        file.seek(SeekFrom::Start(len - 4)).map_err(|e| Error::io(path, e))?;
        file.read_exact(&mut tag).map_err(|e| Error::io(path, e))?;
        Ok(&tag == TRAILER_BAD)
    }

    pub fn header(&self) -> &CaptureHeader {
        &self.header
    }

    pub fn path(&self) -> &Path {
        &self.path
    }

    pub fn len(&self) -> u64 {
        self.header.record_count()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn d_model(&self) -> usize {
        self.header.d_model as usize
    }

    /// Rejects a dataset whose vectors are not `d` wide.
    pub fn expect_d_model(&self, d: usize) -> Result<()> {
        if self.d_model() != d {
            return Err(Error::Format(format!("capture has d_model {}, expected {d}", self.d_model())));
        }
        Ok(())
    }

    /// Confirms the capture came from the checkpoint at `path`.
    pub fn verify_checkpoint(&self, path: &Path) -> Result<()> {
        let hash = file_sha256(path)?;
        if hash != self.header.checkpoint_hex() {
            return Err(Error::Format(format!(
                "capture was taken from checkpoint {}, {} hashes to {hash}",
                self.header.checkpoint_hex(),
                path.display()
            )));
        }
        Ok(())
    }

    fn read_records(&mut self, start: u64, count: usize) -> Result<Vec<ActivationRecord>> {
        let d = self.d_model();
        let stride = self.header.stride() as usize;
        let mut buf = vec![0u8; stride * count];
        self.file.seek(SeekFrom::Start(self.header.offset_of(start))).map_err(|e| Error::io(&self.path, e))?;
        self.file.read_exact(&mut buf).map_err(|e| Error::io(&self.path, e))?;
        Ok(buf
            .chunks_exact(stride)
            .map(|r| ActivationRecord {
                instance: u32::from_le_bytes(r[0..4].try_into().expect("4 bytes")),
                node: u32::from_le_bytes(r[4..8].try_into().expect("4 bytes")),
                vector: (0..d)
                    .map(|k| f32::from_le_bytes(r[8 + 4 * k..12 + 4 * k].try_into().expect("4 bytes")))
                    .collect(),
            })
            .collect())
    }

    /// Record by flat index.
    pub fn record(&mut self, index: u64) -> Result<ActivationRecord> {
        if index >= self.len() {
            return Err(Error::Parameter(format!("record {index} out of {}", self.len())));
        }
        Ok(self.read_records(index, 1)?.remove(0))
    }

    /// Node `node` of instance `instance`.
    pub fn record_at(&mut self, instance: u64, node: u32) -> Result<ActivationRecord> {
        if instance >= self.header.instance_count || node >= self.header.nodes_per_instance {
            return Err(Error::Parameter(format!("record ({instance}, {node}) outside the capture")));
        }
        self.record(instance * u64::from(self.header.nodes_per_instance) + u64::from(node))
    }

    /// Sequential batches of `batch_size` records; the last may be shorter.
    pub fn batches(&mut self, batch_size: usize) -> Batches<'_> {
        Batches { data: self, next: 0, batch_size: batch_size.max(1) }
    }

    /// All vectors, row-major `len × d_model`.
    pub fn read_all(&mut self) -> Result<Vec<f32>> {
        let mut out = Vec::with_capacity(self.len() as usize * self.d_model());
        for batch in self.batches(65_536) {
            for r in batch? {
                out.extend_from_slice(&r.vector);
            }
        }
        Ok(out)
    }
}

pub struct Batches<'a> {
    data: &'a mut ActivationDataset,
    next: u64,
    batch_size: usize,
}

impl Iterator for Batches<'_> {
    type Item = Result<Vec<ActivationRecord>>;

    fn next(&mut self) -> Option<Self::Item> {
        let total = self.data.len();
        if self.next >= total {
            return None;
        }
        let count = (total - self.next).min(self.batch_size as u64) as usize;
        let start = self.next;
        self.next += count as u64;
        Some(self.data.read_records(start, count))
    }
}

/// What to capture.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CaptureSpec {
    pub distribution: Distribution,
    pub num_instances: u64,
    pub n: usize,
    pub seed: u64,
}

impl Default for CaptureSpec {
    fn default() -> Self {
        CaptureSpec { distribution: Distribution::Uniform, num_instances: 5000, n: 20, seed: 1 }
    }
}

/// Encodes `spec.num_instances` fresh instances and streams every node's
/// final residual vector to `path`.
pub fn capture(policy: &Policy, checkpoint_sha256: [u8; 32], spec: &CaptureSpec, path: &Path) -> Result<CaptureHeader> {
    if spec.num_instances == 0 {
        return Err(Error::Parameter("capture needs at least one instance".into()));
    }
    let header = CaptureHeader {
        d_model: policy.config().d_model as u32,
        nodes_per_instance: u32::try_from(spec.n).map_err(|_| Error::Capacity("n exceeds u32".into()))?,
        instance_count: spec.num_instances,
        seed: spec.seed,
        distribution: spec.distribution,
        checkpoint_sha256,
    };
    let mut writer = CaptureWriter::create(path, header)?;
    let chunk = (rayon::current_num_threads() * 8) as u64;
    let mut start = 0;
    while start < spec.num_instances {
        let end = (start + chunk).min(spec.num_instances);
        let encoded: Vec<Vec<f32>> = (start..end)
            .into_par_iter()
            .map(|i| {
                let inst = capture_instance(spec.distribution, spec.n, spec.seed, i)?;
                let emb = policy.encode(&inst)?;
                Ok(emb.nodes.data().iter().map(|&v| v as f32).collect())
            })
            .collect::<Result<_>>()?;
        for v in &encoded {
            writer.write_instance(v)?;
        }
        start = end;
    }
    writer.finish()
}

/// [`capture`] from a checkpoint file, recording its hash in the header.
pub fn capture_checkpoint(checkpoint: &Path, spec: &CaptureSpec, path: &Path) -> Result<CaptureHeader> {
    let policy = crate::training::load_policy(checkpoint)?;
    let hash = hash_bytes(&file_sha256(checkpoint)?)?;
    capture(&policy, hash, spec, path)
}

pub(crate) fn hash_bytes(hex_digest: &str) -> Result<[u8; 32]> {
    hex::decode(hex_digest)
        .ok()
        .and_then(|b| b.try_into().ok())
        .ok_or_else(|| Error::Format(format!("`{hex_digest}` is not a SHA-256 digest")))
}
