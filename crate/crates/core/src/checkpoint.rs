//! Binary checkpoints.
//!
//! One checkpoint captures a run after some task: run metadata, the network,
//! the accuracy matrix so far, and the per-task parameter counts. The format
//! is little-endian and bit-exact on round-trip (`f64`s are stored as raw
//! bits):
//!
//! ```text
//! magic            8 bytes  "ITLCKPT\x01"
//! meta             u64 length + that many bytes of UTF-8 JSON (RunMeta)
//! input_dim        u64
//! layer count      u64
//! per layer:
//!   in_dim, out_dim, task count T   3 x u64
//!   per factor pair (T of them):
//!     origin_task u64, rank u64, frozen u8,
//!     U entries (out_dim x rank f64, row-major), V entries (in_dim x rank)
//!   selectors: for t in 1..=T, for i in 1..=t: length u64 + entries f64
//!   biases: T x (out_dim f64)
//! head count       u64
//! per head: classes u64, hidden u64, weight (classes x hidden), bias (classes)
//! matrix rows      u64, then row t has t f64 entries
//! param counts     u64 count + u64 entries
//! ```
//!
//! Wall-clock times are deliberately not stored: two runs of the same config
//! must produce byte-identical checkpoints.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{ItlError, Result};
use crate::layer::{FactorPair, FactorizedLayer, SelectorVector};
use crate::linalg::Matrix;
use crate::metrics::AccuracyMatrix;
use crate::network::{Head, MultiHeadNet};

const MAGIC: &[u8; 8] = b"ITLCKPT\x01";

/// Everything needed to validate a checkpoint against a config and resume
/// or evaluate from it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunMeta {
    pub version: u32,
    pub mode: String,
    pub stream_kind: String,
    pub stream_seed: u64,
    pub stream_tasks: usize,
    pub classes_per_task: Option<usize>,
    pub global_seed: u64,
    pub rank_first: usize,
    pub rank_increment: usize,
    pub input_dim: usize,
    pub hidden_dims: Vec<usize>,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub tasks_done: usize,
}

impl RunMeta {
    /// True when two metas describe the same run (ignoring progress).
    pub fn same_run(&self, other: &RunMeta) -> bool {
        let mut a = self.clone();
        let mut b = other.clone();
        a.tasks_done = 0;
        b.tasks_done = 0;
        a == b
    }
}

/// A saved run state.
#[derive(Debug, Clone, PartialEq)]
pub struct SavedRun {
    pub meta: RunMeta,
    pub net: MultiHeadNet,
    pub matrix: AccuracyMatrix,
    pub params_after_task: Vec<u64>,
}

struct Writer {
    buf: Vec<u8>,
}

impl Writer {
    fn new() -> Self {
        Writer {
            buf: Vec::with_capacity(1 << 20),
        }
    }

    fn u8(&mut self, v: u8) {
        self.buf.push(v);
    }

    fn u64(&mut self, v: u64) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }

    fn f64_slice(&mut self, vs: &[f64]) {
        for v in vs {
            self.buf.extend_from_slice(&v.to_le_bytes());
        }
    }

    fn bytes(&mut self, bs: &[u8]) {
        self.buf.extend_from_slice(bs);
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn new(buf: &'a [u8]) -> Self {
        Reader { buf, pos: 0 }
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len());
        match end {
            Some(end) => {
                let s = &self.buf[self.pos..end];
                self.pos = end;
                Ok(s)
            }
            None => Err(ItlError::Checkpoint(format!(
                "truncated: wanted {n} bytes at offset {}",
                self.pos
            ))),
        }
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn usize(&mut self) -> Result<usize> {
        let v = self.u64()?;
        usize::try_from(v).map_err(|_| ItlError::Checkpoint(format!("count {v} overflows usize")))
    }

    fn f64_vec(&mut self, n: usize) -> Result<Vec<f64>> {
        let bytes = self.take(n * 8)?;
        Ok(bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect())
    }

    fn done(&self) -> bool {
        self.pos == self.buf.len()
    }
}

/// Serialize a run state to bytes.
pub fn to_bytes(run: &SavedRun) -> Result<Vec<u8>> {
    let mut w = Writer::new();
    w.bytes(MAGIC);
    let meta = serde_json::to_string(&run.meta)?;
    w.u64(meta.len() as u64);
    w.bytes(meta.as_bytes());

    let net = &run.net;
    w.u64(net.input_dim() as u64);
    w.u64(net.hidden_layers().len() as u64);
    for layer in net.hidden_layers() {
        let t = layer.num_tasks();
        w.u64(layer.in_dim() as u64);
        w.u64(layer.out_dim() as u64);
        w.u64(t as u64);
        for pair in layer.factors() {
            w.u64(pair.origin_task() as u64);
            w.u64(pair.rank() as u64);
            w.u8(pair.frozen() as u8);
            w.f64_slice(pair.u().data());
            w.f64_slice(pair.v().data());
        }
        for owner in 1..=t {
            for sel in layer.selectors_of(owner).expect("owner in range") {
                w.u64(sel.weights.len() as u64);
                w.f64_slice(&sel.weights);
            }
        }
        for task in 1..=t {
            w.f64_slice(layer.bias(task).expect("task in range"));
        }
    }
    w.u64(net.heads().len() as u64);
    for head in net.heads() {
        w.u64(head.num_classes() as u64);
        w.u64(head.weight().cols() as u64);
        w.f64_slice(head.weight().data());
        w.f64_slice(head.bias());
    }

    w.u64(run.matrix.num_stages() as u64);
    for row in run.matrix.rows() {
        w.f64_slice(row);
    }
    w.u64(run.params_after_task.len() as u64);
    for &p in &run.params_after_task {
        w.u64(p);
    }
    Ok(w.buf)
}

/// Parse a run state from bytes.
pub fn from_bytes(buf: &[u8]) -> Result<SavedRun> {
    let mut r = Reader::new(buf);
    if r.take(8)? != MAGIC {
        return Err(ItlError::Checkpoint("bad magic".into()));
    }
    let meta_len = r.usize()?;
    let meta_bytes = r.take(meta_len)?;
    let meta: RunMeta = serde_json::from_slice(meta_bytes)?;
    if meta.version != 1 {
        return Err(ItlError::Checkpoint(format!(
            "unsupported version {}",
            meta.version
        )));
    }

    let input_dim = r.usize()?;
    let n_layers = r.usize()?;
    let mut layers = Vec::with_capacity(n_layers);
    for _ in 0..n_layers {
        let in_dim = r.usize()?;
        let out_dim = r.usize()?;
        let t = r.usize()?;
        let mut factors = Vec::with_capacity(t);
        for _ in 0..t {
            let origin = r.usize()?;
            let rank = r.usize()?;
            let frozen = r.u8()? != 0;
            let u = Matrix::from_vec(out_dim, rank, r.f64_vec(out_dim * rank)?)?;
            let v = Matrix::from_vec(in_dim, rank, r.f64_vec(in_dim * rank)?)?;
            factors.push(FactorPair::from_parts(u, v, rank, frozen, origin)?);
        }
        let mut selectors = Vec::with_capacity(t);
        for owner in 1..=t {
            let mut row = Vec::with_capacity(owner);
            for source in 1..=owner {
                let len = r.usize()?;
                row.push(SelectorVector {
                    owner_task: owner,
                    source_task: source,
                    weights: r.f64_vec(len)?,
                });
            }
            selectors.push(row);
        }
        let mut biases = Vec::with_capacity(t);
        for _ in 0..t {
            biases.push(r.f64_vec(out_dim)?);
        }
        layers.push(FactorizedLayer::from_parts(
            in_dim, out_dim, factors, selectors, biases,
        )?);
    }

    let n_heads = r.usize()?;
    let mut heads = Vec::with_capacity(n_heads);
    for _ in 0..n_heads {
        let classes = r.usize()?;
        let hidden = r.usize()?;
        let weight = Matrix::from_vec(classes, hidden, r.f64_vec(classes * hidden)?)?;
        let bias = r.f64_vec(classes)?;
        heads.push(Head::from_parts(weight, bias)?);
    }
    let net = MultiHeadNet::from_parts(input_dim, layers, heads)?;

    let n_rows = r.usize()?;
    let mut rows = Vec::with_capacity(n_rows);
    for t in 1..=n_rows {
        rows.push(r.f64_vec(t)?);
    }
    let matrix = AccuracyMatrix::from_rows(rows)?;

    let n_params = r.usize()?;
    let mut params_after_task = Vec::with_capacity(n_params);
    for _ in 0..n_params {
        params_after_task.push(r.u64()?);
    }
    if !r.done() {
        return Err(ItlError::Checkpoint("trailing bytes".into()));
    }
    if meta.tasks_done != matrix.num_stages() {
        return Err(ItlError::Checkpoint(format!(
            "meta says {} tasks done but matrix has {} rows",
            meta.tasks_done,
            matrix.num_stages()
        )));
    }

    Ok(SavedRun {
        meta,
        net,
        matrix,
        params_after_task,
    })
}

pub fn save(path: &Path, run: &SavedRun) -> Result<()> {
    let bytes = to_bytes(run)?;
    std::fs::write(path, bytes).map_err(|e| ItlError::io(path.display().to_string(), e))
}

pub fn load(path: &Path) -> Result<SavedRun> {
    let bytes = std::fs::read(path).map_err(|e| ItlError::io(path.display().to_string(), e))?;
    from_bytes(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample_meta(tasks_done: usize) -> RunMeta {
        RunMeta {
            version: 1,
            mode: "incremental".into(),
            stream_kind: "permuted".into(),
            stream_seed: 7,
            stream_tasks: 3,
            classes_per_task: None,
            global_seed: 42,
            rank_first: 2,
            rank_increment: 1,
            input_dim: 6,
            hidden_dims: vec![5, 4],
            epochs: 2,
            batch_size: 8,
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            tasks_done,
        }
    }

    fn sample_run() -> SavedRun {
        let mut net = MultiHeadNet::build_mlp(6, &[5, 4], 2, 42).unwrap();
        net.add_task(3, 1, 42).unwrap();
        net.add_task(3, 1, 42).unwrap();
        let matrix =
            AccuracyMatrix::from_rows(vec![vec![0.75], vec![0.75, 0.5]]).unwrap();
        SavedRun {
            meta: sample_meta(2),
            net,
            matrix,
            params_after_task: vec![100, 150],
        }
    }

    #[test]
    fn roundtrip_is_bit_exact() {
        let run = sample_run();
        let bytes = to_bytes(&run).unwrap();
        let loaded = from_bytes(&bytes).unwrap();
        assert_eq!(loaded, run);
        // And the re-serialization is byte-identical.
        assert_eq!(to_bytes(&loaded).unwrap(), bytes);
    }

    #[test]
    fn file_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ckpt.bin");
        let run = sample_run();
        save(&path, &run).unwrap();
        assert_eq!(load(&path).unwrap(), run);
    }

    #[test]
    fn rejects_corruption() {
        let run = sample_run();
        let bytes = to_bytes(&run).unwrap();
        assert!(from_bytes(&bytes[..bytes.len() - 1]).is_err(), "truncated");
        let mut bad_magic = bytes.clone();
        bad_magic[0] ^= 0xFF;
        assert!(from_bytes(&bad_magic).is_err(), "magic");
        let mut trailing = bytes;
        trailing.push(0);
        assert!(from_bytes(&trailing).is_err(), "trailing");
    }

    #[test]
    fn same_run_ignores_progress() {
        let a = sample_meta(1);
        let b = sample_meta(3);
        assert!(a.same_run(&b));
        let mut c = sample_meta(1);
        c.global_seed = 43;
        assert!(!a.same_run(&c));
    }
}
