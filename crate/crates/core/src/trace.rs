//! Captured hidden-state storage and the flattened amplitude-matrix view.
//!
//! A trace holds S snapshots, each covering T context tokens, L layers, and
//! C channels of the residual stream entering every block's first layer
//! norm. Flattening orders rows so the layer index varies fastest, then the
//! token index, then the snapshot index: row = (s*T + t)*L + l (0-based;
//! the documentation convention elsewhere is 1-based, i.e. +1).

use crate::error::{Error, Result};
use serde::{Deserialize, Serialize};
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

const TRACE_MAGIC: &[u8; 4] = b"TRC1";
const TRACE_VERSION: u32 = 1;
/// dtype code for little-endian IEEE f32 amplitude data.
const DTYPE_F32: u32 = 1;

/// Provenance carried with every trace.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize, Default)]
pub struct TraceMeta {
    pub checkpoint_hash: String,
    pub seed: u64,
    pub n_tokens: usize,
    pub snapshot_every: usize,
    pub seed_tokens: Vec<u32>,
    pub temperature_milli: u32,
}

/// Captured hidden states: amplitudes [S, T, L, C] with the context token
/// ids [S, T] of every snapshot.
#[derive(Debug, Clone, PartialEq)]
pub struct TraceStore {
    pub snapshots: usize,
    pub context_len: usize,
    pub n_layers: usize,
    pub n_channels: usize,
    pub amplitudes: Vec<f32>,
    pub token_ids: Vec<u32>,
    pub meta: TraceMeta,
}

impl TraceStore {
    pub fn new(
        context_len: usize,
        n_layers: usize,
        n_channels: usize,
        meta: TraceMeta,
    ) -> Self {
        TraceStore {
            snapshots: 0,
            context_len,
            n_layers,
            n_channels,
            amplitudes: Vec::new(),
            token_ids: Vec::new(),
            meta,
        }
    }

    /// Append one snapshot: `hidden` is [T, L, C] row-major, `context` the
    /// T token ids it was captured under.
    pub fn push_snapshot(&mut self, hidden: &[f32], context: &[u32]) -> Result<()> {
        let want = self.context_len * self.n_layers * self.n_channels;
        if hidden.len() != want {
            return Err(Error::DimensionMismatch {
                op: "push_snapshot",
                left: format!("{} amplitudes", hidden.len()),
                right: format!("{} expected", want),
            });
        }
        if context.len() != self.context_len {
            return Err(Error::contract(format!(
                "snapshot context has {} tokens, expected {}",
                context.len(),
                self.context_len
            )));
        }
        if hidden.iter().any(|v| !v.is_finite()) {
            return Err(Error::Degenerate("non-finite amplitude in snapshot".into()));
        }
        self.amplitudes.extend_from_slice(hidden);
        self.token_ids.extend_from_slice(context);
        self.snapshots += 1;
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        let want = self.snapshots * self.context_len * self.n_layers * self.n_channels;
        if self.amplitudes.len() != want {
            return Err(Error::Corrupt(format!(
                "amplitude count {} does not match geometry {}",
                self.amplitudes.len(),
                want
            )));
        }
        if self.token_ids.len() != self.snapshots * self.context_len {
            return Err(Error::Corrupt("token id count mismatch".into()));
        }
        Ok(())
    }

    pub fn amplitude(&self, s: usize, t: usize, l: usize, ch: usize) -> f32 {
        let (tt, ll, cc) = (self.context_len, self.n_layers, self.n_channels);
        self.amplitudes[((s * tt + t) * ll + l) * cc + ch]
    }

    /// Amplitude series for one channel within one snapshot, ordered
    /// (token, layer); with `layer` fixed, one value per token.
    pub fn channel_trace(
        &self,
        snapshot: usize,
        channel: usize,
        layer: Option<usize>,
    ) -> Result<Vec<f32>> {
        if channel >= self.n_channels {
            return Err(Error::IndexOutOfRange {
                what: "channel",
                value: channel,
                limit: self.n_channels,
            });
        }
        if snapshot >= self.snapshots {
            return Err(Error::IndexOutOfRange {
                what: "snapshot",
                value: snapshot,
                limit: self.snapshots,
            });
        }
        if let Some(l) = layer {
            if l >= self.n_layers {
                return Err(Error::IndexOutOfRange {
                    what: "layer",
                    value: l,
                    limit: self.n_layers,
                });
            }
        }
        let mut out = Vec::new();
        match layer {
            Some(l) => {
                for t in 0..self.context_len {
                    out.push(self.amplitude(snapshot, t, l, channel));
                }
            }
            None => {
                for t in 0..self.context_len {
                    for l in 0..self.n_layers {
                        out.push(self.amplitude(snapshot, t, l, channel));
                    }
                }
            }
        }
        Ok(out)
    }
}

/// The flattened N x C amplitude view; layer varies fastest along rows.
#[derive(Debug, Clone, PartialEq)]
pub struct AmplitudeMatrix {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f32>,
    /// Context token id per (snapshot, token) pair; the id behind row i is
    /// `token_ids[i / n_layers]`.
    pub token_ids: Vec<u32>,
    pub n_layers: usize,
    pub meta: TraceMeta,
}

impl AmplitudeMatrix {
    pub fn row(&self, i: usize) -> &[f32] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    /// The context token id that produced row `i`.
    pub fn row_token(&self, i: usize) -> u32 {
        self.token_ids[i / self.n_layers]
    }

    /// (snapshot, token, layer) coordinates of row `i`.
    pub fn row_coords(&self, i: usize, context_len: usize) -> (usize, usize, usize) {
        let l = i % self.n_layers;
        let st = i / self.n_layers;
        (st / context_len, st % context_len, l)
    }
}

/// Bijective reindexing of a store into its [S*T*L, C] matrix.
pub fn flatten(store: &TraceStore) -> AmplitudeMatrix {
    // The S x T x L x C row-major layout already orders (s, t, l) rows with
    // the layer index fastest, so flattening is a relabeling of the buffer.
    AmplitudeMatrix {
        rows: store.snapshots * store.context_len * store.n_layers,
        cols: store.n_channels,
        data: store.amplitudes.clone(),
        token_ids: store.token_ids.clone(),
        n_layers: store.n_layers,
        meta: store.meta.clone(),
    }
}

/// Inverse of [`flatten`] for round-trip checks.
pub fn unflatten(m: &AmplitudeMatrix, context_len: usize) -> Result<TraceStore> {
    if context_len == 0 || m.rows % (m.n_layers * context_len) != 0 {
        return Err(Error::contract("rows do not tile into snapshots"));
    }
    let store = TraceStore {
        snapshots: m.rows / (m.n_layers * context_len),
        context_len,
        n_layers: m.n_layers,
        n_channels: m.cols,
        amplitudes: m.data.clone(),
        token_ids: m.token_ids.clone(),
        meta: m.meta.clone(),
    };
    store.validate()?;
    Ok(store)
}

// --------------------------------------------------------------------------
// binary trace file: magic, version, geometry, meta JSON, payload blocks
// --------------------------------------------------------------------------

fn write_u32<W: Write>(w: &mut W, v: u32) -> std::io::Result<()> {
    w.write_all(&v.to_le_bytes())
}

fn write_u64<W: Write>(w: &mut W, v: u64) -> std::io::Result<()> {
    w.write_all(&v.to_le_bytes())
}

fn read_u32<R: Read>(r: &mut R) -> std::io::Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn read_u64<R: Read>(r: &mut R) -> std::io::Result<u64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)?;
    Ok(u64::from_le_bytes(b))
}

pub fn save_trace(store: &TraceStore, path: impl AsRef<Path>) -> Result<()> {
    store.validate()?;
    let path = path.as_ref();
    let as_io = |e: std::io::Error| Error::io(path.display().to_string(), e);
    let file = std::fs::File::create(path).map_err(as_io)?;
    let mut w = BufWriter::new(file);
    (|| -> std::io::Result<()> {
        w.write_all(TRACE_MAGIC)?;
        write_u32(&mut w, TRACE_VERSION)?;
        write_u64(&mut w, store.snapshots as u64)?;
        write_u64(&mut w, store.context_len as u64)?;
        write_u64(&mut w, store.n_layers as u64)?;
        write_u64(&mut w, store.n_channels as u64)?;
        write_u32(&mut w, DTYPE_F32)?;
        let meta = serde_json::to_vec(&store.meta).expect("meta serializes");
        write_u64(&mut w, meta.len() as u64)?;
        w.write_all(&meta)?;
        for &a in &store.amplitudes {
            w.write_all(&a.to_le_bytes())?;
        }
        for &id in &store.token_ids {
            write_u32(&mut w, id)?;
        }
        w.flush()
    })()
    .map_err(as_io)
}

pub fn load_trace(path: impl AsRef<Path>) -> Result<TraceStore> {
    let path = path.as_ref();
    let as_io = |e: std::io::Error| Error::io(path.display().to_string(), e);
    let file = std::fs::File::open(path).map_err(as_io)?;
    let mut r = BufReader::new(file);

    let mut magic = [0u8; 4];
    r.read_exact(&mut magic).map_err(as_io)?;
    if &magic != TRACE_MAGIC {
        return Err(Error::Format(format!(
            "bad trace magic {:?}, expected {:?}",
            magic, TRACE_MAGIC
        )));
    }
    let version = read_u32(&mut r).map_err(as_io)?;
    if version != TRACE_VERSION {
        return Err(Error::Format(format!(
            "trace version {} unsupported, this build reads {}",
            version, TRACE_VERSION
        )));
    }
    let snapshots = read_u64(&mut r).map_err(as_io)? as usize;
    let context_len = read_u64(&mut r).map_err(as_io)? as usize;
    let n_layers = read_u64(&mut r).map_err(as_io)? as usize;
    let n_channels = read_u64(&mut r).map_err(as_io)? as usize;
    let dtype = read_u32(&mut r).map_err(as_io)?;
    if dtype != DTYPE_F32 {
        return Err(Error::Format(format!("unknown dtype code {dtype}")));
    }
    let meta_len = read_u64(&mut r).map_err(as_io)? as usize;
    if meta_len > 1 << 24 {
        return Err(Error::Corrupt("unreasonable meta length".into()));
    }
    let mut meta_buf = vec![0u8; meta_len];
    r.read_exact(&mut meta_buf)
        .map_err(|_| Error::Corrupt("trace truncated in meta block".into()))?;
    let meta: TraceMeta = serde_json::from_slice(&meta_buf)
        .map_err(|e| Error::Format(format!("meta JSON: {e}")))?;

    let n_amp = snapshots * context_len * n_layers * n_channels;
    let mut amp_bytes = vec![0u8; n_amp * 4];
    r.read_exact(&mut amp_bytes)
        .map_err(|_| Error::Corrupt("trace truncated in amplitude block".into()))?;
    let amplitudes: Vec<f32> = amp_bytes
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
        .collect();

    let n_tok = snapshots * context_len;
    let mut tok_bytes = vec![0u8; n_tok * 4];
    r.read_exact(&mut tok_bytes)
        .map_err(|_| Error::Corrupt("trace truncated in token block".into()))?;
    let token_ids: Vec<u32> = tok_bytes
        .chunks_exact(4)
        .map(|b| u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
        .collect();

    let mut rest = [0u8; 1];
    if r.read(&mut rest).map_err(as_io)? != 0 {
        return Err(Error::Corrupt("trailing bytes after trace payload".into()));
    }

    let store = TraceStore {
        snapshots,
        context_len,
        n_layers,
        n_channels,
        amplitudes,
        token_ids,
        meta,
    };
    store.validate()?;
    Ok(store)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn synthetic_store(s: usize, t: usize, l: usize, c: usize) -> TraceStore {
        let mut store = TraceStore::new(t, l, c, TraceMeta::default());
        for si in 0..s {
            let hidden: Vec<f32> = (0..t * l * c)
                .map(|i| {
                    let (ti, rest) = (i / (l * c), i % (l * c));
                    let (li, ci) = (rest / c, rest % c);
                    // encode coordinates so row order is checkable
                    (si * 1000 + ti * 100 + li * 10 + ci) as f32
                })
                .collect();
            let ctx: Vec<u32> = (0..t).map(|x| (si * t + x) as u32).collect();
            store.push_snapshot(&hidden, &ctx).unwrap();
        }
        store
    }

    #[test]
    fn flatten_single_cell_is_identity() {
        let store = synthetic_store(1, 1, 1, 1);
        let m = flatten(&store);
        assert_eq!((m.rows, m.cols), (1, 1));
        assert_eq!(m.data, store.amplitudes);
    }

    #[test]
    fn flatten_row_order_matches_brute_force_enumeration() {
        let (s, t, l, c) = (2, 3, 2, 4);
        let store = synthetic_store(s, t, l, c);
        let m = flatten(&store);
        assert_eq!(m.rows, s * t * l);
        // brute-force index table: row (s*T + t)*L + l must hold (s,t,l,:)
        for si in 0..s {
            for ti in 0..t {
                for li in 0..l {
                    let row = (si * t + ti) * l + li;
                    for ci in 0..c {
                        assert_eq!(
                            m.row(row)[ci],
                            (si * 1000 + ti * 100 + li * 10 + ci) as f32,
                            "row {row} ch {ci}"
                        );
                    }
                    assert_eq!(m.row_coords(row, t), (si, ti, li));
                    assert_eq!(m.row_token(row), store.token_ids[si * t + ti]);
                }
            }
        }
    }

    #[test]
    fn unflatten_is_the_inverse() {
        let store = synthetic_store(3, 4, 2, 5);
        let m = flatten(&store);
        let back = unflatten(&m, store.context_len).unwrap();
        assert_eq!(back, store);
    }

    #[test]
    fn save_load_round_trip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.trc");
        let mut store = synthetic_store(2, 3, 2, 4);
        store.meta = TraceMeta {
            checkpoint_hash: "abc123".into(),
            seed: 1337,
            n_tokens: 24,
            snapshot_every: 3,
            seed_tokens: vec![0],
            temperature_milli: 1000,
        };
        save_trace(&store, &path).unwrap();
        let loaded = load_trace(&path).unwrap();
        assert_eq!(loaded, store);
    }

    #[test]
    fn empty_store_round_trips() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("empty.trc");
        let store = TraceStore::new(128, 8, 192, TraceMeta::default());
        save_trace(&store, &path).unwrap();
        let loaded = load_trace(&path).unwrap();
        assert_eq!(loaded.snapshots, 0);
        assert_eq!(loaded, store);
    }

    #[test]
    fn wrong_magic_is_a_format_error() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.trc");
        std::fs::write(&path, b"NOPE0000000000000000000000000000").unwrap();
        assert!(matches!(load_trace(&path), Err(Error::Format(_))));
    }

    #[test]
    fn truncated_file_is_a_corruption_error() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("trunc.trc");
        let store = synthetic_store(2, 3, 2, 4);
        save_trace(&store, &path).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        std::fs::write(&path, &bytes[..bytes.len() - 7]).unwrap();
        assert!(matches!(load_trace(&path), Err(Error::Corrupt(_))));
    }

    #[test]
    fn file_size_matches_payload_plus_header() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("size.trc");
        let store = synthetic_store(2, 3, 2, 4);
        save_trace(&store, &path).unwrap();
        let meta_len = serde_json::to_vec(&store.meta).unwrap().len();
        let expected = 4 + 4 + 4 * 8 + 4 + 8 + meta_len // header
            + store.amplitudes.len() * 4
            + store.token_ids.len() * 4;
        assert_eq!(std::fs::metadata(&path).unwrap().len(), expected as u64);
    }

    #[test]
    fn channel_trace_lengths_and_constant_store() {
        let (t, l, c) = (5, 3, 2);
        let mut store = TraceStore::new(t, l, c, TraceMeta::default());
        store
            .push_snapshot(&vec![2.5f32; t * l * c], &vec![0; t])
            .unwrap();
        let full = store.channel_trace(0, 1, None).unwrap();
        assert_eq!(full.len(), t * l);
        assert!(full.iter().all(|&v| v == 2.5));
        let one = store.channel_trace(0, 1, Some(2)).unwrap();
        assert_eq!(one.len(), t);
        assert!(store.channel_trace(0, 99, None).is_err());
        assert!(store.channel_trace(3, 0, None).is_err());
    }

    #[test]
    fn snapshot_rejects_non_finite_amplitudes() {
        let mut store = TraceStore::new(1, 1, 2, TraceMeta::default());
        assert!(store.push_snapshot(&[1.0, f32::NAN], &[0]).is_err());
    }
}
