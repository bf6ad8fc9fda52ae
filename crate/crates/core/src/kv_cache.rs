//! Segmented KV cache: sink ‖ compressed prefix ‖ window chunk ‖ partial tail.
//!
//! Keys are stored already rotated at their original absolute positions, so
//! evicting a token never requires re-rotating the survivors. The only
//! mutation that removes tokens is [`LayerKvCache::compress_ready`].

use serde::Serialize;

use crate::error::{Error, Result};
use crate::lagkv::{score_heads, select_topk, LagkvParams, RetentionSet};
use crate::real::Real;
use crate::tensor::Tensor;

const SNAPSHOT_MAGIC: &[u8; 4] = b"LRKV";
const SNAPSHOT_VERSION: u32 = 1;

#[derive(Clone, Debug, Default, PartialEq)]
struct Segment<T> {
    keys: Vec<T>,
    values: Vec<T>,
    positions: Vec<usize>,
}

impl<T: Real> Segment<T> {
    fn len(&self) -> usize {
        self.positions.len()
    }

    fn push(&mut self, k: &[T], v: &[T], pos: usize) {
        self.keys.extend_from_slice(k);
        self.values.extend_from_slice(v);
        self.positions.push(pos);
    }

    fn append(&mut self, other: Segment<T>) {
        self.keys.extend(other.keys);
        self.values.extend(other.values);
        self.positions.extend(other.positions);
    }

    /// Removes and returns the first `n` rows.
    fn split_front(&mut self, n: usize, d: usize) -> Segment<T> {
        let rest = Segment {
            keys: self.keys.split_off(n * d),
            values: self.values.split_off(n * d),
            positions: self.positions.split_off(n),
        };
        std::mem::replace(self, rest)
    }

    fn front(&self, n: usize, d: usize) -> Segment<T> {
        Segment {
            keys: self.keys[..n * d].to_vec(),
            values: self.values[..n * d].to_vec(),
            positions: self.positions[..n].to_vec(),
        }
    }

    fn rows(&self, start: usize, n: usize, d: usize) -> Segment<T> {
        Segment {
            keys: self.keys[start * d..(start + n) * d].to_vec(),
            values: self.values[start * d..(start + n) * d].to_vec(),
            positions: self.positions[start..start + n].to_vec(),
        }
    }

    fn gather(&self, idx: &[usize], d: usize) -> Segment<T> {
        let mut out = Segment::default();
        for &i in idx {
            out.push(&self.keys[i * d..(i + 1) * d], &self.values[i * d..(i + 1) * d], self.positions[i]);
        }
        out
    }

    fn tensors(&self, d: usize) -> Result<(Tensor<T>, Tensor<T>)> {
        Ok((
            Tensor::new(vec![self.len(), d], self.keys.clone())?,
            Tensor::new(vec![self.len(), d], self.values.clone())?,
        ))
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
struct HeadCache<T> {
    sink: Segment<T>,
    prefix: Segment<T>,
    window: Segment<T>,
    tail: Segment<T>,
}

impl<T: Real> HeadCache<T> {
    fn token_count(&self) -> usize {
        self.sink.len() + self.prefix.len() + self.window.len() + self.tail.len()
    }

    fn segments(&self) -> [&Segment<T>; 4] {
        [&self.sink, &self.prefix, &self.window, &self.tail]
    }
}

/// Cached keys, values and original positions of one KV head.
#[derive(Clone, Debug, PartialEq)]
pub struct HeadView<T> {
    pub keys: Tensor<T>,
    pub values: Tensor<T>,
    pub positions: Vec<usize>,
}

/// Segment lengths of one head.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
pub struct SegmentLengths {
    pub sink: usize,
    pub prefix: usize,
    pub window: usize,
    pub tail: usize,
}

/// Cache of one transformer layer.
#[derive(Clone, Debug, PartialEq)]
pub struct LayerKvCache<T> {
    params: LagkvParams,
    head_dim: usize,
    heads: Vec<HeadCache<T>>,
    tokens_seen: usize,
    retention_log: Vec<RetentionSet>,
}

impl<T: Real> LayerKvCache<T> {
    pub fn new(kv_heads: usize, head_dim: usize, params: LagkvParams) -> Self {
        Self {
            params,
            head_dim,
            heads: vec![HeadCache::default(); kv_heads],
            tokens_seen: 0,
            retention_log: Vec::new(),
        }
    }

    pub fn params(&self) -> &LagkvParams {
        &self.params
    }

    pub fn kv_heads(&self) -> usize {
        self.heads.len()
    }

    pub fn head_dim(&self) -> usize {
        self.head_dim
    }

    pub fn tokens_seen(&self) -> usize {
        self.tokens_seen
    }

    /// Cached tokens per head (identical across heads).
    pub fn token_count(&self) -> usize {
        self.heads.first().map_or(0, HeadCache::token_count)
    }

    pub fn segment_lengths(&self) -> SegmentLengths {
        let h = &self.heads[0];
        SegmentLengths {
            sink: h.sink.len(),
            prefix: h.prefix.len(),
            window: h.window.len(),
            tail: h.tail.len(),
        }
    }

    /// Retention sets of every chunk compressed so far, in chunk order.
    pub fn retention_log(&self) -> &[RetentionSet] {
        &self.retention_log
    }

    pub fn chunks_compressed(&self) -> usize {
        self.retention_log.len()
    }

    /// Appends `m` new tokens; `keys[h]` and `values[h]` are `m × d_h`.
    pub fn append_tokens(&mut self, keys: &[Tensor<T>], values: &[Tensor<T>], positions: &[usize]) -> Result<()> {
        if keys.len() != self.heads.len() || values.len() != self.heads.len() {
            return Err(Error::Dimension {
                op: "append_tokens",
                left: vec![self.heads.len()],
                right: vec![keys.len(), values.len()],
            });
        }
        for (i, &p) in positions.iter().enumerate() {
            let expected = self.tokens_seen + i;
            if p != expected {
                return Err(Error::Position { expected, got: p });
            }
        }
        let d = self.head_dim;
        for (h, (k, v)) in keys.iter().zip(values).enumerate() {
            if k.shape() != [positions.len(), d] || v.shape() != [positions.len(), d] {
                return Err(Error::Dimension {
                    op: "append_tokens",
                    left: vec![positions.len(), d],
                    right: k.shape().to_vec(),
                });
            }
            let head = &mut self.heads[h];
            for (i, &p) in positions.iter().enumerate() {
                let seg = if p < self.params.sink_size {
                    &mut head.sink
                } else {
                    &mut head.tail
                };
                seg.push(k.row(i), v.row(i), p);
            }
            if head.window.len() == 0 && head.tail.len() >= self.params.lag_size {
                head.window = head.tail.split_front(self.params.lag_size, d);
            }
        }
        self.tokens_seen += positions.len();
        Ok(())
    }

    fn score(&self, chunk_index: usize, chunk: impl Fn(&HeadCache<T>) -> (Segment<T>, Segment<T>)) -> Result<RetentionSet> {
        let d = self.head_dim;
        let inputs = self
            .heads
            .iter()
            .map(|h| {
                let (cur, next) = chunk(h);
                let (k, v) = cur.tensors(d)?;
                let (kn, vn) = next.tensors(d)?;
                Ok((k, v, kn, vn))
            })
            .collect::<Result<Vec<_>>>()?;
        let scores = score_heads(chunk_index, &inputs, &self.params)?;
        select_topk(&scores, self.params.retain_count())
    }

    /// Retention sets for chunks that are still uncompressed but already have
    /// a complete successor (the window chunk and full tail chunks except the
    /// last). These are exactly the sets `compress_ready` will apply.
    pub fn pending_retentions(&self) -> Result<Vec<RetentionSet>> {
        let l = self.params.lag_size;
        let d = self.head_dim;
        let Some(h0) = self.heads.first() else {
            return Ok(Vec::new());
        };
        if h0.window.len() != l {
            return Ok(Vec::new());
        }
        let first = self.params.chunk_of(h0.window.positions[0]);
        let full_tail_chunks = h0.tail.len() / l;
        let mut out = Vec::with_capacity(full_tail_chunks);
        for j in 0..full_tail_chunks {
            let set = self.score(first + j, |h| {
                let cur = if j == 0 { h.window.clone() } else { h.tail.rows((j - 1) * l, l, d) };
                (cur, h.tail.rows(j * l, l, d))
            })?;
            out.push(set);
        }
        Ok(out)
    }

    /// Compresses every window chunk that has a complete successor chunk in
    /// the tail. Returns the number of chunks compressed.
    pub fn compress_ready(&mut self) -> Result<usize> {
        let l = self.params.lag_size;
        let d = self.head_dim;
        let mut count = 0;
        while self.heads.first().is_some_and(|h| h.window.len() == l && h.tail.len() >= l) {
            let chunk_index = self.params.chunk_of(self.heads[0].window.positions[0]);
            let set = self.score(chunk_index, |h| (h.window.clone(), h.tail.front(l, d)))?;
            for (h, keep) in self.heads.iter_mut().zip(&set.per_head) {
                let kept = h.window.gather(keep, d);
                h.prefix.append(kept);
                h.window = h.tail.split_front(l, d);
            }
            log::debug!("compressed chunk {chunk_index}: kept {:?}", set.per_head);
            self.retention_log.push(set);
            count += 1;
        }
        Ok(count)
    }

    /// Contiguous sink ‖ prefix ‖ window ‖ tail view of one head.
    pub fn head_view(&self, head: usize) -> Result<HeadView<T>> {
        let h = self
            .heads
            .get(head)
            .ok_or_else(|| Error::Index(format!("kv head {head} of {}", self.heads.len())))?;
        let d = self.head_dim;
        let n = h.token_count();
        let mut keys = Vec::with_capacity(n * d);
        let mut values = Vec::with_capacity(n * d);
        let mut positions = Vec::with_capacity(n);
        for s in h.segments() {
            keys.extend_from_slice(&s.keys);
            values.extend_from_slice(&s.values);
            positions.extend_from_slice(&s.positions);
        }
        Ok(HeadView {
            keys: Tensor::new(vec![n, d], keys)?,
            values: Tensor::new(vec![n, d], values)?,
            positions,
        })
    }

    /// Original positions cached for `head`, ascending.
    pub fn retained_positions(&self, head: usize) -> Vec<usize> {
        self.heads[head]
            .segments()
            .iter()
            .flat_map(|s| s.positions.iter().copied())
            .collect()
    }
}

/// Cache size after ingesting `n ≥ S` tokens with compression run to fixpoint:
/// `S + max(c−1, 0)·k + min(c, 1)·L + t`, `c = ⌊(n−S)/L⌋`, `t = (n−S) mod L`.
pub fn expected_token_count(params: &LagkvParams, n: usize) -> usize {
    if n <= params.sink_size {
        return n;
    }
    let m = n - params.sink_size;
    let c = m / params.lag_size;
    let t = m % params.lag_size;
    params.sink_size + c.saturating_sub(1) * params.retain_count() + c.min(1) * params.lag_size + t
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct CacheReport {
    pub tokens_seen: usize,
    /// Cached tokens, one entry per (layer, KV head).
    pub tokens_cached: Vec<usize>,
    /// `tokens_seen / tokens_cached`; 1.0 for an empty cache.
    pub compression_ratio: f64,
}

/// Per-layer segmented caches of one model instance.
#[derive(Clone, Debug, PartialEq)]
pub struct SegmentedKvCache<T> {
    layers: Vec<LayerKvCache<T>>,
}

impl<T: Real> SegmentedKvCache<T> {
    pub fn new(layers: usize, kv_heads: usize, head_dim: usize, params: LagkvParams) -> Self {
        Self {
            layers: (0..layers).map(|_| LayerKvCache::new(kv_heads, head_dim, params)).collect(),
        }
    }

    pub fn layers(&self) -> &[LayerKvCache<T>] {
        &self.layers
    }

    pub fn layer(&self, i: usize) -> &LayerKvCache<T> {
        &self.layers[i]
    }

    pub fn layer_mut(&mut self, i: usize) -> &mut LayerKvCache<T> {
        &mut self.layers[i]
    }

    pub fn tokens_seen(&self) -> usize {
        self.layers.first().map_or(0, LayerKvCache::tokens_seen)
    }

    pub fn report(&self) -> CacheReport {
        let tokens_cached: Vec<usize> = self
            .layers
            .iter()
            .flat_map(|l| l.heads.iter().map(HeadCache::token_count))
            .collect();
        let seen = self.tokens_seen();
        let cached = tokens_cached.first().copied().unwrap_or(0);
        let compression_ratio = if cached == 0 { 1.0 } else { seen as f64 / cached as f64 };
        CacheReport {
            tokens_seen: seen,
            tokens_cached,
            compression_ratio,
        }
    }

    /// Binary debug snapshot: `"LRKV"`, version, geometry, then per layer and
    /// head the segment lengths, key rows, value rows and u32 positions, all
    /// little-endian.
    pub fn snapshot(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(SNAPSHOT_MAGIC);
        let u32le = |out: &mut Vec<u8>, x: usize| out.extend_from_slice(&(x as u32).to_le_bytes());
        u32le(&mut out, SNAPSHOT_VERSION as usize);
        u32le(&mut out, T::BYTES);
        let first = self.layers.first();
        u32le(&mut out, self.layers.len());
        u32le(&mut out, first.map_or(0, |l| l.kv_heads()));
        u32le(&mut out, first.map_or(0, |l| l.head_dim));
        let p = first.map(|l| l.params).unwrap_or_default();
        u32le(&mut out, p.sink_size);
        u32le(&mut out, p.lag_size);
        out.extend_from_slice(&p.retention_ratio.to_le_bytes());
        out.extend_from_slice(&p.epsilon.to_le_bytes());
        out.extend_from_slice(&(self.tokens_seen() as u64).to_le_bytes());
        for layer in &self.layers {
            for head in &layer.heads {
                for s in head.segments() {
                    u32le(&mut out, s.len());
                }
                for s in head.segments() {
                    s.keys.iter().for_each(|&x| x.write_le(&mut out));
                }
                for s in head.segments() {
                    s.values.iter().for_each(|&x| x.write_le(&mut out));
                }
                for s in head.segments() {
                    s.positions.iter().for_each(|&p| u32le(&mut out, p));
                }
            }
        }
        out
    }

    /// Inverse of [`SegmentedKvCache::snapshot`]. The retention log is not
    /// part of the snapshot and comes back empty.
    pub fn from_snapshot(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, at: 0 };
        if r.take(4)? != SNAPSHOT_MAGIC {
            return Err(Error::Format("bad cache snapshot magic".into()));
        }
        let version = r.u32()?;
        if version != SNAPSHOT_VERSION {
            return Err(Error::Format(format!("unsupported snapshot version {version}")));
        }
        let width = r.u32()? as usize;
        if width != T::BYTES {
            return Err(Error::Format(format!(
                "snapshot holds {width}-byte floats, expected {}",
                T::BYTES
            )));
        }
        let (layers, kv_heads, d) = (r.u32()? as usize, r.u32()? as usize, r.u32()? as usize);
        let params = LagkvParams {
            sink_size: r.u32()? as usize,
            lag_size: r.u32()? as usize,
            retention_ratio: r.f64()?,
            epsilon: r.f64()?,
        };
        let tokens_seen = r.u64()? as usize;
        let mut cache = Self::new(layers, kv_heads, d, params);
        for layer in &mut cache.layers {
            layer.tokens_seen = tokens_seen;
            for head in &mut layer.heads {
                let lens = [r.u32()?, r.u32()?, r.u32()?, r.u32()?].map(|x| x as usize);
                let mut segs: Vec<Segment<T>> = lens.iter().map(|_| Segment::default()).collect();
                for (s, &n) in segs.iter_mut().zip(&lens) {
                    s.keys = r.floats(n * d)?;
                }
                for (s, &n) in segs.iter_mut().zip(&lens) {
                    s.values = r.floats(n * d)?;
                }
                for (s, &n) in segs.iter_mut().zip(&lens) {
                    s.positions = (0..n).map(|_| r.u32().map(|p| p as usize)).collect::<Result<_>>()?;
                }
                let mut it = segs.into_iter();
                head.sink = it.next().unwrap_or_default();
                head.prefix = it.next().unwrap_or_default();
                head.window = it.next().unwrap_or_default();
                head.tail = it.next().unwrap_or_default();
            }
        }
        if r.at != bytes.len() {
            return Err(Error::Format("trailing bytes after cache snapshot".into()));
        }
        Ok(cache)
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    at: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.at + n;
        if end > self.bytes.len() {
            return Err(Error::Format("truncated cache snapshot".into()));
        }
        let s = &self.bytes[self.at..end];
        self.at = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn floats<T: Real>(&mut self, n: usize) -> Result<Vec<T>> {
        let raw = self.take(n * T::BYTES)?;
        Ok(raw.chunks_exact(T::BYTES).map(T::read_le).collect())
    }
}
