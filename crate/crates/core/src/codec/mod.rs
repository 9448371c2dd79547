//! Depth-partitioned octree codec.
//!
//! Each octree level is arithmetic-coded into its own segment with a fresh
//! coder, and the coder is flushed at the level boundary. A prefix of `k`
//! segments therefore reconstructs the octree down to depth `k`, and the
//! full set of segments is the lossless stream.

mod container;
mod model;
mod range;

pub use container::{header_size, Bitstream, LevelSegment, StreamHeader, FORMAT_VERSION, MAGIC};
pub use model::{ContextId, ContextModel, FrequencyTable, COUNT_INCREMENT, COUNT_LIMIT};
pub use range::{RangeDecoder, RangeEncoder};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fsutil::Fnv1a;
use crate::octree::{build_octree, reconstruct, DepthLevel, Octree};
use crate::pointcloud::{normalize, NormalizationTransform, PointCloud};

/// Parent byte used as context for the root symbol.
pub const ROOT_PARENT: u8 = 0x00;

/// Everything that determines the bytes `encode_cloud` produces for a cloud.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CodecConfig {
    pub max_depth: u32,
}

impl CodecConfig {
    pub fn new(max_depth: u32) -> Result<Self> {
        DepthLevel::new(max_depth)?;
        Ok(CodecConfig { max_depth })
    }

    pub fn encode(&self, cloud: &PointCloud) -> Result<Bitstream> {
        encode_cloud(cloud, self.max_depth)
    }

    /// FNV-1a over the format version, depth and model constants.
    pub fn hash(&self) -> u64 {
        let mut h = Fnv1a::new();
        h.write(b"pcmp-codec")
            .write(&[FORMAT_VERSION, ROOT_PARENT])
            .write_u64(u64::from(self.max_depth))
            .write_u64(u64::from(COUNT_INCREMENT))
            .write_u64(u64::from(COUNT_LIMIT));
        h.finish()
    }
}

/// Codes `symbols[i]` under `contexts[i]`, updating `model` as it goes.
pub fn arith_encode(symbols: &[u8], contexts: &[ContextId], model: &mut ContextModel) -> Vec<u8> {
    assert_eq!(symbols.len(), contexts.len(), "one context per symbol");
    let mut enc = RangeEncoder::new();
    for (&s, &ctx) in symbols.iter().zip(contexts) {
        let table = model.table(ctx);
        let (cum, freq) = table.interval(s);
        enc.encode(cum, freq, table.total());
        table.update(s);
    }
    enc.finish()
}

/// Inverse of [`arith_encode`]; `context_at(i)` must return the context the
/// encoder used for symbol `i`.
pub fn arith_decode(
    payload: &[u8],
    context_at: impl FnMut(usize) -> ContextId,
    count: usize,
    model: &mut ContextModel,
) -> Result<Vec<u8>> {
    arith_decode_counted(payload, context_at, count, model).map(|(s, _)| s)
}

/// Like [`arith_decode`], also returning the number of payload bytes read.
pub fn arith_decode_counted(
    payload: &[u8],
    mut context_at: impl FnMut(usize) -> ContextId,
    count: usize,
    model: &mut ContextModel,
) -> Result<(Vec<u8>, usize)> {
    if count == 0 {
        return Ok((Vec::new(), 0));
    }
    let mut dec = RangeDecoder::new(payload)?;
    let mut out = Vec::with_capacity(count);
    for i in 0..count {
        let table = model.table(context_at(i));
        let target = dec.target(table.total())?;
        let (s, cum, freq) = table.find(target);
        dec.consume(cum, freq)?;
        table.update(s);
        out.push(s);
    }
    Ok((out, dec.consumed()))
}

/// Contexts for the symbols of level `level + 1`, derived from the bytes of
/// `level`: each child inherits its parent's occupancy byte.
fn child_contexts(next_level: u32, parents: &[u8]) -> Vec<ContextId> {
    let mut ctx = Vec::with_capacity(crate::octree::child_count(parents));
    for &p in parents {
        for _ in 0..p.count_ones() {
            ctx.push(ContextId::new(next_level, p));
        }
    }
    ctx
}

/// Encodes a cloud down to `max_depth`. Raw clouds are normalized first and
/// the transform is stored in the header; normalized clouds use the identity.
pub fn encode_cloud(cloud: &PointCloud, max_depth: u32) -> Result<Bitstream> {
    let (tree, transform) = if cloud.is_normalized() {
        (build_octree(cloud, max_depth)?, NormalizationTransform::IDENTITY)
    } else {
        let (norm, t) = normalize(cloud);
        (build_octree(&norm, max_depth)?, t)
    };
    Ok(encode_octree(&tree, transform))
}

pub fn encode_octree(tree: &Octree, transform: NormalizationTransform) -> Bitstream {
    let mut segments = Vec::with_capacity(tree.levels().len());
    let mut symbol_counts = Vec::with_capacity(tree.levels().len());
    let mut contexts = vec![ContextId::new(1, ROOT_PARENT)];
    for (i, level) in tree.levels().iter().enumerate() {
        let l = i as u32 + 1;
        let mut model = ContextModel::new();
        let payload = arith_encode(level, &contexts, &mut model);
        segments.push(LevelSegment {
            level: DepthLevel::new(l).expect("octree depth within bounds"),
            payload,
        });
        symbol_counts.push(level.len() as u32);
        contexts = child_contexts(l + 1, level);
    }
    Bitstream::from_parts(tree.point_count(), transform, symbol_counts, segments)
        .expect("encoder output is consistent")
}

/// Result of a prefix decode, with per-level byte accounting.
#[derive(Clone, Debug, PartialEq)]
pub struct DecodeReport {
    pub octree: Octree,
    /// Cell centers at the decoded depth, mapped back through the header transform.
    pub cloud: PointCloud,
    /// Payload bytes read from each decoded segment.
    pub consumed: Vec<usize>,
}

impl DecodeReport {
    pub fn bytes_consumed(&self) -> usize {
        self.consumed.iter().sum()
    }
}

pub fn decode_cloud(stream: &Bitstream, depth: DepthLevel) -> Result<(Octree, PointCloud)> {
    decode_cloud_instrumented(stream, depth).map(|r| (r.octree, r.cloud))
}

/// Decodes segments `1..=depth` only; segments past `depth` are never read.
pub fn decode_cloud_instrumented(stream: &Bitstream, depth: DepthLevel) -> Result<DecodeReport> {
    depth.check_within(stream.max_depth())?;
    let mut consumed = Vec::with_capacity(depth.get() as usize);
    let octree = decode_levels(stream, depth, |used| consumed.push(used))?;
    let normalized = reconstruct(&octree, depth)?;
    let cloud = stream.header().transform.denormalize(&normalized);
    Ok(DecodeReport {
        octree,
        cloud,
        consumed,
    })
}

fn decode_levels(
    stream: &Bitstream,
    depth: DepthLevel,
    mut on_level: impl FnMut(usize),
) -> Result<Octree> {
    let header = stream.header();
    let mut levels: Vec<Vec<u8>> = Vec::with_capacity(depth.get() as usize);
    let mut contexts = vec![ContextId::new(1, ROOT_PARENT)];
    for (i, seg) in stream.segments()[..depth.get() as usize].iter().enumerate() {
        let l = i as u32 + 1;
        let expected = header.symbol_counts[i] as usize;
        if expected != contexts.len() {
            return Err(Error::CorruptStream(format!(
                "level {l} declares {expected} symbols, parents imply {}",
                contexts.len()
            )));
        }
        let mut model = ContextModel::new();
        let (symbols, used) =
            arith_decode_counted(&seg.payload, |j| contexts[j], expected, &mut model)?;
        if used != seg.payload.len() {
            return Err(Error::CorruptStream(format!(
                "level {l} consumed {used} of {} payload bytes",
                seg.payload.len()
            )));
        }
        if symbols.contains(&0) {
            return Err(Error::CorruptStream(format!("level {l} decodes an empty node")));
        }
        on_level(used);
        contexts = child_contexts(l + 1, &symbols);
        levels.push(symbols);
    }
    Octree::from_levels(levels, header.point_count)
}

/// Keeps the first `depth` segments and rewrites the header accordingly.
pub fn truncate_stream(stream: &Bitstream, depth: DepthLevel) -> Result<Bitstream> {
    stream.truncate(depth)
}

/// Bits per point of the payload, excluding the fixed header.
pub fn bpp(stream: &Bitstream) -> f64 {
    bits_per_point(stream.payload_len(), stream.header().point_count)
}

/// Bits per point including the container header.
pub fn bpp_with_header(stream: &Bitstream) -> f64 {
    bits_per_point(stream.encoded_len(), stream.header().point_count)
}

pub fn bits_per_point(bytes: usize, point_count: u64) -> f64 {
    if point_count == 0 {
        return 0.0;
    }
    8.0 * bytes as f64 / point_count as f64
}
