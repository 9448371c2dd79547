//! `.pcmp` container: fixed little-endian header followed by the per-level
//! payloads in level order.
//!
//! ```text
//! magic "PCMP" | version u8 | max_depth u8 | reserved u16 | point_count u64
//! offset 3 x f64 | scale f64 | symbol_counts n x u32 | payload_lengths n x u32
//! payload_1 .. payload_n
//! ```

use crate::error::{Error, Result};
use crate::octree::{DepthLevel, MAX_DEPTH};
use crate::pointcloud::{NormalizationTransform, Point3};

pub const MAGIC: [u8; 4] = *b"PCMP";
pub const FORMAT_VERSION: u8 = 1;

const FIXED_HEADER: usize = 4 + 1 + 1 + 2 + 8 + 3 * 8 + 8;

/// Header bytes of a stream with `max_depth` levels.
pub fn header_size(max_depth: u32) -> usize {
    FIXED_HEADER + 8 * max_depth as usize
}

#[derive(Clone, Debug, PartialEq)]
pub struct StreamHeader {
    pub version: u8,
    pub max_depth: u8,
    pub point_count: u64,
    pub transform: NormalizationTransform,
    pub symbol_counts: Vec<u32>,
    pub payload_lengths: Vec<u32>,
}

/// The coded bits of one octree level.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LevelSegment {
    pub level: DepthLevel,
    pub payload: Vec<u8>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Bitstream {
    header: StreamHeader,
    segments: Vec<LevelSegment>,
}

impl Bitstream {
    pub fn from_parts(
        point_count: u64,
        transform: NormalizationTransform,
        symbol_counts: Vec<u32>,
        segments: Vec<LevelSegment>,
    ) -> Result<Self> {
        let n = segments.len();
        if n == 0 || n > MAX_DEPTH as usize || symbol_counts.len() != n {
            return Err(Error::CorruptStream(format!(
                "{n} segments with {} symbol counts",
                symbol_counts.len()
            )));
        }
        for (i, seg) in segments.iter().enumerate() {
            if seg.level.get() as usize != i + 1 {
                return Err(Error::CorruptStream(format!(
                    "segment {} labelled as level {}",
                    i + 1,
                    seg.level
                )));
            }
        }
        let payload_lengths = segments.iter().map(|s| s.payload.len() as u32).collect();
        Ok(Bitstream {
            header: StreamHeader {
                version: FORMAT_VERSION,
                max_depth: n as u8,
                point_count,
                transform,
                symbol_counts,
                payload_lengths,
            },
            segments,
        })
    }

    pub fn header(&self) -> &StreamHeader {
        &self.header
    }

    pub fn segments(&self) -> &[LevelSegment] {
        &self.segments
    }

    pub fn max_depth(&self) -> u32 {
        u32::from(self.header.max_depth)
    }

    pub fn payload_len(&self) -> usize {
        self.segments.iter().map(|s| s.payload.len()).sum()
    }

    /// Payload bytes of segments `1..=depth`.
    pub fn prefix_payload_len(&self, depth: DepthLevel) -> usize {
        self.segments[..depth.index().min(self.segments.len())]
            .iter()
            .map(|s| s.payload.len())
            .sum()
    }

    /// Size of the serialized container.
    pub fn encoded_len(&self) -> usize {
        header_size(self.max_depth()) + self.payload_len()
    }

    pub fn truncate(&self, depth: DepthLevel) -> Result<Bitstream> {
        depth.check_within(self.max_depth())?;
        let k = depth.index();
        Bitstream::from_parts(
            self.header.point_count,
            self.header.transform,
            self.header.symbol_counts[..k].to_vec(),
            self.segments[..k].to_vec(),
        )
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let h = &self.header;
        let mut out = Vec::with_capacity(self.encoded_len());
        out.extend_from_slice(&MAGIC);
        out.push(h.version);
        out.push(h.max_depth);
        out.extend_from_slice(&0u16.to_le_bytes());
        out.extend_from_slice(&h.point_count.to_le_bytes());
        for v in h.transform.offset.coords() {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out.extend_from_slice(&h.transform.scale.to_le_bytes());
        for c in &h.symbol_counts {
            out.extend_from_slice(&c.to_le_bytes());
        }
        for l in &h.payload_lengths {
            out.extend_from_slice(&l.to_le_bytes());
        }
        for s in &self.segments {
            out.extend_from_slice(&s.payload);
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Bitstream> {
        let (mut r, parsed) = parse_header(bytes)?;
        let segments = parsed.read_segments(&mut r, parsed.lengths.len())?;
        if r.pos != bytes.len() {
            return Err(Error::CorruptStream(format!(
                "{} trailing bytes after last segment",
                bytes.len() - r.pos
            )));
        }
        parsed.finish(segments)
    }

    /// Parses the leading bytes of a full container, as received by a
    /// consumer that stopped after the segment of `depth`. Bytes past that
    /// segment are ignored.
    pub fn from_prefix_bytes(bytes: &[u8], depth: DepthLevel) -> Result<Bitstream> {
        let (mut r, parsed) = parse_header(bytes)?;
        depth.check_within(parsed.lengths.len() as u32)?;
        let segments = parsed.read_segments(&mut r, depth.index())?;
        parsed.finish(segments)
    }
}

struct ParsedHeader {
    point_count: u64,
    transform: NormalizationTransform,
    symbol_counts: Vec<u32>,
    lengths: Vec<u32>,
}

impl ParsedHeader {
    fn read_segments(&self, r: &mut Reader<'_>, count: usize) -> Result<Vec<LevelSegment>> {
        let mut segments = Vec::with_capacity(count);
        for (i, &len) in self.lengths[..count].iter().enumerate() {
            segments.push(LevelSegment {
                level: DepthLevel::new(i as u32 + 1)?,
                payload: r.take(len as usize)?.to_vec(),
            });
        }
        Ok(segments)
    }

    fn finish(self, segments: Vec<LevelSegment>) -> Result<Bitstream> {
        let n = segments.len();
        Bitstream::from_parts(
            self.point_count,
            self.transform,
            self.symbol_counts[..n].to_vec(),
            segments,
        )
    }
}

fn parse_header(bytes: &[u8]) -> Result<(Reader<'_>, ParsedHeader)> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(4)? != MAGIC {
        return Err(Error::CorruptStream("bad magic".into()));
    }
    let version = r.u8()?;
    if version != FORMAT_VERSION {
        return Err(Error::CorruptStream(format!("unsupported version {version}")));
    }
    let max_depth = r.u8()?;
    if max_depth == 0 || u32::from(max_depth) > MAX_DEPTH {
        return Err(Error::CorruptStream(format!("max_depth {max_depth} out of range")));
    }
    let _reserved = r.u16()?;
    let point_count = r.u64()?;
    let offset = Point3::new(r.f64()?, r.f64()?, r.f64()?);
    let scale = r.f64()?;
    if !(scale > 0.0 && scale.is_finite() && offset.is_finite()) {
        return Err(Error::CorruptStream("invalid normalization transform".into()));
    }
    let n = usize::from(max_depth);
    let symbol_counts = (0..n).map(|_| r.u32()).collect::<Result<Vec<_>>>()?;
    let lengths = (0..n).map(|_| r.u32()).collect::<Result<Vec<_>>>()?;
    let parsed = ParsedHeader {
        point_count,
        transform: NormalizationTransform { offset, scale },
        symbol_counts,
        lengths,
    };
    Ok((r, parsed))
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| Error::CorruptStream("stream truncated".into()))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn array<const N: usize>(&mut self) -> Result<[u8; N]> {
        Ok(self.take(N)?.try_into().unwrap())
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.array()?))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.array()?))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.array()?))
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.array()?))
    }
}
