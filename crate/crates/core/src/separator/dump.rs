//! Binary dump of a [`PackedSequence`].
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! magic "STPK" | version u16 | images u32 | clusters_per_image u32
//! cluster_side u32 | embed_dim u32 | patch_dim u32 | layout u8
//! value_kind u8 | restart_positions u8 | token_count u32
//! token_count x { flags u8 (bit 0: separator) | image u32 | cluster u32
//!                 within u32 | position u32 | grid_row u32 | grid_col u32
//!                 len u32 | len x f32 }
//! ```
//!
//! Separator tokens store `u32::MAX` for both grid coordinates.

use std::io::{Read, Write};

use crate::error::{Result, StarError};
use crate::registry;

use super::pack::{PackedSequence, PackedToken, TokenMeta, TokenPayload};

pub const MAGIC: [u8; 4] = *b"STPK";
pub const VERSION: u16 = 1;

fn put_u32(out: &mut Vec<u8>, v: usize) -> Result<()> {
    let v = u32::try_from(v)
        .map_err(|_| StarError::InvalidArgument(format!("{v} does not fit in u32")))?;
    out.extend_from_slice(&v.to_le_bytes());
    Ok(())
}

pub fn encode(packed: &PackedSequence) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    out.extend_from_slice(&MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    for v in [
        packed.images,
        packed.clusters_per_image,
        packed.cluster_side,
        packed.embed_dim,
        packed.patch_dim,
    ] {
        put_u32(&mut out, v)?;
    }
    out.push(packed.layout.code());
    out.push(packed.value.code());
    out.push(u8::from(packed.restart_positions));
    put_u32(&mut out, packed.tokens.len())?;
    for t in &packed.tokens {
        let m = &t.meta;
        out.push(u8::from(m.is_separator));
        for v in [
            m.image_index,
            m.cluster_index,
            m.within_cluster_index,
            m.position_id,
        ] {
            put_u32(&mut out, v)?;
        }
        let (gr, gc) = m
            .grid
            .map_or((u32::MAX, u32::MAX), |(r, c)| (r as u32, c as u32));
        out.extend_from_slice(&gr.to_le_bytes());
        out.extend_from_slice(&gc.to_le_bytes());
        let payload = match &t.payload {
            TokenPayload::Pixel(v) | TokenPayload::Separator(v) => v,
        };
        put_u32(&mut out, payload.len())?;
        for x in payload {
            out.extend_from_slice(&x.to_le_bytes());
        }
    }
    Ok(out)
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl Cursor<'_> {
    fn take(&mut self, n: usize) -> Result<&[u8]> {
        let s = self
            .bytes
            .get(self.pos..self.pos + n)
            .ok_or_else(|| StarError::InvalidArgument("truncated pack dump".into()))?;
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn usize(&mut self) -> Result<usize> {
        Ok(self.u32()? as usize)
    }
}

pub fn decode(bytes: &[u8]) -> Result<PackedSequence> {
    let mut cur = Cursor { bytes, pos: 0 };
    if cur.take(4)? != MAGIC {
        return Err(StarError::InvalidArgument(
            "not a pack dump (bad magic)".into(),
        ));
    }
    let version = u16::from_le_bytes(cur.take(2)?.try_into().unwrap());
    if version != VERSION {
        return Err(StarError::InvalidArgument(format!(
            "unsupported pack dump version {version}"
        )));
    }
    let images = cur.usize()?;
    let clusters_per_image = cur.usize()?;
    let cluster_side = cur.usize()?;
    let embed_dim = cur.usize()?;
    let patch_dim = cur.usize()?;
    let layout = registry::layout_by_code(cur.u8()?)?;
    let value = registry::separator_value_by_code(cur.u8()?)?;
    let restart_positions = cur.u8()? != 0;
    let count = cur.usize()?;
    let mut tokens = Vec::with_capacity(count);
    for _ in 0..count {
        let is_separator = cur.u8()? & 1 == 1;
        let image_index = cur.usize()?;
        let cluster_index = cur.usize()?;
        let within_cluster_index = cur.usize()?;
        let position_id = cur.usize()?;
        let (gr, gc) = (cur.u32()?, cur.u32()?);
        let grid = (gr != u32::MAX).then_some((gr as usize, gc as usize));
        let len = cur.usize()?;
        let raw = cur.take(len * 4)?;
        let v: Vec<f32> = raw
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes(b.try_into().unwrap()))
            .collect();
        let payload = if is_separator {
            TokenPayload::Separator(v)
        } else {
            TokenPayload::Pixel(v)
        };
        tokens.push(PackedToken {
            payload,
            meta: TokenMeta {
                image_index,
                cluster_index,
                within_cluster_index,
                is_separator,
                position_id,
                grid,
            },
        });
    }
    if cur.pos != bytes.len() {
        return Err(StarError::InvalidArgument(
            "trailing bytes after pack dump".into(),
        ));
    }
    let per_cluster = cluster_side * cluster_side;
    let slots_per_image = if images == 0 || per_cluster == 0 {
        0
    } else {
        count / images / per_cluster
    };
    let separators = slots_per_image.saturating_sub(clusters_per_image);
    Ok(PackedSequence {
        tokens,
        images,
        clusters_per_image,
        cluster_side,
        embed_dim,
        patch_dim,
        layout,
        value,
        restart_positions,
        slots_per_image,
        positions_per_image: separators + clusters_per_image * per_cluster,
    })
}

pub fn write(packed: &PackedSequence, mut w: impl Write) -> Result<()> {
    w.write_all(&encode(packed)?)?;
    Ok(())
}

pub fn read(mut r: impl Read) -> Result<PackedSequence> {
    let mut bytes = Vec::new();
    r.read_to_end(&mut bytes)?;
    decode(&bytes)
}
