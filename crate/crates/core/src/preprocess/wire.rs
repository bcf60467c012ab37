//! Byte layout of a filtered image on the downlink.
//!
//! All integers are little-endian.
//!
//! ```text
//! header:  "FIM1" | image_h u32 | image_w u32 | region_h u16 | region_w u16 | records u32
//! record:  region_index u32 | tag u8 | h u16 | w u16 | h*w pixels (u8)
//! ```
//!
//! Tags are 0 (discarded, 0×0), 1 (downsampled) and 2 (full resolution).
//! Pixels are quantised to `round(clamp(p, 0, 1) * 255)`.

use super::{paste_regions, FilteredImage, FilteredRegion, RegionDecision};
use crate::domain::Image;
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 4] = b"FIM1";
pub const HEADER_BYTES: usize = 4 + 4 + 4 + 2 + 2 + 4;
pub const RECORD_HEADER_BYTES: usize = 4 + 1 + 2 + 2;

fn quantize(p: f64) -> u8 {
    (p.clamp(0.0, 1.0) * 255.0).round() as u8
}

pub fn encode(image: &FilteredImage) -> Result<Vec<u8>> {
    let to_u16 = |v: usize, what: &str| {
        u16::try_from(v).map_err(|_| Error::Format(format!("{what} {v} does not fit in 16 bits")))
    };
    let to_u32 = |v: usize, what: &str| {
        u32::try_from(v).map_err(|_| Error::Format(format!("{what} {v} does not fit in 32 bits")))
    };
    let mut out = Vec::with_capacity(HEADER_BYTES);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&to_u32(image.image_height, "image height")?.to_le_bytes());
    out.extend_from_slice(&to_u32(image.image_width, "image width")?.to_le_bytes());
    out.extend_from_slice(&to_u16(image.region_height, "region height")?.to_le_bytes());
    out.extend_from_slice(&to_u16(image.region_width, "region width")?.to_le_bytes());
    out.extend_from_slice(&to_u32(image.regions.len(), "record count")?.to_le_bytes());
    for reg in &image.regions {
        out.extend_from_slice(&to_u32(reg.index, "region index")?.to_le_bytes());
        out.push(reg.decision.tag());
        out.extend_from_slice(&to_u16(reg.pixels.height(), "region height")?.to_le_bytes());
        out.extend_from_slice(&to_u16(reg.pixels.width(), "region width")?.to_le_bytes());
        out.extend(reg.pixels.pixels().iter().map(|&p| quantize(p)));
    }
    Ok(out)
}

/// Regions as received on the ground.
#[derive(Debug, Clone, PartialEq)]
pub struct DecodedImage {
    pub image_height: usize,
    pub image_width: usize,
    pub region_height: usize,
    pub region_width: usize,
    pub regions: Vec<FilteredRegion>,
}

impl DecodedImage {
    /// Full-size image with discarded regions zero-filled.
    pub fn reconstruct(&self) -> Image {
        paste_regions(
            &self.regions,
            (self.region_height, self.region_width),
            (self.image_height, self.image_width),
        )
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len());
        let end = end.ok_or_else(|| Error::Format(format!("truncated filtered image at byte {}", self.pos)))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }
    fn u16(&mut self) -> Result<usize> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()) as usize)
    }
    fn u32(&mut self) -> Result<usize> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()) as usize)
    }
}

pub fn decode(bytes: &[u8]) -> Result<DecodedImage> {
    let mut r = Reader { buf: bytes, pos: 0 };
    if r.take(4)? != MAGIC {
        return Err(Error::Format("bad filtered-image magic".into()));
    }
    let image_height = r.u32()?;
    let image_width = r.u32()?;
    let region_height = r.u16()?;
    let region_width = r.u16()?;
    let count = r.u32()?;
    if region_height == 0 || region_width == 0 {
        return Err(Error::Format("zero region size".into()));
    }
    let total = image_height.div_ceil(region_height) * image_width.div_ceil(region_width);
    let mut regions = Vec::with_capacity(count.min(total));
    for _ in 0..count {
        let index = r.u32()?;
        if index >= total {
            return Err(Error::Format(format!("region index {index} out of range ({total} regions)")));
        }
        let tag = r.take(1)?[0];
        let (h, w) = (r.u16()?, r.u16()?);
        if h > region_height || w > region_width {
            return Err(Error::Format(format!("region {index} is {h}x{w}, larger than the grid cell")));
        }
        let data = r.take(h * w)?;
        let pixels = if h * w == 0 {
            Image::empty()
        } else {
            Image::new(h, w, data.iter().map(|&b| b as f64 / 255.0).collect())?
        };
        let decision = match tag {
            0 => RegionDecision::Discard,
            1 => RegionDecision::Downsample {
                factor: (region_height as f64 / h.max(1) as f64).max(region_width as f64 / w.max(1) as f64),
            },
            2 => RegionDecision::Preserve,
            t => return Err(Error::Format(format!("unknown region tag {t}"))),
        };
        regions.push(FilteredRegion { index, decision, pixels });
    }
    if r.pos != bytes.len() {
        return Err(Error::Format(format!("{} trailing bytes", bytes.len() - r.pos)));
    }
    Ok(DecodedImage {
        image_height,
        image_width,
        region_height,
        region_width,
        regions,
    })
}
