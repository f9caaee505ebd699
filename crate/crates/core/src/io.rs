//! On-disk formats.
//!
//! - Tensor container: `"UATN"`, `u8` version (1), `u8` dtype (0 = f32, 1 = f64),
//!   `u8` rank, `rank` little-endian `u32` dims, then raw little-endian values.
//! - Archive: a text manifest (`UANET-ARCHIVE 1`, entry count, one
//!   `name offset length` line per entry) followed by the concatenated
//!   containers; offsets are relative to the first byte after the manifest.
//! - Masks: binary PGM (`P5`, maxval 255), 0 = background, 255 = building.
//! - Dataset manifest: one `image_path mask_path seed` line per scene.

use std::fs;
use std::path::{Path, PathBuf};

use indexmap::IndexMap;

use crate::error::{Result, TensorError};
use crate::tensor::{DType, Element, Tensor};

pub const CONTAINER_MAGIC: &[u8; 4] = b"UATN";
pub const CONTAINER_VERSION: u8 = 1;
const ARCHIVE_HEADER: &str = "UANET-ARCHIVE 1";

pub fn encode_container<T: Element>(t: &Tensor<T>) -> Vec<u8> {
    let mut out = Vec::with_capacity(7 + 4 * t.rank() + t.numel() * T::DTYPE.width());
    out.extend_from_slice(CONTAINER_MAGIC);
    out.push(CONTAINER_VERSION);
    out.push(T::DTYPE.code());
    out.push(t.rank() as u8);
    for &d in t.shape() {
        out.extend_from_slice(&(d as u32).to_le_bytes());
    }
    for &v in t.data() {
        v.write_le(&mut out);
    }
    out
}

/// Decodes a container, converting the stored width to `T` if needed.
pub fn decode_container<T: Element>(bytes: &[u8]) -> Result<Tensor<T>> {
    if bytes.len() < 7 {
        return Err(TensorError::parse(bytes.len(), "truncated container header"));
    }
    if &bytes[..4] != CONTAINER_MAGIC {
        return Err(TensorError::parse(0, "bad magic, expected UATN"));
    }
    if bytes[4] != CONTAINER_VERSION {
        return Err(TensorError::parse(4, format!("unsupported version {}", bytes[4])));
    }
    let dtype =
        DType::from_code(bytes[5]).ok_or_else(|| TensorError::parse(5, format!("unknown dtype code {}", bytes[5])))?;
    let rank = bytes[6] as usize;
    if rank == 0 {
        return Err(TensorError::parse(6, "rank must be >= 1"));
    }
    let dims_end = 7 + 4 * rank;
    if bytes.len() < dims_end {
        return Err(TensorError::parse(bytes.len(), "truncated dimension list"));
    }
    let mut shape = Vec::with_capacity(rank);
    for i in 0..rank {
        let off = 7 + 4 * i;
        let d = u32::from_le_bytes(bytes[off..off + 4].try_into().unwrap()) as usize;
        if d == 0 {
            return Err(TensorError::parse(off, "zero-sized dimension"));
        }
        shape.push(d);
    }
    let numel = shape.iter().try_fold(1usize, |acc, &d| acc.checked_mul(d));
    let Some(numel) = numel else {
        return Err(TensorError::parse(7, "dimension product overflows"));
    };
    let width = dtype.width();
    let need = numel
        .checked_mul(width)
        .and_then(|n| n.checked_add(dims_end))
        .ok_or_else(|| TensorError::parse(7, "payload size overflows"))?;
    if bytes.len() < need {
        return Err(TensorError::parse(
            bytes.len(),
            format!("truncated payload: need {need} bytes, have {}", bytes.len()),
        ));
    }
    if bytes.len() > need {
        return Err(TensorError::parse(need, "trailing bytes after payload"));
    }
    let payload = &bytes[dims_end..need];
    let data: Vec<T> = match dtype {
        DType::F32 => payload
            .chunks_exact(4)
            .map(|c| T::from_f64_lossy(f64::from(f32::read_le(c))))
            .collect(),
        DType::F64 => payload
            .chunks_exact(8)
            .map(|c| T::from_f64_lossy(f64::read_le(c)))
            .collect(),
    };
    Tensor::new(&shape, data)
}

pub fn write_container<T: Element>(path: &Path, t: &Tensor<T>) -> Result<()> {
    fs::write(path, encode_container(t))?;
    Ok(())
}

pub fn read_container<T: Element>(path: &Path) -> Result<Tensor<T>> {
    decode_container(&fs::read(path)?)
}

/// Named tensors in insertion order, serialised as one archive.
pub fn encode_archive<T: Element>(entries: &IndexMap<String, Tensor<T>>) -> Result<Vec<u8>> {
    let mut blobs = Vec::new();
    let mut manifest = format!("{ARCHIVE_HEADER}\n{}\n", entries.len());
    for (name, t) in entries {
        if name.is_empty() || name.chars().any(char::is_whitespace) {
            return Err(TensorError::Param(format!(
                "archive entry name {name:?} is not a single token"
            )));
        }
        let blob = encode_container(t);
        manifest.push_str(&format!("{name} {} {}\n", blobs.len(), blob.len()));
        blobs.extend_from_slice(&blob);
    }
    let mut out = manifest.into_bytes();
    out.extend_from_slice(&blobs);
    Ok(out)
}

pub fn decode_archive<T: Element>(bytes: &[u8]) -> Result<IndexMap<String, Tensor<T>>> {
    let mut pos = 0usize;
    let next_line = |pos: &mut usize| -> Result<String> {
        let start = *pos;
        let end = bytes[start..]
            .iter()
            .position(|&b| b == b'\n')
            .map(|i| start + i)
            .ok_or_else(|| TensorError::parse(start, "unterminated manifest line"))?;
        *pos = end + 1;
        String::from_utf8(bytes[start..end].to_vec())
            .map_err(|_| TensorError::parse(start, "manifest line is not UTF-8"))
    };
    let header = next_line(&mut pos)?;
    if header != ARCHIVE_HEADER {
        return Err(TensorError::parse(0, format!("bad archive header {header:?}")));
    }
    let count_at = pos;
    let count: usize = next_line(&mut pos)?
        .trim()
        .parse()
        .map_err(|_| TensorError::parse(count_at, "bad entry count"))?;
    let mut index = Vec::with_capacity(count);
    for _ in 0..count {
        let at = pos;
        let line = next_line(&mut pos)?;
        let parts: Vec<&str> = line.split_whitespace().collect();
        let [name, off, len] = parts[..] else {
            return Err(TensorError::parse(at, format!("bad manifest entry {line:?}")));
        };
        let off: usize = off.parse().map_err(|_| TensorError::parse(at, "bad entry offset"))?;
        let len: usize = len.parse().map_err(|_| TensorError::parse(at, "bad entry length"))?;
        index.push((name.to_string(), off, len, at));
    }
    let body = &bytes[pos..];
    let mut out = IndexMap::with_capacity(count);
    for (name, off, len, at) in index {
        let end = off
            .checked_add(len)
            .filter(|&e| e <= body.len())
            .ok_or_else(|| TensorError::parse(at, format!("entry {name} extends past end of archive")))?;
        let t = decode_container(&body[off..end]).map_err(|e| match e {
            TensorError::Parse { offset, msg } => {
                TensorError::parse(pos + off + offset, format!("entry {name}: {msg}"))
            }
            other => other,
        })?;
        if out.insert(name.clone(), t).is_some() {
            return Err(TensorError::parse(at, format!("duplicate entry {name}")));
        }
    }
    Ok(out)
}

pub fn write_archive<T: Element>(path: &Path, entries: &IndexMap<String, Tensor<T>>) -> Result<()> {
    fs::write(path, encode_archive(entries)?)?;
    Ok(())
}

pub fn read_archive<T: Element>(path: &Path) -> Result<IndexMap<String, Tensor<T>>> {
    decode_archive(&fs::read(path)?)
}

/// 8-bit grayscale raster.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct GrayImage {
    pub width: usize,
    pub height: usize,
    pub pixels: Vec<u8>,
}

pub fn encode_pgm(img: &GrayImage) -> Vec<u8> {
    let mut out = format!("P5\n{} {}\n255\n", img.width, img.height).into_bytes();
    out.extend_from_slice(&img.pixels);
    out
}

pub fn decode_pgm(bytes: &[u8]) -> Result<GrayImage> {
    let mut pos = 0usize;
    let token = |pos: &mut usize| -> Result<(String, usize)> {
        loop {
            while *pos < bytes.len() && bytes[*pos].is_ascii_whitespace() {
                *pos += 1;
            }
            if *pos < bytes.len() && bytes[*pos] == b'#' {
                while *pos < bytes.len() && bytes[*pos] != b'\n' {
                    *pos += 1;
                }
                continue;
            }
            break;
        }
        let start = *pos;
        while *pos < bytes.len() && !bytes[*pos].is_ascii_whitespace() {
            *pos += 1;
        }
        if start == *pos {
            return Err(TensorError::parse(start, "unexpected end of PGM header"));
        }
        Ok((String::from_utf8_lossy(&bytes[start..*pos]).into_owned(), start))
    };
    let (magic, at) = token(&mut pos)?;
    if magic != "P5" {
        return Err(TensorError::parse(at, format!("expected P5, found {magic:?}")));
    }
    let number = |pos: &mut usize, what: &str| -> Result<usize> {
        let (tok, at) = token(pos)?;
        tok.parse::<usize>()
            .ok()
            .filter(|&v| v > 0)
            .ok_or_else(|| TensorError::parse(at, format!("bad {what} {tok:?}")))
    };
    let width = number(&mut pos, "width")?;
    let height = number(&mut pos, "height")?;
    let maxval_at = pos;
    let maxval = number(&mut pos, "maxval")?;
    if maxval > 255 {
        return Err(TensorError::parse(
            maxval_at,
            "only 8-bit PGM (maxval <= 255) is supported",
        ));
    }
    if pos >= bytes.len() || !bytes[pos].is_ascii_whitespace() {
        return Err(TensorError::parse(pos, "missing whitespace after maxval"));
    }
    pos += 1;
    let need = width * height;
    if bytes.len() - pos < need {
        return Err(TensorError::parse(
            bytes.len(),
            format!("truncated raster: need {need} bytes after header"),
        ));
    }
    Ok(GrayImage {
        width,
        height,
        pixels: bytes[pos..pos + need].to_vec(),
    })
}

pub fn write_pgm(path: &Path, img: &GrayImage) -> Result<()> {
    fs::write(path, encode_pgm(img))?;
    Ok(())
}

pub fn read_pgm(path: &Path) -> Result<GrayImage> {
    decode_pgm(&fs::read(path)?)
}

/// `1 x H x W` binary mask to a 0/255 raster.
pub fn mask_to_image<T: Element>(mask: &Tensor<T>) -> Result<GrayImage> {
    let (c, h, w) = mask.chw()?;
    if c != 1 {
        return Err(TensorError::Shape(format!("mask must have one channel, got {c}")));
    }
    Ok(GrayImage {
        width: w,
        height: h,
        pixels: mask
            .data()
            .iter()
            .map(|&v| if v > T::zero() { 255 } else { 0 })
            .collect(),
    })
}

/// 0/255 raster to a `1 x H x W` mask (values above 127 are buildings).
pub fn image_to_mask<T: Element>(img: &GrayImage) -> Tensor<T> {
    let data = img
        .pixels
        .iter()
        .map(|&p| if p > 127 { T::one() } else { T::zero() })
        .collect();
    Tensor::new(&[1, img.height, img.width], data).expect("pgm dimensions are positive")
}

/// Rank raster (values 0..=5) scaled by 51 for viewing.
pub fn ranks_to_image(ranks: &[u8], height: usize, width: usize) -> GrayImage {
    GrayImage {
        width,
        height,
        pixels: ranks.iter().map(|&r| r.min(5) * 51).collect(),
    }
}

/// Values in `[0, max]` mapped linearly onto 0..=255.
pub fn scalar_to_image<T: Element>(raster: &Tensor<T>, max: f64) -> Result<GrayImage> {
    let (c, h, w) = raster.chw()?;
    if c != 1 {
        return Err(TensorError::Shape(format!("raster must have one channel, got {c}")));
    }
    let pixels = raster
        .to_f64_vec()
        .into_iter()
        .map(|v| ((v / max).clamp(0.0, 1.0) * 255.0).round() as u8)
        .collect();
    Ok(GrayImage {
        width: w,
        height: h,
        pixels,
    })
}

pub fn write_png(path: &Path, img: &GrayImage) -> Result<()> {
    let buf = image::GrayImage::from_raw(img.width as u32, img.height as u32, img.pixels.clone())
        .ok_or_else(|| TensorError::Param("raster size does not match its pixel buffer".into()))?;
    buf.save_with_format(path, image::ImageFormat::Png)
        .map_err(|e| TensorError::Io(std::io::Error::other(e.to_string())))
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ManifestEntry {
    pub image: PathBuf,
    pub mask: PathBuf,
    pub seed: u64,
}

pub fn format_manifest(entries: &[ManifestEntry]) -> String {
    let mut out = String::from("# image mask seed\n");
    for e in entries {
        out.push_str(&format!("{} {} {}\n", e.image.display(), e.mask.display(), e.seed));
    }
    out
}

/// Parses a manifest; relative paths resolve against `base`.
pub fn parse_manifest(text: &str, base: &Path) -> Result<Vec<ManifestEntry>> {
    let mut out = Vec::new();
    let mut offset = 0;
    for line in text.split_inclusive('\n') {
        let at = offset;
        offset += line.len();
        let trimmed = line.trim();
        if trimmed.is_empty() || trimmed.starts_with('#') {
            continue;
        }
        let parts: Vec<&str> = trimmed.split_whitespace().collect();
        let [image, mask, seed] = parts[..] else {
            return Err(TensorError::parse(
                at,
                format!("manifest line {trimmed:?} needs 3 fields"),
            ));
        };
        let seed = seed
            .parse()
            .map_err(|_| TensorError::parse(at, format!("bad seed {seed:?}")))?;
        out.push(ManifestEntry {
            image: base.join(image),
            mask: base.join(mask),
            seed,
        });
    }
    Ok(out)
}

pub fn read_manifest(path: &Path) -> Result<Vec<ManifestEntry>> {
    let text = fs::read_to_string(path)?;
    parse_manifest(&text, path.parent().unwrap_or(Path::new(".")))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn container_layout() {
        let t = Tensor::<f32>::from_f64(&[1, 2], &[1.0, -2.0]).unwrap();
        let b = encode_container(&t);
        assert_eq!(&b[..7], b"UATN\x01\x00\x02");
        assert_eq!(&b[7..15], &[1, 0, 0, 0, 2, 0, 0, 0]);
        assert_eq!(&b[15..19], &1.0f32.to_le_bytes());
        assert_eq!(b.len(), 23);
    }

    #[test]
    fn truncated_container_is_parse_error() {
        let t = Tensor::<f64>::from_fn(&[2, 3], |i| i as f64);
        let b = encode_container(&t);
        for cut in [0, 3, 6, 10, b.len() - 1] {
            match decode_container::<f64>(&b[..cut]) {
                Err(TensorError::Parse { .. }) => {}
                other => panic!("cut {cut}: {other:?}"),
            }
        }
        let mut bad = b.clone();
        bad[5] = 9;
        assert!(matches!(
            decode_container::<f64>(&bad),
            Err(TensorError::Parse { offset: 5, .. })
        ));
    }

    #[test]
    fn f32_container_widens() {
        let t = Tensor::<f32>::from_f64(&[3], &[0.5, 1.5, -3.25]).unwrap();
        let back: Tensor<f64> = decode_container(&encode_container(&t)).unwrap();
        assert_eq!(back.data(), &[0.5, 1.5, -3.25]);
    }

    #[test]
    fn archive_round_trip_and_errors() {
        let mut m = IndexMap::new();
        m.insert("enc.w".to_string(), Tensor::<f32>::from_fn(&[2, 2], |i| i as f32));
        m.insert("head.b".to_string(), Tensor::<f32>::scalar(3.0));
        let bytes = encode_archive(&m).unwrap();
        assert!(bytes.starts_with(b"UANET-ARCHIVE 1\n2\nenc.w 0 "));
        assert_eq!(decode_archive::<f32>(&bytes).unwrap(), m);
        assert!(matches!(
            decode_archive::<f32>(&bytes[..bytes.len() - 2]),
            Err(TensorError::Parse { .. })
        ));
        let mut bad = IndexMap::new();
        bad.insert("has space".to_string(), Tensor::<f32>::scalar(0.0));
        assert!(encode_archive(&bad).is_err());
    }

    #[test]
    fn pgm_header_contract() {
        let img = GrayImage {
            width: 3,
            height: 2,
            pixels: vec![0, 255, 0, 255, 255, 0],
        };
        let b = encode_pgm(&img);
        assert!(b.starts_with(b"P5\n3 2\n255\n"));
        let with_comment = b"P5\n# made by hand\n3 2\n255\n\x00\xff\x00\xff\xff\x00";
        assert_eq!(decode_pgm(with_comment).unwrap(), img);
        assert!(matches!(
            decode_pgm(b"P2\n3 2\n255\n"),
            Err(TensorError::Parse { offset: 0, .. })
        ));
        assert!(matches!(decode_pgm(&b[..b.len() - 1]), Err(TensorError::Parse { .. })));
        let mask: Tensor<f32> = image_to_mask(&img);
        assert_eq!(mask.data(), &[0.0, 1.0, 0.0, 1.0, 1.0, 0.0]);
    }

    #[test]
    fn manifest_parsing() {
        let text = "# image mask seed\nimg/0.uatn mask/0.pgm 11\n\nimg/1.uatn mask/1.pgm 12\n";
        let e = parse_manifest(text, Path::new("/data")).unwrap();
        assert_eq!(e.len(), 2);
        assert_eq!(e[1].mask, Path::new("/data/mask/1.pgm"));
        assert_eq!(e[0].seed, 11);
        assert!(matches!(
            parse_manifest("a b\n", Path::new(".")),
            Err(TensorError::Parse { offset: 0, .. })
        ));
    }

    proptest! {
        #[test]
        fn container_round_trip(dims in proptest::collection::vec(1usize..5, 1..4), seed in any::<u64>()) {
            let n: usize = dims.iter().product();
            let data: Vec<f64> = (0..n).map(|i| ((seed.wrapping_mul(i as u64 + 1)) % 1000) as f64 / 7.0 - 50.0).collect();
            let t = Tensor::<f64>::new(&dims, data).unwrap();
            prop_assert_eq!(decode_container::<f64>(&encode_container(&t)).unwrap(), t);
        }

        #[test]
        fn mask_pgm_round_trip(h in 1usize..20, w in 1usize..20, bits in any::<u64>()) {
            let mask = Tensor::<f32>::from_fn(&[1, h, w], |i| ((bits >> (i % 64)) & 1) as f32);
            let img = decode_pgm(&encode_pgm(&mask_to_image(&mask).unwrap())).unwrap();
            prop_assert_eq!(image_to_mask::<f32>(&img), mask);
        }
    }
}
