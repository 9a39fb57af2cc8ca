//! Latent tensors, quantization index arrays, luma images and their on-disk
//! containers (binary PGM input and the `LTNS` tensor container).

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Default bound on quantization index magnitude.
pub const DEFAULT_Q_MAX: i32 = 64;

const LTNS_MAGIC: &[u8; 4] = b"LTNS";
const LTNS_VERSION: u8 = 1;

/// Real-valued latent coefficients, row-major, with shape metadata.
#[derive(Debug, Clone, PartialEq)]
pub struct LatentTensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl LatentTensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        check_shape(&shape, data.len())?;
        if let Some(pos) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!("latent value at flat index {pos}")));
        }
        Ok(LatentTensor { shape, data })
    }

    pub fn zeros(shape: Vec<usize>) -> Result<Self> {
        let n = shape.iter().product();
        Self::new(shape, vec![0.0; n])
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// Serializes into an `LTNS` container. `Dtype::F32` rounds each value to
    /// single precision; `Dtype::F64` is lossless.
    pub fn write_to<W: Write>(&self, w: &mut W, dtype: Dtype) -> Result<()> {
        write_header(w, dtype, &self.shape)?;
        match dtype {
            Dtype::F32 => {
                for v in &self.data {
                    w.write_all(&(*v as f32).to_le_bytes())?;
                }
            }
            Dtype::F64 => {
                for v in &self.data {
                    w.write_all(&v.to_le_bytes())?;
                }
            }
            Dtype::I32 => {
                return Err(Error::InvalidArgument(
                    "latent tensors are stored as float payloads".into(),
                ))
            }
        }
        Ok(())
    }

    pub fn read_from<R: Read>(r: &mut R) -> Result<Self> {
        let (dtype, shape) = read_header(r)?;
        let n = element_count(&shape)?;
        let data = match dtype {
            Dtype::F32 => read_payload::<4, _>(r, n)?
                .into_iter()
                .map(|b| f32::from_le_bytes(b) as f64)
                .collect(),
            Dtype::F64 => read_payload::<8, _>(r, n)?
                .into_iter()
                .map(f64::from_le_bytes)
                .collect(),
            Dtype::I32 => {
                return Err(Error::UnsupportedFormat(
                    "expected a float payload, found int32".into(),
                ))
            }
        };
        LatentTensor::new(shape, data)
    }

    pub fn save(&self, path: impl AsRef<Path>, dtype: Dtype) -> Result<()> {
        let mut buf = Vec::new();
        self.write_to(&mut buf, dtype)?;
        fs::write(path, buf)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let bytes = fs::read(path)?;
        let mut cursor = bytes.as_slice();
        let t = Self::read_from(&mut cursor)?;
        expect_consumed(cursor)?;
        Ok(t)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum QuantizerKind {
    Usq,
    Tcq,
}

impl QuantizerKind {
    pub fn code(self) -> u8 {
        match self {
            QuantizerKind::Usq => 0,
            QuantizerKind::Tcq => 1,
        }
    }

    pub fn from_code(code: u8) -> Result<Self> {
        match code {
            0 => Ok(QuantizerKind::Usq),
            1 => Ok(QuantizerKind::Tcq),
            c => Err(Error::Malformed(format!("unknown quantizer kind {c}"))),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            QuantizerKind::Usq => "usq",
            QuantizerKind::Tcq => "tcq",
        }
    }
}

impl std::str::FromStr for QuantizerKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "usq" => Ok(QuantizerKind::Usq),
            "tcq" => Ok(QuantizerKind::Tcq),
            other => Err(Error::InvalidArgument(format!("unknown quantizer '{other}'"))),
        }
    }
}

/// Integer quantization indices plus the information needed to dequantize them.
///
/// For TCQ the meaning of each index depends on the state sequence replayed
/// from the indices preceding it in scan order.
#[derive(Debug, Clone, PartialEq)]
pub struct QuantIndices {
    shape: Vec<usize>,
    indices: Vec<i32>,
    kind: QuantizerKind,
    delta: f64,
}

impl QuantIndices {
    pub fn new(shape: Vec<usize>, indices: Vec<i32>, kind: QuantizerKind, delta: f64) -> Result<Self> {
        check_shape(&shape, indices.len())?;
        if !(delta > 0.0 && delta.is_finite()) {
            return Err(Error::InvalidArgument(format!("step size must be positive, got {delta}")));
        }
        Ok(QuantIndices { shape, indices, kind, delta })
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn indices(&self) -> &[i32] {
        &self.indices
    }

    pub fn kind(&self) -> QuantizerKind {
        self.kind
    }

    pub fn delta(&self) -> f64 {
        self.delta
    }

    pub fn check_bound(&self, q_max: i32) -> Result<()> {
        match self.indices.iter().position(|q| q.abs() > q_max) {
            Some(pos) => Err(Error::OutOfRange(format!(
                "index {} at position {pos} exceeds q_max {q_max}",
                self.indices[pos]
            ))),
            None => Ok(()),
        }
    }

    /// Writes the index array as an int32 `LTNS` container. Kind and step size
    /// travel out of band (bitstream header or caller).
    pub fn write_to<W: Write>(&self, w: &mut W) -> Result<()> {
        write_header(w, Dtype::I32, &self.shape)?;
        for q in &self.indices {
            w.write_all(&q.to_le_bytes())?;
        }
        Ok(())
    }

    pub fn read_from<R: Read>(r: &mut R, kind: QuantizerKind, delta: f64) -> Result<Self> {
        let (dtype, shape) = read_header(r)?;
        if dtype != Dtype::I32 {
            return Err(Error::UnsupportedFormat("expected an int32 payload".into()));
        }
        let n = element_count(&shape)?;
        let indices = read_payload::<4, _>(r, n)?
            .into_iter()
            .map(i32::from_le_bytes)
            .collect();
        QuantIndices::new(shape, indices, kind, delta)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut buf = Vec::new();
        self.write_to(&mut buf)?;
        fs::write(path, buf)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>, kind: QuantizerKind, delta: f64) -> Result<Self> {
        let bytes = fs::read(path)?;
        let mut cursor = bytes.as_slice();
        let t = Self::read_from(&mut cursor, kind, delta)?;
        expect_consumed(cursor)?;
        Ok(t)
    }
}

/// Payload element type of an `LTNS` container.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Dtype {
    F32 = 0,
    I32 = 1,
    F64 = 2,
}

impl Dtype {
    fn from_code(code: u8) -> Result<Self> {
        match code {
            0 => Ok(Dtype::F32),
            1 => Ok(Dtype::I32),
            2 => Ok(Dtype::F64),
            c => Err(Error::UnsupportedFormat(format!("unknown LTNS dtype {c}"))),
        }
    }
}

fn check_shape(shape: &[usize], len: usize) -> Result<()> {
    if shape.contains(&0) {
        return Err(Error::Shape(format!("dimensions must be positive, got {shape:?}")));
    }
    let n: usize = shape.iter().product();
    if n != len {
        return Err(Error::Shape(format!(
            "shape {shape:?} holds {n} elements but {len} were given"
        )));
    }
    Ok(())
}

fn element_count(shape: &[usize]) -> Result<usize> {
    shape
        .iter()
        .try_fold(1usize, |acc, &d| acc.checked_mul(d))
        .ok_or_else(|| Error::Malformed(format!("shape {shape:?} overflows")))
}

fn write_header<W: Write>(w: &mut W, dtype: Dtype, shape: &[usize]) -> Result<()> {
    if shape.len() > u8::MAX as usize {
        return Err(Error::Shape("too many dimensions".into()));
    }
    w.write_all(LTNS_MAGIC)?;
    w.write_all(&[LTNS_VERSION, dtype as u8, shape.len() as u8])?;
    for &d in shape {
        let d = u32::try_from(d).map_err(|_| Error::Shape(format!("dimension {d} exceeds u32")))?;
        w.write_all(&d.to_le_bytes())?;
    }
    Ok(())
}

fn read_header<R: Read>(r: &mut R) -> Result<(Dtype, Vec<usize>)> {
    let mut magic = [0u8; 4];
    read_exact(r, &mut magic, "LTNS magic")?;
    if &magic != LTNS_MAGIC {
        return Err(Error::Malformed(format!("bad magic {:?}", String::from_utf8_lossy(&magic))));
    }
    let mut fixed = [0u8; 3];
    read_exact(r, &mut fixed, "LTNS header")?;
    if fixed[0] != LTNS_VERSION {
        return Err(Error::UnsupportedFormat(format!("LTNS version {}", fixed[0])));
    }
    let dtype = Dtype::from_code(fixed[1])?;
    let ndim = fixed[2] as usize;
    let mut shape = Vec::with_capacity(ndim);
    for _ in 0..ndim {
        let mut d = [0u8; 4];
        read_exact(r, &mut d, "LTNS dimensions")?;
        shape.push(u32::from_le_bytes(d) as usize);
    }
    if shape.contains(&0) {
        return Err(Error::Malformed(format!("zero dimension in shape {shape:?}")));
    }
    Ok((dtype, shape))
}

fn read_payload<const W: usize, R: Read>(r: &mut R, n: usize) -> Result<Vec<[u8; W]>> {
    let mut out = Vec::with_capacity(n.min(1 << 24));
    for i in 0..n {
        let mut b = [0u8; W];
        r.read_exact(&mut b).map_err(|_| {
            Error::Shape(format!("payload holds {i} values but the shape declares {n}"))
        })?;
        out.push(b);
    }
    Ok(out)
}

fn read_exact<R: Read>(r: &mut R, buf: &mut [u8], what: &str) -> Result<()> {
    r.read_exact(buf).map_err(|_| Error::Truncated(what.to_string()))
}

fn expect_consumed(rest: &[u8]) -> Result<()> {
    if rest.is_empty() {
        Ok(())
    } else {
        Err(Error::Shape(format!("{} trailing bytes after payload", rest.len())))
    }
}

/// A luma image (or a crop of one) with samples normalized to `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct ImagePatch {
    width: usize,
    height: usize,
    samples: Vec<f64>,
}

impl ImagePatch {
    pub fn new(width: usize, height: usize, samples: Vec<f64>) -> Result<Self> {
        if width == 0 || height == 0 {
            return Err(Error::Shape("image dimensions must be positive".into()));
        }
        if width * height != samples.len() {
            return Err(Error::Shape(format!(
                "{width}x{height} image needs {} samples, got {}",
                width * height,
                samples.len()
            )));
        }
        if let Some(v) = samples.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(Error::OutOfRange(format!("sample {v} outside [0, 1]")));
        }
        Ok(ImagePatch { width, height, samples })
    }

    pub fn from_bytes(width: usize, height: usize, pixels: &[u8]) -> Result<Self> {
        Self::new(width, height, pixels.iter().map(|&p| p as f64 / 255.0).collect())
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn samples(&self) -> &[f64] {
        &self.samples
    }

    pub fn pixel_count(&self) -> usize {
        self.samples.len()
    }

    /// Rounds samples back to 8-bit.
    pub fn to_bytes(&self) -> Vec<u8> {
        self.samples
            .iter()
            .map(|&s| (s * 255.0).round().clamp(0.0, 255.0) as u8)
            .collect()
    }

    /// Copies the `size`x`size` window whose top-left corner is `(x, y)`.
    pub fn window(&self, x: usize, y: usize, size: usize) -> Vec<f64> {
        let mut out = Vec::with_capacity(size * size);
        for row in y..y + size {
            let start = row * self.width + x;
            out.extend_from_slice(&self.samples[start..start + size]);
        }
        out
    }

    pub fn write_pgm(&self, path: impl AsRef<Path>) -> Result<()> {
        fs::write(path, self.to_pgm_bytes())?;
        Ok(())
    }

    pub fn to_pgm_bytes(&self) -> Vec<u8> {
        let mut out = format!("P5\n{} {}\n255\n", self.width, self.height).into_bytes();
        out.extend(self.to_bytes());
        out
    }
}

pub fn read_pgm(path: impl AsRef<Path>) -> Result<ImagePatch> {
    let bytes = fs::read(path)?;
    parse_pgm(&bytes)
}

/// Every `.pgm` file directly inside `dir`, sorted by file name.
pub fn read_pgm_dir(dir: impl AsRef<Path>) -> Result<Vec<(String, ImagePatch)>> {
    let mut paths: Vec<_> = fs::read_dir(dir)?
        .map(|e| e.map(|e| e.path()))
        .collect::<std::io::Result<Vec<_>>>()?
        .into_iter()
        .filter(|p| p.extension().is_some_and(|e| e.eq_ignore_ascii_case("pgm")))
        .collect();
    paths.sort();
    paths
        .into_iter()
        .map(|p| {
            let name = p.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
            read_pgm(&p).map(|img| (name, img))
        })
        .collect()
}

/// Parses an 8-bit binary PGM (`P5`) image.
pub fn parse_pgm(bytes: &[u8]) -> Result<ImagePatch> {
    if bytes.len() < 2 {
        return Err(Error::Truncated("PGM header".into()));
    }
    match &bytes[..2] {
        b"P5" => {}
        b"P1" | b"P2" | b"P3" | b"P4" | b"P6" | b"P7" => {
            return Err(Error::UnsupportedFormat(format!(
                "netpbm variant {} (only binary P5 greyscale is accepted)",
                String::from_utf8_lossy(&bytes[..2])
            )))
        }
        _ => return Err(Error::Malformed("missing PGM magic".into())),
    }
    let mut pos = 2;
    let mut fields = [0usize; 3];
    for field in fields.iter_mut() {
        *field = header_number(bytes, &mut pos)?;
    }
    let [width, height, maxval] = fields;
    if maxval != 255 {
        return Err(Error::UnsupportedFormat(format!("maxval {maxval} (only 255 is accepted)")));
    }
    if width == 0 || height == 0 {
        return Err(Error::Malformed("zero image dimension".into()));
    }
    // exactly one whitespace byte separates the header from the raster
    match bytes.get(pos) {
        Some(b) if b.is_ascii_whitespace() => pos += 1,
        _ => return Err(Error::Malformed("missing whitespace after maxval".into())),
    }
    let need = width * height;
    let raster = &bytes[pos..];
    if raster.len() < need {
        return Err(Error::Truncated(format!(
            "PGM raster has {} of {need} bytes",
            raster.len()
        )));
    }
    ImagePatch::from_bytes(width, height, &raster[..need])
}

fn header_number(bytes: &[u8], pos: &mut usize) -> Result<usize> {
    loop {
        match bytes.get(*pos) {
            Some(b'#') => {
                while let Some(&b) = bytes.get(*pos) {
                    *pos += 1;
                    if b == b'\n' {
                        break;
                    }
                }
            }
            Some(b) if b.is_ascii_whitespace() => *pos += 1,
            Some(_) => break,
            None => return Err(Error::Truncated("PGM header".into())),
        }
    }
    let start = *pos;
    while bytes.get(*pos).is_some_and(|b| b.is_ascii_digit()) {
        *pos += 1;
    }
    if start == *pos {
        return Err(Error::Malformed("expected a number in PGM header".into()));
    }
    std::str::from_utf8(&bytes[start..*pos])
        .ok()
        .and_then(|s| s.parse().ok())
        .ok_or_else(|| Error::Malformed("header number out of range".into()))
}

/// All `size`x`size` windows at `stride` offsets in row-major scan order.
/// Windows that would cross the right or bottom border are dropped.
pub fn extract_patches(image: &ImagePatch, size: usize, stride: usize) -> Result<Vec<ImagePatch>> {
    if stride == 0 || size == 0 {
        return Err(Error::InvalidArgument("patch size and stride must be positive".into()));
    }
    if size > image.width || size > image.height {
        return Err(Error::InvalidArgument(format!(
            "patch size {size} exceeds image dimensions {}x{}",
            image.width, image.height
        )));
    }
    let nx = (image.width - size) / stride + 1;
    let ny = (image.height - size) / stride + 1;
    let mut out = Vec::with_capacity(nx * ny);
    for py in 0..ny {
        for px in 0..nx {
            let samples = image.window(px * stride, py * stride, size);
            out.push(ImagePatch { width: size, height: size, samples });
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn pgm(w: usize, h: usize, px: &[u8]) -> Vec<u8> {
        let mut v = format!("P5\n{w} {h}\n255\n").into_bytes();
        v.extend_from_slice(px);
        v
    }

    #[test]
    fn pgm_single_white_pixel() {
        let img = parse_pgm(&pgm(1, 1, &[255])).unwrap();
        assert_eq!(img.samples(), &[1.0]);
    }

    #[test]
    fn pgm_two_pixels() {
        let img = parse_pgm(&pgm(2, 1, &[0, 128])).unwrap();
        assert_eq!(img.samples(), &[0.0, 128.0 / 255.0]);
    }

    #[test]
    fn pgm_rejects_color() {
        let mut bytes = b"P6\n1 1\n255\n".to_vec();
        bytes.extend_from_slice(&[1, 2, 3]);
        let err = parse_pgm(&bytes).unwrap_err();
        assert!(err.to_string().contains("unsupported format"), "{err}");
    }

    #[test]
    fn pgm_header_errors() {
        assert!(matches!(parse_pgm(b"P5\n2 2\n65535\n\0\0"), Err(Error::UnsupportedFormat(_))));
        assert!(matches!(parse_pgm(&pgm(2, 2, &[1, 2, 3])), Err(Error::Truncated(_))));
        assert!(matches!(parse_pgm(b"P5\nx 2\n255\n"), Err(Error::Malformed(_))));
        assert!(matches!(parse_pgm(b"XY"), Err(Error::Malformed(_))));
    }

    #[test]
    fn pgm_comments_in_header() {
        let img = parse_pgm(b"P5 # made by hand\n2 # width\n1\n255\n\x00\xff").unwrap();
        assert_eq!(img.width(), 2);
        assert_eq!(img.samples(), &[0.0, 1.0]);
    }

    #[test]
    fn pgm_roundtrip_bytes() {
        let img = ImagePatch::from_bytes(3, 2, &[0, 10, 20, 30, 40, 255]).unwrap();
        assert_eq!(parse_pgm(&img.to_pgm_bytes()).unwrap(), img);
    }

    fn ramp(w: usize, h: usize) -> ImagePatch {
        let px: Vec<u8> = (0..w * h).map(|i| (i % 256) as u8).collect();
        ImagePatch::from_bytes(w, h, &px).unwrap()
    }

    #[test]
    fn patch_identity() {
        let img = ramp(8, 8);
        let p = extract_patches(&img, 8, 8).unwrap();
        assert_eq!(p.len(), 1);
        assert_eq!(p[0], img);
    }

    #[test]
    fn patch_counts() {
        assert_eq!(extract_patches(&ramp(16, 8), 8, 8).unwrap().len(), 2);
        assert_eq!(extract_patches(&ramp(17, 8), 8, 8).unwrap().len(), 2);
        assert!(extract_patches(&ramp(7, 8), 8, 8).is_err());
    }

    #[test]
    fn patch_contents_row_major() {
        let img = ramp(16, 16);
        let p = extract_patches(&img, 8, 8).unwrap();
        // second patch starts at column 8 of row 0
        assert_eq!(p[1].samples()[0], img.samples()[8]);
        // third patch starts at row 8
        assert_eq!(p[2].samples()[0], img.samples()[8 * 16]);
    }

    #[test]
    fn ltns_bad_magic_and_short_payload() {
        let mut bytes = b"XXXX".to_vec();
        bytes.extend_from_slice(&[1, 0, 1, 1, 0, 0, 0, 0, 0, 0, 0]);
        assert!(matches!(LatentTensor::read_from(&mut bytes.as_slice()), Err(Error::Malformed(_))));

        let mut bytes = b"LTNS".to_vec();
        bytes.extend_from_slice(&[1, 0, 2]);
        bytes.extend_from_slice(&2u32.to_le_bytes());
        bytes.extend_from_slice(&3u32.to_le_bytes());
        for v in 0..5 {
            bytes.extend_from_slice(&(v as f32).to_le_bytes());
        }
        let err = LatentTensor::read_from(&mut bytes.as_slice()).unwrap_err();
        assert!(matches!(err, Error::Shape(_)), "{err}");
    }

    #[test]
    fn ltns_version_mismatch() {
        let t = LatentTensor::new(vec![1], vec![1.0]).unwrap();
        let mut buf = Vec::new();
        t.write_to(&mut buf, Dtype::F32).unwrap();
        buf[4] = 7;
        assert!(matches!(LatentTensor::read_from(&mut buf.as_slice()), Err(Error::UnsupportedFormat(_))));
    }

    #[test]
    fn ltns_layout_is_bit_exact() {
        let t = LatentTensor::new(vec![2], vec![1.0, -2.0]).unwrap();
        let mut buf = Vec::new();
        t.write_to(&mut buf, Dtype::F32).unwrap();
        let mut expect = b"LTNS".to_vec();
        expect.extend_from_slice(&[1, 0, 1]);
        expect.extend_from_slice(&2u32.to_le_bytes());
        expect.extend_from_slice(&1.0f32.to_le_bytes());
        expect.extend_from_slice(&(-2.0f32).to_le_bytes());
        assert_eq!(buf, expect);
    }

    #[test]
    fn indices_file_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("q.ltns");
        let q = QuantIndices::new(vec![2, 2], vec![1, -3, 0, 64], QuantizerKind::Tcq, 0.5).unwrap();
        q.save(&path).unwrap();
        assert_eq!(QuantIndices::load(&path, QuantizerKind::Tcq, 0.5).unwrap(), q);
        assert!(q.check_bound(63).is_err());
        assert!(q.check_bound(64).is_ok());
    }

    #[test]
    fn rejects_non_finite_latents() {
        assert!(LatentTensor::new(vec![2], vec![1.0, f64::NAN]).is_err());
        assert!(LatentTensor::new(vec![2, 2], vec![1.0; 3]).is_err());
    }

    fn shape_and_data() -> impl Strategy<Value = (Vec<usize>, usize)> {
        prop::collection::vec(1usize..5, 1..4).prop_map(|s| {
            let n = s.iter().product();
            (s, n)
        })
    }

    proptest! {
        #[test]
        fn ltns_roundtrip_f64((shape, n) in shape_and_data(), seed in any::<u64>()) {
            let data: Vec<f64> = (0..n)
                .map(|i| f64::from_bits(seed.wrapping_mul(i as u64 + 1) & 0x3fff_ffff_ffff_ffff) - 1.0)
                .map(|v| if v.is_finite() { v } else { 0.5 })
                .collect();
            let t = LatentTensor::new(shape, data).unwrap();
            let mut buf = Vec::new();
            t.write_to(&mut buf, Dtype::F64).unwrap();
            let back = LatentTensor::read_from(&mut buf.as_slice()).unwrap();
            prop_assert_eq!(back.shape(), t.shape());
            for (a, b) in back.data().iter().zip(t.data()) {
                prop_assert_eq!(a.to_bits(), b.to_bits());
            }
        }

        #[test]
        fn ltns_roundtrip_f32((shape, n) in shape_and_data(), vals in prop::collection::vec(-1e6f32..1e6, 64)) {
            let data: Vec<f64> = (0..n).map(|i| vals[i % vals.len()] as f64).collect();
            let t = LatentTensor::new(shape, data).unwrap();
            let mut buf = Vec::new();
            t.write_to(&mut buf, Dtype::F32).unwrap();
            prop_assert_eq!(LatentTensor::read_from(&mut buf.as_slice()).unwrap(), t);
        }

        #[test]
        fn patch_count_formula(w in 1usize..40, h in 1usize..40, size in 1usize..10, stride in 1usize..6) {
            prop_assume!(size <= w && size <= h);
            let img = ImagePatch::new(w, h, vec![0.5; w * h]).unwrap();
            let n = extract_patches(&img, size, stride).unwrap().len();
            prop_assert_eq!(n, ((w - size) / stride + 1) * ((h - size) / stride + 1));
        }
    }
}
