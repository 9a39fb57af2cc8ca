//! Container format for a coded image: header, hyper payload, latent payload.

use std::io::{Cursor, Read};

use crate::error::{Error, Result};
use crate::tensor::QuantizerKind;

pub const MAGIC: &[u8; 4] = b"TCQB";
pub const VERSION: u8 = 1;
const MAX_NDIM: usize = 8;

#[derive(Debug, Clone, PartialEq)]
pub struct Bitstream {
    pub kind: QuantizerKind,
    pub delta: f32,
    pub latent_shape: Vec<usize>,
    pub hyper_shape: Vec<usize>,
    pub hyper_payload: Vec<u8>,
    pub latent_payload: Vec<u8>,
}

fn put_shape(out: &mut Vec<u8>, shape: &[usize]) -> Result<()> {
    if shape.len() > MAX_NDIM {
        return Err(Error::Shape(format!("ndim {} too large", shape.len())));
    }
    out.push(shape.len() as u8);
    for &d in shape {
        let d = u32::try_from(d).map_err(|_| Error::TooLarge(format!("dimension {d}")))?;
        out.extend_from_slice(&d.to_le_bytes());
    }
    Ok(())
}

fn read_exact<const N: usize>(r: &mut Cursor<&[u8]>, what: &str) -> Result<[u8; N]> {
    let mut buf = [0u8; N];
    r.read_exact(&mut buf).map_err(|_| Error::Truncated(what.to_string()))?;
    Ok(buf)
}

fn get_shape(r: &mut Cursor<&[u8]>, what: &str) -> Result<Vec<usize>> {
    let [ndim] = read_exact::<1>(r, what)?;
    if ndim as usize > MAX_NDIM {
        return Err(Error::Malformed(format!("{what}: ndim {ndim}")));
    }
    (0..ndim)
        .map(|_| Ok(u32::from_le_bytes(read_exact::<4>(r, what)?) as usize))
        .collect()
}

impl Bitstream {
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut out = Vec::with_capacity(32 + self.hyper_payload.len() + self.latent_payload.len());
        out.extend_from_slice(MAGIC);
        out.push(VERSION);
        out.push(self.kind.code());
        out.extend_from_slice(&self.delta.to_le_bytes());
        put_shape(&mut out, &self.latent_shape)?;
        put_shape(&mut out, &self.hyper_shape)?;
        let n = u32::try_from(self.hyper_payload.len()).map_err(|_| Error::TooLarge("hyper payload".into()))?;
        out.extend_from_slice(&n.to_le_bytes());
        out.extend_from_slice(&self.hyper_payload);
        out.extend_from_slice(&self.latent_payload);
        Ok(out)
    }

    pub fn parse(bytes: &[u8]) -> Result<Self> {
        let mut r = Cursor::new(bytes);
        let magic = read_exact::<4>(&mut r, "magic")?;
        if &magic != MAGIC {
            return Err(Error::Malformed("not a TCQB stream".into()));
        }
        let [version] = read_exact::<1>(&mut r, "version")?;
        if version != VERSION {
            return Err(Error::UnsupportedFormat(format!("bitstream version {version}")));
        }
        let [kind] = read_exact::<1>(&mut r, "kind")?;
        let kind = QuantizerKind::from_code(kind)?;
        let delta = f32::from_le_bytes(read_exact::<4>(&mut r, "delta")?);
        if !(delta.is_finite() && delta > 0.0) {
            return Err(Error::Malformed(format!("step size {delta}")));
        }
        let latent_shape = get_shape(&mut r, "latent shape")?;
        let hyper_shape = get_shape(&mut r, "hyper shape")?;
        let n = u32::from_le_bytes(read_exact::<4>(&mut r, "hyper length")?) as usize;
        let pos = r.position() as usize;
        let rest = &bytes[pos..];
        if rest.len() < n {
            return Err(Error::Truncated(format!("hyper payload: {} of {n} bytes", rest.len())));
        }
        Ok(Bitstream {
            kind,
            delta,
            latent_shape,
            hyper_shape,
            hyper_payload: rest[..n].to_vec(),
            latent_payload: rest[n..].to_vec(),
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> Bitstream {
        Bitstream {
            kind: QuantizerKind::Tcq,
            delta: 1.0,
            latent_shape: vec![32, 4, 6],
            hyper_shape: vec![8, 4, 6],
            hyper_payload: vec![1, 2, 3],
            latent_payload: vec![9; 17],
        }
    }

    #[test]
    fn roundtrip() {
        let b = sample();
        let bytes = b.to_bytes().unwrap();
        assert_eq!(&bytes[..4], b"TCQB");
        assert_eq!(Bitstream::parse(&bytes).unwrap(), b);
    }

    #[test]
    fn header_truncation() {
        let bytes = sample().to_bytes().unwrap();
        for cut in [0, 3, 5, 9, 12, 30] {
            assert!(Bitstream::parse(&bytes[..cut]).is_err(), "cut {cut}");
        }
    }

    #[test]
    fn hyper_truncation() {
        let b = Bitstream { latent_payload: vec![], ..sample() };
        let bytes = b.to_bytes().unwrap();
        assert!(matches!(Bitstream::parse(&bytes[..bytes.len() - 1]), Err(Error::Truncated(_))));
    }

    #[test]
    fn bad_magic_and_version() {
        let mut bytes = sample().to_bytes().unwrap();
        bytes[4] = 7;
        assert!(matches!(Bitstream::parse(&bytes), Err(Error::UnsupportedFormat(_))));
        bytes[0] = b'X';
        assert!(matches!(Bitstream::parse(&bytes), Err(Error::Malformed(_))));
    }
}
