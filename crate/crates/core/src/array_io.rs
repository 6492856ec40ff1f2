//! Portable array container.
//!
//! ```text
//! offset  size      field
//! 0       8         magic "GEOARR01"
//! 8       1         dtype tag: 1 = f32, 2 = f64
//! 9       1         rank r (0..=8)
//! 10      8·r       dimensions, u64 little-endian
//! 10+8r   n·size    elements, row-major, little-endian IEEE-754
//! ```
//!
//! The container is self-delimiting, so several can be concatenated.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::{DType, Real, Tensor};

pub const MAGIC: &[u8; 8] = b"GEOARR01";
pub const MAX_RANK: usize = 8;

pub fn encode<T: Real>(t: &Tensor<T>) -> Vec<u8> {
    let mut out = Vec::with_capacity(10 + 8 * t.rank() + t.numel() * T::DTYPE.size());
    encode_into(t, &mut out);
    out
}

pub fn encode_into<T: Real>(t: &Tensor<T>, out: &mut Vec<u8>) {
    assert!(
        t.rank() <= MAX_RANK,
        "rank {} exceeds the container limit",
        t.rank()
    );
    out.extend_from_slice(MAGIC);
    out.push(T::DTYPE.tag());
    out.push(t.rank() as u8);
    for &d in t.shape() {
        out.extend_from_slice(&(d as u64).to_le_bytes());
    }
    for &v in t.data() {
        v.write_le(out);
    }
}

/// Decodes one container from the front of `bytes`, converting to `T`.
/// Returns the tensor and the number of bytes consumed.
pub fn decode_prefix<T: Real>(bytes: &[u8]) -> std::result::Result<(Tensor<T>, usize), String> {
    if bytes.len() < 10 {
        return Err("truncated header".into());
    }
    if &bytes[..8] != MAGIC {
        return Err("bad magic".into());
    }
    let dtype =
        DType::from_tag(bytes[8]).ok_or_else(|| format!("unknown dtype tag {}", bytes[8]))?;
    let rank = bytes[9] as usize;
    if rank > MAX_RANK {
        return Err(format!("rank {rank} exceeds {MAX_RANK}"));
    }
    let mut pos = 10;
    if bytes.len() < pos + 8 * rank {
        return Err("truncated dimensions".into());
    }
    let mut shape = Vec::with_capacity(rank);
    for _ in 0..rank {
        let d = u64::from_le_bytes(bytes[pos..pos + 8].try_into().expect("8 bytes"));
        shape.push(usize::try_from(d).map_err(|_| "dimension overflows usize".to_string())?);
        pos += 8;
    }
    let numel = shape
        .iter()
        .try_fold(1usize, |acc, &d| acc.checked_mul(d))
        .ok_or("element count overflows")?;
    let width = dtype.size();
    let need = numel.checked_mul(width).ok_or("payload size overflows")?;
    if bytes.len() < pos + need {
        return Err(format!(
            "payload truncated: need {need} bytes, have {}",
            bytes.len() - pos
        ));
    }
    let payload = &bytes[pos..pos + need];
    let data: Vec<T> = match dtype {
        DType::F32 => payload
            .chunks_exact(4)
            .map(|c| T::from_f64(f32::read_le(c) as f64))
            .collect(),
        DType::F64 => payload
            .chunks_exact(8)
            .map(|c| T::from_f64(f64::read_le(c)))
            .collect(),
    };
    let t = Tensor::new(shape, data).map_err(|e| e.to_string())?;
    Ok((t, pos + need))
}

pub fn decode<T: Real>(bytes: &[u8]) -> std::result::Result<Tensor<T>, String> {
    let (t, used) = decode_prefix(bytes)?;
    if used != bytes.len() {
        return Err(format!("{} trailing bytes", bytes.len() - used));
    }
    Ok(t)
}

pub fn write_array<T: Real>(path: &Path, t: &Tensor<T>) -> Result<()> {
    fs::write(path, encode(t)).map_err(|e| Error::io(path, e))
}

pub fn read_array<T: Real>(path: &Path) -> Result<Tensor<T>> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes).map_err(|reason| Error::Format {
        path: path.to_path_buf(),
        reason,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn header_layout() {
        let t = Tensor::<f32>::new(vec![2, 1], vec![1.0, -2.0]).unwrap();
        let b = encode(&t);
        assert_eq!(&b[..8], b"GEOARR01");
        assert_eq!(b[8], 1);
        assert_eq!(b[9], 2);
        assert_eq!(&b[10..18], &2u64.to_le_bytes());
        assert_eq!(&b[18..26], &1u64.to_le_bytes());
        assert_eq!(&b[26..30], &1.0f32.to_le_bytes());
        assert_eq!(b.len(), 34);
    }

    #[test]
    fn rejects_corruption() {
        let t = Tensor::<f64>::zeros(vec![3]);
        let mut b = encode(&t);
        assert!(decode::<f64>(&b[..b.len() - 1]).is_err());
        b[0] = b'X';
        assert!(decode::<f64>(&b).is_err());
    }

    proptest! {
        #[test]
        fn round_trip_is_bit_exact(dims in proptest::collection::vec(1usize..5, 0..4), seed in any::<u64>()) {
            let numel: usize = dims.iter().product();
            let data: Vec<f32> = (0..numel)
                .map(|i| f32::from_bits((seed as u32).wrapping_add((i as u32).wrapping_mul(2654435761)) & 0x7f7f_ffff))
                .collect();
            let t = Tensor::new(dims.clone(), data).unwrap();
            let back: Tensor<f32> = decode(&encode(&t)).unwrap();
            prop_assert_eq!(back.shape(), t.shape());
            let same = back.data().iter().zip(t.data()).all(|(a, b)| a.to_bits() == b.to_bits());
            prop_assert!(same);
        }
    }
}
