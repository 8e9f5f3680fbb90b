// Copyright 2026 The PACE Authors.
// SPDX-License-Identifier: Apache-2.0

//! Binary codes stream: `"PACE"`, then little-endian `u32` version, frame
//! count and stage count, then `frames × stages` `u16` indices.

use std::io::{Read, Write};

use super::AudioCodes;
use crate::error::{PaceError, Result};

pub const CODES_MAGIC: &[u8; 4] = b"PACE";
pub const CODES_VERSION: u32 = 1;

pub fn write_codes<W: Write>(mut w: W, codes: &AudioCodes) -> Result<()> {
    w.write_all(CODES_MAGIC)?;
    w.write_all(&CODES_VERSION.to_le_bytes())?;
    w.write_all(&(codes.frames() as u32).to_le_bytes())?;
    w.write_all(&(codes.stages as u32).to_le_bytes())?;
    for row in &codes.codes {
        if row.len() != codes.stages {
            return Err(PaceError::contract(format!(
                "code row has {} entries, header says {}",
                row.len(),
                codes.stages
            )));
        }
        for &c in row {
            w.write_all(&c.to_le_bytes())?;
        }
    }
    w.flush()?;
    Ok(())
}

fn read_u32<R: Read>(r: &mut R) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)
        .map_err(|e| PaceError::Format(format!("truncated codes header: {e}")))?;
    Ok(u32::from_le_bytes(b))
}

pub fn read_codes<R: Read>(mut r: R) -> Result<AudioCodes> {
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)
        .map_err(|e| PaceError::Format(format!("truncated codes header: {e}")))?;
    if &magic != CODES_MAGIC {
        return Err(PaceError::Format(format!("bad codes magic {magic:?}")));
    }
    let version = read_u32(&mut r)?;
    if version != CODES_VERSION {
        return Err(PaceError::Format(format!("unsupported codes version {version}")));
    }
    let frames = read_u32(&mut r)? as usize;
    let stages = read_u32(&mut r)? as usize;
    let mut body = vec![0u8; frames * stages * 2];
    r.read_exact(&mut body)
        .map_err(|e| PaceError::Format(format!("codes body shorter than {frames}×{stages}: {e}")))?;
    let flat: Vec<u16> = body.chunks_exact(2).map(|b| u16::from_le_bytes([b[0], b[1]])).collect();
    let codes = if stages == 0 {
        vec![Vec::new(); frames]
    } else {
        flat.chunks(stages).map(<[u16]>::to_vec).collect()
    };
    Ok(AudioCodes { stages, codes })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_and_layout() {
        let codes = AudioCodes {
            stages: 2,
            codes: vec![vec![1, 1023], vec![0, 7]],
        };
        let mut buf = Vec::new();
        write_codes(&mut buf, &codes).unwrap();
        assert_eq!(&buf[..4], b"PACE");
        assert_eq!(&buf[4..16], &[1, 0, 0, 0, 2, 0, 0, 0, 2, 0, 0, 0]);
        assert_eq!(&buf[16..18], &[1, 0]);
        assert_eq!(&buf[18..20], &[0xff, 0x03]);
        assert_eq!(read_codes(buf.as_slice()).unwrap(), codes);
    }

    #[test]
    fn corrupt_streams_are_format_errors() {
        assert!(matches!(read_codes(&b"NOPE"[..]), Err(PaceError::Format(_))));
        let mut buf = Vec::new();
        write_codes(&mut buf, &AudioCodes { stages: 8, codes: vec![vec![0; 8]; 3] }).unwrap();
        buf.truncate(buf.len() - 1);
        assert!(matches!(read_codes(buf.as_slice()), Err(PaceError::Format(_))));
    }
}
