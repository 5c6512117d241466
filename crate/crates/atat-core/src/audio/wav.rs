//! Minimal RIFF/WAVE reader and writer for PCM-16 mono files.

use std::fs;
use std::io::Write;
use std::path::Path;

use super::{AudioError, Waveform};

fn read_u16(b: &[u8], at: usize) -> Result<u16, AudioError> {
    b.get(at..at + 2)
        .map(|s| u16::from_le_bytes([s[0], s[1]]))
        .ok_or_else(|| AudioError::MalformedWav(format!("truncated at byte {at}")))
}

fn read_u32(b: &[u8], at: usize) -> Result<u32, AudioError> {
    b.get(at..at + 4)
        .map(|s| u32::from_le_bytes([s[0], s[1], s[2], s[3]]))
        .ok_or_else(|| AudioError::MalformedWav(format!("truncated at byte {at}")))
}

/// Decode a RIFF/WAVE PCM-16 mono file. Chunks other than `fmt ` and `data`
/// are skipped.
pub fn load_wav(path: &Path) -> Result<Waveform, AudioError> {
    let bytes = fs::read(path)?;
    parse_wav(&bytes)
}

pub(crate) fn parse_wav(bytes: &[u8]) -> Result<Waveform, AudioError> {
    if bytes.len() < 12 || &bytes[0..4] != b"RIFF" || &bytes[8..12] != b"WAVE" {
        return Err(AudioError::MalformedWav("missing RIFF/WAVE header".into()));
    }

    let mut pos = 12;
    let mut fmt: Option<(u16, u16, u32, u16)> = None; // (format, channels, rate, bits)
    let mut data: Option<&[u8]> = None;

    while pos + 8 <= bytes.len() {
        let id = &bytes[pos..pos + 4];
        let size = read_u32(bytes, pos + 4)? as usize;
        let body_start = pos + 8;
        if body_start + size > bytes.len() {
            return Err(AudioError::MalformedWav(format!(
                "chunk {:?} overruns file",
                String::from_utf8_lossy(id)
            )));
        }
        match id {
            b"fmt " => {
                if size < 16 {
                    return Err(AudioError::MalformedWav("fmt chunk too small".into()));
                }
                fmt = Some((
                    read_u16(bytes, body_start)?,
                    read_u16(bytes, body_start + 2)?,
                    read_u32(bytes, body_start + 4)?,
                    read_u16(bytes, body_start + 14)?,
                ));
            }
            b"data" => data = Some(&bytes[body_start..body_start + size]),
            _ => {}
        }
        // Chunks are word-aligned; odd sizes carry a pad byte.
        pos = body_start + size + (size & 1);
    }

    let (format, channels, rate, bits) =
        fmt.ok_or_else(|| AudioError::MalformedWav("no fmt chunk".into()))?;
    if format != 1 || bits != 16 {
        return Err(AudioError::UnsupportedFormat(format!(
            "need PCM-16, got format {format} with {bits} bits"
        )));
    }
    if channels != 1 {
        return Err(AudioError::UnsupportedFormat(format!("need mono, got {channels} channels")));
    }
    let data = data.ok_or_else(|| AudioError::MalformedWav("no data chunk".into()))?;
    if data.len() % 2 != 0 {
        return Err(AudioError::MalformedWav("data chunk has odd byte length".into()));
    }
    let samples: Vec<i16> = data
        .chunks_exact(2)
        .map(|c| i16::from_le_bytes([c[0], c[1]]))
        .collect();
    Waveform::new(samples, rate)
}

/// Write a PCM-16 mono WAV file.
pub fn write_wav(path: &Path, w: &Waveform) -> Result<(), AudioError> {
    let mut out = Vec::with_capacity(44 + w.samples.len() * 2);
    let data_len = (w.samples.len() * 2) as u32;
    out.extend_from_slice(b"RIFF");
    out.extend_from_slice(&(36 + data_len).to_le_bytes());
    out.extend_from_slice(b"WAVE");
    out.extend_from_slice(b"fmt ");
    out.extend_from_slice(&16u32.to_le_bytes());
    out.extend_from_slice(&1u16.to_le_bytes()); // PCM
    out.extend_from_slice(&1u16.to_le_bytes()); // mono
    out.extend_from_slice(&w.sample_rate.to_le_bytes());
    out.extend_from_slice(&(w.sample_rate * 2).to_le_bytes()); // byte rate
    out.extend_from_slice(&2u16.to_le_bytes()); // block align
    out.extend_from_slice(&16u16.to_le_bytes()); // bits
    out.extend_from_slice(b"data");
    out.extend_from_slice(&data_len.to_le_bytes());
    for s in &w.samples {
        out.extend_from_slice(&s.to_le_bytes());
    }
    let mut f = fs::File::create(path)?;
    f.write_all(&out)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn wav_bytes(samples: &[i16], rate: u32) -> Vec<u8> {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("t.wav");
        write_wav(&p, &Waveform { samples: samples.to_vec(), sample_rate: rate }).unwrap();
        fs::read(&p).unwrap()
    }

    #[test]
    fn one_second_of_silence_decodes_to_zero_samples() {
        let bytes = wav_bytes(&vec![0i16; 16_000], 16_000);
        let w = parse_wav(&bytes).unwrap();
        assert_eq!(w.sample_rate, 16_000);
        assert_eq!(w.samples.len(), 16_000);
        assert!(w.samples.iter().all(|&s| s == 0));
    }

    #[test]
    fn twos_complement_decode() {
        // 44-byte header + two samples 0x0001 and 0xFFFF.
        let bytes = wav_bytes(&[1, -1], 16_000);
        assert_eq!(bytes.len(), 48);
        let w = parse_wav(&bytes).unwrap();
        assert_eq!(w.samples, vec![1, -1]);
    }

    #[test]
    fn truncated_header_is_malformed() {
        let bytes = wav_bytes(&[1, 2, 3], 16_000);
        let err = parse_wav(&bytes[..20]).unwrap_err();
        assert!(matches!(err, AudioError::MalformedWav(_)));
    }

    #[test]
    fn stereo_is_unsupported() {
        let mut bytes = wav_bytes(&[1, 2, 3, 4], 16_000);
        bytes[22] = 2; // channel count lives at offset 22
        let err = parse_wav(&bytes).unwrap_err();
        assert!(matches!(err, AudioError::UnsupportedFormat(_)));
    }

    #[test]
    fn round_trip_through_disk() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("rt.wav");
        let w = Waveform::new(vec![0, 100, -100, i16::MAX, i16::MIN], 16_000).unwrap();
        write_wav(&p, &w).unwrap();
        assert_eq!(load_wav(&p).unwrap(), w);
    }
}
