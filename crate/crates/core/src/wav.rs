//! 16-bit PCM mono WAV at 16 kHz; anything else is rejected.

use std::path::Path;

use hound::{SampleFormat, WavSpec};

use crate::dsp::{Waveform, SAMPLE_RATE};
use crate::error::{Error, Result};

const SPEC: WavSpec = WavSpec {
    channels: 1,
    sample_rate: SAMPLE_RATE,
    bits_per_sample: 16,
    sample_format: SampleFormat::Int,
};

pub fn read_wav(path: impl AsRef<Path>) -> Result<Waveform> {
    let path = path.as_ref();
    let reader = hound::WavReader::open(path).map_err(|source| Error::Wav {
        path: path.to_path_buf(),
        source,
    })?;
    let spec = reader.spec();
    let reject = |reason: String| Error::AudioFormat {
        path: path.to_path_buf(),
        reason,
    };
    if spec.channels != 1 {
        return Err(reject(format!("{} channels, expected mono", spec.channels)));
    }
    if spec.sample_rate != SAMPLE_RATE {
        return Err(reject(format!(
            "{} Hz, expected {SAMPLE_RATE} Hz (resampling is not supported)",
            spec.sample_rate
        )));
    }
    if spec.sample_format != SampleFormat::Int || spec.bits_per_sample != 16 {
        return Err(reject(format!(
            "{}-bit {:?}, expected 16-bit PCM",
            spec.bits_per_sample, spec.sample_format
        )));
    }
    let samples = reader
        .into_samples::<i16>()
        .map(|s| s.map(|v| v as f64 / 32768.0))
        .collect::<std::result::Result<Vec<_>, _>>()
        .map_err(|source| Error::Wav {
            path: path.to_path_buf(),
            source,
        })?;
    Ok(Waveform::new(samples))
}

/// Writes with round-to-nearest quantization; samples outside [-1, 1) clip.
pub fn write_wav(path: impl AsRef<Path>, wave: &Waveform) -> Result<()> {
    let path = path.as_ref();
    let wrap = |source| Error::Wav {
        path: path.to_path_buf(),
        source,
    };
    let mut writer = hound::WavWriter::create(path, SPEC).map_err(wrap)?;
    for &s in &wave.samples {
        let q = (s * 32768.0).round().clamp(-32768.0, 32767.0) as i16;
        writer.write_sample(q).map_err(wrap)?;
    }
    writer.finalize().map_err(wrap)
}

/// Rounds samples to the 16-bit grid exactly as `write_wav` would.
pub fn quantize(wave: &Waveform) -> Waveform {
    Waveform::new(
        wave.samples
            .iter()
            .map(|&s| (s * 32768.0).round().clamp(-32768.0, 32767.0) / 32768.0)
            .collect(),
    )
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn write_read_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("a.wav");
        let wave = Waveform::new(vec![0.0, 0.25, -0.5, 0.999, -1.0]);
        write_wav(&path, &wave).unwrap();
        let back = read_wav(&path).unwrap();
        assert_eq!(back, quantize(&wave));
        assert_eq!(back.samples[2], -0.5);
    }

    #[test]
    fn rejects_stereo_and_wrong_rate() {
        let dir = tempfile::tempdir().unwrap();
        for (channels, rate, bits) in [(2u16, 16_000u32, 16u16), (1, 8000, 16), (1, 16_000, 24)] {
            let path = dir.path().join(format!("{channels}_{rate}_{bits}.wav"));
            let spec = WavSpec {
                channels,
                sample_rate: rate,
                bits_per_sample: bits,
                sample_format: SampleFormat::Int,
            };
            let mut w = hound::WavWriter::create(&path, spec).unwrap();
            for _ in 0..(4 * channels) {
                w.write_sample(0i32).unwrap();
            }
            w.finalize().unwrap();
            assert!(matches!(read_wav(&path), Err(Error::AudioFormat { .. })));
        }
    }
}
