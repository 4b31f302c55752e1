//! WAV decoding, down-mixing and resampling.

use std::fs;
use std::io::{self, Write};
use std::path::{Path, PathBuf};

use thiserror::Error;

pub const MIN_SAMPLE_RATE: u32 = 8_000;
pub const MAX_SAMPLE_RATE: u32 = 192_000;

const FORMAT_PCM: u16 = 0x0001;
const FORMAT_IEEE_FLOAT: u16 = 0x0003;
const FORMAT_EXTENSIBLE: u16 = 0xFFFE;

/// Taps on each side of the resampling kernel.
pub const RESAMPLE_HALF_TAPS: usize = 64;
/// Low-pass cutoff as a fraction of the lower of the two rates.
pub const RESAMPLE_CUTOFF: f64 = 0.45;

#[derive(Debug, Error)]
pub enum AudioError {
    #[error("cannot read {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: io::Error,
    },
    #[error("{path}: unsupported WAV format (codec tag 0x{tag:04X}, {bits} bits)")]
    UnsupportedFormat { path: PathBuf, tag: u16, bits: u16 },
    #[error("{path}: corrupt WAV file: {reason}")]
    Corrupt { path: PathBuf, reason: String },
    #[error("unsupported channel count {0} (expected 1 or 2)")]
    UnsupportedChannels(usize),
    #[error("sample rate {0} Hz outside supported range {MIN_SAMPLE_RATE}..={MAX_SAMPLE_RATE}")]
    SampleRate(u32),
    #[error("clip has no samples")]
    EmptyClip,
    #[error("resampling requires a mono clip, got {0} channels")]
    NotMono(usize),
}

/// Decoded PCM audio. Channels are stored de-interleaved.
#[derive(Debug, Clone, PartialEq)]
pub struct AudioClip {
    channels: Vec<Vec<f64>>,
    sample_rate: u32,
}

impl AudioClip {
    pub fn new(channels: Vec<Vec<f64>>, sample_rate: u32) -> Result<Self, AudioError> {
        if channels.is_empty() || channels.len() > 2 {
            return Err(AudioError::UnsupportedChannels(channels.len()));
        }
        if !(MIN_SAMPLE_RATE..=MAX_SAMPLE_RATE).contains(&sample_rate) {
            return Err(AudioError::SampleRate(sample_rate));
        }
        let n = channels[0].len();
        if n == 0 {
            return Err(AudioError::EmptyClip);
        }
        if channels.iter().any(|c| c.len() != n) {
            return Err(AudioError::Corrupt {
                path: PathBuf::new(),
                reason: "channels have different lengths".into(),
            });
        }
        let channels = channels
            .into_iter()
            .map(|c| c.into_iter().map(|s| s.clamp(-1.0, 1.0)).collect())
            .collect();
        Ok(Self {
            channels,
            sample_rate,
        })
    }

    pub fn mono(samples: Vec<f64>, sample_rate: u32) -> Result<Self, AudioError> {
        Self::new(vec![samples], sample_rate)
    }

    pub fn sample_rate(&self) -> u32 {
        self.sample_rate
    }

    pub fn num_channels(&self) -> usize {
        self.channels.len()
    }

    /// Frames per channel.
    pub fn len(&self) -> usize {
        self.channels[0].len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn channel(&self, i: usize) -> &[f64] {
        &self.channels[i]
    }

    /// Samples of the first channel; the whole signal for mono clips.
    pub fn samples(&self) -> &[f64] {
        &self.channels[0]
    }

    pub fn duration_secs(&self) -> f64 {
        self.len() as f64 / f64::from(self.sample_rate)
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Option<&'a [u8]> {
        let end = self.pos.checked_add(n)?;
        let s = self.bytes.get(self.pos..end)?;
        self.pos = end;
        Some(s)
    }

    fn u16(&mut self) -> Option<u16> {
        self.take(2).map(|b| u16::from_le_bytes([b[0], b[1]]))
    }

    fn u32(&mut self) -> Option<u32> {
        self.take(4).map(|b| u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }
}

struct FmtChunk {
    tag: u16,
    channels: u16,
    sample_rate: u32,
    bits: u16,
}

/// Reads a RIFF/WAVE file holding PCM16 or float32 samples in one or two channels.
pub fn read_wav(path: impl AsRef<Path>) -> Result<AudioClip, AudioError> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|source| AudioError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    decode_wav(&bytes, path)
}

/// Decodes an in-memory WAV image; `path` is used for error messages only.
pub fn decode_wav(bytes: &[u8], path: &Path) -> Result<AudioClip, AudioError> {
    let corrupt = |reason: &str| AudioError::Corrupt {
        path: path.to_path_buf(),
        reason: reason.to_string(),
    };
    let mut r = Reader { bytes, pos: 0 };
    if r.take(4) != Some(b"RIFF") {
        return Err(corrupt("missing RIFF signature"));
    }
    r.u32().ok_or_else(|| corrupt("truncated RIFF header"))?;
    if r.take(4) != Some(b"WAVE") {
        return Err(corrupt("missing WAVE signature"));
    }

    let mut fmt: Option<FmtChunk> = None;
    loop {
        let Some(id) = r.take(4) else {
            return Err(corrupt("no data chunk"));
        };
        let size = r.u32().ok_or_else(|| corrupt("truncated chunk header"))? as usize;
        match id {
            b"fmt " => {
                let body = r.take(size).ok_or_else(|| corrupt("truncated fmt chunk"))?;
                fmt = Some(parse_fmt(body).ok_or_else(|| corrupt("fmt chunk too short"))?);
            }
            b"data" => {
                let fmt = fmt.ok_or_else(|| corrupt("data chunk before fmt chunk"))?;
                let available = bytes.len() - r.pos;
                if size > available {
                    return Err(corrupt(&format!(
                        "data chunk declares {size} bytes but only {available} remain"
                    )));
                }
                let body = &bytes[r.pos..r.pos + size];
                return decode_samples(&fmt, body, path);
            }
            _ => {
                r.take(size).ok_or_else(|| corrupt("truncated chunk"))?;
            }
        }
        if size % 2 == 1 {
            // RIFF chunks are word aligned; a missing pad byte at EOF is tolerated.
            let _ = r.take(1);
        }
    }
}

fn parse_fmt(body: &[u8]) -> Option<FmtChunk> {
    let mut r = Reader { bytes: body, pos: 0 };
    let mut tag = r.u16()?;
    let channels = r.u16()?;
    let sample_rate = r.u32()?;
    r.u32()?; // byte rate
    r.u16()?; // block align
    let bits = r.u16()?;
    if tag == FORMAT_EXTENSIBLE {
        r.u16()?; // cbSize
        r.u16()?; // valid bits
        r.u32()?; // channel mask
        tag = r.u16()?; // first two bytes of the sub-format GUID
    }
    Some(FmtChunk {
        tag,
        channels,
        sample_rate,
        bits,
    })
}

fn decode_samples(fmt: &FmtChunk, body: &[u8], path: &Path) -> Result<AudioClip, AudioError> {
    let corrupt = |reason: String| AudioError::Corrupt {
        path: path.to_path_buf(),
        reason,
    };
    let interleaved: Vec<f64> = match (fmt.tag, fmt.bits) {
        (FORMAT_PCM, 16) => body
            .chunks_exact(2)
            .map(|b| f64::from(i16::from_le_bytes([b[0], b[1]])) / 32768.0)
            .collect(),
        (FORMAT_IEEE_FLOAT, 32) => body
            .chunks_exact(4)
            .map(|b| f64::from(f32::from_le_bytes([b[0], b[1], b[2], b[3]])))
            .collect(),
        (tag, bits) => {
            return Err(AudioError::UnsupportedFormat {
                path: path.to_path_buf(),
                tag,
                bits,
            })
        }
    };
    let nch = usize::from(fmt.channels);
    if nch == 0 || nch > 2 {
        return Err(AudioError::UnsupportedChannels(nch));
    }
    if interleaved.is_empty() {
        return Err(corrupt("data chunk is empty".into()));
    }
    if interleaved.iter().any(|s| !s.is_finite()) {
        return Err(corrupt("non-finite float sample".into()));
    }
    let frames = interleaved.len() / nch;
    let mut channels = vec![Vec::with_capacity(frames); nch];
    for frame in interleaved.chunks_exact(nch) {
        for (c, &s) in frame.iter().enumerate() {
            channels[c].push(s);
        }
    }
    AudioClip::new(channels, fmt.sample_rate).map_err(|e| match e {
        AudioError::EmptyClip => corrupt("data chunk holds no complete frame".into()),
        other => other,
    })
}

/// Encodes a clip as 16-bit PCM WAV. Used to fabricate fixtures.
pub fn encode_wav_pcm16(clip: &AudioClip) -> Vec<u8> {
    let nch = clip.num_channels() as u16;
    let data_len = clip.len() * usize::from(nch) * 2;
    let mut out = Vec::with_capacity(44 + data_len);
    out.extend_from_slice(b"RIFF");
    out.extend_from_slice(&((36 + data_len) as u32).to_le_bytes());
    out.extend_from_slice(b"WAVE");
    out.extend_from_slice(b"fmt ");
    out.extend_from_slice(&16u32.to_le_bytes());
    out.extend_from_slice(&FORMAT_PCM.to_le_bytes());
    out.extend_from_slice(&nch.to_le_bytes());
    out.extend_from_slice(&clip.sample_rate.to_le_bytes());
    out.extend_from_slice(&(clip.sample_rate * u32::from(nch) * 2).to_le_bytes());
    out.extend_from_slice(&(nch * 2).to_le_bytes());
    out.extend_from_slice(&16u16.to_le_bytes());
    out.extend_from_slice(b"data");
    out.extend_from_slice(&(data_len as u32).to_le_bytes());
    for i in 0..clip.len() {
        for c in 0..usize::from(nch) {
            let q = (clip.channel(c)[i] * 32768.0).round().clamp(-32768.0, 32767.0) as i16;
            out.extend_from_slice(&q.to_le_bytes());
        }
    }
    out
}

pub fn write_wav_pcm16(path: impl AsRef<Path>, clip: &AudioClip) -> Result<(), AudioError> {
    let path = path.as_ref();
    let io_err = |source| AudioError::Io {
        path: path.to_path_buf(),
        source,
    };
    let mut f = fs::File::create(path).map_err(io_err)?;
    f.write_all(&encode_wav_pcm16(clip)).map_err(io_err)
}

/// Averages a stereo clip into one channel; mono clips pass through unchanged.
pub fn to_mono(clip: &AudioClip) -> Result<AudioClip, AudioError> {
    match clip.num_channels() {
        1 => Ok(clip.clone()),
        2 => {
            let mixed = clip
                .channel(0)
                .iter()
                .zip(clip.channel(1))
                .map(|(l, r)| 0.5 * (l + r))
                .collect();
            AudioClip::mono(mixed, clip.sample_rate)
        }
        n => Err(AudioError::UnsupportedChannels(n)),
    }
}

fn gcd(mut a: u64, mut b: u64) -> u64 {
    while b != 0 {
        (a, b) = (b, a % b);
    }
    a
}

/// Hann-windowed sinc low-pass evaluated at offset `u` (input samples), with
/// `cutoff` in cycles per input sample.
fn kernel(u: f64, cutoff: f64) -> f64 {
    let half = RESAMPLE_HALF_TAPS as f64;
    if u.abs() >= half {
        return 0.0;
    }
    let window = 0.5 * (1.0 + (std::f64::consts::PI * u / half).cos());
    let x = 2.0 * cutoff * u;
    let sinc = if x.abs() < 1e-12 {
        1.0
    } else {
        (std::f64::consts::PI * x).sin() / (std::f64::consts::PI * x)
    };
    2.0 * cutoff * sinc * window
}

/// Resamples a mono clip with a windowed-sinc low-pass.
///
/// Each output sample `n` sits at input position `p = n·src/dst`; it is the
/// kernel-weighted sum of the input samples within ±64 of `p`, with weights
/// normalized to unit DC gain and zero padding beyond the clip edges.
pub fn resample(clip: &AudioClip, target_rate: u32) -> Result<AudioClip, AudioError> {
    if clip.num_channels() != 1 {
        return Err(AudioError::NotMono(clip.num_channels()));
    }
    if !(MIN_SAMPLE_RATE..=MAX_SAMPLE_RATE).contains(&target_rate) {
        return Err(AudioError::SampleRate(target_rate));
    }
    let src = clip.sample_rate;
    if src == target_rate {
        return Ok(clip.clone());
    }
    let input = clip.samples();
    let out_len = ((input.len() as f64) * f64::from(target_rate) / f64::from(src)).round() as usize;
    let out_len = out_len.max(1);
    // Cutoff in cycles per input sample.
    let cutoff = RESAMPLE_CUTOFF * f64::from(src.min(target_rate)) / f64::from(src);

    // Output positions are n·num/den input samples with num/den = src/dst reduced;
    // the fractional phase (n·num mod den)/den repeats with period den.
    let g = gcd(u64::from(src), u64::from(target_rate));
    let (num, den) = (u64::from(src) / g, u64::from(target_rate) / g);
    let taps = 2 * RESAMPLE_HALF_TAPS + 1;
    let make_phase = |phase: u64| -> Vec<f64> {
        let frac = phase as f64 / den as f64;
        let mut w: Vec<f64> = (0..taps)
            .map(|k| kernel(frac - (k as f64 - RESAMPLE_HALF_TAPS as f64), cutoff))
            .collect();
        let sum: f64 = w.iter().sum();
        w.iter_mut().for_each(|v| *v /= sum);
        w
    };
    let table: Option<Vec<Vec<f64>>> = (den <= 4096).then(|| (0..den).map(make_phase).collect());

    let mut out = Vec::with_capacity(out_len);
    for n in 0..out_len as u64 {
        let whole = (n * num / den) as i64;
        let phase = (n * num) % den;
        let owned;
        let weights: &[f64] = match &table {
            Some(t) => &t[phase as usize],
            None => {
                owned = make_phase(phase);
                &owned
            }
        };
        // weights[k] multiplies input[whole + k - HALF] (kernel evaluated at p - index).
        let mut acc = 0.0;
        for (k, &w) in weights.iter().enumerate() {
            let idx = whole + k as i64 - RESAMPLE_HALF_TAPS as i64;
            if idx >= 0 && (idx as usize) < input.len() {
                acc += w * input[idx as usize];
            }
        }
        out.push(acc);
    }
    AudioClip::mono(out, target_rate)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use std::f64::consts::PI;

    fn p() -> PathBuf {
        PathBuf::from("mem.wav")
    }

    #[test]
    fn decode_minimal_pcm16() {
        let clip = AudioClip::mono(vec![0.0, 0.5, -0.5], 48_000).unwrap();
        let decoded = decode_wav(&encode_wav_pcm16(&clip), &p()).unwrap();
        assert_eq!(decoded.samples(), &[0.0, 0.5, -0.5]);
        assert_eq!(decoded.sample_rate(), 48_000);
        assert_eq!(decoded.num_channels(), 1);
    }

    #[test]
    fn int16_normalization_divides_by_32768() {
        let mut bytes = encode_wav_pcm16(&AudioClip::mono(vec![0.0, 0.0, 0.0], 48_000).unwrap());
        let data = bytes.len() - 6;
        bytes[data..].copy_from_slice(&[0, 0, 0x00, 0x40, 0x00, 0xC0]);
        let decoded = decode_wav(&bytes, &p()).unwrap();
        assert_eq!(decoded.samples(), &[0.0, 0.5, -0.5]);
    }

    #[test]
    fn stereo_is_split_into_channels() {
        let clip = AudioClip::new(vec![vec![0.25, -0.5], vec![0.75, 0.5]], 44_100).unwrap();
        let decoded = decode_wav(&encode_wav_pcm16(&clip), &p()).unwrap();
        assert_eq!(decoded.num_channels(), 2);
        assert_eq!(decoded.channel(0), &[0.25, -0.5]);
        assert_eq!(decoded.channel(1), &[0.75, 0.5]);
    }

    #[test]
    fn float32_wav_is_accepted() {
        let mut bytes = encode_wav_pcm16(&AudioClip::mono(vec![0.0; 2], 16_000).unwrap());
        // Rewrite as float32: tag 3, 32 bits, 8 data bytes.
        bytes[20..22].copy_from_slice(&FORMAT_IEEE_FLOAT.to_le_bytes());
        bytes[34..36].copy_from_slice(&32u16.to_le_bytes());
        bytes[40..44].copy_from_slice(&8u32.to_le_bytes());
        bytes.truncate(44);
        bytes.extend_from_slice(&0.25f32.to_le_bytes());
        bytes.extend_from_slice(&(-1.0f32).to_le_bytes());
        let decoded = decode_wav(&bytes, &p()).unwrap();
        assert_eq!(decoded.samples(), &[0.25, -1.0]);
    }

    #[test]
    fn unsupported_codec_names_the_tag() {
        let mut bytes = encode_wav_pcm16(&AudioClip::mono(vec![0.0; 4], 16_000).unwrap());
        bytes[20..22].copy_from_slice(&0x0055u16.to_le_bytes());
        let err = decode_wav(&bytes, &p()).unwrap_err();
        assert!(matches!(err, AudioError::UnsupportedFormat { tag: 0x55, .. }));
        assert!(err.to_string().contains("0x0055"));
    }

    #[test]
    fn truncated_and_empty_data_are_corrupt() {
        let bytes = encode_wav_pcm16(&AudioClip::mono(vec![0.1; 100], 16_000).unwrap());
        let err = decode_wav(&bytes[..bytes.len() - 10], &p()).unwrap_err();
        assert!(matches!(err, AudioError::Corrupt { .. }), "{err}");

        let mut empty = bytes[..44].to_vec();
        empty[40..44].copy_from_slice(&0u32.to_le_bytes());
        let err = decode_wav(&empty, &p()).unwrap_err();
        assert!(matches!(err, AudioError::Corrupt { .. }), "{err}");

        assert!(matches!(
            decode_wav(b"not a wav", &p()),
            Err(AudioError::Corrupt { .. })
        ));
    }

    #[test]
    fn missing_file_is_io_error() {
        assert!(matches!(
            read_wav("/nonexistent/clip.wav"),
            Err(AudioError::Io { .. })
        ));
    }

    #[test]
    fn unknown_chunks_are_skipped() {
        let base = encode_wav_pcm16(&AudioClip::mono(vec![0.5, -0.25], 16_000).unwrap());
        let mut bytes = base[..36].to_vec();
        bytes.extend_from_slice(b"LIST");
        bytes.extend_from_slice(&3u32.to_le_bytes());
        bytes.extend_from_slice(&[1, 2, 3, 0]); // odd size + pad byte
        bytes.extend_from_slice(&base[36..]);
        let decoded = decode_wav(&bytes, &p()).unwrap();
        assert_eq!(decoded.samples(), &[0.5, -0.25]);
    }

    #[test]
    fn to_mono_examples() {
        let mono = AudioClip::mono(vec![0.1, 0.2], 16_000).unwrap();
        assert_eq!(to_mono(&mono).unwrap(), mono);
        let st = AudioClip::new(vec![vec![1.0], vec![-1.0]], 16_000).unwrap();
        assert_eq!(to_mono(&st).unwrap().samples(), &[0.0]);
        let st = AudioClip::new(vec![vec![0.25, 0.5], vec![0.25, 0.5]], 16_000).unwrap();
        assert_eq!(to_mono(&st).unwrap().samples(), &[0.25, 0.5]);
        assert!(matches!(
            AudioClip::new(vec![vec![0.0]; 3], 16_000),
            Err(AudioError::UnsupportedChannels(3))
        ));
    }

    #[test]
    fn resample_identity_and_precondition() {
        let clip = AudioClip::mono(vec![0.1, 0.3, -0.2], 16_000).unwrap();
        assert_eq!(resample(&clip, 16_000).unwrap(), clip);
        let st = AudioClip::new(vec![vec![0.0; 4], vec![0.0; 4]], 48_000).unwrap();
        assert!(matches!(resample(&st, 16_000), Err(AudioError::NotMono(2))));
    }

    #[test]
    fn resample_dc_passes() {
        let clip = AudioClip::mono(vec![0.5; 48_000], 48_000).unwrap();
        let out = resample(&clip, 16_000).unwrap();
        assert_eq!(out.len(), 16_000);
        assert_eq!(out.sample_rate(), 16_000);
        let edge = RESAMPLE_HALF_TAPS / 3 + 1;
        for &s in &out.samples()[edge..out.len() - edge] {
            assert!((s - 0.5).abs() < 1e-3);
        }
    }

    #[test]
    fn resample_sine_matches_analytic_oracle() {
        let src = 48_000.0;
        let clip = AudioClip::mono(
            (0..48_000)
                .map(|n| 0.8 * (2.0 * PI * 1000.0 * n as f64 / src).sin())
                .collect(),
            48_000,
        )
        .unwrap();
        let out = resample(&clip, 16_000).unwrap();
        let edge = 64;
        let interior = &out.samples()[edge..out.len() - edge];
        let mse: f64 = interior
            .iter()
            .enumerate()
            .map(|(i, &s)| {
                let n = (i + edge) as f64;
                let expected = 0.8 * (2.0 * PI * 1000.0 * n / 16_000.0).sin();
                (s - expected).powi(2)
            })
            .sum::<f64>()
            / interior.len() as f64;
        assert!(mse.sqrt() < 1e-2, "rms {}", mse.sqrt());
    }

    #[test]
    fn resample_non_integer_ratio() {
        let clip = AudioClip::mono(
            (0..44_100)
                .map(|n| 0.5 * (2.0 * PI * 440.0 * n as f64 / 44_100.0).sin())
                .collect(),
            44_100,
        )
        .unwrap();
        let out = resample(&clip, 16_000).unwrap();
        assert_eq!(out.len(), 16_000);
        let rms: f64 = out.samples()[100..15_900]
            .iter()
            .enumerate()
            .map(|(i, &s)| {
                let t = (i + 100) as f64 / 16_000.0;
                (s - 0.5 * (2.0 * PI * 440.0 * t).sin()).powi(2)
            })
            .sum::<f64>()
            / 15_800.0;
        assert!(rms.sqrt() < 1e-2);
    }

    proptest! {
        #[test]
        fn pcm16_roundtrip_within_quantization(samples in prop::collection::vec(-1.0f64..1.0, 1..200)) {
            let clip = AudioClip::mono(samples.clone(), 22_050).unwrap();
            let back = decode_wav(&encode_wav_pcm16(&clip), &p()).unwrap();
            for (a, b) in samples.iter().zip(back.samples()) {
                prop_assert!((a - b).abs() <= 1.0 / 32768.0);
            }
        }

        #[test]
        fn resample_preserves_duration(len in 1usize..3000, src_idx in 0usize..4, dst_idx in 0usize..4) {
            let rates = [8_000u32, 16_000, 44_100, 48_000];
            let (src, dst) = (rates[src_idx], rates[dst_idx]);
            let clip = AudioClip::mono(vec![0.1; len], src).unwrap();
            let out = resample(&clip, dst).unwrap();
            let dur_in = len as f64 / f64::from(src);
            let dur_out = out.len() as f64 / f64::from(dst);
            prop_assert!((dur_in - dur_out).abs() <= 1.0 / f64::from(dst));
        }

        #[test]
        fn to_mono_never_exceeds_input_peak(l in prop::collection::vec(-1.0f64..1.0, 1..50), r_seed in -1.0f64..1.0) {
            let r: Vec<f64> = l.iter().map(|v| (v * r_seed).clamp(-1.0, 1.0)).collect();
            let peak = l.iter().chain(&r).fold(0.0f64, |m, v| m.max(v.abs()));
            let clip = AudioClip::new(vec![l, r], 16_000).unwrap();
            let mono = to_mono(&clip).unwrap();
            prop_assert!(mono.samples().iter().all(|v| v.abs() <= peak));
        }
    }
}
