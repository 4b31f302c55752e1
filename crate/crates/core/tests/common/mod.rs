//! Shared fixtures for the integration tests.
#![allow(dead_code, unused_imports)]

mod reference;

use std::f64::consts::PI;
use std::fs;
use std::path::{Path, PathBuf};

pub use reference::{cell_oracle_deviation, mfcc_oracle_deviation};
use ser_lstm::audio::{write_wav_pcm16, AudioClip};
use ser_lstm::dataset::RavdessLabel;
use ser_lstm::rng::XorShift64Star;

pub const SPEECH_FILES: usize = 1440;
pub const SONG_FILES: usize = 1012;

/// Every label of the full RAVDESS audio release. Neutral has normal
/// intensity only; songs cover the first six emotions and actor 18 sang none.
pub fn ravdess_labels() -> Vec<RavdessLabel> {
    let mut out = Vec::new();
    for actor in 1..=24u8 {
        for (channel, emotions) in [(1u8, 8u8), (2, 6)] {
            if channel == 2 && actor == 18 {
                continue;
            }
            for emotion in 1..=emotions {
                let intensities: &[u8] = if emotion == 1 { &[1] } else { &[1, 2] };
                for &intensity in intensities {
                    for statement in 1..=2 {
                        for repetition in 1..=2 {
                            out.push(RavdessLabel {
                                modality: 3,
                                vocal_channel: channel,
                                emotion,
                                intensity,
                                statement,
                                repetition,
                                actor,
                            });
                        }
                    }
                }
            }
        }
    }
    out
}

fn label_path(root: &Path, label: &RavdessLabel) -> PathBuf {
    let group = if label.is_song() { "song" } else { "speech" };
    root.join(group)
        .join(format!("Actor_{:02}", label.actor))
        .join(label.to_filename())
}

/// Creates empty files named like the full release, plus a few decoys.
pub fn write_name_tree(root: &Path) {
    for label in ravdess_labels() {
        let path = label_path(root, &label);
        fs::create_dir_all(path.parent().unwrap()).unwrap();
        fs::write(path, b"").unwrap();
    }
    fs::write(root.join("README.txt"), b"not audio").unwrap();
    fs::write(root.join("speech").join("03-01-09-01-01-01-01.wav"), b"").unwrap();
}

/// A clip whose pitch and loudness envelope depend on the emotion class.
pub fn emotion_tone(class: usize, seconds: f64, rate: u32, seed: u64) -> Vec<f64> {
    let mut rng = XorShift64Star::new(seed);
    let f0 = 140.0 + 90.0 * class as f64;
    let tremolo = 1.0 + class as f64;
    let n = (seconds * f64::from(rate)) as usize;
    (0..n)
        .map(|i| {
            let t = i as f64 / f64::from(rate);
            let env = 0.6 + 0.4 * (2.0 * PI * tremolo * t).sin();
            let voiced = (2.0 * PI * f0 * t).sin() + 0.5 * (2.0 * PI * 2.0 * f0 * t).sin();
            0.25 * env * voiced + 0.01 * rng.uniform(-1.0, 1.0)
        })
        .collect()
}

/// Writes `per_class` speech clips for each of the eight emotions under
/// `root`. Every third clip is recorded as 48 kHz stereo.
pub fn write_wav_tree(root: &Path, per_class: usize, seconds: f64) -> Vec<PathBuf> {
    let mut paths = Vec::new();
    for class in 0..8usize {
        for k in 0..per_class {
            let label = RavdessLabel {
                modality: 3,
                vocal_channel: 1,
                emotion: class as u8 + 1,
                intensity: 1,
                statement: (k % 2) as u8 + 1,
                repetition: ((k / 2) % 2) as u8 + 1,
                actor: (k / 4) as u8 + 1,
            };
            let path = label_path(root, &label);
            fs::create_dir_all(path.parent().unwrap()).unwrap();
            let seed = (class * 1000 + k) as u64;
            let clip = if (class + k) % 3 == 0 {
                let left = emotion_tone(class, seconds, 48_000, seed);
                let right: Vec<f64> = left.iter().map(|v| 0.8 * v).collect();
                AudioClip::new(vec![left, right], 48_000).unwrap()
            } else {
                AudioClip::mono(emotion_tone(class, seconds, 16_000, seed), 16_000).unwrap()
            };
            write_wav_pcm16(&path, &clip).unwrap();
            paths.push(path);
        }
    }
    paths
}

/// Runs the command-line tool in-process and returns its exit status and stdout.
pub fn run_cli(args: &[&str]) -> (i32, String) {
    let mut out = Vec::new();
    let argv: Vec<&str> = std::iter::once("ser-lstm").chain(args.iter().copied()).collect();
    let code = ser_lstm::cli::run_with_args(argv, &mut out);
    (code, String::from_utf8(out).unwrap())
}

pub fn path_str(p: &Path) -> &str {
    p.to_str().unwrap()
}
