//! Reference implementations written independently of the library.

use std::f64::consts::PI;

use ser_lstm::audio::AudioClip;
use ser_lstm::features::{compute_mfcc, MfccConfig};
use ser_lstm::nn::{lstm_cell_forward, LstmLayerParams};
use ser_lstm::rng::XorShift64Star;
use ser_lstm::Matrix;

/// MFCCs computed with an O(n²) DFT and explicit loops throughout.
pub fn naive_mfcc(samples: &[f64], cfg: &MfccConfig) -> Vec<Vec<f64>> {
    let sr = f64::from(cfg.sample_rate);
    let frame = (cfg.frame_len_ms * sr / 1000.0).round() as usize;
    let hop = (cfg.hop_ms * sr / 1000.0).round() as usize;
    let nfft = cfg.fft_size;
    let bins = nfft / 2 + 1;

    let mut emph = vec![samples[0]];
    for t in 1..samples.len() {
        emph.push(samples[t] - cfg.preemphasis * samples[t - 1]);
    }

    let mel = |f: f64| 2595.0 * (1.0 + f / 700.0).log10();
    let hz = |m: f64| 700.0 * (10f64.powf(m / 2595.0) - 1.0);
    let (m_lo, m_hi) = (mel(cfg.fmin), mel(cfg.fmax));
    let edges: Vec<f64> = (0..cfg.mel_filters + 2)
        .map(|i| hz(m_lo + (m_hi - m_lo) * i as f64 / (cfg.mel_filters + 1) as f64))
        .collect();
    let mut fbank = vec![vec![0.0; bins]; cfg.mel_filters];
    for m in 0..cfg.mel_filters {
        let (l, c, r) = (edges[m], edges[m + 1], edges[m + 2]);
        for k in 0..bins {
            let f = k as f64 * sr / nfft as f64;
            fbank[m][k] = if f > l && f <= c {
                (f - l) / (c - l)
            } else if f > c && f < r {
                (r - f) / (r - c)
            } else {
                0.0
            };
        }
        let peak = fbank[m].iter().cloned().fold(0.0, f64::max);
        for w in fbank[m].iter_mut() {
            *w /= peak;
        }
    }

    let n_frames = 1 + (samples.len() - frame) / hop;
    let mut out = Vec::with_capacity(n_frames);
    for fr in 0..n_frames {
        let x: Vec<f64> = (0..frame)
            .map(|n| emph[fr * hop + n] * 0.5 * (1.0 - (2.0 * PI * n as f64 / frame as f64).cos()))
            .collect();
        let mut power = vec![0.0; bins];
        for (k, p) in power.iter_mut().enumerate() {
            let (mut re, mut im) = (0.0, 0.0);
            for (n, &v) in x.iter().enumerate() {
                let ang = -2.0 * PI * (k * n % nfft) as f64 / nfft as f64;
                re += v * ang.cos();
                im += v * ang.sin();
            }
            *p = re * re + im * im;
        }
        let log_mel: Vec<f64> = fbank
            .iter()
            .map(|row| {
                let e: f64 = row.iter().zip(&power).map(|(w, p)| w * p).sum();
                e.max(cfg.log_floor).ln()
            })
            .collect();
        let m = cfg.mel_filters as f64;
        let coeffs: Vec<f64> = (0..cfg.num_coeffs)
            .map(|k| {
                let s: f64 = (0..cfg.mel_filters)
                    .map(|i| log_mel[i] * (PI * k as f64 * (i as f64 + 0.5) / m).cos())
                    .sum();
                s * if k == 0 { (1.0 / m).sqrt() } else { (2.0 / m).sqrt() }
            })
            .collect();
        out.push(coeffs);
    }
    out
}

pub fn random_clip(rng: &mut XorShift64Star, n: usize) -> Vec<f64> {
    let tones: Vec<(f64, f64, f64)> = (0..3)
        .map(|_| (rng.uniform(80.0, 7000.0), rng.uniform(0.0, 0.3), rng.uniform(0.0, 2.0 * PI)))
        .collect();
    let noise = rng.uniform(0.0, 0.2);
    (0..n)
        .map(|t| {
            let s: f64 = tones
                .iter()
                .map(|(f, a, ph)| a * (2.0 * PI * f * t as f64 / 16_000.0 + ph).sin())
                .sum();
            (s + noise * rng.uniform(-1.0, 1.0)).clamp(-1.0, 1.0)
        })
        .collect()
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// One LSTM step written out with scalar loops over `[h_prev, x]`.
#[allow(clippy::type_complexity)]
pub fn scalar_cell(
    w: [&[Vec<f64>]; 4],
    b: [&[f64]; 4],
    x: &[f64],
    h_prev: &[f64],
    c_prev: &[f64],
) -> (Vec<f64>, Vec<f64>, Vec<f64>, Vec<f64>, Vec<f64>, Vec<f64>) {
    let hd = h_prev.len();
    let z: Vec<f64> = h_prev.iter().chain(x).copied().collect();
    let affine = |g: usize, j: usize| {
        let mut s = b[g][j];
        for (k, zk) in z.iter().enumerate() {
            s += w[g][j][k] * zk;
        }
        s
    };
    let mut f = vec![0.0; hd];
    let mut i = vec![0.0; hd];
    let mut ct = vec![0.0; hd];
    let mut o = vec![0.0; hd];
    let mut c = vec![0.0; hd];
    let mut h = vec![0.0; hd];
    for j in 0..hd {
        f[j] = sigmoid(affine(0, j));
        i[j] = sigmoid(affine(1, j));
        ct[j] = affine(2, j).tanh();
        o[j] = sigmoid(affine(3, j));
        c[j] = f[j] * c_prev[j] + i[j] * ct[j];
        h[j] = o[j] * c[j].tanh();
    }
    (f, i, ct, o, c, h)
}

pub fn to_rows(m: &Matrix) -> Vec<Vec<f64>> {
    (0..m.rows()).map(|r| m.row(r).to_vec()).collect()
}


/// Largest absolute difference between the library MFCCs and [`naive_mfcc`]
/// over `clips` random one-second clips.
pub fn mfcc_oracle_deviation(seed: u64, clips: usize) -> f64 {
    let cfg = MfccConfig::default();
    let mut rng = XorShift64Star::new(seed);
    let mut worst = 0.0f64;
    for _ in 0..clips {
        let samples = random_clip(&mut rng, 16_000);
        let clip = AudioClip::mono(samples.clone(), 16_000).unwrap();
        let fast = compute_mfcc(&clip, &cfg).unwrap();
        let reference = naive_mfcc(&samples, &cfg);
        assert_eq!((fast.rows(), fast.cols()), (reference.len(), cfg.num_coeffs));
        for (r, row) in reference.iter().enumerate() {
            for (c, &v) in row.iter().enumerate() {
                worst = worst.max((fast.get(r, c) - v).abs());
            }
        }
    }
    worst
}

/// Largest absolute difference between [`lstm_cell_forward`] and
/// [`scalar_cell`] over `cases` random cells with H = 3, D = 2.
pub fn cell_oracle_deviation(seed: u64, cases: usize) -> f64 {
    let (hd, d) = (3, 2);
    let mut rng = XorShift64Star::new(seed);
    let mut worst = 0.0f64;
    for _ in 0..cases {
        let mut draw = |rows: usize, cols: usize, scale: f64| {
            Matrix::from_fn(rows, cols, |_, _| rng.uniform(-scale, scale))
        };
        let p = LstmLayerParams {
            w_f: draw(hd, hd + d, 2.0),
            w_i: draw(hd, hd + d, 2.0),
            w_c: draw(hd, hd + d, 2.0),
            w_o: draw(hd, hd + d, 2.0),
            b_f: draw(1, hd, 1.0),
            b_i: draw(1, hd, 1.0),
            b_c: draw(1, hd, 1.0),
            b_o: draw(1, hd, 1.0),
        };
        let x = draw(1, d, 3.0).into_data();
        let h_prev = draw(1, hd, 1.0).into_data();
        let c_prev = draw(1, hd, 2.0).into_data();
        let got = lstm_cell_forward(&p, &x, &h_prev, &c_prev).unwrap();
        let ws = [to_rows(&p.w_f), to_rows(&p.w_i), to_rows(&p.w_c), to_rows(&p.w_o)];
        let (f, i, ct, o, c, h) = scalar_cell(
            [&ws[0], &ws[1], &ws[2], &ws[3]],
            [p.b_f.data(), p.b_i.data(), p.b_c.data(), p.b_o.data()],
            &x,
            &h_prev,
            &c_prev,
        );
        for (a, e) in [(&got.f, &f), (&got.i, &i), (&got.c_tilde, &ct), (&got.o, &o), (&got.c, &c), (&got.h, &h)] {
            for (u, v) in a.iter().zip(e.iter()) {
                worst = worst.max((u - v).abs());
            }
        }
    }
    worst
}
