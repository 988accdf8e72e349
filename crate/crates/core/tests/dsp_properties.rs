use dne_core::dsp::{
    frame_count, hann_periodic, istft, reflect_pad, split_mag_phase, standardize, stft, Waveform, FFT_SIZE, HOP,
};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random_wave(len: usize, seed: u64) -> Waveform {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Waveform::new((0..len).map(|_| rng.gen_range(-1.0..1.0)).collect())
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(12))]

    #[test]
    fn round_trip_half_to_three_seconds(len in 8000usize..48000, seed in any::<u64>()) {
        let x = random_wave(len, seed);
        let y = istft(&stft(&x).unwrap(), Some(len)).unwrap();
        prop_assert_eq!(y.len(), len);
        let err = x.samples.iter().zip(&y.samples).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        prop_assert!(err < 1e-6, "max error {}", err);
    }

    #[test]
    fn stft_is_linear(len in 600usize..4000, s1 in any::<u64>(), s2 in any::<u64>(), a in -3.0f64..3.0, b in -3.0f64..3.0) {
        let x = random_wave(len, s1);
        let y = random_wave(len, s2);
        let mix = Waveform::new(x.samples.iter().zip(&y.samples).map(|(p, q)| a * p + b * q).collect());
        let (sx, sy, sm) = (stft(&x).unwrap(), stft(&y).unwrap(), stft(&mix).unwrap());
        let scale = sm.values.iter().map(|c| c.norm()).fold(1e-12, f64::max);
        for ((m, p), q) in sm.values.iter().zip(sx.values.iter()).zip(sy.values.iter()) {
            let expect = p * a + q * b;
            prop_assert!((m - expect).norm() <= 1e-6 * scale);
        }
    }

    #[test]
    fn magnitudes_are_nonnegative(len in 1usize..3000, seed in any::<u64>()) {
        let (mag, _) = split_mag_phase(&stft(&random_wave(len, seed)).unwrap());
        prop_assert_eq!(mag.values.nrows(), frame_count(len));
        prop_assert!(mag.values.iter().all(|&v| v >= 0.0));
    }

    /// Bin energies match the windowed frame's time-domain energy through
    /// Parseval on the one-sided spectrum.
    #[test]
    fn parseval_per_frame(len in 600usize..3000, seed in any::<u64>()) {
        let x = random_wave(len, seed);
        let spec = stft(&x).unwrap();
        let padded = reflect_pad(&x.samples);
        let w = hann_periodic(FFT_SIZE);
        for (t, row) in spec.values.outer_iter().enumerate() {
            let frame: Vec<f64> = (0..FFT_SIZE).map(|n| padded[t * HOP + n] * w[n]).collect();
            let time: f64 = frame.iter().map(|v| v * v).sum();
            let mut freq = 0.0;
            for (k, c) in row.iter().enumerate() {
                let weight = if k == 0 || k == FFT_SIZE / 2 { 1.0 } else { 2.0 };
                freq += weight * c.norm_sqr();
            }
            freq /= FFT_SIZE as f64;
            prop_assert!((time - freq).abs() <= 1e-6 * time.max(1e-12), "frame {}: {} vs {}", t, time, freq);
        }
    }

    #[test]
    fn standardization_ignores_gain(len in 1000usize..3000, seed in any::<u64>(), gain in 0.01f64..100.0) {
        let x = random_wave(len, seed);
        let y = Waveform::new(x.samples.iter().map(|v| v * gain).collect());
        let a = standardize(&split_mag_phase(&stft(&x).unwrap()).0).unwrap();
        let b = standardize(&split_mag_phase(&stft(&y).unwrap()).0).unwrap();
        for (p, q) in a.values.iter().zip(b.values.iter()) {
            prop_assert!((p - q).abs() < 1e-8);
        }
    }
}
