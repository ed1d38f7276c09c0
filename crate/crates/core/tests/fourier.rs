use promptdist::distengine::fourier_components;
use promptdist::numcore::Rng;
use proptest::prelude::*;
use rustfft::num_complex::Complex;
use rustfft::FftPlanner;

proptest! {
    #[test]
    fn components_match_an_fft_of_each_channel(seed in any::<u64>(), len in 1usize..12, e in 1usize..4, frac in 0.0f64..1.0) {
        let n_s = 1 + ((len - 1) as f64 * frac) as usize;
        let seq = Rng::new(seed).gaussian(&[len, e]);
        let got = fourier_components(&seq, n_s).unwrap();
        let fft = FftPlanner::<f64>::new().plan_fft_forward(len);
        let n_real = len / 2 + 1;
        for c in 0..e {
            let mut buf: Vec<Complex<f64>> = (0..len).map(|t| Complex::new(seq.at(&[t, c]), 0.0)).collect();
            fft.process(&mut buf);
            for i in 0..n_s {
                let want = if i < n_real { buf[i].re } else { buf[i - n_real + 1].im } / len as f64;
                prop_assert!((got.at(&[i, c]) - want).abs() < 1e-12, "row {i} channel {c}: {} vs {want}", got.at(&[i, c]));
            }
        }
    }
}
