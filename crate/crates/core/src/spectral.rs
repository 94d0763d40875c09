//! Dominant-period detection from the amplitude spectrum of an input window.

use std::f64::consts::PI;

use num_complex::Complex64;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// The `k` strongest frequency bins of a window with their periods and
/// amplitudes, strongest first.
#[derive(Clone, Debug, PartialEq)]
pub struct SpectralProfile {
    pub frequencies: Vec<usize>,
    pub periods: Vec<usize>,
    pub amplitudes: Vec<f64>,
}

impl SpectralProfile {
    pub fn len(&self) -> usize {
        self.frequencies.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frequencies.is_empty()
    }

    /// Check every structural invariant against the window length.
    pub fn validate(&self, window_len: usize) -> Result<()> {
        let k = self.frequencies.len();
        if k == 0 || self.periods.len() != k || self.amplitudes.len() != k {
            return Err(Error::Contract("profile lists must share a length >= 1".into()));
        }
        for (&f, &p) in self.frequencies.iter().zip(&self.periods) {
            if f == 0 || f > window_len / 2 {
                return Err(Error::Contract(format!("frequency {f} outside 1..={}", window_len / 2)));
            }
            if p != window_len / f {
                return Err(Error::Contract(format!("period {p} != {window_len}/{f}")));
            }
        }
        if self.amplitudes.windows(2).any(|w| w[0] < w[1]) {
            return Err(Error::Contract("amplitudes not sorted non-increasing".into()));
        }
        let mut seen = self.frequencies.clone();
        seen.sort_unstable();
        seen.dedup();
        if seen.len() != k {
            return Err(Error::Contract("duplicate frequencies".into()));
        }
        Ok(())
    }

    /// CSV rendering: `rank,frequency,period,amplitude` with a header row.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("rank,frequency,period,amplitude\n");
        for (i, ((f, p), a)) in self
            .frequencies
            .iter()
            .zip(&self.periods)
            .zip(&self.amplitudes)
            .enumerate()
        {
            out.push_str(&format!("{},{f},{p},{a}\n", i + 1));
        }
        out
    }
}

fn bit_reverse_permute(buf: &mut [Complex64]) {
    let n = buf.len();
    let mut j = 0;
    for i in 1..n {
        let mut bit = n >> 1;
        while j & bit != 0 {
            j ^= bit;
            bit >>= 1;
        }
        j |= bit;
        if i < j {
            buf.swap(i, j);
        }
    }
}

/// In-place iterative radix-2 forward transform. `buf.len()` must be a power of two.
fn fft_radix2(buf: &mut [Complex64]) {
    let n = buf.len();
    debug_assert!(n.is_power_of_two());
    bit_reverse_permute(buf);
    let mut len = 2;
    while len <= n {
        let ang = -2.0 * PI / len as f64;
        let half = len / 2;
        for start in (0..n).step_by(len) {
            for j in 0..half {
                let w = Complex64::from_polar(1.0, ang * j as f64);
                let u = buf[start + j];
                let v = buf[start + j + half] * w;
                buf[start + j] = u + v;
                buf[start + j + half] = u - v;
            }
        }
        len <<= 1;
    }
}

/// Direct O(n²) transform, used for lengths that are not a power of two.
fn dft_direct(signal: &[f64]) -> Vec<Complex64> {
    let n = signal.len();
    (0..n)
        .map(|f| {
            signal
                .iter()
                .enumerate()
                .map(|(t, &x)| {
                    // reduce f·t mod n first to keep the angle small
                    let ang = -2.0 * PI * ((f * t) % n) as f64 / n as f64;
                    Complex64::from_polar(x, ang)
                })
                .sum()
        })
        .collect()
}

/// Full complex spectrum of a real signal.
pub fn spectrum(signal: &[f64]) -> Vec<Complex64> {
    if signal.len().is_power_of_two() {
        let mut buf: Vec<Complex64> = signal.iter().map(|&x| Complex64::new(x, 0.0)).collect();
        fft_radix2(&mut buf);
        buf
    } else {
        dft_direct(signal)
    }
}

/// Channel-averaged amplitude of bins `1..=L/2` of a `[L, C]` window.
/// Element `j` of the result is the amplitude of frequency `j + 1`.
pub fn dft_amplitudes(x: &Tensor) -> Result<Tensor> {
    if x.rank() != 2 {
        return Err(Error::dim(
            "dft_amplitudes",
            format!("expected [L, C], got {:?}", x.shape()),
        ));
    }
    let (len, channels) = (x.shape()[0], x.shape()[1]);
    if len < 4 {
        return Err(Error::InputTooShort { min: 4, got: len });
    }
    let bins = len / 2;
    let mut amps = vec![0.0; bins];
    let mut column = vec![0.0; len];
    for c in 0..channels {
        for (t, v) in column.iter_mut().enumerate() {
            *v = x.data()[t * channels + c];
        }
        let spec = spectrum(&column);
        for (f, a) in amps.iter_mut().enumerate() {
            *a += spec[f + 1].norm();
        }
    }
    for a in &mut amps {
        *a /= channels as f64;
    }
    Ok(Tensor::vector(amps))
}

/// Select the `k` largest bins; ties go to the lower frequency.
pub fn topk_periods(amps: &Tensor, k: usize, window_len: usize) -> Result<SpectralProfile> {
    let bins = amps.numel();
    if bins != window_len / 2 {
        return Err(Error::dim(
            "topk_periods",
            format!("{bins} amplitude bins for window length {window_len}"),
        ));
    }
    if k == 0 || k > bins {
        return Err(Error::Config(format!("k = {k} outside 1..={bins}")));
    }
    let a = amps.data();
    if let Some(bad) = a.iter().find(|v| !v.is_finite()) {
        return Err(Error::Numeric(format!("non-finite amplitude {bad}")));
    }
    let mut order: Vec<usize> = (0..bins).collect();
    order.sort_by(|&i, &j| a[j].total_cmp(&a[i]).then(i.cmp(&j)));
    order.truncate(k);
    let frequencies: Vec<usize> = order.iter().map(|&i| i + 1).collect();
    Ok(SpectralProfile {
        periods: frequencies.iter().map(|&f| window_len / f).collect(),
        amplitudes: order.iter().map(|&i| a[i]).collect(),
        frequencies,
    })
}

/// Amplitudes and top-`k` selection in one call.
pub fn profile(x: &Tensor, k: usize) -> Result<SpectralProfile> {
    let amps = dft_amplitudes(x)?;
    topk_periods(&amps, k, x.shape()[0])
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Independent O(L²) amplitude summation.
    fn naive_amplitudes(x: &[f64], len: usize, channels: usize) -> Vec<f64> {
        (1..=len / 2)
            .map(|f| {
                let mut acc = 0.0;
                for c in 0..channels {
                    let (mut re, mut im) = (0.0, 0.0);
                    for t in 0..len {
                        let ang = 2.0 * PI * f as f64 * t as f64 / len as f64;
                        re += x[t * channels + c] * ang.cos();
                        im -= x[t * channels + c] * ang.sin();
                    }
                    acc += (re * re + im * im).sqrt();
                }
                acc / channels as f64
            })
            .collect()
    }

    fn sine(len: usize, period: f64) -> Vec<f64> {
        (0..len).map(|t| (2.0 * PI * t as f64 / period).sin()).collect()
    }

    #[test]
    fn pure_sine_peaks_at_its_bin() {
        let x = Tensor::new(&[96, 1], sine(96, 24.0)).unwrap();
        let amps = dft_amplitudes(&x).unwrap();
        for (j, &a) in amps.data().iter().enumerate() {
            if j + 1 == 4 {
                assert!((a - 48.0).abs() < 1e-9, "peak {a}");
            } else {
                assert!(a < 1e-9, "bin {} = {a}", j + 1);
            }
        }
        let p = topk_periods(&amps, 1, 96).unwrap();
        assert_eq!(p.frequencies, vec![4]);
        assert_eq!(p.periods, vec![24]);
    }

    #[test]
    fn constant_series_has_no_energy() {
        let x = Tensor::full(&[32, 2], 3.5);
        let amps = dft_amplitudes(&x).unwrap();
        assert!(amps.data().iter().all(|&a| a < 1e-9));
    }

    #[test]
    fn two_channel_average() {
        let a = sine(96, 24.0);
        let b = sine(96, 12.0);
        let data: Vec<f64> = a.iter().zip(&b).flat_map(|(&u, &v)| [u, v]).collect();
        let x = Tensor::new(&[96, 2], data.clone()).unwrap();
        let amps = dft_amplitudes(&x).unwrap();
        let naive = naive_amplitudes(&data, 96, 2);
        assert!((amps.data()[3] - 24.0).abs() < 1e-9);
        assert!((amps.data()[7] - 24.0).abs() < 1e-9);
        for (u, v) in amps.data().iter().zip(&naive) {
            assert!((u - v).abs() < 1e-9);
        }
    }

    #[test]
    fn short_input_rejected() {
        let x = Tensor::zeros(&[3, 1]);
        assert!(matches!(
            dft_amplitudes(&x),
            Err(Error::InputTooShort { min: 4, got: 3 })
        ));
    }

    #[test]
    fn ties_prefer_lower_frequency() {
        let amps = Tensor::vector(vec![1.0; 8]);
        let p = topk_periods(&amps, 2, 16).unwrap();
        assert_eq!(p.frequencies, vec![1, 2]);
        assert_eq!(p.periods, vec![16, 8]);
    }

    #[test]
    fn constructed_spectrum_orders_by_amplitude() {
        let mut a = vec![0.1; 48];
        a[3] = 5.0;
        a[7] = 9.0;
        let p = topk_periods(&Tensor::vector(a), 2, 96).unwrap();
        assert_eq!(p.frequencies, vec![8, 4]);
        assert_eq!(p.periods, vec![12, 24]);
        assert_eq!(p.amplitudes, vec![9.0, 5.0]);
        p.validate(96).unwrap();
    }

    #[test]
    fn k_out_of_range_is_config_error() {
        let amps = Tensor::vector(vec![1.0; 8]);
        assert!(matches!(topk_periods(&amps, 0, 16), Err(Error::Config(_))));
        assert!(matches!(topk_periods(&amps, 9, 16), Err(Error::Config(_))));
    }

    #[test]
    fn fft_matches_direct_on_powers_of_two() {
        for len in [4usize, 8, 64, 256] {
            let x: Vec<f64> = (0..len).map(|t| ((t * 7919) % 13) as f64 - 6.0).collect();
            let fast = spectrum(&x);
            let slow = dft_direct(&x);
            for (u, v) in fast.iter().zip(&slow) {
                assert!((u - v).norm() < 1e-9);
            }
        }
    }

    #[test]
    fn csv_has_header_and_ranks() {
        let p = SpectralProfile {
            frequencies: vec![4],
            periods: vec![24],
            amplitudes: vec![48.0],
        };
        assert_eq!(p.to_csv(), "rank,frequency,period,amplitude\n1,4,24,48\n");
    }
}
