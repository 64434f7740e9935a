use std::f64::consts::PI;

/// Precomputed iterative radix-2 decimation-in-time FFT of a fixed size.
#[derive(Debug, Clone)]
pub struct Radix2Fft {
    n: usize,
    bitrev: Vec<usize>,
    twiddle_re: Vec<f64>,
    twiddle_im: Vec<f64>,
}

impl Radix2Fft {
    /// `n` must be a power of two.
    pub fn new(n: usize) -> Self {
        assert!(n.is_power_of_two(), "FFT size {n} is not a power of two");
        let bits = n.trailing_zeros();
        let bitrev = (0..n)
            .map(|i| {
                if bits == 0 {
                    0
                } else {
                    i.reverse_bits() >> (usize::BITS - bits)
                }
            })
            .collect();
        let half = n / 2;
        let (twiddle_re, twiddle_im) = (0..half)
            .map(|k| {
                let a = -2.0 * PI * k as f64 / n as f64;
                (a.cos(), a.sin())
            })
            .unzip();
        Self {
            n,
            bitrev,
            twiddle_re,
            twiddle_im,
        }
    }

    pub fn len(&self) -> usize {
        self.n
    }

    pub fn is_empty(&self) -> bool {
        self.n == 0
    }

    /// In-place forward transform, X(k) = Σ x(n)·e^{-2πikn/N}.
    pub fn forward(&self, re: &mut [f64], im: &mut [f64]) {
        let n = self.n;
        assert_eq!(re.len(), n);
        assert_eq!(im.len(), n);
        for i in 0..n {
            let j = self.bitrev[i];
            if j > i {
                re.swap(i, j);
                im.swap(i, j);
            }
        }
        let mut size = 2;
        while size <= n {
            let half = size / 2;
            let step = n / size;
            for start in (0..n).step_by(size) {
                for k in 0..half {
                    let (wr, wi) = (self.twiddle_re[k * step], self.twiddle_im[k * step]);
                    let a = start + k;
                    let b = a + half;
                    let tr = re[b] * wr - im[b] * wi;
                    let ti = re[b] * wi + im[b] * wr;
                    re[b] = re[a] - tr;
                    im[b] = im[a] - ti;
                    re[a] += tr;
                    im[a] += ti;
                }
            }
            size *= 2;
        }
    }

    /// |X(k)|² for k = 0..=N/2 of a real frame zero-padded to N.
    pub fn power(&self, frame: &[f64], out: &mut [f64]) {
        let n = self.n;
        let mut re = vec![0.0; n];
        let mut im = vec![0.0; n];
        re[..frame.len()].copy_from_slice(frame);
        self.forward(&mut re, &mut im);
        for (k, o) in out.iter_mut().enumerate().take(n / 2 + 1) {
            *o = re[k] * re[k] + im[k] * im[k];
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn impulse_is_flat() {
        let fft = Radix2Fft::new(8);
        let mut re = vec![0.0; 8];
        let mut im = vec![0.0; 8];
        re[0] = 1.0;
        fft.forward(&mut re, &mut im);
        assert!(re.iter().all(|v| (v - 1.0).abs() < 1e-15));
        assert!(im.iter().all(|v| v.abs() < 1e-15));
    }

    #[test]
    fn size_one_is_identity() {
        let fft = Radix2Fft::new(1);
        let mut re = vec![3.0];
        let mut im = vec![0.0];
        fft.forward(&mut re, &mut im);
        assert_eq!(re, vec![3.0]);
    }
}
