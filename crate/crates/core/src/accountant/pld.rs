//! Privacy-loss distributions on a uniform grid, composed by convolution.
//!
//! Discretization is pessimistic: loss values are rounded up to the grid,
//! truncated lower tails are moved up to the lowest kept bin and truncated
//! upper tails are moved to the point at infinity. Every operation therefore
//! overestimates `δ(ε)`.

use rustfft::num_complex::Complex;
use rustfft::FftPlanner;
use serde::{Deserialize, Serialize};

use crate::mechanisms::normal_cdf;

/// Losses beyond ±`LOSS_CAP` nats are treated as the extremes: mass above is
/// moved to infinity, mass below is moved up to `-LOSS_CAP`.
pub const LOSS_CAP: f64 = 50.0;
/// Tail mass below which bins are folded away after each composition.
const TAIL: f64 = 1e-18;
/// Standard deviations kept around the mean of a Gaussian loss.
const SD_RANGE: f64 = 9.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PldHistogram {
    pub grid_spacing: f64,
    /// Grid index of `masses[0]`; bin `i` holds loss `(origin + i)·h`.
    pub origin: i64,
    pub masses: Vec<f64>,
    pub mass_at_infinity: f64,
    pub pessimistic: bool,
}

impl PldHistogram {
    /// Loss identically zero: the result of composing nothing.
    pub fn identity(grid_spacing: f64) -> Self {
        PldHistogram {
            grid_spacing,
            origin: 0,
            masses: vec![1.0],
            mass_at_infinity: 0.0,
            pessimistic: true,
        }
    }

    /// Loss of the Gaussian mechanism, `L ~ N(μ, 2μ)` with `μ = Δ²/(2σ²)`.
    pub fn gaussian(sigma: f64, delta_sensitivity: f64, grid_spacing: f64) -> Self {
        let h = grid_spacing;
        let mu = delta_sensitivity * delta_sensitivity / (2.0 * sigma * sigma);
        let sd = (2.0 * mu).sqrt();
        let cdf = |x: f64| normal_cdf((x - mu) / sd);
        let sf = |x: f64| normal_cdf((mu - x) / sd);
        let hi = (mu + SD_RANGE * sd).min(LOSS_CAP);
        let lo = (mu - SD_RANGE * sd).max(-LOSS_CAP).min(hi);
        let i0 = (lo / h).ceil() as i64;
        let i1 = ((hi / h).ceil() as i64).max(i0);
        let mut masses = Vec::with_capacity((i1 - i0 + 1) as usize);
        masses.push(cdf(i0 as f64 * h));
        for i in (i0 + 1)..=i1 {
            let (a, b) = ((i - 1) as f64 * h, i as f64 * h);
            let p = if a >= mu { sf(a) - sf(b) } else { cdf(b) - cdf(a) };
            masses.push(p.max(0.0));
        }
        let mut out = PldHistogram {
            grid_spacing: h,
            origin: i0,
            masses,
            mass_at_infinity: sf(i1 as f64 * h),
            pessimistic: true,
        };
        out.normalize();
        out
    }

    pub fn total_mass(&self) -> f64 {
        self.masses.iter().sum::<f64>() + self.mass_at_infinity
    }

    pub fn compose(&self, other: &PldHistogram) -> PldHistogram {
        assert_eq!(self.grid_spacing, other.grid_spacing, "grid spacings must match");
        let mut out = PldHistogram {
            grid_spacing: self.grid_spacing,
            origin: self.origin + other.origin,
            masses: convolve(&self.masses, &other.masses),
            mass_at_infinity: 1.0 - (1.0 - self.mass_at_infinity) * (1.0 - other.mass_at_infinity),
            pessimistic: self.pessimistic && other.pessimistic,
        };
        out.normalize();
        out
    }

    /// `m`-fold composition by repeated squaring.
    pub fn self_compose(&self, mut m: u64) -> PldHistogram {
        let mut result = PldHistogram::identity(self.grid_spacing);
        let mut base = self.clone();
        while m > 0 {
            if m & 1 == 1 {
                result = result.compose(&base);
            }
            m >>= 1;
            if m > 0 {
                base = base.compose(&base);
            }
        }
        result
    }

    /// `δ(ε) = P[L = ∞] + Σ_{l > ε} p_l (1 − e^{ε − l})`.
    pub fn delta_at(&self, epsilon: f64) -> f64 {
        let h = self.grid_spacing;
        let mut d = self.mass_at_infinity;
        for (i, p) in self.masses.iter().enumerate().rev() {
            let l = (self.origin + i as i64) as f64 * h;
            if l <= epsilon {
                break;
            }
            d += p * (-(epsilon - l).exp_m1());
        }
        d.clamp(0.0, 1.0)
    }

    fn normalize(&mut self) {
        for p in &mut self.masses {
            if !(*p > 0.0) {
                *p = 0.0;
            }
        }
        let h = self.grid_spacing;
        // Fold bins above the cap into infinity.
        let cap_index = (LOSS_CAP / h).floor() as i64;
        let last_allowed = cap_index - self.origin;
        if last_allowed < self.masses.len() as i64 - 1 {
            let keep = (last_allowed + 1).max(1) as usize;
            let spill: f64 = self.masses[keep..].iter().sum();
            self.masses.truncate(keep);
            self.mass_at_infinity += spill;
        }
        // Fold bins below the floor up to the floor.
        let floor_index = -cap_index;
        if self.origin < floor_index {
            let drop = ((floor_index - self.origin) as usize).min(self.masses.len() - 1);
            let moved: f64 = self.masses[..drop].iter().sum();
            self.masses.drain(..drop);
            self.masses[0] += moved;
            self.origin += drop as i64;
        }
        // Upper tail to infinity.
        let mut acc = 0.0;
        let mut end = self.masses.len();
        while end > 1 && acc + self.masses[end - 1] <= TAIL {
            acc += self.masses[end - 1];
            end -= 1;
        }
        self.masses.truncate(end);
        self.mass_at_infinity += acc;
        // Lower tail up to the first kept bin.
        let mut acc = 0.0;
        let mut start = 0;
        while start + 1 < self.masses.len() && acc + self.masses[start] <= TAIL {
            acc += self.masses[start];
            start += 1;
        }
        if start > 0 {
            self.masses.drain(..start);
            self.masses[0] += acc;
            self.origin += start as i64;
        }
        self.mass_at_infinity = self.mass_at_infinity.min(1.0);
    }
}

fn convolve(a: &[f64], b: &[f64]) -> Vec<f64> {
    let n = a.len() + b.len() - 1;
    if a.len().min(b.len()) <= 64 || a.len() * b.len() <= 1 << 16 {
        let mut out = vec![0.0; n];
        for (i, x) in a.iter().enumerate() {
            if *x == 0.0 {
                continue;
            }
            for (j, y) in b.iter().enumerate() {
                out[i + j] += x * y;
            }
        }
        return out;
    }
    // Both real inputs share one complex transform: z = a + i·b, and their
    // spectra are recovered from the conjugate symmetry of z's spectrum.
    let size = smooth_size(n);
    let (fwd, inv) = PLANS.with(|p| {
        let mut p = p.borrow_mut();
        (p.plan_fft_forward(size), p.plan_fft_inverse(size))
    });
    let mut z = vec![Complex::new(0.0, 0.0); size];
    for (i, x) in a.iter().enumerate() {
        z[i].re = *x;
    }
    for (i, y) in b.iter().enumerate() {
        z[i].im = *y;
    }
    fwd.process(&mut z);
    let mut prod = vec![Complex::new(0.0, 0.0); size];
    for k in 0..size {
        let zk = z[k];
        let zc = z[(size - k) % size].conj();
        let fa = (zk + zc) * 0.5;
        let fb = (zk - zc) * Complex::new(0.0, -0.5);
        prod[k] = fa * fb;
    }
    inv.process(&mut prod);
    let scale = 1.0 / size as f64;
    prod.iter().take(n).map(|c| c.re * scale).collect()
}

thread_local! {
    static PLANS: std::cell::RefCell<FftPlanner<f64>> = std::cell::RefCell::new(FftPlanner::new());
}

/// Smallest `m ≥ n` of the form `2^a·3^b·5^c`.
fn smooth_size(n: usize) -> usize {
    let mut best = n.next_power_of_two();
    let mut p5 = 1;
    while p5 < best {
        let mut p35 = p5;
        while p35 < best {
            let mut m = p35;
            while m < n {
                m *= 2;
            }
            best = best.min(m);
            p35 *= 3;
        }
        p5 *= 5;
    }
    best
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mechanisms::gaussian_delta;

    #[test]
    fn fft_convolution_matches_direct_sum() {
        let a: Vec<f64> = (0..700).map(|i| ((i * 37 % 101) as f64).sin().abs()).collect();
        let b: Vec<f64> = (0..523).map(|i| ((i * 17 % 89) as f64).cos().abs()).collect();
        let fast = convolve(&a, &b);
        for (k, got) in fast.iter().enumerate() {
            let want: f64 = (0..a.len()).filter(|i| k >= *i && k - i < b.len()).map(|i| a[i] * b[k - i]).sum();
            assert!((got - want).abs() < 1e-9, "{k}: {got} vs {want}");
        }
    }

    #[test]
    fn smooth_sizes() {
        assert_eq!(smooth_size(1000), 1000);
        assert_eq!(smooth_size(1001), 1024);
        assert_eq!(smooth_size(1025), 1080);
        for n in 1..3000 {
            let m = smooth_size(n);
            assert!(m >= n && m <= n.next_power_of_two());
        }
    }

    #[test]
    fn mass_is_conserved() {
        for sigma in [0.5, 1.0, 5.0, 40.0] {
            let p = PldHistogram::gaussian(sigma, 1.0, 1e-4);
            assert!((p.total_mass() - 1.0).abs() < 1e-12, "{}", p.total_mass());
            let q = p.compose(&p).compose(&p);
            assert!((q.total_mass() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn single_gaussian_is_sound_and_tight() {
        for &(sigma, eps) in &[(1.0, 0.5), (3.0, 0.3), (10.0, 0.1)] {
            let p = PldHistogram::gaussian(sigma, 1.0, 1e-4);
            let exact = gaussian_delta(eps, sigma, 1.0);
            let got = p.delta_at(eps);
            assert!(got >= exact, "{got} < {exact}");
            assert!(got <= exact * 1.01 + 1e-15, "{got} vs {exact}");
        }
    }

    #[test]
    fn composition_matches_closed_form() {
        // m Gaussians with scale σ compose to one with scale σ/√m.
        let p = PldHistogram::gaussian(8.0, 1.0, 1e-4);
        let c = p.self_compose(16);
        let exact = gaussian_delta(0.5, 2.0, 1.0);
        let got = c.delta_at(0.5);
        assert!(got >= exact && got <= exact * 1.05, "{got} vs {exact}");
    }

    #[test]
    fn fft_and_direct_agree() {
        let a: Vec<f64> = (0..300).map(|i| ((i as f64) * 0.37).sin().abs()).collect();
        let b: Vec<f64> = (0..500).map(|i| ((i as f64) * 0.11).cos().abs()).collect();
        let fast = convolve(&a, &b);
        let mut slow = vec![0.0; a.len() + b.len() - 1];
        for (i, x) in a.iter().enumerate() {
            for (j, y) in b.iter().enumerate() {
                slow[i + j] += x * y;
            }
        }
        for (f, s) in fast.iter().zip(&slow) {
            assert!((f - s).abs() < 1e-9);
        }
    }

    #[test]
    fn huge_loss_goes_to_infinity() {
        let p = PldHistogram::gaussian(1e-6, 1.0, 1e-4);
        assert!(p.mass_at_infinity > 0.999);
        assert!((p.total_mass() - 1.0).abs() < 1e-12);
        assert!(p.masses.len() <= 2 * (LOSS_CAP / 1e-4) as usize + 2);
    }
}
