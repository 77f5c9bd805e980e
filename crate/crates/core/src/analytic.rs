//! Closed-form reference results: stationary spectra, the quenched
//! Ornstein–Uhlenbeck process and harmonic (Hermite) noise.

use nalgebra::DMatrix;
use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kernel::{KernelSpec, PolynomialKernel};

/// `𝔻(ω) = Σ D_k^H ω^{2k} + i Σ D_k^A ω^{2k−1}`.
pub fn stationary_symbol(p: &PolynomialKernel, omega: f64) -> DMatrix<Complex64> {
    let n = p.dim;
    let mut out = DMatrix::<Complex64>::zeros(n, n);
    for (k, h) in p.hermitian.iter().enumerate() {
        let w = omega.powi(2 * k as i32);
        out += h.map(|v| Complex64::new(v * w, 0.0));
    }
    for (km1, a) in p.antisymmetric.iter().enumerate() {
        if let Some(a) = a {
            let w = omega.powi(2 * km1 as i32 + 1);
            out += a.map(|v| Complex64::new(0.0, v * w));
        }
    }
    out
}

/// `S(ω) = 𝔻(ω)⁻¹`.
pub fn stationary_spectrum(spec: &KernelSpec, omega: f64) -> Result<DMatrix<Complex64>> {
    let KernelSpec::StationaryPolynomial(p) = spec else {
        return Err(Error::InvalidModel("stationary spectrum needs a stationary polynomial kernel".into()));
    };
    let d = stationary_symbol(p, omega);
    d.try_inverse()
        .filter(|m| m.iter().all(|z| z.re.is_finite() && z.im.is_finite()))
        .ok_or_else(|| Error::SingularKernel(format!("D(ω) singular at ω={omega}")))
}

/// Scalar convenience: `S(ω)` of a one-channel stationary kernel.
pub fn stationary_spectrum_scalar(spec: &KernelSpec, omega: f64) -> Result<f64> {
    if spec.dim() != 1 {
        return Err(Error::InvalidModel("scalar spectrum needs a one-channel kernel".into()));
    }
    Ok(stationary_spectrum(spec, omega)?[(0, 0)].re)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct QuenchedOUParams {
    pub d0: f64,
    pub d1: f64,
}

impl QuenchedOUParams {
    pub fn new(d0: f64, d1: f64) -> Result<Self> {
        if !(d0 > 0.0 && d1 > 0.0) {
            return Err(Error::InvalidModel(format!("need D0 > 0 and D1 > 0, got {d0}, {d1}")));
        }
        Ok(Self { d0, d1 })
    }

    pub fn tau(&self) -> f64 {
        (self.d1 / self.d0).sqrt()
    }

    pub fn kernel(&self) -> KernelSpec {
        KernelSpec::ornstein_uhlenbeck(self.d0, self.d1)
    }

    /// Stationary variance `1/(2 D0 τ)`.
    pub fn stationary_variance(&self) -> f64 {
        1.0 / (2.0 * self.d0 * self.tau())
    }
}

/// `𝔾(t,t′) = [e^{−|t−t′|/τ} − e^{−(t+t′)/τ}] / (2 D0 τ)` for `t, t′ ≥ 0`.
pub fn quenched_ou_correlation(p: &QuenchedOUParams, t: f64, t_prime: f64) -> f64 {
    if t <= 0.0 || t_prime <= 0.0 {
        return 0.0;
    }
    let tau = p.tau();
    p.stationary_variance() * ((-(t - t_prime).abs() / tau).exp() - (-(t + t_prime) / tau).exp())
}

/// The two parts of the quenched bispectrum.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct QuenchBispectrum {
    /// Regular part `−(τ/4πD0) / ((1 − iω₁τ)(1 + iω₂τ))`.
    pub regular: Complex64,
    /// Weight of `δ(ω₁ − ω₂)`: the stationary Lorentzian `1/(D0(1 + ω₁²τ²))`.
    pub diagonal_lorentzian: f64,
}

pub fn quenched_ou_bispectrum(p: &QuenchedOUParams, omega1: f64, omega2: f64) -> QuenchBispectrum {
    let tau = p.tau();
    let den = Complex64::new(1.0, -omega1 * tau) * Complex64::new(1.0, omega2 * tau);
    QuenchBispectrum {
        regular: -(tau / (4.0 * std::f64::consts::PI * p.d0)) / den,
        diagonal_lorentzian: 1.0 / (p.d0 * (1.0 + omega1 * omega1 * tau * tau)),
    }
}

/// CW attenuation under the quenched process, split into parts.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct QuenchCwAttenuation {
    /// `(f|𝔾₀|f)` with the stationary correlation.
    pub stationary_overlap: f64,
    /// Quench correction to `(f|𝔾|f)`.
    pub quench_overlap: f64,
    /// `½[(f|𝔾₀|f) + quench]`.
    pub chi: f64,
}

/// Closed-form quench correction to `(f|𝔾|f)` for
/// `f = g cos(ω(t − t0))` on `[t0, t0 + T]`.
pub fn quench_overlap_correction(p: &QuenchedOUParams, g: f64, omega: f64, t0: f64, duration: f64) -> f64 {
    let tau = p.tau();
    let wt = omega * tau;
    let bracket = (1.0 + (wt * (omega * duration).sin() - (omega * duration).cos()) * (-duration / tau).exp())
        / (1.0 + wt * wt);
    -(g * g * tau / (2.0 * p.d0)) * bracket * bracket * (-2.0 * t0 / tau).exp()
}

/// Stationary overlap `(f|𝔾₀|f)` for the CW window, reduced to the lag
/// integral `2∫₀ᵀ C(s) 𝔾₀(s) ds` with `C(s) = ∫ f(t) f(t+s) dt` and evaluated
/// with composite Gauss–Legendre quadrature.
fn stationary_cw_overlap(p: &QuenchedOUParams, g: f64, omega: f64, duration: f64) -> f64 {
    let tau = p.tau();
    let var = p.stationary_variance();
    let autocorr = |s: f64| -> f64 {
        // ∫_0^{T−s} cos(ωu) cos(ω(u+s)) du
        let l = duration - s;
        let a = 0.5 * l * (omega * s).cos();
        let b = if omega.abs() < 1e-12 {
            0.5 * l * (omega * s).cos()
        } else {
            0.25 * ((omega * (2.0 * l + s)).sin() - (omega * s).sin()) / omega
        };
        g * g * (a + b)
    };
    let integrand = |s: f64| autocorr(s) * var * (-s / tau).exp();
    let panels = ((duration / tau.min(duration)) * 8.0 + omega.abs() * duration * 2.0).ceil().max(32.0) as usize;
    2.0 * gauss_legendre(integrand, 0.0, duration, panels)
}

fn gauss_legendre(f: impl Fn(f64) -> f64, a: f64, b: f64, panels: usize) -> f64 {
    const X: [f64; 5] = [
        0.0,
        0.538_469_310_105_683_1,
        -0.538_469_310_105_683_1,
        0.906_179_845_938_664,
        -0.906_179_845_938_664,
    ];
    const W: [f64; 5] = [
        0.568_888_888_888_888_9,
        0.478_628_670_499_366_5,
        0.478_628_670_499_366_5,
        0.236_926_885_056_189_1,
        0.236_926_885_056_189_1,
    ];
    let h = (b - a) / panels as f64;
    let mut total = 0.0;
    for i in 0..panels {
        let mid = a + (i as f64 + 0.5) * h;
        for (x, w) in X.iter().zip(W.iter()) {
            total += w * f(mid + 0.5 * h * x);
        }
    }
    0.5 * h * total
}

pub fn quenched_cw_attenuation(
    p: &QuenchedOUParams,
    g: f64,
    omega: f64,
    t0: f64,
    duration: f64,
) -> Result<QuenchCwAttenuation> {
    if !(t0 >= 0.0 && duration > 0.0) {
        return Err(Error::Domain(format!("need t0 ≥ 0 and T > 0, got {t0}, {duration}")));
    }
    let stationary = stationary_cw_overlap(p, g, omega, duration);
    let quench = quench_overlap_correction(p, g, omega, t0, duration);
    Ok(QuenchCwAttenuation {
        stationary_overlap: stationary,
        quench_overlap: quench,
        chi: 0.5 * (stationary + quench),
    })
}

/// Quench term as `−(1/(2D0τ)) |∫ f(t) e^{−t/τ} dt|²`, an independent form
/// of [`quench_overlap_correction`].
#[cfg(test)]
fn exact_quench_overlap(p: &QuenchedOUParams, g: f64, omega: f64, t0: f64, duration: f64) -> f64 {
    let tau = p.tau();
    // ∫_0^T cos(ωu) e^{−u/τ} du
    let lam = 1.0 / tau;
    let e = (-duration * lam).exp();
    let c = (lam + e * (omega * (omega * duration).sin() - lam * (omega * duration).cos())) / (lam * lam + omega * omega);
    let amp = g * (-t0 / tau).exp() * c;
    -p.stationary_variance() * amp * amp
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HarmonicNoiseParams {
    pub d0: f64,
    pub d1: f64,
    pub alpha: f64,
}

impl HarmonicNoiseParams {
    pub fn new(d0: f64, d1: f64, alpha: f64) -> Result<Self> {
        let p = Self { d0, d1, alpha };
        if !(alpha > 0.0 && d1 > 0.0) {
            return Err(Error::InvalidModel(format!("need α > 0 and D1 > 0, got {alpha}, {d1}")));
        }
        if !(p.omega0() > -2.0 * d0) {
            return Err(Error::InvalidModel(format!(
                "kernel not positive definite: ω0 = {} ≤ −2 D0 = {}",
                p.omega0(),
                -2.0 * d0
            )));
        }
        Ok(p)
    }

    /// `ω0 = √(4αD1)`.
    pub fn omega0(&self) -> f64 {
        (4.0 * self.alpha * self.d1).sqrt()
    }

    /// Mode label `Ω_n = (n + ½)ω0`.
    pub fn level(&self, n: usize) -> f64 {
        (n as f64 + 0.5) * self.omega0()
    }

    pub fn kernel(&self) -> KernelSpec {
        KernelSpec::harmonic(self.d0, self.d1, self.alpha)
    }

    /// Length scale `(D1/α)^{1/4}` of the mode functions.
    pub fn length(&self) -> f64 {
        (self.d1 / self.alpha).powf(0.25)
    }
}

/// Normalised Hermite function `ψ_n(x)` by the stable recurrence.
pub fn hermite_function(n: usize, x: f64) -> f64 {
    let mut prev = 0.0;
    let mut cur = std::f64::consts::PI.powf(-0.25) * (-0.5 * x * x).exp();
    for k in 0..n {
        let next = (2.0 / (k as f64 + 1.0)).sqrt() * x * cur - (k as f64 / (k as f64 + 1.0)).sqrt() * prev;
        prev = cur;
        cur = next;
    }
    cur
}

/// Eigenmode `(t|Ω_n) = ℓ^{−1/2} ψ_n(t/ℓ)`, `ℓ = (D1/α)^{1/4}`.
pub fn harmonic_mode(p: &HarmonicNoiseParams, n: usize, t: f64) -> f64 {
    let l = p.length();
    hermite_function(n, t / l) / l.sqrt()
}

/// `S(Ω_n) = 1/((n + ½)ω0 + D0)`.
pub fn harmonic_spectrum(p: &HarmonicNoiseParams, n: usize) -> Result<f64> {
    let denom = p.level(n) + p.d0;
    if !(denom > 0.0) {
        return Err(Error::InvalidModel(format!("non-positive kernel eigenvalue {denom}")));
    }
    Ok(1.0 / denom)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MarkovVerdict {
    pub markovian: bool,
    pub reason: String,
}

/// Whether the process `B` alone is Markovian: local in time with no
/// coefficients beyond first order.
pub fn is_markovian(spec: &KernelSpec) -> MarkovVerdict {
    match spec.effective_order() {
        None => MarkovVerdict {
            markovian: false,
            reason: "not local-in-time".into(),
        },
        Some(n) if n <= 1 => MarkovVerdict {
            markovian: true,
            reason: format!("local-in-time of order {n}"),
        },
        Some(n) => MarkovVerdict {
            markovian: false,
            reason: format!(
                "local-in-time of order {n}: derivatives up to order {} carry memory",
                n - 1
            ),
        },
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn lorentzian_and_quartic_spectra() {
        let ou = KernelSpec::ornstein_uhlenbeck(1.0, 1.0);
        assert!((stationary_spectrum_scalar(&ou, 1.0).unwrap() - 0.5).abs() < 1e-15);
        let q = KernelSpec::quartic(1.0, 1.0);
        for w in [0.0, 0.7, 3.0, 30.0] {
            let s = stationary_spectrum_scalar(&q, w).unwrap();
            assert!((s - 1.0 / (1.0 + w.powi(4))).abs() < 1e-15);
        }
        let s0 = stationary_spectrum_scalar(&KernelSpec::stationary_scalar(&[2.5, 1.0]), 0.0).unwrap();
        assert!((s0 - 0.4).abs() < 1e-15);
    }

    #[test]
    fn singular_symbol_reported() {
        let spec = KernelSpec::stationary_scalar(&[0.0, 1.0]);
        assert!(stationary_spectrum(&spec, 0.0).is_err());
    }

    #[test]
    fn quenched_correlation_values() {
        let p = QuenchedOUParams::new(1.0, 1.0).unwrap();
        assert_eq!(quenched_ou_correlation(&p, 0.0, 2.0), 0.0);
        assert!((quenched_ou_correlation(&p, 1.0, 1.0) - 0.432_332_358_381_693_6).abs() < 1e-12);
        let far = quenched_ou_correlation(&p, 40.0, 41.0);
        assert!((far - 0.5 * (-1.0f64).exp()).abs() < 1e-12);
    }

    #[test]
    fn bispectrum_values() {
        let p = QuenchedOUParams::new(1.0, 1.0).unwrap();
        let b = quenched_ou_bispectrum(&p, 0.0, 0.0);
        assert!((b.regular.re + 1.0 / (4.0 * std::f64::consts::PI)).abs() < 1e-15);
        let x = quenched_ou_bispectrum(&p, 0.3, -1.2).regular;
        let y = quenched_ou_bispectrum(&p, -1.2, 0.3).regular;
        assert!((x - y.conj()).norm() < 1e-15);
        assert!(quenched_ou_bispectrum(&p, 1e6, 1e6).regular.norm() < 1e-12);
        assert!((b.diagonal_lorentzian - 1.0).abs() < 1e-15);
    }

    #[test]
    fn closed_form_quench_term_matches_direct_integral() {
        let p = QuenchedOUParams::new(1.3, 0.7).unwrap();
        for &(w, t0, t) in &[(0.0, 0.0, 5.0), (1.1, 0.4, 3.0), (4.0, 2.0, 7.5)] {
            let a = quench_overlap_correction(&p, 0.8, w, t0, t);
            let b = exact_quench_overlap(&p, 0.8, w, t0, t);
            assert!((a - b).abs() < 1e-12 * (1.0 + a.abs()), "{a} vs {b}");
        }
        let long = quench_overlap_correction(&QuenchedOUParams::new(1.0, 1.0).unwrap(), 1.0, 0.0, 0.0, 60.0);
        assert!((long + 0.5).abs() < 1e-12);
    }

    #[test]
    fn stationary_cw_overlap_free_limit() {
        // ω = 0 reduces to 2 var ∫_0^T (T−s) e^{−s/τ} ds = T − τ(1 − e^{−T/τ}) for D0=D1=1.
        let p = QuenchedOUParams::new(1.0, 1.0).unwrap();
        let v = stationary_cw_overlap(&p, 1.0, 0.0, 5.0);
        let exact = 5.0 - (1.0 - (-5.0f64).exp());
        assert!((v - exact).abs() < 1e-10, "{v}");
        // Brute-force double integral for ω ≠ 0.
        let (w, t) = (1.7, 2.5);
        let n = 1200;
        let h = t / n as f64;
        let mut brute = 0.0;
        for i in 0..n {
            for j in 0..n {
                let (a, b) = ((i as f64 + 0.5) * h, (j as f64 + 0.5) * h);
                brute += (w * a).cos() * (w * b).cos() * 0.5 * (-(a - b).abs()).exp();
            }
        }
        brute *= h * h;
        let v = stationary_cw_overlap(&p, 1.0, w, t);
        assert!((v - brute).abs() < 1e-5, "{v} vs {brute}");
    }

    #[test]
    fn harmonic_levels_and_modes() {
        let p = HarmonicNoiseParams::new(0.0, 1.0, 1.0).unwrap();
        let s: Vec<f64> = (0..3).map(|n| harmonic_spectrum(&p, n).unwrap()).collect();
        assert!((s[0] - 1.0).abs() < 1e-15 && (s[1] - 1.0 / 3.0).abs() < 1e-15 && (s[2] - 0.2).abs() < 1e-15);
        // Orthonormality by quadrature.
        let q = HarmonicNoiseParams::new(0.5, 0.7, 1.9).unwrap();
        let h = 0.002;
        for m in 0..6 {
            for n in 0..6 {
                let mut acc = 0.0;
                let mut t = -12.0;
                while t <= 12.0 {
                    acc += h * harmonic_mode(&q, m, t) * harmonic_mode(&q, n, t);
                    t += h;
                }
                let e = if m == n { 1.0 } else { 0.0 };
                assert!((acc - e).abs() < 1e-6, "({m},{n}) {acc}");
            }
        }
        let peak = harmonic_mode(&q, 0, 0.0);
        assert!(peak > harmonic_mode(&q, 0, 0.1) && peak > harmonic_mode(&q, 0, -0.1));
        assert!(HarmonicNoiseParams::new(-1.5, 1.0, 1.0).is_err());
    }

    #[test]
    fn hermite_functions_stable_at_high_order() {
        let v = hermite_function(150, 3.0);
        assert!(v.is_finite() && v.abs() < 1.0);
    }

    #[test]
    fn markov_verdicts() {
        assert!(is_markovian(&KernelSpec::ornstein_uhlenbeck(1.0, 1.0)).markovian);
        assert!(is_markovian(&KernelSpec::white(1.0)).markovian);
        assert!(!is_markovian(&KernelSpec::quartic(1.0, 1.0)).markovian);
        let dense = KernelSpec::dense(1, |_, _| DMatrix::from_element(1, 1, 1.0), None);
        let v = is_markovian(&dense);
        assert!(!v.markovian);
        assert_eq!(v.reason, "not local-in-time");
    }
}
