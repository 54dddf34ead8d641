//! Synthetic modulated baseband signals and an AWGN channel.
//!
//! Linear schemes are drawn from unit-average-energy alphabets and shaped with
//! a root-raised-cosine filter; GFSK and CPFSK are synthesized directly as
//! continuous-phase waveforms. The channel keeps its noise realization so it
//! can be rendered as a modality of its own.

use std::f64::consts::PI;
use std::fmt;
use std::str::FromStr;

use num_complex::Complex64;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{FipError, Result};

/// Samples and noise are snapped to this dyadic grid so that `clean + noise`
/// and `noisy - clean` are both exact in f64 for magnitudes below 2^12.
const GRID: f64 = 1_099_511_627_776.0; // 2^40

/// FSK modulation index (h = 0.5, i.e. MSK / GMSK).
const FSK_INDEX: f64 = 0.5;
const GFSK_BT: f64 = 0.35;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum ModulationScheme {
    #[serde(rename = "BPSK")]
    Bpsk,
    #[serde(rename = "QPSK")]
    Qpsk,
    #[serde(rename = "8PSK")]
    Psk8,
    #[serde(rename = "OQPSK")]
    Oqpsk,
    #[serde(rename = "PAM4")]
    Pam4,
    #[serde(rename = "16QAM")]
    Qam16,
    #[serde(rename = "32QAM")]
    Qam32,
    #[serde(rename = "64QAM")]
    Qam64,
    #[serde(rename = "GFSK")]
    Gfsk,
    #[serde(rename = "CPFSK")]
    Cpfsk,
}

impl ModulationScheme {
    pub const ALL: [ModulationScheme; 10] = [
        ModulationScheme::Bpsk,
        ModulationScheme::Qpsk,
        ModulationScheme::Psk8,
        ModulationScheme::Oqpsk,
        ModulationScheme::Pam4,
        ModulationScheme::Qam16,
        ModulationScheme::Qam32,
        ModulationScheme::Qam64,
        ModulationScheme::Gfsk,
        ModulationScheme::Cpfsk,
    ];

    pub fn index(self) -> usize {
        Self::ALL.iter().position(|&s| s == self).unwrap()
    }

    pub fn from_index(i: usize) -> Option<Self> {
        Self::ALL.get(i).copied()
    }

    pub fn name(self) -> &'static str {
        match self {
            ModulationScheme::Bpsk => "BPSK",
            ModulationScheme::Qpsk => "QPSK",
            ModulationScheme::Psk8 => "8PSK",
            ModulationScheme::Oqpsk => "OQPSK",
            ModulationScheme::Pam4 => "PAM4",
            ModulationScheme::Qam16 => "16QAM",
            ModulationScheme::Qam32 => "32QAM",
            ModulationScheme::Qam64 => "64QAM",
            ModulationScheme::Gfsk => "GFSK",
            ModulationScheme::Cpfsk => "CPFSK",
        }
    }

    pub fn is_linear(self) -> bool {
        !matches!(self, ModulationScheme::Gfsk | ModulationScheme::Cpfsk)
    }

    /// The unit-average-energy symbol alphabet, or `None` for FSK schemes.
    pub fn alphabet(self) -> Option<Vec<Complex64>> {
        let points = match self {
            ModulationScheme::Bpsk => vec![Complex64::new(1.0, 0.0), Complex64::new(-1.0, 0.0)],
            ModulationScheme::Qpsk | ModulationScheme::Oqpsk => psk(4, PI / 4.0),
            ModulationScheme::Psk8 => psk(8, 0.0),
            ModulationScheme::Pam4 => [-3.0, -1.0, 1.0, 3.0]
                .iter()
                .map(|&a| Complex64::new(a, 0.0))
                .collect(),
            ModulationScheme::Qam16 => square_qam(4),
            ModulationScheme::Qam64 => square_qam(8),
            ModulationScheme::Qam32 => {
                // 6x6 grid without its four corners.
                square_qam(6)
                    .into_iter()
                    .filter(|p| !(p.re.abs() == 5.0 && p.im.abs() == 5.0))
                    .collect()
            }
            ModulationScheme::Gfsk | ModulationScheme::Cpfsk => return None,
        };
        Some(normalize_energy(points))
    }
}

impl fmt::Display for ModulationScheme {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for ModulationScheme {
    type Err = FipError;

    fn from_str(s: &str) -> Result<Self> {
        let wanted = s.trim().to_ascii_uppercase();
        Self::ALL
            .iter()
            .copied()
            .find(|m| m.name() == wanted)
            .ok_or_else(|| {
                let valid: Vec<_> = Self::ALL.iter().map(|m| m.name()).collect();
                FipError::invalid(format!(
                    "unknown modulation `{s}`; valid options: {}",
                    valid.join(", ")
                ))
            })
    }
}

fn psk(order: usize, offset: f64) -> Vec<Complex64> {
    (0..order)
        .map(|k| Complex64::from_polar(1.0, offset + 2.0 * PI * k as f64 / order as f64))
        .collect()
}

/// Unnormalized odd-integer grid {±1, ±3, ...}² with `side` levels per axis.
fn square_qam(side: usize) -> Vec<Complex64> {
    let levels: Vec<f64> = (0..side)
        .map(|k| 2.0 * k as f64 - (side as f64 - 1.0))
        .collect();
    let mut out = Vec::with_capacity(side * side);
    for &i in &levels {
        for &q in &levels {
            out.push(Complex64::new(i, q));
        }
    }
    out
}

fn normalize_energy(points: Vec<Complex64>) -> Vec<Complex64> {
    let energy = points.iter().map(|p| p.norm_sqr()).sum::<f64>() / points.len() as f64;
    let scale = energy.sqrt().recip();
    points.into_iter().map(|p| p * scale).collect()
}

fn snap(x: f64) -> f64 {
    (x * GRID).round() / GRID
}

fn snap_c(z: Complex64) -> Complex64 {
    Complex64::new(snap(z.re), snap(z.im))
}

fn mean_power(samples: &[Complex64]) -> f64 {
    if samples.is_empty() {
        return 0.0;
    }
    samples.iter().map(|s| s.norm_sqr()).sum::<f64>() / samples.len() as f64
}

#[derive(Clone, Debug, PartialEq)]
pub struct IqSignal {
    pub samples: Vec<Complex64>,
    pub samples_per_symbol: usize,
    pub n_symbols: usize,
    pub scheme: ModulationScheme,
}

impl IqSignal {
    /// Checks the length contract and that every sample is finite.
    pub fn new(
        samples: Vec<Complex64>,
        samples_per_symbol: usize,
        n_symbols: usize,
        scheme: ModulationScheme,
    ) -> Result<Self> {
        if samples_per_symbol == 0 || n_symbols == 0 {
            return Err(FipError::invalid("samples_per_symbol and n_symbols must be positive"));
        }
        if samples.len() != samples_per_symbol * n_symbols {
            return Err(FipError::invalid(format!(
                "signal length {} != {} symbols x {} samples/symbol",
                samples.len(),
                n_symbols,
                samples_per_symbol
            )));
        }
        if samples.iter().any(|s| !s.re.is_finite() || !s.im.is_finite()) {
            return Err(FipError::NonFinite("IQ sample".into()));
        }
        Ok(IqSignal {
            samples,
            samples_per_symbol,
            n_symbols,
            scheme,
        })
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    /// Mean |x|^2 over samples.
    pub fn power(&self) -> f64 {
        mean_power(&self.samples)
    }

    fn with_samples(&self, samples: Vec<Complex64>) -> IqSignal {
        IqSignal {
            samples,
            samples_per_symbol: self.samples_per_symbol,
            n_symbols: self.n_symbols,
            scheme: self.scheme,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ChannelOutput {
    pub noisy: IqSignal,
    pub noise: IqSignal,
    pub clean: IqSignal,
    pub snr_db: f64,
}

/// Waveform synthesis settings.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SignalConfig {
    pub n_symbols: usize,
    pub samples_per_symbol: usize,
    pub rolloff: f64,
    pub span_symbols: usize,
}

impl Default for SignalConfig {
    fn default() -> Self {
        SignalConfig {
            n_symbols: 1024,
            samples_per_symbol: 4,
            rolloff: 0.35,
            span_symbols: 8,
        }
    }
}

fn random_bits<R: Rng + ?Sized>(n: usize, rng: &mut R) -> Vec<f64> {
    (0..n)
        .map(|_| if rng.gen::<bool>() { 1.0 } else { -1.0 })
        .collect()
}

/// Draws `n_symbols` symbols. Linear schemes sample their alphabet uniformly;
/// FSK schemes return the unit-magnitude phase trajectory at symbol instants.
pub fn generate_symbols<R: Rng + ?Sized>(
    scheme: ModulationScheme,
    n_symbols: usize,
    rng: &mut R,
) -> Result<Vec<Complex64>> {
    if n_symbols == 0 {
        return Err(FipError::invalid("n_symbols must be >= 1"));
    }
    match scheme.alphabet() {
        Some(alphabet) => Ok((0..n_symbols)
            .map(|_| alphabet[rng.gen_range(0..alphabet.len())])
            .collect()),
        None => {
            let bits = random_bits(n_symbols, rng);
            let mut phase = 0.0;
            Ok(bits
                .iter()
                .map(|&b| {
                    let s = Complex64::from_polar(1.0, phase);
                    phase += PI * FSK_INDEX * b;
                    s
                })
                .collect())
        }
    }
}

/// Unit-energy root-raised-cosine taps, `span * sps + 1` long.
pub fn rrc_taps(samples_per_symbol: usize, rolloff: f64, span_symbols: usize) -> Vec<f64> {
    let n_taps = span_symbols * samples_per_symbol + 1;
    let half = (n_taps / 2) as f64;
    let beta = rolloff;
    let mut taps: Vec<f64> = (0..n_taps)
        .map(|n| {
            let t = (n as f64 - half) / samples_per_symbol as f64;
            if t.abs() < 1e-12 {
                1.0 - beta + 4.0 * beta / PI
            } else if beta > 0.0 && (t.abs() - 1.0 / (4.0 * beta)).abs() < 1e-9 {
                beta / 2f64.sqrt()
                    * ((1.0 + 2.0 / PI) * (PI / (4.0 * beta)).sin()
                        + (1.0 - 2.0 / PI) * (PI / (4.0 * beta)).cos())
            } else {
                let num = (PI * t * (1.0 - beta)).sin() + 4.0 * beta * t * (PI * t * (1.0 + beta)).cos();
                let den = PI * t * (1.0 - (4.0 * beta * t).powi(2));
                num / den
            }
        })
        .collect();
    let energy: f64 = taps.iter().map(|h| h * h).sum();
    let scale = energy.sqrt().recip();
    taps.iter_mut().for_each(|h| *h *= scale);
    taps
}

/// Upsamples and filters `symbols` with an RRC pulse, trimmed to
/// `len(symbols) * sps` samples and rescaled to unit average power.
pub fn pulse_shape(
    symbols: &[Complex64],
    samples_per_symbol: usize,
    rolloff: f64,
    span_symbols: usize,
    scheme: ModulationScheme,
) -> Result<IqSignal> {
    if !(0.0..=1.0).contains(&rolloff) {
        return Err(FipError::invalid(format!("rolloff {rolloff} outside [0, 1]")));
    }
    if samples_per_symbol < 2 {
        return Err(FipError::invalid("pulse shaping needs samples_per_symbol >= 2"));
    }
    if symbols.is_empty() || span_symbols == 0 {
        return Err(FipError::invalid("need at least one symbol and a positive span"));
    }
    let taps = rrc_taps(samples_per_symbol, rolloff, span_symbols);
    let delay = taps.len() / 2;
    let n_out = symbols.len() * samples_per_symbol;
    let mut out = vec![Complex64::new(0.0, 0.0); n_out];
    // Output sample i is the full convolution at index i + delay.
    for (k, &sym) in symbols.iter().enumerate() {
        if sym == Complex64::new(0.0, 0.0) {
            continue;
        }
        let pos = k * samples_per_symbol;
        for (j, &h) in taps.iter().enumerate() {
            let full = pos + j;
            if full < delay {
                continue;
            }
            let i = full - delay;
            if i >= n_out {
                break;
            }
            out[i] += sym * h;
        }
    }
    let power = mean_power(&out);
    if power > 0.0 {
        let scale = power.sqrt().recip();
        out.iter_mut().for_each(|s| *s = snap_c(*s * scale));
    }
    IqSignal::new(out, samples_per_symbol, symbols.len(), scheme)
}

fn gaussian_frequency_pulse(samples_per_symbol: usize, bt: f64) -> Vec<f64> {
    // Rectangular symbol pulse convolved with a Gaussian of bandwidth-time product `bt`,
    // truncated to three symbols and normalized to unit area.
    let sps = samples_per_symbol as f64;
    let sigma = (2f64.ln()).sqrt() / (2.0 * PI * bt) * sps;
    let len = 3 * samples_per_symbol;
    let center = (len as f64 - 1.0) / 2.0;
    let mut g: Vec<f64> = (0..len)
        .map(|n| {
            let t = n as f64 - center;
            // Integral of the Gaussian over one symbol width centered at t.
            let a = (t + sps / 2.0) / (sigma * 2f64.sqrt());
            let b = (t - sps / 2.0) / (sigma * 2f64.sqrt());
            erf(a) - erf(b)
        })
        .collect();
    let total: f64 = g.iter().sum();
    g.iter_mut().for_each(|x| *x /= total);
    g
}

/// Abramowitz-Stegun 7.1.26 (|error| < 1.5e-7); only used to shape GFSK pulses.
fn erf(x: f64) -> f64 {
    let sign = x.signum();
    let x = x.abs();
    let t = 1.0 / (1.0 + 0.327_591_1 * x);
    let poly = t
        * (0.254_829_592
            + t * (-0.284_496_736 + t * (1.421_413_741 + t * (-1.453_152_027 + t * 1.061_405_429))));
    sign * (1.0 - poly * (-x * x).exp())
}

fn fsk_waveform(bits: &[f64], samples_per_symbol: usize, gaussian: bool) -> Vec<Complex64> {
    let n = bits.len() * samples_per_symbol;
    let mut freq = vec![0.0; n];
    if gaussian {
        let g = gaussian_frequency_pulse(samples_per_symbol, GFSK_BT);
        let offset = samples_per_symbol; // pulse spans [-1, 2) symbols around its own
        for (k, &b) in bits.iter().enumerate() {
            for (j, &gj) in g.iter().enumerate() {
                let idx = (k * samples_per_symbol + j) as isize - offset as isize;
                if idx >= 0 && (idx as usize) < n {
                    freq[idx as usize] += b * gj * samples_per_symbol as f64;
                }
            }
        }
    } else {
        for (k, &b) in bits.iter().enumerate() {
            for f in &mut freq[k * samples_per_symbol..(k + 1) * samples_per_symbol] {
                *f = b;
            }
        }
    }
    let step = PI * FSK_INDEX / samples_per_symbol as f64;
    let mut phase = 0.0;
    freq.iter()
        .map(|f| {
            let s = Complex64::from_polar(1.0, phase);
            phase += step * f;
            snap_c(s)
        })
        .collect()
}

/// Synthesizes a complete baseband waveform for `scheme`.
pub fn modulate<R: Rng + ?Sized>(
    scheme: ModulationScheme,
    cfg: &SignalConfig,
    rng: &mut R,
) -> Result<IqSignal> {
    let sps = cfg.samples_per_symbol;
    match scheme {
        ModulationScheme::Gfsk | ModulationScheme::Cpfsk => {
            if sps < 2 {
                return Err(FipError::invalid("FSK synthesis needs samples_per_symbol >= 2"));
            }
            let bits = random_bits(cfg.n_symbols, rng);
            let wave = fsk_waveform(&bits, sps, scheme == ModulationScheme::Gfsk);
            IqSignal::new(wave, sps, cfg.n_symbols, scheme)
        }
        ModulationScheme::Oqpsk => {
            let symbols = generate_symbols(scheme, cfg.n_symbols, rng)?;
            let shaped = pulse_shape(&symbols, sps, cfg.rolloff, cfg.span_symbols, scheme)?;
            // Delay the quadrature rail by half a symbol.
            let shift = sps / 2;
            let n = shaped.len();
            let samples = (0..n)
                .map(|i| {
                    let q = if i >= shift { shaped.samples[i - shift].im } else { 0.0 };
                    Complex64::new(shaped.samples[i].re, q)
                })
                .collect();
            IqSignal::new(samples, sps, cfg.n_symbols, scheme)
        }
        _ => {
            let symbols = generate_symbols(scheme, cfg.n_symbols, rng)?;
            pulse_shape(&symbols, sps, cfg.rolloff, cfg.span_symbols, scheme)
        }
    }
}

/// Adds circularly-symmetric complex Gaussian noise at `snr_db` relative to the
/// measured power of `clean`.
pub fn add_awgn<R: Rng + ?Sized>(clean: &IqSignal, snr_db: f64, rng: &mut R) -> Result<ChannelOutput> {
    let p_clean = clean.power();
    if p_clean <= 0.0 {
        return Err(FipError::invalid("cannot set an SNR against a zero-power signal"));
    }
    if !snr_db.is_finite() {
        return Err(FipError::invalid(format!("snr_db must be finite, got {snr_db}")));
    }
    let variance = p_clean / 10f64.powf(snr_db / 10.0);
    let sigma = (variance / 2.0).sqrt();
    let clean_samples: Vec<Complex64> = clean.samples.iter().map(|&s| snap_c(s)).collect();
    let noise: Vec<Complex64> = (0..clean.len())
        .map(|_| {
            let re: f64 = rng.sample(StandardNormal);
            let im: f64 = rng.sample(StandardNormal);
            snap_c(Complex64::new(sigma * re, sigma * im))
        })
        .collect();
    let noisy: Vec<Complex64> = clean_samples
        .iter()
        .zip(&noise)
        .map(|(c, n)| c + n)
        .collect();
    Ok(ChannelOutput {
        noisy: clean.with_samples(noisy),
        noise: clean.with_samples(noise),
        clean: clean.with_samples(clean_samples),
        snr_db,
    })
}

/// 10 log10(P_clean / P_noise).
pub fn measure_snr(clean: &IqSignal, noise: &IqSignal) -> Result<f64> {
    if clean.len() != noise.len() {
        return Err(FipError::invalid(format!(
            "length mismatch: clean {} vs noise {}",
            clean.len(),
            noise.len()
        )));
    }
    let p_noise = noise.power();
    if p_noise <= 0.0 {
        return Err(FipError::invalid("noise power is zero"));
    }
    Ok(10.0 * (clean.power() / p_noise).log10())
}

/// Modulates a fresh waveform and passes it through the channel.
pub fn simulate<R: Rng + ?Sized>(
    scheme: ModulationScheme,
    snr_db: f64,
    cfg: &SignalConfig,
    rng: &mut R,
) -> Result<ChannelOutput> {
    let clean = modulate(scheme, cfg, rng)?;
    add_awgn(&clean, snr_db, rng)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::rng_for;

    fn c(re: f64, im: f64) -> Complex64 {
        Complex64::new(re, im)
    }

    #[test]
    fn alphabets_have_unit_energy() {
        for scheme in ModulationScheme::ALL {
            if let Some(a) = scheme.alphabet() {
                let e = a.iter().map(|p| p.norm_sqr()).sum::<f64>() / a.len() as f64;
                assert!((e - 1.0).abs() < 1e-12, "{scheme}: {e}");
            }
        }
        assert_eq!(ModulationScheme::Qam32.alphabet().unwrap().len(), 32);
        assert_eq!(ModulationScheme::Qam64.alphabet().unwrap().len(), 64);
    }

    #[test]
    fn bpsk_symbols_are_plus_minus_one() {
        let mut rng = rng_for(5, &[]);
        let s = generate_symbols(ModulationScheme::Bpsk, 4, &mut rng).unwrap();
        assert_eq!(s.len(), 4);
        for x in s {
            assert!(x == c(1.0, 0.0) || x == c(-1.0, 0.0));
        }
    }

    #[test]
    fn qpsk_mean_power_near_one() {
        let mut rng = rng_for(11, &[]);
        let s = generate_symbols(ModulationScheme::Qpsk, 10_000, &mut rng).unwrap();
        let p = mean_power(&s);
        assert!((p - 1.0).abs() < 1e-2);
    }

    #[test]
    fn qam16_point_on_scaled_grid() {
        // Average energy of the {±1,±3}² grid is 10, so points sit on odd integers / sqrt(10).
        let mut rng = rng_for(3, &[]);
        let s = generate_symbols(ModulationScheme::Qam16, 1, &mut rng).unwrap()[0];
        let scale = 10f64.sqrt();
        for v in [s.re * scale, s.im * scale] {
            let r = v.round();
            assert!((v - r).abs() < 1e-9);
            assert!([-3.0, -1.0, 1.0, 3.0].contains(&r));
        }
    }

    #[test]
    fn fsk_trajectory_unit_magnitude() {
        let mut rng = rng_for(1, &[]);
        for scheme in [ModulationScheme::Gfsk, ModulationScheme::Cpfsk] {
            let s = generate_symbols(scheme, 64, &mut rng).unwrap();
            assert!(s.iter().all(|z| (z.norm() - 1.0).abs() < 1e-12));
        }
    }

    #[test]
    fn zero_symbols_rejected() {
        let mut rng = rng_for(1, &[]);
        assert!(generate_symbols(ModulationScheme::Bpsk, 0, &mut rng).is_err());
    }

    #[test]
    fn rrc_is_unit_energy_and_symmetric() {
        for beta in [0.0, 0.25, 0.35, 0.5, 1.0] {
            let h = rrc_taps(4, beta, 8);
            assert_eq!(h.len(), 33);
            let e: f64 = h.iter().map(|x| x * x).sum();
            assert!((e - 1.0).abs() < 1e-12);
            for i in 0..h.len() {
                assert!((h[i] - h[h.len() - 1 - i]).abs() < 1e-12);
                assert!(h[i].is_finite());
            }
        }
    }

    #[test]
    fn pulse_shape_length_and_power() {
        let mut rng = rng_for(2, &[]);
        let sym = generate_symbols(ModulationScheme::Qpsk, 4096, &mut rng).unwrap();
        let sig = pulse_shape(&sym, 4, 0.35, 8, ModulationScheme::Qpsk).unwrap();
        assert_eq!(sig.len(), 4 * 4096);
        assert!((sig.power() - 1.0).abs() < 1e-2);
    }

    #[test]
    fn pulse_shape_zero_symbols_give_zero_output() {
        let sym = vec![c(0.0, 0.0); 16];
        let sig = pulse_shape(&sym, 4, 0.35, 8, ModulationScheme::Bpsk).unwrap();
        assert_eq!(sig.len(), 64);
        assert!(sig.samples.iter().all(|s| *s == c(0.0, 0.0)));
    }

    #[test]
    fn pulse_shape_rejects_bad_rolloff() {
        let sym = vec![c(1.0, 0.0); 4];
        assert!(pulse_shape(&sym, 4, 1.5, 8, ModulationScheme::Bpsk).is_err());
        assert!(pulse_shape(&sym, 4, -0.1, 8, ModulationScheme::Bpsk).is_err());
        assert!(pulse_shape(&sym, 1, 0.35, 8, ModulationScheme::Bpsk).is_err());
    }

    #[test]
    fn every_scheme_modulates_to_unit_power() {
        let cfg = SignalConfig::default();
        for scheme in ModulationScheme::ALL {
            let mut rng = rng_for(9, &[scheme.index() as u64]);
            let sig = modulate(scheme, &cfg, &mut rng).unwrap();
            assert_eq!(sig.len(), 4096);
            assert!((sig.power() - 1.0).abs() < 0.05, "{scheme}: {}", sig.power());
        }
    }

    #[test]
    fn measure_snr_identities() {
        let one = IqSignal::new(vec![c(1.0, 0.0); 8], 1, 8, ModulationScheme::Bpsk).unwrap();
        let tenth = IqSignal::new(vec![c(0.1f64.sqrt(), 0.0); 8], 1, 8, ModulationScheme::Bpsk).unwrap();
        assert!(measure_snr(&one, &one).unwrap().abs() < 1e-12);
        assert!((measure_snr(&one, &tenth).unwrap() - 10.0).abs() < 1e-9);
        let zero = IqSignal::new(vec![c(0.0, 0.0); 8], 1, 8, ModulationScheme::Bpsk).unwrap();
        assert!(measure_snr(&one, &zero).is_err());
    }

    #[test]
    fn awgn_hits_requested_snr() {
        let cfg = SignalConfig::default();
        for (i, snr) in [0.0, -10.0, -4.0, 10.0].into_iter().enumerate() {
            let mut rng = rng_for(21, &[i as u64]);
            let out = simulate(ModulationScheme::Qpsk, snr, &cfg, &mut rng).unwrap();
            let measured = measure_snr(&out.clean, &out.noise).unwrap();
            assert!((measured - snr).abs() <= 0.5, "{snr} -> {measured}");
        }
    }

    #[test]
    fn awgn_high_snr_is_nearly_clean() {
        let mut rng = rng_for(4, &[]);
        let out = simulate(ModulationScheme::Qam16, 60.0, &SignalConfig::default(), &mut rng).unwrap();
        let residual: f64 = out
            .noisy
            .samples
            .iter()
            .zip(&out.clean.samples)
            .map(|(a, b)| (a - b).norm_sqr())
            .sum::<f64>()
            / out.clean.len() as f64;
        assert!(residual / out.clean.power() < 1e-2);
    }

    #[test]
    fn channel_is_exactly_additive_and_reproducible() {
        let cfg = SignalConfig::default();
        let run = |seed| {
            let mut rng = rng_for(seed, &[]);
            simulate(ModulationScheme::Qam64, -10.0, &cfg, &mut rng).unwrap()
        };
        let a = run(77);
        for i in 0..a.noisy.len() {
            assert_eq!(a.noisy.samples[i], a.clean.samples[i] + a.noise.samples[i]);
            assert_eq!(a.noisy.samples[i] - a.clean.samples[i], a.noise.samples[i]);
        }
        assert_eq!(a, run(77));
        assert_ne!(a, run(78));
    }

    #[test]
    fn zero_power_clean_rejected() {
        let z = IqSignal::new(vec![c(0.0, 0.0); 8], 1, 8, ModulationScheme::Bpsk).unwrap();
        let mut rng = rng_for(0, &[]);
        assert!(add_awgn(&z, 0.0, &mut rng).is_err());
    }

    #[test]
    fn scheme_names_round_trip() {
        for s in ModulationScheme::ALL {
            assert_eq!(s.name().parse::<ModulationScheme>().unwrap(), s);
            assert_eq!(ModulationScheme::from_index(s.index()), Some(s));
        }
        let err = "QAM7".parse::<ModulationScheme>().unwrap_err().to_string();
        assert!(err.contains("64QAM"));
    }
}
