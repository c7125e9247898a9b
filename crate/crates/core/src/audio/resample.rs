use super::{AudioClip, AudioError};

/// Zero crossings of the sinc kernel on each side of its center, counted at
/// the lower of the two rates.
const ZERO_CROSSINGS: usize = 32;
/// Passband edge as a fraction of the lower Nyquist frequency.
const ROLLOFF: f64 = 0.97;
const KAISER_BETA: f64 = 8.6;
/// Above this many phases the kernel is evaluated on the fly instead of
/// tabulated.
const MAX_TABLE_PHASES: usize = 4096;

/// Band-limited resampling with a Kaiser-windowed sinc kernel evaluated on a
/// polyphase grid. Output length is `round(len * target / source)`; input
/// samples outside the clip are treated as zero.
pub fn resample(clip: &AudioClip, target_rate: u32) -> Result<AudioClip, AudioError> {
    if target_rate == 0 {
        return Err(AudioError::InvalidRate(target_rate));
    }
    if clip.sample_rate == 0 {
        return Err(AudioError::InvalidRate(clip.sample_rate));
    }
    if clip.sample_rate == target_rate {
        return Ok(clip.clone());
    }
    let g = gcd(clip.sample_rate as u64, target_rate as u64);
    let up = target_rate as u64 / g;
    let down = clip.sample_rate as u64 / g;
    let n_in = clip.samples.len() as u64;
    let n_out = (n_in * up + down / 2) / down;

    let kernel = Kernel::new(up, down);
    let table = (up as usize <= MAX_TABLE_PHASES).then(|| kernel.table());

    let x = &clip.samples;
    let half = kernel.half_taps as i64;
    let mut out = Vec::with_capacity(n_out as usize);
    let mut scratch = vec![0.0; 2 * kernel.half_taps];
    for n in 0..n_out {
        let pos = n * down;
        let base = (pos / up) as i64;
        let phase = (pos % up) as usize;
        let taps: &[f64] = match &table {
            Some(t) => &t[phase],
            None => {
                kernel.fill_phase(phase, &mut scratch);
                &scratch
            }
        };
        // taps[j] weighs input sample base - half + 1 + j
        let first = base - half + 1;
        let lo = (-first).max(0) as usize;
        let hi = ((n_in as i64 - first).min(taps.len() as i64)).max(0) as usize;
        let mut acc = 0.0;
        for j in lo..hi {
            acc += taps[j] * x[(first + j as i64) as usize];
        }
        out.push(acc);
    }
    AudioClip::new(out, target_rate)
}

struct Kernel {
    up: u64,
    cutoff: f64,
    half_width: f64,
    half_taps: usize,
}

impl Kernel {
    fn new(up: u64, down: u64) -> Self {
        // cycles per input sample
        let cutoff = 0.5 * ROLLOFF * (up as f64 / down as f64).min(1.0);
        let half_width = ZERO_CROSSINGS as f64 / (2.0 * cutoff);
        Self {
            up,
            cutoff,
            half_width,
            half_taps: half_width.ceil() as usize + 1,
        }
    }

    fn table(&self) -> Vec<Vec<f64>> {
        (0..self.up as usize)
            .map(|p| {
                let mut taps = vec![0.0; 2 * self.half_taps];
                self.fill_phase(p, &mut taps);
                taps
            })
            .collect()
    }

    fn fill_phase(&self, phase: usize, taps: &mut [f64]) {
        let frac = phase as f64 / self.up as f64;
        let half = self.half_taps as f64;
        for (j, tap) in taps.iter_mut().enumerate() {
            // distance from the output position to input sample base - half + 1 + j
            let tau = frac + half - 1.0 - j as f64;
            *tap = self.eval(tau);
        }
    }

    fn eval(&self, tau: f64) -> f64 {
        if tau.abs() >= self.half_width {
            return 0.0;
        }
        let r = tau / self.half_width;
        let window = bessel_i0(KAISER_BETA * (1.0 - r * r).sqrt()) / bessel_i0(KAISER_BETA);
        2.0 * self.cutoff * sinc(2.0 * self.cutoff * tau) * window
    }
}

fn sinc(x: f64) -> f64 {
    if x == 0.0 {
        1.0
    } else {
        let px = std::f64::consts::PI * x;
        px.sin() / px
    }
}

/// Modified Bessel function of the first kind, order zero (power series).
fn bessel_i0(x: f64) -> f64 {
    let q = x * x / 4.0;
    let mut term = 1.0;
    let mut sum = 1.0;
    for k in 1..200 {
        term *= q / (k as f64 * k as f64);
        sum += term;
        if term < sum * 1e-17 {
            break;
        }
    }
    sum
}

fn gcd(mut a: u64, mut b: u64) -> u64 {
    while b != 0 {
        (a, b) = (b, a % b);
    }
    a
}
