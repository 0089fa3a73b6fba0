//! Learnable harmonic time encoding.

use crate::autodiff::{ParamId, ParamStore, Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Maps a time value to `(1/sqrt(n)) [cos w_1 t, sin w_1 t, ..., cos w_n t, sin w_n t]`
/// with learnable frequencies `w`.
#[derive(Clone, Debug)]
pub struct TimeEncoder {
    omega: ParamId,
    half: usize,
}

impl TimeEncoder {
    /// Registers `half` frequencies under `{prefix}.omega`, initialized to a
    /// geometric ladder from 1 down to `1 / max_time`.
    pub fn new(store: &mut ParamStore, prefix: &str, half: usize, max_time: f64) -> Result<Self> {
        if half == 0 {
            return Err(Error::Config("time encoding needs at least one frequency".into()));
        }
        let omega = store.add(
            format!("{prefix}.omega"),
            Tensor::vector(frequency_ladder(half, max_time)),
        );
        Ok(TimeEncoder { omega, half })
    }

    pub fn from_param(store: &ParamStore, omega: ParamId) -> Self {
        TimeEncoder {
            omega,
            half: store.value(omega).numel(),
        }
    }

    pub fn omega(&self) -> ParamId {
        self.omega
    }

    pub fn half_dim(&self) -> usize {
        self.half
    }

    pub fn dim(&self) -> usize {
        2 * self.half
    }

    /// One encoded row per time, `[times.len(), 2 * half]`.
    pub fn encode(&self, tape: &mut Tape, store: &ParamStore, times: &[f64]) -> Result<Var> {
        let omega = tape.param(store, self.omega);
        tape.time_encode(omega, times)
    }

    /// Plain evaluation without recording.
    pub fn encode_time(&self, store: &ParamStore, t: f64) -> Result<Vec<f64>> {
        let mut tape = Tape::inference();
        let v = self.encode(&mut tape, store, &[t])?;
        Ok(tape.value(v).data().to_vec())
    }
}

/// `w_j = s^(-(j-1)/(n-1))` with `s = max_time`, so `w_1 = 1` and
/// `w_n = 1 / max_time`.
pub fn frequency_ladder(half: usize, max_time: f64) -> Vec<f64> {
    let span = if max_time.is_finite() && max_time > 0.0 {
        max_time
    } else {
        1.0
    };
    if half == 1 {
        return vec![1.0];
    }
    (0..half)
        .map(|j| span.powf(-(j as f64) / (half as f64 - 1.0)))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::grad_check_param;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use std::f64::consts::PI;

    #[test]
    fn zero_time_encodes_cosines() {
        let mut store = ParamStore::new();
        let enc = TimeEncoder::new(&mut store, "t", 2, 100.0).unwrap();
        let v = enc.encode_time(&store, 0.0).unwrap();
        let s = 1.0 / 2f64.sqrt();
        assert_eq!(v, vec![s, 0.0, s, 0.0]);
    }

    #[test]
    fn unit_frequency_at_pi() {
        let mut store = ParamStore::new();
        let enc = TimeEncoder::new(&mut store, "t", 1, 1.0).unwrap();
        let v = enc.encode_time(&store, PI).unwrap();
        assert!((v[0] + 1.0).abs() < 1e-15);
        assert!(v[1].abs() < 1e-15);
    }

    #[test]
    fn unit_norm_and_determinism() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..200 {
            let half = rng.gen_range(1..20);
            let mut store = ParamStore::new();
            let enc = TimeEncoder::new(&mut store, "t", half, 1e4).unwrap();
            for w in store.value_mut(enc.omega()).data_mut() {
                *w = rng.gen_range(-5.0..5.0);
            }
            let t = rng.gen_range(-1e3..1e5);
            let v = enc.encode_time(&store, t).unwrap();
            assert_eq!(v.len(), 2 * half);
            let norm: f64 = v.iter().map(|x| x * x).sum();
            assert!((norm - 1.0).abs() < 1e-12);
            assert_eq!(v, enc.encode_time(&store, t).unwrap());
        }
    }

    #[test]
    fn ladder_spans_one_to_inverse_max() {
        let w = frequency_ladder(5, 1e4);
        assert_eq!(w[0], 1.0);
        assert!((w[4] - 1e-4).abs() < 1e-18);
        assert!(w.windows(2).all(|p| p[1] < p[0]));
        let ratios: Vec<f64> = w.windows(2).map(|p| p[1] / p[0]).collect();
        assert!(ratios.iter().all(|r| (r - ratios[0]).abs() < 1e-12));
    }

    #[test]
    fn non_finite_time_is_rejected() {
        let mut store = ParamStore::new();
        let enc = TimeEncoder::new(&mut store, "t", 2, 10.0).unwrap();
        assert!(enc.encode_time(&store, f64::NAN).is_err());
    }

    #[test]
    fn omega_gradient_matches_finite_differences() {
        let mut store = ParamStore::new();
        let enc = TimeEncoder::new(&mut store, "t", 4, 50.0).unwrap();
        let weights: Vec<f64> = (0..8).map(|i| 0.3 * i as f64 - 1.0).collect();
        let times = [0.5, 3.0, 17.0];
        let report = grad_check_param(
            &mut store,
            enc.omega(),
            |tape, store| {
                let e = enc.encode(tape, store, &times)?;
                let w = tape.constant(Tensor::matrix(8, 1, weights.clone())?);
                let p = tape.matmul(e, w)?;
                let sq = tape.mul(p, p)?;
                tape.sum(sq)
            },
            1e-5,
            8,
        )
        .unwrap();
        assert!(report.passed, "{report:?}");
    }
}
