//! Running average of optimizer iterates.
//!
//! An iterate at step `t` is absorbed when `t >= t0` and `(t - t0) % freq == 0`,
//! so the iterate at `t0` itself is always the first one in. The average after
//! absorbing `n` iterates is their arithmetic mean, maintained incrementally:
//!
//! ```text
//! avg_n = avg_{n-1} + (theta_t - avg_{n-1}) / n
//! ```
//!
//! Before anything has been absorbed, [`SmaState::view`] falls back to the
//! current online parameters so evaluation curves are defined from the first
//! step onward.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::param::ParamVector;

/// When to start averaging (`t0`) and how many steps apart absorbed iterates
/// are (`freq`).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SmaConfig {
    pub t0: u64,
    pub freq: u64,
}

impl Default for SmaConfig {
    fn default() -> Self {
        Self { t0: 100, freq: 1 }
    }
}

impl SmaConfig {
    pub fn new(t0: u64, freq: u64) -> Result<Self> {
        if freq == 0 {
            return Err(Error::InvalidConfig("sma freq must be >= 1".into()));
        }
        Ok(Self { t0, freq })
    }

    /// Whether the iterate at step `t` enters the average.
    pub fn absorbs(&self, t: u64) -> bool {
        t >= self.t0 && (t - self.t0) % self.freq == 0
    }
}

/// Incremental mean over the absorbed iterates of one training run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SmaState {
    config: SmaConfig,
    count: u64,
    average: Option<ParamVector>,
    last_iteration: Option<u64>,
}

impl SmaState {
    pub fn new(config: SmaConfig) -> Self {
        Self {
            config,
            count: 0,
            average: None,
            last_iteration: None,
        }
    }

    pub fn config(&self) -> SmaConfig {
        self.config
    }

    /// Number of iterates absorbed so far.
    pub fn count(&self) -> u64 {
        self.count
    }

    /// Offer the iterate at step `t`. Steps must arrive in increasing order;
    /// iterates not selected by the schedule are ignored.
    pub fn observe(&mut self, t: u64, params: &ParamVector) -> Result<()> {
        if let Some(last) = self.last_iteration {
            if t <= last {
                return Err(Error::Ordering { t, last });
            }
        }
        self.last_iteration = Some(t);
        if !self.config.absorbs(t) {
            return Ok(());
        }
        match &mut self.average {
            None => {
                self.average = Some(params.clone());
                self.count = 1;
            }
            Some(avg) => {
                if avg.len() != params.len() {
                    return Err(Error::Shape {
                        expected: avg.len(),
                        actual: params.len(),
                    });
                }
                self.count += 1;
                let w = 1.0 / self.count as f64;
                avg.blend(w, params)?;
            }
        }
        Ok(())
    }

    /// The averaged parameters, or `online` while nothing has been absorbed.
    pub fn view<'a>(&'a self, online: &'a ParamVector) -> &'a ParamVector {
        self.average.as_ref().unwrap_or(online)
    }

    /// The averaged parameters, if at least one iterate has been absorbed.
    pub fn average(&self) -> Option<&ParamVector> {
        self.average.as_ref()
    }
}

/// Mean of the iterates selected by `config` out of `iterates[0..=t]`, where
/// `iterates[i]` is the parameter vector after step `i`. Errors when the
/// schedule selects nothing in that range.
pub fn sma_closed_form(
    iterates: &[ParamVector],
    t: usize,
    config: SmaConfig,
) -> Result<ParamVector> {
    let selected = iterates
        .iter()
        .take(t + 1)
        .enumerate()
        .filter(|(i, _)| config.absorbs(*i as u64))
        .map(|(_, p)| p);
    ParamVector::mean_of(selected).map_err(|_| Error::EmptyAverage {
        t0: config.t0,
        freq: config.freq,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn pv(v: &[f64]) -> ParamVector {
        ParamVector::new(v.to_vec()).unwrap()
    }

    #[test]
    fn before_t0_view_is_online() {
        let mut s = SmaState::new(SmaConfig::new(3, 1).unwrap());
        let online = pv(&[5.0]);
        s.observe(0, &pv(&[1.0])).unwrap();
        s.observe(1, &pv(&[2.0])).unwrap();
        assert_eq!(s.count(), 0);
        assert_eq!(s.view(&online), &online);
    }

    #[test]
    fn averages_from_t0_inclusive() {
        let mut s = SmaState::new(SmaConfig::new(2, 1).unwrap());
        for (t, v) in [(0, 10.0), (1, 20.0), (2, 3.0), (3, 5.0), (4, 7.0)] {
            s.observe(t, &pv(&[v])).unwrap();
        }
        // mean of 3, 5, 7
        assert!((s.average().unwrap().as_slice()[0] - 5.0).abs() < 1e-12);
        assert_eq!(s.count(), 3);
    }

    #[test]
    fn freq_skips_intermediate_iterates() {
        let mut s = SmaState::new(SmaConfig::new(1, 2).unwrap());
        for (t, v) in [(0, 0.0), (1, 1.0), (2, 100.0), (3, 3.0), (4, 100.0), (5, 5.0)] {
            s.observe(t, &pv(&[v])).unwrap();
        }
        // absorbs t = 1, 3, 5
        assert!((s.average().unwrap().as_slice()[0] - 3.0).abs() < 1e-12);
    }

    #[test]
    fn out_of_order_step_is_an_error() {
        let mut s = SmaState::new(SmaConfig::default());
        s.observe(5, &pv(&[1.0])).unwrap();
        assert!(matches!(
            s.observe(5, &pv(&[1.0])),
            Err(Error::Ordering { t: 5, last: 5 })
        ));
    }

    #[test]
    fn closed_form_empty_range_errors() {
        let iters: Vec<_> = (0..4).map(|i| pv(&[i as f64])).collect();
        let err = sma_closed_form(&iters, 3, SmaConfig::new(10, 1).unwrap()).unwrap_err();
        assert!(matches!(err, Error::EmptyAverage { t0: 10, freq: 1 }));
    }

    proptest! {
        // The incremental update and the plain mean of selected iterates are
        // the same map up to rounding.
        #[test]
        fn incremental_matches_closed_form(
            values in proptest::collection::vec(
                proptest::collection::vec(-100.0f64..100.0, 3), 1..40),
            t0 in 0u64..20,
            freq in 1u64..5,
        ) {
            let iterates: Vec<_> = values.iter().map(|v| pv(v)).collect();
            let config = SmaConfig::new(t0, freq).unwrap();
            let mut s = SmaState::new(config);
            for (t, p) in iterates.iter().enumerate() {
                s.observe(t as u64, p).unwrap();
            }
            let t = iterates.len() - 1;
            match sma_closed_form(&iterates, t, config) {
                Ok(exact) => {
                    let got = s.average().expect("state absorbed something");
                    prop_assert!(got.max_abs_diff(&exact).unwrap() < 1e-9);
                }
                Err(_) => prop_assert!(s.average().is_none()),
            }
        }

        // With freq 1 the recurrence
        //   avg_t = (t - t0)/(t - t0 + 1) * avg_{t-1} + 1/(t - t0 + 1) * theta_t
        // starting from avg_{t0} = theta_{t0} gives the same numbers.
        #[test]
        fn matches_weighted_recurrence(
            values in proptest::collection::vec(-50.0f64..50.0, 5..30),
            t0 in 0usize..10,
        ) {
            prop_assume!(t0 < values.len());
            let iterates: Vec<_> = values.iter().map(|v| pv(&[*v])).collect();
            let config = SmaConfig::new(t0 as u64, 1).unwrap();
            let mut s = SmaState::new(config);
            let mut rec: Option<f64> = None;
            for (t, p) in iterates.iter().enumerate() {
                s.observe(t as u64, p).unwrap();
                if t >= t0 {
                    let x = p.as_slice()[0];
                    rec = Some(match rec {
                        None => x,
                        Some(prev) => {
                            let n = (t - t0) as f64;
                            n / (n + 1.0) * prev + x / (n + 1.0)
                        }
                    });
                    let got = s.average().unwrap().as_slice()[0];
                    prop_assert!((got - rec.unwrap()).abs() < 1e-9);
                }
            }
        }
    }
}
