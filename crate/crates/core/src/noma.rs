//! Power-domain NOMA with a fixed SIC decoding order.
//!
//! Users are ordered weakest first by combined channel gain. Coefficients
//! are assigned inversely to that order, and the user at decoding position
//! `i` sees interference only from users at positions after `i`.

use std::f64::consts::{E, PI};

use crate::error::{Error, Result};

/// Tolerance on `Σα = 1`.
pub const SIMPLEX_TOLERANCE: f64 = 1e-9;

/// Power-allocation coefficients indexed by user id.
#[derive(Debug, Clone, PartialEq)]
pub struct PowerAllocation(Vec<f64>);

impl PowerAllocation {
    pub fn new(alpha: Vec<f64>) -> Result<Self> {
        check_simplex(&alpha)?;
        Ok(Self(alpha))
    }

    pub fn uniform(k: usize) -> Self {
        Self(vec![1.0 / k as f64; k])
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

pub fn check_simplex(alpha: &[f64]) -> Result<()> {
    if alpha.is_empty() {
        return Err(Error::Simplex("empty coefficient vector".into()));
    }
    if let Some(bad) = alpha.iter().find(|a| !(0.0..=1.0).contains(*a)) {
        return Err(Error::Simplex(format!("coefficient {bad} outside [0, 1]")));
    }
    let sum: f64 = alpha.iter().sum();
    if (sum - 1.0).abs() > SIMPLEX_TOLERANCE {
        return Err(Error::Simplex(format!("coefficients sum to {sum}")));
    }
    Ok(())
}

/// User ids sorted by ascending gain, so `order[0]` is decoded first.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DecodingOrder(Vec<usize>);

impl DecodingOrder {
    pub fn as_slice(&self) -> &[usize] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LinkParams {
    /// Electrical transmit power in W.
    pub p_elec: f64,
    /// Modulation bandwidth in Hz.
    pub bandwidth: f64,
    /// Noise power spectral density in A²/Hz.
    pub noise_psd: f64,
    /// Photodetector responsivity in A/W.
    pub responsivity: f64,
}

impl LinkParams {
    pub fn noise_power(&self) -> f64 {
        self.bandwidth * self.noise_psd
    }
}

/// Weakest-first ordering; ties keep ascending user index.
pub fn sort_users_by_gain(gains: &[f64]) -> DecodingOrder {
    let mut order: Vec<usize> = (0..gains.len()).collect();
    order.sort_by(|&a, &b| gains[a].total_cmp(&gains[b]));
    DecodingOrder(order)
}

/// Reassigns the multiset of `alpha_raw` so that weaker users receive larger
/// coefficients.
pub fn enforce_inverse_order(alpha_raw: &[f64], order: &DecodingOrder) -> Result<PowerAllocation> {
    check_simplex(alpha_raw)?;
    if alpha_raw.len() != order.len() {
        return Err(Error::Dimension {
            what: "power allocation",
            expected: order.len(),
            got: alpha_raw.len(),
        });
    }
    let mut sorted = alpha_raw.to_vec();
    sorted.sort_by(|a, b| b.total_cmp(a));
    let mut alpha = vec![0.0; sorted.len()];
    for (&user, &a) in order.as_slice().iter().zip(&sorted) {
        alpha[user] = a;
    }
    Ok(PowerAllocation(alpha))
}

/// SINR of the user at decoding position `position`.
pub fn sinr_at(
    position: usize,
    alpha: &PowerAllocation,
    gains: &[f64],
    order: &DecodingOrder,
    link: &LinkParams,
) -> f64 {
    let order = order.as_slice();
    let user = order[position];
    let signal = (link.responsivity * gains[user]).powi(2) * link.p_elec;
    let later: f64 = order[position + 1..].iter().map(|&j| alpha.0[j]).sum();
    let noise = link.noise_power();
    if position + 1 == order.len() {
        signal * alpha.0[user] / noise
    } else {
        signal * alpha.0[user] / (signal * later + noise)
    }
}

/// SINR of every user, indexed by user id.
pub fn sinrs(
    alpha: &PowerAllocation,
    gains: &[f64],
    order: &DecodingOrder,
    link: &LinkParams,
) -> Vec<f64> {
    let mut out = vec![0.0; gains.len()];
    for (pos, &user) in order.as_slice().iter().enumerate() {
        out[user] = sinr_at(pos, alpha, gains, order, link);
    }
    out
}

/// Achievable IM/DD rate in bit/s.
pub fn rate(sinr: f64, bandwidth: f64) -> f64 {
    bandwidth * (1.0 + E / (2.0 * PI) * sinr).log2()
}

pub fn sum_rate(rates: &[f64]) -> f64 {
    rates.iter().sum()
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use proptest::prelude::*;

    fn link(p: f64) -> LinkParams {
        LinkParams {
            p_elec: p,
            bandwidth: 20e6,
            noise_psd: 1e-21,
            responsivity: 1.0,
        }
    }

    #[test]
    fn ordering() {
        assert_eq!(sort_users_by_gain(&[3e-6, 1e-6, 2e-6]).as_slice(), &[1, 2, 0]);
        assert_eq!(sort_users_by_gain(&[1.0, 1.0, 1.0]).as_slice(), &[0, 1, 2]);
        assert_eq!(sort_users_by_gain(&[5.0]).as_slice(), &[0]);
    }

    #[test]
    fn inverse_order_assignment() {
        let order = sort_users_by_gain(&[3e-6, 1e-6, 2e-6]);
        let a = enforce_inverse_order(&[0.2, 0.5, 0.3], &order).unwrap();
        assert_eq!(a.as_slice(), &[0.2, 0.5, 0.3]);
        let a = enforce_inverse_order(&[0.5, 0.2, 0.3], &order).unwrap();
        assert_eq!(a.as_slice(), &[0.2, 0.5, 0.3]);
        let u = [1.0 / 3.0; 3];
        assert_eq!(enforce_inverse_order(&u, &order).unwrap().as_slice(), &u);
        assert!(enforce_inverse_order(&[0.5, 0.6, 0.0], &order).is_err());
        assert!(enforce_inverse_order(&[1.2, -0.2, 0.0], &order).is_err());
    }

    #[test]
    fn sinr_single_user() {
        let alpha = PowerAllocation::uniform(1);
        let order = sort_users_by_gain(&[1e-6]);
        let g = sinrs(&alpha, &[1e-6], &order, &link(1.0));
        assert_relative_eq!(g[0], 50.0, max_relative = 1e-12);
    }

    #[test]
    fn sinr_two_users() {
        let alpha = PowerAllocation::new(vec![0.7, 0.3]).unwrap();
        let gains = [1e-6, 2e-6];
        let order = sort_users_by_gain(&gains);
        let g = sinrs(&alpha, &gains, &order, &link(1.0));
        assert_relative_eq!(g[0], 2.1875, max_relative = 1e-12);
        assert_relative_eq!(g[1], 60.0, max_relative = 1e-12);
        let zero = sinrs(&alpha, &[0.0, 2e-6], &sort_users_by_gain(&[0.0, 2e-6]), &link(1.0));
        assert_eq!(zero[0], 0.0);
    }

    #[test]
    fn rate_values() {
        assert_eq!(rate(0.0, 20e6), 0.0);
        assert_relative_eq!(rate(2.0 * PI / E, 20e6), 20e6, max_relative = 1e-15);
        assert_relative_eq!(rate(50.0, 20e6), 90_005_077.919_321_97, max_relative = 1e-12);
        assert_eq!(sum_rate(&[0.0, 0.0]), 0.0);
        assert_relative_eq!(sum_rate(&[1e6, 2e6, 3e6]), 6e6);
    }

    fn simplex(k: usize) -> impl Strategy<Value = Vec<f64>> {
        prop::collection::vec(0.01f64..1.0, k).prop_map(|v| {
            let s: f64 = v.iter().sum();
            v.into_iter().map(|x| x / s).collect()
        })
    }

    proptest! {
        #[test]
        fn inverse_order_holds_and_is_idempotent(
            (alpha, gains) in (1usize..7).prop_flat_map(|k| (simplex(k), prop::collection::vec(0.0f64..1e-5, k)))
        ) {
            let order = sort_users_by_gain(&gains);
            let a = enforce_inverse_order(&alpha, &order).unwrap();
            let along: Vec<f64> = order.as_slice().iter().map(|&u| a.as_slice()[u]).collect();
            prop_assert!(along.windows(2).all(|w| w[0] >= w[1]));
            let mut before = alpha.clone();
            let mut after = a.as_slice().to_vec();
            before.sort_by(f64::total_cmp);
            after.sort_by(f64::total_cmp);
            prop_assert_eq!(before, after);
            let again = enforce_inverse_order(a.as_slice(), &order).unwrap();
            prop_assert_eq!(again, a);
        }

        #[test]
        fn later_users_interfere(shift in 0.01f64..0.3, h in 1e-7f64..1e-5) {
            // Moving power from user 0 to user 2 lowers user 1's SINR.
            let gains = [h * 0.5, h, h * 2.0];
            let order = sort_users_by_gain(&gains);
            let base = PowerAllocation::new(vec![0.6, 0.3, 0.1]).unwrap();
            let moved = PowerAllocation::new(vec![0.6 - shift, 0.3, 0.1 + shift]).unwrap();
            let l = link(2.0);
            prop_assert!(sinr_at(1, &moved, &gains, &order, &l) < sinr_at(1, &base, &gains, &order, &l));
        }

        #[test]
        fn rate_strictly_increasing(a in 0.0f64..1e6, d in 1e-3f64..1e3) {
            prop_assert!(rate(a + d, 20e6) > rate(a, 20e6));
        }

        #[test]
        fn sum_rate_permutation_invariant(mut r in prop::collection::vec(0.0f64..1e8, 1..8), seed in 0usize..100) {
            let s = sum_rate(&r);
            let n = r.len();
            r.rotate_left(seed % n);
            prop_assert!((sum_rate(&r) - s).abs() <= 1e-9 * s.max(1.0));
        }
    }
}
