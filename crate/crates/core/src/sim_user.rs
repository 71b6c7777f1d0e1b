//! Simulated listeners. Each profile hides a target adjustment and scores a
//! setting by the weighted number of bands where it misses that target.

use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::action::{BandControl, CrAdjustment};
use crate::reward::Choice;
use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimUserProfile {
    pub name: String,
    /// Full-band adjustment the listener likes best.
    pub target_adjustment: CrAdjustment,
    pub band_weights: Vec<f64>,
    /// Score differences up to this margin are answered EQUAL.
    pub neutral_margin: f64,
    /// Probability of answering uniformly at random among A, B and EQUAL.
    pub flip_prob: f64,
    /// Bands that enter the score, increasing.
    pub active_bands: Vec<usize>,
    /// Probability of answering NEITHER when both settings miss the target.
    #[serde(default)]
    pub neither_prob: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SimAnswer {
    pub choice: Choice,
    pub score_a: f64,
    pub score_b: f64,
}

impl SimUserProfile {
    pub fn n_bands(&self) -> usize {
        self.target_adjustment.len()
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.n_bands();
        if self.band_weights.len() != n {
            return Err(Error::Dimension { expected: n, actual: self.band_weights.len(), what: "band weights" });
        }
        if self.band_weights.iter().any(|w| !(w.is_finite() && *w >= 0.0)) {
            return Err(Error::InvalidParams("band weights must be non-negative".into()));
        }
        for (what, p) in [("flip_prob", self.flip_prob), ("neither_prob", self.neither_prob)] {
            if !(0.0..=1.0).contains(&p) {
                return Err(Error::InvalidParams(alloc::format!("{what} must lie in [0, 1]")));
            }
        }
        if !(self.neutral_margin >= 0.0) {
            return Err(Error::InvalidParams("neutral_margin must be non-negative".into()));
        }
        BandControl { n_total_bands: n, controlled: self.active_bands.clone() }.validate()
    }

    /// The bands an agent serving this listener needs to control.
    pub fn band_control(&self) -> BandControl {
        BandControl { n_total_bands: self.n_bands(), controlled: self.active_bands.clone() }
    }

    /// `−Σ w_f · [adj_f ≠ target_f]` over the active bands.
    pub fn score(&self, adj: &CrAdjustment) -> Result<f64> {
        if adj.len() != self.n_bands() {
            return Err(Error::Dimension { expected: self.n_bands(), actual: adj.len(), what: "scored adjustment" });
        }
        Ok(-self
            .active_bands
            .iter()
            .filter(|&&f| adj.0[f] != self.target_adjustment.0[f])
            .map(|&f| self.band_weights[f])
            .sum::<f64>())
    }

    /// Noiseless answer for a pair of full-band adjustments.
    pub fn preference(&self, adj_a: &CrAdjustment, adj_b: &CrAdjustment) -> Result<SimAnswer> {
        let (score_a, score_b) = (self.score(adj_a)?, self.score(adj_b)?);
        let choice = if (score_a - score_b).abs() <= self.neutral_margin {
            Choice::Equal
        } else if score_a > score_b {
            Choice::A
        } else {
            Choice::B
        };
        Ok(SimAnswer { choice, score_a, score_b })
    }

    pub fn answer<R: Rng + ?Sized>(&self, adj_a: &CrAdjustment, adj_b: &CrAdjustment, rng: &mut R) -> Result<SimAnswer> {
        let mut ans = self.preference(adj_a, adj_b)?;
        if rng.gen::<f64>() < self.flip_prob {
            ans.choice = [Choice::A, Choice::B, Choice::Equal][rng.gen_range(0..3)];
        } else if self.neither_prob > 0.0 && ans.score_a < 0.0 && ans.score_b < 0.0 && rng.gen::<f64>() < self.neither_prob {
            ans.choice = Choice::Neither;
        }
        Ok(ans)
    }
}

fn profile(name: &str, target: [f64; 5], weights: [f64; 5], margin: f64, flip: f64, active: &[usize]) -> SimUserProfile {
    SimUserProfile {
        name: name.into(),
        target_adjustment: CrAdjustment(target.to_vec()),
        band_weights: weights.to_vec(),
        neutral_margin: margin,
        flip_prob: flip,
        active_bands: active.to_vec(),
        neither_prob: 0.0,
    }
}

/// The five built-in listeners: (1) consistent, all bands; (2) like 1 but
/// answers at random 40% of the time; (3) strict on two bands, indifferent to
/// the rest; (4) cares about the first and fifth band; (5) cares about the
/// first, third and fifth band.
pub fn builtin_profiles() -> Vec<SimUserProfile> {
    const ALL: [usize; 5] = [0, 1, 2, 3, 4];
    vec![
        profile("user1", [1.0, 1.0, 1.0, 4.0, 4.0], [1.0; 5], 0.0, 0.0, &ALL),
        profile("user2", [1.0, 1.0, 1.0, 4.0, 4.0], [1.0; 5], 0.0, 0.4, &ALL),
        profile("user3", [4.0, 1.0, 1.0, 4.0, 1.0], [1.0, 0.0, 0.0, 1.0, 0.0], 0.5, 0.0, &ALL),
        profile("user4", [4.0, 1.0, 1.0, 1.0, 4.0], [1.0; 5], 0.0, 0.0, &[0, 4]),
        profile("user5", [1.0, 1.0, 4.0, 1.0, 4.0], [1.0; 5], 0.0, 0.0, &[0, 2, 4]),
    ]
}

/// Built-in profile by its 1-based number.
pub fn builtin_profile(user: usize) -> Option<SimUserProfile> {
    builtin_profiles().into_iter().nth(user.checked_sub(1)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::action::build_action_space;
    use crate::RunRng;
    use rand::SeedableRng;

    fn adj(v: [f64; 5]) -> CrAdjustment {
        CrAdjustment(v.to_vec())
    }

    #[test]
    fn score_examples() {
        let p = builtin_profile(1).unwrap();
        assert_eq!(p.score(&p.target_adjustment).unwrap(), 0.0);
        assert_eq!(p.score(&adj([4.0, 1.0, 1.0, 4.0, 4.0])).unwrap(), -1.0);
        let w = SimUserProfile { band_weights: vec![2.0, 0.0, 1.0, 0.0, 1.0], ..p.clone() };
        assert_eq!(w.score(&adj([4.0, 1.0, 4.0, 4.0, 4.0])).unwrap(), -3.0);
        assert!(matches!(p.score(&CrAdjustment(vec![1.0])), Err(Error::Dimension { .. })));
    }

    #[test]
    fn answer_examples() {
        let p = builtin_profile(1).unwrap();
        let mut rng = RunRng::seed_from_u64(1);
        let worse = adj([4.0; 5]);
        assert_eq!(p.answer(&p.target_adjustment, &worse, &mut rng).unwrap().choice, Choice::A);
        assert_eq!(p.answer(&worse, &p.target_adjustment, &mut rng).unwrap().choice, Choice::B);
        assert_eq!(p.answer(&worse, &worse, &mut rng).unwrap().choice, Choice::Equal);
    }

    #[test]
    fn full_flip_is_uniform() {
        let p = SimUserProfile { flip_prob: 1.0, ..builtin_profile(1).unwrap() };
        let mut rng = RunRng::seed_from_u64(2);
        let mut counts = [0usize; 3];
        for _ in 0..9000 {
            let c = p.answer(&p.target_adjustment, &adj([4.0; 5]), &mut rng).unwrap().choice;
            counts[c.preference().unwrap().class_index()] += 1;
        }
        for c in counts {
            assert!((c as f64 / 9000.0 - 1.0 / 3.0).abs() <= 0.02, "{counts:?}");
        }
    }

    #[test]
    fn builtin_personas() {
        let ps = builtin_profiles();
        assert_eq!(ps.len(), 5);
        for p in &ps {
            p.validate().unwrap();
            assert_eq!(p.neither_prob, 0.0);
        }
        assert_eq!(ps[1].flip_prob, 0.4);
        assert_eq!(ps[2].band_weights.iter().filter(|w| **w > 0.0).count(), 2);
        let u4 = &ps[3];
        let mut rng = RunRng::seed_from_u64(3);
        let a = u4.answer(&adj([4.0, 1.0, 1.0, 1.0, 4.0]), &adj([4.0, 4.0, 4.0, 4.0, 4.0]), &mut rng).unwrap();
        assert_eq!(a.choice, Choice::Equal);
        let u5 = &ps[4];
        let space = build_action_space(3, &[1.0, 4.0]).unwrap();
        assert_eq!(space.len(), 8);
        let control = u5.band_control();
        assert!(space.index_of(&control.restrict(&u5.target_adjustment)).is_some());
        assert_eq!(control.expand(&control.restrict(&u5.target_adjustment)).unwrap(), u5.target_adjustment);
    }

    #[test]
    fn strict_listener_is_neutral_off_its_bands() {
        let u3 = builtin_profile(3).unwrap();
        let mut rng = RunRng::seed_from_u64(4);
        let a = u3.answer(&adj([4.0, 1.0, 1.0, 4.0, 1.0]), &adj([4.0, 4.0, 4.0, 4.0, 4.0]), &mut rng).unwrap();
        assert_eq!(a.choice, Choice::Equal);
    }

    fn space_adjustments() -> Vec<CrAdjustment> {
        build_action_space(5, &[1.0, 4.0]).unwrap().dictionary()
    }

    #[test]
    fn swap_antisymmetry_and_target_dominance() {
        let dict = space_adjustments();
        let mut rng = RunRng::seed_from_u64(5);
        for p in builtin_profiles().into_iter().filter(|p| p.flip_prob == 0.0) {
            for a in &dict {
                let target_vs = p.answer(&p.target_adjustment, a, &mut rng).unwrap().choice;
                assert_ne!(target_vs, Choice::B);
                for b in dict.iter().step_by(7) {
                    let ab = p.answer(a, b, &mut rng).unwrap().choice;
                    let ba = p.answer(b, a, &mut rng).unwrap().choice;
                    assert_eq!(ab, ba.swapped());
                }
            }
        }
    }
}
