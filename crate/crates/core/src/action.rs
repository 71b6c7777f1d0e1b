//! Prescription math and the action dictionary: each agent action is one
//! vector of per-band compression-ratio multipliers.

use alloc::format;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::drc::{BandSpec, CompressionParams};
use crate::{Error, Result};

/// Per-band multipliers applied to the reference compression ratios.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CrAdjustment(pub Vec<f64>);

impl CrAdjustment {
    pub fn identity(n_bands: usize) -> Self {
        Self(alloc::vec![1.0; n_bands])
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }
}

/// Reference fitting: per-band soft-speech gains and reference compression ratios.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Prescription {
    pub bands: BandSpec,
    pub gains_soft_db: Vec<f64>,
    #[serde(default)]
    pub gains_loud_db: Option<Vec<f64>>,
    pub cr_reference: Vec<f64>,
}

impl Prescription {
    pub fn validate(&self) -> Result<()> {
        self.bands.validate()?;
        let n = self.bands.n_bands();
        for (what, len) in [("soft gains", self.gains_soft_db.len()), ("reference CRs", self.cr_reference.len())] {
            if len != n {
                return Err(Error::Dimension { expected: n, actual: len, what });
            }
        }
        if let Some(loud) = &self.gains_loud_db {
            if loud.len() != n {
                return Err(Error::Dimension { expected: n, actual: loud.len(), what: "loud gains" });
            }
        }
        if self.cr_reference.iter().any(|c| !(c.is_finite() && *c >= 1.0)) {
            return Err(Error::InvalidParams(format!("reference CRs must be >= 1: {:?}", self.cr_reference)));
        }
        Ok(())
    }

    /// Compressor settings for the given adjustment, default thresholds and
    /// time constants, soft-speech gains as the linear-region gain.
    pub fn params_for(&self, adj: &CrAdjustment) -> Result<CompressionParams> {
        let ratios = apply_adjustment(&self.cr_reference, adj)?;
        Ok(CompressionParams::new(ratios, self.gains_soft_db.clone()))
    }

    pub fn n_bands(&self) -> usize {
        self.bands.n_bands()
    }
}

/// `CR_new(f) = CR_ref(f) · CR_adj(f)`.
pub fn apply_adjustment(reference: &[f64], adj: &CrAdjustment) -> Result<Vec<f64>> {
    if reference.len() != adj.len() {
        return Err(Error::Dimension { expected: reference.len(), actual: adj.len(), what: "CR adjustment" });
    }
    Ok(reference.iter().zip(&adj.0).map(|(r, a)| r * a).collect())
}

/// Compression ratio implied by gains at two input levels.
pub fn cr_from_gains(level_soft_db: f64, level_loud_db: f64, gain_soft_db: f64, gain_loud_db: f64) -> Result<f64> {
    if !(level_loud_db > level_soft_db) {
        return Err(Error::InvalidParams(format!(
            "loud level {level_loud_db} dB must exceed soft level {level_soft_db} dB"
        )));
    }
    let out_delta = (level_loud_db + gain_loud_db) - (level_soft_db + gain_soft_db);
    if out_delta <= 0.0 {
        return Err(Error::Expansion { output_delta_db: out_delta });
    }
    Ok((level_loud_db - level_soft_db) / out_delta)
}

/// Bandwidth-weighted average of per-band gains from one edge set onto another.
pub fn map_band_gains(gains_src: &[f64], edges_src: &[f64], edges_dst: &[f64]) -> Result<Vec<f64>> {
    BandSpec { edges_hz: edges_src.to_vec() }.validate()?;
    BandSpec { edges_hz: edges_dst.to_vec() }.validate()?;
    if gains_src.len() + 1 != edges_src.len() {
        return Err(Error::Dimension { expected: edges_src.len() - 1, actual: gains_src.len(), what: "source gains" });
    }
    edges_dst
        .windows(2)
        .map(|d| {
            let (mut wsum, mut gsum) = (0.0, 0.0);
            for (s, g) in edges_src.windows(2).zip(gains_src) {
                let overlap = d[1].min(s[1]) - d[0].max(s[0]);
                if overlap > 0.0 {
                    wsum += overlap;
                    gsum += overlap * g;
                }
            }
            if wsum > 0.0 {
                Ok(gsum / wsum)
            } else {
                Err(Error::BandSpec(format!("band [{}, {}] Hz overlaps no source band", d[0], d[1])))
            }
        })
        .collect()
}

/// Nine-band prescription gains mapped onto the compressor's five bands.
pub fn map_nine_to_five_bands(gains_9: &[f64], edges_9: &[f64], edges_5: &[f64]) -> Result<Vec<f64>> {
    if gains_9.len() != 9 || edges_5.len() != 6 {
        return Err(Error::Dimension { expected: 9, actual: gains_9.len(), what: "nine-band gains" });
    }
    map_band_gains(gains_9, edges_9, edges_5)
}

/// All `|scales|^n_bands` multiplier vectors, enumerated lexicographically with
/// band 0 varying slowest.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ActionSpace {
    n_bands: usize,
    scales: Vec<f64>,
}

impl ActionSpace {
    pub fn new(n_bands: usize, scales: Vec<f64>) -> Result<Self> {
        if n_bands == 0 || scales.is_empty() {
            return Err(Error::InvalidParams("action space needs at least one band and one scale".into()));
        }
        if scales.iter().any(|s| !(s.is_finite() && *s > 0.0)) {
            return Err(Error::InvalidParams(format!("scales must be positive: {scales:?}")));
        }
        let mut sorted = scales.clone();
        sorted.sort_by(|a, b| a.total_cmp(b));
        sorted.dedup();
        if sorted.len() != scales.len() {
            return Err(Error::InvalidParams(format!("duplicate scales: {scales:?}")));
        }
        if (sorted.len() as f64).powi(n_bands as i32) > u32::MAX as f64 {
            return Err(Error::InvalidParams("action space too large".into()));
        }
        Ok(Self { n_bands, scales: sorted })
    }

    pub fn n_bands(&self) -> usize {
        self.n_bands
    }

    pub fn scales(&self) -> &[f64] {
        &self.scales
    }

    pub fn len(&self) -> usize {
        self.scales.len().pow(self.n_bands as u32)
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn adjustment(&self, action: usize) -> Result<CrAdjustment> {
        if action >= self.len() {
            return Err(Error::InvalidAction { action, n_actions: self.len() });
        }
        let beta = self.scales.len();
        let mut v = alloc::vec![0.0; self.n_bands];
        let mut rest = action;
        for b in (0..self.n_bands).rev() {
            v[b] = self.scales[rest % beta];
            rest /= beta;
        }
        Ok(CrAdjustment(v))
    }

    /// Inverse of [`adjustment`](Self::adjustment); `None` if some multiplier is not a scale.
    pub fn index_of(&self, adj: &CrAdjustment) -> Option<usize> {
        if adj.len() != self.n_bands {
            return None;
        }
        adj.0.iter().try_fold(0usize, |acc, v| {
            let k = self.scales.iter().position(|s| s == v)?;
            Some(acc * self.scales.len() + k)
        })
    }

    pub fn dictionary(&self) -> Vec<CrAdjustment> {
        (0..self.len()).map(|a| self.adjustment(a).expect("index in range")).collect()
    }
}

pub fn build_action_space(n_bands: usize, scales: &[f64]) -> Result<ActionSpace> {
    ActionSpace::new(n_bands, scales.to_vec())
}

/// Places an action's multipliers on a subset of the compressor's bands; the
/// remaining bands keep a multiplier of one.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BandControl {
    pub n_total_bands: usize,
    pub controlled: Vec<usize>,
}

impl BandControl {
    pub fn all(n_bands: usize) -> Self {
        Self { n_total_bands: n_bands, controlled: (0..n_bands).collect() }
    }

    pub fn validate(&self) -> Result<()> {
        if self.controlled.is_empty() {
            return Err(Error::InvalidParams("no controlled bands".into()));
        }
        if self.controlled.windows(2).any(|w| w[1] <= w[0])
            || self.controlled.iter().any(|&b| b >= self.n_total_bands)
        {
            return Err(Error::InvalidParams(format!(
                "controlled bands {:?} must be increasing and below {}",
                self.controlled, self.n_total_bands
            )));
        }
        Ok(())
    }

    pub fn expand(&self, partial: &CrAdjustment) -> Result<CrAdjustment> {
        if partial.len() != self.controlled.len() {
            return Err(Error::Dimension {
                expected: self.controlled.len(),
                actual: partial.len(),
                what: "controlled-band adjustment",
            });
        }
        let mut full = CrAdjustment::identity(self.n_total_bands);
        for (&b, &v) in self.controlled.iter().zip(&partial.0) {
            full.0[b] = v;
        }
        Ok(full)
    }

    pub fn restrict(&self, full: &CrAdjustment) -> CrAdjustment {
        CrAdjustment(self.controlled.iter().map(|&b| full.0[b]).collect())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fixtures::REFERENCE_SUBJECTS;
    use proptest::prelude::*;

    #[test]
    fn cardinalities() {
        assert_eq!(build_action_space(5, &[1.0, 4.0]).unwrap().len(), 32);
        let two = build_action_space(2, &[1.0, 4.0]).unwrap();
        let dict: Vec<Vec<f64>> = two.dictionary().into_iter().map(|a| a.0).collect();
        assert_eq!(dict, vec![vec![1.0, 1.0], vec![1.0, 4.0], vec![4.0, 1.0], vec![4.0, 4.0]]);
        let one = build_action_space(1, &[1.0]).unwrap();
        assert_eq!(one.len(), 1);
        assert_eq!(one.adjustment(0).unwrap(), CrAdjustment(vec![1.0]));
        assert!(build_action_space(0, &[1.0]).is_err());
        assert!(build_action_space(2, &[]).is_err());
    }

    #[test]
    fn round_trip_all_indices() {
        let space = build_action_space(5, &[1.0, 4.0]).unwrap();
        for a in 0..space.len() {
            assert_eq!(space.index_of(&space.adjustment(a).unwrap()), Some(a));
        }
        assert_eq!(space.adjustment(0).unwrap(), CrAdjustment(vec![1.0; 5]));
        assert!(space.adjustment(32).is_err());
        assert_eq!(space.index_of(&CrAdjustment(vec![2.0; 5])), None);
    }

    #[test]
    fn reference_subject_rows_are_reachable() {
        let space = build_action_space(5, &[1.0, 4.0]).unwrap();
        for s in REFERENCE_SUBJECTS.iter() {
            let hit = space
                .dictionary()
                .into_iter()
                .any(|adj| apply_adjustment(&s.reference_cr, &adj).unwrap() == s.personalized_cr.to_vec());
            assert!(hit, "subject {}", s.subject);
        }
    }

    #[test]
    fn adjustment_examples() {
        let r = apply_adjustment(&[1.1, 1.2, 1.3, 1.2, 1.3], &CrAdjustment(vec![1.0, 1.0, 1.0, 4.0, 4.0])).unwrap();
        assert_eq!(r, vec![1.1, 1.2, 1.3, 4.8, 5.2]);
        let r = apply_adjustment(&[1.1, 1.2, 1.3, 1.2, 1.2], &CrAdjustment(vec![4.0, 1.0, 4.0, 1.0, 4.0])).unwrap();
        assert_eq!(r, vec![4.4, 1.2, 5.2, 1.2, 4.8]);
        assert_eq!(apply_adjustment(&[1.1, 1.2], &CrAdjustment::identity(2)).unwrap(), vec![1.1, 1.2]);
        assert!(matches!(apply_adjustment(&[1.1], &CrAdjustment::identity(2)), Err(Error::Dimension { .. })));
    }

    #[test]
    fn cr_from_gain_examples() {
        assert_eq!(cr_from_gains(50.0, 80.0, 7.0, 7.0).unwrap(), 1.0);
        assert_eq!(cr_from_gains(50.0, 80.0, 10.0, 0.0).unwrap(), 1.5);
        assert!(matches!(cr_from_gains(50.0, 80.0, 30.0, 0.0), Err(Error::Expansion { .. })));
        assert!(cr_from_gains(80.0, 50.0, 0.0, 0.0).is_err());
    }

    #[test]
    fn band_mapping() {
        let e9 = [0.0, 250.0, 500.0, 750.0, 1000.0, 1500.0, 2000.0, 3000.0, 4000.0, 6000.0];
        let e5 = [0.0, 500.0, 1000.0, 2000.0, 4000.0, 6000.0];
        let g = map_nine_to_five_bands(&[10.0; 9], &e9, &e5).unwrap();
        assert_eq!(g, vec![10.0; 5]);
        let g = map_nine_to_five_bands(&[0.0, 20.0, 1.0, 1.0, 1.0, 1.0, 1.0, 1.0, 1.0], &e9, &e5).unwrap();
        assert_eq!(g[0], 10.0);
        let g = map_band_gains(&[1.0, 2.0, 3.0, 4.0, 5.0], &e5, &e5).unwrap();
        assert_eq!(g, vec![1.0, 2.0, 3.0, 4.0, 5.0]);
        assert!(matches!(map_band_gains(&[1.0], &[0.0, 100.0], &[200.0, 300.0]), Err(Error::BandSpec(_))));
    }

    #[test]
    fn band_control_expands() {
        let c = BandControl { n_total_bands: 5, controlled: vec![0, 4] };
        c.validate().unwrap();
        let full = c.expand(&CrAdjustment(vec![4.0, 4.0])).unwrap();
        assert_eq!(full.0, vec![4.0, 1.0, 1.0, 1.0, 4.0]);
        assert_eq!(c.restrict(&full).0, vec![4.0, 4.0]);
        assert!(BandControl { n_total_bands: 5, controlled: vec![4, 0] }.validate().is_err());
    }

    proptest! {
        #[test]
        fn adjustment_commutes_with_band_permutation(
            reference in proptest::collection::vec(1.0f64..3.0, 5),
            adj in proptest::collection::vec(prop_oneof![Just(1.0f64), Just(4.0)], 5),
            perm in Just((0..5usize).collect::<Vec<_>>()).prop_shuffle(),
        ) {
            let out = apply_adjustment(&reference, &CrAdjustment(adj.clone())).unwrap();
            let pr: Vec<f64> = perm.iter().map(|&i| reference[i]).collect();
            let pa: Vec<f64> = perm.iter().map(|&i| adj[i]).collect();
            let pout = apply_adjustment(&pr, &CrAdjustment(pa)).unwrap();
            let expected: Vec<f64> = perm.iter().map(|&i| out[i]).collect();
            prop_assert_eq!(pout, expected);
        }
    }
}
