//! Fixed-support histograms and the categorical projection.
//!
//! Every estimator output is a 16-bin histogram. Values live on a uniform
//! grid over `[0, 1]`; distances live on `1..=15` plus an overflow bin that
//! stands for "longer than 15 steps, or never".

use serde::{Deserialize, Serialize};

pub const BINS: usize = 16;

/// Largest representable finite distance.
pub const D_MAX: usize = 15;

/// Index of the overflow bin in a distance histogram.
pub const OVERFLOW: usize = BINS - 1;

/// Numeric position of the overflow bin used during projection, so that
/// `1 + 15` folds into it.
pub const OVERFLOW_POSITION: f64 = (D_MAX + 1) as f64;

const VALUE_SUPPORT: [f64; BINS] = {
    let mut s = [0.0; BINS];
    let mut i = 0;
    while i < BINS {
        s[i] = i as f64 / (BINS - 1) as f64;
        i += 1;
    }
    s
};

const DISTANCE_SUPPORT: [f64; BINS] = {
    let mut s = [0.0; BINS];
    let mut i = 0;
    while i < BINS {
        s[i] = (i + 1) as f64;
        i += 1;
    }
    s
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Support {
    /// 16 evenly spaced atoms on `[0, 1]`.
    Value,
    /// Distances `1..=15` and the overflow bin.
    Distance,
}

impl Support {
    pub fn atoms(self) -> &'static [f64; BINS] {
        match self {
            Support::Value => &VALUE_SUPPORT,
            Support::Distance => &DISTANCE_SUPPORT,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Histogram {
    pub support: Support,
    pub probs: [f64; BINS],
}

impl Histogram {
    pub fn uniform(support: Support) -> Self {
        Histogram {
            support,
            probs: [1.0 / BINS as f64; BINS],
        }
    }

    pub fn point_mass(support: Support, bin: usize) -> Self {
        let mut probs = [0.0; BINS];
        probs[bin] = 1.0;
        Histogram { support, probs }
    }

    /// Point mass on the atom nearest to `value` (split if between two atoms).
    pub fn at(support: Support, value: f64) -> Self {
        project(&[value], &[1.0], support)
    }

    /// Normalises arbitrary nonnegative weights into a histogram.
    pub fn from_weights(support: Support, weights: &[f64; BINS]) -> Self {
        let total: f64 = weights.iter().sum();
        let mut probs = [0.0; BINS];
        if total > 0.0 {
            for (p, w) in probs.iter_mut().zip(weights) {
                *p = w.max(0.0) / total;
            }
            // Guard against negatives that slipped through the sum.
            let total: f64 = probs.iter().sum();
            probs.iter_mut().for_each(|p| *p /= total);
        } else {
            probs = [1.0 / BINS as f64; BINS];
        }
        Histogram { support, probs }
    }

    pub fn is_valid(&self) -> bool {
        let total: f64 = self.probs.iter().sum();
        self.probs.iter().all(|&p| p >= 0.0) && (total - 1.0).abs() <= 1e-9
    }

    /// Mean over the support. A distance histogram with overflow mass has an
    /// infinite mean; use [`Histogram::finite_expectation`] for a capped value.
    pub fn expectation(&self) -> f64 {
        if self.support == Support::Distance && self.probs[OVERFLOW] > 0.0 {
            return f64::INFINITY;
        }
        self.dot(self.support.atoms())
    }

    /// Mean with the overflow bin counted as `overflow_value`.
    pub fn finite_expectation(&self, overflow_value: f64) -> f64 {
        let mut atoms = *self.support.atoms();
        if self.support == Support::Distance {
            atoms[OVERFLOW] = overflow_value;
        }
        self.dot(&atoms)
    }

    fn dot(&self, atoms: &[f64; BINS]) -> f64 {
        self.probs.iter().zip(atoms).map(|(p, z)| p * z).sum()
    }

    /// Mixes toward `target` at rate `alpha`: `(1 - alpha) * self + alpha * target`.
    pub fn mix_toward(&mut self, target: &Histogram, alpha: f64) {
        for (p, t) in self.probs.iter_mut().zip(&target.probs) {
            *p = (1.0 - alpha) * *p + alpha * t;
        }
    }
}

/// Categorical projection of weighted atoms onto a fixed support.
///
/// Each atom's mass is split between the two neighbouring bins in proportion
/// to proximity; atoms outside the support are clamped to its ends.
pub fn project(values: &[f64], probs: &[f64], support: Support) -> Histogram {
    debug_assert_eq!(values.len(), probs.len());
    let atoms = support.atoms();
    let lo = atoms[0];
    let hi = atoms[BINS - 1];
    let mut out = [0.0; BINS];
    for (&v, &p) in values.iter().zip(probs) {
        if p == 0.0 {
            continue;
        }
        let v = v.clamp(lo, hi);
        // First atom strictly above v, searched over the short fixed array.
        let upper = atoms.iter().position(|&z| z > v).unwrap_or(BINS);
        if upper == BINS {
            out[BINS - 1] += p;
            continue;
        }
        let lower = upper - 1;
        let (zl, zu) = (atoms[lower], atoms[upper]);
        let w_upper = (v - zl) / (zu - zl);
        out[lower] += p * (1.0 - w_upper);
        out[upper] += p * w_upper;
    }
    Histogram { support, probs: out }
}

/// Expected cumulative discount `E[gamma^D]` recovered from a distance
/// histogram by replacing each distance atom with its discount.
///
/// The overflow bin contributes nothing.
pub fn transplant_discount(dist: &Histogram, gamma: f64) -> f64 {
    debug_assert_eq!(dist.support, Support::Distance);
    let mut discount = 1.0;
    let mut total = 0.0;
    for &p in &dist.probs[..OVERFLOW] {
        discount *= gamma;
        total += p * discount;
    }
    total
}

/// Distributional Bellman target for the reward estimator:
/// `reward + gamma * Z` projected onto the value support.
pub fn shifted_value_target(reward: f64, gamma: f64, next: &Histogram) -> Histogram {
    let atoms = Support::Value.atoms();
    let shifted: [f64; BINS] = std::array::from_fn(|i| reward + gamma * atoms[i]);
    project(&shifted, &next.probs, Support::Value)
}

/// Distance target `1 + D`; mass at 15 moves into the overflow bin and
/// overflow stays overflow.
pub fn shifted_distance_target(next: &Histogram) -> Histogram {
    let mut probs = [0.0; BINS];
    probs[1..OVERFLOW].copy_from_slice(&next.probs[..OVERFLOW - 1]);
    probs[OVERFLOW] = next.probs[OVERFLOW - 1] + next.probs[OVERFLOW];
    Histogram {
        support: Support::Distance,
        probs,
    }
}
