//! Pilot placement over a `D x N` block.
//!
//! Both layouts put a pilot on every channel at the first and last time
//! index. The wrapped diagonal then places one pilot every `spacing` time
//! indices, stepping one channel down per pilot and wrapping from the last
//! channel back to the first. The uniform layout places pilots at the same
//! evenly spaced instants on every channel. Overhead is pilots per data
//! symbol, endpoint pilots included.

use num_complex::Complex64;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::grid::Grid;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum PilotError {
    #[error("pilot overhead must lie in (0, 1], got {0}")]
    InvalidOverhead(f64),
    #[error("block length must be at least 2, got {0}")]
    BlockTooShort(usize),
    #[error("at least one channel is required")]
    NoChannels,
    #[error("spacing {spacing} needed for overhead {oh} exceeds block length {len} - 1")]
    SpacingTooLarge { spacing: usize, oh: f64, len: usize },
    #[error("pilot spacing must be at least 1")]
    ZeroSpacing,
    #[error("schedule contains no data symbols")]
    NoData,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Layout {
    WrappedDiagonal,
    Uniform,
    /// No pilots at all (blind receivers).
    None,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PilotSchedule {
    layout: Layout,
    spacing: usize,
    mask: Grid<bool>,
    values: Grid<Complex64>,
}

fn validate(d: usize, n: usize, oh: f64) -> Result<(), PilotError> {
    if d == 0 {
        return Err(PilotError::NoChannels);
    }
    if n < 2 {
        return Err(PilotError::BlockTooShort(n));
    }
    if !(oh > 0.0 && oh <= 1.0) {
        return Err(PilotError::InvalidOverhead(oh));
    }
    Ok(())
}

/// Number of pilots of a wrapped-diagonal layout, endpoints included.
fn diagonal_pilot_count(d: usize, n: usize, spacing: usize) -> usize {
    let last = n - 1;
    let diagonal = last / spacing + 1;
    // The diagonal pilot at time 0 always lands on an endpoint pilot.
    let mut collisions = 1;
    if last.is_multiple_of(spacing) {
        collisions += 1;
    }
    diagonal - collisions + 2 * d
}

fn uniform_pilot_count(d: usize, n: usize, spacing: usize) -> usize {
    let last = n - 1;
    let per_channel = last / spacing + 1 + usize::from(!last.is_multiple_of(spacing));
    d * per_channel
}

/// Spacing in `1..n` whose achieved overhead is closest to `oh`.
fn closest_spacing(d: usize, n: usize, oh: f64, count: impl Fn(usize) -> usize) -> usize {
    let total = d * n;
    let mut best = (f64::INFINITY, 1);
    for spacing in 1..n {
        let pilots = count(spacing);
        if pilots >= total {
            continue;
        }
        let achieved = pilots as f64 / (total - pilots) as f64;
        let err = (achieved - oh).abs();
        if err < best.0 {
            best = (err, spacing);
        }
    }
    best.1
}

impl PilotSchedule {
    /// Wrapped-diagonal layout with the spacing that best matches `oh`.
    pub fn wrapped_diagonal(d: usize, n: usize, oh: f64, es: f64) -> Result<Self, PilotError> {
        validate(d, n, oh)?;
        let nominal = (1.0 / (oh * d as f64)).round().max(1.0) as usize;
        if nominal > n - 1 {
            return Err(PilotError::SpacingTooLarge {
                spacing: nominal,
                oh,
                len: n,
            });
        }
        let spacing = closest_spacing(d, n, oh, |t| diagonal_pilot_count(d, n, t));
        Self::wrapped_diagonal_with_spacing(d, n, spacing, es)
    }

    pub fn wrapped_diagonal_with_spacing(
        d: usize,
        n: usize,
        spacing: usize,
        es: f64,
    ) -> Result<Self, PilotError> {
        if d == 0 {
            return Err(PilotError::NoChannels);
        }
        if n < 2 {
            return Err(PilotError::BlockTooShort(n));
        }
        if spacing == 0 {
            return Err(PilotError::ZeroSpacing);
        }
        let mut mask = Grid::filled(d, n, false);
        for (j, t) in (0..n).step_by(spacing).enumerate() {
            *mask.get_mut(j % d, t) = true;
        }
        mark_endpoints(&mut mask);
        Ok(Self::from_mask(Layout::WrappedDiagonal, spacing, mask, es))
    }

    /// Identical evenly spaced pilot instants on every channel.
    pub fn uniform_per_channel(d: usize, n: usize, oh: f64, es: f64) -> Result<Self, PilotError> {
        validate(d, n, oh)?;
        let nominal = (1.0 / oh).round().max(1.0) as usize;
        if nominal > n - 1 {
            return Err(PilotError::SpacingTooLarge {
                spacing: nominal,
                oh,
                len: n,
            });
        }
        let spacing = closest_spacing(d, n, oh, |t| uniform_pilot_count(d, n, t));
        Self::uniform_with_spacing(d, n, spacing, es)
    }

    pub fn uniform_with_spacing(
        d: usize,
        n: usize,
        spacing: usize,
        es: f64,
    ) -> Result<Self, PilotError> {
        if d == 0 {
            return Err(PilotError::NoChannels);
        }
        if n < 2 {
            return Err(PilotError::BlockTooShort(n));
        }
        if spacing == 0 {
            return Err(PilotError::ZeroSpacing);
        }
        let mut mask = Grid::filled(d, n, false);
        for i in 0..d {
            for t in (0..n).step_by(spacing) {
                *mask.get_mut(i, t) = true;
            }
        }
        mark_endpoints(&mut mask);
        Ok(Self::from_mask(Layout::Uniform, spacing, mask, es))
    }

    /// A schedule without any pilots.
    pub fn none(d: usize, n: usize) -> Self {
        Self {
            layout: Layout::None,
            spacing: 0,
            mask: Grid::filled(d, n, false),
            values: Grid::filled(d, n, Complex64::new(0.0, 0.0)),
        }
    }

    /// Arbitrary mask with every pilot set to `sqrt(es)`.
    pub fn from_mask(layout: Layout, spacing: usize, mask: Grid<bool>, es: f64) -> Self {
        let rho = Complex64::new(es.sqrt(), 0.0);
        let zero = Complex64::new(0.0, 0.0);
        let values = mask.map(|&p| if p { rho } else { zero });
        Self {
            layout,
            spacing,
            mask,
            values,
        }
    }

    pub fn layout(&self) -> Layout {
        self.layout
    }

    /// Time spacing between consecutive pilot instants (0 if pilot-free).
    pub fn spacing(&self) -> usize {
        self.spacing
    }

    pub fn channels(&self) -> usize {
        self.mask.rows()
    }

    pub fn len(&self) -> usize {
        self.mask.cols()
    }

    pub fn is_empty(&self) -> bool {
        self.mask.cols() == 0
    }

    pub fn mask(&self) -> &Grid<bool> {
        &self.mask
    }

    pub fn values(&self) -> &Grid<Complex64> {
        &self.values
    }

    #[inline]
    pub fn is_pilot(&self, channel: usize, time: usize) -> bool {
        *self.mask.get(channel, time)
    }

    #[inline]
    pub fn value(&self, channel: usize, time: usize) -> Complex64 {
        *self.values.get(channel, time)
    }

    pub fn pilot_count(&self) -> usize {
        self.mask.as_slice().iter().filter(|&&p| p).count()
    }

    pub fn data_count(&self) -> usize {
        self.mask.as_slice().len() - self.pilot_count()
    }

    /// Pilots per data symbol across the whole block.
    pub fn overhead(&self) -> Result<f64, PilotError> {
        let data = self.data_count();
        if data == 0 {
            return Err(PilotError::NoData);
        }
        Ok(self.pilot_count() as f64 / data as f64)
    }

    /// Fraction of positions carrying data, `N_data / (N_data + N_pilot)`.
    pub fn data_fraction(&self) -> f64 {
        self.data_count() as f64 / self.mask.as_slice().len() as f64
    }

    /// Single-channel view of row `channel`.
    pub fn channel(&self, channel: usize) -> Self {
        Self {
            layout: self.layout,
            spacing: self.spacing,
            mask: Grid::from_vec(1, self.len(), self.mask.row(channel).to_vec()),
            values: Grid::from_vec(1, self.len(), self.values.row(channel).to_vec()),
        }
    }

    pub fn permute_channels(&self, perm: &[usize]) -> Self {
        Self {
            layout: self.layout,
            spacing: self.spacing,
            mask: self.mask.permute_rows(perm),
            values: self.values.permute_rows(perm),
        }
    }
}

fn mark_endpoints(mask: &mut Grid<bool>) {
    let last = mask.cols() - 1;
    for i in 0..mask.rows() {
        *mask.get_mut(i, 0) = true;
        *mask.get_mut(i, last) = true;
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn pilot_positions(s: &PilotSchedule) -> Vec<(usize, usize)> {
        let mut v = Vec::new();
        for i in 0..s.channels() {
            for k in 0..s.len() {
                if s.is_pilot(i, k) {
                    v.push((i + 1, k + 1));
                }
            }
        }
        v
    }

    #[test]
    fn four_channel_diagonal_every_other_index() {
        let s = PilotSchedule::wrapped_diagonal_with_spacing(4, 8, 2, 1.0).unwrap();
        let p = pilot_positions(&s);
        for pos in [(1, 1), (2, 3), (3, 5), (4, 7)] {
            assert!(p.contains(&pos));
        }
        for ch in 1..=4 {
            assert!(p.contains(&(ch, 1)) && p.contains(&(ch, 8)));
        }
        // 8 endpoint pilots + 3 interior diagonal pilots.
        assert_eq!(p.len(), 11);
        assert!((s.overhead().unwrap() - 11.0 / 21.0).abs() < 1e-15);
        assert!(s
            .values()
            .as_slice()
            .iter()
            .zip(s.mask().as_slice())
            .all(|(v, &m)| if m {
                *v == Complex64::new(1.0, 0.0)
            } else {
                v.norm() == 0.0
            }));
    }

    #[test]
    fn single_channel_diagonal_is_uniform() {
        for oh in [0.002, 0.01, 0.05, 0.3] {
            let a = PilotSchedule::wrapped_diagonal(1, 1000, oh, 1.0).unwrap();
            let b = PilotSchedule::uniform_per_channel(1, 1000, oh, 1.0).unwrap();
            assert_eq!(a.mask(), b.mask());
        }
    }

    #[test]
    fn diagonal_overhead_accuracy() {
        let s = PilotSchedule::wrapped_diagonal(4, 10_000, 0.01, 1.0).unwrap();
        assert!((s.overhead().unwrap() - 0.01).abs() <= 0.001);
        let s = PilotSchedule::wrapped_diagonal(20, 10_000, 0.01, 1.0).unwrap();
        assert!((s.overhead().unwrap() - 0.01).abs() <= 0.001);
    }

    #[test]
    fn uniform_layouts() {
        let s = PilotSchedule::uniform_with_spacing(2, 11, 5, 1.0).unwrap();
        for i in 0..2 {
            let idx: Vec<usize> = (0..11)
                .filter(|&k| s.is_pilot(i, k))
                .map(|k| k + 1)
                .collect();
            assert_eq!(idx, vec![1, 6, 11]);
        }
        let s = PilotSchedule::uniform_with_spacing(3, 40, 39, 1.0).unwrap();
        assert_eq!(s.pilot_count(), 6);

        let s = PilotSchedule::uniform_per_channel(2, 10_000, 0.002, 1.0).unwrap();
        assert!((s.overhead().unwrap() - 0.002).abs() <= 0.0002);
        assert!(
            (450..=550).contains(&s.spacing()),
            "spacing {}",
            s.spacing()
        );
    }

    #[test]
    fn overhead_counts() {
        let s = PilotSchedule::uniform_with_spacing(1, 101, 100, 1.0).unwrap();
        assert!((s.overhead().unwrap() - 2.0 / 99.0).abs() < 1e-15);
        let s = PilotSchedule::uniform_with_spacing(2, 5, 1, 1.0).unwrap();
        assert_eq!(s.overhead(), Err(PilotError::NoData));
    }

    #[test]
    fn invalid_requests() {
        assert_eq!(
            PilotSchedule::wrapped_diagonal(4, 100, 0.0, 1.0),
            Err(PilotError::InvalidOverhead(0.0))
        );
        assert!(PilotSchedule::wrapped_diagonal(4, 100, 1.5, 1.0).is_err());
        assert!(matches!(
            PilotSchedule::wrapped_diagonal(4, 100, 1e-4, 1.0),
            Err(PilotError::SpacingTooLarge { .. })
        ));
        assert!(matches!(
            PilotSchedule::uniform_per_channel(2, 100, 1e-3, 1.0),
            Err(PilotError::SpacingTooLarge { .. })
        ));
        assert_eq!(
            PilotSchedule::wrapped_diagonal(0, 100, 0.1, 1.0),
            Err(PilotError::NoChannels)
        );
        assert_eq!(
            PilotSchedule::uniform_per_channel(2, 1, 0.1, 1.0),
            Err(PilotError::BlockTooShort(1))
        );
    }

    proptest! {
        #[test]
        fn endpoint_rule_and_balance(d in 1usize..24, n in 2usize..3000, oh in 0.005f64..0.5) {
            let nominal = (1.0 / (oh * d as f64)).round().max(1.0) as usize;
            if nominal < n {
                let s = PilotSchedule::wrapped_diagonal(d, n, oh, 2.0).unwrap();
                for i in 0..d {
                    prop_assert!(s.is_pilot(i, 0) && s.is_pilot(i, n - 1));
                }
                let interior: Vec<usize> = (0..d)
                    .map(|i| (1..n - 1).filter(|&k| s.is_pilot(i, k)).count())
                    .collect();
                let lo = *interior.iter().min().unwrap();
                let hi = *interior.iter().max().unwrap();
                prop_assert!(hi - lo <= 1, "interior counts {:?}", interior);
                // One pilot per interior instant.
                for k in 1..n - 1 {
                    prop_assert!((0..d).filter(|&i| s.is_pilot(i, k)).count() <= 1);
                }
                prop_assert_eq!(&s, &PilotSchedule::wrapped_diagonal(d, n, oh, 2.0).unwrap());
            }
            if ((1.0 / oh).round() as usize) < n {
                let s = PilotSchedule::uniform_per_channel(d, n, oh, 2.0).unwrap();
                for i in 0..d {
                    prop_assert!(s.is_pilot(i, 0) && s.is_pilot(i, n - 1));
                    prop_assert_eq!(s.mask().row(i), s.mask().row(0));
                }
            }
        }
    }
}
