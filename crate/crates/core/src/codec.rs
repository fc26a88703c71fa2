//! Task codes: which sequences are inputs and which one is synthesized.
//!
//! A code is a pair of zero-one masks over the `n` sequence kinds. The
//! available set is always nonempty, exactly one target is set, and the
//! target is never in the available set.

use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Maximum number of sequence kinds; masks are stored as `u32` bitsets.
pub const MAX_SEQUENCES: usize = 32;

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct TaskCode {
    n: usize,
    src_mask: u32,
    target: usize,
}

impl TaskCode {
    /// Number of sequence kinds.
    pub fn n(&self) -> usize {
        self.n
    }

    pub fn target(&self) -> usize {
        self.target
    }

    pub fn is_available(&self, i: usize) -> bool {
        i < self.n && (self.src_mask >> i) & 1 == 1
    }

    pub fn available_count(&self) -> usize {
        self.src_mask.count_ones() as usize
    }

    /// Ascending indices of the available set.
    pub fn available_indices(&self) -> Vec<usize> {
        (0..self.n).filter(|&i| self.is_available(i)).collect()
    }

    /// Source mask as a zero-one vector of length `n`.
    pub fn src_vec<T: Scalar>(&self) -> Vec<T> {
        (0..self.n)
            .map(|i| if self.is_available(i) { T::one() } else { T::zero() })
            .collect()
    }

    /// Target mask as a zero-one vector of length `n`.
    pub fn tgt_vec<T: Scalar>(&self) -> Vec<T> {
        (0..self.n)
            .map(|i| if i == self.target { T::one() } else { T::zero() })
            .collect()
    }

    /// Concatenated `[src || tgt]` conditioning vector of length `2n`.
    pub fn full_vec<T: Scalar>(&self) -> Vec<T> {
        let mut v = self.src_vec::<T>();
        v.extend(self.tgt_vec::<T>());
        v
    }

    pub fn src_flags(&self) -> Vec<bool> {
        (0..self.n).map(|i| self.is_available(i)).collect()
    }
}

/// Build a validated task code from the available set and the target index.
pub fn make_task_code(
    available: &[usize],
    target: usize,
    n: usize,
) -> Result<TaskCode> {
    if n == 0 || n > MAX_SEQUENCES {
        return Err(Error::InvalidArgument(alloc::format!(
            "sequence count {n} outside 1..={MAX_SEQUENCES}"
        )));
    }
    if target >= n {
        return Err(Error::IndexOutOfRange { index: target, n });
    }
    if available.is_empty() {
        return Err(Error::EmptyAvailableSet);
    }
    let mut mask = 0u32;
    for &i in available {
        if i >= n {
            return Err(Error::IndexOutOfRange { index: i, n });
        }
        mask |= 1 << i;
    }
    if (mask >> target) & 1 == 1 {
        return Err(Error::TargetNotMissing { target });
    }
    Ok(TaskCode {
        n,
        src_mask: mask,
        target,
    })
}

/// Every (available set, target) pair for `n` sequences, ordered by target
/// ascending and then by the available-set bitmask ascending.
pub fn enumerate_tasks(n: usize) -> Result<Vec<TaskCode>> {
    if n < 2 {
        return Err(Error::InvalidArgument(alloc::format!(
            "need at least 2 sequence kinds, got {n}"
        )));
    }
    if n > MAX_SEQUENCES {
        return Err(Error::InvalidArgument(alloc::format!(
            "sequence count {n} above {MAX_SEQUENCES}"
        )));
    }
    let mut out = Vec::new();
    for target in 0..n {
        for mask in 1u32..(1 << n) {
            if (mask >> target) & 1 == 1 {
                continue;
            }
            out.push(TaskCode {
                n,
                src_mask: mask,
                target,
            });
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn builds_masks_from_sets() {
        let code = make_task_code(&[0], 1, 4).unwrap();
        assert_eq!(code.src_vec::<f32>(), [1.0, 0.0, 0.0, 0.0]);
        assert_eq!(code.tgt_vec::<f32>(), [0.0, 1.0, 0.0, 0.0]);

        let code = make_task_code(&[0, 2, 3], 1, 4).unwrap();
        assert_eq!(code.src_vec::<f32>(), [1.0, 0.0, 1.0, 1.0]);
        assert_eq!(code.tgt_vec::<f32>(), [0.0, 1.0, 0.0, 0.0]);
        assert_eq!(code.full_vec::<f32>().len(), 8);
    }

    #[test]
    fn rejects_invalid_tasks() {
        assert_eq!(make_task_code(&[], 1, 4), Err(Error::EmptyAvailableSet));
        assert_eq!(
            make_task_code(&[0, 1], 1, 4),
            Err(Error::TargetNotMissing { target: 1 })
        );
        assert_eq!(
            make_task_code(&[0, 7], 1, 4),
            Err(Error::IndexOutOfRange { index: 7, n: 4 })
        );
        assert_eq!(
            make_task_code(&[0], 9, 4),
            Err(Error::IndexOutOfRange { index: 9, n: 4 })
        );
    }

    #[test]
    fn round_trips_available_and_target() {
        let available = [1usize, 3];
        let code = make_task_code(&available, 0, 5).unwrap();
        assert_eq!(code.available_indices(), available);
        assert_eq!(code.target(), 0);
        assert_eq!(code.n(), 5);
    }

    #[test]
    fn enumeration_counts() {
        assert_eq!(enumerate_tasks(2).unwrap().len(), 2);
        // brute-force: targets * nonempty subsets of the remaining n-1
        for n in 2..=5usize {
            let mut count = 0usize;
            for _target in 0..n {
                for mask in 1u32..(1 << n) {
                    let picks: Vec<usize> =
                        (0..n).filter(|i| (mask >> i) & 1 == 1).collect();
                    if !picks.contains(&_target) {
                        count += 1;
                    }
                }
            }
            assert_eq!(enumerate_tasks(n).unwrap().len(), count, "n={n}");
        }
        assert_eq!(enumerate_tasks(4).unwrap().len(), 28);
        assert!(enumerate_tasks(1).is_err());
    }

    #[test]
    fn enumeration_order_is_deterministic() {
        let a = enumerate_tasks(4).unwrap();
        let b = enumerate_tasks(4).unwrap();
        assert_eq!(a, b);
        // target ascending, then mask ascending
        assert_eq!(a[0].target(), 0);
        assert_eq!(a[0].available_indices(), [1]);
        assert_eq!(a[1].available_indices(), [2]);
        assert_eq!(a[2].available_indices(), [1, 2]);
    }

    #[test]
    fn enumerated_codes_satisfy_invariants() {
        for n in 2..=5usize {
            for code in enumerate_tasks(n).unwrap() {
                assert!(code.available_count() >= 1);
                assert!(!code.is_available(code.target()));
                assert!(code.target() < n);
                let src = code.src_vec::<f64>();
                let tgt = code.tgt_vec::<f64>();
                assert!(src.iter().all(|&v| v == 0.0 || v == 1.0));
                assert_eq!(tgt.iter().sum::<f64>(), 1.0);
                assert_eq!(
                    src.iter().zip(&tgt).map(|(a, b)| a * b).sum::<f64>(),
                    0.0
                );
            }
        }
    }
}
