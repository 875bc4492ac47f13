use serde::{Deserialize, Serialize};

use crate::numerics::argmax;

/// Alignment history of one generated (or teacher-forced) utterance.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AlignmentTrace {
    /// `α_i` for every decoder step.
    pub alignments: Vec<Vec<f64>>,
    /// `argmax α_i` for every decoder step.
    pub peaks: Vec<usize>,
    /// Encoder length `L`.
    pub len: usize,
    /// False when generation hit `max_steps` before the peak reached `L − 1`.
    pub reached_end: bool,
}

impl AlignmentTrace {
    pub fn new(alignments: Vec<Vec<f64>>, len: usize, reached_end: bool) -> Self {
        let peaks = alignments.iter().map(|a| argmax(a)).collect();
        AlignmentTrace {
            alignments,
            peaks,
            len,
            reached_end,
        }
    }

    /// Builds a trace from peak positions alone (one-hot alignments).
    pub fn from_peaks(peaks: &[usize], len: usize) -> Self {
        let alignments = peaks
            .iter()
            .map(|&p| {
                let mut a = vec![0.0; len];
                a[p.min(len.saturating_sub(1))] = 1.0;
                a
            })
            .collect();
        let reached_end = peaks.iter().any(|&p| p + 1 >= len);
        AlignmentTrace::new(alignments, len, reached_end)
    }

    pub fn steps(&self) -> usize {
        self.alignments.len()
    }

    pub fn is_empty(&self) -> bool {
        self.alignments.is_empty()
    }

    /// Final peak ÷ (L − 1), clamped to [0, 1]. A single-position input
    /// counts as fully covered.
    pub fn coverage(&self) -> f64 {
        match self.peaks.last() {
            None => 0.0,
            Some(_) if self.len <= 1 => 1.0,
            Some(&p) => (p as f64 / (self.len - 1) as f64).clamp(0.0, 1.0),
        }
    }

    /// Steps where the peak moves backwards by more than 2 positions.
    pub fn violations(&self) -> usize {
        self.peaks.windows(2).filter(|w| w[0] > w[1] + 2).count()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn coverage_and_violations() {
        let t = AlignmentTrace::from_peaks(&[0, 1, 2, 3, 4], 5);
        assert_eq!(t.coverage(), 1.0);
        assert_eq!(t.violations(), 0);
        let t = AlignmentTrace::from_peaks(&[0, 0, 0], 5);
        assert_eq!(t.coverage(), 0.0);
        let t = AlignmentTrace::from_peaks(&[0, 3, 6, 1, 2], 8);
        assert_eq!(t.violations(), 1);
        assert_eq!(t.peaks.len(), t.steps());
        let t = AlignmentTrace::from_peaks(&[4, 2], 5);
        assert_eq!(t.violations(), 0);
        assert!((t.coverage() - 0.5).abs() < 1e-15);
    }
}
