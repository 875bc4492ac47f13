//! Frame distances, dynamic time warping and alignment robustness.
//!
//! The delimited matrix format used by [`read_matrix`] / [`write_matrix`] has
//! one frame per line with whitespace-separated values; blank lines and lines
//! starting with `#` are ignored.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::AlignmentTrace;

/// `10 / ln 10`.
pub const MCD_SCALE: f64 = 10.0 / std::f64::consts::LN_10;

/// Non-empty list of equal-width frames.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FeatureSequence {
    frames: Vec<Vec<f64>>,
}

impl FeatureSequence {
    pub fn new(frames: Vec<Vec<f64>>) -> Result<Self> {
        let Some(first) = frames.first() else {
            return Err(Error::Empty("feature sequence"));
        };
        let dim = first.len();
        if dim == 0 {
            return Err(Error::Empty("feature frame"));
        }
        if let Some((i, f)) = frames.iter().enumerate().find(|(_, f)| f.len() != dim) {
            return Err(Error::shape(
                "FeatureSequence::new",
                format!("frame {i} has {} values, expected {dim}", f.len()),
            ));
        }
        Ok(FeatureSequence { frames })
    }

    pub fn frames(&self) -> &[Vec<f64>] {
        &self.frames
    }

    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn dim(&self) -> usize {
        self.frames[0].len()
    }
}

/// Mel-cepstral distortion between two frames, skipping coefficient 0:
/// `(10/ln 10)·√(2·Σ_{d≥1} (a_d − b_d)²)`.
pub fn mcd(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::shape("mcd", format!("{} vs {} coefficients", a.len(), b.len())));
    }
    let ss: f64 = a.iter().zip(b).skip(1).map(|(x, y)| (x - y) * (x - y)).sum();
    Ok(MCD_SCALE * (2.0 * ss).sqrt())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DtwResult {
    pub total_cost: f64,
    /// `(i, j)` pairs from `(0, 0)` to `(N − 1, M − 1)`.
    pub path: Vec<(usize, usize)>,
    /// `total_cost / path.len()`.
    pub normalized_cost: f64,
}

/// Minimal-cost monotone alignment with steps `(1,0)`, `(0,1)`, `(1,1)`.
///
/// Ties are broken diagonal first, then `(1,0)`, then `(0,1)`, so the path
/// is deterministic.
pub fn dtw(
    a: &FeatureSequence,
    b: &FeatureSequence,
    frame_cost: impl Fn(&[f64], &[f64]) -> Result<f64>,
) -> Result<DtwResult> {
    let (n, m) = (a.len(), b.len());
    let mut cost = vec![0.0; n * m];
    for i in 0..n {
        for j in 0..m {
            let c = frame_cost(&a.frames[i], &b.frames[j])?;
            if !c.is_finite() {
                return Err(Error::NonFinite("dtw frame cost"));
            }
            cost[i * m + j] = c;
        }
    }
    let mut acc = vec![f64::INFINITY; n * m];
    for i in 0..n {
        for j in 0..m {
            let best = if i == 0 && j == 0 {
                0.0
            } else {
                let diag = if i > 0 && j > 0 { acc[(i - 1) * m + j - 1] } else { f64::INFINITY };
                let up = if i > 0 { acc[(i - 1) * m + j] } else { f64::INFINITY };
                let left = if j > 0 { acc[i * m + j - 1] } else { f64::INFINITY };
                diag.min(up).min(left)
            };
            acc[i * m + j] = best + cost[i * m + j];
        }
    }
    let mut path = vec![(n - 1, m - 1)];
    let (mut i, mut j) = (n - 1, m - 1);
    while i > 0 || j > 0 {
        let diag = if i > 0 && j > 0 { acc[(i - 1) * m + j - 1] } else { f64::INFINITY };
        let up = if i > 0 { acc[(i - 1) * m + j] } else { f64::INFINITY };
        let left = if j > 0 { acc[i * m + j - 1] } else { f64::INFINITY };
        if diag <= up && diag <= left {
            i -= 1;
            j -= 1;
        } else if up <= left {
            i -= 1;
        } else {
            j -= 1;
        }
        path.push((i, j));
    }
    path.reverse();
    let total_cost = acc[n * m - 1];
    Ok(DtwResult {
        total_cost,
        normalized_cost: total_cost / path.len() as f64,
        path,
    })
}

/// Path-length-normalized DTW cost with [`mcd`] frame distances.
pub fn mcd_dtw(a: &FeatureSequence, b: &FeatureSequence) -> Result<f64> {
    if a.dim() != b.dim() {
        return Err(Error::shape("mcd_dtw", format!("{} vs {} coefficients", a.dim(), b.dim())));
    }
    Ok(dtw(a, b, mcd)?.normalized_cost)
}

/// Alignment robustness of a generated utterance: a proxy for transcription
/// error rates that needs no recognizer.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RobustnessScore {
    /// Final peak ÷ (L − 1), clamped to [0, 1].
    pub coverage: f64,
    /// Steps where the peak moves back by more than 2 positions.
    pub violations: usize,
    /// Steps where the peak equals the peak [`STALL_WINDOW`] steps earlier,
    /// excluding steps after the peak reached the end.
    pub stalls: usize,
}

pub const STALL_WINDOW: usize = 4;

impl RobustnessScore {
    /// Coverage above 0.9 with fewer than 3 violations.
    pub fn is_aligned(&self) -> bool {
        self.coverage > 0.9 && self.violations < 3
    }
}

pub fn robustness_score(trace: &AlignmentTrace, len: usize) -> Result<RobustnessScore> {
    if trace.peaks.is_empty() {
        return Err(Error::Empty("alignment trace"));
    }
    let peaks = &trace.peaks;
    let coverage = if len <= 1 {
        1.0
    } else {
        (*peaks.last().unwrap() as f64 / (len - 1) as f64).clamp(0.0, 1.0)
    };
    let violations = peaks.windows(2).filter(|w| w[0] > w[1] + 2).count();
    let stalls = (STALL_WINDOW..peaks.len())
        .filter(|&i| peaks[i] == peaks[i - STALL_WINDOW] && peaks[i] + 1 < len)
        .count();
    Ok(RobustnessScore {
        coverage,
        violations,
        stalls,
    })
}

pub fn parse_matrix(text: &str) -> Result<FeatureSequence> {
    let mut frames = Vec::new();
    for (n, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let frame = line
            .split_whitespace()
            .map(|s| {
                s.parse::<f64>().map_err(|_| Error::Config {
                    location: format!("line {}", n + 1),
                    message: format!("`{s}` is not a number"),
                })
            })
            .collect::<Result<Vec<_>>>()?;
        frames.push(frame);
    }
    FeatureSequence::new(frames)
}

pub fn format_matrix(seq: &FeatureSequence) -> String {
    let mut out = String::new();
    for f in seq.frames() {
        let row: Vec<String> = f.iter().map(|v| v.to_string()).collect();
        out.push_str(&row.join(" "));
        out.push('\n');
    }
    out
}

pub fn read_matrix(path: &Path) -> Result<FeatureSequence> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_matrix(&text)
}

pub fn write_matrix(seq: &FeatureSequence, path: &Path) -> Result<()> {
    fs::write(path, format_matrix(seq)).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn seq(rows: &[&[f64]]) -> FeatureSequence {
        FeatureSequence::new(rows.iter().map(|r| r.to_vec()).collect()).unwrap()
    }

    #[test]
    fn mcd_closed_forms() {
        assert_eq!(mcd(&[1.0, 2.0, 3.0], &[1.0, 2.0, 3.0]).unwrap(), 0.0);
        let d = mcd(&[0.0, 0.0, 0.0], &[0.0, 0.3, 0.0]).unwrap();
        assert!((d - MCD_SCALE * 2f64.sqrt() * 0.3).abs() < 1e-12);
        assert_eq!(mcd(&[5.0, 1.0], &[-5.0, 1.0]).unwrap(), 0.0);
        // mpmath, 50 digits: a=[0.1,-0.7,1.3,0.25], b=[0.9,0.2,-0.4,0.05]
        let v = mcd(&[0.1, -0.7, 1.3, 0.25], &[0.9, 0.2, -0.4, 0.05]).unwrap();
        assert!((v - 11.877_775_438_384_379).abs() < 1e-12, "{v}");
        assert!(mcd(&[1.0], &[1.0, 2.0]).is_err());
    }

    #[test]
    fn dtw_absorbs_repetition() {
        let a = seq(&[&[0.0, 1.0]]);
        let b = seq(&[&[0.0, 1.0], &[0.0, 1.0], &[0.0, 1.0]]);
        let r = dtw(&a, &b, mcd).unwrap();
        assert_eq!(r.total_cost, 0.0);
        assert_eq!(r.path, vec![(0, 0), (0, 1), (0, 2)]);
        let r = dtw(&b, &b, mcd).unwrap();
        assert_eq!(r.path, vec![(0, 0), (1, 1), (2, 2)]);
    }

    #[test]
    fn robustness_examples() {
        let diag = AlignmentTrace::from_peaks(&[0, 1, 2, 3, 4, 5], 6);
        let r = robustness_score(&diag, 6).unwrap();
        assert_eq!((r.coverage, r.violations, r.stalls), (1.0, 0, 0));
        assert!(r.is_aligned());
        let frozen = AlignmentTrace::from_peaks(&[0; 8], 6);
        let r = robustness_score(&frozen, 6).unwrap();
        assert_eq!(r.coverage, 0.0);
        assert_eq!(r.stalls, 4);
        let jump = AlignmentTrace::from_peaks(&[0, 2, 4, 6, 8, 3, 4, 9], 10);
        assert_eq!(robustness_score(&jump, 10).unwrap().violations, 1);
        let empty = AlignmentTrace::from_peaks(&[], 6);
        assert!(robustness_score(&empty, 6).is_err());
    }

    #[test]
    fn matrix_text_roundtrip() {
        let s = seq(&[&[0.1, -2.5e-7], &[3.0, 1.0 / 3.0]]);
        assert_eq!(parse_matrix(&format_matrix(&s)).unwrap(), s);
        assert!(parse_matrix("# nothing\n").is_err());
        assert!(parse_matrix("1 2\n3\n").is_err());
        assert!(parse_matrix("1 x\n").is_err());
    }
}
