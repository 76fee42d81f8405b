//! Threshold segmentation of a similarity series.
//!
//! A boundary sits between captions `j` and `j + 1` exactly when
//! `s_j < threshold`. Equality is not a boundary. Because the rule is a plain
//! comparison, raising the threshold can only add boundaries, so sweep
//! counts are non-decreasing.

use std::fmt::Write as _;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::embedding::SimilaritySeries;

pub const DEFAULT_THRESHOLD: f64 = 0.65;

#[derive(Debug, Error, PartialEq)]
pub enum SegmentError {
    #[error("threshold {0} is outside [-1, 1]")]
    ThresholdOutOfRange(f64),
    #[error("thresholds must be strictly ascending (position {position})")]
    UnsortedThresholds { position: usize },
    #[error("{captions} captions supplied for a series over {expected}")]
    CaptionCountMismatch { captions: usize, expected: usize },
    #[error("invalid threshold grid `{0}` (expected start:end:step)")]
    BadGrid(String),
}

/// Inclusive range of caption indices.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Segment {
    pub start: usize,
    pub end: usize,
}

impl Segment {
    pub fn len(&self) -> usize {
        self.end - self.start + 1
    }

    pub fn is_empty(&self) -> bool {
        false
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SegmentationResult {
    pub threshold: f64,
    pub boundary_indices: Vec<usize>,
    pub segments: Vec<Segment>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepCurve {
    pub thresholds: Vec<f64>,
    pub counts: Vec<usize>,
}

impl SweepCurve {
    /// Two-column tab-separated text with a header row.
    pub fn to_tsv(&self) -> String {
        let mut out = String::from("threshold\tcount\n");
        for (t, c) in self.thresholds.iter().zip(&self.counts) {
            let _ = writeln!(out, "{}\t{c}", format_threshold(*t));
        }
        out
    }

    pub fn from_tsv(text: &str) -> Result<Self, String> {
        let mut curve = SweepCurve {
            thresholds: Vec::new(),
            counts: Vec::new(),
        };
        for (n, line) in text.lines().enumerate().skip(1) {
            if line.trim().is_empty() {
                continue;
            }
            let (t, c) = line
                .split_once('\t')
                .ok_or_else(|| format!("line {}: expected two columns", n + 1))?;
            curve
                .thresholds
                .push(t.parse().map_err(|e| format!("line {}: {e}", n + 1))?);
            curve
                .counts
                .push(c.parse().map_err(|e| format!("line {}: {e}", n + 1))?);
        }
        Ok(curve)
    }
}

fn check_threshold(threshold: f64) -> Result<(), SegmentError> {
    if !(-1.0..=1.0).contains(&threshold) {
        return Err(SegmentError::ThresholdOutOfRange(threshold));
    }
    Ok(())
}

fn segments_from(boundaries: &[usize], caption_count: usize) -> Vec<Segment> {
    let mut segments = Vec::with_capacity(boundaries.len() + 1);
    let mut start = 0;
    for &j in boundaries {
        segments.push(Segment { start, end: j });
        start = j + 1;
    }
    segments.push(Segment {
        start,
        end: caption_count.saturating_sub(1),
    });
    segments
}

pub fn segment(series: &SimilaritySeries, threshold: f64) -> Result<SegmentationResult, SegmentError> {
    check_threshold(threshold)?;
    let boundary_indices: Vec<usize> = series
        .values
        .iter()
        .enumerate()
        .filter(|(_, s)| **s < threshold)
        .map(|(j, _)| j)
        .collect();
    let segments = segments_from(&boundary_indices, series.caption_count);
    Ok(SegmentationResult {
        threshold,
        boundary_indices,
        segments,
    })
}

pub fn sweep(series: &SimilaritySeries, thresholds: &[f64]) -> Result<SweepCurve, SegmentError> {
    for (i, t) in thresholds.iter().enumerate() {
        check_threshold(*t)?;
        if i > 0 && thresholds[i - 1] >= *t {
            return Err(SegmentError::UnsortedThresholds { position: i });
        }
    }
    // Sorting once lets every threshold be answered by a partition point.
    let mut sorted = series.values.clone();
    sorted.sort_by(f64::total_cmp);
    let counts = thresholds
        .iter()
        .map(|t| sorted.partition_point(|s| s < t))
        .collect();
    Ok(SweepCurve {
        thresholds: thresholds.to_vec(),
        counts,
    })
}

/// `start:end:step`, inclusive of `end` when it falls on the grid.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ThresholdGrid {
    pub start: f64,
    pub end: f64,
    pub step: f64,
}

impl Default for ThresholdGrid {
    fn default() -> Self {
        Self {
            start: 0.0,
            end: 1.0,
            step: 0.05,
        }
    }
}

impl ThresholdGrid {
    pub fn values(&self) -> Vec<f64> {
        let n = ((self.end - self.start) / self.step + 1e-9).floor() as usize + 1;
        (0..n)
            // Rounding keeps 0.15 as 0.15 rather than 0.15000000000000002.
            .map(|i| ((self.start + i as f64 * self.step) * 1e9).round() / 1e9)
            .collect()
    }
}

impl FromStr for ThresholdGrid {
    type Err = SegmentError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let bad = || SegmentError::BadGrid(s.to_string());
        let parts: Vec<f64> = s
            .split(':')
            .map(|p| p.trim().parse::<f64>().map_err(|_| bad()))
            .collect::<Result<_, _>>()?;
        let [start, end, step] = parts[..] else {
            return Err(bad());
        };
        if step.is_nan() || step <= 0.0 || end < start || !start.is_finite() || !end.is_finite() {
            return Err(bad());
        }
        check_threshold(start)?;
        check_threshold(end)?;
        Ok(Self { start, end, step })
    }
}

pub fn format_threshold(t: f64) -> String {
    let s = format!("{t:.4}");
    let s = s.trim_end_matches('0');
    let s = s.strip_suffix('.').map(|x| format!("{x}.0")).unwrap_or(s.to_string());
    if s == "-0.0" {
        "0.0".into()
    } else {
        s
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoundaryRow {
    pub boundary_index: usize,
    pub similarity: f64,
    pub caption_before: String,
    pub caption_after: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoundaryReport {
    pub threshold: f64,
    pub caption_count: usize,
    pub boundary_count: usize,
    pub rows: Vec<BoundaryRow>,
}

/// Pairs each boundary with the captions on either side and its similarity.
pub fn annotate_boundaries(
    result: &SegmentationResult,
    series: &SimilaritySeries,
    captions: &[String],
) -> Result<BoundaryReport, SegmentError> {
    if captions.len() != series.caption_count {
        return Err(SegmentError::CaptionCountMismatch {
            captions: captions.len(),
            expected: series.caption_count,
        });
    }
    let rows = result
        .boundary_indices
        .iter()
        .map(|&j| BoundaryRow {
            boundary_index: j,
            similarity: series.values[j],
            caption_before: captions[j].clone(),
            caption_after: captions[j + 1].clone(),
        })
        .collect::<Vec<_>>();
    Ok(BoundaryReport {
        threshold: result.threshold,
        caption_count: captions.len(),
        boundary_count: rows.len(),
        rows,
    })
}

/// Optional post-processing: drops boundaries that would leave a segment
/// shorter than `min_len` captions, scanning left to right. Not applied
/// unless asked for.
pub fn merge_short_segments(result: &SegmentationResult, caption_count: usize, min_len: usize) -> SegmentationResult {
    let mut kept = Vec::new();
    let mut start = 0usize;
    for &j in &result.boundary_indices {
        if j + 1 - start >= min_len && caption_count - (j + 1) >= min_len {
            kept.push(j);
            start = j + 1;
        }
    }
    SegmentationResult {
        threshold: result.threshold,
        segments: segments_from(&kept, caption_count),
        boundary_indices: kept,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn series(v: &[f64]) -> SimilaritySeries {
        SimilaritySeries::from_values(v.to_vec())
    }

    #[test]
    fn reported_threshold_example() {
        let s = series(&[0.9, 0.6, 0.8, 0.5, 0.7]);
        let r = segment(&s, 0.65).unwrap();
        assert_eq!(r.boundary_indices, vec![1, 3]);
        assert_eq!(
            r.segments,
            vec![
                Segment { start: 0, end: 1 },
                Segment { start: 2, end: 3 },
                Segment { start: 4, end: 5 }
            ]
        );
    }

    #[test]
    fn minus_one_gives_single_segment() {
        let r = segment(&series(&[-1.0, 0.2, 1.0]), -1.0).unwrap();
        assert!(r.boundary_indices.is_empty());
        assert_eq!(r.segments, vec![Segment { start: 0, end: 3 }]);
    }

    #[test]
    fn identical_captions_never_split() {
        let r = segment(&series(&[1.0; 10]), 0.999).unwrap();
        assert!(r.boundary_indices.is_empty());
    }

    #[test]
    fn equality_is_not_a_boundary() {
        let r = segment(&series(&[0.65, 0.6499999]), 0.65).unwrap();
        assert_eq!(r.boundary_indices, vec![1]);
    }

    #[test]
    fn threshold_range_checked() {
        assert_eq!(
            segment(&series(&[0.5]), 1.5),
            Err(SegmentError::ThresholdOutOfRange(1.5))
        );
    }

    #[test]
    fn sweep_examples() {
        let s = series(&[0.9, 0.6, 0.8, 0.5, 0.7]);
        assert_eq!(sweep(&s, &[0.55, 0.65, 0.85]).unwrap().counts, vec![1, 2, 4]);
        assert_eq!(sweep(&s, &[-1.0]).unwrap().counts, vec![0]);
        assert_eq!(sweep(&series(&[0.7; 10]), &[0.6, 0.8]).unwrap().counts, vec![0, 10]);
        assert_eq!(
            sweep(&s, &[0.5, 0.4]),
            Err(SegmentError::UnsortedThresholds { position: 1 })
        );
    }

    #[test]
    fn grid_parsing() {
        let g: ThresholdGrid = "0:1:0.05".parse().unwrap();
        let v = g.values();
        assert_eq!(v.len(), 21);
        assert_eq!(v[3], 0.15);
        assert_eq!(*v.last().unwrap(), 1.0);
        assert_eq!(ThresholdGrid::default().values(), v);
        assert!("0:1".parse::<ThresholdGrid>().is_err());
        assert!("0:1:0".parse::<ThresholdGrid>().is_err());
        assert!("1:0:0.1".parse::<ThresholdGrid>().is_err());
        assert!("0:2:0.1".parse::<ThresholdGrid>().is_err());
    }

    #[test]
    fn threshold_formatting() {
        assert_eq!(format_threshold(0.65), "0.65");
        assert_eq!(format_threshold(1.0), "1.0");
        assert_eq!(format_threshold(0.0), "0.0");
        assert_eq!(format_threshold(-0.0), "0.0");
    }

    #[test]
    fn annotation_pairs_captions() {
        let s = series(&[0.9, 0.3]);
        let captions: Vec<String> = ["c0", "c1", "c2"].iter().map(|c| c.to_string()).collect();
        let r = segment(&s, 0.5).unwrap();
        let report = annotate_boundaries(&r, &s, &captions).unwrap();
        assert_eq!(report.rows.len(), 1);
        assert_eq!(report.rows[0].caption_before, "c1");
        assert_eq!(report.rows[0].caption_after, "c2");
        assert_eq!(report.rows[0].similarity, 0.3);

        let none = annotate_boundaries(&segment(&s, -1.0).unwrap(), &s, &captions).unwrap();
        assert!(none.rows.is_empty());
        assert_eq!(none.caption_count, 3);

        assert!(matches!(
            annotate_boundaries(&r, &s, &captions[..2]),
            Err(SegmentError::CaptionCountMismatch { .. })
        ));
    }

    #[test]
    fn three_boundaries_over_29_captions() {
        let mut v = vec![0.9; 28];
        v[4] = 0.1;
        v[12] = 0.2;
        v[20] = 0.3;
        let s = series(&v);
        let captions: Vec<String> = (0..29).map(|i| format!("c{i}")).collect();
        let report = annotate_boundaries(&segment(&s, 0.5).unwrap(), &s, &captions).unwrap();
        assert_eq!(report.rows.len(), 3);
    }

    #[test]
    fn merging_short_segments() {
        let s = series(&[0.1, 0.9, 0.9, 0.1, 0.9, 0.1]);
        let r = segment(&s, 0.5).unwrap();
        assert_eq!(r.boundary_indices, vec![0, 3, 5]);
        let merged = merge_short_segments(&r, s.caption_count, 2);
        assert_eq!(merged.boundary_indices, vec![3]);
        assert_eq!(merged.segments.len(), 2);
    }
}
