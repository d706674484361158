//! View construction: synchronized random crops for pretraining, channel
//! composition for downstream classification, and per-modality
//! standardization.

use rand::Rng;

use crate::data::Plane;
use crate::error::{Error, Result};

/// One conveyor capture: a reflectance plane and a baseline-subtracted depth
/// plane (conveyor = 0), plus an optional class label.
///
/// After [`normalize_sample`] the depth non-negativity invariant is waived:
/// standardized planes are centred around zero by construction.
#[derive(Clone, Debug)]
pub struct RawSample {
    pub id: String,
    pub reflectance: Plane,
    pub depth: Plane,
    pub label: Option<crate::data::MaterialClass>,
}

impl RawSample {
    /// Invariants of raw (pre-normalization) samples.
    pub fn validate(&self) -> Result<()> {
        if self.reflectance.rows() != self.depth.rows()
            || self.reflectance.cols() != self.depth.cols()
        {
            return Err(Error::shape(
                "raw_sample",
                format!(
                    "{}: reflectance {}x{} vs depth {}x{}",
                    self.id,
                    self.reflectance.rows(),
                    self.reflectance.cols(),
                    self.depth.rows(),
                    self.depth.cols()
                ),
            ));
        }
        if self.depth.values().iter().any(|&v| v < 0.0) {
            return Err(Error::Config(format!(
                "{}: depth below the conveyor baseline",
                self.id
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct CropRect {
    pub top: usize,
    pub left: usize,
    pub height: usize,
    pub width: usize,
}

/// A C×h×w view ready for batch assembly.
#[derive(Clone, Debug, PartialEq)]
pub struct View {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub values: Vec<f64>,
}

impl View {
    pub fn numel(&self) -> usize {
        self.channels * self.height * self.width
    }
}

/// The two synchronized views of one sample.
#[derive(Clone, Debug)]
pub struct AugmentedPair {
    pub view_ref: View,
    pub view_dep: View,
    pub crop_rect: CropRect,
    /// Set when the source was zero-padded up to the crop size; counted in
    /// run statistics.
    pub padded: bool,
}

fn pad_symmetric(plane: &Plane, min_rows: usize, min_cols: usize) -> Plane {
    let rows = plane.rows().max(min_rows);
    let cols = plane.cols().max(min_cols);
    if rows == plane.rows() && cols == plane.cols() {
        return plane.clone();
    }
    let top = (rows - plane.rows()) / 2;
    let left = (cols - plane.cols()) / 2;
    let mut out = Plane::zeros(rows, cols);
    for r in 0..plane.rows() {
        for c in 0..plane.cols() {
            out.set(top + r, left + c, plane.get(r, c));
        }
    }
    out
}

/// Extracts `rect` from a plane and replicates it across `channels`.
pub fn extract_view(plane: &Plane, rect: &CropRect, channels: usize) -> View {
    let mut single = Vec::with_capacity(rect.height * rect.width);
    for r in 0..rect.height {
        for c in 0..rect.width {
            single.push(plane.get(rect.top + r, rect.left + c));
        }
    }
    let mut values = Vec::with_capacity(channels * single.len());
    for _ in 0..channels {
        values.extend_from_slice(&single);
    }
    View {
        channels,
        height: rect.height,
        width: rect.width,
        values,
    }
}

/// Draws one crop rectangle uniformly over valid positions and applies it to
/// both planes. Undersized planes are zero-padded symmetrically to the crop
/// size first (flagged via `padded`). The rectangle is drawn top first, then
/// left.
pub fn synchronized_random_crop<R: Rng>(
    sample: &RawSample,
    size: (usize, usize),
    channels: usize,
    rng: &mut R,
) -> Result<AugmentedPair> {
    let (crop_h, crop_w) = size;
    if crop_h == 0 || crop_w == 0 {
        return Err(Error::attr("crop", "crop size must be positive"));
    }
    if channels == 0 {
        return Err(Error::attr("crop", "channel count must be positive"));
    }
    let padded = crop_h > sample.reflectance.rows() || crop_w > sample.reflectance.cols();
    let (reflectance, depth);
    let (src_ref, src_dep) = if padded {
        reflectance = pad_symmetric(&sample.reflectance, crop_h, crop_w);
        depth = pad_symmetric(&sample.depth, crop_h, crop_w);
        (&reflectance, &depth)
    } else {
        (&sample.reflectance, &sample.depth)
    };

    let top = rng.gen_range(0..=src_ref.rows() - crop_h);
    let left = rng.gen_range(0..=src_ref.cols() - crop_w);
    let rect = CropRect {
        top,
        left,
        height: crop_h,
        width: crop_w,
    };
    Ok(AugmentedPair {
        view_ref: extract_view(src_ref, &rect, channels),
        view_dep: extract_view(src_dep, &rect, channels),
        crop_rect: rect,
        padded,
    })
}

/// Deterministic centre crop with the same padding behaviour as the random
/// crop; used for validation and test evaluation.
pub fn center_crop(sample: &RawSample, size: (usize, usize), channels: usize) -> Result<AugmentedPair> {
    let (crop_h, crop_w) = size;
    if crop_h == 0 || crop_w == 0 {
        return Err(Error::attr("crop", "crop size must be positive"));
    }
    let padded = crop_h > sample.reflectance.rows() || crop_w > sample.reflectance.cols();
    let (reflectance, depth);
    let (src_ref, src_dep) = if padded {
        reflectance = pad_symmetric(&sample.reflectance, crop_h, crop_w);
        depth = pad_symmetric(&sample.depth, crop_h, crop_w);
        (&reflectance, &depth)
    } else {
        (&sample.reflectance, &sample.depth)
    };
    let rect = CropRect {
        top: (src_ref.rows() - crop_h) / 2,
        left: (src_ref.cols() - crop_w) / 2,
        height: crop_h,
        width: crop_w,
    };
    Ok(AugmentedPair {
        view_ref: extract_view(src_ref, &rect, channels),
        view_dep: extract_view(src_dep, &rect, channels),
        crop_rect: rect,
        padded,
    })
}

/// Downstream three-channel composition: channel 0 = depth, channel 1 =
/// reflectance, channel 2 = depth again.
pub fn compose_channels(sample: &RawSample) -> Result<View> {
    if sample.reflectance.rows() != sample.depth.rows()
        || sample.reflectance.cols() != sample.depth.cols()
    {
        return Err(Error::shape(
            "compose_channels",
            format!(
                "{}: plane shapes differ",
                sample.id
            ),
        ));
    }
    let h = sample.depth.rows();
    let w = sample.depth.cols();
    let mut values = Vec::with_capacity(3 * h * w);
    values.extend_from_slice(sample.depth.values());
    values.extend_from_slice(sample.reflectance.values());
    values.extend_from_slice(sample.depth.values());
    Ok(View {
        channels: 3,
        height: h,
        width: w,
        values,
    })
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MeanStd {
    pub mean: f64,
    pub std: f64,
}

/// Scalar standardization statistics per modality, computed over a training
/// split only.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ModalityStats {
    pub reflectance: MeanStd,
    pub depth: MeanStd,
}

impl ModalityStats {
    /// Identity statistics (mean 0, std 1).
    pub fn identity() -> Self {
        let unit = MeanStd { mean: 0.0, std: 1.0 };
        ModalityStats {
            reflectance: unit,
            depth: unit,
        }
    }

    pub fn to_text(&self) -> String {
        format!(
            "stats.reflectance = {:?},{:?}\nstats.depth = {:?},{:?}\n",
            self.reflectance.mean, self.reflectance.std, self.depth.mean, self.depth.std
        )
    }
}

/// Two-pass mean/std over every pixel of every sample in the split.
pub fn compute_modality_stats<'a, I>(samples: I) -> Result<ModalityStats>
where
    I: IntoIterator<Item = &'a RawSample> + Clone,
{
    let stats_of = |select: fn(&RawSample) -> &Plane, modality: &'static str| -> Result<MeanStd> {
        let mut count = 0usize;
        let mut total = 0.0f64;
        for s in samples.clone() {
            let plane = select(s);
            count += plane.values().len();
            total += plane.values().iter().sum::<f64>();
        }
        if count == 0 {
            return Err(Error::Config("empty split for statistics".into()));
        }
        let mean = total / count as f64;
        let mut sq = 0.0f64;
        for s in samples.clone() {
            for &v in select(s).values() {
                sq += (v - mean) * (v - mean);
            }
        }
        let std = (sq / count as f64).sqrt();
        if std <= 0.0 {
            return Err(Error::ZeroStd { modality });
        }
        Ok(MeanStd { mean, std })
    };
    Ok(ModalityStats {
        reflectance: stats_of(|s| &s.reflectance, "reflectance")?,
        depth: stats_of(|s| &s.depth, "depth")?,
    })
}

/// Standardizes both planes as (x − mean) / std. The result no longer
/// satisfies the raw depth ≥ 0 invariant.
pub fn normalize_sample(sample: &RawSample, stats: &ModalityStats) -> Result<RawSample> {
    if stats.reflectance.std <= 0.0 {
        return Err(Error::ZeroStd {
            modality: "reflectance",
        });
    }
    if stats.depth.std <= 0.0 {
        return Err(Error::ZeroStd { modality: "depth" });
    }
    let apply = |plane: &Plane, ms: &MeanStd| -> Result<Plane> {
        let values: Vec<f64> = plane.values().iter().map(|&v| (v - ms.mean) / ms.std).collect();
        Plane::new(plane.rows(), plane.cols(), values)
    };
    Ok(RawSample {
        id: sample.id.clone(),
        reflectance: apply(&sample.reflectance, &stats.reflectance)?,
        depth: apply(&sample.depth, &stats.depth)?,
        label: sample.label,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::stream;

    fn sample(rows: usize, cols: usize, seed: u64) -> RawSample {
        let mut rng = stream::derive(seed, "augment-test", &[]);
        let reflectance = Plane::new(
            rows,
            cols,
            (0..rows * cols).map(|_| rng.gen_range(0.0..1.0)).collect(),
        )
        .unwrap();
        let depth = Plane::new(
            rows,
            cols,
            (0..rows * cols).map(|_| rng.gen_range(0.0..20.0)).collect(),
        )
        .unwrap();
        RawSample {
            id: format!("sample_{seed}"),
            reflectance,
            depth,
            label: None,
        }
    }

    #[test]
    fn full_size_crop_is_degenerate() {
        let s = sample(8, 10, 1);
        let mut rng = stream::derive(2, "crop", &[]);
        let pair = synchronized_random_crop(&s, (8, 10), 1, &mut rng).unwrap();
        assert_eq!(
            pair.crop_rect,
            CropRect { top: 0, left: 0, height: 8, width: 10 }
        );
        assert_eq!(pair.view_ref.values, s.reflectance.values());
        assert_eq!(pair.view_dep.values, s.depth.values());
        assert!(!pair.padded);
    }

    #[test]
    fn fixed_stream_gives_identical_rects() {
        let s = sample(32, 32, 3);
        let rect_of = |seed: u64| {
            let mut rng = stream::derive(seed, "crop", &[]);
            synchronized_random_crop(&s, (16, 16), 3, &mut rng)
                .unwrap()
                .crop_rect
        };
        assert_eq!(rect_of(7), rect_of(7));
    }

    #[test]
    fn views_reproduce_from_crop_rect() {
        let s = sample(40, 28, 4);
        for trial in 0..50u64 {
            let mut rng = stream::derive(trial, "crop-extract", &[]);
            let pair = synchronized_random_crop(&s, (12, 9), 2, &mut rng).unwrap();
            assert!(!pair.padded);
            let re_ref = extract_view(&s.reflectance, &pair.crop_rect, 2);
            let re_dep = extract_view(&s.depth, &pair.crop_rect, 2);
            assert_eq!(pair.view_ref, re_ref);
            assert_eq!(pair.view_dep, re_dep);
        }
    }

    #[test]
    fn channels_are_replicas() {
        let s = sample(16, 16, 5);
        let mut rng = stream::derive(6, "crop", &[]);
        let pair = synchronized_random_crop(&s, (8, 8), 3, &mut rng).unwrap();
        let plane_len = 64;
        let v = &pair.view_dep.values;
        assert_eq!(&v[..plane_len], &v[plane_len..2 * plane_len]);
        assert_eq!(&v[..plane_len], &v[2 * plane_len..]);
    }

    #[test]
    fn undersized_image_is_zero_padded() {
        let s = sample(6, 6, 7);
        let mut rng = stream::derive(8, "crop", &[]);
        let pair = synchronized_random_crop(&s, (10, 10), 1, &mut rng).unwrap();
        assert!(pair.padded);
        assert_eq!(pair.crop_rect, CropRect { top: 0, left: 0, height: 10, width: 10 });
        // 6 rows centred in 10: rows 0-1 and 8-9 are padding.
        assert!(pair.view_dep.values[..10].iter().all(|&v| v == 0.0));
        assert!(pair.view_dep.values[90..].iter().all(|&v| v == 0.0));
        // Interior row 2 starts with the 2-column left padding.
        assert_eq!(pair.view_dep.values[2 * 10], 0.0);
        assert_eq!(pair.view_dep.values[2 * 10 + 2], s.depth.get(0, 0));
    }

    #[test]
    fn crop_offsets_are_uniform() {
        // 10,000 draws of 32-crops on a 64-plane: offsets 0..=32, expected
        // uniform. Chi-square with 32 degrees of freedom at p = 0.01.
        let s = sample(64, 64, 9);
        let mut rng = stream::derive(10, "crop-uniformity", &[]);
        let mut top_counts = [0usize; 33];
        let mut left_counts = [0usize; 33];
        let draws = 10_000usize;
        for _ in 0..draws {
            let pair = synchronized_random_crop(&s, (32, 32), 1, &mut rng).unwrap();
            top_counts[pair.crop_rect.top] += 1;
            left_counts[pair.crop_rect.left] += 1;
        }
        let expected = draws as f64 / 33.0;
        let chi2 = |counts: &[usize; 33]| -> f64 {
            counts
                .iter()
                .map(|&c| {
                    let d = c as f64 - expected;
                    d * d / expected
                })
                .sum()
        };
        // 0.99 quantile of chi-square with 32 degrees of freedom.
        let critical = 53.486;
        assert!(chi2(&top_counts) < critical, "top offsets not uniform: {}", chi2(&top_counts));
        assert!(chi2(&left_counts) < critical, "left offsets not uniform: {}", chi2(&left_counts));
    }

    #[test]
    fn compose_is_depth_reflectance_depth() {
        let s = sample(12, 14, 11);
        let composed = compose_channels(&s).unwrap();
        assert_eq!(composed.channels, 3);
        let plane = 12 * 14;
        assert_eq!(&composed.values[..plane], s.depth.values());
        assert_eq!(&composed.values[plane..2 * plane], s.reflectance.values());
        assert_eq!(&composed.values[2 * plane..], s.depth.values());
    }

    #[test]
    fn compose_preserves_zero_depth() {
        let mut s = sample(8, 8, 12);
        s.depth = Plane::zeros(8, 8);
        let composed = compose_channels(&s).unwrap();
        let plane = 64;
        assert!(composed.values[..plane].iter().all(|&v| v == 0.0));
        assert!(composed.values[2 * plane..].iter().all(|&v| v == 0.0));
        assert_eq!(&composed.values[plane..2 * plane], s.reflectance.values());
    }

    #[test]
    fn identity_stats_are_identity() {
        let s = sample(10, 10, 13);
        let out = normalize_sample(&s, &ModalityStats::identity()).unwrap();
        assert_eq!(out.reflectance.values(), s.reflectance.values());
        assert_eq!(out.depth.values(), s.depth.values());
    }

    #[test]
    fn constant_plane_rejected_as_degenerate() {
        let mut s = sample(6, 6, 14);
        s.depth = Plane::new(6, 6, vec![3.0; 36]).unwrap();
        match compute_modality_stats(vec![&s]) {
            Err(Error::ZeroStd { modality }) => assert_eq!(modality, "depth"),
            other => panic!("expected ZeroStd, got {other:?}"),
        }
    }

    #[test]
    fn normalized_split_recomputes_to_zero_mean_unit_std() {
        let samples: Vec<RawSample> = (0..12).map(|i| sample(24, 24, 100 + i)).collect();
        let stats = compute_modality_stats(samples.iter().collect::<Vec<_>>()).unwrap();
        let normalized: Vec<RawSample> = samples
            .iter()
            .map(|s| normalize_sample(s, &stats).unwrap())
            .collect();
        let check = compute_modality_stats(normalized.iter().collect::<Vec<_>>());
        let recomputed = check.unwrap();
        assert!(recomputed.reflectance.mean.abs() < 1e-9);
        assert!(recomputed.depth.mean.abs() < 1e-9);
        assert!((recomputed.reflectance.std - 1.0).abs() < 1e-9);
        assert!((recomputed.depth.std - 1.0).abs() < 1e-9);
    }
}
