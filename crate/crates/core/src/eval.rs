// Copyright 2026 The PACE Authors.
// SPDX-License-Identifier: Apache-2.0

//! F0-scaled distance between pitch contours and the prosody-transfer report.

use std::io::Write;

use crate::codec::{AudioClip, FRAME_HOP};
use crate::error::{PaceError, Result};
use crate::pipeline::{PaceState, StageTag};
use crate::prosody::extract_f0;

/// Pitch contour in Hz, 0 on unvoiced frames.
#[derive(Clone, Debug, PartialEq)]
pub struct F0Contour {
    pub values: Vec<f64>,
    pub hop: usize,
}

impl F0Contour {
    pub fn new(values: Vec<f64>) -> Result<Self> {
        if let Some(v) = values.iter().find(|v| !v.is_finite() || **v < 0.0) {
            return Err(PaceError::contract(format!("contour value {v} is not a finite nonnegative f0")));
        }
        Ok(Self { values, hop: FRAME_HOP })
    }

    pub fn voiced_count(&self) -> usize {
        self.values.iter().filter(|&&v| v > 0.0).count()
    }
}

/// Population z-score; a constant sequence maps to zeros.
pub fn z_score(v: &[f64]) -> Vec<f64> {
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    let std = (v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n).sqrt();
    if std > 1e-12 * mean.abs().max(1.0) {
        v.iter().map(|x| (x - mean) / std).collect()
    } else {
        vec![0.0; v.len()]
    }
}

/// Linear interpolation of `v` onto `len` evenly spaced points spanning the
/// same first and last sample.
pub fn resample_linear(v: &[f64], len: usize) -> Vec<f64> {
    if v.len() == len {
        return v.to_vec();
    }
    if v.len() == 1 || len == 1 {
        return vec![v[0]; len];
    }
    let scale = (v.len() - 1) as f64 / (len - 1) as f64;
    (0..len)
        .map(|i| {
            let pos = i as f64 * scale;
            let lo = (pos.floor() as usize).min(v.len() - 2);
            let frac = pos - lo as f64;
            v[lo] * (1.0 - frac) + v[lo + 1] * frac
        })
        .collect()
}

/// Normalized distance between two contours.
///
/// Frames are restricted to voiced ones (the intersection of both voicing
/// masks when the contours have equal length), each side is z-scored, the
/// shorter is linearly resampled to the longer, and the RMS difference is
/// returned.
pub fn f0_scaled_distance(a: &F0Contour, b: &F0Contour) -> Result<f64> {
    for (name, c) in [("first", a), ("second", b)] {
        if c.voiced_count() == 0 {
            return Err(PaceError::UndefinedDistance(format!("{name} contour has no voiced frame")));
        }
    }
    let (va, vb): (Vec<f64>, Vec<f64>) = if a.values.len() == b.values.len() {
        a.values
            .iter()
            .zip(&b.values)
            .filter(|(x, y)| **x > 0.0 && **y > 0.0)
            .map(|(x, y)| (*x, *y))
            .unzip()
    } else {
        let voiced = |c: &F0Contour| c.values.iter().copied().filter(|&v| v > 0.0).collect::<Vec<_>>();
        (voiced(a), voiced(b))
    };
    if va.is_empty() || vb.is_empty() {
        return Err(PaceError::UndefinedDistance("voicing masks do not overlap".into()));
    }
    let (za, zb) = (z_score(&va), z_score(&vb));
    let len = za.len().max(zb.len());
    let (ra, rb) = (resample_linear(&za, len), resample_linear(&zb, len));
    let ms = ra.iter().zip(&rb).map(|(x, y)| (x - y).powi(2)).sum::<f64>() / len as f64;
    Ok(ms.sqrt())
}

/// Writes a gnuplot-readable dump: one block per contour (separated by a
/// blank line), each with `frame z_scored_f0` rows over voiced frames.
pub fn write_contour_dump<W: Write>(mut w: W, contours: &[(&str, &F0Contour)]) -> Result<()> {
    for (i, (label, c)) in contours.iter().enumerate() {
        if i > 0 {
            writeln!(w, "\n")?;
        }
        writeln!(w, "# {label}")?;
        let frames: Vec<usize> = (0..c.values.len()).filter(|&t| c.values[t] > 0.0).collect();
        let voiced: Vec<f64> = frames.iter().map(|&t| c.values[t]).collect();
        if voiced.is_empty() {
            continue;
        }
        for (t, z) in frames.iter().zip(z_score(&voiced)) {
            writeln!(w, "{t} {z:.6}")?;
        }
    }
    w.flush()?;
    Ok(())
}

/// Model variants of the ablation study.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Variant {
    Full,
    NoMi,
    NoScale,
    NoReconE,
}

impl Variant {
    pub const ALL: [Variant; 4] = [Variant::Full, Variant::NoMi, Variant::NoScale, Variant::NoReconE];

    pub fn name(self) -> &'static str {
        match self {
            Variant::Full => "full",
            Variant::NoMi => "no-mi",
            Variant::NoScale => "no-scale",
            Variant::NoReconE => "no-recon-e",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|v| v.name() == s)
            .ok_or_else(|| PaceError::config(format!("unknown variant {s:?} (full, no-mi, no-scale, no-recon-e)")))
    }

    /// Published F0-scaled distances `(prosody from source, prosody from target)`.
    /// They come from full-scale training and are not expected at desk scale.
    pub fn published_distances(self) -> (f64, f64) {
        match self {
            Variant::Full => (2.8239, 2.6988),
            Variant::NoMi => (3.2751, 3.0179),
            Variant::NoScale => (3.9178, 3.6237),
            Variant::NoReconE => (4.7892, 4.2649),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ProsodySource {
    /// The prosody prompt is the clip being converted.
    Source,
    /// The prosody prompt is a different clip.
    TargetPrompt,
}

impl ProsodySource {
    pub fn name(self) -> &'static str {
        match self {
            ProsodySource::Source => "source",
            ProsodySource::TargetPrompt => "target-prompt",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ReportRow {
    pub variant: Variant,
    pub prosody_source: ProsodySource,
    pub mean_distance: f64,
    pub pair_count: usize,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct ProsodyReport {
    pub rows: Vec<ReportRow>,
}

impl ProsodyReport {
    pub fn push(&mut self, variant: Variant, source: ProsodySource, distances: &[f64]) -> Result<()> {
        if distances.is_empty() {
            return Err(PaceError::contract("a report row needs at least one pair"));
        }
        self.rows.push(ReportRow {
            variant,
            prosody_source: source,
            mean_distance: distances.iter().sum::<f64>() / distances.len() as f64,
            pair_count: distances.len(),
        });
        Ok(())
    }

    pub fn row(&self, variant: Variant, source: ProsodySource) -> Option<&ReportRow> {
        self.rows
            .iter()
            .find(|r| r.variant == variant && r.prosody_source == source)
    }

    /// CSV with the published value of each cell alongside, for reference only.
    pub fn write_csv<W: Write>(&self, writer: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        w.write_record([
            "model_variant",
            "prosody_source",
            "mean_distance",
            "pair_count",
            "published_distance",
            "published_note",
        ])?;
        for r in &self.rows {
            let (src, tgt) = r.variant.published_distances();
            let published = match r.prosody_source {
                ProsodySource::Source => src,
                ProsodySource::TargetPrompt => tgt,
            };
            w.write_record([
                r.variant.name().to_string(),
                r.prosody_source.name().to_string(),
                format!("{:.6}", r.mean_distance),
                r.pair_count.to_string(),
                format!("{published:.4}"),
                "full-scale reference value; not reproducible at desk scale".to_string(),
            ])?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Pitch contour of a clip as seen by the tracker.
pub fn contour_of(clip: &AudioClip) -> Result<F0Contour> {
    let (f0, uv) = extract_f0(clip)?;
    F0Contour::new(f0.iter().zip(&uv).map(|(f, u)| if *u == 1 { *f } else { 0.0 }).collect())
}

/// A conversion target with a matched and a mismatched prosody prompt.
#[derive(Clone, Debug)]
pub struct TransferPair {
    pub target: AudioClip,
    pub matched: AudioClip,
    pub mismatched: AudioClip,
}

/// Builds `count` pairs from held-out clips labelled `(timbre, contour)`.
/// The matched prompt differs from the target in both timbre and contour;
/// the mismatched prompt has a contour different from both.
pub fn transfer_pairs(clips: &[AudioClip], labels: &[(usize, usize)], count: usize) -> Result<Vec<TransferPair>> {
    if clips.len() != labels.len() {
        return Err(PaceError::contract("one label per clip is required"));
    }
    let n = clips.len();
    let mut pairs = Vec::with_capacity(count);
    for k in 0..n {
        if pairs.len() == count {
            break;
        }
        let (tt, tc) = labels[k];
        let matched = (1..n)
            .map(|o| (k + o) % n)
            .find(|&j| labels[j].0 != tt && labels[j].1 != tc);
        let Some(m) = matched else { continue };
        let mc = labels[m].1;
        let mismatched = (1..n)
            .map(|o| (k + n - o) % n)
            .find(|&j| labels[j].1 != tc && labels[j].1 != mc && j != m);
        let Some(x) = mismatched else { continue };
        pairs.push(TransferPair {
            target: clips[k].clone(),
            matched: clips[m].clone(),
            mismatched: clips[x].clone(),
        });
    }
    if pairs.len() < count {
        return Err(PaceError::contract(format!(
            "only {} transfer pairs could be formed, {count} requested",
            pairs.len()
        )));
    }
    Ok(pairs)
}

/// Distances of each conversion output to its prompts; `None` where the
/// output had no voiced frame.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct TransferOutcome {
    pub to_matched: Vec<Option<f64>>,
    pub to_mismatched: Vec<Option<f64>>,
    /// Output converted with the target's own prosody, against the target.
    pub to_source: Vec<Option<f64>>,
}

impl TransferOutcome {
    /// Fraction of pairs whose output is closer to the matched prompt.
    /// Pairs with an undefined distance count as misses.
    pub fn matched_rate(&self) -> f64 {
        let hits = self
            .to_matched
            .iter()
            .zip(&self.to_mismatched)
            .filter(|(m, x)| matches!((m, x), (Some(m), Some(x)) if m < x))
            .count();
        hits as f64 / self.to_matched.len().max(1) as f64
    }

    pub fn defined(v: &[Option<f64>]) -> Vec<f64> {
        v.iter().flatten().copied().collect()
    }
}

fn distance_or_none(a: &F0Contour, b: &F0Contour) -> Result<Option<f64>> {
    match f0_scaled_distance(a, b) {
        Ok(d) => Ok(Some(d)),
        Err(PaceError::UndefinedDistance(_)) => Ok(None),
        Err(e) => Err(e),
    }
}

/// Runs prosody-swap inference on every pair.
pub fn evaluate_transfer(state: &PaceState, pairs: &[TransferPair]) -> Result<TransferOutcome> {
    let mut out = TransferOutcome::default();
    for p in pairs {
        let converted = contour_of(&state.prosody_swap_inference(&p.target, &p.matched)?)?;
        out.to_matched.push(distance_or_none(&converted, &contour_of(&p.matched)?)?);
        out.to_mismatched.push(distance_or_none(&converted, &contour_of(&p.mismatched)?)?);
        let own = contour_of(&state.prosody_swap_inference(&p.target, &p.target)?)?;
        out.to_source.push(distance_or_none(&own, &contour_of(&p.target)?)?);
    }
    Ok(out)
}

/// Table-shaped report: for each model, mean distance of outputs to their
/// own prosody (`source`) and to a different prompt (`target-prompt`).
pub fn prosody_transfer_report(models: &[(Variant, &PaceState)], pairs: &[TransferPair]) -> Result<ProsodyReport> {
    let mut report = ProsodyReport::default();
    for (variant, state) in models {
        if state.stage != StageTag::Stage3 {
            return Err(PaceError::Dependency {
                what: format!("{} stage 3 checkpoint", variant.name()),
                needed: "stage 3".into(),
            });
        }
        let o = evaluate_transfer(state, pairs)?;
        for (source, v) in [
            (ProsodySource::Source, &o.to_source),
            (ProsodySource::TargetPrompt, &o.to_matched),
        ] {
            let d = TransferOutcome::defined(v);
            if d.is_empty() {
                return Err(PaceError::UndefinedDistance(format!(
                    "every {} output of {} is unvoiced",
                    source.name(),
                    variant.name()
                )));
            }
            report.push(*variant, source, &d)?;
        }
    }
    Ok(report)
}
