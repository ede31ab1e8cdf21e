//! Scoring, equal error rate, ROC curves and run-level confidence
//! intervals. Replay is the positive class throughout.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, StudentsT};

use crate::data::{ClipRecord, Env, MultichannelClip};
use crate::dsp::Stft;
use crate::error::{Error, Result};
use crate::model::{spectrogram_batch, Model};
use crate::objective::Label;
use crate::trainer::{check_compatible, load_clips, Checkpoint};

const SCORE_BATCH: usize = 32;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScoredTrial {
    /// Higher means more replay-like.
    pub score: f64,
    pub label: Label,
    pub env: Env,
    pub path: PathBuf,
}

impl ScoredTrial {
    pub fn new(score: f64, clip: &MultichannelClip) -> Self {
        ScoredTrial {
            score,
            label: clip.record.label,
            env: clip.record.env,
            path: clip.record.path.clone(),
        }
    }
}

/// Eval-mode scores for preloaded clips.
pub fn score_clips(model: &Model, clips: &[MultichannelClip]) -> Result<Vec<ScoredTrial>> {
    if clips.is_empty() {
        return Ok(Vec::new());
    }
    check_compatible(clips, model.config())?;
    let stft = Stft::new(&model.config().stft)?;
    let mut out = Vec::with_capacity(clips.len());
    for chunk in clips.chunks(SCORE_BATCH) {
        let waves: Vec<&[Vec<f64>]> = chunk.iter().map(|c| c.samples.as_slice()).collect();
        let scores = model.scores(&spectrogram_batch(&waves, &stft)?)?;
        for (c, s) in chunk.iter().zip(scores) {
            if !s.is_finite() {
                return Err(Error::NonFinite(format!(
                    "score of {}",
                    c.record.path.display()
                )));
            }
            out.push(ScoredTrial::new(s, c));
        }
    }
    Ok(out)
}

/// Scores `records` with the checkpoint's final-epoch model. The ALRAD
/// replication is applied when the checkpoint was trained with it.
pub fn score_set(ckpt: &Checkpoint, records: &[ClipRecord]) -> Result<Vec<ScoredTrial>> {
    if let Some(r) = records.iter().find(|r| r.mic_id != ckpt.mic_id) {
        return Err(Error::Data(format!(
            "{}: mic_id {} but the checkpoint was trained for {}",
            r.path.display(),
            r.mic_id,
            ckpt.mic_id
        )));
    }
    let clips = load_clips(records, ckpt.train_config.alrad)?;
    score_clips(&ckpt.model()?, &clips)
}

fn class_counts(trials: &[ScoredTrial]) -> Result<(usize, usize)> {
    let n_replay = trials.iter().filter(|t| t.label == Label::Replay).count();
    let n_genuine = trials.len() - n_replay;
    if n_genuine == 0 || n_replay == 0 {
        return Err(Error::Eval(format!(
            "both classes are required, got {n_genuine} genuine and {n_replay} replay trials"
        )));
    }
    if let Some(t) = trials.iter().find(|t| !t.score.is_finite()) {
        return Err(Error::Eval(format!(
            "non-finite score for {}",
            t.path.display()
        )));
    }
    Ok((n_genuine, n_replay))
}

/// `(threshold, FAR, FRR)` at every distinct score in ascending order, then
/// at `+inf`. A trial is called replay when its score is `>= threshold`.
fn sweep(trials: &[ScoredTrial]) -> Result<Vec<(f64, f64, f64)>> {
    let (ng, nr) = class_counts(trials)?;
    let mut sorted: Vec<(f64, Label)> = trials.iter().map(|t| (t.score, t.label)).collect();
    sorted.sort_by(|a, b| a.0.total_cmp(&b.0));
    let mut out = Vec::new();
    let (mut genuine_below, mut replay_below) = (0usize, 0usize);
    let mut i = 0;
    while i < sorted.len() {
        let theta = sorted[i].0;
        out.push((
            theta,
            (ng - genuine_below) as f64 / ng as f64,
            replay_below as f64 / nr as f64,
        ));
        while i < sorted.len() && sorted[i].0 == theta {
            match sorted[i].1 {
                Label::Genuine => genuine_below += 1,
                Label::Replay => replay_below += 1,
            }
            i += 1;
        }
    }
    out.push((f64::INFINITY, 0.0, 1.0));
    Ok(out)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Eer {
    pub eer: f64,
    pub threshold: f64,
}

/// Equal error rate where the FAR and FRR curves cross, linearly
/// interpolated between adjacent sweep points.
pub fn compute_eer(trials: &[ScoredTrial]) -> Result<Eer> {
    let pts = sweep(trials)?;
    // FAR - FRR strictly decreases along the sweep, from 1 to -1
    let i = pts
        .iter()
        .position(|&(_, far, frr)| frr >= far)
        .expect("sweep ends at FRR = 1");
    let (t0, far0, frr0) = pts[i - 1];
    let (t1, far1, frr1) = pts[i];
    let (d0, d1) = (far0 - frr0, far1 - frr1);
    let alpha = d0 / (d0 - d1);
    let threshold = if t1.is_finite() { 0.5 * (t0 + t1) } else { t0 };
    Ok(Eer {
        eer: far0 + alpha * (far1 - far0),
        threshold,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RocPoint {
    pub fpr: f64,
    pub tpr: f64,
    pub threshold: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RocCurve {
    pub points: Vec<RocPoint>,
}

impl RocCurve {
    /// Trapezoidal area under the curve.
    pub fn auc(&self) -> f64 {
        self.points
            .windows(2)
            .map(|w| (w[1].fpr - w[0].fpr) * 0.5 * (w[0].tpr + w[1].tpr))
            .sum()
    }
}

/// Points from `(0, 0)` at `+inf` down to `(1, 1)` at the lowest score.
pub fn roc_curve(trials: &[ScoredTrial]) -> Result<RocCurve> {
    let points = sweep(trials)?
        .into_iter()
        .rev()
        .map(|(threshold, far, frr)| RocPoint {
            fpr: far,
            tpr: 1.0 - frr,
            threshold,
        })
        .collect();
    Ok(RocCurve { points })
}

/// Mean and 95% Student-t half-width over run-level values.
pub fn confidence_interval(values: &[f64]) -> Result<(f64, f64)> {
    let n = values.len();
    if n < 2 {
        return Err(Error::Eval(format!(
            "confidence interval needs at least 2 values, got {n}"
        )));
    }
    let mean = values.iter().sum::<f64>() / n as f64;
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
    let t = StudentsT::new(0.0, 1.0, (n - 1) as f64)
        .map_err(|e| Error::Eval(e.to_string()))?
        .inverse_cdf(0.975);
    Ok((mean, t * var.sqrt() / (n as f64).sqrt()))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub n_trials: usize,
    pub n_genuine: usize,
    pub n_replay: usize,
    pub eer: f64,
    pub threshold: f64,
    pub auc: f64,
    /// EER per env tag where both classes are present.
    pub per_env: BTreeMap<String, f64>,
}

pub fn report(trials: &[ScoredTrial]) -> Result<EvalReport> {
    let (n_genuine, n_replay) = class_counts(trials)?;
    let eer = compute_eer(trials)?;
    let mut envs: BTreeMap<Env, Vec<ScoredTrial>> = BTreeMap::new();
    for t in trials {
        envs.entry(t.env).or_default().push(t.clone());
    }
    let per_env = envs
        .iter()
        .filter_map(|(e, ts)| compute_eer(ts).ok().map(|r| (e.to_string(), r.eer)))
        .collect();
    Ok(EvalReport {
        n_trials: trials.len(),
        n_genuine,
        n_replay,
        eer: eer.eer,
        threshold: eer.threshold,
        auc: roc_curve(trials)?.auc(),
        per_env,
    })
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// `fpr,tpr,threshold` rows; the first threshold is `inf`.
pub fn write_roc_csv(path: &Path, roc: &RocCurve) -> Result<()> {
    let mut s = String::from("fpr,tpr,threshold\n");
    for p in &roc.points {
        let _ = writeln!(s, "{},{},{}", p.fpr, p.tpr, p.threshold);
    }
    write_text(path, &s)
}

/// A standalone SVG plot of the curve with the chance diagonal.
pub fn write_roc_svg(path: &Path, roc: &RocCurve, title: &str) -> Result<()> {
    const SIZE: f64 = 400.0;
    const PAD: f64 = 50.0;
    let x = |fpr: f64| PAD + fpr * SIZE;
    let y = |tpr: f64| PAD + (1.0 - tpr) * SIZE;
    let line: Vec<String> = roc
        .points
        .iter()
        .map(|p| format!("{:.2},{:.2}", x(p.fpr), y(p.tpr)))
        .collect();
    let esc = title
        .replace('&', "&amp;")
        .replace('<', "&lt;")
        .replace('>', "&gt;");
    let mut s = String::new();
    let w = SIZE + 2.0 * PAD;
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{w}" viewBox="0 0 {w} {w}" font-family="sans-serif" font-size="12">"#
    );
    let _ = writeln!(
        s,
        r#"<rect x="{PAD}" y="{PAD}" width="{SIZE}" height="{SIZE}" fill="white" stroke="black"/>"#
    );
    let _ = writeln!(
        s,
        r#"<line x1="{}" y1="{}" x2="{}" y2="{}" stroke="gray" stroke-dasharray="4 4"/>"#,
        x(0.0),
        y(0.0),
        x(1.0),
        y(1.0)
    );
    let _ = writeln!(
        s,
        r#"<polyline fill="none" stroke="steelblue" stroke-width="2" points="{}"/>"#,
        line.join(" ")
    );
    for t in 0..=4 {
        let v = t as f64 / 4.0;
        let _ = writeln!(
            s,
            r#"<text x="{:.1}" y="{:.1}" text-anchor="middle">{v}</text>"#,
            x(v),
            y(0.0) + 18.0
        );
        let _ = writeln!(
            s,
            r#"<text x="{:.1}" y="{:.1}" text-anchor="end">{v}</text>"#,
            x(0.0) - 6.0,
            y(v) + 4.0
        );
    }
    let _ = writeln!(
        s,
        r#"<text x="{:.1}" y="{:.1}" text-anchor="middle">false positive rate</text>"#,
        x(0.5),
        w - 8.0
    );
    let _ = writeln!(
        s,
        r#"<text x="14" y="{:.1}" text-anchor="middle" transform="rotate(-90 14 {:.1})">true positive rate</text>"#,
        y(0.5),
        y(0.5)
    );
    let _ = writeln!(
        s,
        r#"<text x="{:.1}" y="30" text-anchor="middle">{esc} (AUC {:.3})</text>"#,
        x(0.5),
        roc.auc()
    );
    s.push_str("</svg>\n");
    write_text(path, &s)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    pub(crate) fn trials(genuine: &[f64], replay: &[f64]) -> Vec<ScoredTrial> {
        let mk = |s: f64, label| ScoredTrial {
            score: s,
            label,
            env: Env::A,
            path: PathBuf::new(),
        };
        genuine
            .iter()
            .map(|&s| mk(s, Label::Genuine))
            .chain(replay.iter().map(|&s| mk(s, Label::Replay)))
            .collect()
    }

    /// Every candidate threshold scored by direct counting; the crossing is
    /// located by scanning all ordered pairs of candidates.
    fn brute_eer(ts: &[ScoredTrial]) -> f64 {
        let g: Vec<f64> = ts
            .iter()
            .filter(|t| t.label == Label::Genuine)
            .map(|t| t.score)
            .collect();
        let r: Vec<f64> = ts
            .iter()
            .filter(|t| t.label == Label::Replay)
            .map(|t| t.score)
            .collect();
        let rates = |th: f64| {
            (
                g.iter().filter(|&&s| s >= th).count() as f64 / g.len() as f64,
                r.iter().filter(|&&s| s < th).count() as f64 / r.len() as f64,
            )
        };
        let mut cands: Vec<f64> = ts.iter().map(|t| t.score).collect();
        cands.push(f64::INFINITY);
        let mut best = None;
        for &a in &cands {
            for &b in &cands {
                // adjacent pair: no candidate strictly between a and b
                if !(a < b) || cands.iter().any(|&c| a < c && c < b) {
                    continue;
                }
                let ((fa, ra), (fb, rb)) = (rates(a), rates(b));
                if fa - ra > 0.0 && fb - rb <= 0.0 {
                    let alpha = (fa - ra) / ((fa - ra) - (fb - rb));
                    best = Some(fa + alpha * (fb - fa));
                }
            }
        }
        best.unwrap()
    }

    #[test]
    fn eer_examples() {
        assert_eq!(
            compute_eer(&trials(&[0.1, 0.2, 0.3], &[0.5, 0.9]))
                .unwrap()
                .eer,
            0.0
        );
        assert_eq!(compute_eer(&trials(&[0.4; 3], &[0.4; 5])).unwrap().eer, 0.5);
        // the FAR/FRR staircase crosses the diagonal at (0.5, 0.5)
        let e = compute_eer(&trials(&[0.1, 0.4], &[0.3, 0.9])).unwrap();
        assert_eq!(e.eer, 0.5);
        assert_eq!(brute_eer(&trials(&[0.1, 0.4], &[0.3, 0.9])), 0.5);
        assert!(compute_eer(&trials(&[0.1], &[])).is_err());
        assert!(compute_eer(&trials(&[], &[0.1])).is_err());
        assert!(compute_eer(&trials(&[f64::NAN], &[0.1])).is_err());
    }

    #[test]
    fn eer_matches_enumeration_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        for _ in 0..100 {
            let ng = rng.random_range(1..12);
            let nr = rng.random_range(1..12);
            // coarse grid so ties occur
            let mut draw = |n: usize| {
                (0..n)
                    .map(|_| (rng.random_range(0..8) as f64) / 4.0)
                    .collect::<Vec<_>>()
            };
            let (g, r) = (draw(ng), draw(nr));
            let ts = trials(&g, &r);
            assert!((compute_eer(&ts).unwrap().eer - brute_eer(&ts)).abs() < 1e-9);
        }
    }

    #[test]
    fn roc_contract() {
        let sep = roc_curve(&trials(&[0.1, 0.2], &[0.7, 0.8])).unwrap();
        assert!(sep.points.iter().any(|p| p.fpr == 0.0 && p.tpr == 1.0));
        assert_eq!(sep.auc(), 1.0);
        let first = sep.points.first().unwrap();
        let last = sep.points.last().unwrap();
        assert_eq!((first.fpr, first.tpr), (0.0, 0.0));
        assert_eq!((last.fpr, last.tpr), (1.0, 1.0));

        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let g: Vec<f64> = (0..2000).map(|_| rng.random()).collect();
        let r: Vec<f64> = (0..2000).map(|_| rng.random()).collect();
        let auc = roc_curve(&trials(&g, &r)).unwrap().auc();
        assert!((auc - 0.5).abs() < 0.05, "{auc}");
        assert!(roc_curve(&trials(&[1.0], &[])).is_err());
    }

    #[test]
    fn confidence_interval_examples() {
        assert_eq!(confidence_interval(&[3.0, 3.0, 3.0]).unwrap(), (3.0, 0.0));
        let (m, h) = confidence_interval(&[10.0, 12.0]).unwrap();
        assert!((m - 11.0).abs() < 1e-12 && (h - 12.706).abs() < 1e-3, "{h}");
        let v = [5.0, 6.0, 5.0, 6.0, 5.5];
        let (m, h) = confidence_interval(&v).unwrap();
        let s = (v.iter().map(|x| (x - 5.5f64).powi(2)).sum::<f64>() / 4.0).sqrt();
        assert!((m - 5.5).abs() < 1e-12 && (h - 2.776 * s / 5f64.sqrt()).abs() < 1e-3);
        assert!(confidence_interval(&[1.0]).is_err());
    }

    #[test]
    fn exports() {
        let dir = tempfile::tempdir().unwrap();
        let roc = roc_curve(&trials(&[0.1, 0.4], &[0.3, 0.9])).unwrap();
        let csv = dir.path().join("roc.csv");
        write_roc_csv(&csv, &roc).unwrap();
        let text = std::fs::read_to_string(&csv).unwrap();
        assert!(text.starts_with("fpr,tpr,threshold\n0,0,inf\n"));
        assert_eq!(text.lines().count(), roc.points.len() + 1);
        let svg = dir.path().join("roc.svg");
        write_roc_svg(&svg, &roc, "D<1>").unwrap();
        let text = std::fs::read_to_string(&svg).unwrap();
        assert!(
            text.starts_with("<svg") && text.contains("polyline") && text.contains("D&lt;1&gt;")
        );
    }

    fn scores() -> impl Strategy<Value = (Vec<f64>, Vec<f64>)> {
        (
            prop::collection::vec(-5.0f64..5.0, 1..15),
            prop::collection::vec(-5.0f64..5.0, 1..15),
        )
    }

    proptest! {
        #[test]
        fn eer_invariant_under_monotone_transform((g, r) in scores()) {
            let base = compute_eer(&trials(&g, &r)).unwrap().eer;
            let f = |v: &Vec<f64>| v.iter().map(|x| (0.7 * x).exp() + 3.0).collect::<Vec<_>>();
            let moved = compute_eer(&trials(&f(&g), &f(&r))).unwrap().eer;
            prop_assert!((base - moved).abs() < 1e-12);
        }

        #[test]
        fn eer_invariant_under_negation_and_swap((g, r) in scores()) {
            let base = compute_eer(&trials(&g, &r)).unwrap().eer;
            let neg = |v: &Vec<f64>| v.iter().map(|x| -x).collect::<Vec<_>>();
            let swapped = compute_eer(&trials(&neg(&r), &neg(&g))).unwrap().eer;
            prop_assert!((base - swapped).abs() < 1e-12);
        }

        #[test]
        fn auc_bounded_by_eer((g, r) in scores()) {
            let ts = trials(&g, &r);
            let eer = compute_eer(&ts).unwrap().eer;
            let roc = roc_curve(&ts).unwrap();
            prop_assert!(roc.auc() >= 1.0 - 2.0 * eer - 1e-12);
            prop_assert!(roc.points.windows(2).all(|w| w[1].fpr >= w[0].fpr && w[1].tpr >= w[0].tpr));
        }
    }
}
