//! Synthetic target-domain detection streams and pseudo-label evaluation.
//!
//! Every generated detection carries its ground truth inline, so evaluation
//! is plain counting with no box matching involved.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Beta, Distribution, Poisson};
use serde::{Deserialize, Serialize};

use crate::caps::{caps_step, PseudoLabel, PseudoLabelSet, ThresholdState};
use crate::detection::{argmax_class, BBox, Detection, PredictionBatch, Truth};
use crate::error::{Error, Result};
use crate::par::Exec;

/// Identifier of the generator and samplers, recorded in reports.
pub const RNG_ALGORITHM: &str = "chacha8-stream-per-image/rand_distr-0.5";

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BetaParams {
    pub alpha: f64,
    pub beta: f64,
}

impl BetaParams {
    pub fn mode(&self) -> Option<f64> {
        (self.alpha > 1.0 && self.beta > 1.0).then(|| (self.alpha - 1.0) / (self.alpha + self.beta - 2.0))
    }
}

/// Detection difficulty of one class.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClassProfile {
    #[serde(default)]
    pub name: String,
    /// Confidence distribution of correct detections.
    pub tp_conf: BetaParams,
    /// Confidence distribution of false positives.
    pub fp_conf: BetaParams,
    /// Expected correct detections per image.
    pub tp_rate: f64,
    /// Expected false positives per image.
    pub fp_rate: f64,
    /// Side-length range of synthetic boxes, in pixels.
    pub box_size: (f64, f64),
}

impl ClassProfile {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidProfile(format!("{}: {m}", self.name)));
        for (what, p) in [("tp_conf", self.tp_conf), ("fp_conf", self.fp_conf)] {
            if !(p.alpha.is_finite() && p.beta.is_finite() && p.alpha > 0.0 && p.beta > 0.0) {
                return bad(format!("{what} needs positive finite Beta parameters"));
            }
        }
        for (what, r) in [("tp_rate", self.tp_rate), ("fp_rate", self.fp_rate)] {
            if !r.is_finite() || r < 0.0 {
                return bad(format!("{what} must be finite and >= 0, got {r}"));
            }
        }
        let (lo, hi) = self.box_size;
        if !(lo.is_finite() && hi.is_finite() && lo >= 1.0 && lo <= hi) {
            return bad(format!("box_size must satisfy 1 <= min <= max, got ({lo}, {hi})"));
        }
        Ok(())
    }
}

struct Samplers {
    tp: Beta<f64>,
    fp: Beta<f64>,
    tp_count: Option<Poisson<f64>>,
    fp_count: Option<Poisson<f64>>,
}

impl Samplers {
    fn new(p: &ClassProfile) -> Result<Self> {
        let beta = |b: BetaParams| {
            Beta::new(b.alpha, b.beta).map_err(|e| Error::InvalidProfile(format!("{}: {e}", p.name)))
        };
        let poisson = |r: f64| -> Result<Option<Poisson<f64>>> {
            if r == 0.0 {
                return Ok(None);
            }
            Poisson::new(r)
                .map(Some)
                .map_err(|e| Error::InvalidProfile(format!("{}: {e}", p.name)))
        };
        Ok(Samplers {
            tp: beta(p.tp_conf)?,
            fp: beta(p.fp_conf)?,
            tp_count: poisson(p.tp_rate)?,
            fp_count: poisson(p.fp_rate)?,
        })
    }
}

fn draw_count(d: &Option<Poisson<f64>>, rng: &mut ChaCha8Rng) -> usize {
    d.as_ref().map_or(0, |p| p.sample(rng) as usize)
}

fn draw_detection(
    rng: &mut ChaCha8Rng,
    class: usize,
    num_classes: usize,
    conf: f64,
    box_size: (f64, f64),
    image_size: (u32, u32),
    truth: Truth,
) -> Detection {
    let (iw, ih) = (f64::from(image_size.0), f64::from(image_size.1));
    let side = |rng: &mut ChaCha8Rng, limit: f64| {
        let hi = box_size.1.min(limit);
        let lo = box_size.0.min(hi);
        if hi > lo { rng.random_range(lo..=hi) } else { hi }
    };
    let w = side(rng, iw);
    let h = side(rng, ih);
    let x1 = if iw > w { rng.random_range(0.0..=iw - w) } else { 0.0 };
    let y1 = if ih > h { rng.random_range(0.0..=ih - h) } else { 0.0 };
    // other classes score strictly below the predicted one
    let class_scores = (0..num_classes)
        .map(|j| if j == class { conf } else { conf * 0.5 * rng.random::<f64>() })
        .collect();
    Detection {
        bbox: BBox::new(x1, y1, x1 + w, y1 + h),
        class_scores,
        conf,
        truth: Some(truth),
    }
}

/// Image `index` of the stream, drawn from ChaCha8 stream `index` under `seed`.
fn generate_image(
    profiles: &[ClassProfile],
    samplers: &[Samplers],
    index: usize,
    image_size: (u32, u32),
    seed: u64,
) -> PredictionBatch {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index as u64);
    let n = profiles.len();
    let mut detections = Vec::new();
    for (c, (p, s)) in profiles.iter().zip(samplers).enumerate() {
        let tp = draw_count(&s.tp_count, &mut rng);
        let fp = draw_count(&s.fp_count, &mut rng);
        for _ in 0..tp {
            let conf = s.tp.sample(&mut rng);
            detections.push(draw_detection(&mut rng, c, n, conf, p.box_size, image_size, Truth::Correct(c)));
        }
        for _ in 0..fp {
            let conf = s.fp.sample(&mut rng);
            detections.push(draw_detection(&mut rng, c, n, conf, p.box_size, image_size, Truth::FalsePositive));
        }
    }
    PredictionBatch {
        image_id: format!("sim-{index:06}"),
        detections,
        image_size,
    }
}

/// Poisson counts and Beta confidences per class and image; reproducible from `seed`.
pub fn generate_stream(
    profiles: &[ClassProfile],
    num_images: usize,
    image_size: (u32, u32),
    seed: u64,
) -> Result<Vec<PredictionBatch>> {
    generate_stream_with(profiles, num_images, image_size, seed, Exec::default())
}

pub fn generate_stream_with(
    profiles: &[ClassProfile],
    num_images: usize,
    image_size: (u32, u32),
    seed: u64,
    exec: Exec,
) -> Result<Vec<PredictionBatch>> {
    if profiles.is_empty() {
        return Err(Error::InvalidProfile("no class profiles".into()));
    }
    if image_size.0 == 0 || image_size.1 == 0 {
        return Err(Error::InvalidProfile("image size must be positive".into()));
    }
    for p in profiles {
        p.validate()?;
    }
    let samplers = profiles.iter().map(Samplers::new).collect::<Result<Vec<_>>>()?;
    Ok(exec.map_range(num_images, |i| generate_image(profiles, &samplers, i, image_size, seed)))
}

/// Confusion counts and ratios for one class, or for all classes pooled.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Default)]
pub struct ClassMetrics {
    pub kept: u64,
    pub dropped: u64,
    pub kept_true: u64,
    pub kept_false: u64,
    /// Correct detections present in the stream.
    pub total_true: u64,
    pub precision: Option<f64>,
    pub recall: Option<f64>,
    pub f1: Option<f64>,
}

impl ClassMetrics {
    fn finish(mut self) -> Self {
        self.kept_false = self.kept - self.kept_true;
        self.precision = (self.kept > 0).then(|| self.kept_true as f64 / self.kept as f64);
        self.recall = (self.total_true > 0).then(|| self.kept_true as f64 / self.total_true as f64);
        self.f1 = match (self.precision, self.recall) {
            (Some(p), Some(r)) if p + r > 0.0 => Some(2.0 * p * r / (p + r)),
            (Some(_), Some(_)) => Some(0.0),
            _ => None,
        };
        self
    }

    fn add(&mut self, o: &ClassMetrics) {
        self.kept += o.kept;
        self.dropped += o.dropped;
        self.kept_true += o.kept_true;
        self.total_true += o.total_true;
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EvalReport {
    pub per_class: Vec<ClassMetrics>,
    /// Counts pooled over classes (micro average).
    pub aggregate: ClassMetrics,
    /// Mean per-class F1 over classes with at least one correct detection;
    /// a class with undefined F1 contributes 0.
    pub macro_f1: Option<f64>,
}

/// Scores selected pseudo labels against the generator's truth tags.
pub fn evaluate_selection(
    selected: &[PseudoLabelSet],
    stream: &[PredictionBatch],
    num_classes: usize,
) -> Result<EvalReport> {
    if selected.len() != stream.len() {
        return Err(Error::StreamMismatch(format!(
            "{} selections for {} images",
            selected.len(),
            stream.len()
        )));
    }
    let mut per_class = vec![ClassMetrics::default(); num_classes];
    let mut present = vec![0u64; num_classes];
    for (sel, batch) in selected.iter().zip(stream) {
        if sel.image_id != batch.image_id {
            return Err(Error::StreamMismatch(format!(
                "selection for '{}' paired with image '{}'",
                sel.image_id, batch.image_id
            )));
        }
        for d in &batch.detections {
            let (c, _) = argmax_class(d);
            present[c] += 1;
            if let Some(Truth::Correct(k)) = d.truth {
                per_class[k].total_true += 1;
            }
        }
        for PseudoLabel { detection, class, .. } in &sel.labels {
            let m = &mut per_class[*class];
            m.kept += 1;
            if detection.truth == Some(Truth::Correct(*class)) {
                m.kept_true += 1;
            }
        }
    }
    let mut aggregate = ClassMetrics::default();
    for (m, n) in per_class.iter_mut().zip(&present) {
        m.dropped = n.saturating_sub(m.kept);
        *m = m.finish();
        aggregate.add(m);
    }
    let scored: Vec<f64> = per_class
        .iter()
        .filter(|m| m.total_true > 0)
        .map(|m| m.f1.unwrap_or(0.0))
        .collect();
    let macro_f1 = (!scored.is_empty()).then(|| scored.iter().sum::<f64>() / scored.len() as f64);
    Ok(EvalReport {
        per_class,
        aggregate: aggregate.finish(),
        macro_f1,
    })
}

/// Keeps detections whose argmax-class score is at least `threshold`.
pub fn select_static(batch: &PredictionBatch, threshold: f64) -> PseudoLabelSet {
    PseudoLabelSet {
        image_id: batch.image_id.clone(),
        labels: batch
            .detections
            .iter()
            .filter_map(|d| {
                let (class, score) = argmax_class(d);
                (score >= threshold).then(|| PseudoLabel {
                    detection: d.clone(),
                    class,
                    score,
                })
            })
            .collect(),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct StaticResult {
    pub threshold: f64,
    pub report: EvalReport,
}

/// One global threshold for all classes, evaluated per threshold.
pub fn sweep_static_thresholds(
    stream: &[PredictionBatch],
    thresholds: &[f64],
    num_classes: usize,
    exec: Exec,
) -> Vec<StaticResult> {
    exec.map(thresholds, |&t| {
        let sel: Vec<_> = stream.iter().map(|b| select_static(b, t)).collect();
        StaticResult {
            threshold: t,
            report: evaluate_selection(&sel, stream, num_classes).expect("selection built from stream"),
        }
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct CapsExperiment {
    pub report: EvalReport,
    /// Per-class thresholds after each step; row `k` is the state after step `k + 1`.
    pub trajectory: Vec<Vec<f64>>,
    pub final_state: ThresholdState,
}

/// Runs the stream through CAPS one image per step.
pub fn run_caps_experiment(stream: &[PredictionBatch], initial: &ThresholdState) -> Result<CapsExperiment> {
    let mut state = initial.clone();
    let mut trajectory = Vec::with_capacity(stream.len());
    let mut selected = Vec::with_capacity(stream.len());
    for batch in stream {
        let (labels, next) = caps_step(batch, &state);
        state = next;
        trajectory.push(state.per_class.clone());
        selected.push(labels);
    }
    let report = evaluate_selection(&selected, stream, initial.num_classes())?;
    Ok(CapsExperiment {
        report,
        trajectory,
        final_state: state,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn profile(tp: (f64, f64), tp_rate: f64, fp_rate: f64) -> ClassProfile {
        ClassProfile {
            name: "c".into(),
            tp_conf: BetaParams { alpha: tp.0, beta: tp.1 },
            fp_conf: BetaParams { alpha: 2.0, beta: 6.0 },
            tp_rate,
            fp_rate,
            box_size: (16.0, 64.0),
        }
    }

    #[test]
    fn zero_rates_give_empty_batches() {
        let s = generate_stream(&[profile((5.0, 2.0), 0.0, 0.0)], 50, (320, 320), 1).unwrap();
        assert_eq!(s.len(), 50);
        assert!(s.iter().all(|b| b.is_empty()));
    }

    #[test]
    fn generation_is_reproducible_and_exec_independent() {
        let ps = [profile((40.0, 8.0), 2.0, 2.0), profile((12.0, 8.0), 2.0, 2.0)];
        let a = generate_stream_with(&ps, 300, (640, 480), 42, Exec::Sequential).unwrap();
        let b = generate_stream_with(&ps, 300, (640, 480), 42, Exec::Parallel).unwrap();
        assert_eq!(a, b);
        let c = generate_stream_with(&ps, 300, (640, 480), 43, Exec::Sequential).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn generated_detections_validate() {
        let ps = [profile((40.0, 8.0), 3.0, 3.0), profile((12.0, 8.0), 1.0, 2.0)];
        for b in generate_stream(&ps, 100, (200, 100), 5).unwrap() {
            let n = b.len();
            let v = b.clone().validate(2).unwrap();
            assert_eq!(v.len(), n);
            for d in &b.detections {
                let (c, _) = argmax_class(d);
                match d.truth.unwrap() {
                    Truth::Correct(k) => assert_eq!(k, c),
                    Truth::FalsePositive => {}
                }
            }
        }
    }

    #[test]
    fn poisson_mean_within_three_sigma() {
        let s = generate_stream(&[profile((5.0, 2.0), 2.0, 0.0)], 10_000, (640, 640), 2024).unwrap();
        let total: usize = s.iter().map(|b| b.len()).sum();
        let mean = total as f64 / 10_000.0;
        let sigma = (2.0f64 / 10_000.0).sqrt();
        assert!((mean - 2.0).abs() < 3.0 * sigma, "mean {mean}");
    }

    #[test]
    fn invalid_profiles_rejected() {
        let mut p = profile((5.0, 2.0), 1.0, 1.0);
        p.tp_rate = -1.0;
        assert!(matches!(generate_stream(&[p], 1, (10, 10), 0), Err(Error::InvalidProfile(_))));
        let mut p = profile((0.0, 2.0), 1.0, 1.0);
        p.name = "zero".into();
        assert!(generate_stream(&[p], 1, (10, 10), 0).is_err());
        assert!(generate_stream(&[], 1, (10, 10), 0).is_err());
    }

    #[test]
    fn select_all_and_select_none() {
        let ps = [profile((40.0, 8.0), 2.0, 2.0), profile((12.0, 8.0), 2.0, 2.0)];
        let s = generate_stream(&ps, 200, (640, 640), 9).unwrap();
        let all: Vec<_> = s.iter().map(|b| select_static(b, 0.0)).collect();
        let r = evaluate_selection(&all, &s, 2).unwrap();
        assert_eq!(r.aggregate.recall, Some(1.0));
        let n: u64 = s.iter().map(|b| b.len() as u64).sum();
        let t: u64 = s.iter().flat_map(|b| &b.detections).filter(|d| matches!(d.truth, Some(Truth::Correct(_)))).count() as u64;
        assert_eq!(r.aggregate.precision, Some(t as f64 / n as f64));

        let none: Vec<_> = s.iter().map(|b| select_static(b, 1.0 + 1e-9)).collect();
        let r = evaluate_selection(&none, &s, 2).unwrap();
        assert_eq!(r.aggregate.recall, Some(0.0));
        assert_eq!(r.aggregate.precision, None);
        assert_eq!(r.aggregate.f1, None);
        assert_eq!(r.macro_f1, Some(0.0));
    }

    #[test]
    fn stream_mismatch() {
        let s = generate_stream(&[profile((5.0, 2.0), 1.0, 1.0)], 3, (64, 64), 0).unwrap();
        let sel: Vec<_> = s.iter().map(|b| select_static(b, 0.5)).collect();
        assert!(matches!(evaluate_selection(&sel[..2], &s, 1), Err(Error::StreamMismatch(_))));
        let mut bad = sel.clone();
        bad[1].image_id = "other".into();
        assert!(matches!(evaluate_selection(&bad, &s, 1), Err(Error::StreamMismatch(_))));
    }

    #[test]
    fn random_mask_matches_exhaustive_count() {
        let ps = [profile((40.0, 8.0), 2.0, 2.0), profile((12.0, 8.0), 2.0, 2.0)];
        let s = generate_stream(&ps, 25, (640, 640), 77).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut sel = Vec::new();
        let mut mask = Vec::new();
        for b in &s {
            let mut labels = Vec::new();
            for d in &b.detections {
                let keep = rng.random_bool(0.5);
                mask.push((d.clone(), keep));
                if keep {
                    let (class, score) = argmax_class(d);
                    labels.push(PseudoLabel { detection: d.clone(), class, score });
                }
            }
            sel.push(PseudoLabelSet { image_id: b.image_id.clone(), labels });
        }
        let r = evaluate_selection(&sel, &s, 2).unwrap();
        for c in 0..2 {
            let (mut kept, mut tp, mut total) = (0u64, 0u64, 0u64);
            for (d, keep) in &mask {
                let cls = d.class_scores.iter().enumerate().fold((0, -1.0), |b, (i, &x)| if x > b.1 { (i, x) } else { b }).0;
                let correct = d.truth == Some(Truth::Correct(c));
                total += correct as u64;
                if *keep && cls == c {
                    kept += 1;
                    tp += correct as u64;
                }
            }
            let m = &r.per_class[c];
            assert_eq!((m.kept, m.kept_true, m.total_true), (kept, tp, total));
            assert_eq!(m.kept_true + m.kept_false, m.kept);
        }
        let sum: u64 = r.per_class.iter().map(|m| m.kept).sum();
        assert_eq!(sum, r.aggregate.kept);
    }

    #[test]
    fn empty_stream_keeps_thresholds() {
        let stream: Vec<_> = (0..20).map(|i| PredictionBatch::new(format!("e{i}"), (64, 64))).collect();
        let init = ThresholdState::new(2, 0.8, 20);
        let exp = run_caps_experiment(&stream, &init).unwrap();
        assert_eq!(exp.final_state.per_class, init.per_class);
        assert_eq!(exp.final_state.iter, 20);
        assert_eq!(exp.report.aggregate.kept, 0);
    }

    #[test]
    fn sweep_endpoints() {
        let ps = [profile((40.0, 8.0), 2.0, 2.0)];
        let s = generate_stream(&ps, 100, (640, 640), 3).unwrap();
        let sw = sweep_static_thresholds(&s, &[0.0, 1.0 + 1e-9], 1, Exec::Parallel);
        let all: Vec<_> = s.iter().map(|b| select_static(b, 0.0)).collect();
        assert_eq!(sw[0].report, evaluate_selection(&all, &s, 1).unwrap());
        assert_eq!(sw[1].report.aggregate.kept, 0);
    }
}
