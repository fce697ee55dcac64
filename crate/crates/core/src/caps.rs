//! Class-aware adaptive pseudo-label selection.
//!
//! One step over a batch of teacher predictions:
//!
//! 1. drop everything whose joint confidence is below the coarse threshold `delta_t`;
//! 2. histogram the survivors per argmax class into `M` right-closed bins over `[0,1]`;
//! 3. take the right endpoint of each class's most populated bin;
//! 4. move each class threshold toward `beta_k * endpoint` with an EMA;
//! 5. keep detections whose argmax-class score clears the *updated* class threshold.

use std::f64::consts::PI;

use crate::detection::{argmax_class, Detection, PredictionBatch};
use crate::error::{Error, Result};
use crate::par::Exec;

pub const DEFAULT_DELTA_T: f64 = 0.2;
pub const DEFAULT_DELTA_0: f64 = 0.8;
pub const DEFAULT_ALPHA_T: f64 = 0.9999;
pub const DEFAULT_BETA_START: f64 = 1.0;
pub const DEFAULT_BETA_END: f64 = 0.85;
pub const DEFAULT_NUM_BINS: usize = 20;

/// Per-class adaptive thresholds and the hyperparameters that drive them.
#[derive(Debug, Clone, PartialEq)]
pub struct ThresholdState {
    /// Coarse filter threshold.
    pub delta_t: f64,
    /// Current per-class thresholds.
    pub per_class: Vec<f64>,
    /// EMA momentum for the threshold update.
    pub alpha_t: f64,
    pub beta_start: f64,
    pub beta_end: f64,
    /// Length of the cosine schedule for beta.
    pub total_iters: u64,
    /// Number of completed steps.
    pub iter: u64,
    pub num_bins: usize,
}

impl ThresholdState {
    /// Fresh state with every class threshold at `delta_0` and default hyperparameters.
    pub fn new(num_classes: usize, delta_0: f64, total_iters: u64) -> Self {
        ThresholdState {
            delta_t: DEFAULT_DELTA_T,
            per_class: vec![delta_0; num_classes],
            alpha_t: DEFAULT_ALPHA_T,
            beta_start: DEFAULT_BETA_START,
            beta_end: DEFAULT_BETA_END,
            total_iters,
            iter: 0,
            num_bins: DEFAULT_NUM_BINS,
        }
    }

    pub fn num_classes(&self) -> usize {
        self.per_class.len()
    }

    pub fn validate(&self) -> Result<()> {
        let unit = |name: &str, v: f64| {
            if v.is_finite() && (0.0..=1.0).contains(&v) {
                Ok(())
            } else {
                Err(Error::Range(format!("{name} must lie in [0,1], got {v}")))
            }
        };
        unit("delta_t", self.delta_t)?;
        unit("alpha_t", self.alpha_t)?;
        for (c, &d) in self.per_class.iter().enumerate() {
            unit(&format!("per_class[{c}]"), d)?;
        }
        if self.per_class.is_empty() {
            return Err(Error::Range("at least one class is required".into()));
        }
        if !self.beta_start.is_finite() || !self.beta_end.is_finite() {
            return Err(Error::Range("beta endpoints must be finite".into()));
        }
        if self.beta_start < 0.0 || self.beta_end < 0.0 {
            return Err(Error::Range("beta endpoints must be non-negative".into()));
        }
        if self.num_bins < 2 {
            return Err(Error::Range(format!(
                "num_bins must be >= 2, got {}",
                self.num_bins
            )));
        }
        if self.total_iters == 0 {
            return Err(Error::Range("total_iters must be > 0".into()));
        }
        Ok(())
    }

    /// Beta for the current iteration counter. See [`cosine_beta_at`].
    pub fn cosine_beta(&self) -> f64 {
        cosine_beta_at(self.beta_start, self.beta_end, self.iter, self.total_iters)
    }

    /// Runs [`caps_step`] in place and returns the selected labels.
    pub fn step(&mut self, batch: &PredictionBatch) -> PseudoLabelSet {
        let (labels, next) = caps_step(batch, self);
        *self = next;
        labels
    }
}

/// Cosine-annealed factor: `end + (start - end) * (1 + cos(pi * k / K)) / 2`.
///
/// Iterations past `total` hold at `end`.
pub fn cosine_beta_at(start: f64, end: f64, k: u64, total: u64) -> f64 {
    if total == 0 {
        return end;
    }
    let k = k.min(total);
    if k == 0 {
        return start;
    }
    if k == total {
        return end;
    }
    let phase = PI * k as f64 / total as f64;
    end + 0.5 * (start - end) * (1.0 + phase.cos())
}

/// Keeps detections with `conf >= delta_t`, preserving order.
pub fn coarse_filter(batch: &PredictionBatch, delta_t: f64) -> PredictionBatch {
    PredictionBatch {
        image_id: batch.image_id.clone(),
        detections: batch
            .detections
            .iter()
            .filter(|d| d.conf >= delta_t)
            .cloned()
            .collect(),
        image_size: batch.image_size,
    }
}

/// Per-class bin counts over `M` right-closed intervals `((m-1)/M, m/M]`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ConfidenceHistogram {
    num_bins: usize,
    counts: Vec<Vec<u64>>,
}

impl ConfidenceHistogram {
    pub fn new(num_classes: usize, num_bins: usize) -> Self {
        assert!(num_bins >= 2, "histogram needs at least two bins");
        ConfidenceHistogram {
            num_bins,
            counts: vec![vec![0; num_bins]; num_classes],
        }
    }

    pub fn num_bins(&self) -> usize {
        self.num_bins
    }

    pub fn num_classes(&self) -> usize {
        self.counts.len()
    }

    /// Counts for `class`; index 0 is bin 1.
    pub fn counts(&self, class: usize) -> &[u64] {
        &self.counts[class]
    }

    pub fn total(&self, class: usize) -> u64 {
        self.counts[class].iter().sum()
    }

    pub fn add(&mut self, class: usize, conf: f64) {
        let m = bin_index(conf, self.num_bins);
        self.counts[class][m - 1] += 1;
    }

    /// Bin-wise sum.
    pub fn merge(&mut self, other: &ConfidenceHistogram) {
        assert_eq!(self.num_bins, other.num_bins);
        assert_eq!(self.counts.len(), other.counts.len());
        for (a, b) in self.counts.iter_mut().zip(&other.counts) {
            for (x, y) in a.iter_mut().zip(b) {
                *x += *y;
            }
        }
    }
}

/// Right edge of bin `m` (1-based) out of `num_bins`.
pub fn bin_right_edge(m: usize, num_bins: usize) -> f64 {
    m as f64 / num_bins as f64
}

/// 1-based bin of `conf`: `ceil(conf * M)`, with 0 mapped to bin 1.
///
/// The ceiling is corrected against the floating-point bin edges so that the
/// result always satisfies `edge(m-1) < conf <= edge(m)`.
pub fn bin_index(conf: f64, num_bins: usize) -> usize {
    let mut m = ((conf * num_bins as f64).ceil() as isize).clamp(1, num_bins as isize) as usize;
    while m > 1 && conf <= bin_right_edge(m - 1, num_bins) {
        m -= 1;
    }
    while m < num_bins && conf > bin_right_edge(m, num_bins) {
        m += 1;
    }
    m
}

/// Histogram of joint confidences keyed by argmax class.
pub fn accumulate_histogram(
    batch: &PredictionBatch,
    num_classes: usize,
    num_bins: usize,
) -> ConfidenceHistogram {
    accumulate_histogram_with(batch, num_classes, num_bins, Exec::Sequential)
}

const HIST_CHUNK: usize = 4096;

pub fn accumulate_histogram_with(
    batch: &PredictionBatch,
    num_classes: usize,
    num_bins: usize,
    exec: Exec,
) -> ConfidenceHistogram {
    let fill = |dets: &[Detection]| {
        let mut h = ConfidenceHistogram::new(num_classes, num_bins);
        for d in dets {
            let (c, _) = argmax_class(d);
            h.add(c, d.conf);
        }
        h
    };
    if batch.detections.len() <= HIST_CHUNK || !exec.is_parallel() {
        return fill(&batch.detections);
    }
    let chunks: Vec<&[Detection]> = batch.detections.chunks(HIST_CHUNK).collect();
    let partials = exec.map(&chunks, |c| fill(c));
    let mut out = ConfidenceHistogram::new(num_classes, num_bins);
    for p in &partials {
        out.merge(p);
    }
    out
}

/// Right endpoint of the most populated bin for `class`, or `None` if the
/// class has no counts. Ties go to the higher bin.
pub fn mode_endpoint(hist: &ConfidenceHistogram, class: usize) -> Option<f64> {
    let counts = hist.counts(class);
    let mut best: Option<(usize, u64)> = None;
    for (i, &n) in counts.iter().enumerate() {
        if n > 0 && best.is_none_or(|(_, b)| n >= b) {
            best = Some((i, n));
        }
    }
    best.map(|(i, _)| bin_right_edge(i + 1, hist.num_bins()))
}

/// EMA update of every class threshold that has a mode endpoint.
///
/// Classes with `None` keep their threshold. The iteration counter advances by
/// one and beta is evaluated at the new counter value.
pub fn update_thresholds(state: &ThresholdState, deltas: &[Option<f64>]) -> ThresholdState {
    assert_eq!(deltas.len(), state.num_classes(), "one delta per class");
    let k = state.iter + 1;
    let beta = cosine_beta_at(state.beta_start, state.beta_end, k, state.total_iters);
    let a = state.alpha_t;
    let per_class = state
        .per_class
        .iter()
        .zip(deltas)
        .map(|(&prev, delta)| match delta {
            Some(dd) => (a * prev + (1.0 - a) * beta * dd).clamp(0.0, 1.0),
            None => prev,
        })
        .collect();
    ThresholdState {
        per_class,
        iter: k,
        ..state.clone()
    }
}

/// A detection promoted to a training target.
#[derive(Debug, Clone, PartialEq)]
pub struct PseudoLabel {
    pub detection: Detection,
    pub class: usize,
    /// The argmax class score that cleared the threshold.
    pub score: f64,
}

impl PseudoLabel {
    pub fn one_hot(&self) -> Vec<u8> {
        let mut v = vec![0; self.detection.class_scores.len()];
        v[self.class] = 1;
        v
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct PseudoLabelSet {
    pub image_id: String,
    pub labels: Vec<PseudoLabel>,
}

impl PseudoLabelSet {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }
}

/// Keeps detections whose argmax-class score clears that class's threshold.
pub fn select_pseudo_labels(batch: &PredictionBatch, state: &ThresholdState) -> PseudoLabelSet {
    let labels = batch
        .detections
        .iter()
        .filter_map(|d| {
            let (c, score) = argmax_class(d);
            (score >= state.per_class[c]).then(|| PseudoLabel {
                detection: d.clone(),
                class: c,
                score,
            })
        })
        .collect();
    PseudoLabelSet {
        image_id: batch.image_id.clone(),
        labels,
    }
}

/// Full two-step selection; returns the labels and the updated state.
pub fn caps_step(batch: &PredictionBatch, state: &ThresholdState) -> (PseudoLabelSet, ThresholdState) {
    let kept = coarse_filter(batch, state.delta_t);
    let hist = accumulate_histogram(&kept, state.num_classes(), state.num_bins);
    let deltas: Vec<Option<f64>> = (0..state.num_classes())
        .map(|c| mode_endpoint(&hist, c))
        .collect();
    let next = update_thresholds(state, &deltas);
    let labels = select_pseudo_labels(&kept, &next);
    (labels, next)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::detection::BBox;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn det(class: usize, conf: f64, n: usize) -> Detection {
        let mut scores = vec![0.0; n];
        scores[class] = conf;
        Detection::new(BBox::new(0.0, 0.0, 10.0, 10.0), scores, conf)
    }

    fn batch(dets: Vec<Detection>) -> PredictionBatch {
        PredictionBatch {
            image_id: "img".into(),
            detections: dets,
            image_size: (100, 100),
        }
    }

    fn random_batch(rng: &mut ChaCha8Rng, n: usize, classes: usize) -> PredictionBatch {
        batch(
            (0..n)
                .map(|_| {
                    let scores: Vec<f64> = (0..classes).map(|_| rng.random::<f64>()).collect();
                    let conf = rng.random::<f64>();
                    Detection::new(BBox::new(0.0, 0.0, 5.0, 5.0), scores, conf)
                })
                .collect(),
        )
    }

    #[test]
    fn coarse_filter_is_inclusive() {
        let b = batch(vec![det(0, 0.1, 1), det(0, 0.2, 1), det(0, 0.9, 1)]);
        let f = coarse_filter(&b, 0.2);
        let confs: Vec<f64> = f.detections.iter().map(|d| d.conf).collect();
        assert_eq!(confs, vec![0.2, 0.9]);
        assert_eq!(coarse_filter(&b, 0.0), b);
    }

    #[test]
    fn coarse_filter_matches_scan() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..50 {
            let b = random_batch(&mut rng, 40, 3);
            let t = rng.random::<f64>();
            let mut expect = Vec::new();
            for d in &b.detections {
                if d.conf >= t {
                    expect.push(d.clone());
                }
            }
            assert_eq!(coarse_filter(&b, t).detections, expect);
        }
    }

    #[test]
    fn histogram_bin_of_0_83() {
        let b = batch(vec![det(2, 0.83, 3)]);
        let h = accumulate_histogram(&b, 3, 20);
        assert_eq!(h.counts(2)[16], 1);
        assert_eq!(h.total(2), 1);
        assert_eq!(mode_endpoint(&h, 2), Some(0.85));
    }

    #[test]
    fn empty_histogram() {
        let h = accumulate_histogram(&batch(vec![]), 4, 20);
        for c in 0..4 {
            assert!(h.counts(c).iter().all(|&n| n == 0));
            assert_eq!(mode_endpoint(&h, c), None);
        }
    }

    #[test]
    fn zero_conf_goes_to_first_bin() {
        assert_eq!(bin_index(0.0, 20), 1);
        assert_eq!(bin_index(0.05, 20), 1);
        assert_eq!(bin_index(0.050001, 20), 2);
        assert_eq!(bin_index(1.0, 20), 20);
        assert_eq!(bin_index(0.85, 20), 17);
    }

    #[test]
    fn mode_examples() {
        let h = accumulate_histogram(&batch(vec![det(0, 0.999, 1)]), 1, 20);
        assert_eq!(mode_endpoint(&h, 0), Some(1.0));

        let b = batch(vec![
            det(0, 0.82, 1),
            det(0, 0.83, 1),
            det(0, 0.84, 1),
            det(0, 0.4, 1),
        ]);
        let h = accumulate_histogram(&b, 1, 20);
        assert_eq!(mode_endpoint(&h, 0), Some(0.85));

        // tie between (0.70,0.75] and (0.90,0.95] goes to the higher bin
        let b = batch(vec![
            det(0, 0.72, 1),
            det(0, 0.74, 1),
            det(0, 0.91, 1),
            det(0, 0.93, 1),
        ]);
        let h = accumulate_histogram(&b, 1, 20);
        assert_eq!(mode_endpoint(&h, 0), Some(0.95));
        // full scan: highest bin among those with the max count
        let counts = h.counts(0);
        let max = *counts.iter().max().unwrap();
        let m = (0..20).rev().find(|&i| counts[i] == max).unwrap() + 1;
        assert_eq!(m as f64 / 20.0, 0.95);
    }

    #[test]
    fn parallel_histogram_matches_sequential() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let b = random_batch(&mut rng, 20_000, 5);
        let s = accumulate_histogram_with(&b, 5, 20, Exec::Sequential);
        let p = accumulate_histogram_with(&b, 5, 20, Exec::Parallel);
        assert_eq!(s, p);
    }

    #[test]
    fn cosine_beta_endpoints() {
        let mut s = ThresholdState::new(1, 0.8, 100);
        s.beta_start = 1.0;
        s.beta_end = 0.6;
        assert_eq!(s.cosine_beta(), 1.0);
        s.iter = 100;
        assert_eq!(s.cosine_beta(), 0.6);
        s.iter = 50;
        assert!((s.cosine_beta() - 0.8).abs() < 1e-15);
        s.iter = 500;
        assert_eq!(s.cosine_beta(), 0.6);
    }

    #[test]
    fn update_examples() {
        let mut s = ThresholdState::new(2, 0.8, 10);
        s.beta_start = 1.0;
        s.beta_end = 1.0;
        let n = update_thresholds(&s, &[Some(0.85), None]);
        assert!((n.per_class[0] - 0.800005).abs() < 1e-12);
        assert_eq!(n.per_class[1], 0.8);
        assert_eq!(n.iter, 1);

        s.alpha_t = 1.0;
        let n = update_thresholds(&s, &[Some(0.3), Some(0.95)]);
        assert_eq!(n.per_class, vec![0.8, 0.8]);
    }

    #[test]
    fn select_examples() {
        let mut s = ThresholdState::new(3, 0.85, 10);
        let b = batch(vec![det(1, 0.9, 3), det(2, 0.5, 3)]);
        let l = select_pseudo_labels(&b, &s);
        assert_eq!(l.len(), 1);
        assert_eq!(l.labels[0].class, 1);
        assert_eq!(l.labels[0].one_hot(), vec![0, 1, 0]);

        s.per_class = vec![0.0; 3];
        assert_eq!(select_pseudo_labels(&b, &s).len(), 2);
    }

    #[test]
    fn select_matches_predicate_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..100 {
            let b = random_batch(&mut rng, 50, 3);
            let mut s = ThresholdState::new(3, 0.5, 10);
            s.per_class = (0..3).map(|_| rng.random::<f64>()).collect();
            let got = select_pseudo_labels(&b, &s);
            let mut expect = Vec::new();
            for d in &b.detections {
                let mut c = 0;
                for j in 1..3 {
                    if d.class_scores[j] > d.class_scores[c] {
                        c = j;
                    }
                }
                if d.class_scores[c] >= s.per_class[c] {
                    expect.push((d.clone(), c));
                }
            }
            let got: Vec<_> = got.labels.into_iter().map(|l| (l.detection, l.class)).collect();
            assert_eq!(got, expect);
        }
    }

    #[test]
    fn empty_step_advances_counter() {
        let s = ThresholdState::new(2, 0.8, 10);
        let (l, n) = caps_step(&batch(vec![]), &s);
        assert!(l.is_empty());
        assert_eq!(n.iter, 1);
        assert_eq!(n.per_class, s.per_class);
    }

    /// Hand trace of the two-step procedure on six detections:
    ///
    /// - class 0: 0.1 (coarse-dropped), 0.82, 0.84 -> mode (0.80,0.85] -> 0.85
    ///   delta = 0.5*0.8 + 0.5*0.85 = 0.825 -> keep 0.84 only
    /// - class 1: 0.58, 0.6, 0.79 -> mode (0.55,0.60] -> 0.6
    ///   delta = 0.5*0.8 + 0.5*0.6 = 0.7 -> keep 0.79 only
    #[test]
    fn two_step_hand_trace() {
        let mut s = ThresholdState::new(2, 0.8, 100);
        s.alpha_t = 0.5;
        s.beta_start = 1.0;
        s.beta_end = 1.0;
        let b = batch(vec![
            det(0, 0.1, 2),
            det(0, 0.82, 2),
            det(0, 0.84, 2),
            det(1, 0.58, 2),
            det(1, 0.6, 2),
            det(1, 0.79, 2),
        ]);
        let (l, n) = caps_step(&b, &s);
        assert!((n.per_class[0] - 0.825).abs() < 1e-12);
        assert!((n.per_class[1] - 0.7).abs() < 1e-12);
        let kept: Vec<(usize, f64)> = l.labels.iter().map(|l| (l.class, l.score)).collect();
        assert_eq!(kept, vec![(0, 0.84), (1, 0.79)]);
    }

    #[test]
    fn geometric_convergence_to_mode() {
        let mut s = ThresholdState::new(1, 0.8, 1000);
        s.alpha_t = 0.99;
        s.beta_start = 1.0;
        s.beta_end = 1.0;
        let b = batch(vec![det(0, 0.81, 1), det(0, 0.83, 1), det(0, 0.845, 1)]);
        for k in 1..=1000u64 {
            s.step(&b);
            if k % 100 == 0 {
                let err = (s.per_class[0] - 0.85).abs();
                let expect = 0.99f64.powi(k as i32) * 0.05;
                assert!((err - expect).abs() <= 1e-12, "k={k} err={err} expect={expect}");
            }
        }
    }

    proptest! {
        #[test]
        fn raising_delta_t_never_adds_labels(
            confs in proptest::collection::vec((0usize..3, 0.0..=1.0f64), 0..40),
            t1 in 0.0..=1.0f64, t2 in 0.0..=1.0f64,
        ) {
            let (lo, hi) = if t1 <= t2 { (t1, t2) } else { (t2, t1) };
            let b = batch(confs.iter().map(|&(c, x)| det(c, x, 3)).collect());
            let mut s = ThresholdState::new(3, 0.8, 50);
            s.delta_t = lo;
            let n_lo = caps_step(&b, &s).0.len();
            s.delta_t = hi;
            let n_hi = caps_step(&b, &s).0.len();
            prop_assert!(n_hi <= n_lo);
        }

        #[test]
        fn contraction_is_exact(
            d0 in 0.0..=1.0f64, dd in 0.0..=1.0f64, beta in 0.0..=1.0f64,
            alpha in 0.5..0.999f64, steps in 1usize..50,
        ) {
            let mut s = ThresholdState::new(1, d0, 1000);
            s.alpha_t = alpha;
            s.beta_start = beta;
            s.beta_end = beta;
            for _ in 0..steps {
                s = update_thresholds(&s, &[Some(dd)]);
            }
            let target = beta * dd;
            let expect = alpha.powi(steps as i32) * (d0 - target).abs();
            prop_assert!(((s.per_class[0] - target).abs() - expect).abs() < 1e-12);
        }

        #[test]
        fn class_isolation(
            a_confs in proptest::collection::vec(0.0..=1.0f64, 1..10),
            a_confs2 in proptest::collection::vec(0.0..=1.0f64, 1..10),
            b_confs in proptest::collection::vec(0.01..=1.0f64, 1..10),
        ) {
            let s = ThresholdState::new(2, 0.8, 10);
            let mk = |a: &[f64]| batch(
                a.iter().map(|&x| det(0, x, 2)).chain(b_confs.iter().map(|&x| det(1, x, 2))).collect()
            );
            let n1 = caps_step(&mk(&a_confs), &s).1;
            let n2 = caps_step(&mk(&a_confs2), &s).1;
            prop_assert_eq!(n1.per_class[1], n2.per_class[1]);
        }
    }
}
