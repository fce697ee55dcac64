//! Saliency matrices rasterized from boxes, and saliency-weighted features.

use crate::caps::PseudoLabelSet;
use crate::detection::BBox;
use crate::error::{Error, Result};
use crate::par::Exec;

/// C x H x W feature tensor at one stride, stored row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMap {
    pub stride: u32,
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub data: Vec<f64>,
}

impl FeatureMap {
    pub fn new(stride: u32, channels: usize, height: usize, width: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != channels * height * width {
            return Err(Error::ShapeMismatch(format!(
                "feature payload has {} values, expected {channels}x{height}x{width}",
                data.len()
            )));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::ShapeMismatch("feature map contains non-finite values".into()));
        }
        Ok(FeatureMap {
            stride,
            channels,
            height,
            width,
            data,
        })
    }

    pub fn zeros(stride: u32, channels: usize, height: usize, width: usize) -> Self {
        FeatureMap {
            stride,
            channels,
            height,
            width,
            data: vec![0.0; channels * height * width],
        }
    }

    pub fn plane(&self) -> usize {
        self.height * self.width
    }

    #[inline]
    pub fn at(&self, c: usize, u: usize, v: usize) -> f64 {
        self.data[(c * self.height + u) * self.width + v]
    }

    pub fn scaled(&self, alpha: f64) -> FeatureMap {
        FeatureMap {
            data: self.data.iter().map(|x| alpha * x).collect(),
            ..self.clone()
        }
    }
}

/// H x W grid of object-presence weights in `[0,1]` at one stride.
#[derive(Debug, Clone, PartialEq)]
pub struct SaliencyMatrix {
    pub stride: u32,
    pub height: usize,
    pub width: usize,
    pub data: Vec<f64>,
}

impl SaliencyMatrix {
    pub fn zeros(stride: u32, height: usize, width: usize) -> Self {
        SaliencyMatrix {
            stride,
            height,
            width,
            data: vec![0.0; height * width],
        }
    }

    pub fn filled(stride: u32, height: usize, width: usize, value: f64) -> Self {
        SaliencyMatrix {
            data: vec![value; height * width],
            ..Self::zeros(stride, height, width)
        }
    }

    pub fn new(stride: u32, height: usize, width: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != height * width {
            return Err(Error::ShapeMismatch(format!(
                "saliency payload has {} values, expected {height}x{width}",
                data.len()
            )));
        }
        if let Some(v) = data.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(Error::Range(format!("saliency entry {v} outside [0,1]")));
        }
        Ok(SaliencyMatrix {
            stride,
            height,
            width,
            data,
        })
    }

    #[inline]
    pub fn at(&self, u: usize, v: usize) -> f64 {
        self.data[u * self.width + v]
    }
}

/// Grid dimensions `(H, W)` covering an image at `stride`.
pub fn grid_for(image_size: (u32, u32), stride: u32) -> (usize, usize) {
    let (w, h) = image_size;
    (h.div_ceil(stride) as usize, w.div_ceil(stride) as usize)
}

/// Output of a rasterization pass.
#[derive(Debug, Clone, PartialEq)]
pub struct Rasterized {
    pub saliency: SaliencyMatrix,
    /// Boxes that covered no cell center at this stride.
    pub skipped: usize,
}

fn paint(m: &mut SaliencyMatrix, b: &BBox, weight: f64) -> bool {
    let s = f64::from(m.stride);
    let v_lo = ((b.x1 / s).floor().max(0.0) as usize).min(m.width);
    let v_hi = ((b.x2 / s).ceil().max(0.0) as usize).min(m.width);
    let u_lo = ((b.y1 / s).floor().max(0.0) as usize).min(m.height);
    let u_hi = ((b.y2 / s).ceil().max(0.0) as usize).min(m.height);
    let mut hit = false;
    for u in u_lo..u_hi {
        let cy = (u as f64 + 0.5) * s;
        if cy < b.y1 || cy >= b.y2 {
            continue;
        }
        for v in v_lo..v_hi {
            let cx = (v as f64 + 0.5) * s;
            if cx < b.x1 || cx >= b.x2 {
                continue;
            }
            let cell = &mut m.data[u * m.width + v];
            *cell = cell.max(weight);
            hit = true;
        }
    }
    hit
}

fn rasterize<'a>(
    boxes: impl Iterator<Item = (&'a BBox, f64)>,
    stride: u32,
    grid: (usize, usize),
) -> Rasterized {
    assert!(stride > 0, "stride must be positive");
    let mut saliency = SaliencyMatrix::zeros(stride, grid.0, grid.1);
    let mut skipped = 0;
    for (b, w) in boxes {
        if !paint(&mut saliency, b, w.clamp(0.0, 1.0)) {
            skipped += 1;
        }
    }
    Rasterized { saliency, skipped }
}

/// Rasterizes pseudo labels: a cell takes the max confidence over the boxes
/// containing its center. Boxes covering no cell center are skipped and counted.
pub fn rasterize_saliency(labels: &PseudoLabelSet, stride: u32, grid: (usize, usize)) -> Rasterized {
    rasterize(
        labels.labels.iter().map(|l| (&l.detection.bbox, l.detection.conf)),
        stride,
        grid,
    )
}

/// Same rasterization with weight 1 inside every box.
pub fn saliency_from_ground_truth(boxes: &[BBox], stride: u32, grid: (usize, usize)) -> Rasterized {
    rasterize(boxes.iter().map(|b| (b, 1.0)), stride, grid)
}

/// Rasterizes arbitrary `(box, weight)` pairs.
pub fn rasterize_weighted(boxes: &[(BBox, f64)], stride: u32, grid: (usize, usize)) -> Rasterized {
    rasterize(boxes.iter().map(|(b, w)| (b, *w)), stride, grid)
}

fn check_shapes(f: &FeatureMap, m: &SaliencyMatrix) -> Result<()> {
    if f.height != m.height || f.width != m.width || f.stride != m.stride {
        return Err(Error::ShapeMismatch(format!(
            "features {}x{} @ stride {} vs saliency {}x{} @ stride {}",
            f.height, f.width, f.stride, m.height, m.width, m.stride
        )));
    }
    Ok(())
}

/// `out[c,u,v] = m[u,v] * f[c,u,v] + f[c,u,v]`.
pub fn reweight_features(f: &FeatureMap, m: &SaliencyMatrix) -> Result<FeatureMap> {
    reweight_features_with(f, m, Exec::Sequential)
}

pub fn reweight_features_with(f: &FeatureMap, m: &SaliencyMatrix, exec: Exec) -> Result<FeatureMap> {
    check_shapes(f, m)?;
    let plane = f.plane();
    let mut out = f.data.clone();
    if plane > 0 {
        exec.for_each_chunk_mut(&mut out, plane, |_, chan| {
            for (x, w) in chan.iter_mut().zip(&m.data) {
                *x = *w * *x + *x;
            }
        });
    }
    Ok(FeatureMap {
        data: out,
        ..f.clone()
    })
}

/// Pulls a gradient w.r.t. reweighted features back to the raw features:
/// `grad_f[c,u,v] = (1 + m[u,v]) * grad_fbar[c,u,v]`.
pub fn reweight_backward(grad_fbar: &[f64], m: &SaliencyMatrix, channels: usize) -> Vec<f64> {
    let plane = m.height * m.width;
    assert_eq!(grad_fbar.len(), channels * plane);
    grad_fbar
        .chunks(plane.max(1))
        .flat_map(|chan| chan.iter().zip(&m.data).map(|(g, w)| (1.0 + w) * g))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::caps::PseudoLabel;
    use crate::detection::Detection;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};

    fn labels(boxes: &[(f64, f64, f64, f64, f64)]) -> PseudoLabelSet {
        PseudoLabelSet {
            image_id: "i".into(),
            labels: boxes
                .iter()
                .map(|&(x1, y1, x2, y2, c)| PseudoLabel {
                    detection: Detection::new(BBox::new(x1, y1, x2, y2), vec![c], c),
                    class: 0,
                    score: c,
                })
                .collect(),
        }
    }

    #[test]
    fn empty_labels_give_zero_grid() {
        let r = rasterize_saliency(&labels(&[]), 32, (4, 5));
        assert!(r.saliency.data.iter().all(|&x| x == 0.0));
        assert_eq!(r.skipped, 0);
        let g = saliency_from_ground_truth(&[], 8, (3, 3));
        assert!(g.saliency.data.iter().all(|&x| x == 0.0));
    }

    #[test]
    fn single_cell_box() {
        let r = rasterize_saliency(&labels(&[(0.0, 0.0, 32.0, 32.0, 0.9)]), 32, (2, 2));
        assert_eq!(r.saliency.data, vec![0.9, 0.0, 0.0, 0.0]);
    }

    #[test]
    fn overlap_takes_max() {
        // box A covers columns 0..2, box B covers columns 1..3, both row 0
        let r = rasterize_saliency(
            &labels(&[(0.0, 0.0, 20.0, 10.0, 0.7), (10.0, 0.0, 30.0, 10.0, 0.9)]),
            10,
            (2, 3),
        );
        assert_eq!(r.saliency.data, vec![0.7, 0.9, 0.9, 0.0, 0.0, 0.0]);
    }

    #[test]
    fn ground_truth_is_unit_weight() {
        let boxes = [BBox::new(8.0, 8.0, 40.0, 24.0)];
        let g = saliency_from_ground_truth(&boxes, 8, (4, 6));
        for u in 0..4 {
            for v in 0..6 {
                let expect = if (1..3).contains(&u) && (1..5).contains(&v) { 1.0 } else { 0.0 };
                assert_eq!(g.saliency.at(u, v), expect, "cell ({u},{v})");
            }
        }
        let via_labels = rasterize_saliency(&labels(&[(8.0, 8.0, 40.0, 24.0, 1.0)]), 8, (4, 6));
        assert_eq!(via_labels, g);
    }

    #[test]
    fn sub_cell_box_is_skipped() {
        let r = rasterize_saliency(&labels(&[(1.0, 1.0, 5.0, 5.0, 0.8)]), 32, (2, 2));
        assert_eq!(r.skipped, 1);
        assert!(r.saliency.data.iter().all(|&x| x == 0.0));
    }

    #[test]
    fn grid_dimensions() {
        assert_eq!(grid_for((640, 480), 32), (15, 20));
        assert_eq!(grid_for((100, 50), 32), (2, 4));
    }

    #[test]
    fn reweight_identities() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(1);
        let data: Vec<f64> = (0..48).map(|_| rng.random_range(-3.0..3.0)).collect();
        let f = FeatureMap::new(4, 3, 4, 4, data).unwrap();
        let z = reweight_features(&f, &SaliencyMatrix::zeros(4, 4, 4)).unwrap();
        assert_eq!(z, f);
        let d = reweight_features(&f, &SaliencyMatrix::filled(4, 4, 4, 1.0)).unwrap();
        for (a, b) in d.data.iter().zip(&f.data) {
            assert_eq!(*a, 2.0 * b);
        }
    }

    #[test]
    fn reweight_matches_triple_loop() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(2);
        let f = FeatureMap::new(2, 3, 4, 4, (0..48).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap();
        let m = SaliencyMatrix::new(2, 4, 4, (0..16).map(|_| rng.random::<f64>()).collect()).unwrap();
        let out = reweight_features(&f, &m).unwrap();
        for c in 0..3 {
            for u in 0..4 {
                for v in 0..4 {
                    let x = f.at(c, u, v);
                    assert_eq!(out.at(c, u, v), m.at(u, v) * x + x);
                }
            }
        }
        assert_eq!(reweight_features_with(&f, &m, Exec::Parallel).unwrap(), out);
    }

    #[test]
    fn shape_mismatch() {
        let f = FeatureMap::zeros(8, 2, 3, 3);
        assert!(matches!(
            reweight_features(&f, &SaliencyMatrix::zeros(8, 3, 4)),
            Err(Error::ShapeMismatch(_))
        ));
        assert!(matches!(
            reweight_features(&f, &SaliencyMatrix::zeros(16, 3, 3)),
            Err(Error::ShapeMismatch(_))
        ));
    }

    fn arb_box(extent: f64, min: f64) -> impl Strategy<Value = BBox> {
        (0.0..extent, 0.0..extent, min..extent / 2.0, min..extent / 2.0)
            .prop_map(|(x, y, w, h)| BBox::new(x, y, x + w, y + h))
    }

    proptest! {
        #[test]
        fn amplification_and_linearity(
            vals in proptest::collection::vec(-5.0..5.0f64, 2 * 3 * 3),
            ms in proptest::collection::vec(0.0..=1.0f64, 9),
            alpha in -3.0..3.0f64,
        ) {
            let f = FeatureMap::new(1, 2, 3, 3, vals).unwrap();
            let m = SaliencyMatrix::new(1, 3, 3, ms).unwrap();
            let out = reweight_features(&f, &m).unwrap();
            for c in 0..2 { for u in 0..3 { for v in 0..3 {
                let (a, b) = (out.at(c, u, v).abs(), f.at(c, u, v).abs());
                prop_assert!(a >= b);
                if m.at(u, v) > 0.0 && b > 0.0 { prop_assert!(a > b); }
            }}}
            let lhs = reweight_features(&f.scaled(alpha), &m).unwrap();
            for (l, r) in lhs.data.iter().zip(&out.data) {
                prop_assert!((l - alpha * r).abs() <= 1e-12 * (1.0 + r.abs()));
            }
        }

        #[test]
        fn adding_a_box_never_lowers_cells(
            boxes in proptest::collection::vec((arb_box(128.0, 1.0), 0.0..=1.0f64), 0..6),
            extra in (arb_box(128.0, 1.0), 0.0..=1.0f64),
        ) {
            let before = rasterize_weighted(&boxes, 16, (8, 8));
            let mut more = boxes.clone();
            more.push(extra);
            let after = rasterize_weighted(&more, 16, (8, 8));
            for (a, b) in after.saliency.data.iter().zip(&before.saliency.data) {
                prop_assert!(a >= b);
            }
        }

        // Boxes at least one fine cell wide: every coarse hit has a fine hit in its footprint.
        #[test]
        fn coarse_cells_have_fine_support(boxes in proptest::collection::vec(arb_box(128.0, 8.0), 1..5)) {
            let gt: Vec<BBox> = boxes;
            let fine = saliency_from_ground_truth(&gt, 8, (16, 16)).saliency;
            let coarse = saliency_from_ground_truth(&gt, 16, (8, 8)).saliency;
            for u in 0..8 { for v in 0..8 {
                if coarse.at(u, v) > 0.0 {
                    let any = (0..2).any(|du| (0..2).any(|dv| fine.at(2 * u + du, 2 * v + dv) > 0.0));
                    prop_assert!(any, "coarse cell ({}, {}) has no fine support", u, v);
                }
            }}
        }
    }
}
