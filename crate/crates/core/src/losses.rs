//! Detection-loss aggregation and the adversarial alignment losses.
//!
//! The discriminator is deliberately minimal so every gradient can be checked
//! by finite differences:
//!
//! * image head: global average pool over the grid, per-channel affine map, sigmoid;
//! * instance head: per-pixel affine map over channels (a 1x1 convolution), sigmoid.
//!
//! Domain losses are binary cross-entropy. The adversarial minus sign is not
//! applied to the loss value; it is carried by the gradient-reversal layer,
//! which hands the feature extractor `-lambda_d` times the loss gradient.

use serde::Serialize;

use crate::error::{Error, Result};
use crate::saliency::{reweight_backward, reweight_features, FeatureMap, SaliencyMatrix};

pub const DEFAULT_LAMBDA_D: f64 = 0.1;

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct LossWeights {
    pub lambda1: f64,
    pub lambda2: f64,
    pub lambda3: f64,
    pub lambda_d: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            lambda1: 1.0,
            lambda2: 1.0,
            lambda3: 1.0,
            lambda_d: DEFAULT_LAMBDA_D,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("lambda1", self.lambda1),
            ("lambda2", self.lambda2),
            ("lambda3", self.lambda3),
            ("lambda_d", self.lambda_d),
        ] {
            if !v.is_finite() || v < 0.0 {
                return Err(Error::Range(format!("{name} must be finite and >= 0, got {v}")));
            }
        }
        Ok(())
    }
}

/// Box, objectness and classification losses as produced by a detector.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct DetectionLossParts {
    pub bbox: f64,
    pub obj: f64,
    pub cls: f64,
}

/// Weighted sum of the detector's component losses. Serves both the
/// supervised (source) and pseudo-labelled (target) terms.
pub fn detection_loss(parts: DetectionLossParts, w: &LossWeights) -> f64 {
    w.lambda1 * parts.bbox + w.lambda2 * parts.obj + w.lambda3 * parts.cls
}

/// `l_sup + l_unsup + lambda_d * (l_img + l_ins + l_con)`.
pub fn total_loss(l_sup: f64, l_unsup: f64, l_img: f64, l_ins: f64, l_con: f64, w: &LossWeights) -> f64 {
    l_sup + l_unsup + w.lambda_d * (l_img + l_ins + l_con)
}

/// Backward pass of the gradient-reversal layer: `-lambda_d * upstream`.
pub fn grl_backward(upstream: &[f64], lambda_d: f64) -> Vec<f64> {
    upstream.iter().map(|g| -lambda_d * g).collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Domain {
    Source,
    Target,
}

impl Domain {
    pub fn value(self) -> f64 {
        match self {
            Domain::Source => 0.0,
            Domain::Target => 1.0,
        }
    }
}

/// Per-position domain labels for one scale.
#[derive(Debug, Clone, PartialEq)]
pub struct DomainGrid {
    pub height: usize,
    pub width: usize,
    pub labels: Vec<Domain>,
}

impl DomainGrid {
    pub fn uniform(height: usize, width: usize, d: Domain) -> Self {
        DomainGrid {
            height,
            width,
            labels: vec![d; height * width],
        }
    }

    /// One uniform grid per feature map.
    pub fn for_features(features: &[FeatureMap], d: Domain) -> Vec<DomainGrid> {
        features
            .iter()
            .map(|f| DomainGrid::uniform(f.height, f.width, d))
            .collect()
    }
}

pub fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// Binary cross-entropy of `sigmoid(z)` against target `d`, computed from the logit.
pub fn bce_with_logit(z: f64, d: f64) -> f64 {
    z.max(0.0) - z * d + (-z.abs()).exp().ln_1p()
}

/// Affine map over channels followed by a sigmoid.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LogisticHead {
    pub weights: Vec<f64>,
    pub bias: f64,
}

impl LogisticHead {
    pub fn zeros(channels: usize) -> Self {
        LogisticHead {
            weights: vec![0.0; channels],
            bias: 0.0,
        }
    }
}

/// Image and instance heads for one feature scale.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ScaleHeads {
    pub image: LogisticHead,
    pub instance: LogisticHead,
}

/// Per-scale discriminator heads. Also used to hold parameter gradients.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Discriminator {
    pub channels: usize,
    pub scales: Vec<ScaleHeads>,
}

impl Discriminator {
    pub fn zeros(channels: usize, num_scales: usize) -> Self {
        Discriminator {
            channels,
            scales: (0..num_scales)
                .map(|_| ScaleHeads {
                    image: LogisticHead::zeros(channels),
                    instance: LogisticHead::zeros(channels),
                })
                .collect(),
        }
    }

    /// Parameters per scale: image weights, image bias, instance weights, instance bias.
    pub fn params_per_scale(channels: usize) -> usize {
        2 * (channels + 1)
    }

    pub fn num_params(&self) -> usize {
        self.scales.len() * Self::params_per_scale(self.channels)
    }

    pub fn to_flat(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.num_params());
        for s in &self.scales {
            out.extend_from_slice(&s.image.weights);
            out.push(s.image.bias);
            out.extend_from_slice(&s.instance.weights);
            out.push(s.instance.bias);
        }
        out
    }

    pub fn from_flat(channels: usize, num_scales: usize, flat: &[f64]) -> Result<Self> {
        let per = Self::params_per_scale(channels);
        if flat.len() != per * num_scales {
            return Err(Error::ShapeMismatch(format!(
                "discriminator needs {} parameters for {num_scales} scales x {channels} channels, got {}",
                per * num_scales,
                flat.len()
            )));
        }
        let scales = flat
            .chunks(per)
            .map(|p| ScaleHeads {
                image: LogisticHead {
                    weights: p[..channels].to_vec(),
                    bias: p[channels],
                },
                instance: LogisticHead {
                    weights: p[channels + 1..2 * channels + 1].to_vec(),
                    bias: p[2 * channels + 1],
                },
            })
            .collect();
        Ok(Discriminator { channels, scales })
    }

    /// Plain gradient-descent update of every head.
    pub fn descend(&mut self, grad: &Discriminator, lr: f64) {
        let mut flat = self.to_flat();
        for (p, g) in flat.iter_mut().zip(grad.to_flat()) {
            *p -= lr * g;
        }
        *self = Discriminator::from_flat(self.channels, self.scales.len(), &flat)
            .expect("same shape");
    }

    fn check(&self, features: &[FeatureMap]) -> Result<()> {
        if features.len() != self.scales.len() {
            return Err(Error::ShapeMismatch(format!(
                "{} feature scales but discriminator has {}",
                features.len(),
                self.scales.len()
            )));
        }
        if let Some(f) = features.iter().find(|f| f.channels != self.channels) {
            return Err(Error::ShapeMismatch(format!(
                "feature map has {} channels, discriminator expects {}",
                f.channels, self.channels
            )));
        }
        Ok(())
    }

    /// Image-head logit for scale `s`.
    pub fn image_logit(&self, s: usize, f: &FeatureMap) -> f64 {
        let head = &self.scales[s].image;
        let pooled = global_average_pool(f);
        head.bias + head.weights.iter().zip(&pooled).map(|(w, x)| w * x).sum::<f64>()
    }

    pub fn image_prob(&self, s: usize, f: &FeatureMap) -> f64 {
        sigmoid(self.image_logit(s, f))
    }

    /// Instance-head logits for scale `s`, one per grid position.
    pub fn instance_logits(&self, s: usize, f: &FeatureMap) -> Vec<f64> {
        let head = &self.scales[s].instance;
        let plane = f.plane();
        let mut z = vec![head.bias; plane];
        for (c, w) in head.weights.iter().enumerate() {
            let chan = &f.data[c * plane..(c + 1) * plane];
            for (zi, x) in z.iter_mut().zip(chan) {
                *zi += w * x;
            }
        }
        z
    }

    pub fn instance_probs(&self, s: usize, f: &FeatureMap) -> Vec<f64> {
        self.instance_logits(s, f).into_iter().map(sigmoid).collect()
    }
}

fn global_average_pool(f: &FeatureMap) -> Vec<f64> {
    let plane = f.plane();
    (0..f.channels)
        .map(|c| f.data[c * plane..(c + 1) * plane].iter().sum::<f64>() / plane as f64)
        .collect()
}

/// Loss value with gradients for the discriminator and the features.
#[derive(Debug, Clone, PartialEq)]
pub struct AdversarialOutput {
    pub loss: f64,
    /// d loss / d discriminator parameters.
    pub disc_grad: Discriminator,
    /// d loss / d features, one vector per scale.
    pub feature_grad: Vec<Vec<f64>>,
    /// What the feature extractor receives through gradient reversal.
    pub reversed_feature_grad: Vec<Vec<f64>>,
}

/// `sum_s BCE(D_img(f^s), d)`.
pub fn image_domain_loss(
    features: &[FeatureMap],
    disc: &Discriminator,
    domain: Domain,
    lambda_d: f64,
) -> Result<AdversarialOutput> {
    disc.check(features)?;
    let d = domain.value();
    let mut loss = 0.0;
    let mut disc_grad = Discriminator::zeros(disc.channels, disc.scales.len());
    let mut feature_grad = Vec::with_capacity(features.len());
    for (s, f) in features.iter().enumerate() {
        let pooled = global_average_pool(f);
        let head = &disc.scales[s].image;
        let z = head.bias + head.weights.iter().zip(&pooled).map(|(w, x)| w * x).sum::<f64>();
        loss += bce_with_logit(z, d);
        let dz = sigmoid(z) - d;

        let g = &mut disc_grad.scales[s].image;
        for (gw, x) in g.weights.iter_mut().zip(&pooled) {
            *gw = dz * x;
        }
        g.bias = dz;

        let plane = f.plane();
        let inv = 1.0 / plane as f64;
        let mut gf = vec![0.0; f.data.len()];
        for (c, w) in head.weights.iter().enumerate() {
            gf[c * plane..(c + 1) * plane].fill(dz * w * inv);
        }
        feature_grad.push(gf);
    }
    let reversed_feature_grad = feature_grad.iter().map(|g| grl_backward(g, lambda_d)).collect();
    Ok(AdversarialOutput {
        loss,
        disc_grad,
        feature_grad,
        reversed_feature_grad,
    })
}

/// `sum_s sum_(u,v) BCE(D_ins(fbar^s)[u,v], d[u,v])`, gradients w.r.t. `fbar`.
pub fn instance_domain_loss(
    reweighted: &[FeatureMap],
    disc: &Discriminator,
    labels: &[DomainGrid],
    lambda_d: f64,
) -> Result<AdversarialOutput> {
    disc.check(reweighted)?;
    if labels.len() != reweighted.len() {
        return Err(Error::ShapeMismatch(format!(
            "{} domain grids for {} scales",
            labels.len(),
            reweighted.len()
        )));
    }
    let mut loss = 0.0;
    let mut disc_grad = Discriminator::zeros(disc.channels, disc.scales.len());
    let mut feature_grad = Vec::with_capacity(reweighted.len());
    for (s, (f, grid)) in reweighted.iter().zip(labels).enumerate() {
        if grid.height != f.height || grid.width != f.width {
            return Err(Error::ShapeMismatch(format!(
                "domain grid {}x{} vs features {}x{}",
                grid.height, grid.width, f.height, f.width
            )));
        }
        let plane = f.plane();
        let z = disc.instance_logits(s, f);
        let dz: Vec<f64> = z
            .iter()
            .zip(&grid.labels)
            .map(|(&zi, d)| {
                loss += bce_with_logit(zi, d.value());
                sigmoid(zi) - d.value()
            })
            .collect();

        let head = &disc.scales[s].instance;
        let g = &mut disc_grad.scales[s].instance;
        for c in 0..f.channels {
            let chan = &f.data[c * plane..(c + 1) * plane];
            g.weights[c] = chan.iter().zip(&dz).map(|(x, e)| x * e).sum();
        }
        g.bias = dz.iter().sum();

        let mut gf = vec![0.0; f.data.len()];
        for (c, w) in head.weights.iter().enumerate() {
            for (slot, e) in gf[c * plane..(c + 1) * plane].iter_mut().zip(&dz) {
                *slot = e * w;
            }
        }
        feature_grad.push(gf);
    }
    let reversed_feature_grad = feature_grad.iter().map(|g| grl_backward(g, lambda_d)).collect();
    Ok(AdversarialOutput {
        loss,
        disc_grad,
        feature_grad,
        reversed_feature_grad,
    })
}

/// Saliency-targeted instance loss on raw features: reweights `f` by `m`,
/// evaluates [`instance_domain_loss`], and pulls feature gradients back to `f`
/// (each position scaled by `1 + m[u,v]`).
pub fn targeted_instance_loss(
    features: &[FeatureMap],
    saliency: &[SaliencyMatrix],
    disc: &Discriminator,
    labels: &[DomainGrid],
    lambda_d: f64,
) -> Result<AdversarialOutput> {
    if saliency.len() != features.len() {
        return Err(Error::ShapeMismatch(format!(
            "{} saliency matrices for {} scales",
            saliency.len(),
            features.len()
        )));
    }
    let reweighted = features
        .iter()
        .zip(saliency)
        .map(|(f, m)| reweight_features(f, m))
        .collect::<Result<Vec<_>>>()?;
    let mut out = instance_domain_loss(&reweighted, disc, labels, lambda_d)?;
    out.feature_grad = out
        .feature_grad
        .iter()
        .zip(saliency)
        .zip(features)
        .map(|((g, m), f)| reweight_backward(g, m, f.channels))
        .collect();
    out.reversed_feature_grad = out
        .feature_grad
        .iter()
        .map(|g| grl_backward(g, lambda_d))
        .collect();
    Ok(out)
}

/// Consensus loss value with gradients. No gradient reversal is applied.
#[derive(Debug, Clone, PartialEq)]
pub struct ConsensusOutput {
    pub loss: f64,
    pub disc_grad: Discriminator,
    /// d loss / d f (through the image head).
    pub grad_features: Vec<Vec<f64>>,
    /// d loss / d fbar (through the instance head).
    pub grad_reweighted: Vec<Vec<f64>>,
}

/// `sum_s sum_(u,v) (D_ins(fbar^s)[u,v] - D_img(f^s))^2`.
pub fn consensus_loss(
    features: &[FeatureMap],
    reweighted: &[FeatureMap],
    disc: &Discriminator,
) -> Result<ConsensusOutput> {
    disc.check(features)?;
    disc.check(reweighted)?;
    let mut loss = 0.0;
    let mut disc_grad = Discriminator::zeros(disc.channels, disc.scales.len());
    let mut grad_features = Vec::with_capacity(features.len());
    let mut grad_reweighted = Vec::with_capacity(features.len());
    for (s, (f, fb)) in features.iter().zip(reweighted).enumerate() {
        if f.height != fb.height || f.width != fb.width {
            return Err(Error::ShapeMismatch(format!(
                "features {}x{} vs reweighted {}x{}",
                f.height, f.width, fb.height, fb.width
            )));
        }
        let plane = f.plane();
        let p_img = disc.image_prob(s, f);
        let p_ins = disc.instance_probs(s, fb);

        let mut d_pimg = 0.0;
        let dz_ins: Vec<f64> = p_ins
            .iter()
            .map(|&p| {
                let r = p - p_img;
                loss += r * r;
                d_pimg -= 2.0 * r;
                2.0 * r * p * (1.0 - p)
            })
            .collect();
        let dz_img = d_pimg * p_img * (1.0 - p_img);

        let pooled = global_average_pool(f);
        let img = &disc.scales[s].image;
        let ins = &disc.scales[s].instance;
        let g = &mut disc_grad.scales[s];
        for (gw, x) in g.image.weights.iter_mut().zip(&pooled) {
            *gw = dz_img * x;
        }
        g.image.bias = dz_img;
        for c in 0..fb.channels {
            let chan = &fb.data[c * plane..(c + 1) * plane];
            g.instance.weights[c] = chan.iter().zip(&dz_ins).map(|(x, e)| x * e).sum();
        }
        g.instance.bias = dz_ins.iter().sum();

        let inv = 1.0 / plane as f64;
        let mut gf = vec![0.0; f.data.len()];
        for (c, w) in img.weights.iter().enumerate() {
            gf[c * plane..(c + 1) * plane].fill(dz_img * w * inv);
        }
        let mut gfb = vec![0.0; fb.data.len()];
        for (c, w) in ins.weights.iter().enumerate() {
            for (slot, e) in gfb[c * plane..(c + 1) * plane].iter_mut().zip(&dz_ins) {
                *slot = e * w;
            }
        }
        grad_features.push(gf);
        grad_reweighted.push(gfb);
    }
    Ok(ConsensusOutput {
        loss,
        disc_grad,
        grad_features,
        grad_reweighted,
    })
}

/// Per-term breakdown for one image.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct LossBreakdown {
    pub l_img: f64,
    pub l_ins: f64,
    pub l_con: f64,
    /// `lambda_d * (l_img + l_ins + l_con)`.
    pub adversarial: f64,
    pub l_sup: f64,
    pub l_unsup: f64,
    pub total: f64,
}

/// Evaluates every alignment loss for one image and combines them with the
/// supplied detection losses.
pub fn loss_breakdown(
    features: &[FeatureMap],
    saliency: &[SaliencyMatrix],
    disc: &Discriminator,
    domain: Domain,
    l_sup: f64,
    l_unsup: f64,
    w: &LossWeights,
) -> Result<LossBreakdown> {
    let img = image_domain_loss(features, disc, domain, w.lambda_d)?;
    let grids = DomainGrid::for_features(features, domain);
    let ins = targeted_instance_loss(features, saliency, disc, &grids, w.lambda_d)?;
    let reweighted = features
        .iter()
        .zip(saliency)
        .map(|(f, m)| reweight_features(f, m))
        .collect::<Result<Vec<_>>>()?;
    let con = consensus_loss(features, &reweighted, disc)?;
    Ok(LossBreakdown {
        l_img: img.loss,
        l_ins: ins.loss,
        l_con: con.loss,
        adversarial: w.lambda_d * (img.loss + ins.loss + con.loss),
        l_sup,
        l_unsup,
        total: total_loss(l_sup, l_unsup, img.loss, ins.loss, con.loss, w),
    })
}
