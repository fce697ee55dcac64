//! Central finite-difference checks for every adversarial loss gradient.
//!
//! Each random instance perturbs every discriminator parameter and every
//! feature entry, re-evaluates the forward loss, and compares the numeric
//! slope with the analytic gradient.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::losses::{
    consensus_loss, image_domain_loss, instance_domain_loss, targeted_instance_loss, Discriminator,
    Domain, DomainGrid,
};
use crate::par::Exec;
use crate::saliency::{reweight_features, FeatureMap, SaliencyMatrix};

pub const FD_STEP: f64 = 1e-6;
pub const REL_TOLERANCE: f64 = 1e-5;
/// Denominator floor for the relative error, so entries whose true gradient
/// is at roundoff level are judged on absolute error instead.
pub const REL_FLOOR: f64 = 1e-3;

/// `|a - n| / max(|a|, |n|, REL_FLOOR)`.
pub fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_FLOOR)
}

/// Central difference of `loss` at `x` along every coordinate.
pub fn numeric_gradient(x: &[f64], step: f64, loss: impl Fn(&[f64]) -> f64) -> Vec<f64> {
    let mut probe = x.to_vec();
    (0..x.len())
        .map(|i| {
            let orig = probe[i];
            probe[i] = orig + step;
            let up = loss(&probe);
            probe[i] = orig - step;
            let down = loss(&probe);
            probe[i] = orig;
            (up - down) / (2.0 * step)
        })
        .collect()
}

fn max_rel(analytic: &[f64], numeric: &[f64]) -> f64 {
    assert_eq!(analytic.len(), numeric.len());
    analytic
        .iter()
        .zip(numeric)
        .map(|(a, n)| rel_err(*a, *n))
        .fold(0.0, f64::max)
}

/// A random small alignment problem.
#[derive(Debug, Clone)]
pub struct Instance {
    pub features: Vec<FeatureMap>,
    pub saliency: Vec<SaliencyMatrix>,
    pub disc: Discriminator,
    pub domain: Domain,
    pub lambda_d: f64,
}

impl Instance {
    /// Channels in `1..=8`, grids up to 4x4, one to three scales.
    pub fn random(rng: &mut impl Rng, lambda_d: f64) -> Self {
        let channels = rng.random_range(1..=8);
        let scales = rng.random_range(1..=3);
        let mut features = Vec::with_capacity(scales);
        let mut saliency = Vec::with_capacity(scales);
        for s in 0..scales {
            let stride = 8u32 << s;
            let h = rng.random_range(1..=4);
            let w = rng.random_range(1..=4);
            let data = (0..channels * h * w).map(|_| rng.random_range(-1.0..1.0)).collect();
            features.push(FeatureMap::new(stride, channels, h, w, data).expect("finite"));
            let m = (0..h * w)
                .map(|_| if rng.random_bool(0.3) { 0.0 } else { rng.random::<f64>() })
                .collect();
            saliency.push(SaliencyMatrix::new(stride, h, w, m).expect("in range"));
        }
        let n = scales * Discriminator::params_per_scale(channels);
        let flat: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
        let disc = Discriminator::from_flat(channels, scales, &flat).expect("sized");
        let domain = if rng.random_bool(0.5) { Domain::Source } else { Domain::Target };
        Instance {
            features,
            saliency,
            disc,
            domain,
            lambda_d,
        }
    }

    fn flat_features(&self) -> Vec<f64> {
        self.features.iter().flat_map(|f| f.data.iter().copied()).collect()
    }

    fn unflatten(&self, flat: &[f64]) -> Vec<FeatureMap> {
        let mut off = 0;
        self.features
            .iter()
            .map(|f| {
                let n = f.data.len();
                let out = FeatureMap {
                    data: flat[off..off + n].to_vec(),
                    ..f.clone()
                };
                off += n;
                out
            })
            .collect()
    }

    fn reweighted(&self, features: &[FeatureMap]) -> Vec<FeatureMap> {
        features
            .iter()
            .zip(&self.saliency)
            .map(|(f, m)| reweight_features(f, m).expect("shapes"))
            .collect()
    }

    fn disc_from(&self, flat: &[f64]) -> Discriminator {
        Discriminator::from_flat(self.disc.channels, self.disc.scales.len(), flat).expect("sized")
    }

    fn grids(&self) -> Vec<DomainGrid> {
        DomainGrid::for_features(&self.features, self.domain)
    }
}

/// Worst relative errors observed on one instance.
#[derive(Debug, Clone, Copy, Serialize, Default, PartialEq)]
pub struct CaseResult {
    pub image_params: f64,
    pub image_features: f64,
    /// Reversed feature gradient vs finite differences of `-lambda_d * loss`.
    pub image_grl_composite: f64,
    pub instance_params: f64,
    /// Gradient w.r.t. reweighted features.
    pub instance_reweighted: f64,
    /// Gradient w.r.t. raw features, through the saliency reweighting.
    pub instance_features: f64,
    pub consensus_params: f64,
    pub consensus_features: f64,
    pub consensus_reweighted: f64,
    /// Reversed gradients equal `-lambda_d` times the loss gradients bit for bit.
    pub grl_exact: bool,
    /// Raw-feature instance gradients equal `(1 + m)` times the reweighted-feature ones bit for bit.
    pub amplification_exact: bool,
}

impl CaseResult {
    pub fn worst(&self) -> f64 {
        [
            self.image_params,
            self.image_features,
            self.image_grl_composite,
            self.instance_params,
            self.instance_reweighted,
            self.instance_features,
            self.consensus_params,
            self.consensus_features,
            self.consensus_reweighted,
        ]
        .into_iter()
        .fold(0.0, f64::max)
    }

    pub fn passed(&self) -> bool {
        self.worst() < REL_TOLERANCE && self.grl_exact && self.amplification_exact
    }
}

pub fn check_instance(inst: &Instance) -> CaseResult {
    let h = FD_STEP;
    let ld = inst.lambda_d;
    let grids = inst.grids();
    let disc_flat = inst.disc.to_flat();
    let feat_flat = inst.flat_features();
    let reweighted = inst.reweighted(&inst.features);
    let flatten = |v: &[Vec<f64>]| v.iter().flatten().copied().collect::<Vec<f64>>();
    let exact_neg = |rev: &[Vec<f64>], raw: &[Vec<f64>]| {
        rev.iter()
            .flatten()
            .zip(raw.iter().flatten())
            .all(|(r, g)| r.to_bits() == (-ld * g).to_bits())
    };

    // image level
    let img = image_domain_loss(&inst.features, &inst.disc, inst.domain, ld).expect("shapes");
    let num_p = numeric_gradient(&disc_flat, h, |p| {
        image_domain_loss(&inst.features, &inst.disc_from(p), inst.domain, ld).unwrap().loss
    });
    let num_f = numeric_gradient(&feat_flat, h, |x| {
        image_domain_loss(&inst.unflatten(x), &inst.disc, inst.domain, ld).unwrap().loss
    });
    let num_grl = numeric_gradient(&feat_flat, h, |x| {
        -ld * image_domain_loss(&inst.unflatten(x), &inst.disc, inst.domain, ld).unwrap().loss
    });
    let image_params = max_rel(&img.disc_grad.to_flat(), &num_p);
    let image_features = max_rel(&flatten(&img.feature_grad), &num_f);
    let image_grl_composite = max_rel(&flatten(&img.reversed_feature_grad), &num_grl);
    let mut grl_exact = exact_neg(&img.reversed_feature_grad, &img.feature_grad);

    // instance level on reweighted features
    let ins = instance_domain_loss(&reweighted, &inst.disc, &grids, ld).expect("shapes");
    let rw_flat: Vec<f64> = reweighted.iter().flat_map(|f| f.data.iter().copied()).collect();
    let unflatten_rw = |x: &[f64]| {
        let mut off = 0;
        reweighted
            .iter()
            .map(|f| {
                let n = f.data.len();
                let out = FeatureMap { data: x[off..off + n].to_vec(), ..f.clone() };
                off += n;
                out
            })
            .collect::<Vec<_>>()
    };
    let num_p = numeric_gradient(&disc_flat, h, |p| {
        instance_domain_loss(&reweighted, &inst.disc_from(p), &grids, ld).unwrap().loss
    });
    let num_rw = numeric_gradient(&rw_flat, h, |x| {
        instance_domain_loss(&unflatten_rw(x), &inst.disc, &grids, ld).unwrap().loss
    });
    let instance_params = max_rel(&ins.disc_grad.to_flat(), &num_p);
    let instance_reweighted = max_rel(&flatten(&ins.feature_grad), &num_rw);
    grl_exact &= exact_neg(&ins.reversed_feature_grad, &ins.feature_grad);

    // instance level through the saliency reweighting
    let tgt = targeted_instance_loss(&inst.features, &inst.saliency, &inst.disc, &grids, ld).expect("shapes");
    let num_f = numeric_gradient(&feat_flat, h, |x| {
        targeted_instance_loss(&inst.unflatten(x), &inst.saliency, &inst.disc, &grids, ld)
            .unwrap()
            .loss
    });
    let instance_features = max_rel(&flatten(&tgt.feature_grad), &num_f);
    grl_exact &= exact_neg(&tgt.reversed_feature_grad, &tgt.feature_grad);
    let amplification_exact = tgt
        .feature_grad
        .iter()
        .zip(&ins.feature_grad)
        .zip(&inst.saliency)
        .all(|((gf, gfb), m)| {
            let plane = m.height * m.width;
            gf.iter()
                .zip(gfb)
                .enumerate()
                .all(|(i, (a, b))| a.to_bits() == ((1.0 + m.data[i % plane]) * b).to_bits())
        });

    // consensus
    let con = consensus_loss(&inst.features, &reweighted, &inst.disc).expect("shapes");
    let num_p = numeric_gradient(&disc_flat, h, |p| {
        consensus_loss(&inst.features, &reweighted, &inst.disc_from(p)).unwrap().loss
    });
    let num_f = numeric_gradient(&feat_flat, h, |x| {
        consensus_loss(&inst.unflatten(x), &reweighted, &inst.disc).unwrap().loss
    });
    let num_rw = numeric_gradient(&rw_flat, h, |x| {
        consensus_loss(&inst.features, &unflatten_rw(x), &inst.disc).unwrap().loss
    });
    let consensus_params = max_rel(&con.disc_grad.to_flat(), &num_p);
    let consensus_features = max_rel(&flatten(&con.grad_features), &num_f);
    let consensus_reweighted = max_rel(&flatten(&con.grad_reweighted), &num_rw);

    CaseResult {
        image_params,
        image_features,
        image_grl_composite,
        instance_params,
        instance_reweighted,
        instance_features,
        consensus_params,
        consensus_features,
        consensus_reweighted,
        grl_exact,
        amplification_exact,
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct GradcheckReport {
    pub seed: u64,
    pub instances: usize,
    pub step: f64,
    pub tolerance: f64,
    pub max_rel_err: f64,
    pub grl_exact: bool,
    pub amplification_exact: bool,
    pub passed: bool,
    pub cases: Vec<CaseResult>,
}

/// Runs `instances` random cases. Instance `i` is drawn from its own
/// ChaCha8 stream `i` under `seed`, so results do not depend on `exec`.
pub fn run_suite(instances: usize, seed: u64, lambda_d: f64, exec: Exec) -> GradcheckReport {
    let cases = exec.map_range(instances, |i| {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(i as u64);
        check_instance(&Instance::random(&mut rng, lambda_d))
    });
    let max_rel_err = cases.iter().map(CaseResult::worst).fold(0.0, f64::max);
    let grl_exact = cases.iter().all(|c| c.grl_exact);
    let amplification_exact = cases.iter().all(|c| c.amplification_exact);
    GradcheckReport {
        seed,
        instances,
        step: FD_STEP,
        tolerance: REL_TOLERANCE,
        max_rel_err,
        grl_exact,
        amplification_exact,
        passed: cases.iter().all(CaseResult::passed),
        cases,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn numeric_gradient_of_quadratic() {
        let g = numeric_gradient(&[1.0, -2.0], 1e-6, |x| x[0] * x[0] + 3.0 * x[1]);
        assert!((g[0] - 2.0).abs() < 1e-8);
        assert!((g[1] - 3.0).abs() < 1e-8);
    }

    #[test]
    fn detects_a_wrong_gradient() {
        assert!(rel_err(1.0, 1.1) > REL_TOLERANCE);
        assert!(rel_err(1e-9, 2e-9) < REL_TOLERANCE);
    }

    #[test]
    fn small_suite_passes() {
        let r = run_suite(8, 99, 0.1, Exec::Sequential);
        assert!(r.passed, "max rel err {}", r.max_rel_err);
    }
}
