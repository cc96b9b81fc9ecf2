//! Executable equivariance checks: attention, commutation, layers, whole
//! networks, and synchrony of group-axis responses.

use std::fmt::Write as _;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::attention::{build_block_circulant, build_circulant, co_attentive_map, compact_attend, AttentionKind, AttentionParams};
use crate::error::{Error, Result};
use crate::gconv::{act_on_feature, group_conv, lift_conv, FeatureMap, GConvParams};
use crate::group::{act_on_input, matmul, permutation_matrix, permute_vector, GroupElement, GroupKind, GroupSpec};
use crate::model::{build_model, ArchName, ArchSpec, ConvBlock, Layer, Model};
use crate::tensor::Tensor;

pub const TOL_ALGEBRA: f64 = 1e-12;
pub const TOL_LAYER: f64 = 1e-10;
pub const TOL_NETWORK: f64 = 1e-6;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckReport {
    pub check: String,
    pub trials: usize,
    pub max_dev: f64,
    pub tol: f64,
    /// `max_dev <= tol`.
    pub pass: bool,
    /// Negative controls are expected to fail.
    pub expected: bool,
    /// Set when the check could not reach a verdict (e.g. degenerate input).
    pub inconclusive: bool,
    pub counterexample: Option<String>,
}

impl CheckReport {
    fn new(check: impl Into<String>, trials: usize, max_dev: f64, tol: f64, expected: bool) -> Self {
        Self {
            check: check.into(),
            trials,
            max_dev,
            tol,
            pass: max_dev <= tol,
            expected,
            inconclusive: false,
            counterexample: None,
        }
    }

    /// Marks the check as a negative control.
    pub fn negative(mut self) -> Self {
        self.expected = false;
        self
    }

    /// The outcome matches what the suite expects.
    pub fn as_expected(&self) -> bool {
        !self.inconclusive && self.pass == self.expected
    }
}

/// Tracks the worst deviation and where it happened.
struct Worst {
    dev: f64,
    at: Option<String>,
}

impl Worst {
    fn new() -> Self {
        Self { dev: 0.0, at: None }
    }

    fn update(&mut self, dev: f64, at: impl FnOnce() -> String) {
        if dev > self.dev || dev.is_nan() {
            self.dev = if dev.is_nan() { f64::INFINITY } else { dev };
            self.at = Some(at());
        }
    }

    fn report(self, name: impl Into<String>, trials: usize, tol: f64) -> CheckReport {
        let mut r = CheckReport::new(name, trials, self.dev, tol, true);
        if !r.pass {
            r.counterexample = self.at;
        }
        r
    }
}

fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

fn format_vec(v: &[f64]) -> String {
    let parts: Vec<String> = v.iter().map(|x| format!("{x:.6}")).collect();
    format!("[{}]", parts.join(", "))
}

/// Compares `attend(P_g x)` with `P_g attend(x)` for random `x` and every
/// `g`, using fixed parameters.
pub fn check_attention_equivariance(
    params: &AttentionParams,
    spec: &GroupSpec,
    trials: usize,
    tol: f64,
    seed: u64,
) -> Result<CheckReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let matrix = params.materialize();
    let mut worst = Worst::new();
    for t in 0..trials {
        attention_trial(&matrix, spec, &mut rng, &mut worst, t)?;
    }
    Ok(worst.report(format!("{:?} attention equivariance on {spec}", params.kind()), trials, tol))
}

/// Same as [`check_attention_equivariance`] but draws fresh parameters for
/// every trial.
pub fn check_attention_equivariance_random(
    kind: AttentionKind,
    spec: &GroupSpec,
    trials: usize,
    tol: f64,
    seed: u64,
) -> Result<CheckReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = spec.group_size();
    let mut worst = Worst::new();
    for t in 0..trials {
        let params = AttentionParams::init(kind, n, 1.0, &mut rng)?;
        attention_trial(&params.materialize(), spec, &mut rng, &mut worst, t)?;
    }
    Ok(worst.report(format!("{kind:?} attention equivariance on {spec} (random params)"), trials, tol))
}

fn attention_trial(matrix: &Tensor, spec: &GroupSpec, rng: &mut ChaCha8Rng, worst: &mut Worst, trial: usize) -> Result<()> {
    let n = spec.group_size();
    let x = Tensor::randn(&[n], 1.0, rng);
    let y = compact_attend(&x, matrix)?;
    for g in spec.elements() {
        let gx = Tensor::from_vec(permute_vector(g, x.data(), spec));
        let lhs = compact_attend(&gx, matrix)?;
        let rhs = permute_vector(g, y.data(), spec);
        let dev = max_abs_diff(lhs.data(), &rhs);
        worst.update(dev, || format!("trial {trial}, g={g}, x={}", format_vec(x.data())));
    }
    Ok(())
}

/// Verifies `P_g Ã = Ã P_g` for every `g`.
pub fn check_commutation(a_tilde: &Tensor, spec: &GroupSpec) -> Result<CheckReport> {
    let n = spec.group_size();
    if a_tilde.shape() != [n, n] {
        return Err(Error::Shape(format!("matrix {:?} for a group of order {n}", a_tilde.shape())));
    }
    let mut worst = Worst::new();
    for g in spec.elements() {
        let p = permutation_matrix(g, spec)?;
        let dev = matmul(&p, a_tilde)?.max_abs_diff(&matmul(a_tilde, &p)?);
        worst.update(dev, || format!("g={g}"));
    }
    Ok(worst.report(format!("commutation on {spec}"), n, TOL_ALGEBRA))
}

/// Input action: lattice-only on single-channel-group maps, full codomain
/// action otherwise.
fn act(g: GroupElement, fmap: &FeatureMap, spec: &GroupSpec) -> Result<FeatureMap> {
    if fmap.spec().kind() == GroupKind::Trans {
        FeatureMap::new(act_on_input(g, fmap.data(), spec)?, fmap.spec().clone())
    } else {
        act_on_feature(g, fmap)
    }
}

/// Compares `layer(T_g x)` with `T_g layer(x)` on random inputs of the given
/// shape and group, for every `g` in `spec`.
pub fn check_layer_equivariance(
    name: &str,
    layer: impl Fn(&FeatureMap) -> Result<FeatureMap>,
    input_spec: &GroupSpec,
    input_shape: &[usize],
    spec: &GroupSpec,
    trials: usize,
    tol: f64,
    seed: u64,
) -> Result<CheckReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst = Worst::new();
    for t in 0..trials {
        let x = FeatureMap::new(Tensor::randn(input_shape, 1.0, &mut rng), input_spec.clone())?;
        let y = layer(&x)?;
        for g in spec.elements() {
            let lhs = layer(&act(g, &x, spec)?)?;
            let rhs = act(g, &y, spec)?;
            let dev = lhs.data().max_abs_diff(rhs.data());
            worst.update(dev, || format!("trial {t}, g={g}"));
        }
    }
    Ok(worst.report(name, trials, tol))
}

fn random_images(trials: usize, side: usize, rng: &mut ChaCha8Rng) -> Tensor {
    Tensor::randn(&[trials, 1, side, side], 1.0, rng)
}

/// Logit invariance of a whole model under every element of `spec`.
pub fn check_network_invariance(model: &Model, spec: &GroupSpec, trials: usize, side: usize, tol: f64, seed: u64) -> Result<CheckReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let x = random_images(trials, side, &mut rng);
    let base = model.forward(&x)?;
    let classes = base.shape()[1];
    let mut worst = Worst::new();
    for g in spec.elements() {
        let out = model.forward(&act_on_input(g, &x, spec)?)?;
        for (t, (a, b)) in out.data().chunks(classes).zip(base.data().chunks(classes)).enumerate() {
            worst.update(max_abs_diff(a, b), || format!("sample {t}, g={g}"));
        }
    }
    Ok(worst.report(format!("{} logit invariance on {spec}", model.arch.name), trials, tol))
}

/// Equivariance of the model truncated just before orientation pooling.
pub fn check_stack_equivariance(model: &Model, trials: usize, side: usize, tol: f64, seed: u64) -> Result<CheckReport> {
    let spec = model.spec();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let x = random_images(trials, side, &mut rng);
    let base = model.equivariant_features(&x)?;
    let mut worst = Worst::new();
    for g in spec.elements() {
        let lhs = model.equivariant_features(&act_on_input(g, &x, &spec)?)?;
        let rhs = act_on_feature(g, &base)?;
        worst.update(lhs.data().max_abs_diff(rhs.data()), || format!("g={g}"));
    }
    Ok(worst.report(format!("{} feature-stack equivariance", model.arch.name), trials, tol))
}

/// Invariance and, for group models, stack equivariance.
pub fn check_network_equivariance(model: &Model, spec: &GroupSpec, trials: usize, side: usize, tol: f64, seed: u64) -> Result<Vec<CheckReport>> {
    let mut out = Vec::new();
    if model.spec().kind() != GroupKind::Trans {
        out.push(check_stack_equivariance(model, trials, side, tol, seed)?);
    }
    out.push(check_network_invariance(model, spec, trials, side, tol, seed)?);
    Ok(out)
}

/// Result of aligning one channel's group-axis responses.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Alignment {
    Unique(usize),
    Ambiguous,
}

/// Finds the element `h` that best explains `moved[k] ≈ base[h⁻¹k]` for one
/// channel of two `[G,Λ,H,W]` samples (sum of squared differences, all `h`).
fn align_channel(base: &[f64], moved: &[f64], spec: &GroupSpec, lam: usize, channel: usize, plane: usize) -> Alignment {
    let n = spec.group_size();
    fn plane_of(data: &[f64], at: usize, plane: usize) -> &[f64] {
        &data[at * plane..(at + 1) * plane]
    }
    let slice = |data, k: usize| plane_of(data, k * lam + channel, plane);
    let mut scores: Vec<f64> = (0..n)
        .map(|h| {
            let hi = spec.inverse_index(h);
            (0..n)
                .map(|k| {
                    slice(moved, k)
                        .iter()
                        .zip(slice(base, spec.mul_index(hi, k)))
                        .map(|(a, b)| (a - b).powi(2))
                        .sum::<f64>()
                })
                .sum()
        })
        .collect();
    let best = (0..n).fold(0, |b, h| if scores[h] < scores[b] { h } else { b });
    let min = scores[best];
    scores.remove(best);
    let runner_up = scores.iter().copied().fold(f64::INFINITY, f64::min);
    let scale: f64 = slice_energy(base);
    if runner_up - min <= 1e-12 * scale.max(1e-300) {
        Alignment::Ambiguous
    } else {
        Alignment::Unique(best)
    }
}

fn slice_energy(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum()
}

/// Per channel, recovers the group element relating the response to a
/// transformed image with the response to the original (after undoing the
/// spatial part), both before and after attention. Passes when every channel
/// recovers exactly the applied element; degenerate responses make the
/// report inconclusive.
pub fn check_synchrony(block: &ConvBlock, images: &Tensor, spec: &GroupSpec) -> Result<CheckReport> {
    let trials = images.shape()[0];
    let mut mismatches = 0usize;
    let mut ambiguous = 0usize;
    let mut example = None;
    let x = FeatureMap::from_images(images)?;
    let (corr, att, _) = block.forward_parts(&x)?;
    let stages: [(&str, &FeatureMap); 2] = [("before attention", &corr), ("after attention", &att)];
    for g in spec.elements() {
        let moved_x = FeatureMap::from_images(&act_on_input(g, images, spec)?)?;
        let (mc, ma, _) = block.forward_parts(&moved_x)?;
        let gi = spec.index(g);
        for ((stage, base), moved) in stages.iter().zip([&mc, &ma]) {
            // undo the spatial part only; the group axis keeps its permutation
            let back = act_on_input(spec.inverse(g), moved.data(), spec)?;
            let (gs, lam, h, w) = (base.group_size(), base.channels(), base.height(), base.width());
            let per = gs * lam * h * w;
            for b in 0..trials {
                let bs = &base.data().data()[b * per..(b + 1) * per];
                let ms = &back.data()[b * per..(b + 1) * per];
                for l in 0..lam {
                    match align_channel(bs, ms, spec, lam, l, h * w) {
                        Alignment::Unique(found) if found == gi => {}
                        Alignment::Unique(found) => {
                            mismatches += 1;
                            example.get_or_insert_with(|| {
                                format!("{stage}, image {b}, g={g}, channel {l} recovered {}", spec.element(found))
                            });
                        }
                        Alignment::Ambiguous => ambiguous += 1,
                    }
                }
            }
        }
    }
    let mut r = CheckReport::new(format!("synchrony on {spec}"), trials, mismatches as f64, 0.0, true);
    r.counterexample = example;
    if ambiguous > 0 && mismatches == 0 {
        r.inconclusive = true;
        r.counterexample = Some(format!("{ambiguous} channel alignments were ambiguous"));
    }
    Ok(r)
}

fn random_gconv(out_ch: usize, in_ch: usize, in_group: usize, k: usize, rng: &mut ChaCha8Rng) -> Result<GConvParams> {
    GConvParams::new(
        Tensor::randn(&[out_ch, in_ch, in_group, k, k], 1.0, rng),
        Tensor::randn(&[out_ch], 1.0, rng),
    )
}

/// Trial counts and image sizes for [`run_suite`].
#[derive(Clone, Copy, Debug)]
pub struct SuiteSize {
    pub attention_trials: usize,
    pub layer_trials: usize,
    pub network_trials: usize,
    pub synchrony_images: usize,
}

impl SuiteSize {
    pub const FULL: Self = Self {
        attention_trials: 10_000,
        layer_trials: 100,
        network_trials: 100,
        synchrony_images: 50,
    };
    pub const QUICK: Self = Self {
        attention_trials: 200,
        layer_trials: 4,
        network_trials: 4,
        synchrony_images: 4,
    };
}

/// The full battery for one group (`p4` or `p4m`).
pub fn run_suite(group: GroupKind, seed: u64, size: SuiteSize) -> Result<Vec<CheckReport>> {
    let (spec, kind, attended, base) = match group {
        GroupKind::Rot => (GroupSpec::p4(), AttentionKind::Circulant, ArchName::AP4Cnn, ArchName::P4Cnn),
        GroupKind::RotMirror => (GroupSpec::p4m(), AttentionKind::BlockCirculant, ArchName::AP4mCnn, ArchName::P4mCnn),
        GroupKind::Trans => return Err(Error::InvalidArgument("the suite needs a rotation group (p4 or p4m)".into())),
    };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut next_seed = || rng.gen::<u64>();
    let n = spec.group_size();
    let mut out = Vec::new();

    // attention algebra
    out.push(check_attention_equivariance_random(kind, &spec, size.attention_trials, TOL_ALGEBRA, next_seed())?);
    if group == GroupKind::Rot {
        out.push(check_attention_equivariance_random(kind, &GroupSpec::rot(8)?, size.attention_trials, TOL_ALGEBRA, next_seed())?);
    }
    let mut full_rng = ChaCha8Rng::seed_from_u64(next_seed());
    let full = AttentionParams::full(Tensor::randn(&[n, n], 1.0, &mut full_rng))?;
    out.push(check_attention_equivariance(&full, &spec, 100, 1e-3, next_seed())?.negative());

    let mut mat_rng = ChaCha8Rng::seed_from_u64(next_seed());
    let structured = match kind {
        AttentionKind::BlockCirculant => build_block_circulant(
            &Tensor::randn(&[n / 2], 1.0, &mut mat_rng),
            &Tensor::randn(&[n / 2], 1.0, &mut mat_rng),
        )?,
        _ => build_circulant(&Tensor::randn(&[n], 1.0, &mut mat_rng))?,
    };
    let mut c = check_commutation(&structured, &spec)?;
    c.check = format!("{kind:?} {}", c.check);
    out.push(c);
    let mut perturbed = structured.clone();
    perturbed.set(&[0, 1], perturbed.get(&[0, 1]) + 1e-2);
    let mut c = check_commutation(&perturbed, &spec)?.negative();
    c.check = format!("perturbed {kind:?} {}", c.check);
    out.push(c);

    // layers
    let side = 9;
    let width = 4;
    let mut layer_rng = ChaCha8Rng::seed_from_u64(next_seed());
    let lift = random_gconv(width, 1, 1, 3, &mut layer_rng)?;
    let gconv = random_gconv(width, width, n, 3, &mut layer_rng)?;
    let attn: Vec<AttentionParams> = (0..width)
        .map(|_| AttentionParams::init(kind, n, 1.0, &mut layer_rng))
        .collect::<Result<_>>()?;
    let trans = GroupSpec::trans();
    let t = size.layer_trials;
    out.push(check_layer_equivariance(
        &format!("lift_conv on {spec}"),
        |x| lift_conv(x, &lift, &spec, 1),
        &trans,
        &[1, 1, 1, side, side],
        &spec,
        t,
        TOL_LAYER,
        next_seed(),
    )?);
    out.push(check_layer_equivariance(
        &format!("group_conv on {spec}"),
        |x| group_conv(x, &gconv, 1),
        &spec,
        &[1, n, width, side, side],
        &spec,
        t,
        TOL_LAYER,
        next_seed(),
    )?);
    out.push(check_layer_equivariance(
        &format!("co-attentive group_conv on {spec}"),
        |x| co_attentive_map(&group_conv(x, &gconv, 1)?, &attn),
        &spec,
        &[1, n, width, side, side],
        &spec,
        t,
        TOL_LAYER,
        next_seed(),
    )?);
    // bias that differs per group channel breaks the weight tying
    let untied: Vec<f64> = (0..n).map(|i| i as f64 * 0.1).collect();
    out.push(
        check_layer_equivariance(
            &format!("group_conv with untied bias on {spec}"),
            |x| {
                let mut d = group_conv(x, &gconv, 1)?.into_data();
                let per = d.len() / (d.shape()[0] * n);
                for (i, chunk) in d.data_mut().chunks_mut(per).enumerate() {
                    chunk.iter_mut().for_each(|v| *v += untied[i % n]);
                }
                FeatureMap::new(d, spec.clone())
            },
            &spec,
            &[1, n, width, side, side],
            &spec,
            t,
            TOL_LAYER,
            next_seed(),
        )?
        .negative(),
    );

    // networks
    let net_side = 12;
    let nt = size.network_trials;
    for name in [base, attended] {
        let model = build_model(&ArchSpec::desk(name), next_seed())?;
        out.extend(check_network_equivariance(&model, &spec, nt, net_side, TOL_NETWORK, next_seed())?);
    }
    let z2 = build_model(&ArchSpec::desk(ArchName::Z2Cnn), next_seed())?;
    out.push(check_network_invariance(&z2, &spec, nt, net_side, TOL_NETWORK, next_seed())?.negative());

    // synchrony on the first block of the attended model
    let model = build_model(&ArchSpec::desk(attended), next_seed())?;
    if let Some(Layer::Conv(block)) = model.layers.first() {
        let mut img_rng = ChaCha8Rng::seed_from_u64(next_seed());
        let images = Tensor::randn(&[size.synchrony_images, 1, side, side], 1.0, &mut img_rng);
        out.push(check_synchrony(block, &images, &spec)?);
    }
    Ok(out)
}

/// Fixed-width plain-text rendering of a batch of reports.
pub fn render_table(reports: &[CheckReport]) -> String {
    let width = reports.iter().map(|r| r.check.len()).max().unwrap_or(5).max(5);
    let mut s = String::new();
    writeln!(s, "{:<width$}  {:>7}  {:>10}  {:>8}  {:<8}  verdict", "check", "trials", "max_dev", "tol", "expect").unwrap();
    for r in reports {
        let verdict = if r.inconclusive {
            "INCONCLUSIVE"
        } else if r.as_expected() {
            "ok"
        } else {
            "UNEXPECTED"
        };
        writeln!(
            s,
            "{:<width$}  {:>7}  {:>10.3e}  {:>8.0e}  {:<8}  {verdict}",
            r.check,
            r.trials,
            r.max_dev,
            r.tol,
            if r.expected { "pass" } else { "fail" },
        )
        .unwrap();
        if let (Some(c), false) = (&r.counterexample, r.as_expected()) {
            writeln!(s, "    counterexample: {c}").unwrap();
        }
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn circulant_and_block_circulant_pass_at_algebra_tolerance() {
        let r = check_attention_equivariance_random(AttentionKind::Circulant, &GroupSpec::p4(), 300, TOL_ALGEBRA, 1).unwrap();
        assert!(r.pass, "{r:?}");
        let r = check_attention_equivariance_random(AttentionKind::BlockCirculant, &GroupSpec::p4m(), 300, TOL_ALGEBRA, 2).unwrap();
        assert!(r.pass, "{r:?}");
    }

    #[test]
    fn full_attention_is_caught() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let full = AttentionParams::full(Tensor::randn(&[4, 4], 1.0, &mut rng)).unwrap();
        let r = check_attention_equivariance(&full, &GroupSpec::p4(), 100, 1e-3, 4).unwrap();
        assert!(!r.pass && r.max_dev > 1e-3);
        assert!(r.counterexample.is_some());
    }

    #[test]
    fn identity_attention_commutes_with_everything() {
        let id = AttentionParams::identity(AttentionKind::Full, 8).unwrap().materialize();
        assert!(check_commutation(&id, &GroupSpec::p4m()).unwrap().pass);
    }

    #[test]
    fn commutation_exposes_perturbation() {
        let mut c = build_circulant(&Tensor::from_vec(vec![1.0, 2.0, 3.0, 4.0])).unwrap();
        assert_eq!(check_commutation(&c, &GroupSpec::p4()).unwrap().max_dev, 0.0);
        c.set(&[2, 0], c.get(&[2, 0]) + 1e-2);
        let r = check_commutation(&c, &GroupSpec::p4()).unwrap();
        assert!(!r.pass);
        assert!(r.max_dev >= 1e-2 - 1e-15);
    }

    #[test]
    fn report_pass_flag_follows_tolerance() {
        let r = CheckReport::new("x", 1, 1e-9, 1e-10, true);
        assert!(!r.pass && !r.as_expected());
        let r = CheckReport::new("x", 1, 1e-9, 1e-10, true).negative();
        assert!(r.as_expected());
    }

    #[test]
    fn synchrony_identity_rotation_recovers_zero() {
        let model = build_model(&ArchSpec::desk(ArchName::AP4Cnn), 5).unwrap();
        let Layer::Conv(block) = &model.layers[0] else { panic!() };
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let images = Tensor::randn(&[2, 1, 9, 9], 1.0, &mut rng);
        let r = check_synchrony(block, &images, &GroupSpec::p4()).unwrap();
        assert!(r.pass && !r.inconclusive, "{r:?}");
    }

    #[test]
    fn synchrony_on_blank_image_is_inconclusive() {
        let model = build_model(&ArchSpec::desk(ArchName::P4Cnn), 5).unwrap();
        let Layer::Conv(block) = &model.layers[0] else { panic!() };
        let r = check_synchrony(block, &Tensor::zeros(&[1, 1, 9, 9]), &GroupSpec::p4()).unwrap();
        assert!(r.inconclusive);
        assert!(!r.as_expected());
    }

    #[test]
    fn quick_suite_matches_expectations() {
        for group in [GroupKind::Rot, GroupKind::RotMirror] {
            let reports = run_suite(group, 7, SuiteSize::QUICK).unwrap();
            let table = render_table(&reports);
            assert!(reports.iter().all(CheckReport::as_expected), "{table}");
            assert!(reports.iter().any(|r| !r.expected));
        }
        assert!(run_suite(GroupKind::Trans, 0, SuiteSize::QUICK).is_err());
    }
}
