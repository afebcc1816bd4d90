//! Guided Grad-CAM attributions for the affect classifiers and their
//! aggregation into per-joint contributions and body-part curves.

mod report;

use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Mode, NodeId, ReluRule, Tensor};
use crate::classify::{argmax, NetClassifier, NetInput};
use crate::error::{Error, Result};
use crate::mocap::{joint, SkeletonTopology, AXES, NUM_JOINTS};
use crate::model::{Branch, ModelParams};

pub use report::{emit_attribution_report, write_attribution_maps};

/// A classifier whose decisions can be explained: a CNN on raw cycles, or a
/// dense head on affect codes behind the affect encoder.
#[derive(Clone, Copy, Debug)]
pub enum Explainable<'a> {
    Cnn(&'a NetClassifier),
    Latent {
        ae: &'a ModelParams,
        head: &'a NetClassifier,
    },
}

struct Forward {
    graph: Graph,
    input: NodeId,
    cam: Option<NodeId>,
    logits: NodeId,
    n_classes: usize,
}

impl Explainable<'_> {
    fn input_shape(&self) -> (usize, usize) {
        match self {
            Explainable::Cnn(net) => match net.input {
                NetInput::Cycle { channels, len } => (channels, len),
                NetInput::Vector { dim } => (dim, 1),
            },
            Explainable::Latent { ae, .. } => (ae.config.input_channels, ae.config.input_len),
        }
    }

    fn forward(&self, x: &Tensor) -> Result<Forward> {
        let (c, t) = self.input_shape();
        if x.shape() != [c, t] {
            return Err(Error::invalid(format!(
                "expected a {c}x{t} cycle, got {:?}",
                x.shape()
            )));
        }
        let mut graph = Graph::new();
        let shape: &[usize] = match self {
            Explainable::Cnn(NetClassifier {
                input: NetInput::Vector { .. },
                ..
            }) => &[1, c],
            _ => &[1, c, t],
        };
        let input = graph.input(x.clone().reshape(shape)?)?;
        let (cam, logits, n_classes) = match self {
            Explainable::Cnn(net) => {
                let nodes = net.logits_graph(&mut graph, input, Mode::Eval, 0, &mut Vec::new())?;
                (nodes.last_conv, nodes.logits, net.n_classes)
            }
            Explainable::Latent { ae, head } => {
                let enc = ae.encoder_graph(
                    &mut graph,
                    Branch::Affect,
                    input,
                    Mode::Eval,
                    0,
                    &mut Vec::new(),
                )?;
                let nodes =
                    head.logits_graph(&mut graph, enc.codes, Mode::Eval, 0, &mut Vec::new())?;
                (Some(enc.last_conv), nodes.logits, head.n_classes)
            }
        };
        Ok(Forward {
            graph,
            input,
            cam,
            logits,
            n_classes,
        })
    }

    /// Class scores (logits) for one cycle.
    pub fn logits(&self, x: &Tensor) -> Result<Vec<f64>> {
        let f = self.forward(x)?;
        Ok(f.graph.value(f.logits).data().to_vec())
    }
}

fn one_hot(f: &Forward, class: usize) -> Result<Tensor> {
    if class >= f.n_classes {
        return Err(Error::invalid(format!(
            "class {class} outside {} classes",
            f.n_classes
        )));
    }
    let mut seed = Tensor::zeros(&[1, f.n_classes]);
    seed.data_mut()[class] = 1.0;
    Ok(seed)
}

fn cam_from(f: &Forward, class: usize) -> Result<Vec<f64>> {
    let cam = f
        .cam
        .ok_or_else(|| Error::UnsupportedModel("Grad-CAM needs a convolutional layer".into()))?;
    let tape = f
        .graph
        .backprop(f.logits, &one_hot(f, class)?, ReluRule::Standard)?;
    let grad = tape.get_or_zeros(&f.graph, cam);
    let a = f.graph.value(cam);
    let (ch, t) = (a.shape()[1], a.shape()[2]);
    let weights: Vec<f64> = (0..ch)
        .map(|c| grad.data()[c * t..(c + 1) * t].iter().sum::<f64>() / t as f64)
        .collect();
    Ok((0..t)
        .map(|k| {
            let v: f64 = (0..ch).map(|c| weights[c] * a.data()[c * t + k]).sum();
            v.max(0.0)
        })
        .collect())
}

/// Coarse class-activation map over the last conv layer's time axis.
pub fn grad_cam(model: Explainable, x: &Tensor, class: usize) -> Result<Vec<f64>> {
    cam_from(&model.forward(x)?, class)
}

/// Linear interpolation of `coarse` onto `len` points with both ends aligned.
pub fn upsample_linear(coarse: &[f64], len: usize) -> Vec<f64> {
    match coarse.len() {
        0 => vec![0.0; len],
        1 => vec![coarse[0]; len],
        n => (0..len)
            .map(|t| {
                let pos = if len > 1 {
                    t as f64 * (n - 1) as f64 / (len - 1) as f64
                } else {
                    0.0
                };
                let i = (pos.floor() as usize).min(n - 2);
                let w = pos - i as f64;
                // Skip the zero-weight neighbour so masked regions stay exactly zero.
                if w == 0.0 {
                    coarse[i]
                } else if w == 1.0 {
                    coarse[i + 1]
                } else {
                    coarse[i] * (1.0 - w) + coarse[i + 1] * w
                }
            })
            .collect(),
    }
}

/// Attribution values for one sample, `frames x signals`.
#[derive(Clone, Debug, PartialEq)]
pub struct AttributionMap {
    pub values: Tensor,
    pub predicted: usize,
    pub truth: usize,
    pub correct: bool,
}

impl AttributionMap {
    pub fn frames(&self) -> usize {
        self.values.shape()[0]
    }

    pub fn signals(&self) -> usize {
        self.values.shape()[1]
    }

    pub fn at(&self, frame: usize, signal: usize) -> f64 {
        self.values.data()[frame * self.signals() + signal]
    }
}

/// Guided-backprop input gradient multiplied by a coarse heatmap upsampled
/// to the input length. Returns `channels x len`.
pub fn combine_guided(gradient: &Tensor, coarse: &[f64]) -> Result<Tensor> {
    let [c, t] = gradient.shape() else {
        return Err(Error::invalid("gradient must be channels x frames"));
    };
    let (c, t) = (*c, *t);
    let cam = upsample_linear(coarse, t);
    let data = (0..c * t)
        .map(|i| gradient.data()[i] * cam[i % t])
        .collect();
    Tensor::new(vec![c, t], data)
}

fn transpose(x: &Tensor) -> Result<Tensor> {
    let (c, t) = (x.shape()[0], x.shape()[1]);
    Tensor::new(
        vec![t, c],
        (0..t * c).map(|i| x.data()[(i % c) * t + i / c]).collect(),
    )
}

/// Guided Grad-CAM map of `x` for `class`. `predicted` is filled from the
/// model's own decision and `truth` from the caller.
pub fn guided_grad_cam(
    model: Explainable,
    x: &Tensor,
    class: usize,
    truth: usize,
) -> Result<AttributionMap> {
    let f = model.forward(x)?;
    let coarse = cam_from(&f, class)?;
    let tape = f
        .graph
        .backprop(f.logits, &one_hot(&f, class)?, ReluRule::Guided)?;
    let grad = tape.get_or_zeros(&f.graph, f.input);
    let (c, t) = model.input_shape();
    let combined = combine_guided(&grad.reshape(&[c, t])?, &coarse)?;
    if !combined.is_finite() {
        return Err(Error::NonFinite("attribution map".into()));
    }
    let predicted = argmax(f.graph.value(f.logits).data());
    Ok(AttributionMap {
        values: transpose(&combined)?,
        predicted,
        truth,
        correct: predicted == truth,
    })
}

/// Explains every cycle for the class the model predicts for it.
pub fn explain_all(
    model: Explainable,
    cycles: &[&Tensor],
    truths: &[usize],
) -> Result<Vec<AttributionMap>> {
    if cycles.len() != truths.len() {
        return Err(Error::invalid("one truth label per cycle is required"));
    }
    let idx: Vec<usize> = (0..cycles.len()).collect();
    crate::parallel::try_map(&idx, |&i| {
        let predicted = argmax(&model.logits(cycles[i])?);
        guided_grad_cam(model, cycles[i], predicted, truths[i])
    })
}

/// Min-max normalization of absolute values; a constant map becomes zeros.
pub fn normalize_sample(map: &AttributionMap) -> AttributionMap {
    let abs = map.values.map(f64::abs);
    let lo = abs.data().iter().copied().fold(f64::INFINITY, f64::min);
    let hi = abs.data().iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let values = if hi > lo {
        abs.map(|v| (v - lo) / (hi - lo))
    } else {
        abs.map(|_| 0.0)
    };
    AttributionMap {
        values,
        ..map.clone()
    }
}

/// Mean of each joint's three signals over all frames.
pub fn joint_summaries(map: &AttributionMap, topology: &SkeletonTopology) -> Result<Vec<f64>> {
    let n = topology.joint_names.len();
    if map.signals() != 3 * n {
        return Err(Error::invalid(format!(
            "{} signals for {n} joints",
            map.signals()
        )));
    }
    let frames = map.frames();
    Ok((0..n)
        .map(|j| {
            let mut s = 0.0;
            for t in 0..frames {
                for a in 0..3 {
                    s += map.at(t, 3 * j + a);
                }
            }
            s / (3 * frames) as f64
        })
        .collect())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BodyGroup {
    Upper,
    Mid,
    Lower,
}

impl BodyGroup {
    pub const ALL: [BodyGroup; 3] = [BodyGroup::Upper, BodyGroup::Mid, BodyGroup::Lower];

    pub fn name(self) -> &'static str {
        match self {
            BodyGroup::Upper => "upper",
            BodyGroup::Mid => "mid",
            BodyGroup::Lower => "lower",
        }
    }

    /// Joints of the group in the default skeleton.
    pub fn joints(self) -> &'static [usize] {
        use joint::*;
        match self {
            BodyGroup::Upper => &[HEAD, TORSO, L_SHL, L_ELB, L_WRIST, R_SHL, R_ELB, R_WRIST],
            BodyGroup::Mid => &[C_HIP, L_HIP, R_HIP],
            BodyGroup::Lower => &[L_KNE, L_ANK, R_KNE, R_ANK],
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GroupCurve {
    pub group: BodyGroup,
    /// 0, 1, 2 for x, y, z.
    pub axis: usize,
    /// Share of the group's total attribution carried by this axis, in percent.
    pub share: f64,
    /// Per-frame mean over all samples of the class.
    pub all: Vec<f64>,
    /// Per-frame mean over correctly classified samples (zeros if none).
    pub correct: Vec<f64>,
}

impl GroupCurve {
    pub fn axis_name(&self) -> char {
        AXES[self.axis]
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassAttribution {
    pub class: usize,
    pub n_samples: usize,
    pub n_correct: usize,
    /// Mean normalized attribution per joint over all samples.
    pub joint_mean: Vec<f64>,
    /// Joint contributions in percent over all, correct and incorrect samples.
    pub joint_pct: Vec<f64>,
    pub joint_pct_correct: Vec<f64>,
    pub joint_pct_incorrect: Vec<f64>,
    /// Curves of the retained (group, axis) pairs.
    pub curves: Vec<GroupCurve>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GlobalAttributionReport {
    pub class_names: Vec<String>,
    pub joint_names: Vec<String>,
    pub classes: Vec<ClassAttribution>,
}

/// An axis is kept for a body group when it carries at least this share of
/// the group's attribution.
pub const AXIS_RETENTION: f64 = 0.15;

fn percentages(sums: &[f64]) -> Option<Vec<f64>> {
    let total: f64 = sums.iter().sum();
    (total > 0.0).then(|| sums.iter().map(|s| 100.0 * s / total).collect())
}

/// Aggregates normalized maps into per-class joint percentages and
/// body-part curves. Samples are grouped by their true class.
pub fn aggregate_global(
    maps: &[AttributionMap],
    class_names: &[String],
    topology: &SkeletonTopology,
) -> Result<GlobalAttributionReport> {
    let n_joints = topology.joint_names.len();
    if n_joints != NUM_JOINTS {
        return Err(Error::invalid(format!(
            "body groups are defined for {NUM_JOINTS} joints, got {n_joints}"
        )));
    }
    let frames = maps.first().map_or(0, AttributionMap::frames);
    if maps
        .iter()
        .any(|m| m.frames() != frames || m.signals() != 3 * n_joints)
    {
        return Err(Error::invalid("attribution maps differ in shape"));
    }
    let mut classes = Vec::with_capacity(class_names.len());
    for (class, name) in class_names.iter().enumerate() {
        let members: Vec<&AttributionMap> = maps.iter().filter(|m| m.truth == class).collect();
        if members.is_empty() {
            return Err(Error::invalid(format!(
                "no attribution maps for class {name}"
            )));
        }
        let mut sum_all = vec![0.0; n_joints];
        let mut sum_ok = vec![0.0; n_joints];
        let mut sum_bad = vec![0.0; n_joints];
        for m in &members {
            let s = joint_summaries(m, topology)?;
            let target = if m.correct { &mut sum_ok } else { &mut sum_bad };
            for j in 0..n_joints {
                sum_all[j] += s[j];
                target[j] += s[j];
            }
        }
        let joint_pct = percentages(&sum_all).unwrap_or_else(|| {
            log::warn!("class {name} has zero total attribution");
            vec![0.0; n_joints]
        });
        let n_correct = members.iter().filter(|m| m.correct).count();
        let curves = group_curves(&members, frames);
        classes.push(ClassAttribution {
            class,
            n_samples: members.len(),
            n_correct,
            joint_mean: sum_all.iter().map(|s| s / members.len() as f64).collect(),
            joint_pct,
            joint_pct_correct: percentages(&sum_ok).unwrap_or_else(|| vec![0.0; n_joints]),
            joint_pct_incorrect: percentages(&sum_bad).unwrap_or_else(|| vec![0.0; n_joints]),
            curves,
        });
    }
    Ok(GlobalAttributionReport {
        class_names: class_names.to_vec(),
        joint_names: topology.joint_names.clone(),
        classes,
    })
}

fn group_curves(members: &[&AttributionMap], frames: usize) -> Vec<GroupCurve> {
    let mut out = Vec::new();
    for group in BodyGroup::ALL {
        let joints = group.joints();
        let curve = |axis: usize, only_correct: bool| -> Vec<f64> {
            let picked: Vec<&&AttributionMap> = members
                .iter()
                .filter(|m| !only_correct || m.correct)
                .collect();
            if picked.is_empty() {
                return vec![0.0; frames];
            }
            let den = (picked.len() * joints.len()) as f64;
            (0..frames)
                .map(|t| {
                    picked
                        .iter()
                        .map(|m| joints.iter().map(|&j| m.at(t, 3 * j + axis)).sum::<f64>())
                        .sum::<f64>()
                        / den
                })
                .collect()
        };
        let all: Vec<Vec<f64>> = (0..3).map(|a| curve(a, false)).collect();
        let totals: Vec<f64> = all.iter().map(|c| c.iter().sum()).collect();
        let total: f64 = totals.iter().sum();
        for axis in 0..3 {
            let share = if total > 0.0 {
                totals[axis] / total
            } else {
                0.0
            };
            if share >= AXIS_RETENTION {
                out.push(GroupCurve {
                    group,
                    axis,
                    share: 100.0 * share,
                    all: all[axis].clone(),
                    correct: curve(axis, true),
                });
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::classify::NetConfig;
    use crate::model::ConvSpec;

    fn map(
        values: Vec<f64>,
        frames: usize,
        signals: usize,
        truth: usize,
        correct: bool,
    ) -> AttributionMap {
        AttributionMap {
            values: Tensor::new(vec![frames, signals], values).unwrap(),
            predicted: if correct { truth } else { truth + 1 },
            truth,
            correct,
        }
    }

    fn toy_net() -> NetClassifier {
        let cfg = NetConfig {
            conv: vec![ConvSpec::new(2, 1, 1)],
            dropout: 0.0,
            masked_channels: vec![],
            ..NetConfig::cnn()
        };
        let mut net = NetClassifier::init(
            &cfg,
            NetInput::Cycle {
                channels: 1,
                len: 3,
            },
            2,
            0,
        )
        .unwrap();
        let set = |net: &mut NetClassifier, name: &str, v: Vec<f64>| {
            let id = net.store.id(name).unwrap();
            let shape = net.store.get(id).shape().to_vec();
            *net.store.get_mut(id) = Tensor::new(shape, v).unwrap();
        };
        set(&mut net, "conv0.w", vec![1.0, -1.0]);
        set(&mut net, "out.w", vec![2.0, 1.0, 0.0, 3.0]);
        set(&mut net, "out.b", vec![0.0, 0.0]);
        net
    }

    #[test]
    fn hand_worked_grad_cam() {
        // Eval-mode IC with fresh statistics is x / sqrt(1 + eps).
        let net = toy_net();
        let k = 1.0 / (1.0 + crate::autodiff::graph::IC_EPSILON).sqrt();
        let x = Tensor::new(vec![1, 3], vec![1.0, -2.0, 3.0]).unwrap();
        // Channel 0 = relu(k x) = k[1,0,3], channel 1 = relu(-k x) = k[0,2,0].
        // Class 0 score = (2 mean(c0) + mean(c1)); d/dA = [2/3, 1/3].
        let cam = grad_cam(Explainable::Cnn(&net), &x, 0).unwrap();
        let want = [2.0 / 3.0 * k, 1.0 / 3.0 * 2.0 * k, 2.0 / 3.0 * 3.0 * k];
        for (c, w) in cam.iter().zip(want) {
            assert!((c - w).abs() < 1e-12, "{cam:?}");
        }
        // Class 1 only looks at channel 1.
        let cam = grad_cam(Explainable::Cnn(&net), &x, 1).unwrap();
        let want = [0.0, 2.0 * k, 0.0];
        for (c, w) in cam.iter().zip(want) {
            assert!((c - w).abs() < 1e-12);
        }
        assert!(grad_cam(Explainable::Cnn(&net), &x, 2).is_err());
    }

    #[test]
    fn zero_features_give_zero_heatmap() {
        let net = toy_net();
        let cam = grad_cam(Explainable::Cnn(&net), &Tensor::zeros(&[1, 3]), 0).unwrap();
        assert!(cam.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn dense_only_model_is_unsupported() {
        let net =
            NetClassifier::init(&NetConfig::latent(), NetInput::Vector { dim: 3 }, 2, 0).unwrap();
        let x = Tensor::new(vec![3, 1], vec![1.0, 2.0, 3.0]).unwrap();
        assert!(matches!(
            grad_cam(Explainable::Cnn(&net), &x, 0),
            Err(Error::UnsupportedModel(_))
        ));
    }

    #[test]
    fn upsampling_keeps_ends_and_zero_runs() {
        let up = upsample_linear(&[1.0, 3.0], 5);
        assert_eq!(up, vec![1.0, 1.5, 2.0, 2.5, 3.0]);
        let up = upsample_linear(&[1.0, 0.0, 0.0, 2.0], 10);
        // Frames strictly between coarse points 1 and 2 are exactly zero.
        assert!(up[3..=6].iter().all(|&v| v == 0.0));
    }

    #[test]
    fn normalization() {
        let m = map(vec![-2.0, 1.0, 0.5, 4.0], 2, 2, 0, true);
        let n = normalize_sample(&m);
        assert_eq!(n.values.data(), &[1.5 / 3.5, 0.5 / 3.5, 0.0, 1.0]);
        let c = normalize_sample(&map(vec![3.0; 4], 2, 2, 0, true));
        assert!(c.values.data().iter().all(|&v| v == 0.0));
        for s in [1e-6, 0.3, 7.0, 1e5] {
            let scaled = map(
                m.values.data().iter().map(|v| v * s).collect(),
                2,
                2,
                0,
                true,
            );
            assert!(normalize_sample(&scaled).values.max_abs_diff(&n.values) < 1e-12);
        }
    }

    #[test]
    fn joint_locality_and_uniform_maps() {
        let topo = SkeletonTopology::default();
        let ones = map(vec![1.0; 4 * 45], 4, 45, 0, true);
        assert!(joint_summaries(&ones, &topo)
            .unwrap()
            .iter()
            .all(|&v| v == 1.0));
        let mut v = vec![0.0; 4 * 45];
        v[3 * joint::R_KNE + 1] = 0.6;
        let s = joint_summaries(&map(v, 4, 45, 0, true), &topo).unwrap();
        for (j, x) in s.iter().enumerate() {
            assert_eq!(*x != 0.0, j == joint::R_KNE);
        }
    }

    #[test]
    fn aggregation_percentages() {
        let topo = SkeletonTopology::default();
        let names: Vec<String> = vec!["a".into(), "b".into()];
        let v: Vec<f64> = (0..2 * 45).map(|i| ((i % 45) / 3) as f64).collect();
        let m0 = map(v.clone(), 2, 45, 0, true);
        let m1 = map(v.iter().map(|x| 14.0 - x).collect(), 2, 45, 1, false);
        let r = aggregate_global(&[m0.clone(), m1], &names, &topo).unwrap();
        let s = joint_summaries(&m0, &topo).unwrap();
        let total: f64 = s.iter().sum();
        for (p, x) in r.classes[0].joint_pct.iter().zip(&s) {
            assert!((p - 100.0 * x / total).abs() < 1e-12);
        }
        for c in &r.classes {
            assert!((c.joint_pct.iter().sum::<f64>() - 100.0).abs() < 1e-6);
        }
        assert_eq!(r.classes[1].n_correct, 0);
        assert!(r.classes[1].joint_pct_correct.iter().all(|&p| p == 0.0));
        assert!(aggregate_global(&[m0], &names, &topo).is_err());
    }

    #[test]
    fn axis_retention() {
        let topo = SkeletonTopology::default();
        // Only z carries attribution, so every group keeps z alone.
        let v: Vec<f64> = (0..3 * 45)
            .map(|i| if i % 3 == 2 { 1.0 } else { 0.0 })
            .collect();
        let r = aggregate_global(&[map(v, 3, 45, 0, true)], &["a".into()], &topo).unwrap();
        let kept: Vec<(BodyGroup, usize)> = r.classes[0]
            .curves
            .iter()
            .map(|c| (c.group, c.axis))
            .collect();
        assert_eq!(
            kept,
            vec![
                (BodyGroup::Upper, 2),
                (BodyGroup::Mid, 2),
                (BodyGroup::Lower, 2)
            ]
        );
        assert!(r.classes[0].curves.iter().all(|c| c.all == vec![1.0; 3]));
    }
}
