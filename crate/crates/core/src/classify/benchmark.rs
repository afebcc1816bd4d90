use std::fmt;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::features::extract_manual_features;
use super::folds::{stratified_kfold, FoldSplit};
use super::metrics::{evaluate, mean_std, EvalReport};
use super::net::{train_net, NetClassifier, NetConfig, NetInput};
use super::shallow::{knn_classify, svm_predict, svm_train, Standardizer, SvmConfig};
use crate::autodiff::Tensor;
use crate::error::{Error, Result};
use crate::mocap::{Affect, SkeletonTopology};
use crate::model::{Branch, ModelParams};
use crate::preprocess::{frames_to_tensor, mean_limb_lengths, normalize_bones, zscore, GaitCycle};
use crate::training::LabelIndex;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum ModelKind {
    #[serde(rename = "knn-man")]
    KnnMan,
    #[serde(rename = "svm-man")]
    SvmMan,
    #[serde(rename = "svm-xyz")]
    SvmXyz,
    #[serde(rename = "cnn-xyz")]
    CnnXyz,
    #[serde(rename = "ae-xyz")]
    AeXyz,
}

impl ModelKind {
    pub const ALL: [ModelKind; 5] = [
        ModelKind::KnnMan,
        ModelKind::SvmMan,
        ModelKind::SvmXyz,
        ModelKind::CnnXyz,
        ModelKind::AeXyz,
    ];

    pub fn name(self) -> &'static str {
        match self {
            ModelKind::KnnMan => "knn-man",
            ModelKind::SvmMan => "svm-man",
            ModelKind::SvmXyz => "svm-xyz",
            ModelKind::CnnXyz => "cnn-xyz",
            ModelKind::AeXyz => "ae-xyz",
        }
    }
}

impl fmt::Display for ModelKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for ModelKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        ModelKind::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| Error::invalid(format!("unknown model {s:?}")))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BenchmarkConfig {
    pub folds: usize,
    pub knn_k: usize,
    pub svm: SvmConfig,
    pub cnn: NetConfig,
    pub latent: NetConfig,
}

impl Default for BenchmarkConfig {
    fn default() -> Self {
        Self {
            folds: 5,
            knn_k: 5,
            svm: SvmConfig::default(),
            cnn: NetConfig::cnn(),
            latent: NetConfig::latent(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelResult {
    pub model: ModelKind,
    pub per_fold: Vec<EvalReport>,
    /// Mean and std over folds of each class's accuracy.
    pub class_acc: Vec<(f64, f64)>,
    /// Mean and std over folds of the overall accuracy.
    pub accuracy: (f64, f64),
    pub macro_f1: (f64, f64),
    /// Out-of-fold prediction for every cycle.
    pub predictions: Vec<usize>,
}

impl ModelResult {
    fn new(
        model: ModelKind,
        per_fold: Vec<EvalReport>,
        predictions: Vec<usize>,
        n_classes: usize,
    ) -> Self {
        let over =
            |f: &dyn Fn(&EvalReport) -> f64| mean_std(&per_fold.iter().map(f).collect::<Vec<_>>());
        Self {
            model,
            class_acc: (0..n_classes)
                .map(|c| over(&|r| r.classes[c].acc))
                .collect(),
            accuracy: over(&|r| r.accuracy),
            macro_f1: over(&|r| r.macro_f1),
            per_fold,
            predictions,
        }
    }
}

/// Everything a fold's classifiers see, built from train-fold statistics.
struct FoldData {
    manual: Vec<Vec<f64>>,
    xyz: Vec<Tensor>,
}

/// Limb means from the training cycles only, then manual features and
/// rescaled, z-scored tensors for every cycle.
fn fold_data(
    cycles: &[GaitCycle],
    train: &[usize],
    skeleton: &SkeletonTopology,
) -> Result<FoldData> {
    let means = mean_limb_lengths(
        train.iter().map(|&i| cycles[i].geometry.as_slice()),
        skeleton,
    )?;
    let per = crate::parallel::try_map(cycles, |c| {
        let bones = normalize_bones(&c.geometry, skeleton, &means)?;
        let manual = extract_manual_features(&bones);
        let (t, _) = zscore(&frames_to_tensor(&bones));
        Ok::<_, Error>((manual, t))
    })?;
    let (manual, xyz) = per.into_iter().unzip();
    Ok(FoldData { manual, xyz })
}

fn flatten(t: &[Tensor]) -> Vec<Vec<f64>> {
    t.iter().map(|x| x.data().to_vec()).collect()
}

fn pick<T: Clone>(v: &[T], idx: &[usize]) -> Vec<T> {
    idx.iter().map(|&i| v[i].clone()).collect()
}

fn svm_fold(
    x: &[Vec<f64>],
    y: &[usize],
    n: usize,
    train: &[usize],
    test: &[usize],
    cfg: &SvmConfig,
    seed: u64,
) -> Result<Vec<usize>> {
    let scaler = Standardizer::fit(&pick(x, train))?;
    let model = svm_train(
        &scaler.apply_all(&pick(x, train)),
        &pick(y, train),
        n,
        cfg,
        seed,
    )?;
    Ok(test
        .iter()
        .map(|&i| svm_predict(&model, &scaler.apply(&x[i])))
        .collect())
}

fn knn_fold(
    x: &[Vec<f64>],
    y: &[usize],
    k: usize,
    train: &[usize],
    test: &[usize],
) -> Result<Vec<usize>> {
    let scaler = Standardizer::fit(&pick(x, train))?;
    let tx = scaler.apply_all(&pick(x, train));
    let ty = pick(y, train);
    crate::parallel::try_map(test, |&i| knn_classify(&tx, &ty, k, &scaler.apply(&x[i])))
}

fn net_fold(
    x: &[Tensor],
    y: &[usize],
    n: usize,
    input: NetInput,
    cfg: &NetConfig,
    train: &[usize],
    test: &[usize],
    seed: u64,
) -> Result<(NetClassifier, Vec<usize>)> {
    let tx: Vec<&Tensor> = train.iter().map(|&i| &x[i]).collect();
    let net = train_net(&tx, &pick(y, train), n, input, cfg, seed)?;
    let qx: Vec<&Tensor> = test.iter().map(|&i| &x[i]).collect();
    let pred = net.predict(&qx)?;
    Ok((net, pred))
}

/// Affect codes of every cycle as tensors.
pub fn affect_codes(ae: &ModelParams, cycles: &[GaitCycle]) -> Result<Vec<Tensor>> {
    let x: Vec<&Tensor> = cycles.iter().map(|c| &c.tensor).collect();
    Ok(ae
        .encode_all(Branch::Affect, &x)?
        .into_iter()
        .map(Tensor::from_vec)
        .collect())
}

pub fn folds_for(cycles: &[GaitCycle], n_folds: usize, seed: u64) -> Result<FoldSplit> {
    let strata: Vec<(String, Affect)> = cycles
        .iter()
        .map(|c| (c.subject_id.clone(), c.affect))
        .collect();
    stratified_kfold(&strata, n_folds, seed)
}

#[derive(Clone, Debug)]
pub struct BenchmarkOutput {
    pub folds: FoldSplit,
    pub results: Vec<ModelResult>,
    /// AE-xyz heads, one per fold, when AE-xyz was run.
    pub ae_heads: Vec<NetClassifier>,
}

/// Affect classification with every requested model under one shared
/// stratified k-fold split.
pub fn run_benchmark(
    cycles: &[GaitCycle],
    skeleton: &SkeletonTopology,
    ae: Option<&ModelParams>,
    models: &[ModelKind],
    config: &BenchmarkConfig,
    seed: u64,
) -> Result<BenchmarkOutput> {
    let folds = folds_for(cycles, config.folds, seed)?;
    let y: Vec<usize> = cycles.iter().map(|c| c.affect.index()).collect();
    let n = Affect::COUNT;
    let codes = match (models.contains(&ModelKind::AeXyz), ae) {
        (true, Some(ae)) => Some(affect_codes(ae, cycles)?),
        (true, None) => {
            return Err(Error::invalid(
                "ae-xyz needs a trained autoencoder checkpoint",
            ))
        }
        (false, _) => None,
    };
    let mut reports: Vec<Vec<EvalReport>> = vec![Vec::new(); models.len()];
    let mut preds: Vec<Vec<usize>> = vec![vec![0; cycles.len()]; models.len()];
    let mut ae_heads = Vec::new();
    for f in 0..folds.len() {
        let (train, test) = folds.split(f);
        let data = fold_data(cycles, &train, skeleton)?;
        let fold_seed = seed.wrapping_add(1000 * f as u64);
        for (m, &kind) in models.iter().enumerate() {
            let p = match kind {
                ModelKind::KnnMan => knn_fold(&data.manual, &y, config.knn_k, &train, &test)?,
                ModelKind::SvmMan => {
                    svm_fold(&data.manual, &y, n, &train, &test, &config.svm, fold_seed)?
                }
                ModelKind::SvmXyz => svm_fold(
                    &flatten(&data.xyz),
                    &y,
                    n,
                    &train,
                    &test,
                    &config.svm,
                    fold_seed,
                )?,
                ModelKind::CnnXyz => {
                    let [c, t] = *data.xyz[0].shape() else {
                        return Err(Error::Internal("cycle tensors must be 2-D".into()));
                    };
                    let input = NetInput::Cycle {
                        channels: c,
                        len: t,
                    };
                    net_fold(
                        &data.xyz,
                        &y,
                        n,
                        input,
                        &config.cnn,
                        &train,
                        &test,
                        fold_seed,
                    )?
                    .1
                }
                ModelKind::AeXyz => {
                    let codes = codes.as_ref().expect("checked above");
                    let input = NetInput::Vector {
                        dim: codes[0].len(),
                    };
                    let (head, p) = net_fold(
                        codes,
                        &y,
                        n,
                        input,
                        &config.latent,
                        &train,
                        &test,
                        fold_seed,
                    )?;
                    ae_heads.push(head);
                    p
                }
            };
            for (&i, &pi) in test.iter().zip(&p) {
                preds[m][i] = pi;
            }
            reports[m].push(evaluate(&p, &pick(&y, &test), n)?);
        }
    }
    let results = models
        .iter()
        .zip(reports)
        .zip(preds)
        .map(|((&kind, r), p)| ModelResult::new(kind, r, p, n))
        .collect();
    Ok(BenchmarkOutput {
        folds,
        results,
        ae_heads,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PrivacyReport {
    pub n_subjects: usize,
    /// Percent.
    pub chance: f64,
    /// Mean and std over folds of subject-identification accuracy.
    pub svm_raw: (f64, f64),
    pub svm_enc: (f64, f64),
    pub cnn_enc: (f64, f64),
    /// SVM on raw cycles with subject labels permuted.
    pub shuffled_control: (f64, f64),
}

/// Subject identification from raw cycles and from affect codes under the
/// benchmark's fold protocol.
pub fn privacy_eval(
    cycles: &[GaitCycle],
    skeleton: &SkeletonTopology,
    ae: &ModelParams,
    config: &BenchmarkConfig,
    seed: u64,
) -> Result<PrivacyReport> {
    let labels = LabelIndex::new(cycles);
    let n = labels.subjects.len();
    if n < 2 {
        return Err(Error::invalid(
            "privacy evaluation needs at least two subjects",
        ));
    }
    let y = labels.subject.clone();
    let mut shuffled = y.clone();
    shuffled.shuffle(&mut ChaCha8Rng::seed_from_u64(seed ^ 0x5bd1_e995));
    let folds = folds_for(cycles, config.folds, seed)?;
    let codes = affect_codes(ae, cycles)?;
    let code_rows = flatten(&codes);
    let dim = codes[0].len();
    let mut acc = [Vec::new(), Vec::new(), Vec::new(), Vec::new()];
    for f in 0..folds.len() {
        let (train, test) = folds.split(f);
        let data = fold_data(cycles, &train, skeleton)?;
        let raw = flatten(&data.xyz);
        let fold_seed = seed.wrapping_add(1000 * f as u64);
        let score = |p: &[usize], truth: &[usize]| -> Result<f64> {
            Ok(evaluate(p, &pick(truth, &test), n)?.accuracy)
        };
        let p = svm_fold(&raw, &y, n, &train, &test, &config.svm, fold_seed)?;
        acc[0].push(score(&p, &y)?);
        let p = svm_fold(&code_rows, &y, n, &train, &test, &config.svm, fold_seed)?;
        acc[1].push(score(&p, &y)?);
        let (_, p) = net_fold(
            &codes,
            &y,
            n,
            NetInput::Vector { dim },
            &config.latent,
            &train,
            &test,
            fold_seed,
        )?;
        acc[2].push(score(&p, &y)?);
        let p = svm_fold(&raw, &shuffled, n, &train, &test, &config.svm, fold_seed)?;
        acc[3].push(score(&p, &shuffled)?);
    }
    Ok(PrivacyReport {
        n_subjects: n,
        chance: 100.0 / n as f64,
        svm_raw: mean_std(&acc[0]),
        svm_enc: mean_std(&acc[1]),
        cnn_enc: mean_std(&acc[2]),
        shuffled_control: mean_std(&acc[3]),
    })
}
