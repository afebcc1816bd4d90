//! File-level pipeline stages shared by the command-line tool and the
//! end-to-end tests. Each stage reads its inputs from disk and writes its
//! outputs into a directory.

mod config;
mod report;

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::autodiff::Tensor;
use crate::classify::{
    mean_std, pca_project, privacy_eval, run_benchmark, silhouette, BenchmarkOutput, ModelKind,
    NetClassifier, NetInput, PrivacyReport,
};
use crate::error::{Error, Result};
use crate::explain::{
    aggregate_global, emit_attribution_report, explain_all, normalize_sample,
    write_attribution_maps, AttributionMap, Explainable, GlobalAttributionReport,
};
use crate::mocap::{synth_generate, write_motion_csv, Affect, DatasetManifest, SynthConfig};
use crate::model::{init_params, Branch, ModelParams};
use crate::preprocess::{
    preprocess_pipeline, read_cycles, write_cycles, CycleIndex, CycleSet, Split, SsaParams,
};
use crate::training::{train, LabelIndex, LossWeights, TrainConfig, TrainReport};

pub use config::{EvalOptions, ExplainOptions, RunConfig};
pub use report::{write_report, REFERENCE_ACCURACY};

pub const MANIFEST_FILE: &str = "manifest.json";
pub const EFFECTIVE_CONFIG_FILE: &str = "effective_config.json";
pub const HEADS_FILE: &str = "heads.json";

/// Directory layout of a full run.
#[derive(Clone, Debug)]
pub struct RunLayout {
    pub root: PathBuf,
}

impl RunLayout {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Self { root: root.into() }
    }
    pub fn data(&self) -> PathBuf {
        self.root.join("data")
    }
    pub fn cycles(&self) -> PathBuf {
        self.root.join("cycles")
    }
    pub fn checkpoint(&self) -> PathBuf {
        self.root.join("model.ckpt")
    }
    pub fn eval(&self) -> PathBuf {
        self.root.join("eval")
    }
    pub fn privacy(&self) -> PathBuf {
        self.root.join("privacy")
    }
    pub fn explain(&self) -> PathBuf {
        self.root.join("explain")
    }
    pub fn report(&self) -> PathBuf {
        self.root.join("report.md")
    }
}

fn mkdir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

fn csv_err(path: &Path, e: csv::Error) -> Error {
    match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::io(path, io),
        other => Error::Internal(format!("writing {}: {other:?}", path.display())),
    }
}

pub(crate) fn write_csv(path: &Path, header: &[&str], rows: &[Vec<String>]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| csv_err(path, e))?;
    w.write_record(header).map_err(|e| csv_err(path, e))?;
    for r in rows {
        w.write_record(r).map_err(|e| csv_err(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value).map_err(|e| Error::json(path, e))?;
    fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
}

/// Generates the synthetic set into `out`: one CSV and sidecar per
/// sequence plus `manifest.json`. Returns the manifest path.
pub fn synth_to_dir(cfg: &SynthConfig, out: &Path) -> Result<PathBuf> {
    let ds = synth_generate(cfg)?;
    mkdir(out)?;
    crate::parallel::try_map(&ds.sequences, |s| {
        write_motion_csv(s, &ds.manifest.skeleton, &out.join(format!("{}.csv", s.id)))
    })?;
    let path = out.join(MANIFEST_FILE);
    ds.manifest.save(&path)?;
    Ok(path)
}

/// Preprocesses every sequence of a manifest into a cycle directory.
pub fn preprocess_to_dir(manifest: &Path, ssa: &SsaParams, out: &Path) -> Result<CycleIndex> {
    let m = DatasetManifest::load(manifest)?;
    m.check_complete()?;
    let prep = preprocess_pipeline(&m, ssa, &Split::All)?;
    if prep.cycles.is_empty() {
        return Err(Error::NoGaitCycle(format!(
            "no cycles found in {}",
            manifest.display()
        )));
    }
    mkdir(out)?;
    write_cycles(out, &prep, &m.skeleton, ssa)
}

/// Loss-curve CSV written next to a checkpoint.
pub fn losses_path(ckpt: &Path) -> PathBuf {
    let mut s = ckpt.as_os_str().to_owned();
    s.push(".losses.csv");
    PathBuf::from(s)
}

/// Trains the autoencoder on every cycle of `cycles_dir` and saves it.
pub fn train_to_checkpoint(
    cycles_dir: &Path,
    model: &crate::model::ModelConfig,
    loss: &LossWeights,
    train_cfg: &TrainConfig,
    init_seed: u64,
    ckpt: &Path,
) -> Result<TrainReport> {
    let set = read_cycles(cycles_dir)?;
    let init = init_params(model, init_seed)?;
    let trained = train(&set.cycles, &[], init, loss, train_cfg)?;
    if let Some(why) = &trained.report.aborted {
        log::warn!("training stopped early: {why}");
    }
    if let Some(dir) = ckpt.parent().filter(|d| !d.as_os_str().is_empty()) {
        mkdir(dir)?;
    }
    trained.params.save(ckpt)?;
    trained.report.write_csv(&losses_path(ckpt))?;
    Ok(trained.report)
}

fn affect_names() -> Vec<String> {
    Affect::ALL.iter().map(|a| a.name().to_string()).collect()
}

fn f(v: f64) -> String {
    v.to_string()
}

/// Test-fold cycles of one fold head.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FoldHead {
    pub checkpoint: PathBuf,
    pub test_cycles: Vec<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FoldHeads {
    pub heads: Vec<FoldHead>,
}

/// Affect benchmark of `opts.models` on a cycle directory. Writes per-model
/// fold metrics and confusion matrices, a summary, the AE-xyz fold heads,
/// and latent-space statistics when a checkpoint is given.
pub fn eval_to_dir(
    cycles_dir: &Path,
    ckpt: Option<&Path>,
    opts: &EvalOptions,
    seed: u64,
    out: &Path,
) -> Result<BenchmarkOutput> {
    let set = read_cycles(cycles_dir)?;
    let ae = ckpt.map(ModelParams::load).transpose()?;
    let bench = run_benchmark(
        &set.cycles,
        &set.skeleton,
        ae.as_ref(),
        &opts.models,
        &opts.benchmark(),
        seed,
    )?;
    mkdir(out)?;
    let names = affect_names();
    let mut summary = Vec::new();
    for r in &bench.results {
        let mut rows = Vec::new();
        for (fold, rep) in r.per_fold.iter().enumerate() {
            for (c, s) in rep.classes.iter().enumerate() {
                rows.push(vec![
                    fold.to_string(),
                    names[c].clone(),
                    f(s.acc),
                    f(s.precision),
                    f(s.recall),
                    f(s.f1),
                ]);
            }
        }
        for (label, pick) in [("mean", 0usize), ("std", 1)] {
            for c in 0..names.len() {
                let stat = |g: &dyn Fn(&crate::classify::ClassScores) -> f64| {
                    let (m, s) = mean_std(
                        &r.per_fold
                            .iter()
                            .map(|p| g(&p.classes[c]))
                            .collect::<Vec<_>>(),
                    );
                    f(if pick == 0 { m } else { s })
                };
                rows.push(vec![
                    label.to_string(),
                    names[c].clone(),
                    stat(&|s| s.acc),
                    stat(&|s| s.precision),
                    stat(&|s| s.recall),
                    stat(&|s| s.f1),
                ]);
            }
        }
        write_csv(
            &out.join(format!("eval_{}.csv", r.model)),
            &["fold", "class", "acc", "pre", "rec", "f1"],
            &rows,
        )?;

        let mut confusion = vec![vec![0usize; names.len()]; names.len()];
        for rep in &r.per_fold {
            for (t, row) in rep.confusion.iter().enumerate() {
                for (p, n) in row.iter().enumerate() {
                    confusion[t][p] += n;
                }
            }
        }
        let mut header = vec!["truth"];
        header.extend(names.iter().map(String::as_str));
        let rows: Vec<Vec<String>> = confusion
            .iter()
            .enumerate()
            .map(|(t, row)| {
                std::iter::once(names[t].clone())
                    .chain(row.iter().map(usize::to_string))
                    .collect()
            })
            .collect();
        write_csv(
            &out.join(format!("confusion_{}.csv", r.model)),
            &header,
            &rows,
        )?;

        for (c, (m, s)) in r.class_acc.iter().enumerate() {
            summary.push(vec![r.model.to_string(), names[c].clone(), f(*m), f(*s)]);
        }
        summary.push(vec![
            r.model.to_string(),
            "overall".into(),
            f(r.accuracy.0),
            f(r.accuracy.1),
        ]);
        summary.push(vec![
            r.model.to_string(),
            "macro_f1".into(),
            f(r.macro_f1.0),
            f(r.macro_f1.1),
        ]);
    }
    write_csv(
        &out.join("eval_summary.csv"),
        &["model", "class", "mean", "std"],
        &summary,
    )?;

    if !bench.ae_heads.is_empty() {
        let dir = out.join("heads");
        mkdir(&dir)?;
        let mut heads = Vec::new();
        for (fold, head) in bench.ae_heads.iter().enumerate() {
            let rel = PathBuf::from("heads").join(format!("fold{fold}.ckpt"));
            head.save(&out.join(&rel))?;
            let (_, test) = bench.folds.split(fold);
            heads.push(FoldHead {
                checkpoint: rel,
                test_cycles: test.iter().map(|&i| set.cycles[i].id()).collect(),
            });
        }
        write_json(&out.join(HEADS_FILE), &FoldHeads { heads })?;
    }
    if let Some(ae) = &ae {
        write_latent_stats(&set, ae, out)?;
    }
    Ok(bench)
}

/// 2-D PCA projections of both codes and silhouette scores.
fn write_latent_stats(set: &CycleSet, ae: &ModelParams, out: &Path) -> Result<()> {
    let x: Vec<&Tensor> = set.cycles.iter().map(|c| &c.tensor).collect();
    let a = ae.encode_all(Branch::Affect, &x)?;
    let s = ae.encode_all(Branch::Subject, &x)?;
    let labels = LabelIndex::new(&set.cycles);
    let pa = pca_project(&a, 2)?;
    let ps = pca_project(&s, 2)?;
    let rows: Vec<Vec<String>> = set
        .cycles
        .iter()
        .enumerate()
        .map(|(i, c)| {
            vec![
                c.id(),
                c.subject_id.clone(),
                c.affect.name().to_string(),
                f(pa[i][0]),
                f(pa[i][1]),
                f(ps[i][0]),
                f(ps[i][1]),
            ]
        })
        .collect();
    write_csv(
        &out.join("latent_pca.csv"),
        &[
            "cycle", "subject", "affect", "a_pc1", "a_pc2", "s_pc1", "s_pc2",
        ],
        &rows,
    )?;
    let rows = vec![
        vec![
            "affect".into(),
            "affect".into(),
            f(silhouette(&a, &labels.affect)?),
        ],
        vec![
            "affect".into(),
            "subject".into(),
            f(silhouette(&a, &labels.subject)?),
        ],
        vec![
            "subject".into(),
            "subject".into(),
            f(silhouette(&s, &labels.subject)?),
        ],
        vec![
            "subject".into(),
            "affect".into(),
            f(silhouette(&s, &labels.affect)?),
        ],
    ];
    write_csv(
        &out.join("silhouette.csv"),
        &["code", "labels", "silhouette"],
        &rows,
    )
}

/// Subject identification from raw cycles and affect codes.
pub fn privacy_to_dir(
    cycles_dir: &Path,
    ckpt: &Path,
    opts: &EvalOptions,
    seed: u64,
    out: &Path,
) -> Result<PrivacyReport> {
    let set = read_cycles(cycles_dir)?;
    let ae = ModelParams::load(ckpt)?;
    let r = privacy_eval(&set.cycles, &set.skeleton, &ae, &opts.benchmark(), seed)?;
    mkdir(out)?;
    let rows = vec![
        vec!["svm-raw".into(), f(r.svm_raw.0), f(r.svm_raw.1)],
        vec!["svm-enc".into(), f(r.svm_enc.0), f(r.svm_enc.1)],
        vec!["cnn-enc".into(), f(r.cnn_enc.0), f(r.cnn_enc.1)],
        vec![
            "shuffled-control".into(),
            f(r.shuffled_control.0),
            f(r.shuffled_control.1),
        ],
        vec!["chance".into(), f(r.chance), "0".into()],
    ];
    write_csv(
        &out.join("privacy.csv"),
        &["classifier", "mean", "std"],
        &rows,
    )?;
    Ok(r)
}

fn load_heads(classifier: &Path) -> Result<Option<(Vec<NetClassifier>, Vec<Vec<String>>)>> {
    if classifier.extension().is_none_or(|e| e != "json") {
        return Ok(None);
    }
    let text = fs::read_to_string(classifier).map_err(|e| Error::io(classifier, e))?;
    let m: FoldHeads = serde_json::from_str(&text).map_err(|e| Error::json(classifier, e))?;
    let base = classifier.parent().unwrap_or(Path::new(""));
    let mut heads = Vec::new();
    let mut tests = Vec::new();
    for h in m.heads {
        heads.push(NetClassifier::load(&base.join(&h.checkpoint))?);
        tests.push(h.test_cycles);
    }
    Ok(Some((heads, tests)))
}

/// Guided Grad-CAM over a cycle directory. `classifier` is a single head
/// checkpoint (applied to every cycle) or a fold-heads manifest (each head
/// explains its own test cycles). Heads over affect codes need `ckpt`.
pub fn explain_to_dir(
    cycles_dir: &Path,
    ckpt: Option<&Path>,
    classifier: &Path,
    opts: &ExplainOptions,
    out: &Path,
) -> Result<GlobalAttributionReport> {
    let set = read_cycles(cycles_dir)?;
    let ae = ckpt.map(ModelParams::load).transpose()?;
    let (heads, groups): (Vec<NetClassifier>, Vec<Vec<usize>>) = match load_heads(classifier)? {
        Some((heads, tests)) => {
            let by_id: BTreeMap<String, usize> = set
                .cycles
                .iter()
                .enumerate()
                .map(|(i, c)| (c.id(), i))
                .collect();
            let groups = tests
                .iter()
                .map(|ids| {
                    ids.iter()
                        .map(|id| {
                            by_id.get(id).copied().ok_or_else(|| {
                                Error::invalid(format!(
                                    "unknown cycle {id} in {}",
                                    classifier.display()
                                ))
                            })
                        })
                        .collect::<Result<Vec<_>>>()
                })
                .collect::<Result<Vec<_>>>()?;
            (heads, groups)
        }
        None => (
            vec![NetClassifier::load(classifier)?],
            vec![(0..set.cycles.len()).collect()],
        ),
    };
    let mut maps: Vec<(usize, AttributionMap)> = Vec::new();
    for (head, idx) in heads.iter().zip(&groups) {
        let model = match head.input {
            NetInput::Cycle { .. } => Explainable::Cnn(head),
            NetInput::Vector { .. } => Explainable::Latent {
                ae: ae.as_ref().ok_or_else(|| {
                    Error::invalid(
                        "a classifier over affect codes needs the autoencoder checkpoint",
                    )
                })?,
                head,
            },
        };
        let x: Vec<&Tensor> = idx.iter().map(|&i| &set.cycles[i].tensor).collect();
        let truths: Vec<usize> = idx.iter().map(|&i| set.cycles[i].affect.index()).collect();
        maps.extend(idx.iter().copied().zip(explain_all(model, &x, &truths)?));
    }
    maps.sort_by_key(|(i, _)| *i);
    let normalized: Vec<AttributionMap> = maps.iter().map(|(_, m)| normalize_sample(m)).collect();
    let report = aggregate_global(&normalized, &affect_names(), &set.skeleton)?;
    emit_attribution_report(&report, out)?;
    if opts.per_sample {
        let signals: Vec<String> = (0..set.skeleton.joint_names.len() * 3)
            .map(|s| set.skeleton.signal_name(s))
            .collect();
        let raw: Vec<AttributionMap> = maps.into_iter().map(|(_, m)| m).collect();
        write_attribution_maps(&raw, &signals, &out.join("attribution_samples.csv"))?;
    }
    Ok(report)
}

/// Synth, preprocess, train, eval, privacy, explain and report into one
/// directory, all driven by `cfg`.
pub fn run_all(cfg: &RunConfig, out: &Path) -> Result<()> {
    cfg.validate()?;
    let layout = RunLayout::new(out);
    mkdir(out)?;
    cfg.write_effective(&out.join(EFFECTIVE_CONFIG_FILE))?;
    log::info!("synthesizing");
    let manifest = synth_to_dir(&cfg.synth, &layout.data())?;
    log::info!("preprocessing");
    preprocess_to_dir(&manifest, &cfg.preprocess, &layout.cycles())?;
    log::info!("training");
    train_to_checkpoint(
        &layout.cycles(),
        &cfg.model,
        &cfg.loss,
        &cfg.train,
        cfg.seed,
        &layout.checkpoint(),
    )?;
    log::info!("evaluating");
    let mut eval = cfg.eval.clone();
    if !eval.models.contains(&ModelKind::AeXyz) {
        eval.models.push(ModelKind::AeXyz);
    }
    eval_to_dir(
        &layout.cycles(),
        Some(&layout.checkpoint()),
        &eval,
        cfg.seed,
        &layout.eval(),
    )?;
    log::info!("privacy");
    privacy_to_dir(
        &layout.cycles(),
        &layout.checkpoint(),
        &cfg.eval,
        cfg.seed,
        &layout.privacy(),
    )?;
    log::info!("explaining");
    explain_to_dir(
        &layout.cycles(),
        Some(&layout.checkpoint()),
        &layout.eval().join(HEADS_FILE),
        &cfg.explain,
        &layout.explain(),
    )?;
    write_report(out)?;
    Ok(())
}
