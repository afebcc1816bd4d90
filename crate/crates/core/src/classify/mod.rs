//! Affect and subject classifiers, the k-fold protocol and latent-space
//! statistics.

mod benchmark;
mod embed;
mod features;
mod folds;
mod metrics;
mod net;
mod shallow;

pub use benchmark::{
    affect_codes, folds_for, privacy_eval, run_benchmark, BenchmarkConfig, BenchmarkOutput,
    ModelKind, ModelResult, PrivacyReport,
};
pub use embed::{pca_project, silhouette};
pub use features::{
    extract_manual_features, feature_names, joint_angle, ANGLE_CHAINS, NUM_FEATURES, SPEED_JOINTS,
};
pub use folds::{stratified_kfold, FoldSplit};
pub use metrics::{evaluate, mean_std, ClassScores, EvalReport};
pub use net::{argmax, train_net, NetClassifier, NetConfig, NetInput, NetNodes};
pub use shallow::{knn_classify, svm_predict, svm_train, LinearSvm, Standardizer, SvmConfig};
