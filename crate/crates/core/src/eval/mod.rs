//! Label-based evaluation and the label-free accuracy predictor.

mod knn;
mod predictor;
mod probe;

pub use knn::{knn_evaluate, knn_predict, KnnResult};
pub use predictor::{
    fit_accuracy_predictor, fit_predictor_report, ols, pearson, predict_accuracy, rank_candidates, read_records, spearman,
    write_records, LossFeature, ModelRecord, OlsFit, PredictorFit, PredictorReport, SingleFit,
};
pub use probe::{linear_probe, ProbeResult};
