//! Evaluation: minutiae extraction and files, reprojection error and pair
//! counts, identification and verification metrics, and matchers.

mod matching;
mod metrics;
mod minutiae;
mod scores;

pub use matching::{
    matcher_by_name, mutual_nearest, FileMatcher, GroundTruthMatcher, MatchResult, MatchSample, Matcher,
    NearestNeighbourMatcher, PAIRING_RADIUS,
};
pub use metrics::{
    det_curve, improvement_bins, mre_ap, quantile, rank_k, reprojection_error, DetPoint, ImprovementBin, MreAp,
    PairedMinutiae, Quantiles,
};
pub use minutiae::{extract_minutiae, Minutia, MinutiaeSet, DIRECTION_STEP};
pub use scores::{ScoreEntry, ScoreMatrix};
