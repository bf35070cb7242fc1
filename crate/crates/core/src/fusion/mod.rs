//! Decision-level fusion, feature-level baselines and majority-vote ensembles.

mod feature;
mod policy;
mod vote;

pub use feature::{
    fuse_features, train_feature_fusion, AttentionFusion, FeatureFusionMode, FeatureFusionModel, FeatureHead,
    Standardizer,
};
pub use policy::{
    assemble_fusion_input, load_ensemble, policy_predict, save_ensemble, train_policy_ensemble, FusionInput,
    PolicyConfig, PolicyEnsemble, ENSEMBLE_MANIFEST,
};
pub use vote::{majority_vote, mean_probabilities, pipeline_ensemble, EnsemblePrediction, VoteResult};
