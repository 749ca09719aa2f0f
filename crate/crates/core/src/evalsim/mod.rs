//! Synthetic scenes with ground truth, and trajectory metrics.

mod metrics;
pub mod planted;
mod scene;
mod trajectory;

pub use metrics::{align_trajectories, associate, compute_metrics, AlignMode, MetricsReport};
pub use trajectory::{Stamped, Trajectory};
pub use scene::{
    descriptor_from_bits, generate_sequence, timestamp_stem, write_dataset, CircleScenario, ClusterMotion, DynamicCluster, FeatureSource, Landmark, NoiseSpec,
    SyntheticFrame, SyntheticWorld,
};
