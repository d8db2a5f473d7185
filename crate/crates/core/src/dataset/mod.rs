//! Training corpus construction: depth frames, overlapping view pairs and
//! their point-level correspondences.

mod frame;
mod pairs;
pub mod synth;

pub use frame::{backproject, pose_from_parts, DepthFrame, Intrinsics, FRAME_MAGIC};
pub use pairs::{
    compute_correspondences, compute_overlap, generate_pairs, prepare_view, CorrespondenceMap, PairGenConfig,
    ScenePair, PAIR_MAGIC,
};
pub use synth::{synthesize_scene, Camera, CameraRig, Rect, Scene, SyntheticSceneSpec};
