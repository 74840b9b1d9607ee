//! Differentiable inverse kinematics for multi-camera markerless motion capture.
//!
//! A pose trajectory is represented implicitly by a network over time; it is
//! fitted, together with per-subject scales and marker offsets and optional
//! camera extrinsic corrections, to detected 2-D keypoints.

pub mod autodiff;
pub mod camera;
pub mod fitter;
pub mod gradcheck;
pub mod io;
pub mod kinematics;
pub mod metrics;
pub mod model;
pub mod objective;
pub mod so3;
pub mod synth;
pub mod tensor;
pub mod trajectory;

pub use camera::{Camera, CameraRig, ExtrinsicDelta, Intrinsics};
pub use fitter::{fit_session, meta_fit, FitConfig, FitError, FitLogRecord, MetaFit, SessionFit, SubjectData};
pub use gradcheck::{run_gradcheck, GradcheckConfig, GradcheckReport};
pub use io::{IoError, TrialFit, TrialMeta};
pub use kinematics::{forward_kinematics, forward_kinematics_batch, MarkerSet, Pose};
pub use metrics::{MetricsError, StepTable, WalkwayEvent};
pub use model::{demo_biped, demo_biped_spine, parse_model, SkeletonModel, SubjectParams};
pub use objective::{LossWeights, TrialObservations};
pub use synth::{generate_session, GroundTruth, Side, SynthConfig, SynthError, SynthSession};
