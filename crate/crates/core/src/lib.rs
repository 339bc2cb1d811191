//! Stereo visual SLAM: FAST/BRIEF stereo frontend, frame-to-frame pose tracking, landmark
//! and local map management, descriptor-tree relocalization and pose graph optimization.

pub mod config;
pub mod eval;
pub mod frontend;
pub mod geometry;
pub mod gray;
pub mod io;
pub mod map;
pub mod mapper;
pub mod pipeline;
pub mod posegraph;
pub mod relocalizer;
pub mod rng;
pub mod stereo;
pub mod synth;
pub mod tracker;

pub use config::SlamConfig;
pub use geometry::{se3_exp, se3_log, stereo_jacobian, v2t, Camera, GeometryError, ImagePoint, Isometry3, StereoRig, Twist};
pub use gray::GrayImage;
pub use map::{Frame, FrameId, Framepoint, KeypointWD, Landmark, LandmarkId, LocalMap, LocalMapId, WorldMap};
