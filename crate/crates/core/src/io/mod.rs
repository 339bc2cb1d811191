//! Dataset loading and trajectory files.

mod kitti;
mod pgm;
mod trajectory;

pub use kitti::{load_image, load_kitti_sequence, parse_calibration, SequenceManifest};
pub use pgm::{decode_pgm, encode_pgm, read_pgm, write_pgm};
pub use trajectory::{format_pose, parse_pose_line, read_trajectory, write_trajectory};

use std::path::{Path, PathBuf};

#[derive(Debug, thiserror::Error)]
pub enum LoadError {
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("missing {what}: {path}")]
    Missing { what: String, path: PathBuf },
    #[error("{path}: {message}")]
    Format { path: PathBuf, message: String },
    #[error("{0}")]
    Inconsistent(String),
    #[error("calibration is not rectified: {0}")]
    NotRectified(String),
}

impl LoadError {
    pub(crate) fn io(path: &Path, source: std::io::Error) -> Self {
        if source.kind() == std::io::ErrorKind::NotFound {
            LoadError::Missing { what: "file".into(), path: path.to_path_buf() }
        } else {
            LoadError::Io { path: path.to_path_buf(), source }
        }
    }
}
