//! Policy networks, the pairwise action ranker, and the expert/supplementary
//! classifier used by the distribution-based baseline.

mod classifier;
mod mlp;
mod policy;
mod ranker;

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use ilmar_autodiff::{ParamVector, Tensor};
use serde::{Deserialize, Serialize};

pub use classifier::{ClassifierArch, ClassifierModel};
pub use policy::{
    ActionDist, Actor, EvalAction, PolicyArch, PolicyHead, PolicyModel, RankerInput, LOG_STD_MAX, LOG_STD_MIN,
};
pub use ranker::{weight_mask, RankerArch, RankerModel, RankerSizes, WeightValue, DEFAULT_CLIP};

#[derive(Debug, thiserror::Error)]
pub enum ModelError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}:{line}: {message}")]
    Parse {
        path: PathBuf,
        line: usize,
        message: String,
    },
    #[error("checkpoint does not match the model: {0}")]
    Mismatch(String),
}

#[derive(Serialize, Deserialize)]
struct Segment {
    name: String,
    shape: Vec<usize>,
    data: Vec<f64>,
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> ModelError + '_ {
    move |source| ModelError::Io {
        path: path.to_path_buf(),
        source,
    }
}

/// One JSON object per segment: `{"name", "shape", "data"}`.
pub fn save_params(params: &ParamVector, path: &Path) -> Result<(), ModelError> {
    let file = File::create(path).map_err(io_err(path))?;
    let mut out = BufWriter::new(file);
    for (name, t) in params.iter() {
        let seg = Segment {
            name: name.to_string(),
            shape: t.shape().to_vec(),
            data: t.data().to_vec(),
        };
        let line = serde_json::to_string(&seg).expect("segments serialize");
        writeln!(out, "{line}").map_err(io_err(path))?;
    }
    out.flush().map_err(io_err(path))
}

/// Reads a dump written by [`save_params`]. With `like`, the segment names
/// and shapes must match it exactly.
pub fn load_params(path: &Path, like: Option<&ParamVector>) -> Result<ParamVector, ModelError> {
    let file = File::open(path).map_err(io_err(path))?;
    let mut params = ParamVector::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(io_err(path))?;
        if line.trim().is_empty() {
            continue;
        }
        let parse = |message: String| ModelError::Parse {
            path: path.to_path_buf(),
            line: i + 1,
            message,
        };
        let seg: Segment = serde_json::from_str(&line).map_err(|e| parse(e.to_string()))?;
        let t = Tensor::new(seg.shape, seg.data).map_err(|e| parse(e.to_string()))?;
        params.insert(seg.name, t).map_err(|e| parse(e.to_string()))?;
    }
    if let Some(like) = like {
        check_like(&params, like)?;
    }
    Ok(params)
}

fn check_like(got: &ParamVector, like: &ParamVector) -> Result<(), ModelError> {
    if got.num_segments() != like.num_segments() {
        return Err(ModelError::Mismatch(format!(
            "{} segments, expected {}",
            got.num_segments(),
            like.num_segments()
        )));
    }
    for ((gn, gt), (ln, lt)) in got.iter().zip(like.iter()) {
        if gn != ln {
            return Err(ModelError::Mismatch(format!(
                "segment `{gn}` where `{ln}` was expected"
            )));
        }
        if gt.shape() != lt.shape() {
            return Err(ModelError::Mismatch(format!(
                "segment `{gn}` has shape {:?}, expected {:?}",
                gt.shape(),
                lt.shape()
            )));
        }
    }
    Ok(())
}
