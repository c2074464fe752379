use std::path::{Path, PathBuf};

use affordlab::flow::FlowError;
use affordlab::netcore::NetError;
use affordlab::pipeline::PipelineError;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("config error: {0}")]
    Config(String),
    #[error("data error: {0}")]
    Data(String),
    #[error("numerical error: {0}")]
    Numerical(String),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            Self::Config(_) => 2,
            Self::Data(_) | Self::Io { .. } => 3,
            Self::Numerical(_) => 4,
        }
    }

    pub fn io(path: &Path, source: std::io::Error) -> Self {
        Self::Io {
            path: path.to_path_buf(),
            source,
        }
    }
}

fn classify_flow(e: &FlowError) -> fn(String) -> CliError {
    match e {
        FlowError::NonFinite(_) => CliError::Numerical,
        FlowError::Config(_) => CliError::Config,
        _ => CliError::Data,
    }
}

fn classify_net(e: &NetError) -> fn(String) -> CliError {
    match e {
        NetError::NonFinite(_) => CliError::Numerical,
        NetError::Config(_) => CliError::Config,
        NetError::Flow(f) => classify_flow(f),
        _ => CliError::Data,
    }
}

impl From<NetError> for CliError {
    fn from(e: NetError) -> Self {
        classify_net(&e)(e.to_string())
    }
}

impl From<FlowError> for CliError {
    fn from(e: FlowError) -> Self {
        classify_flow(&e)(e.to_string())
    }
}

impl From<PipelineError> for CliError {
    fn from(e: PipelineError) -> Self {
        let kind = match &e {
            PipelineError::Net(n) => classify_net(n),
            PipelineError::Flow(f) => classify_flow(f),
            PipelineError::Budget => CliError::Config,
            _ => CliError::Data,
        };
        kind(e.to_string())
    }
}

macro_rules! data_error {
    ($($t:ty),*) => {$(
        impl From<$t> for CliError {
            fn from(e: $t) -> Self {
                Self::Data(e.to_string())
            }
        }
    )*};
}

data_error!(
    affordlab::voxel::VoxelError,
    affordlab::synthscene::SceneError,
    affordlab::metrics::MetricError,
    affordlab::heatmap::HeatmapError,
    affordlab::geometry::GeometryError,
    affordlab::render::RenderError,
    csv::Error
);
