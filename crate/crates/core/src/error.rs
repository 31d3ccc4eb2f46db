use std::path::PathBuf;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("invalid label space: {0}")]
    InvalidLabelSpace(String),

    #[error("invalid label: {0}")]
    InvalidLabel(String),

    #[error("invalid box: {0}")]
    InvalidBox(String),

    #[error("invalid dimensions: {0}")]
    Dimension(String),

    #[error("missing {what} at {}", path.display())]
    Missing { what: &'static str, path: PathBuf },

    #[error("dataset: {0}")]
    Dataset(String),

    #[error("configuration: {0}")]
    Config(String),

    #[error("input does not match model: {0}")]
    Shape(String),

    #[error("training diverged at epoch {epoch}: loss {loss}")]
    NonFiniteLoss { epoch: usize, loss: f64 },

    #[error("class {0:?} has no positive training samples")]
    NoPositives(Vec<String>),

    #[error("metric undefined: {0}")]
    Undefined(String),

    #[error("statistics: {0}")]
    Stats(String),

    #[error("detector: {0}")]
    Detector(String),

    #[error("tokenizer: {0}")]
    Tokenizer(String),

    #[error(transparent)]
    Candle(#[from] candle_core::Error),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Image(#[from] image::ImageError),

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    TomlDe(#[from] toml::de::Error),

    #[error(transparent)]
    TomlSer(#[from] toml::ser::Error),
}
