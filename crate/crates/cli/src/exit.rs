//! Exit codes: 0 ok, 1 usage, 2 data, 3 numeric failure, 4 IO.

use ncpp_core::encode::EncodeError;
use ncpp_core::evaluation::EvalError;
use ncpp_core::explain::ExplainError;
use ncpp_core::ingest::IngestError;
use ncpp_core::model::ModelError;
use ncpp_core::schema::SchemaError;
use ncpp_core::synth::SynthError;
use ncpp_core::tensor::TensorError;
use ncpp_core::training::TrainError;

pub const USAGE: u8 = 1;
pub const DATA: u8 = 2;
pub const NUMERIC: u8 = 3;
pub const IO: u8 = 4;

/// Bad invocation detected after argument parsing.
#[derive(Debug, thiserror::Error)]
#[error("{0}")]
pub struct UsageError(pub String);

fn csv_code(e: &csv::Error) -> u8 {
    if e.is_io_error() {
        IO
    } else {
        DATA
    }
}

fn json_code(e: &serde_json::Error) -> u8 {
    if e.is_io() {
        IO
    } else {
        DATA
    }
}

fn tensor_code(e: &TensorError) -> u8 {
    match e {
        TensorError::Io(_) => IO,
        _ => DATA,
    }
}

fn model_code(e: &ModelError) -> u8 {
    match e {
        ModelError::Tensor(t) => tensor_code(t),
        ModelError::Config(_) => USAGE,
        _ => DATA,
    }
}

fn encode_code(e: &EncodeError) -> u8 {
    match e {
        EncodeError::Io(_) => IO,
        EncodeError::Json(j) => json_code(j),
        _ => DATA,
    }
}

fn eval_code(e: &EvalError) -> u8 {
    match e {
        EvalError::Io(_) => IO,
        EvalError::Json(j) => json_code(j),
        EvalError::Csv(c) => csv_code(c),
        _ => DATA,
    }
}

fn schema_code(e: &SchemaError) -> u8 {
    match e {
        SchemaError::Io(_) => IO,
        SchemaError::UnknownSuite(_) => USAGE,
        _ => DATA,
    }
}

fn train_code(e: &TrainError) -> u8 {
    match e {
        TrainError::NonFinite { .. } => NUMERIC,
        TrainError::Config(_) | TrainError::Split(_) => USAGE,
        TrainError::Io(_) => IO,
        TrainError::Json(j) => json_code(j),
        TrainError::Encode(e) => encode_code(e),
        TrainError::Model(m) => model_code(m),
        TrainError::Tensor(t) => tensor_code(t),
        TrainError::Eval(e) => eval_code(e),
    }
}

fn one(cause: &(dyn std::error::Error + 'static)) -> Option<u8> {
    if cause.is::<UsageError>() {
        return Some(USAGE);
    }
    if let Some(e) = cause.downcast_ref::<TrainError>() {
        return Some(train_code(e));
    }
    if let Some(e) = cause.downcast_ref::<IngestError>() {
        return Some(match e {
            IngestError::Io(_) => IO,
            IngestError::Csv(c) => csv_code(c),
            _ => DATA,
        });
    }
    if let Some(e) = cause.downcast_ref::<EncodeError>() {
        return Some(encode_code(e));
    }
    if let Some(e) = cause.downcast_ref::<EvalError>() {
        return Some(eval_code(e));
    }
    if let Some(e) = cause.downcast_ref::<ModelError>() {
        return Some(model_code(e));
    }
    if let Some(e) = cause.downcast_ref::<TensorError>() {
        return Some(tensor_code(e));
    }
    if let Some(e) = cause.downcast_ref::<SchemaError>() {
        return Some(schema_code(e));
    }
    if let Some(e) = cause.downcast_ref::<SynthError>() {
        return Some(match e {
            SynthError::Schema(s) => schema_code(s),
            SynthError::Config(_) => USAGE,
            SynthError::Json(j) => json_code(j),
            _ => DATA,
        });
    }
    if let Some(e) = cause.downcast_ref::<ExplainError>() {
        return Some(match e {
            ExplainError::Index { .. } => USAGE,
            ExplainError::Io(_) => IO,
            ExplainError::Csv(c) => csv_code(c),
            ExplainError::Json(j) => json_code(j),
            ExplainError::Model(m) => model_code(m),
            _ => DATA,
        });
    }
    if cause.is::<std::io::Error>() {
        return Some(IO);
    }
    if let Some(e) = cause.downcast_ref::<csv::Error>() {
        return Some(csv_code(e));
    }
    if let Some(e) = cause.downcast_ref::<serde_json::Error>() {
        return Some(json_code(e));
    }
    None
}

/// Code for an error returned by a subcommand; the outermost recognized
/// cause decides.
pub fn code_for(err: &anyhow::Error) -> u8 {
    err.chain().find_map(one).unwrap_or(DATA)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn classification() {
        let nan = anyhow::Error::new(TrainError::NonFinite { epoch: 0, batch: 1, step: 1, loss: f64::NAN });
        assert_eq!(code_for(&nan), NUMERIC);
        let io = anyhow::Error::new(std::io::Error::new(std::io::ErrorKind::NotFound, "x")).context("reading");
        assert_eq!(code_for(&io), IO);
        let ckpt = anyhow::Error::new(TrainError::Model(ModelError::Tensor(TensorError::Io("gone".into()))));
        assert_eq!(code_for(&ckpt), IO);
        let data = anyhow::Error::new(IngestError::MissingColumn("score".into()));
        assert_eq!(code_for(&data), DATA);
        assert_eq!(code_for(&anyhow::Error::new(UsageError("bad".into()))), USAGE);
        assert_eq!(code_for(&anyhow::anyhow!("other")), DATA);
    }
}
