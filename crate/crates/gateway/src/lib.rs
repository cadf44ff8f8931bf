//! Command-line and HTTP front end over `ganlocal_core`.

pub mod commands;
pub mod project;
pub mod server;

use ganlocal_core::editor::EditError;
use ganlocal_core::metrics::MetricsError;
use ganlocal_core::minigen::GeneratorError;
use ganlocal_core::ndio::NdioError;
use ganlocal_core::semantics::SemanticsError;
use thiserror::Error;

/// Bad arguments detected after parsing; reported with exit code 2.
#[derive(Debug, Error)]
#[error("{0}")]
pub struct UsageError(pub String);

fn semantics_code(e: &SemanticsError) -> &'static str {
    match e {
        SemanticsError::DegenerateInput(_) => "degenerate_input",
        SemanticsError::NotStandardized => "not_standardized",
        SemanticsError::ShapeMismatch(_) => "shape_mismatch",
        SemanticsError::AlreadyAssigned(_) => "already_assigned",
        SemanticsError::UnknownCluster(_) => "unknown_cluster",
        SemanticsError::UnknownPart(_) => "unknown_part",
        SemanticsError::EmptyMerge => "empty_merge",
        SemanticsError::MissingLayerAttribution(_) => "missing_layer_attribution",
        SemanticsError::SchemaVersionMismatch(_) => "schema_version_mismatch",
        SemanticsError::Io(_) => "io",
        SemanticsError::Json(_) => "json",
        SemanticsError::Array(_) => "array_format",
    }
}

/// Stable machine-readable code for an error chain.
pub fn error_code(err: &anyhow::Error) -> &'static str {
    for cause in err.chain() {
        if cause.is::<UsageError>() {
            return "usage";
        }
        if let Some(e) = cause.downcast_ref::<SemanticsError>() {
            return semantics_code(e);
        }
        if let Some(e) = cause.downcast_ref::<EditError>() {
            return match e {
                EditError::ShapeMismatch(_) | EditError::Generator(GeneratorError::ShapeMismatch(_)) => {
                    "shape_mismatch"
                }
                EditError::Generator(GeneratorError::Array(_)) => "array_format",
                EditError::InvalidParams { .. } => "invalid_params",
                EditError::UnknownPart(_) => "unknown_part",
                EditError::MissingLayerAttribution(_) => "missing_layer_attribution",
                EditError::Semantics(s) => semantics_code(s),
                EditError::Metrics(_) => "metrics",
            };
        }
        if cause.is::<MetricsError>() {
            return "metrics";
        }
        if let Some(e) = cause.downcast_ref::<GeneratorError>() {
            return match e {
                GeneratorError::ShapeMismatch(_) => "shape_mismatch",
                GeneratorError::Array(_) => "array_format",
            };
        }
        if cause.is::<NdioError>() {
            return "array_format";
        }
        if cause.is::<std::io::Error>() {
            return "io";
        }
    }
    "internal"
}
