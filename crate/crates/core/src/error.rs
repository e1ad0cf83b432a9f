use thiserror::Error;

/// Argument outside the domain where a model or procedure is defined.
#[derive(Debug, Clone, PartialEq, Error)]
pub enum DomainError {
    #[error("{name} must be positive, got {value}")]
    NonPositive { name: &'static str, value: f64 },
    #[error("{name} = {value} outside [{min}, {max})")]
    OutOfRange {
        name: &'static str,
        value: f64,
        min: f64,
        max: f64,
    },
    #[error("{name} must be finite")]
    NotFinite { name: &'static str },
    #[error("{0}")]
    Invalid(String),
}

pub(crate) fn positive(name: &'static str, value: f64) -> Result<f64, DomainError> {
    if !value.is_finite() {
        return Err(DomainError::NotFinite { name });
    }
    if value <= 0.0 {
        return Err(DomainError::NonPositive { name, value });
    }
    Ok(value)
}

/// Checks `min <= value < max`.
pub(crate) fn in_range(
    name: &'static str,
    value: f64,
    min: f64,
    max: f64,
) -> Result<f64, DomainError> {
    if !value.is_finite() {
        return Err(DomainError::NotFinite { name });
    }
    if value < min || value >= max {
        return Err(DomainError::OutOfRange {
            name,
            value,
            min,
            max,
        });
    }
    Ok(value)
}
