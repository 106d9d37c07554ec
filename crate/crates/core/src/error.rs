use alloc::string::String;
use core::fmt;

/// A caller broke an operation's precondition: mismatched shapes, an empty
/// shard, a label outside 0..9, a partition larger than the dataset.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ContractViolation {
    message: String,
}

impl ContractViolation {
    pub fn new(message: impl Into<String>) -> Self {
        Self {
            message: message.into(),
        }
    }

    pub fn message(&self) -> &str {
        &self.message
    }
}

impl fmt::Display for ContractViolation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "contract violation: {}", self.message)
    }
}

impl core::error::Error for ContractViolation {}

macro_rules! ensure {
    ($cond:expr, $($arg:tt)+) => {
        if !$cond {
            return Err($crate::error::ContractViolation::new(alloc::format!($($arg)+)).into());
        }
    };
}
pub(crate) use ensure;
