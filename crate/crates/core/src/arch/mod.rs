//! Architecture descriptions, parameter counts and the forward pass.

mod count;
mod model;
mod spec;

pub use count::{param_count, ParamCount};
pub(crate) use model::log_softmax_at;
pub use model::{CaptureSpec, ForwardOutput, Model, StepResult, TokenBatch};
pub use spec::{ArchSpec, Family, NormStyle, PosEncoding, Ratio, Variant};
