//! Reverse-mode differentiation over the fixed layer set of the classifier.

pub mod checkpoint;
pub mod gradcheck;
pub mod incremental;
pub mod kernels;
pub mod layer;
pub mod network;

pub use checkpoint::{load_checkpoint, save_checkpoint};
pub use gradcheck::{directional_check, grad_check, grad_check_at};
pub use incremental::IncrementalForward;
pub use layer::{BatchNorm1d, Conv1d, Dense, Layer, LayerKind, LayerSpec, Node, Shortcut, ValueShape};
pub use network::{BackwardRule, Gradients, Mode, Network, RuleKind, Tape};
