//! Tag-prediction toolkit: a text notation for linear-chain convolutional
//! architectures, multiply-add/parameter accounting, a small reverse-mode
//! tensor engine, noisy multilabel training with the randomized softmax,
//! tag vocabulary mining, mAP evaluation and per-class posterior
//! calibration.

pub mod archdsl;
pub mod calibsvc;
pub mod complexity;
pub mod eval;
pub mod imagefolder;
pub mod multilabel;
pub mod network;
pub mod synth;
pub mod tagselect;
pub mod tensor;

pub use archdsl::{parse_arch, parse_arch_file, render_arch, ArchSpec, Geometry, LayerPlan};
pub use complexity::{count_complexity, ComplexityReport};
pub use network::{HeadConfig, Network, TrainConfig};
pub use tensor::{Tensor, Tape, Var};
