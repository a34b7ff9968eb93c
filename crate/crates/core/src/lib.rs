//! Multidirectional class-discriminative map GAN for 3-D volumes.
//!
//! A label-conditioned generator `G` produces an additive map Δx that moves
//! a volume `x` of stage `y` to a requested stage `y'`: `x' = G(x, y') + x`.
//! It is trained against a real/fake discriminator `D` and an auxiliary
//! stage classifier `C`, with forward and backward cycle-consistency and an
//! L1 penalty on Δx. The crate also provides a phantom generator with exact
//! ground-truth maps and the metrics used to score recovered maps.

pub mod archive;
pub mod autograd;
pub mod error;
pub mod losses;
pub mod metrics;
pub mod nets;
pub mod optim;
pub mod phantom;
pub mod settings;
pub mod tensor;
pub mod train;
pub mod vismap;
pub mod volume;

pub use error::{Error, Result};
pub use losses::{LossReport, LossTerms, LossWeights};
pub use phantom::{PhantomSample, PhantomSpec};
pub use nets::{Classifier, ClassifierSpec, Discriminator, DiscriminatorSpec, Generator, GeneratorSpec, NetState, Params};
pub use volume::{ClassDiscriminativeMap, ClassLabel, ClassProbabilities, Grid3, Shape3, Volume};
