//! Online and momentum encoders, projection heads and the momentum update.

mod branches;
mod encoder;
mod momentum;
mod projector;

pub use branches::{Backbone, Branches};
pub(crate) use encoder::sincos_table;
pub use encoder::{Encoder, EncoderOutput, PosEmbedKind, ViTConfig};
pub use momentum::{momentum_update, EncoderState, MOMENTUM_PREFIXES};
pub use projector::{l2_normalize, Pooling, ProjectionSpec, Projector};
