//! Network building blocks and the coupled architecture.

pub mod coupled;
pub mod flops;
pub mod gate;
pub mod layers;
pub mod splat;

pub use coupled::{BridgeMode, BridgeSource, CoupledNet, CoupledNetConfig, DecoderBlock, NetworkOutput, UNet, UNetOutput};
pub use flops::{estimate_flops_params, FlopReport};
pub use gate::{AttentionGate, GateOutput};
pub use splat::{Encoder, EncoderConfig, SplatBlock, SplatConfig, SplatOutput};
