//! Network building blocks and the assembled glass detection network.

pub mod attention;
pub mod bfe;
pub mod checkpoint;
pub mod gdnet;
pub mod layers;
pub mod lcfi;
pub mod params;

pub use attention::{AttentionFuse, AttentionOut};
pub use bfe::{Bfe, BfeConfig, BfeOut};
pub use checkpoint::Checkpoint;
pub use gdnet::{Gdnet, GdnetConfig, GdnetOutputs};
pub use layers::{BatchNorm2d, Conv2d, ConvBnRelu};
pub use lcfi::{LcfiBlock, LcfiBlockConfig, LcfiModule, LcfiModuleConfig};
pub use params::{Param, ParamId, ParamKind, ParamStore, Session};
