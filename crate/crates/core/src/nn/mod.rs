//! Neural network layers.

pub mod attention;
pub mod conv;
pub mod layers;
pub mod norm;
pub mod params;
pub mod pool;
pub mod pyramid;

pub use attention::{attention_gate, AttentionGate, GateVars};
pub use conv::{conv2d, ConvConfig};
pub use layers::{BatchNorm, Conv2d, ConvBnRelu, DoubleConv, Pointwise};
pub use norm::{batch_norm_eval, batch_norm_train, BatchStats};
pub use params::{Ctx, Mode, ParamId, ParamKind, ParamStore};
pub use pool::{avg_pool, maxpool2, upsample2, upsample_nearest, UpsampleMode};
pub use pyramid::{clamp_rates, usable_scales, Aspp, Spp, DEFAULT_ASPP_RATES, DEFAULT_SPP_SCALES};
