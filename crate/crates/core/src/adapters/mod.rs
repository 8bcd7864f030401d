//! Low-rank adapters: LoRA deltas, activated (aLoRA) projection policies and
//! invocation-sequence handling.

mod delta;
mod file;
mod invocation;
mod policy;
mod spec;

pub use delta::{add_low_rank, delta_apply, lora_scale, LowRankDelta};
pub use file::{decode_adapter, encode_adapter, load_adapter, save_adapter, ADAPTER_MAGIC};
pub use invocation::{find_invocation, last_occurrence};
pub use policy::{build_policy, ActivationPoint, ProjectionPolicy, Verdict};
pub use spec::{AdapterId, AdapterMode, AdapterShape, AdapterSpec, LayerDeltas, Projection};
