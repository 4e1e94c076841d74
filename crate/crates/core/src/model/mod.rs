//! Shared transformer, frozen tokenizer stubs, local adapters and the
//! frozen-A LoRA/DoRA attachments.

mod lora;
mod tokenizer;
mod transformer;

pub use lora::{
    a_fixed_hash, dora_compose, effective_weight, generate_a_fixed, AdaptMode, AttnWeight, LoraAttachment, TargetId,
    DORA_MIN_NORM,
};
pub use tokenizer::{Adapter, Modality, ModalitySpec, TokenizerStub};
pub use transformer::{
    Binding, Block, BlockVars, ForwardVars, Leaves, SharedModel, TransformerConfig, TransformerParams, WeightVars,
    LAYER_NORM_EPS,
};
