//! Generation-backend contract and everything around it: control-token
//! framing, document packing, decoding specs and constraint enforcement.

mod backend;
mod decode;
mod framing;
mod http;
mod packing;
mod spec;

pub use backend::{
    BackendError, Capabilities, FnBackend, GenerationBackend, GenerationRequest, Score,
    ScriptedBackend, SingleFlight,
};
pub use decode::{check_output, collect_banned_ngrams, decode_with_constraints, DecodeError, Violation};
pub use framing::{frame_knowledge, unframe_knowledge, ControlTokens, FramingError};
pub use http::{HttpBackend, HttpBackendConfig};
pub use packing::{
    pack_fid, pack_prepend, split_prepend, truncate_tokens, PackedInput, Packing, PackingError,
    Slot, PREPEND_SEPARATOR,
};
pub use spec::{BlockSource, DecodingSpec, DefaultSpecs, Strategy};
