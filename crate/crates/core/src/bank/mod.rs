//! Domain types and their on-disk formats.
//!
//! Traces travel as the fixed binary `.slamtrace` layout; banks, null
//! statistics, and SAE sets as canonical JSON. See `docs/formats.md`.

mod json;
mod trace_io;
mod types;

pub use json::{
    b64_to_f32s, bank_from_json, bank_to_json, f32s_to_b64, load_bank, load_nulls, load_saes,
    nulls_from_json, nulls_to_json, save_bank, save_nulls, save_saes, saes_from_json,
    saes_to_json, BANK_SCHEMA, NULL_SCHEMA, SAE_SCHEMA, SCHEMA_VERSION,
};
pub use trace_io::{
    decode_trace, encode_trace, load_trace, save_trace, trace_checksums, TraceChecksum,
    TRACE_MAGIC, TRACE_VERSION,
};
pub use types::{
    ActivationTrace, BankNull, DetectionResult, DirectionBank, Document, FeatureNull, FeatureRecord,
    NullStats, Polarity, SaeSpec, WatermarkKey, COMPOSITE_TOL, UNIT_NORM_TOL,
};
pub(crate) use types::sort_records;
