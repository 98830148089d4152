//! Synthetic concept benchmarks and the encoding file format.

pub mod generate;
pub mod io;
pub mod presets;
pub mod rules;
pub mod schema;
pub mod stats;

pub use generate::{
    dims_for, encode_objects, generate_synthetic, ConceptSample, DatasetBundle, Dims, EncodingKind, Split,
    SplitCounts,
};
pub use io::{
    decode_split, encode_split, load_bundle, load_encodings, save_bundle, save_encodings, BundleMeta, EncodingHeader,
    SPLIT_NAMES,
};
pub use presets::Preset;
pub use rules::{predicate, ClassRule, Predicate, RuleSpec, ShortcutSpec};
pub use schema::{Attribute, Object, Schema};
pub use stats::{attach_shortcut_statistics, mutual_information, ShortcutReport, SplitMi};
