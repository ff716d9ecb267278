//! File formats, patch extraction, synthetic scenes, few-shot splits,
//! standardization, class catalogs and the prompt vocabulary.

mod catalog;
mod cube;
mod patch;
mod split;
mod standardize;
mod synth;
mod vocab;

pub use catalog::{ClassCatalog, ClassEntry, PromptTemplate};
pub use cube::{
    load_cube, load_labels, save_cube, save_labels, Cube, LabelMap, CUBE_HEADER_LEN, LABEL_HEADER_LEN,
};
pub use patch::{extract_patch, extract_window, reflect_index, Coord, Patch, PatchSample};
pub use split::{sample_fewshot, FewShotSplit};
pub use standardize::{standardize, ChannelStats};
pub use synth::{box_filter, synth_scene, Scene, SynthParams};
pub use vocab::{normalize_words, Vocab, DEFAULT_CONTEXT};
