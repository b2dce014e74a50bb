//! Formulas, composition graphs, element features and recipe datasets.

mod dataset;
mod features;
mod formula;
mod graph;

pub use dataset::{
    build_vocab_and_kb, load_recipes, read_recipes, split_dataset, IngestStats, Ingested,
    KnowledgeBase, LabeledDataset, PrecursorVocabulary, Recipe, RecipeLine, RecipeRecord,
    RejectEntry, SplitMode, Splits, TRAIN_LAST_YEAR, VALID_LAST_YEAR,
};
pub use features::{fallback_element_features, ElementFeatureTable, FeatureSource, DEFAULT_FEATURE_DIM};
pub use formula::{parse_formula, Amount, Composition, FormulaError, MAX_DENOMINATOR};
pub use graph::{build_graph, CompositionGraph};
