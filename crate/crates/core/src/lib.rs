pub mod baselines;
pub mod decoding;
pub mod derivation;
pub mod evaluation;
pub mod fixtures;
pub mod grammar;
pub mod lalr;
pub mod lexer;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod oracle;
pub mod parser;
pub mod preprocess;
pub mod schema;
pub mod semantics;
pub mod sql;
pub mod training;
pub mod workload;

pub use baselines::{extract_templates, random_generate, template_generate, Template};
pub use evaluation::{evaluate, EvalContext, EvaluationReport, MethodRow};
pub use grammar::{load_grammar, Grammar, ProductionId, DEFAULT_SQL_GRAMMAR};
pub use metrics::{feature_wd, matrix_cosine, mmd, qerror, sequence_mmd, validity_rates, wasserstein_1d};
pub use model::{Checkpoint, DiscriminatorModel, GeneratorModel, ModelConfig, Profile};
pub use oracle::{load_database, Database, FeatureVector, QueryOracle};
pub use parser::{parse, tokenize, tree_to_productions, ProductionSequence};
pub use preprocess::{preprocess_workload, BucketMap};
pub use schema::{parse_schema, Schema};
pub use semantics::{BoundGrammar, Rule, RuleSet};
pub use training::{fine_tune, TrainingConfig, TrainingReport, Trainer};
