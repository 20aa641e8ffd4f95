//! Command-line flags merged over an optional `key = value` config file.

use std::path::PathBuf;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use qgen_core::model::Profile;
use qgen_core::semantics::{Rule, RuleSet};
use qgen_core::training::TrainingConfig;

#[derive(Debug, Parser)]
#[command(name = "qgen", version, about = "Learn a SQL workload and synthesize similar ones")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
    #[command(flatten)]
    pub flags: Flags,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Subcommand)]
pub enum Command {
    /// Write a synthetic schema, CSV tables and workload.
    Synth,
    /// Canonicalize and bucketize a raw workload.
    Preprocess,
    /// Canonical queries to production sequences.
    Parse,
    /// Production sequences back to canonical queries.
    Derive,
    /// Train a generator (or fine-tune one with --fine-tune).
    Train,
    /// Generate queries with the trained model or a baseline.
    Generate,
    /// Generate queries with the random or template baseline.
    Baseline,
    /// Compare workloads against a reference and write a JSON report.
    Evaluate,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Method {
    Gan,
    Random,
    Template,
}

impl Method {
    fn parse(s: &str) -> Result<Method> {
        Ok(match s {
            "gan" => Method::Gan,
            "random" => Method::Random,
            "template" => Method::Template,
            _ => bail!("unknown method {s:?}"),
        })
    }

    pub fn name(self) -> &'static str {
        match self {
            Method::Gan => "gan",
            Method::Random => "random",
            Method::Template => "template",
        }
    }
}

#[derive(Debug, Clone, Default, Args)]
pub struct Flags {
    /// `key = value` file; flags given on the command line win.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Base grammar file (defaults to the built-in SQL grammar).
    #[arg(long, global = true)]
    pub grammar: Option<PathBuf>,
    #[arg(long, global = true)]
    pub schema: Option<PathBuf>,
    /// Directory of `<table>.csv` files.
    #[arg(long, global = true)]
    pub data: Option<PathBuf>,
    #[arg(long, global = true)]
    pub workload: Option<PathBuf>,
    /// Bucket map written by `preprocess`.
    #[arg(long, global = true)]
    pub buckets: Option<PathBuf>,
    #[arg(long, global = true)]
    pub checkpoint: Option<PathBuf>,
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    /// Training log (JSON lines); defaults to `<out>.jsonl`.
    #[arg(long, global = true)]
    pub report: Option<PathBuf>,
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    #[arg(long, global = true)]
    pub n: Option<usize>,
    #[arg(long, global = true, value_enum)]
    pub method: Option<Method>,
    /// Turn off a semantic rule (R1..R5); repeatable.
    #[arg(long = "disable-rule", global = true)]
    pub disable_rule: Vec<String>,
    /// Model size: paper, desk or tiny.
    #[arg(long, global = true)]
    pub profile: Option<String>,
    /// Buckets per column domain for preprocessing.
    #[arg(long = "bucket-count", global = true)]
    pub bucket_count: Option<usize>,
    #[arg(long = "fine-tune", global = true)]
    pub fine_tune: bool,
    /// Workload to compare, as NAME=PATH; repeatable.
    #[arg(long, global = true)]
    pub compare: Vec<String>,
    /// Training setting override, as KEY=VALUE; repeatable.
    #[arg(long = "set", global = true)]
    pub set: Vec<String>,
    /// `synth`: number of studios (movies and reviews scale with it).
    #[arg(long, global = true)]
    pub studios: Option<usize>,
    /// `synth`: short, long or mixed.
    #[arg(long, global = true)]
    pub shape: Option<String>,
}

/// Fully resolved settings for one invocation.
#[derive(Debug, Clone)]
pub struct RunConfig {
    pub grammar: Option<PathBuf>,
    pub schema: Option<PathBuf>,
    pub data: Option<PathBuf>,
    pub workload: Option<PathBuf>,
    pub buckets: Option<PathBuf>,
    pub checkpoint: Option<PathBuf>,
    pub out: Option<PathBuf>,
    pub report: Option<PathBuf>,
    pub seed: u64,
    pub n: Option<usize>,
    pub method: Method,
    pub rules: RuleSet,
    pub profile: Profile,
    pub bucket_count: usize,
    pub fine_tune: bool,
    pub compare: Vec<(String, PathBuf)>,
    pub training: TrainingConfig,
    pub studios: usize,
    pub shape: String,
}

pub const DEFAULT_SEED: u64 = 42;

fn split_pair(s: &str) -> Result<(String, String)> {
    let (k, v) = s.split_once('=').with_context(|| format!("expected KEY=VALUE, got {s:?}"))?;
    Ok((k.trim().to_string(), v.trim().to_string()))
}

impl RunConfig {
    pub fn resolve(flags: &Flags) -> Result<RunConfig> {
        let mut file = Flags::default();
        let mut training = TrainingConfig::default();
        let mut file_seed = None;
        if let Some(path) = &flags.config {
            let text = std::fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
            for (i, line) in text.lines().enumerate() {
                let line = line.split('#').next().unwrap_or("").trim();
                if line.is_empty() {
                    continue;
                }
                let (k, v) = split_pair(line).with_context(|| format!("{}:{}", path.display(), i + 1))?;
                let p = || Some(PathBuf::from(&v));
                match k.as_str() {
                    "grammar" => file.grammar = p(),
                    "schema" => file.schema = p(),
                    "data" => file.data = p(),
                    "workload" => file.workload = p(),
                    "buckets" => file.buckets = p(),
                    "checkpoint" => file.checkpoint = p(),
                    "out" => file.out = p(),
                    "report" => file.report = p(),
                    "seed" => file_seed = Some(v.parse().with_context(|| format!("bad seed {v:?}"))?),
                    "n" => file.n = Some(v.parse().with_context(|| format!("bad n {v:?}"))?),
                    "method" => file.method = Some(Method::parse(&v)?),
                    "profile" => file.profile = Some(v),
                    "bucket_count" => file.bucket_count = Some(v.parse().with_context(|| format!("bad bucket_count {v:?}"))?),
                    "fine_tune" => file.fine_tune = v == "true",
                    "disable_rule" => file.disable_rule.extend(v.split(',').map(|r| r.trim().to_string())),
                    "compare" => file.compare.push(v),
                    "studios" => file.studios = Some(v.parse().with_context(|| format!("bad studios {v:?}"))?),
                    "shape" => file.shape = Some(v),
                    _ => training.set(&k, &v).with_context(|| format!("{}:{}", path.display(), i + 1))?,
                }
            }
        }
        for s in &flags.set {
            let (k, v) = split_pair(s)?;
            training.set(&k, &v)?;
        }
        let seed = flags.seed.or(file_seed).unwrap_or(DEFAULT_SEED);
        training.seed = seed;
        training.validate()?;
        let profile_name = flags.profile.clone().or(file.profile).unwrap_or_else(|| "desk".into());
        let profile = Profile::parse(&profile_name).with_context(|| format!("unknown profile {profile_name:?}"))?;
        let mut rules = RuleSet::all();
        let disabled = if flags.disable_rule.is_empty() { &file.disable_rule } else { &flags.disable_rule };
        for r in disabled {
            rules = rules.without(Rule::parse(r).with_context(|| format!("unknown rule {r:?}"))?);
        }
        let compare = if flags.compare.is_empty() { &file.compare } else { &flags.compare }
            .iter()
            .map(|c| split_pair(c).map(|(k, v)| (k, PathBuf::from(v))))
            .collect::<Result<Vec<_>>>()?;
        Ok(RunConfig {
            grammar: flags.grammar.clone().or(file.grammar),
            schema: flags.schema.clone().or(file.schema),
            data: flags.data.clone().or(file.data),
            workload: flags.workload.clone().or(file.workload),
            buckets: flags.buckets.clone().or(file.buckets),
            checkpoint: flags.checkpoint.clone().or(file.checkpoint),
            out: flags.out.clone().or(file.out),
            report: flags.report.clone().or(file.report),
            seed,
            n: flags.n.or(file.n),
            method: flags.method.or(file.method).unwrap_or(Method::Gan),
            rules,
            profile,
            bucket_count: flags.bucket_count.or(file.bucket_count).unwrap_or(16),
            fine_tune: flags.fine_tune || file.fine_tune,
            compare,
            training,
            studios: flags.studios.or(file.studios).unwrap_or(20),
            shape: flags.shape.clone().or(file.shape).unwrap_or_else(|| "mixed".into()),
        })
    }

    pub fn need<'a>(&self, value: &'a Option<PathBuf>, flag: &str) -> Result<&'a PathBuf> {
        value.as_ref().with_context(|| format!("--{flag} is required"))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn flags_override_file() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("run.cfg");
        std::fs::write(&path, "seed = 7\nprofile = tiny\npretrain_epochs = 3 # short\ndisable_rule = R1, R2\nn = 5\n").unwrap();
        let flags = Flags { config: Some(path), seed: Some(9), set: vec!["pretrain_epochs=4".into()], ..Flags::default() };
        let rc = RunConfig::resolve(&flags).unwrap();
        assert_eq!((rc.seed, rc.training.seed, rc.training.pretrain_epochs, rc.n), (9, 9, 4, Some(5)));
        assert_eq!(rc.profile, Profile::Tiny);
        assert!(!rc.rules.contains(Rule::R1) && !rc.rules.contains(Rule::R2) && rc.rules.contains(Rule::R3));
    }

    #[test]
    fn bad_values_are_rejected() {
        let flags = Flags { profile: Some("huge".into()), ..Flags::default() };
        assert!(RunConfig::resolve(&flags).is_err());
        let flags = Flags { disable_rule: vec!["R9".into()], ..Flags::default() };
        assert!(RunConfig::resolve(&flags).is_err());
        let flags = Flags { set: vec!["nonsense=1".into()], ..Flags::default() };
        assert!(RunConfig::resolve(&flags).is_err());
    }
}
