use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use anyhow::{bail, ensure, Context, Result};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use qgen_core::baselines::{extract_templates, random_generate, template_generate};
use qgen_core::derivation::{productions_to_query, read_sequence_file, render_tokens, write_sequence_file};
use qgen_core::evaluation::{evaluate, EvalContext};
use qgen_core::fixtures::{synthetic_database, synthetic_workload, WorkloadShape};
use qgen_core::grammar::{load_grammar, Grammar, DEFAULT_SQL_GRAMMAR};
use qgen_core::model::{generate, Checkpoint};
use qgen_core::oracle::{load_database, Database, QueryOracle};
use qgen_core::parser::Parser;
use qgen_core::preprocess::{bucketize, debucketize, preprocess_workload, qualify_columns, restructure, BucketMap, PreprocessError};
use qgen_core::schema::{parse_schema, Schema};
use qgen_core::semantics::BoundGrammar;
use qgen_core::sql::{parse_sql, Query};
use qgen_core::training::{fine_tune, prepare_examples, FeatureSource, Trainer};
use qgen_core::workload::{read_workload, read_workload_numbered, write_workload};

use crate::config::{Method, RunConfig};

const META_SCHEMA: &str = "schema";
const META_BUCKETS: &str = "buckets";
const META_GRAMMAR: &str = "grammar";

fn read(path: &Path) -> Result<String> {
    std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))
}

fn write(path: &Path, text: &str) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    }
    std::fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

/// Writes to `--out`, or stdout without one.
fn emit(rc: &RunConfig, text: &str) -> Result<()> {
    match &rc.out {
        Some(p) => write(p, text),
        None => {
            print!("{text}");
            Ok(())
        }
    }
}

fn base_grammar(rc: &RunConfig) -> Result<String> {
    match &rc.grammar {
        Some(p) => read(p),
        None => Ok(DEFAULT_SQL_GRAMMAR.to_string()),
    }
}

fn load_schema(path: &Path) -> Result<Schema> {
    parse_schema(&read(path)?).with_context(|| format!("parsing schema {}", path.display()))
}

/// Everything a grammar-bound command needs.
struct Bundle {
    base: String,
    schema: Schema,
    buckets: Arc<BucketMap>,
    bound: BoundGrammar,
    checkpoint: Option<Checkpoint>,
}

impl Bundle {
    fn new(base: String, schema: Schema, buckets: BucketMap) -> Result<Self> {
        let buckets = Arc::new(buckets);
        let bound = BoundGrammar::new(&base, &schema, Arc::clone(&buckets)).context("binding grammar to schema")?;
        Ok(Bundle { base, schema, buckets, bound, checkpoint: None })
    }

    fn from_checkpoint(path: &Path) -> Result<Self> {
        let ck = Checkpoint::load(path, None).with_context(|| format!("loading checkpoint {}", path.display()))?;
        let meta = |k: &str| ck.metadata.get(k).cloned().with_context(|| format!("checkpoint has no {k} metadata"));
        let schema = parse_schema(&meta(META_SCHEMA)?)?;
        let buckets = BucketMap::from_text(&meta(META_BUCKETS)?)?;
        let mut b = Bundle::new(meta(META_GRAMMAR)?, schema, buckets)?;
        ensure!(
            ck.grammar_digest == b.bound.grammar.digest(),
            "checkpoint grammar digest {} does not match its rebuilt grammar {}",
            ck.grammar_digest,
            b.bound.grammar.digest()
        );
        b.checkpoint = Some(ck);
        Ok(b)
    }

    /// From `--checkpoint` when given, else `--schema` plus `--buckets`.
    fn resolve(rc: &RunConfig) -> Result<Self> {
        if let Some(ck) = &rc.checkpoint {
            return Bundle::from_checkpoint(ck);
        }
        let schema = load_schema(rc.need(&rc.schema, "schema")?)?;
        let buckets = BucketMap::from_text(&read(rc.need(&rc.buckets, "buckets")?)?)?;
        Bundle::new(base_grammar(rc)?, schema, buckets)
    }

    fn metadata(&self, rc: &RunConfig) -> BTreeMap<String, String> {
        BTreeMap::from([
            (META_SCHEMA.to_string(), self.schema.to_text()),
            (META_BUCKETS.to_string(), self.buckets.to_text()),
            (META_GRAMMAR.to_string(), self.base.clone()),
            ("schema_digest".to_string(), self.schema.digest()),
            ("profile".to_string(), format!("{:?}", rc.profile).to_lowercase()),
            ("seed".to_string(), rc.seed.to_string()),
        ])
    }

    fn headers(&self) -> Vec<(&'static str, String)> {
        vec![("grammar", self.bound.grammar.digest().to_string()), ("schema", self.schema.digest())]
    }

    /// Raw or canonical queries to canonical bucketized text; errors name the source line.
    fn canonicalize(&self, queries: &[(usize, String)]) -> Result<Vec<String>> {
        queries.iter().map(|(line, q)| self.canonical_one(q).with_context(|| format!("line {line}"))).collect()
    }

    fn canonical_one(&self, q: &str) -> Result<String, PreprocessError> {
        let parsed = qualify_columns(&restructure(q)?, &self.schema)?;
        let c = if parsed.has_keys() { parsed } else { bucketize(&parsed, &self.buckets)? };
        Ok(c.to_canonical())
    }

    fn to_sql(&self, canonical: &[String], rng: &mut ChaCha8Rng) -> Result<Vec<String>> {
        canonical
            .iter()
            .map(|c| Ok(debucketize(&parse_sql(c)?, &self.buckets, rng)?))
            .collect()
    }
}

fn with_headers(queries: &[String], headers: &[(&str, String)]) -> String {
    let h: Vec<(&str, &str)> = headers.iter().map(|(k, v)| (*k, v.as_str())).collect();
    write_workload(queries, &h)
}

fn workload_lines(rc: &RunConfig) -> Result<Vec<(usize, String)>> {
    Ok(read_workload_numbered(&read(rc.need(&rc.workload, "workload")?)?))
}

pub fn synth(rc: &RunConfig) -> Result<()> {
    let out = rc.need(&rc.out, "out")?;
    let shape = match rc.shape.as_str() {
        "short" => WorkloadShape::Short,
        "long" => WorkloadShape::Long,
        "mixed" => WorkloadShape::Mixed,
        s => bail!("unknown shape {s:?}"),
    };
    let db = synthetic_database(rc.studios, rc.seed);
    std::fs::create_dir_all(out.join("data"))?;
    write(&out.join("schema.txt"), &db.schema().to_text())?;
    db.write_csv(&out.join("data"))?;
    let queries = synthetic_workload(&db, rc.n.unwrap_or(500), shape, rc.seed);
    let text = with_headers(&queries, &[("schema", db.schema().digest()), ("seed", rc.seed.to_string())]);
    write(&out.join("workload.sql"), &text)?;
    log::info!("wrote {} queries over {} rows to {}", queries.len(), db.total_rows(), out.display());
    Ok(())
}

pub fn preprocess(rc: &RunConfig) -> Result<()> {
    let out = rc.need(&rc.out, "out")?;
    let schema = load_schema(rc.need(&rc.schema, "schema")?)?;
    let lines = workload_lines(rc)?;
    ensure!(!lines.is_empty(), "workload is empty");
    let raw: Vec<&str> = lines.iter().map(|(_, q)| q.as_str()).collect();
    let (canon, map) = preprocess_workload(&raw, &schema, rc.bucket_count).map_err(|(i, e)| anyhow::anyhow!("line {}: {e}", lines[i].0))?;
    let b = Bundle::new(base_grammar(rc)?, schema, map)?;
    let texts: Vec<String> = canon.iter().map(Query::to_canonical).collect();
    for (t, (line, _)) in texts.iter().zip(&lines) {
        let v = b.bound.validate(t);
        ensure!(v.syntactic, "line {line}: outside the grammar: {t}");
    }
    write(&out.join("canonical.sql"), &with_headers(&texts, &b.headers()))?;
    write(&out.join("buckets.txt"), &b.buckets.to_text())?;
    if b.buckets.out_of_range() > 0 {
        log::warn!("{} constants fell outside every bucket", b.buckets.out_of_range());
    }
    Ok(())
}

/// The grammar `parse` and `derive` work with: bound to a schema when one is
/// given, otherwise the grammar file as written.
fn standalone_grammar(rc: &RunConfig) -> Result<Arc<Grammar>> {
    if rc.schema.is_some() || rc.checkpoint.is_some() {
        let b = match (&rc.checkpoint, &rc.buckets) {
            (None, None) => Bundle::new(base_grammar(rc)?, load_schema(rc.need(&rc.schema, "schema")?)?, BucketMap::empty())?,
            _ => Bundle::resolve(rc)?,
        };
        return Ok(b.bound.grammar);
    }
    Ok(Arc::new(load_grammar(&base_grammar(rc)?)?))
}

pub fn parse(rc: &RunConfig) -> Result<()> {
    let g = standalone_grammar(rc)?;
    let parser = Parser::new(Arc::clone(&g)).map_err(|c| anyhow::anyhow!("grammar is not LALR(1):\n{c}"))?;
    let seqs = workload_lines(rc)?
        .iter()
        .map(|(line, q)| parser.sequence_of(q).map(|s| s.ids).with_context(|| format!("line {line}")))
        .collect::<Result<Vec<_>>>()?;
    emit(rc, &write_sequence_file(g.digest(), &seqs))
}

pub fn derive(rc: &RunConfig) -> Result<()> {
    let g = standalone_grammar(rc)?;
    let seqs = read_sequence_file(&read(rc.need(&rc.workload, "workload")?)?, Some(g.digest()))?;
    let mut out = String::new();
    for (i, s) in seqs.iter().enumerate() {
        let terminals = productions_to_query(&g, s).with_context(|| format!("sequence {}", i + 1))?;
        out.push_str(&render_tokens(&g, &terminals));
        out.push('\n');
    }
    emit(rc, &out)
}

fn report_path(rc: &RunConfig, out: &Path) -> PathBuf {
    rc.report.clone().unwrap_or_else(|| PathBuf::from(format!("{}.jsonl", out.display())))
}

pub fn train(rc: &RunConfig) -> Result<()> {
    let out = rc.need(&rc.out, "out")?;
    let lines = workload_lines(rc)?;
    ensure!(!lines.is_empty(), "workload is empty");
    let bundle = if rc.fine_tune {
        Bundle::from_checkpoint(rc.need(&rc.checkpoint, "checkpoint")?)?
    } else {
        let schema = load_schema(rc.need(&rc.schema, "schema")?)?;
        let map = match &rc.buckets {
            Some(p) => BucketMap::from_text(&read(p)?)?,
            None => {
                let raw: Vec<&str> = lines.iter().map(|(_, q)| q.as_str()).collect();
                preprocess_workload(&raw, &schema, rc.bucket_count).map_err(|(i, e)| anyhow::anyhow!("line {}: {e}", lines[i].0))?.1
            }
        };
        Bundle::new(base_grammar(rc)?, schema, map)?
    };
    let canonical = bundle.canonicalize(&lines)?;
    let db: Option<Database> = match &rc.data {
        Some(dir) => Some(load_database(&bundle.schema, dir)?),
        None => {
            log::warn!("no --data given: feature oracle unavailable, running MLE pretraining only");
            None
        }
    };
    let features = db.as_ref().map(|d| FeatureSource::new(d as &dyn QueryOracle, &bundle.buckets, rc.seed));
    let examples = prepare_examples(&bundle.bound, rc.rules, &canonical, features.as_ref())?;
    let trainer = match &bundle.checkpoint {
        Some(ck) => fine_tune(&bundle.bound, rc.rules, ck.clone(), examples, features.as_ref(), rc.training.clone())?,
        None => {
            let mut t = Trainer::new(&bundle.bound, rc.rules, rc.training.clone(), rc.profile.config())?;
            t.fit(examples, features.as_ref())?;
            t
        }
    };
    trainer.checkpoint(bundle.metadata(rc)).save(out)?;
    write(&report_path(rc, out), &trainer.report.to_jsonl())?;
    if let Some(last) = trainer.report.epochs.last() {
        log::info!("trained {} epochs; last eval NLL {:?}", trainer.report.epochs.len(), last.eval_nll);
    }
    Ok(())
}

fn run_generation(rc: &RunConfig, method: Method) -> Result<()> {
    let n = rc.n.unwrap_or(100);
    let bundle = Bundle::resolve(rc)?;
    let mut rng = ChaCha8Rng::seed_from_u64(rc.seed);
    let canonical: Vec<String> = match method {
        _ if n == 0 => Vec::new(),
        Method::Gan => {
            let ck = bundle.checkpoint.as_ref().context("--method gan needs --checkpoint")?;
            let (seqs, capped) = generate(&ck.generator, &bundle.bound.semantics, rc.rules, n, &mut rng)?;
            if capped > 0 {
                log::warn!("{capped} samples hit the step cap and were redrawn");
            }
            seqs.into_iter().map(|s| s.text).collect()
        }
        Method::Random => random_generate(&bundle.bound.semantics, rc.rules, n, &mut rng)?.into_iter().map(|g| g.text).collect(),
        Method::Template => {
            let source = bundle.canonicalize(&workload_lines(rc)?)?;
            let queries = source.iter().map(|c| parse_sql(c)).collect::<Result<Vec<_>, _>>()?;
            template_generate(&extract_templates(&queries, &bundle.buckets)?, &bundle.buckets, n, &mut rng)?
        }
    };
    let sql = bundle.to_sql(&canonical, &mut rng)?;
    let mut headers = bundle.headers();
    headers.push(("method", method.name().to_string()));
    headers.push(("seed", rc.seed.to_string()));
    emit(rc, &with_headers(&sql, &headers))
}

pub fn generate_cmd(rc: &RunConfig) -> Result<()> {
    run_generation(rc, rc.method)
}

pub fn baseline(rc: &RunConfig) -> Result<()> {
    ensure!(rc.method != Method::Gan, "baseline takes --method random or --method template");
    run_generation(rc, rc.method)
}

pub fn evaluate_cmd(rc: &RunConfig) -> Result<()> {
    ensure!(!rc.compare.is_empty(), "--compare NAME=PATH is required at least once");
    let bundle = if rc.checkpoint.is_some() || rc.buckets.is_some() { Some(Bundle::resolve(rc)?) } else { None };
    let schema = match &bundle {
        Some(b) => b.schema.clone(),
        None => load_schema(rc.need(&rc.schema, "schema")?)?,
    };
    let db = rc.data.as_ref().map(|d| load_database(&schema, d)).transpose()?;
    if db.is_none() {
        log::warn!("no --data given: comparing structural features only");
    }
    let reference_path = rc.need(&rc.workload, "workload")?;
    let reference = read_workload(&read(reference_path)?);
    let others = rc
        .compare
        .iter()
        .map(|(name, path)| Ok((name.clone(), read_workload(&read(path)?))))
        .collect::<Result<Vec<_>>>()?;
    let methods: Vec<(&str, &[String])> = others.iter().map(|(n, w)| (n.as_str(), w.as_slice())).collect();
    let ctx = EvalContext {
        schema: &schema,
        buckets: bundle.as_ref().map(|b| b.buckets.as_ref()),
        bound: bundle.as_ref().map(|b| &b.bound),
        oracle: db.as_ref().map(|d| d as &dyn QueryOracle),
        seed: rc.seed,
    };
    let name = reference_path.file_stem().map_or("reference".into(), |s| s.to_string_lossy().into_owned());
    let report = evaluate(&ctx, (&name, &reference), &methods)?;
    emit(rc, &(serde_json::to_string_pretty(&report)? + "\n"))
}
