use std::collections::{BTreeMap, HashMap};
use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Duration;

use medaug_core::assemble::{drop_rejected, export, merge_and_protect, sample_for_review, split};
use medaug_core::completion::RawCompletion;
use medaug_core::config::{PipelineConfig, ProviderKind};
use medaug_core::curate::{funnel_csv, funnel_table, run_funnel, CurationReport};
use medaug_core::embed::{DeterministicEmbedder, EmbeddingProvider, SeedIndex};
use medaug_core::promptgen::{build_plan, CategoryRules, GenerationPlan, TemplateSet};
use medaug_core::record::{read_jsonl, read_jsonl_values, write_jsonl, write_jsonl_values};
use medaug_core::review::{read_verdicts, rejected_record_ids};
use medaug_core::score::{corpus_score, read_predictions, read_score_csv, render_comparison, write_score_csv};
use medaug_core::{QARecord, Source};
use medaug_gen::execute::SourceLimits;
use medaug_gen::{execute, ExecuteOptions, HttpChatProvider, HttpEmbedder, MockProvider, Provider};
use serde::{Deserialize, Serialize};

use crate::args::{AssembleArgs, Command, FunnelArgs, GlobalArgs, ProviderChoice, ReportArgs, ScoreArgs, ServeArgs};
use crate::{clock_from_env, files, invalid, load_seed_corpus, read_json, write_json, CliError, CliResult, Context, Runtime};

/// Loads the configuration named by `--config`, else the run's own copy,
/// else (when `required` is false) the defaults; then applies overrides.
pub fn load_context(global: &GlobalArgs, required: bool) -> CliResult<Context> {
    let run_copy = global.out_dir.join(files::RUN_CONFIG);
    let mut config = match &global.config {
        Some(path) => PipelineConfig::load(path).validation()?,
        None if run_copy.exists() => PipelineConfig::load(&run_copy).validation()?,
        None if required => {
            return Err(invalid(format!("no --config given and {} does not exist", run_copy.display())));
        }
        None => PipelineConfig::default(),
    };
    // Absolute input paths, so the run's copy of the config resolves the same
    // files from inside the output directory.
    let c = &mut config.corpus;
    for p in [&mut c.seeds, &mut c.real, &mut c.templates, &mut c.categories]
        .into_iter()
        .flatten()
    {
        *p = std::path::absolute(&*p).runtime()?;
    }
    if let Some(seed) = global.seed {
        config.promptgen.master_seed = seed;
    }
    if let Some(n) = global.n {
        config.promptgen = config.promptgen.with_n(n);
    }
    config.validate().validation()?;
    Ok(Context {
        digest: config.digest(),
        config,
        out_dir: global.out_dir.clone(),
        force: global.force,
        clock: clock_from_env()?,
    })
}

pub fn run(global: &GlobalArgs, command: &Command) -> CliResult<()> {
    std::fs::create_dir_all(&global.out_dir).runtime()?;
    match command {
        Command::Plan => plan(&load_context(global, true)?),
        Command::Generate => generate(&load_context(global, true)?, global.provider),
        Command::Curate => curate(&load_context(global, true)?).map(|_| ()),
        Command::Assemble(a) => assemble(&load_context(global, true)?, a),
        Command::SampleReview => sample_review(&load_context(global, true)?),
        Command::ServeReview(a) => serve_review(global, a),
        Command::Score(a) => score(&load_context(global, false)?, a),
        Command::Report(a) => report(&global.out_dir, a),
        Command::FunnelStats(a) => funnel_stats(&global.out_dir, a),
    }
}

fn category_rules(config: &PipelineConfig) -> CliResult<Option<CategoryRules>> {
    config
        .corpus
        .categories
        .as_deref()
        .map(CategoryRules::load)
        .transpose()
        .validation()
}

fn seeds(ctx: &Context) -> CliResult<Vec<QARecord>> {
    let path = ctx
        .config
        .corpus
        .seeds
        .as_deref()
        .ok_or_else(|| invalid("corpus.seeds is not configured"))?;
    load_seed_corpus(path, category_rules(&ctx.config)?.as_ref(), ctx.clock)
}

pub fn plan(ctx: &Context) -> CliResult<()> {
    let seeds = seeds(ctx)?;
    let templates_path = ctx
        .config
        .corpus
        .templates
        .as_deref()
        .ok_or_else(|| invalid("corpus.templates is not configured"))?;
    let templates = TemplateSet::load(templates_path).validation()?;
    let mut plan = build_plan(&seeds, &templates, &ctx.config.promptgen.plan_config()).validation()?;
    plan.config_digest = ctx.digest.clone();
    write_json(&plan, &ctx.path(files::PLAN))?;
    write_json(&ctx.config, &ctx.path(files::RUN_CONFIG))?;
    let counts = plan.counts_by_source();
    println!(
        "plan {} with {} requests {:?} (config {})",
        plan.plan_id,
        plan.requests.len(),
        counts,
        ctx.digest
    );
    Ok(())
}

fn load_plan(ctx: &Context) -> CliResult<GenerationPlan> {
    let plan: GenerationPlan = read_json(&ctx.path(files::PLAN))?;
    ctx.check_digest(files::PLAN, &plan.config_digest)?;
    Ok(plan)
}

#[derive(Debug, Serialize, Deserialize)]
struct GenerationMeta {
    config_digest: String,
    plan_id: String,
    providers: BTreeMap<Source, ProviderKind>,
}

pub fn generate(ctx: &Context, choice: Option<ProviderChoice>) -> CliResult<()> {
    let plan = load_plan(ctx)?;
    let mut providers: HashMap<Source, Arc<dyn Provider>> = HashMap::new();
    let mut options = ExecuteOptions::default();
    let mut kinds = BTreeMap::new();
    let mut seed_map: Option<Arc<HashMap<String, QARecord>>> = None;
    for &source in plan.counts_by_source().keys() {
        let settings = ctx.config.provider(source);
        let kind = match choice {
            Some(ProviderChoice::Mock) => ProviderKind::Mock,
            Some(ProviderChoice::Http) => ProviderKind::Http,
            None => settings.kind,
        };
        let provider: Arc<dyn Provider> = match kind {
            ProviderKind::Mock => {
                if seed_map.is_none() {
                    seed_map = Some(Arc::new(seeds(ctx)?.into_iter().map(|r| (r.id.clone(), r)).collect()));
                }
                let map = seed_map.clone().expect("set above");
                options.limits.insert(
                    source,
                    SourceLimits {
                        requests_per_second: 1e9,
                        concurrency: 16,
                        max_attempts: 1,
                        backoff_base: Duration::ZERO,
                        timeout: Duration::from_secs(60),
                    },
                );
                Arc::new(MockProvider::new(source, map, plan.master_seed, settings.malformed_rate))
            }
            ProviderKind::Http => {
                options.limits.insert(source, SourceLimits::from(&settings));
                Arc::new(HttpChatProvider::from_settings(source, &settings).validation()?)
            }
        };
        kinds.insert(source, kind);
        providers.insert(source, provider);
    }

    let rt = tokio::runtime::Builder::new_multi_thread().enable_all().build().runtime()?;
    let summary = rt
        .block_on(execute(
            &plan,
            &providers,
            &options,
            &ctx.path(files::COMPLETIONS),
            &ctx.path(files::GENERATION_FAILURES),
        ))
        .runtime()?;
    write_json(
        &GenerationMeta {
            config_digest: ctx.digest.clone(),
            plan_id: plan.plan_id.clone(),
            providers: kinds,
        },
        &ctx.path(files::GENERATION_META),
    )?;
    println!(
        "generated {} new completions ({} resumed, {} failed) {:?}",
        summary.completed, summary.resumed, summary.failed, summary.per_source
    );
    Ok(())
}

pub fn embedder(config: &PipelineConfig) -> CliResult<Box<dyn EmbeddingProvider>> {
    let e = &config.embeddings;
    match e.kind.as_str() {
        "deterministic" => Ok(Box::new(DeterministicEmbedder)),
        _ => {
            let endpoint = e
                .endpoint
                .clone()
                .ok_or_else(|| invalid("embeddings.endpoint is required for http embeddings"))?;
            let key = match &e.api_key_env {
                Some(var) => Some(std::env::var(var).map_err(|_| invalid(format!("environment variable {var} is not set")))?),
                None => None,
            };
            Ok(Box::new(
                HttpEmbedder::new(endpoint, key, Duration::from_millis(e.timeout_ms)).runtime()?,
            ))
        }
    }
}

pub fn curate(ctx: &Context) -> CliResult<CurationReport> {
    let plan = load_plan(ctx)?;
    let meta_path = ctx.path(files::GENERATION_META);
    if meta_path.exists() {
        let meta: GenerationMeta = read_json(&meta_path)?;
        ctx.check_digest(files::GENERATION_META, &meta.config_digest)?;
    }
    let completions: Vec<RawCompletion> = read_jsonl_values(&ctx.path(files::COMPLETIONS))
        .validation()?
        .into_iter()
        .map(|(_, c)| c)
        .collect();
    let provider = embedder(&ctx.config)?;
    let seeds = seeds(ctx)?;
    let index = SeedIndex::build(&seeds, provider.as_ref(), ctx.config.filter.target).runtime()?;
    let out = run_funnel(
        &completions,
        &plan,
        &index,
        provider.as_ref(),
        &ctx.config.curate_config(),
        &ctx.digest,
        ctx.clock,
    )
    .runtime()?;
    out.report
        .check_conservation()
        .map_err(|e| CliError::Runtime(anyhow::anyhow!("funnel conservation violated: {e}")))?;

    write_jsonl(&out.accepted, &ctx.path(files::ACCEPTED)).runtime()?;
    write_jsonl_values(&out.rejections, &ctx.path(files::REJECTIONS)).runtime()?;
    write_jsonl_values(&out.duplicates, &ctx.path(files::DUPLICATES)).runtime()?;
    write_json(&out.report, &ctx.path(files::CURATION_REPORT))?;
    std::fs::write(ctx.path(files::FUNNEL_CSV), funnel_csv(&out.report).runtime()?).runtime()?;
    println!("{}", funnel_table(&out.report));
    println!("accepted {} of {} completions", out.accepted.len(), completions.len());
    Ok(out.report)
}

fn real_corpus(ctx: &Context) -> CliResult<Vec<QARecord>> {
    let corpus = &ctx.config.corpus;
    let path = corpus
        .real
        .as_deref()
        .or(corpus.seeds.as_deref())
        .ok_or_else(|| invalid("corpus.real (or corpus.seeds) is not configured"))?;
    load_seed_corpus(path, category_rules(&ctx.config)?.as_ref(), ctx.clock)
}

fn load_accepted(ctx: &Context) -> CliResult<Vec<QARecord>> {
    let report: CurationReport = read_json(&ctx.path(files::CURATION_REPORT))?;
    ctx.check_digest(files::CURATION_REPORT, &report.config_digest)?;
    read_jsonl(&ctx.path(files::ACCEPTED)).validation()
}

pub fn assemble(ctx: &Context, args: &AssembleArgs) -> CliResult<()> {
    let real = real_corpus(ctx)?;
    let mut synthetic = load_accepted(ctx)?;
    let verdicts_path = args
        .verdicts
        .clone()
        .or_else(|| Some(ctx.path(files::VERDICTS)).filter(|p| p.exists()));
    if let Some(path) = verdicts_path {
        let rejected = rejected_record_ids(&read_verdicts(&path).validation()?);
        let before = synthetic.len();
        synthetic = drop_rejected(synthetic, &rejected);
        println!("excluded {} review-rejected records", before - synthetic.len());
    }
    let merged = merge_and_protect(&real, &synthetic, &ctx.config.dedup).validation()?;
    write_jsonl_values(&merged.dropped, &ctx.path(files::MERGE_DROPPED)).runtime()?;
    let ids = split(&merged.records, ctx.config.assemble.train_ratio, ctx.config.promptgen.master_seed).validation()?;
    let (manifest, paths) = export(
        &merged.records,
        &ids,
        &ctx.config.assemble.training,
        &ctx.digest,
        &ctx.path(files::CORPUS_DIR),
    )
    .runtime()?;
    println!(
        "corpus {}: {} records {:?}, {} train / {} val, {} dropped as duplicates -> {}",
        manifest.corpus_id,
        merged.records.len(),
        manifest.counts,
        ids.train.len(),
        ids.val.len(),
        merged.dropped.len(),
        paths.train.parent().unwrap_or(Path::new(".")).display()
    );
    Ok(())
}

pub fn sample_review(ctx: &Context) -> CliResult<()> {
    let accepted = load_accepted(ctx)?;
    let sample = sample_for_review(&accepted, &ctx.config.assemble.review, ctx.config.promptgen.master_seed).validation()?;
    write_jsonl(&sample.records, &ctx.path(files::REVIEW_SAMPLE)).runtime()?;
    println!("review sample of {} records", sample.records.len());
    Ok(())
}

pub fn serve_review(global: &GlobalArgs, args: &ServeArgs) -> CliResult<()> {
    let sample_path = args.sample.clone().unwrap_or_else(|| global.out_dir.join(files::REVIEW_SAMPLE));
    let sample = if sample_path.exists() {
        Some(read_jsonl(&sample_path).validation()?)
    } else {
        eprintln!("warning: {} not found; serving without a sample", sample_path.display());
        None
    };
    let log = args.log.clone().unwrap_or_else(|| global.out_dir.join(files::VERDICTS));
    let per_record = if args.dual_review { 2 } else { 1 };
    let service = medaug_review::ReviewService::open(sample, &log, per_record, Arc::new(chrono::Utc::now)).validation()?;
    let addr: SocketAddr = format!("{}:{}", args.host, args.port)
        .parse()
        .map_err(|e| invalid(format!("bad address: {e}")))?;
    let rt = tokio::runtime::Builder::new_multi_thread().enable_all().build().runtime()?;
    rt.block_on(medaug_review::serve(addr, Arc::new(service), &args.origins)).runtime()
}

pub fn score(ctx: &Context, args: &ScoreArgs) -> CliResult<()> {
    let predictions = read_predictions(&args.predictions).validation()?;
    let references = read_jsonl(&args.references).validation()?;
    let provider = embedder(&ctx.config)?;
    let report = corpus_score(
        &predictions,
        &references,
        provider.as_ref(),
        &ctx.config.score.seeds,
        ctx.config.score.idf,
        &args.model,
        &args.configuration,
    )
    .validation()?;
    write_json(&report, &ctx.path(files::SCORE_REPORT))?;
    if let Some(table) = &args.table {
        let mut rows = if table.exists() {
            read_score_csv(&std::fs::read_to_string(table).runtime()?).validation()?
        } else {
            Vec::new()
        };
        rows.push(report.to_row());
        std::fs::write(table, write_score_csv(&rows).runtime()?).runtime()?;
    }
    println!(
        "{} / {}: P {:.4} R {:.4} F1 {:.4} (sd {:.4}, {} runs)",
        report.model,
        report.configuration,
        report.precision.mean,
        report.recall.mean,
        report.f1.mean,
        report.f1.stddev,
        report.runs.len()
    );
    Ok(())
}

/// Renders each score CSV as a comparison table; returns the markdown.
pub fn render_report(tables: &[PathBuf], captions: &[String]) -> CliResult<String> {
    let mut out = String::new();
    for (i, path) in tables.iter().enumerate() {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::Runtime(anyhow::anyhow!("{}: {e}", path.display())))?;
        let rows = read_score_csv(&text).map_err(|e| invalid(format!("{}: {e}", path.display())))?;
        let caption = captions
            .get(i)
            .cloned()
            .unwrap_or_else(|| path.file_stem().unwrap_or_default().to_string_lossy().into_owned());
        let table = render_comparison(&rows, &caption).map_err(|e| invalid(format!("{}: {e}", path.display())))?;
        if i > 0 {
            out.push('\n');
        }
        out.push_str(&table.render_text());
    }
    Ok(out)
}

pub fn report(out_dir: &Path, args: &ReportArgs) -> CliResult<()> {
    let text = render_report(&args.tables, &args.captions)?;
    std::fs::write(out_dir.join(files::REPORT), &text).runtime()?;
    print!("{text}");
    Ok(())
}

pub fn funnel_stats(out_dir: &Path, args: &FunnelArgs) -> CliResult<()> {
    let path = args.report.clone().unwrap_or_else(|| out_dir.join(files::CURATION_REPORT));
    let report: CurationReport = read_json(&path)?;
    report
        .check_conservation()
        .map_err(|e| invalid(format!("{}: {e}", path.display())))?;
    std::fs::write(out_dir.join(files::FUNNEL_CSV), funnel_csv(&report).runtime()?).runtime()?;
    print!("{}", funnel_table(&report));
    Ok(())
}
