use std::collections::{BTreeMap, HashMap};
use std::path::{Path, PathBuf};
use std::sync::Arc;

use anyhow::{bail, Context, Result};
use argus_core::clock::SystemClock;
use argus_core::dataset::{blend_sft, DatasetStore, LabelSource, LabeledSample, Partition, SampleRecord};
use argus_core::debate::{select_latent, Stage2Scope};
use argus_core::eval::{
    adversarial_eval, default_component_variants, render_table, run_component_ablation, run_stage_ablation,
    EvalReport,
};
use argus_core::fixtures::{self, P_NEW, P_OLD};
use argus_core::jsonl;
use argus_core::pipeline::{builtin_registry, run, PipelineConfig, PipelineRun, StageId};
use argus_core::policy::PolicyRegistry;
use argus_core::retrieval::{EvidenceIndex, Exemplar};
use argus_core::synth::{evade, Corpus, CorpusSpec, PlantedSample};
use clap::{Args, Parser, Subcommand};

#[derive(Parser)]
#[command(name = "argus", version, about = "Policy-adaptive ad governance engine")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Policy catalog operations.
    #[command(subcommand)]
    Policy(PolicyCmd),
    /// Sample and label files.
    #[command(subcommand)]
    Data(DataCmd),
    /// Evidence index snapshots.
    #[command(subcommand)]
    Index(IndexCmd),
    /// Generate a planted synthetic corpus.
    Synth(SynthArgs),
    /// Stage II: debate conflicting historical labels and rectify them.
    Rectify(RectifyArgs),
    /// Stage III candidates: latent violations of one policy above tau.
    Discover(DiscoverArgs),
    /// Rollout groups with rewards and advantages for one stage.
    Rewards(RewardsArgs),
    /// Scoring and ablations.
    #[command(subcommand)]
    Eval(EvalCmd),
    /// Run the governance REST service.
    Serve {
        #[arg(long)]
        config: PathBuf,
    },
}

#[derive(Subcommand)]
enum PolicyCmd {
    /// Load a catalog file and list the versions it defines.
    Import { file: PathBuf },
    /// Write the built-in catalog to a file.
    Export { out: PathBuf },
    /// Clauses added between two versions.
    Diff {
        old: String,
        new: String,
        #[arg(long)]
        catalog: Option<PathBuf>,
    },
}

#[derive(Subcommand)]
enum DataCmd {
    /// Append a record file to a dataset log.
    Ingest {
        file: PathBuf,
        #[arg(long)]
        partition: Partition,
        #[arg(long)]
        store: PathBuf,
        #[arg(long)]
        catalog: Option<PathBuf>,
    },
    /// Write the current labels of one partition as an SFT record file.
    Export {
        #[arg(long)]
        store: PathBuf,
        #[arg(long)]
        partition: Partition,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        catalog: Option<PathBuf>,
    },
    /// Gold plus a seeded share of historical records.
    Blend {
        #[arg(long)]
        gold: PathBuf,
        #[arg(long)]
        hist: PathBuf,
        #[arg(long, default_value_t = 0.4)]
        ratio: f64,
        #[arg(long, default_value_t = 7)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Subcommand)]
enum IndexCmd {
    Build {
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        catalog: Option<PathBuf>,
        /// Use the corpus gold split as exemplars.
        #[arg(long, conflicts_with = "exemplars")]
        corpus: Option<PathBuf>,
        /// Gold record file; labeled positives become exemplars.
        #[arg(long)]
        exemplars: Option<PathBuf>,
    },
}

#[derive(Args)]
struct SynthArgs {
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 7)]
    seed: u64,
    /// 500 historical, 100 gold, 200 test samples instead of 1500/150/600.
    #[arg(long)]
    small: bool,
    /// Also write historical.jsonl, gold.jsonl and test.jsonl record files here.
    #[arg(long)]
    records_dir: Option<PathBuf>,
}

#[derive(Args, Clone)]
struct RunArgs {
    #[arg(long)]
    corpus: PathBuf,
    #[arg(long, default_value_t = 7)]
    seed: u64,
    #[arg(long, default_value_t = 0.4)]
    blend_ratio: f64,
    #[arg(long)]
    workers: Option<usize>,
    #[arg(long)]
    tau: Option<f64>,
}

impl RunArgs {
    fn config(&self) -> Result<PipelineConfig> {
        let mut c = PipelineConfig {
            seed: self.seed,
            blend_ratio: self.blend_ratio,
            ..PipelineConfig::default()
        };
        if let Some(w) = self.workers {
            c.debate.workers = w;
        }
        if let Some(t) = self.tau {
            c.debate.tau = t;
        }
        c.debate.validate()?;
        Ok(c)
    }

    fn corpus(&self) -> Result<Corpus> {
        Corpus::load(&self.corpus).with_context(|| format!("loading corpus {}", self.corpus.display()))
    }
}

#[derive(Args)]
struct RectifyArgs {
    #[command(flatten)]
    run: RunArgs,
    #[arg(long, default_value = "conflicts_only")]
    scope: String,
    /// Writes transcripts.jsonl, adjudications.jsonl and provenance.jsonl here.
    #[arg(long)]
    out_dir: PathBuf,
}

#[derive(Args)]
struct DiscoverArgs {
    #[command(flatten)]
    run: RunArgs,
    #[arg(long)]
    policy: String,
    /// One candidate id per line.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct RewardsArgs {
    #[command(flatten)]
    run: RunArgs,
    #[arg(long, default_value = "II")]
    stage: StageId,
    #[arg(long, default_value_t = 8)]
    group_size: usize,
    #[arg(long, default_value_t = 0.0)]
    lambda_hist: f64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Subcommand)]
enum EvalCmd {
    /// Score one pipeline configuration.
    Score {
        #[command(flatten)]
        run: RunArgs,
        #[arg(long, default_value = "III")]
        stage: StageId,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// One row per cumulative stage.
    AblateStages {
        #[command(flatten)]
        run: RunArgs,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Full, w/o Prosecutor, w/o Defender, labels only.
    AblateComponents {
        #[command(flatten)]
        run: RunArgs,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Recall on the test split before and after homophone substitution.
    Adversarial {
        #[command(flatten)]
        run: RunArgs,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn registry_from(catalog: Option<&Path>) -> Result<Arc<PolicyRegistry>> {
    Ok(match catalog {
        Some(p) => {
            let r = PolicyRegistry::new();
            r.import_catalog(p, &SystemClock)
                .with_context(|| format!("importing {}", p.display()))?;
            Arc::new(r)
        }
        None => builtin_registry()?,
    })
}

fn codes(registry: &PolicyRegistry) -> BTreeMap<String, String> {
    registry.clauses().into_iter().map(|c| (c.id, c.code)).collect()
}

fn emit_reports(reports: &[EvalReport], registry: &PolicyRegistry, out: Option<&Path>) -> Result<()> {
    print!("{}", render_table(reports, &codes(registry)));
    if let Some(p) = out {
        jsonl::write_records(p, reports)?;
        eprintln!("wrote {} report(s) to {}", reports.len(), p.display());
    }
    Ok(())
}

fn policy(cmd: PolicyCmd) -> Result<()> {
    match cmd {
        PolicyCmd::Import { file } => {
            let r = PolicyRegistry::new();
            let summary = r.import_catalog(&file, &SystemClock)?;
            println!("{} clauses", summary.clauses);
            for v in &summary.versions {
                println!("{v}\t{} active", r.active_dimensions(v)?.len());
            }
        }
        PolicyCmd::Export { out } => {
            let n = jsonl::write_records(&out, &fixtures::builtin_catalog())?;
            println!("wrote {n} clauses to {}", out.display());
        }
        PolicyCmd::Diff { old, new, catalog } => {
            let r = registry_from(catalog.as_deref())?;
            for c in r.diff_versions(&old, &new)? {
                println!("{}\t{}\t{}", c.id, c.code, c.title);
            }
        }
    }
    Ok(())
}

fn read_labeled_records(path: &Path, source: LabelSource) -> Result<(Vec<LabeledSample>, HashMap<String, SampleRecord>)> {
    let records: Vec<SampleRecord> = jsonl::read_records(path)?;
    let mut labeled = Vec::with_capacity(records.len());
    let mut by_id = HashMap::with_capacity(records.len());
    for r in records {
        match r.to_labeled(source) {
            Some(Ok(l)) => labeled.push(l),
            Some(Err(e)) => bail!("{}: record {}: {e}", path.display(), r.sample_id),
            None => bail!("{}: record {} has no labels", path.display(), r.sample_id),
        }
        by_id.insert(r.sample_id.clone(), r);
    }
    Ok((labeled, by_id))
}

fn data(cmd: DataCmd) -> Result<()> {
    match cmd {
        DataCmd::Ingest {
            file,
            partition,
            store,
            catalog,
        } => {
            let s = DatasetStore::open(&store, registry_from(catalog.as_deref())?, Arc::new(SystemClock))?;
            let n = s.ingest(&file, partition)?;
            println!("ingested {n} samples; store holds {}", s.len());
        }
        DataCmd::Export {
            store,
            partition,
            out,
            catalog,
        } => {
            let s = DatasetStore::open(&store, registry_from(catalog.as_deref())?, Arc::new(SystemClock))?;
            let n = s.export_sft(&s.labeled_in(partition), &out)?;
            println!("exported {n} records to {}", out.display());
        }
        DataCmd::Blend {
            gold,
            hist,
            ratio,
            seed,
            out,
        } => {
            let (g, mut records) = read_labeled_records(&gold, LabelSource::Gold)?;
            let (h, hist_records) = read_labeled_records(&hist, LabelSource::Legacy)?;
            records.extend(hist_records);
            let blended = blend_sft(&g, &h, ratio, seed)?;
            let rows: Vec<&SampleRecord> = blended.iter().map(|l| &records[&l.sample_id]).collect();
            let n = jsonl::write_records(&out, rows)?;
            println!("{n} records ({} gold, {} historical)", g.len(), n - g.len());
        }
    }
    Ok(())
}

fn index(cmd: IndexCmd) -> Result<()> {
    let IndexCmd::Build {
        out,
        catalog,
        corpus,
        exemplars,
    } = cmd;
    let registry = registry_from(catalog.as_deref())?;
    let ex: Vec<Exemplar> = match (corpus, exemplars) {
        (Some(c), _) => Corpus::load(&c)?.exemplars(),
        (None, Some(path)) => {
            let records: Vec<SampleRecord> = jsonl::read_records(&path)?;
            records
                .into_iter()
                .map(|r| Exemplar {
                    text: r.to_sample(Partition::Gold).content_text(),
                    positive_keys: r
                        .labels
                        .unwrap_or_default()
                        .into_iter()
                        .filter(|(_, v)| *v == 1)
                        .map(|(k, _)| k)
                        .collect(),
                    id: r.sample_id,
                })
                .collect()
        }
        (None, None) => Vec::new(),
    };
    let idx = EvidenceIndex::build(&registry.clauses(), &ex)?;
    idx.save(&out)?;
    println!(
        "indexed {} documents ({} exemplars skipped) into {}",
        idx.len(),
        idx.skipped_exemplars(),
        out.display()
    );
    Ok(())
}

fn synth(args: SynthArgs) -> Result<()> {
    let spec = if args.small {
        CorpusSpec::small(args.seed)
    } else {
        CorpusSpec {
            seed: args.seed,
            ..CorpusSpec::default()
        }
    };
    let corpus = Corpus::generate(&spec);
    corpus.save(&args.out)?;
    println!(
        "{}: {} historical ({} stale), {} gold, {} test",
        corpus.corpus_id,
        corpus.historical.len(),
        corpus.stale().count(),
        corpus.gold.len(),
        corpus.test.len()
    );
    if let Some(dir) = args.records_dir {
        std::fs::create_dir_all(&dir)?;
        let registry = builtin_registry()?;
        let old = registry.active_dimensions(P_OLD)?;
        let new = registry.active_dimensions(P_NEW)?;
        let write = |name: &str, samples: &[PlantedSample], labels: Vec<LabeledSample>| -> Result<()> {
            let rows: Vec<SampleRecord> = samples
                .iter()
                .zip(&labels)
                .map(|(p, l)| SampleRecord::from_parts(&p.sample, Some(l)))
                .collect();
            jsonl::write_records(&dir.join(name), &rows)?;
            Ok(())
        };
        write("historical.jsonl", &corpus.historical, corpus.historical_labels(&old))?;
        write("gold.jsonl", &corpus.gold, corpus.gold_labels(&new))?;
        let test: Vec<LabeledSample> = corpus
            .test
            .iter()
            .map(|p| LabeledSample {
                sample_id: p.sample.id.clone(),
                vector: p.truth_vector(&new),
                vintage: P_NEW.to_string(),
                source: LabelSource::Gold,
                cot: None,
            })
            .collect();
        write("test.jsonl", &corpus.test, test)?;
        println!("wrote record files to {}", dir.display());
    }
    Ok(())
}

fn stage_summary(run: &PipelineRun, id: StageId) {
    if let Some(s) = run.stage(id) {
        println!(
            "{}: debated {}, resolved {}, changed {}, unresolved {}, failed {}",
            id.label(),
            s.debated.len(),
            s.adjudications.len(),
            s.changed,
            s.unresolved,
            s.failed
        );
    }
}

fn rectify(args: RectifyArgs) -> Result<()> {
    let mut config = args.run.config()?;
    config.debate.stage2_scope = serde_json::from_value::<Stage2Scope>(serde_json::json!(args.scope))
        .with_context(|| format!("unknown scope {:?} (conflicts_only or all_historical)", args.scope))?;
    config.rollouts = false;
    let corpus = args.run.corpus()?;
    let result = run(&corpus, &config, StageId::II)?;
    let stage = result.stage(StageId::II).expect("stage II ran");
    std::fs::create_dir_all(&args.out_dir)?;
    jsonl::write_records(&args.out_dir.join("transcripts.jsonl"), &stage.transcripts)?;
    jsonl::write_records(&args.out_dir.join("adjudications.jsonl"), &stage.adjudications)?;
    result.store.write_provenance(&args.out_dir.join("provenance.jsonl"))?;
    stage_summary(&result, StageId::II);
    print!("{}", result.table());
    Ok(())
}

fn discover(args: DiscoverArgs) -> Result<()> {
    let mut config = args.run.config()?;
    config.rollouts = false;
    let corpus = args.run.corpus()?;
    let result = run(&corpus, &config, StageId::II)?;
    if !result.emerging.contains(&args.policy) {
        bail!("{} is not an emerging policy (emerging: {})", args.policy, result.emerging.join(", "));
    }
    let model = &result.stage(StageId::II).expect("stage II ran").model;
    let keys = vec![args.policy.clone()];
    let mut samples = Vec::with_capacity(corpus.historical.len());
    for p in &corpus.historical {
        let mut l = result
            .store
            .current_label(&p.sample.id)
            .with_context(|| format!("{} has no label", p.sample.id))?;
        l.vector.probabilities = model.score(&p.sample.content_text(), &keys).probabilities;
        samples.push(l);
    }
    let found = select_latent(&samples, &args.policy, config.debate.tau)?;
    let truth: HashMap<&str, &PlantedSample> = corpus.historical.iter().map(|p| (p.sample.id.as_str(), p)).collect();
    let hits = found.iter().filter(|id| truth[id.as_str()].truth.contains(&args.policy)).count();
    println!(
        "{}: {} candidates above tau {} ({} planted violations)",
        args.policy,
        found.len(),
        config.debate.tau,
        hits
    );
    if let Some(out) = args.out {
        std::fs::write(&out, found.iter().map(|id| format!("{id}\n")).collect::<String>())?;
    }
    Ok(())
}

fn rewards(args: RewardsArgs) -> Result<()> {
    if args.stage == StageId::I {
        bail!("stage I has no adjudications; use II or III");
    }
    let mut config = args.run.config()?;
    config.reward.group_size = args.group_size;
    config.reward.lambda_hist = args.lambda_hist;
    config.reward.validate()?;
    let corpus = args.run.corpus()?;
    let result = run(&corpus, &config, args.stage)?;
    let stage = result.stage(args.stage).expect("requested stage ran");
    let n = jsonl::write_records(&args.out, &stage.rollouts)?;
    let mean = stage.rollouts.iter().map(|r| r.reward_total).sum::<f64>() / n.max(1) as f64;
    println!(
        "{n} rollouts in {} groups of {}; mean reward {mean:.4}",
        stage.adjudications.len(),
        args.group_size
    );
    Ok(())
}

fn eval(cmd: EvalCmd) -> Result<()> {
    let registry = builtin_registry()?;
    match cmd {
        EvalCmd::Score { run: r, stage, out } => {
            let result = run(&r.corpus()?, &r.config()?, stage)?;
            let report = result.stage(stage).expect("requested stage ran").report.clone();
            emit_reports(&[report], &registry, out.as_deref())
        }
        EvalCmd::AblateStages { run: r, out } => {
            let reports = run_stage_ablation(&r.corpus()?, &r.config()?, &[StageId::I, StageId::II, StageId::III])?;
            emit_reports(&reports, &registry, out.as_deref())
        }
        EvalCmd::AblateComponents { run: r, out } => {
            let config = r.config()?;
            let rows = run_component_ablation(&r.corpus()?, &config, &default_component_variants(&config.debate))?;
            let reports: Vec<EvalReport> = rows.into_iter().map(|row| row.report).collect();
            emit_reports(&reports, &registry, out.as_deref())
        }
        EvalCmd::Adversarial { run: r, out } => {
            let corpus = r.corpus()?;
            let result = run(&corpus, &r.config()?, StageId::III)?;
            let model = &result.stage(StageId::III).expect("stage III ran").model;
            let evaded: Vec<PlantedSample> = corpus
                .test
                .iter()
                .map(|p| PlantedSample {
                    sample: evade(&p.sample),
                    ..p.clone()
                })
                .collect();
            let keys = result.emerging.clone();
            let report = adversarial_eval(&corpus.test, &evaded, &keys, |p| {
                model.score(&p.sample.content_text(), &keys).labels
            })?;
            let pct = |v: Option<f64>| v.map_or("n/a".to_string(), |x| format!("{:.1}%", 100.0 * x));
            println!(
                "positives {}  recall {} -> {}  relative drop {}",
                report.positives,
                pct(report.normal_recall),
                pct(report.evasion_recall),
                pct(report.relative_drop)
            );
            if let Some(p) = out {
                std::fs::write(&p, serde_json::to_string_pretty(&report)?)?;
            }
            Ok(())
        }
    }
}

fn serve(config: &Path) -> Result<()> {
    let cfg = argus_service::ServiceConfig::load(config)?;
    cfg.validate()?;
    let mut rt = tokio::runtime::Builder::new_multi_thread();
    if let Some(n) = cfg.http_workers {
        rt.worker_threads(n);
    }
    let rt = rt.enable_all().build()?;
    rt.block_on(argus_service::serve(cfg, argus_service::shutdown_signal()))?;
    Ok(())
}

fn main() {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    let outcome = match cli.command {
        Command::Policy(c) => policy(c),
        Command::Data(c) => data(c),
        Command::Index(c) => index(c),
        Command::Synth(a) => synth(a),
        Command::Rectify(a) => rectify(a),
        Command::Discover(a) => discover(a),
        Command::Rewards(a) => rewards(a),
        Command::Eval(c) => eval(c),
        Command::Serve { config } => serve(&config),
    };
    if let Err(e) = outcome {
        eprintln!("error: {e:#}");
        std::process::exit(1);
    }
}
