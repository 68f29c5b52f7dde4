use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;

use divemb::config::{RunConfig, Split};
use divemb::cost::{measure_throughput, ops_per_pair, BenchRow, REFERENCE_SC_FLOPS};
use divemb::data::{generate_corpus, Corpus};
use divemb::gradcheck::{run_suite, CheckResult, GradcheckOptions};
use divemb::io::{sha256_hex, write_atomic, Checkpoint};
use divemb::retrieval::{evaluate_ensemble, per_slot_table, slot_ablation_eval, RetrievalReport};
use divemb::trainer::{embed_split, evaluate_split, model_from_checkpoint, output_dir, splits_for, train};
use divemb::{Error, Result, SimilarityKind};

/// Set-based cross-modal embedding experiments on a synthetic corpus.
#[derive(Parser)]
#[command(name = "divemb", version)]
struct Cli {
    /// Worker threads for scoring and training (default: all cores).
    #[arg(long, global = true)]
    workers: Option<usize>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic corpus file.
    Datagen {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train a model and write checkpoints and metrics.
    Train {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Corpus file; generated from the config when omitted.
        #[arg(long)]
        corpus: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Evaluate one checkpoint, or average the scores of several.
    Eval {
        #[arg(long, required_unless_present = "ensemble")]
        checkpoint: Option<PathBuf>,
        /// Checkpoints whose scores are averaged.
        #[arg(long, num_args = 2.., conflicts_with = "checkpoint")]
        ensemble: Vec<PathBuf>,
        #[arg(long)]
        corpus: Option<PathBuf>,
        #[arg(long, value_enum)]
        split: Option<SplitArg>,
        /// Visual slots to keep, e.g. 1,0,1,1.
        #[arg(long)]
        slot_mask: Option<String>,
        /// Text slots to keep.
        #[arg(long)]
        text_slot_mask: Option<String>,
        /// Directory for report.json and report.csv.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Check analytic gradients against finite differences.
    Gradcheck {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Restrict to one suite.
        #[arg(long)]
        only: Option<String>,
        #[arg(long, default_value_t = 200)]
        pairs: usize,
        #[arg(long, default_value_t = 20)]
        probes: usize,
    },
    /// Report per-pair op counts and scoring throughput.
    Bench {
        #[arg(long, default_value_t = 4)]
        k: usize,
        #[arg(long, default_value_t = 1024)]
        d: usize,
        #[arg(long, default_value_t = 64)]
        queries: usize,
        #[arg(long, default_value_t = 256)]
        index: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Train and evaluate over one ablation grid.
    Ablate {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long, value_enum)]
        grid: Grid,
        /// Grid values to run instead of the full grid.
        #[arg(long, value_delimiter = ',')]
        values: Vec<String>,
        #[arg(long)]
        corpus: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum SplitArg {
    Train,
    Val,
    Test,
}

#[derive(Clone, Copy, ValueEnum)]
enum Grid {
    Similarity,
    K,
    T,
    Alpha,
}

#[derive(Args, Clone, Default)]
struct ConfigArgs {
    /// JSON run configuration; every field has a default.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Similarity used for training and scoring: sc, chamfer, mil or mp.
    #[arg(long)]
    similarity: Option<SimilarityKind>,
    /// Embedding set size.
    #[arg(long)]
    k: Option<usize>,
    /// Aggregation-block iterations.
    #[arg(long)]
    t: Option<usize>,
    /// Smooth-Chamfer temperature.
    #[arg(long)]
    alpha: Option<f64>,
    /// Training seed; the corpus seed stays as configured.
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    epochs: Option<usize>,
}

impl ConfigArgs {
    fn resolve(&self) -> Result<RunConfig> {
        let mut run = match &self.config {
            Some(p) => RunConfig::load(p)?,
            None => RunConfig::default(),
        };
        if let Some(kind) = self.similarity {
            run.loss.sim.kind = kind;
        }
        if let Some(k) = self.k {
            run.predictor.k = k;
        }
        if let Some(t) = self.t {
            run.predictor.t = t;
        }
        if let Some(a) = self.alpha {
            run.loss.sim.alpha = a;
        }
        if let Some(s) = self.seed {
            run.train.seed = s;
        }
        if let Some(e) = self.epochs {
            run.train.epochs = e;
        }
        run.validate()?;
        Ok(run)
    }
}

fn to_json<T: Serialize>(v: &T) -> String {
    let mut s = serde_json::to_string_pretty(v).expect("serializable");
    s.push('\n');
    s
}

fn write_file(path: &Path, text: &str) -> Result<()> {
    write_atomic(path, text.as_bytes())
}

fn load_corpus(path: Option<&Path>, run: &RunConfig) -> Result<Corpus> {
    match path {
        Some(p) => Corpus::read_from(p),
        None => generate_corpus(&run.data),
    }
}

fn split_images(corpus: &Corpus, run: &RunConfig, split: Split) -> Result<Vec<usize>> {
    let s = splits_for(corpus, &run.train)?;
    Ok(match split {
        Split::Train => s.train,
        Split::Val => s.val,
        Split::Test => s.test,
    })
}

fn parse_mask(text: &str) -> Result<Vec<bool>> {
    text.split(',')
        .map(|t| match t.trim() {
            "1" => Ok(true),
            "0" => Ok(false),
            other => Err(Error::Config(format!("slot mask entries must be 0 or 1, got `{other}`"))),
        })
        .collect()
}

fn cmd_datagen(cfg: &ConfigArgs, out: &Path) -> Result<()> {
    let run = cfg.resolve()?;
    let corpus = generate_corpus(&run.data)?;
    corpus.write_to(out)?;
    let summary = serde_json::json!({
        "path": out.display().to_string(),
        "images": corpus.samples.len(),
        "captions": corpus.caption_count(),
        "concepts": corpus.bank.len(),
        "d_raw": corpus.config.d_raw,
        "config_hash": run.hash(),
    });
    print!("{}", to_json(&summary));
    Ok(())
}

#[derive(Serialize)]
struct TrainSummary<'a> {
    config_hash: String,
    best_epoch: usize,
    val: &'a RetrievalReport,
    test: RetrievalReport,
}

fn cmd_train(cfg: &ConfigArgs, corpus: Option<&Path>, out: &Path) -> Result<()> {
    let run = cfg.resolve()?;
    let corpus = load_corpus(corpus, &run)?;
    let mut run = run;
    run.data = corpus.config.clone();
    let dir = output_dir(out)?;
    write_file(&dir.dir.join("config.json"), &to_json(&run))?;
    let outcome = train(&corpus, &run, Some(&dir))?;
    let test = evaluate_split(&outcome.model, &corpus, &outcome.splits.test, &run)?;
    let summary = TrainSummary {
        config_hash: run.hash(),
        best_epoch: outcome.best_epoch,
        val: &outcome.best_val,
        test,
    };
    let text = to_json(&summary);
    write_file(&dir.dir.join("report.json"), &text)?;
    print!("{text}");
    Ok(())
}

/// Checkpoints are identified by content so reports do not depend on paths.
#[derive(Serialize)]
struct CheckpointRef {
    file: String,
    sha256: String,
}

#[derive(Serialize)]
struct EvalOutput {
    config_hash: String,
    checkpoints: Vec<CheckpointRef>,
    split: Split,
    report: RetrievalReport,
}

fn report_csv(r: &RetrievalReport, hash: &str) -> String {
    let mut s = format!("# config_hash={hash}\nmetric,value\n");
    for (dir, vals) in [("i2t", r.i2t), ("t2i", r.t2i)] {
        for (k, v) in [1, 5, 10].iter().zip(vals) {
            s.push_str(&format!("{dir}_r{k},{v:.4}\n"));
        }
    }
    s.push_str(&format!("rsum,{:.4}\n", r.rsum));
    s.push_str(&format!("cv_visual,{:.6}\ncv_text,{:.6}\n", r.circular_variance_visual, r.circular_variance_text));
    for row in &r.slot_ablation {
        s.push_str(&format!("rsum_only_{}_slot{},{:.4}\n", row.modality.name(), row.kept_slot, row.rsum));
    }
    s
}

#[allow(clippy::too_many_arguments)]
fn cmd_eval(
    checkpoint: Option<&Path>,
    ensemble: &[PathBuf],
    corpus: Option<&Path>,
    split: Option<SplitArg>,
    slot_mask: Option<&str>,
    text_slot_mask: Option<&str>,
    out: Option<&Path>,
) -> Result<()> {
    let paths: Vec<PathBuf> = match checkpoint {
        Some(p) => vec![p.to_path_buf()],
        None => ensemble.to_vec(),
    };
    let mut models = Vec::with_capacity(paths.len());
    let mut refs = Vec::with_capacity(paths.len());
    for p in &paths {
        let bytes = std::fs::read(p).map_err(|e| Error::io(p, e))?;
        models.push(model_from_checkpoint(&Checkpoint::read(&mut bytes.as_slice())?)?);
        refs.push(CheckpointRef {
            file: p.file_name().map_or_else(String::new, |n| n.to_string_lossy().into_owned()),
            sha256: sha256_hex(&bytes),
        });
    }
    let (_, run) = &models[0];
    let corpus = load_corpus(corpus, run)?;
    let split = match split {
        Some(SplitArg::Train) => Split::Train,
        Some(SplitArg::Val) => Split::Val,
        Some(SplitArg::Test) => Split::Test,
        None => run.eval.split,
    };
    let images = split_images(&corpus, run, split)?;

    let report = if models.len() == 1 {
        let (model, run) = &models[0];
        let (v, t, matches) = embed_split(model, &corpus, &images)?;
        let sim = model.similarity_config(&run.loss.sim);
        let k = run.predictor.k;
        let keep_v = slot_mask.map(parse_mask).transpose()?.unwrap_or_else(|| vec![true; k]);
        let keep_t = text_slot_mask.map(parse_mask).transpose()?.unwrap_or_else(|| vec![true; k]);
        if keep_v.len() != k || keep_t.len() != k {
            return Err(Error::Config(format!("slot masks need {k} entries")));
        }
        let mut report = slot_ablation_eval(&v, &t, &keep_v, &keep_t, &matches, &sim)?;
        if run.eval.per_slot_table && slot_mask.is_none() && text_slot_mask.is_none() {
            report.slot_ablation = per_slot_table(&v, &t, &matches, &sim)?;
        }
        report
    } else {
        if slot_mask.is_some() || text_slot_mask.is_some() {
            return Err(Error::Config("slot masks are not supported with --ensemble".into()));
        }
        let mut members = Vec::with_capacity(models.len());
        let mut matches = None;
        for (model, run) in &models {
            let (v, t, m) = embed_split(model, &corpus, &images)?;
            members.push((v, t, model.similarity_config(&run.loss.sim)));
            matches = Some(m);
        }
        evaluate_ensemble(&members, &matches.expect("at least two members"))?
    };
    let hash = run.hash();
    let output = EvalOutput {
        config_hash: hash.clone(),
        checkpoints: refs,
        split,
        report,
    };
    let text = to_json(&output);
    if let Some(dir) = out {
        let dir = output_dir(dir)?;
        write_file(&dir.dir.join("report.json"), &text)?;
        write_file(&dir.dir.join("report.csv"), &report_csv(&output.report, &hash))?;
    }
    print!("{text}");
    Ok(())
}

fn cmd_gradcheck(seed: u64, only: Option<String>, pairs: usize, probes: usize) -> Result<bool> {
    let opts = GradcheckOptions {
        seed,
        pairs,
        probes,
        only,
        ..Default::default()
    };
    let results: Vec<CheckResult> = run_suite(&opts)?;
    println!("{:<44} {:>6} {:>12} {:>10}  result", "check", "cases", "max_rel_err", "tolerance");
    for r in &results {
        println!(
            "{:<44} {:>6} {:>12.3e} {:>10.0e}  {}",
            r.name,
            r.cases,
            r.max_rel_err,
            r.tolerance,
            if r.passed { "PASS" } else { "FAIL" }
        );
    }
    Ok(results.iter().all(|r| r.passed))
}

#[derive(Serialize)]
struct BenchReport {
    convention: &'static str,
    reference_sc_flops: f64,
    sc_ratio_to_reference: f64,
    rows: Vec<BenchRow>,
}

fn cmd_bench(k: usize, d: usize, queries: usize, index: usize, seed: u64) -> Result<()> {
    if k == 0 || d == 0 || queries == 0 || index == 0 {
        return Err(Error::Config("bench sizes must be positive".into()));
    }
    let rows = SimilarityKind::ALL
        .iter()
        .map(|&kind| measure_throughput(kind, k, d, queries, index, seed))
        .collect::<Result<Vec<_>>>()?;
    let sc_ref = ops_per_pair(SimilarityKind::SmoothChamfer, 4, 4, 1024).total() as f64;
    let report = BenchReport {
        convention: "one multiply-add per cosine-block entry and dimension (K1*K2*D), \
                     plus one op per scalar reduction step; normalization is done at index time",
        reference_sc_flops: REFERENCE_SC_FLOPS,
        sc_ratio_to_reference: sc_ref / REFERENCE_SC_FLOPS,
        rows,
    };
    eprintln!("{:<8} {:>4} {:>6} {:>14} {:>14}", "kind", "K", "D", "ops/pair", "pairs/sec");
    for r in &report.rows {
        eprintln!(
            "{:<8} {:>4} {:>6} {:>14} {:>14.0}",
            r.kind.name(),
            r.k,
            r.d,
            r.ops_per_pair,
            r.pairs_per_second
        );
    }
    eprintln!(
        "SC at K=4, D=1024: {sc_ref} ops/pair vs {REFERENCE_SC_FLOPS} quoted ({:.3}x)",
        report.sc_ratio_to_reference
    );
    print!("{}", to_json(&report));
    Ok(())
}

fn grid_values(grid: Grid, values: &[String]) -> Vec<String> {
    if !values.is_empty() {
        return values.to_vec();
    }
    let v: Vec<&str> = match grid {
        Grid::Similarity => vec!["sc", "chamfer", "mil", "mp"],
        Grid::K | Grid::T => vec!["1", "2", "3", "4", "5", "6"],
        Grid::Alpha => vec!["1", "2", "4", "8", "16", "32", "64"],
    };
    v.into_iter().map(String::from).collect()
}

fn cmd_ablate(cfg: &ConfigArgs, grid: Grid, values: &[String], corpus: Option<&Path>, out: &Path) -> Result<()> {
    let base = cfg.resolve()?;
    let corpus = load_corpus(corpus, &base)?;
    let dir = output_dir(out)?;
    let grid_name = match grid {
        Grid::Similarity => "similarity",
        Grid::K => "k",
        Grid::T => "t",
        Grid::Alpha => "alpha",
    };
    let mut csv = format!(
        "# config_hash={}\ngrid,value,config_hash,best_epoch,val_rsum,test_rsum,cv_visual,cv_text,untrained_fraction\n",
        base.hash()
    );
    for value in grid_values(grid, values) {
        let mut run = base.clone();
        run.data = corpus.config.clone();
        let bad = || Error::Config(format!("bad {grid_name} grid value `{value}`"));
        match grid {
            Grid::Similarity => run.loss.sim.kind = value.parse()?,
            Grid::K => run.predictor.k = value.parse().map_err(|_| bad())?,
            Grid::T => run.predictor.t = value.parse().map_err(|_| bad())?,
            Grid::Alpha => run.loss.sim.alpha = value.parse().map_err(|_| bad())?,
        }
        run.validate()?;
        let sub = output_dir(&dir.dir.join(format!("{grid_name}-{value}")))?;
        write_file(&sub.dir.join("config.json"), &to_json(&run))?;
        let outcome = train(&corpus, &run, Some(&sub))?;
        let test = evaluate_split(&outcome.model, &corpus, &outcome.splits.test, &run)?;
        let untrained = outcome.epochs.last().map_or(0.0, |e| e.untrained_fraction);
        csv.push_str(&format!(
            "{grid_name},{value},{},{},{:.4},{:.4},{:.6},{:.6},{:.6}\n",
            run.hash(),
            outcome.best_epoch,
            outcome.best_val.rsum,
            test.rsum,
            test.circular_variance_visual,
            test.circular_variance_text,
            untrained
        ));
        log::info!("{grid_name}={value}: test rsum {:.2}", test.rsum);
    }
    write_file(&dir.dir.join("ablate.csv"), &csv)?;
    print!("{csv}");
    Ok(())
}

fn run(cli: Cli) -> Result<bool> {
    if let Some(n) = cli.workers {
        if n == 0 {
            return Err(Error::Config("--workers must be at least 1".into()));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| Error::Internal(format!("thread pool: {e}")))?;
    }
    match cli.command {
        Command::Datagen { cfg, out } => cmd_datagen(&cfg, &out)?,
        Command::Train { cfg, corpus, out } => cmd_train(&cfg, corpus.as_deref(), &out)?,
        Command::Eval {
            checkpoint,
            ensemble,
            corpus,
            split,
            slot_mask,
            text_slot_mask,
            out,
        } => cmd_eval(
            checkpoint.as_deref(),
            &ensemble,
            corpus.as_deref(),
            split,
            slot_mask.as_deref(),
            text_slot_mask.as_deref(),
            out.as_deref(),
        )?,
        Command::Gradcheck {
            seed,
            only,
            pairs,
            probes,
        } => return cmd_gradcheck(seed, only, pairs, probes),
        Command::Bench {
            k,
            d,
            queries,
            index,
            seed,
        } => cmd_bench(k, d, queries, index, seed)?,
        Command::Ablate {
            cfg,
            grid,
            values,
            corpus,
            out,
        } => cmd_ablate(&cfg, grid, &values, corpus.as_deref(), &out)?,
    }
    Ok(true)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 1 } else { 0 });
        }
    };
    match run(cli) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(2),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
