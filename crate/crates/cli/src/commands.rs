use std::fs;
use std::io::BufReader;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use desklm::ingest::{self, FetchOptions, FetchOutcome};
use desklm::metrics::{
    evaluate_models, read_prompt_set, reproducibility, write_repro_csv, EvalOptions, ModelEmbedder, AVERAGES_FILE,
    INDIVIDUAL_FILE,
};
use desklm::model::{checkpoint, generate, GenerationConfig, Model};
use desklm::optim::{OptimizerKind, OptimizerSpec};
use desklm::stats::{
    compare_reports, compare_repro, render_comparison, write_comparison_csv, Alternative, Directions, RankOptions,
    TestKind, DEFAULT_METRICS,
};
use desklm::tensor::Float;
use desklm::textprep::{build_vocabulary, chunk_blocks, tokenize_corpus, Block, Vocabulary};
use desklm::trainer::{
    grid_search, meter, os_peak_rss_mb, render_table, train, write_grid_csv, GridSpec, ResourceReport, SelectionPolicy,
    TrainingLog,
};
use serde::Serialize;

use crate::args::*;
use crate::config::{default_threads, RunConfig};
use crate::manifest::ManifestBuilder;

pub const VOCAB_FILE: &str = "vocab.json";

pub fn run(cli: Cli) -> Result<()> {
    let g = &cli.global;
    match cli.command {
        Command::Ingest(cmd) => ingest_cmd(g, cmd),
        Command::Tokenizer(TokenizerCmd::Build { corpus, out, max_size }) => {
            tokenizer_build(g, &corpus, &out, max_size)
        }
        Command::Gridsearch(a) => dispatch(g, |p| match p {
            Precision::F32 => gridsearch::<f32>(g, &a),
            Precision::F64 => gridsearch::<f64>(g, &a),
        }),
        Command::Train(a) => dispatch(g, |p| match p {
            Precision::F32 => train_cmd::<f32>(g, &a),
            Precision::F64 => train_cmd::<f64>(g, &a),
        }),
        Command::Generate(a) => dispatch(g, |p| match p {
            Precision::F32 => generate_cmd::<f32>(&a),
            Precision::F64 => generate_cmd::<f64>(&a),
        }),
        Command::Eval(a) => dispatch(g, |p| match p {
            Precision::F32 => eval_cmd::<f32>(g, &a),
            Precision::F64 => eval_cmd::<f64>(g, &a),
        }),
        Command::Compare(a) => compare_cmd(g, &a),
        Command::CompareRepro(a) => compare_repro_cmd(g, &a),
        Command::Repro(a) => dispatch(g, |p| match p {
            Precision::F32 => repro_cmd::<f32>(g, &a),
            Precision::F64 => repro_cmd::<f64>(g, &a),
        }),
    }
}

fn dispatch(g: &GlobalOpts, f: impl FnOnce(Precision) -> Result<()>) -> Result<()> {
    f(g.precision)
}

fn ensure_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))
}

fn ensure_parent(file: &Path) -> Result<()> {
    match file.parent() {
        Some(p) if !p.as_os_str().is_empty() => ensure_dir(p),
        _ => Ok(()),
    }
}

fn ingest_cmd(g: &GlobalOpts, cmd: IngestCmd) -> Result<()> {
    match cmd {
        IngestCmd::Fetch {
            manifest,
            out_dir,
            resume,
            workers,
        } => {
            let file = fs::File::open(&manifest).with_context(|| format!("opening {}", manifest.display()))?;
            let (records, diags) = ingest::parse_manifest(BufReader::new(file))?;
            ensure_dir(&out_dir)?;
            let workers = workers.or(g.threads).unwrap_or_else(default_threads);
            let outcomes = ingest::fetch_all(&records, &out_dir, &FetchOptions { resume, workers })?;
            let mut counts = [0usize; 4];
            for o in &outcomes {
                counts[match o {
                    Some(FetchOutcome::Downloaded(_)) => 0,
                    Some(FetchOutcome::NoUrl) => 1,
                    Some(FetchOutcome::Failed(_)) => 2,
                    None => 3,
                }] += 1;
            }
            println!(
                "{} records: {} downloaded, {} without PDF, {} failed, {} already done; {} malformed lines",
                records.len(),
                counts[0],
                counts[1],
                counts[2],
                counts[3],
                diags.len()
            );
            #[derive(Serialize)]
            struct Cfg {
                resume: bool,
                workers: usize,
            }
            ManifestBuilder::new(g.seed)
                .input(&manifest)?
                .config(&Cfg { resume, workers })?
                .output(&out_dir)
                .write(&out_dir)?;
        }
        IngestCmd::Extract { in_dir, out } => {
            let docs = ingest::extract_dir(&in_dir)?;
            ensure_parent(&out)?;
            let bytes = ingest::write_corpus(&docs, &out)?;
            let kept = docs.iter().filter(|d| d.kept).count();
            println!("{kept} documents kept, {} skipped, {bytes} bytes", docs.len() - kept);
            #[derive(Serialize)]
            struct Cfg {
                in_dir: PathBuf,
            }
            ManifestBuilder::new(g.seed)
                .config(&Cfg { in_dir })?
                .output(&out)
                .write(&out)?;
        }
        IngestCmd::Split {
            corpus,
            train_frac,
            out_train,
            out_test,
        } => {
            let docs = ingest::read_corpus(&corpus)?;
            ensure_parent(&out_train)?;
            ensure_parent(&out_test)?;
            let s = ingest::build_corpus(&docs, train_frac, &out_train, &out_test)?;
            println!(
                "train: {} documents, {} bytes; test: {} documents, {} bytes",
                s.train_documents, s.train_bytes, s.test_documents, s.test_bytes
            );
            #[derive(Serialize)]
            struct Cfg {
                train_frac: f64,
            }
            ManifestBuilder::new(g.seed)
                .corpus(&corpus)?
                .config(&Cfg { train_frac })?
                .output(&out_train)
                .output(&out_test)
                .write(&out_train)?;
        }
    }
    Ok(())
}

fn tokenizer_build(g: &GlobalOpts, corpus: &Path, out: &Path, max_size: usize) -> Result<()> {
    let text = fs::read_to_string(corpus).with_context(|| format!("reading {}", corpus.display()))?;
    let vocab = build_vocabulary(&text, max_size)?;
    ensure_parent(out)?;
    vocab.save(out)?;
    println!("{} tokens written to {}", vocab.len(), out.display());
    #[derive(Serialize)]
    struct Cfg {
        max_size: usize,
    }
    ManifestBuilder::new(g.seed)
        .corpus(corpus)?
        .config(&Cfg { max_size })?
        .output(out)
        .write(out)?;
    Ok(())
}

fn vocab_beside(ckpt: &Path, explicit: Option<&Path>) -> Result<Vocabulary> {
    let path = match explicit {
        Some(p) => p.to_path_buf(),
        None => ckpt.with_file_name(VOCAB_FILE),
    };
    Vocabulary::load(&path).with_context(|| format!("loading vocabulary {}", path.display()))
}

fn load_model<T: Float>(ckpt: &Path, vocab: &Vocabulary) -> Result<Model<T>> {
    let model: Model<T> = checkpoint::load(ckpt).with_context(|| format!("loading {}", ckpt.display()))?;
    if model.config.vocab_size != vocab.len() {
        bail!(
            "{} expects {} tokens but the vocabulary has {}",
            ckpt.display(),
            model.config.vocab_size,
            vocab.len()
        );
    }
    Ok(model)
}

struct Prepared<T: Float> {
    config: RunConfig,
    vocab: Vocabulary,
    model: Model<T>,
    train_blocks: Vec<Block>,
    eval_blocks: Vec<Block>,
}

fn blocks_of(path: &Path, vocab: &Vocabulary, block_size: usize) -> Result<Vec<Block>> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    let chunked = chunk_blocks(&tokenize_corpus(&text, vocab), block_size)
        .with_context(|| format!("cutting {} into blocks", path.display()))?;
    if chunked.dropped > 0 {
        log::info!("{}: {} trailing tokens dropped", path.display(), chunked.dropped);
    }
    Ok(chunked.blocks)
}

fn prepare<T: Float>(g: &GlobalOpts, inputs: &TrainingInputs) -> Result<Prepared<T>> {
    let mut config = RunConfig::load(inputs.config.as_deref())?;
    config.apply(g, inputs)?;
    let vocab = Vocabulary::load(&inputs.vocab).with_context(|| format!("loading {}", inputs.vocab.display()))?;

    let mut model: Model<T> = match &inputs.init {
        Some(p) => {
            let m = load_model(p, &vocab)?;
            config.model.d_model = m.config.d_model;
            config.model.n_heads = m.config.n_heads;
            config.model.n_layers = m.config.n_layers;
            config.model.d_ff = m.config.d_ff;
            config.model.max_seq_len = m.config.max_seq_len;
            m
        }
        None => Model::init(config.model.config(vocab.len(), config.seed))?,
    };
    match config.mode {
        Mode::Full => {
            if !model.adapters.is_empty() {
                model = model.merged();
            }
            model.params.set_trainable(true);
        }
        Mode::Lora => {
            if inputs.init.is_none() {
                log::warn!("adapters on a freshly initialized base; pass --init to adapt a trained model");
            }
            if model.adapters.is_empty() {
                model.attach_lora(&config.lora)?;
            }
        }
    }
    if config.train.block_size > model.config.max_seq_len {
        bail!(
            "block_size {} exceeds the model's max_seq_len {}",
            config.train.block_size,
            model.config.max_seq_len
        );
    }
    let train_blocks = blocks_of(&inputs.train, &vocab, config.train.block_size)?;
    let eval_blocks = blocks_of(&inputs.eval, &vocab, config.train.block_size)?;
    let pc = model.count_params();
    log::info!("{:?}", pc);
    Ok(Prepared {
        config,
        vocab,
        model,
        train_blocks,
        eval_blocks,
    })
}

fn base_manifest(inputs: &TrainingInputs, config: &RunConfig) -> Result<ManifestBuilder> {
    let mut m = ManifestBuilder::new(Some(config.seed))
        .corpus(&inputs.train)?
        .input(&inputs.eval)?
        .input(&inputs.vocab)?
        .config(config)?;
    if let Some(p) = &inputs.init {
        m = m.input(p)?;
    }
    if let Some(p) = &inputs.config {
        m = m.input(p)?;
    }
    Ok(m)
}

fn parse_optimizer(s: &str) -> Result<OptimizerKind> {
    s.parse().with_context(|| format!("unknown optimizer `{s}`"))
}

fn gridsearch<T: Float>(g: &GlobalOpts, a: &GridArgs) -> Result<()> {
    let mut p = prepare::<T>(g, &a.inputs)?;
    if let Some(names) = &a.optimizers {
        p.config.grid.optimizers = names.iter().map(|n| parse_optimizer(n)).collect::<Result<_>>()?;
    }
    if let Some(r) = &a.rates {
        p.config.grid.rates = r.clone();
    }
    if let Some(d) = a.delta {
        p.config.grid.delta_val = d;
    }
    let mut base = p.config.train.clone();
    base.output_dir = None;
    base.save_steps = 0;
    let spec = GridSpec {
        optimizers: p.config.grid.optimizers.clone(),
        rates: p.config.grid.rates.clone(),
        steps_per_rate: p.config.grid.steps_per_rate.clone(),
        base,
        power_watts: p.config.power_watts,
        threads: p.config.threads,
    };
    let policy = SelectionPolicy {
        delta_val: p.config.grid.delta_val,
    };
    let result = grid_search(&spec, &p.model, &p.train_blocks, &p.eval_blocks, &policy)?;

    let out = &a.inputs.out_dir;
    ensure_dir(out)?;
    let csv_path = out.join("grid.csv");
    let f = fs::File::create(&csv_path).with_context(|| format!("creating {}", csv_path.display()))?;
    write_grid_csv(&result.rows, f)?;
    let table = render_table(&result);
    fs::write(out.join("grid_table.txt"), &table).context("writing grid table")?;
    print!("{table}");
    match result.chosen {
        Some(i) => {
            let r = &result.rows[i];
            println!("chosen: {} at lr {} ({} steps)", r.optimizer, r.lr, r.steps);
        }
        None => println!("every cell failed"),
    }
    base_manifest(&a.inputs, &p.config)?
        .output(&csv_path)
        .output(out.join("grid_table.txt"))
        .write(out)?;
    Ok(())
}

#[derive(Serialize)]
struct TrainOutput<'a> {
    log: &'a TrainingLog,
    resources: ResourceReport,
    process_peak_rss_mb: Option<f64>,
}

fn train_cmd<T: Float>(g: &GlobalOpts, a: &TrainArgs) -> Result<()> {
    let mut p = prepare::<T>(g, &a.inputs)?;
    let opt = &mut p.config.train.optimizer;
    if let Some(name) = &a.optimizer {
        let kind = parse_optimizer(name)?;
        *opt = OptimizerSpec { kind, ..opt.clone() };
    }
    if let Some(lr) = a.lr {
        opt.eta = lr;
    }
    if let Some(wd) = a.weight_decay {
        opt.weight_decay = wd;
    }
    opt.validate()?;
    if let Some(s) = a.save_steps {
        p.config.train.save_steps = s;
    }
    let out = a.inputs.out_dir.clone();
    ensure_dir(&out)?;
    p.config.train.output_dir = Some(out.clone());

    let (log, resources) = {
        let cfg = p.config.train.clone();
        let (res, report) = meter(p.config.power_watts, || {
            train(&cfg, &mut p.model, &p.train_blocks, &p.eval_blocks)
        });
        (res?, report)
    };
    p.vocab.save(&out.join(VOCAB_FILE))?;
    let log_path = out.join("training_log.json");
    let text = serde_json::to_string_pretty(&TrainOutput {
        log: &log,
        resources,
        process_peak_rss_mb: os_peak_rss_mb(),
    })?;
    fs::write(&log_path, text).with_context(|| format!("writing {}", log_path.display()))?;

    if let (Some(first), Some(last)) = (log.initial_eval(), log.final_eval()) {
        println!(
            "validation loss {first:.4} -> {last:.4} over {} steps",
            log.optimizer_steps
        );
    }
    println!(
        "{:.1} s, {:.1} MB tensor peak, {:.6} kWh",
        resources.run_time_s, resources.ram_mb, resources.energy_kwh
    );
    let mut m = base_manifest(&a.inputs, &p.config)?
        .output(&log_path)
        .output(out.join(VOCAB_FILE));
    for c in &log.checkpoints {
        m = m.output(c);
    }
    m.write(&out)?;
    Ok(())
}

fn generation_config(a: &GenerationArgs) -> GenerationConfig {
    GenerationConfig {
        max_length: a.max_length,
        num_beams: a.num_beams,
        no_repeat_ngram_size: a.no_repeat_ngram,
        ..GenerationConfig::default()
    }
}

fn generate_cmd<T: Float>(a: &GenerateArgs) -> Result<()> {
    let vocab = vocab_beside(&a.model, a.vocab.as_deref())?;
    let model: Model<T> = load_model(&a.model, &vocab)?;
    let text = generate(&model, &vocab, &a.prompt, &generation_config(&a.generation))?;
    println!("{text}");
    Ok(())
}

fn default_label(ckpt: &Path) -> String {
    let stem = ckpt
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    match ckpt.parent().and_then(Path::file_name) {
        Some(dir) if stem == "final" => dir.to_string_lossy().into_owned(),
        _ => stem,
    }
}

fn eval_cmd<T: Float>(g: &GlobalOpts, a: &EvalArgs) -> Result<()> {
    let labels = match &a.labels {
        Some(l) if l.len() != a.models.len() => bail!("{} labels for {} models", l.len(), a.models.len()),
        Some(l) => l.clone(),
        None => a.models.iter().map(|m| default_label(m)).collect(),
    };
    for (i, l) in labels.iter().enumerate() {
        if labels[..i].contains(l) {
            bail!("duplicate model label `{l}`; pass --labels");
        }
    }
    let mut loaded = Vec::with_capacity(a.models.len());
    for m in &a.models {
        let vocab = vocab_beside(m, a.vocab.as_deref())?;
        let model: Model<T> = load_model(m, &vocab)?;
        loaded.push((model, vocab));
    }
    let prompts = read_prompt_set(&a.prompts)?;
    let entries: Vec<(String, &Model<T>, &Vocabulary)> = labels
        .iter()
        .zip(&loaded)
        .map(|(l, (m, v))| (l.clone(), m, v))
        .collect();
    ensure_dir(&a.out_dir)?;
    let opts = EvalOptions {
        generation: generation_config(&a.generation),
        variants: a.variants,
        out_dir: Some(a.out_dir.clone()),
        ..EvalOptions::default()
    };
    let reports = evaluate_models(&entries, &prompts, &opts)?;
    println!(
        "{:<16} {:>8} {:>8} {:>8} {:>8} {:>12}",
        "Model", "BLEU", "ROUGE-1", "ROUGE-2", "ROUGE-L", "Perplexity"
    );
    for r in &reports {
        let v = r.averages.values();
        println!(
            "{:<16} {:>8.4} {:>8.4} {:>8.4} {:>8.4} {:>12.2}",
            r.label, v[0], v[1], v[2], v[3], v[4]
        );
    }

    #[derive(Serialize)]
    struct Cfg {
        labels: Vec<String>,
        max_length: usize,
        num_beams: usize,
        no_repeat_ngram: usize,
        variants: bool,
    }
    let mut m = ManifestBuilder::new(g.seed).input(&a.prompts)?.config(&Cfg {
        labels: labels.clone(),
        max_length: a.generation.max_length,
        num_beams: a.generation.num_beams,
        no_repeat_ngram: a.generation.no_repeat_ngram,
        variants: a.variants,
    })?;
    for p in &a.models {
        m = m.input(p)?;
    }
    m = m
        .output(a.out_dir.join(AVERAGES_FILE))
        .output(a.out_dir.join(INDIVIDUAL_FILE));
    for l in &labels {
        m = m.output(a.out_dir.join(format!("{l}_generated_text.txt")));
        if a.variants {
            m = m.output(a.out_dir.join(format!("{l}_generated_text_synonyms.txt")));
        }
    }
    m.write(&a.out_dir)?;
    Ok(())
}

fn compare_cmd(g: &GlobalOpts, a: &CompareArgs) -> Result<()> {
    let test = match (a.test, a.paired) {
        (Some(TestArg::Signedrank), _) | (None, true) => TestKind::SignedRank,
        _ => TestKind::RankSum,
    };
    let directions = Directions::parse(&a.alternatives)?;
    let metrics: Vec<String> = match &a.metrics {
        Some(m) => m.iter().map(|s| s.trim().to_string()).collect(),
        None => DEFAULT_METRICS.iter().map(|s| s.to_string()).collect(),
    };
    let labels = a.x.clone().zip(a.y.clone());
    let opts = RankOptions {
        exact_threshold: a.exact_threshold,
        ..RankOptions::default()
    };
    let rows = compare_reports(&a.individual, &metrics, &directions, test, labels, &opts)?;
    if let Some(r) = rows.first() {
        println!("x = {}, y = {}", r.x_label, r.y_label);
    }
    print!("{}", render_comparison(&rows));
    let out = a
        .out
        .clone()
        .unwrap_or_else(|| a.individual.with_file_name("rank_tests.csv"));
    ensure_parent(&out)?;
    write_comparison_csv(
        &rows,
        fs::File::create(&out).with_context(|| format!("creating {}", out.display()))?,
    )?;

    #[derive(Serialize)]
    struct Cfg {
        test: String,
        alternatives: String,
        metrics: Vec<String>,
        exact_threshold: usize,
    }
    ManifestBuilder::new(g.seed)
        .input(&a.individual)?
        .config(&Cfg {
            test: format!("{test:?}"),
            alternatives: a.alternatives.clone(),
            metrics,
            exact_threshold: a.exact_threshold,
        })?
        .output(&out)
        .write(&out)?;
    Ok(())
}

fn compare_repro_cmd(g: &GlobalOpts, a: &CompareReproArgs) -> Result<()> {
    let alt: Alternative = a.alternative.parse()?;
    let opts = RankOptions {
        exact_threshold: a.exact_threshold,
        ..RankOptions::default()
    };
    let row = compare_repro(&a.a, &a.b, alt, &opts)?;
    println!("Test statistic: {}", row.result.statistic);
    println!("p-value: {}", row.result.p_value);
    println!("method: {}, alternative: {}", row.result.method, row.result.alternative);
    if let Some(out) = &a.out {
        ensure_parent(out)?;
        let rows = [row];
        write_comparison_csv(
            &rows,
            fs::File::create(out).with_context(|| format!("creating {}", out.display()))?,
        )?;
        #[derive(Serialize)]
        struct Cfg {
            alternative: String,
            exact_threshold: usize,
        }
        ManifestBuilder::new(g.seed)
            .input(&a.a)?
            .input(&a.b)?
            .config(&Cfg {
                alternative: a.alternative.clone(),
                exact_threshold: a.exact_threshold,
            })?
            .output(out)
            .write(out)?;
    }
    Ok(())
}

fn read_lines(path: &Path) -> Result<Vec<String>> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    Ok(text.lines().map(str::to_string).collect())
}

fn repro_cmd<T: Float>(g: &GlobalOpts, a: &ReproArgs) -> Result<()> {
    let base = read_lines(&a.base)?;
    let variant = read_lines(&a.variant)?;
    let vocab = vocab_beside(&a.embed_model, a.vocab.as_deref())?;
    let model: Model<T> = load_model(&a.embed_model, &vocab)?;
    let report = reproducibility(
        &base,
        &variant,
        &ModelEmbedder {
            model: &model,
            vocab: &vocab,
        },
    )?;
    let out = match &a.out {
        Some(o) => o.clone(),
        None => {
            let label = a.label.clone().unwrap_or_else(|| {
                let stem = a.base.file_stem().unwrap_or_default().to_string_lossy().into_owned();
                stem.strip_suffix("_generated_text").unwrap_or(&stem).to_string()
            });
            a.base.with_file_name(format!("{label}_reproducibility_scores.csv"))
        }
    };
    ensure_parent(&out)?;
    write_repro_csv(
        &report,
        fs::File::create(&out).with_context(|| format!("creating {}", out.display()))?,
    )?;
    match report.mean {
        Some(m) => println!("mean cosine similarity over {} pairs: {m:.4}", report.cosines.len()),
        None => println!("no pair had a defined cosine similarity"),
    }
    ManifestBuilder::new(g.seed)
        .input(&a.base)?
        .input(&a.variant)?
        .input(&a.embed_model)?
        .output(&out)
        .write(&out)?;
    Ok(())
}
