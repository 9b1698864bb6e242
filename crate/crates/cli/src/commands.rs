use std::collections::BTreeMap;
use std::fs;
use std::io::{BufWriter, Write};
use std::path::Path;
use std::str::FromStr;

use erc_core::corpus::{self, Conversation, EmotionLabelSet, LoadOptions};
use erc_core::encoder::{load_precomputed, EncoderConfig};
use erc_core::evalmetrics::{evaluate, render_table};
use erc_core::models::{
    read_predictions, write_predictions, Ensemble, EnsembleManifest, ModelBundle, ModelConfig, ModelDims,
    ModelKind, Prediction, PredictionRecord, DEFAULT_PRIORITY,
};
use erc_core::neuralcore::{GradCheckOptions, Mode};
use erc_core::preprocess::{
    augment_corpus, build_paraphraser, build_translator, build_transliterator, translate_corpus, ProviderCache,
    TranslateOptions,
};
use erc_core::seed::{derive_seed, DROPOUT};
use erc_core::synth;
use erc_core::training::{train_model, train_on_all, TrainConfig};

use crate::error::{io_error, CliError};
use crate::{
    AugmentArgs, Cli, Command, EnsembleArgs, EvaluateArgs, GradcheckArgs, PredictArgs, Result, TrainArgs,
    TranslateArgs,
};

pub fn run(cli: &Cli) -> Result<()> {
    if cli.float32 {
        return Err(CliError::Usage(
            "--float32 is not supported; all arithmetic is 64-bit".into(),
        ));
    }
    if cli.jobs == 0 {
        return Err(CliError::Usage("--jobs must be at least 1".into()));
    }
    log::info!("resolved run: seed {} {cli:?}", cli.seed.unwrap_or(0));
    match &cli.command {
        Command::Translate(a) => translate(cli, a),
        Command::Augment(a) => augment(cli, a),
        Command::Train(a) => train(cli, a),
        Command::Ensemble(a) => ensemble(a),
        Command::Predict(a) => predict(cli, a),
        Command::Evaluate(a) => evaluate_cmd(cli, a),
        Command::Gradcheck(a) => gradcheck(cli, a),
    }
}

fn load_opts(cli: &Cli) -> LoadOptions {
    LoadOptions { lenient: cli.lenient }
}

/// Label set from `--labels`, else the file's header, else the default.
/// The flag reports whether the file declared a header.
fn resolve_labels(cli: &Cli, path: &Path) -> Result<(EmotionLabelSet, bool)> {
    let header = corpus::read_label_header(path)?;
    let has_header = header.is_some();
    let labels = match (&cli.labels, header) {
        (Some(l), _) => EmotionLabelSet::new(l.iter().cloned()).map_err(|e| CliError::Usage(e.to_string()))?,
        (None, Some(h)) => h,
        (None, None) => EmotionLabelSet::default(),
    };
    Ok((labels, has_header))
}

fn cache_for(dir: Option<&Path>) -> ProviderCache {
    match dir {
        Some(d) => ProviderCache::on_disk(d),
        None => ProviderCache::in_memory(),
    }
}

fn translate(cli: &Cli, a: &TranslateArgs) -> Result<()> {
    let (labels, header) = resolve_labels(cli, &a.input)?;
    let convs = corpus::load_corpus(&a.input, &labels, load_opts(cli))?;
    let tl = build_transliterator(&a.translit)?;
    let tr = build_translator(&a.translate)?;
    log::info!(
        "translate: transliterator={} translator={} force={} jobs={}",
        tl.name(),
        tr.name(),
        a.force,
        cli.jobs
    );
    let cache = cache_for(a.cache_dir.as_deref());
    let opts = TranslateOptions {
        force: a.force,
        jobs: cli.jobs,
    };
    let (out, stats) = translate_corpus(&convs, tl.as_ref(), tr.as_ref(), &cache, opts);
    corpus::save_corpus(&a.output, &out, &labels, header || cli.labels.is_some())?;
    println!("{}", to_json(&stats));
    Ok(())
}

fn augment(cli: &Cli, a: &AugmentArgs) -> Result<()> {
    let (labels, header) = resolve_labels(cli, &a.input)?;
    let convs = corpus::load_corpus(&a.input, &labels, load_opts(cli))?;
    let p = build_paraphraser(&a.paraphraser)?;
    let seed = cli.seed.unwrap_or(0);
    log::info!("augment: paraphraser={} seed={seed}", p.name());
    let cache = cache_for(a.cache_dir.as_deref());
    let (out, stats) = augment_corpus(&convs, p.as_ref(), seed, &cache);
    corpus::save_corpus(&a.output, &out, &labels, header || cli.labels.is_some())?;
    println!("{}", to_json(&stats));
    Ok(())
}

fn to_json<T: serde::Serialize>(v: &T) -> String {
    serde_json::to_string(v).expect("plain data serializes")
}

fn train_config(cli: &Cli, a: &TrainArgs) -> Result<TrainConfig> {
    let mut cfg = match &cli.config {
        Some(path) => {
            let text = fs::read_to_string(path).map_err(|e| io_error(path, e))?;
            serde_json::from_str(&text).map_err(|e| CliError::Usage(format!("{}: {e}", path.display())))?
        }
        None => TrainConfig::default(),
    };
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    if let Some(e) = a.epochs {
        cfg.max_epochs = e;
    }
    if a.batch_size.is_some() {
        cfg.batch_size = a.batch_size;
    }
    if let Some(p) = a.patience {
        cfg.patience = p;
    }
    if let Some(lr) = a.lr_main {
        cfg.optimizer.lr_main = lr;
    }
    if let Some(lr) = a.lr_encoder {
        cfg.optimizer.lr_encoder = lr;
    }
    if a.target_train_accuracy.is_some() {
        cfg.target_train_accuracy = a.target_train_accuracy;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn train(cli: &Cli, a: &TrainArgs) -> Result<()> {
    let kind = ModelKind::from_str(&a.kind).map_err(|e| CliError::Usage(e.to_string()))?;
    let mut dims = ModelDims::preset(&a.preset)
        .ok_or_else(|| CliError::Usage(format!("unknown preset {:?}; expected full or desk", a.preset)))?;
    let cfg = train_config(cli, a)?;
    let (labels, _) = resolve_labels(cli, &a.train)?;
    let train = corpus::load_corpus(&a.train, &labels, load_opts(cli))?;
    let val = match &a.val {
        Some(p) => corpus::load_corpus(p, &labels, load_opts(cli))?,
        None => Vec::new(),
    };
    if kind == ModelKind::SimpleHistoryAug && corpus::stats(&train).synthetic == 0 {
        return Err(CliError::Data(format!(
            "{} needs synthetic paraphrase records; run `erc augment` on {} first",
            kind,
            a.train.display()
        )));
    }
    if a.train_on_all && val.is_empty() {
        return Err(CliError::Usage("--train-on-all needs --val".into()));
    }

    let encoder = match a.encoder.split_once(':') {
        None if a.encoder == "hashed" => None,
        Some(("precomputed", path)) => {
            let table = load_precomputed(Path::new(path))?;
            dims.d_enc = table.dim_of();
            Some(EncoderConfig::Precomputed {
                path: path.into(),
                strict: !cli.lenient,
            })
        }
        _ => {
            return Err(CliError::Usage(format!(
                "unknown encoder {:?}; expected hashed or precomputed:<path>",
                a.encoder
            )))
        }
    };
    let mut config = ModelConfig::new(kind, dims, labels, cfg.seed);
    if let Some(e) = encoder {
        config.encoder = e;
    }
    config.no_context = a.no_context;
    config.gru_includes_next = !a.gru_exclude_next;
    log::info!("model config: {}", to_json(&config));
    log::info!("train config: {}", to_json(&cfg));

    let init = ModelBundle::new(config)?;
    let (bundle, logs) = if a.train_on_all {
        let (b, first, second) = train_on_all(&init, &train, &val, &cfg)?;
        (b, vec![("selection", first), ("final", second)])
    } else {
        let (b, log) = train_model(&init, &train, &val, &cfg)?;
        (b, vec![("run", log)])
    };
    bundle.save(&a.output)?;
    let log_path = a.output.join("train_log.jsonl");
    let file = fs::File::create(&log_path).map_err(|e| io_error(&log_path, e))?;
    let mut w = BufWriter::new(file);
    for (phase, log) in &logs {
        log.write_jsonl(&mut w).map_err(|e| io_error(&log_path, e))?;
        println!("{phase}: {}", log.summary());
    }
    w.flush().map_err(|e| io_error(&log_path, e))?;
    Ok(())
}

fn ensemble(a: &EnsembleArgs) -> Result<()> {
    let priority = match &a.priority {
        Some(p) => p
            .iter()
            .map(|k| ModelKind::from_str(k).map_err(|e| CliError::Usage(e.to_string())))
            .collect::<Result<Vec<_>>>()?,
        None => DEFAULT_PRIORITY.to_vec(),
    };
    let members = a
        .members
        .iter()
        .map(|m| fs::canonicalize(m).map_err(|e| io_error(m, e)))
        .collect::<Result<Vec<_>>>()?;
    // Loading validates the member count and label sets before writing.
    let loaded = members
        .iter()
        .map(|m| ModelBundle::load(m))
        .collect::<std::result::Result<Vec<_>, _>>()?;
    Ensemble::new(loaded, priority.clone())?;
    let manifest = EnsembleManifest { members, priority };
    let text = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
    fs::write(&a.output, text + "\n").map_err(|e| io_error(&a.output, e))?;
    Ok(())
}

enum Predictor {
    Single(Box<ModelBundle>),
    Ensemble(Ensemble),
}

impl Predictor {
    fn labels(&self) -> &EmotionLabelSet {
        match self {
            Predictor::Single(b) => b.labels(),
            Predictor::Ensemble(e) => e.labels(),
        }
    }

    fn predict(&self, conv: &Conversation) -> std::result::Result<Vec<Prediction>, erc_core::models::ModelError> {
        match self {
            Predictor::Single(b) => b.predict_conversation(conv),
            Predictor::Ensemble(e) => e.predict_conversation(conv),
        }
    }
}

fn predict(cli: &Cli, a: &PredictArgs) -> Result<()> {
    let predictor = match (&a.model, &a.ensemble) {
        (Some(dir), None) => {
            let mut b = ModelBundle::load(dir)?;
            if a.no_context {
                b.set_no_context(true);
            }
            Predictor::Single(Box::new(b))
        }
        (None, Some(path)) => {
            if a.no_context {
                return Err(CliError::Usage("--no-context applies to single models only".into()));
            }
            Predictor::Ensemble(Ensemble::load(path)?)
        }
        _ => return Err(CliError::Usage("give exactly one of --model or --ensemble".into())),
    };
    let labels = predictor.labels().clone();
    let convs = corpus::load_corpus(&a.input, &labels, load_opts(cli))?;
    log::info!("predict: {} conversations, jobs={}", convs.len(), cli.jobs);

    let jobs = cli.jobs.clamp(1, convs.len().max(1));
    let chunk = convs.len().div_ceil(jobs).max(1);
    let results: Vec<_> = std::thread::scope(|s| {
        let handles: Vec<_> = convs
            .chunks(chunk)
            .map(|part| {
                let predictor = &predictor;
                s.spawn(move || part.iter().map(|c| predictor.predict(c)).collect::<Vec<_>>())
            })
            .collect();
        handles
            .into_iter()
            .flat_map(|h| h.join().expect("prediction worker panicked"))
            .collect()
    });

    let mut records = Vec::new();
    for (conv, preds) in convs.iter().zip(results) {
        for (u, p) in conv.utterances.iter().zip(preds?) {
            records.push(PredictionRecord::new(&conv.id, u.index, &p, &labels));
        }
    }
    let file = fs::File::create(&a.output).map_err(|e| io_error(&a.output, e))?;
    let mut w = BufWriter::new(file);
    write_predictions(&mut w, &records).map_err(|e| io_error(&a.output, e))?;
    w.flush().map_err(|e| io_error(&a.output, e))?;
    Ok(())
}

fn evaluate_cmd(cli: &Cli, a: &EvaluateArgs) -> Result<()> {
    let (labels, _) = resolve_labels(cli, &a.gold)?;
    let gold = corpus::load_corpus(&a.gold, &labels, load_opts(cli))?;
    let mut preds: BTreeMap<(String, usize), String> = BTreeMap::new();
    for r in read_predictions(&a.pred)? {
        let key = (r.cid, r.index);
        if preds.insert(key.clone(), r.label).is_some() {
            return Err(CliError::Data(format!("duplicate prediction for {}:{}", key.0, key.1)));
        }
    }
    let (mut p, mut g) = (Vec::new(), Vec::new());
    let mut unscored = 0;
    for conv in &gold {
        for u in &conv.utterances {
            let key = (conv.id.clone(), u.index);
            let Some(label) = preds.remove(&key) else {
                return Err(CliError::Data(format!("no prediction for {}:{}", key.0, key.1)));
            };
            let Some(gi) = u.gold else {
                unscored += 1;
                continue;
            };
            let pi = labels
                .index_of(&label)
                .ok_or_else(|| CliError::Data(format!("{}:{}: unknown label {label:?}", key.0, key.1)))?;
            p.push(pi);
            g.push(gi);
        }
    }
    if let Some(((cid, index), _)) = preds.into_iter().next() {
        return Err(CliError::Data(format!("prediction {cid}:{index} has no gold utterance")));
    }
    let mut report = evaluate(&p, &g, &labels)?;
    report.unscored = unscored;
    print!("{}", render_table(&[(a.name.clone(), report.clone())]));
    if let Some(path) = &a.json {
        let text = serde_json::to_string_pretty(&report).expect("report serializes");
        fs::write(path, text + "\n").map_err(|e| io_error(path, e))?;
    }
    Ok(())
}

fn gradcheck(cli: &Cli, a: &GradcheckArgs) -> Result<()> {
    let kinds = if a.kind == "all" {
        ModelKind::ALL.to_vec()
    } else {
        vec![ModelKind::from_str(&a.kind).map_err(|e| CliError::Usage(e.to_string()))?]
    };
    let dims = ModelDims::preset(&a.preset)
        .ok_or_else(|| CliError::Usage(format!("unknown preset {:?}; expected full or desk", a.preset)))?;
    let seed = cli.seed.unwrap_or(0);
    let convs = synth::generate(1, seed, "gc");
    let opts = GradCheckOptions {
        max_entries_per_param: a.entries,
        seed,
        ..GradCheckOptions::default()
    };
    let mut failed = Vec::new();
    for kind in kinds {
        let bundle = ModelBundle::new(ModelConfig::new(kind, dims.clone(), synth::synth_labels(), seed))?;
        let windows = bundle.windows(&convs[0]);
        for mode in [Mode::Train, Mode::Eval] {
            let report = bundle.grad_check(&windows, &opts, mode, derive_seed(seed, DROPOUT))?;
            println!(
                "{}",
                serde_json::json!({"kind": kind, "mode": format!("{mode:?}").to_lowercase(), "report": report})
            );
            if !report.passed {
                failed.push(format!("{kind} ({mode:?})"));
            }
        }
    }
    if failed.is_empty() {
        Ok(())
    } else {
        Err(CliError::Numerical(format!("gradient check failed for {}", failed.join(", "))))
    }
}
