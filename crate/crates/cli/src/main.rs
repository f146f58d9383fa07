use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use vigt::data::synth::{generate_range, SynthConfig};
use vigt::data::{load_feature_file, save_dataset, GroundingSample};
use vigt::metrics::{
    default_bins, iou_histogram, read_predictions_csv, write_histogram_csv, write_predictions_csv,
    MetricSummary,
};
use vigt::train::attention::attention_dump;
use vigt::train::checkpoint::check_sample_dims;
use vigt::train::gradcheck::{gradcheck, GradcheckConfig};
use vigt::train::trainer::write_loss_log;
use vigt::train::{load_checkpoint, prepare, save_checkpoint, Evaluation, TrainConfig, Trainer};
use vigt::{Precision, Result, Scalar, VigtError};

#[derive(Parser)]
#[command(
    name = "vigt",
    version,
    about = "Proposal-free video grounding with a regression token"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a planted-moment dataset (JSON lines + `.arr` sidecar).
    GenData(GenDataArgs),
    /// Train a model and write a checkpoint.
    Train(TrainArgs),
    /// Evaluate a checkpoint on a dataset.
    Eval(EvalArgs),
    /// Finite-difference check of all parameter gradients.
    Gradcheck(GradcheckArgs),
    /// Write attention maps of one sample as CSV matrices.
    DumpAttention(DumpArgs),
    /// Metrics and IoU histogram from a predictions file.
    Histogram(HistogramArgs),
}

#[derive(Args)]
struct GenDataArgs {
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 1000)]
    n: usize,
    /// Id of the first sample; use disjoint ranges for train/test splits.
    #[arg(long, default_value_t = 0)]
    first_id: u64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    clips: Option<usize>,
    #[arg(long)]
    query_len: Option<usize>,
    #[arg(long)]
    d_v: Option<usize>,
    #[arg(long)]
    d_q: Option<usize>,
    #[arg(long)]
    n_concepts: Option<usize>,
    #[arg(long)]
    noise_std: Option<f64>,
    #[arg(long)]
    min_width: Option<f64>,
    #[arg(long)]
    max_width: Option<f64>,
}

/// Flags mirroring the `key = value` configuration keys.
#[derive(Args, Default)]
struct ConfigFlags {
    /// Plain-text `key = value` file; flags override it.
    #[arg(long)]
    config: Option<PathBuf>,
    /// `paper` or `toy`.
    #[arg(long)]
    profile: Option<String>,
    #[arg(long)]
    d_v: Option<String>,
    #[arg(long)]
    d_q: Option<String>,
    #[arg(long)]
    d: Option<String>,
    #[arg(long)]
    heads: Option<String>,
    #[arg(long)]
    clips: Option<String>,
    #[arg(long)]
    query_len: Option<String>,
    #[arg(long)]
    conv_kernel: Option<String>,
    #[arg(long)]
    conv_layers: Option<String>,
    #[arg(long)]
    layers: Option<String>,
    #[arg(long)]
    ffn_mult: Option<String>,
    #[arg(long)]
    dropout: Option<String>,
    /// full, no_fe, no_cmca, no_fe_no_cmca, cmca_then_fe, unshared_fe
    #[arg(long)]
    encoder_mode: Option<String>,
    #[arg(long)]
    no_token: Option<String>,
    #[arg(long)]
    final_ln: Option<String>,
    #[arg(long)]
    lambda: Option<String>,
    #[arg(long)]
    beta: Option<String>,
    #[arg(long)]
    alpha: Option<String>,
    /// e.g. `sl1+giou+cls`
    #[arg(long)]
    loss_terms: Option<String>,
    #[arg(long)]
    lr: Option<String>,
    #[arg(long)]
    beta1: Option<String>,
    #[arg(long)]
    beta2: Option<String>,
    #[arg(long)]
    adam_eps: Option<String>,
    #[arg(long)]
    batch_size: Option<String>,
    #[arg(long)]
    max_steps: Option<String>,
    #[arg(long)]
    seed: Option<String>,
    #[arg(long)]
    precision: Option<String>,
    #[arg(long)]
    log_every: Option<String>,
}

impl ConfigFlags {
    fn pairs(&self) -> Vec<(&'static str, &str)> {
        let fields: [(&'static str, &Option<String>); 28] = [
            ("profile", &self.profile),
            ("d_v", &self.d_v),
            ("d_q", &self.d_q),
            ("d", &self.d),
            ("heads", &self.heads),
            ("clips", &self.clips),
            ("query_len", &self.query_len),
            ("conv_kernel", &self.conv_kernel),
            ("conv_layers", &self.conv_layers),
            ("layers", &self.layers),
            ("ffn_mult", &self.ffn_mult),
            ("dropout", &self.dropout),
            ("encoder_mode", &self.encoder_mode),
            ("no_token", &self.no_token),
            ("final_ln", &self.final_ln),
            ("lambda", &self.lambda),
            ("beta", &self.beta),
            ("alpha", &self.alpha),
            ("loss_terms", &self.loss_terms),
            ("lr", &self.lr),
            ("beta1", &self.beta1),
            ("beta2", &self.beta2),
            ("adam_eps", &self.adam_eps),
            ("batch_size", &self.batch_size),
            ("max_steps", &self.max_steps),
            ("seed", &self.seed),
            ("precision", &self.precision),
            ("log_every", &self.log_every),
        ];
        fields
            .into_iter()
            .filter_map(|(k, v)| v.as_deref().map(|v| (k, v)))
            .collect()
    }

    fn resolve(&self) -> Result<TrainConfig> {
        let mut file_pairs = Vec::new();
        if let Some(path) = &self.config {
            let text = std::fs::read_to_string(path)
                .map_err(|e| VigtError::Config(format!("{}: {e}", path.display())))?;
            file_pairs = TrainConfig::parse_kv(&text)?;
        }
        // profile first (a flag beats the file), then file values, then flags
        let pairs = file_pairs
            .iter()
            .map(|(k, v)| (k.as_str(), v.as_str()))
            .chain(self.pairs());
        let cfg = TrainConfig::default().apply(pairs)?;
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Args)]
struct TrainArgs {
    #[command(flatten)]
    cfg: ConfigFlags,
    /// Training dataset (JSON lines).
    #[arg(long)]
    train_data: PathBuf,
    /// Held-out dataset evaluated after training.
    #[arg(long)]
    eval_data: Option<PathBuf>,
    /// Checkpoint path.
    #[arg(long)]
    out: PathBuf,
    /// Per-step loss log CSV.
    #[arg(long)]
    loss_log: Option<PathBuf>,
    #[arg(long)]
    metrics: Option<PathBuf>,
    #[arg(long)]
    predictions: Option<PathBuf>,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    metrics: Option<PathBuf>,
    #[arg(long)]
    predictions: Option<PathBuf>,
}

#[derive(Args)]
struct GradcheckArgs {
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    d: Option<usize>,
    #[arg(long)]
    heads: Option<usize>,
    #[arg(long)]
    clips: Option<usize>,
    #[arg(long)]
    query_len: Option<usize>,
    #[arg(long)]
    layers: Option<usize>,
    #[arg(long)]
    no_token: bool,
    /// e.g. `sl1+giou+cls`
    #[arg(long)]
    loss_terms: Option<String>,
    /// Check at most this many elements per parameter.
    #[arg(long)]
    max_elements: Option<usize>,
    /// Test fixture: scale analytic gradients of parameters with this name
    /// prefix by 1.01 before comparing.
    #[arg(long, hide = true)]
    corrupt: Option<String>,
}

#[derive(Args)]
struct DumpArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    data: PathBuf,
    /// Position of the sample in the dataset file.
    #[arg(long, default_value_t = 0)]
    index: usize,
    #[arg(long)]
    out_dir: PathBuf,
}

#[derive(Args)]
struct HistogramArgs {
    #[arg(long)]
    predictions: PathBuf,
    /// Histogram CSV (`bin_lo,bin_hi,count`).
    #[arg(long)]
    out: PathBuf,
    /// Metrics CSV (`metric,value`).
    #[arg(long)]
    metrics: Option<PathBuf>,
}

fn exit_code(e: &VigtError) -> u8 {
    match e {
        VigtError::Verification(_) => 2,
        VigtError::Numeric(_) => 3,
        _ => 1,
    }
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir)?;
    }
    Ok(BufWriter::new(File::create(path)?))
}

fn gen_data(a: GenDataArgs) -> Result<()> {
    let mut cfg = SynthConfig {
        seed: a.seed,
        ..SynthConfig::default()
    };
    macro_rules! over {
        ($($f:ident),*) => { $(if let Some(v) = a.$f { cfg.$f = v; })* };
    }
    over!(clips, query_len, d_v, d_q, n_concepts, noise_std, min_width, max_width);
    let samples = generate_range(&cfg, a.first_id, a.n)?;
    save_dataset(&a.out, &samples)?;
    println!("wrote {} samples to {}", samples.len(), a.out.display());
    Ok(())
}

fn load_data(path: &Path, cfg: &TrainConfig) -> Result<Vec<GroundingSample>> {
    let samples = load_feature_file(path, cfg.model.clips, cfg.model.query_len)?;
    if samples.is_empty() {
        return Err(VigtError::Usage(format!(
            "{} holds no samples",
            path.display()
        )));
    }
    for s in &samples {
        check_sample_dims(&cfg.model, s)?;
    }
    Ok(samples)
}

fn write_eval(ev: &Evaluation, metrics: Option<&Path>, predictions: Option<&Path>) -> Result<()> {
    ev.summary.write_csv(std::io::stdout().lock())?;
    if let Some(p) = metrics {
        let mut w = create(p)?;
        ev.summary.write_csv(&mut w)?;
        w.flush()?;
    }
    if let Some(p) = predictions {
        let mut w = create(p)?;
        write_predictions_csv(&mut w, &ev.records)?;
        w.flush()?;
    }
    Ok(())
}

fn last_good_path(out: &Path) -> PathBuf {
    let mut s = out.as_os_str().to_owned();
    s.push(".last-good");
    PathBuf::from(s)
}

fn train_with<E: Scalar>(a: &TrainArgs, cfg: TrainConfig) -> Result<()> {
    let train = prepare::<E>(&load_data(&a.train_data, &cfg)?);
    let eval = match &a.eval_data {
        Some(p) => Some(prepare::<E>(&load_data(p, &cfg)?)),
        None => None,
    };
    let log_every = cfg.log_every;
    let mut trainer = Trainer::<E>::new(cfg)?;
    let mut logs = Vec::new();
    let result = trainer.train(&train, |_, log| {
        if log_every > 0 && log.step % log_every as u64 == 0 {
            let b = &log.loss;
            eprintln!(
                "step {} loss {:.6} (sl1 {:.6} giou {:.6} cls {:.6})",
                log.step, b.total, b.smooth_l1, b.giou, b.cls
            );
        }
        logs.push(*log);
        Ok(())
    });
    if let Some(p) = &a.loss_log {
        let mut w = create(p)?;
        write_loss_log(&mut w, &logs)?;
        w.flush()?;
    }
    if let Err(e) = result {
        let path = last_good_path(&a.out);
        save_checkpoint(&path, &trainer)?;
        eprintln!(
            "last good state (step {}) saved to {}",
            trainer.step(),
            path.display()
        );
        return Err(e);
    }
    save_checkpoint(&a.out, &trainer)?;
    if let Some(eval) = eval {
        let ev = trainer.evaluate(&eval)?;
        write_eval(&ev, a.metrics.as_deref(), a.predictions.as_deref())?;
    }
    Ok(())
}

fn train(a: TrainArgs) -> Result<()> {
    let cfg = a.cfg.resolve()?;
    match cfg.precision {
        Precision::F32 => train_with::<f32>(&a, cfg),
        Precision::F64 => train_with::<f64>(&a, cfg),
    }
}

fn eval_with<E: Scalar>(a: &EvalArgs) -> Result<()> {
    let trainer = load_checkpoint::<E>(&a.checkpoint)?;
    let data = prepare::<E>(&load_data(&a.data, &trainer.config)?);
    let ev = trainer.evaluate(&data)?;
    write_eval(&ev, a.metrics.as_deref(), a.predictions.as_deref())
}

fn checkpoint_precision(path: &Path) -> Result<Precision> {
    let cfg_path = vigt::train::checkpoint::config_path(path);
    let text = std::fs::read_to_string(&cfg_path)
        .map_err(|e| VigtError::Load(format!("{}: {e}", cfg_path.display())))?;
    Ok(TrainConfig::from_kv(TrainConfig::default(), &text)?.precision)
}

fn eval(a: EvalArgs) -> Result<()> {
    match checkpoint_precision(&a.checkpoint)? {
        Precision::F32 => eval_with::<f32>(&a),
        Precision::F64 => eval_with::<f64>(&a),
    }
}

fn run_gradcheck(a: GradcheckArgs) -> Result<()> {
    let mut cfg = GradcheckConfig::default();
    let m = &mut cfg.model;
    macro_rules! over {
        ($($f:ident),*) => { $(if let Some(v) = a.$f { m.$f = v; })* };
    }
    over!(d, heads, clips, query_len, layers);
    m.no_token = a.no_token;
    if let Some(s) = a.seed {
        cfg.seed = s;
    }
    if let Some(t) = &a.loss_terms {
        cfg.terms = vigt::train::config::parse_terms(t)?;
    }
    cfg.max_elements = a.max_elements;
    let corrupt = a.corrupt.clone().map(|prefix| {
        move |name: &str, g: &mut [f64]| {
            if name.starts_with(prefix.as_str()) {
                g.iter_mut().for_each(|x| *x *= 1.01);
            }
        }
    });
    let report = gradcheck(
        &cfg,
        corrupt.as_ref().map(|f| f as &dyn Fn(&str, &mut [f64])),
    )?;
    report.write_table(std::io::stdout().lock())?;
    println!(
        "max relative error {:.3e} (threshold {:.0e}), {:.1}s",
        report.max_rel_err(),
        report.threshold,
        report.seconds
    );
    report.into_result().map(|_| ())
}

fn dump_with<E: Scalar>(a: &DumpArgs) -> Result<()> {
    let trainer = load_checkpoint::<E>(&a.checkpoint)?;
    let samples = load_data(&a.data, &trainer.config)?;
    let s = samples.get(a.index).ok_or_else(|| {
        VigtError::Usage(format!(
            "sample index {} out of range ({})",
            a.index,
            samples.len()
        ))
    })?;
    let dump = attention_dump(
        &trainer.model,
        &trainer.store,
        &s.video.cast::<E>(),
        &s.query.cast::<E>(),
    )?;
    for p in dump.write_dir(&a.out_dir)? {
        println!("{}", p.display());
    }
    Ok(())
}

fn dump_attention(a: DumpArgs) -> Result<()> {
    match checkpoint_precision(&a.checkpoint)? {
        Precision::F32 => dump_with::<f32>(&a),
        Precision::F64 => dump_with::<f64>(&a),
    }
}

fn histogram(a: HistogramArgs) -> Result<()> {
    let records = read_predictions_csv(BufReader::new(File::open(&a.predictions)?))?;
    let bins = default_bins();
    let counts = iou_histogram(&records, &bins)?;
    let mut w = create(&a.out)?;
    write_histogram_csv(&mut w, &bins, &counts)?;
    w.flush()?;
    if let Some(p) = &a.metrics {
        let mut w = create(p)?;
        MetricSummary::compute(&records)?.write_csv(&mut w)?;
        w.flush()?;
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() {
                ExitCode::from(1)
            } else {
                ExitCode::SUCCESS
            };
        }
    };
    let result = match cli.command {
        Command::GenData(a) => gen_data(a),
        Command::Train(a) => train(a),
        Command::Eval(a) => eval(a),
        Command::Gradcheck(a) => run_gradcheck(a),
        Command::DumpAttention(a) => dump_attention(a),
        Command::Histogram(a) => histogram(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
