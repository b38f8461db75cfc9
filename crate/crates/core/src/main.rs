use std::fmt::Write as _;
use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use clap::{Args, CommandFactory, Parser, Subcommand};

use vlt::config::Config;
use vlt::dataset::{grammar_vocabulary, Dataset};
use vlt::experiment::{self, Sweep};
use vlt::gradcheck::{self, Tolerance};
use vlt::metrics::{self, EvalOptions};
use vlt::raster::{self, Mask};
use vlt::text::Vocabulary;
use vlt::train::LOG_HEADER;
use vlt::{checkpoint, Error, ParamStore, Result, Tape, Tensor, Vlt};

/// Referring segmentation on synthetic scenes.
#[derive(Parser)]
#[command(name = "vlt", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone, Default)]
struct Common {
    /// key=value config file; defaults apply to absent keys.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the `seed` key.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Extra key=value overrides, applied after the config file.
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    overrides: Vec<String>,
}

#[derive(Subcommand)]
enum Command {
    /// Write a synthetic dataset.
    GenerateData {
        #[arg(long)]
        out: PathBuf,
        /// Use the held-out split settings (data.eval_*).
        #[arg(long)]
        eval: bool,
        #[command(flatten)]
        common: Common,
    },
    /// Train and write config.txt, vocab.txt, train.log and checkpoints.
    Train {
        #[arg(long)]
        out: PathBuf,
        /// Dataset directory; generated from the config when absent.
        #[arg(long)]
        dataset: Option<PathBuf>,
        #[command(flatten)]
        common: Common,
    },
    /// Score a checkpoint and write a tab-separated report.
    Eval {
        /// Untrained weights from the seed when absent.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Held-out split generated from the config when absent.
        #[arg(long)]
        dataset: Option<PathBuf>,
        /// Erase each sample's most important word before predicting.
        #[arg(long)]
        mask_eval: bool,
        /// Report path; stdout when absent.
        #[arg(long)]
        out: Option<PathBuf>,
        #[command(flatten)]
        common: Common,
    },
    /// Predict one mask: prob.pgm and mask.pbm, optionally raw logits.
    Infer {
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// P6 image of model.image_size pixels square.
        #[arg(long)]
        image: PathBuf,
        #[arg(long)]
        expression: String,
        #[arg(long)]
        out: PathBuf,
        /// Also write logits.f32 (little-endian float32) and logits.txt.
        #[arg(long)]
        raw_logits: bool,
        #[command(flatten)]
        common: Common,
    },
    /// Train and evaluate one variant per value of a config key.
    Ablate {
        /// nq | fusion | query_kind | mcl
        sweep: String,
        /// Comma-separated values; the sweep's defaults when absent.
        #[arg(long, value_delimiter = ',')]
        values: Vec<String>,
        #[arg(long)]
        dataset: Option<PathBuf>,
        #[arg(long)]
        eval_dataset: Option<PathBuf>,
        /// Results table path; stdout when absent.
        #[arg(long)]
        out: Option<PathBuf>,
        #[command(flatten)]
        common: Common,
    },
    /// Write query-word attention and per-query spatial maps.
    DumpAttention {
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        image: PathBuf,
        #[arg(long)]
        expression: String,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        common: Common,
    },
    /// Finite-difference check of every model gradient.
    GradCheck {
        #[command(flatten)]
        common: Common,
    },
}

const MIN_PASS_FRACTION: f64 = 0.99;
const MAX_FAILURE_ABS: f64 = 1e-6;

fn load_config(common: &Common, checkpoint: Option<&Path>) -> Result<Config> {
    let path = common.config.clone().or_else(|| {
        let p = checkpoint?.parent()?.join("config.txt");
        p.exists().then_some(p)
    });
    let mut cfg = match path {
        Some(p) => Config::parse_text(&fs::read_to_string(&p)?)?,
        None => Config::default(),
    };
    cfg.apply_overrides(&common.overrides)?;
    if let Some(s) = common.seed {
        cfg.seed = s;
    }
    Ok(cfg)
}

fn model_vocab(checkpoint: Option<&Path>) -> Result<Vocabulary> {
    match checkpoint.and_then(Path::parent).map(|d| d.join("vocab.txt")) {
        Some(p) if p.exists() => Vocabulary::load(&p),
        _ => Ok(grammar_vocabulary()),
    }
}

fn load_model(cfg: &Config, vocab: &Vocabulary, checkpoint: Option<&Path>) -> Result<(Vlt, ParamStore)> {
    let (model, mut store) = Vlt::new(&cfg.model, vocab.len(), cfg.seed)?;
    if let Some(p) = checkpoint {
        checkpoint::load_into(&mut store, p)?;
    }
    Ok((model, store))
}

fn load_image(cfg: &Config, path: &Path) -> Result<Tensor> {
    let img = raster::read_ppm(path)?;
    let s = cfg.model.image_size;
    if (img.height, img.width) != (s, s) {
        return Err(Error::Data(format!(
            "{} is {}×{}, model expects {s}×{s}",
            path.display(),
            img.height,
            img.width
        )));
    }
    Ok(img.to_tensor())
}

fn encode_expression(vocab: &Vocabulary, text: &str) -> Result<Vec<usize>> {
    let ids = vocab.encode(text);
    if ids.is_empty() {
        return Err(Error::Data("expression has no words".into()));
    }
    Ok(ids)
}

fn dataset_or(path: Option<&Path>, make: impl FnOnce() -> Result<Dataset>) -> Result<Dataset> {
    match path {
        Some(p) => Dataset::load(p),
        None => make(),
    }
}

fn open_out(path: Option<&Path>) -> Result<Box<dyn Write>> {
    Ok(match path {
        Some(p) => Box::new(BufWriter::new(File::create(p)?)),
        None => Box::new(std::io::stdout().lock()),
    })
}

fn generate_data(out: &Path, eval: bool, common: &Common) -> Result<()> {
    let cfg = load_config(common, None)?;
    let ds = if eval {
        experiment::eval_split(&cfg)?
    } else {
        experiment::train_split(&cfg)?
    };
    ds.save(out)?;
    println!("{} scenes, {} samples -> {}", ds.images.len(), ds.len(), out.display());
    Ok(())
}

fn train(out: &Path, dataset: Option<&Path>, common: &Common) -> Result<()> {
    let cfg = load_config(common, None)?;
    let ds = dataset_or(dataset, || experiment::train_split(&cfg))?;
    fs::create_dir_all(out)?;
    fs::write(out.join("config.txt"), cfg.to_text())?;
    ds.vocab.save(&out.join("vocab.txt"))?;
    let mut log = BufWriter::new(File::create(out.join("train.log"))?);
    writeln!(log, "{LOG_HEADER}")?;
    let start = Instant::now();
    let m = experiment::train(&cfg, &ds, &mut log, Some(out))?;
    log.flush()?;
    if let Some(last) = m.history.last() {
        println!(
            "{} steps in {:.1}s, final bce {:.6} mcl {:.6}; fingerprint {}",
            last.step,
            start.elapsed().as_secs_f64(),
            last.bce,
            last.mcl,
            cfg.fingerprint()
        );
    }
    Ok(())
}

fn eval(checkpoint: Option<&Path>, dataset: Option<&Path>, mask_eval: bool, out: Option<&Path>, common: &Common) -> Result<()> {
    let cfg = load_config(common, checkpoint)?;
    let vocab = model_vocab(checkpoint)?;
    let ds = dataset_or(dataset, || experiment::eval_split(&cfg))?;
    if ds.vocab != vocab {
        return Err(Error::Data("dataset vocabulary differs from the model's".into()));
    }
    experiment::check_image_size(&cfg, &ds)?;
    let (model, store) = load_model(&cfg, &vocab, checkpoint)?;
    let opts = EvalOptions {
        threshold: cfg.threshold,
        mask_eval,
    };
    let report = metrics::evaluate(&model, &store, &ds, opts, &cfg.fingerprint(), cfg.seed)?;
    match out {
        Some(p) => {
            fs::write(p, report.to_tsv())?;
            println!("{}", report.summary_header());
            println!("{}", report.summary_row("eval"));
        }
        None => print!("{}", report.to_tsv()),
    }
    Ok(())
}

fn infer(checkpoint: Option<&Path>, image: &Path, expression: &str, out: &Path, raw: bool, common: &Common) -> Result<()> {
    let cfg = load_config(common, checkpoint)?;
    let vocab = model_vocab(checkpoint)?;
    let (model, store) = load_model(&cfg, &vocab, checkpoint)?;
    let img = load_image(&cfg, image)?;
    let tokens = encode_expression(&vocab, expression)?;
    let (pred, _) = metrics::predict(&model, &store, &img, &tokens, cfg.threshold)?;
    let (h, w) = pred.logits.dims2()?;
    fs::create_dir_all(out)?;
    fs::write(out.join("prob.pgm"), raster::encode_pgm(h, w, pred.probabilities.data()))?;
    fs::write(out.join("mask.pbm"), raster::encode_pbm(&Mask::new(h, w, pred.mask.clone())?))?;
    if raw {
        let bytes: Vec<u8> = pred.logits.data().iter().flat_map(|&v| (v as f32).to_le_bytes()).collect();
        fs::write(out.join("logits.f32"), bytes)?;
        fs::write(
            out.join("logits.txt"),
            format!("height {h}\nwidth {w}\ndtype float32\nendianness little\norder row-major\n"),
        )?;
    }
    println!("{} foreground pixels of {}", pred.mask.iter().filter(|&&m| m).count(), h * w);
    Ok(())
}

fn ablate(
    sweep: &str,
    values: &[String],
    dataset: Option<&Path>,
    eval_dataset: Option<&Path>,
    out: Option<&Path>,
    common: &Common,
) -> Result<()> {
    let sweep: Sweep = sweep.parse()?;
    let cfg = load_config(common, None)?;
    let values = if values.is_empty() { sweep.default_values() } else { values.to_vec() };
    sweep.variants(&cfg, &values)?;
    let train_ds = dataset_or(dataset, || experiment::train_split(&cfg))?;
    let eval_ds = dataset_or(eval_dataset, || experiment::eval_split(&cfg))?;
    let mut w = open_out(out)?;
    experiment::run_sweep(sweep, &cfg, &values, &train_ds, &eval_ds, &mut w)?;
    w.flush()?;
    Ok(())
}

/// Min-max scales to `[0, 1]`; a constant input maps to zeros.
fn normalise(values: &[f64]) -> Vec<f64> {
    let lo = values.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let span = hi - lo;
    values.iter().map(|v| if span > 0.0 { (v - lo) / span } else { 0.0 }).collect()
}

fn dump_attention(checkpoint: Option<&Path>, image: &Path, expression: &str, out: &Path, common: &Common) -> Result<()> {
    let cfg = load_config(common, checkpoint)?;
    let vocab = model_vocab(checkpoint)?;
    let (model, store) = load_model(&cfg, &vocab, checkpoint)?;
    let img = load_image(&cfg, image)?;
    let tokens = encode_expression(&vocab, expression)?;
    let mut tape = Tape::inference();
    let o = model.forward(&mut tape, &store, &img, &tokens)?;
    fs::create_dir_all(out)?;
    let n = o.lang.length;
    let words: Vec<&str> = tokens[..n].iter().map(|&t| vocab.token(t).unwrap_or("<unk>")).collect();
    let mut txt = String::new();
    writeln!(txt, "# words\t{}", words.join("\t")).unwrap();
    if let Some(a) = o.queries.attention {
        let a = tape.value(a);
        let (nq, nt) = a.dims2()?;
        let mut block = Vec::with_capacity(nq * n);
        writeln!(txt, "# query-word attention, {nq} queries × {n} words").unwrap();
        for q in 0..nq {
            let row: Vec<f64> = (0..n).map(|j| a.at2(q, j)).collect();
            let cells: Vec<String> = row.iter().map(|v| format!("{v:.6}")).collect();
            writeln!(txt, "q{q}\t{}", cells.join("\t")).unwrap();
            block.extend(row);
        }
        debug_assert!(n <= nt);
        fs::write(out.join("query_words.pgm"), raster::encode_pgm(nq, n, &normalise(&block)))?;
    } else {
        writeln!(txt, "# no query-word attention for query.kind={}", cfg.model.query_kind.as_str()).unwrap();
    }
    if let Some(c) = o.confidence {
        let cells: Vec<String> = tape.value(c).data().iter().map(|v| format!("{v:.6}")).collect();
        writeln!(txt, "# confidence\t{}", cells.join("\t")).unwrap();
    }
    let fm = tape.value(o.mask.feature);
    let (hw, nq) = fm.dims2()?;
    let (gh, gw) = model.grid();
    debug_assert_eq!(hw, gh * gw);
    for q in 0..nq {
        let col: Vec<f64> = (0..hw).map(|p| fm.at2(p, q)).collect();
        fs::write(out.join(format!("query_{q:02}.pgm")), raster::encode_pgm(gh, gw, &normalise(&col)))?;
    }
    fs::write(out.join("attention.txt"), txt)?;
    println!("{nq} query maps ({gh}×{gw}) -> {}", out.display());
    Ok(())
}

fn grad_check(common: &Common) -> Result<bool> {
    let cfg = load_config(common, None)?;
    let start = Instant::now();
    let r = gradcheck::model_suite(cfg.seed, Tolerance::default())?;
    let failures = r.failures();
    for f in failures.iter().take(10) {
        eprintln!(
            "{}[{}]: analytic {:.6e} numeric {:.6e} rel {:.2e}",
            f.name,
            f.index,
            f.analytic,
            f.numeric,
            f.rel_err()
        );
    }
    let ok = r.acceptable(MIN_PASS_FRACTION, MAX_FAILURE_ABS);
    println!(
        "{} scalars, {} failing, pass fraction {:.6}, max failing abs err {:.3e}, {:.1}s: {}",
        r.checks.len(),
        failures.len(),
        r.pass_fraction(),
        r.max_failure_abs_err(),
        start.elapsed().as_secs_f64(),
        if ok { "ok" } else { "FAILED" }
    );
    Ok(ok)
}

fn run(cli: Cli) -> Result<ExitCode> {
    match &cli.command {
        Command::GenerateData { out, eval, common } => generate_data(out, *eval, common)?,
        Command::Train { out, dataset, common } => train(out, dataset.as_deref(), common)?,
        Command::Eval {
            checkpoint,
            dataset,
            mask_eval,
            out,
            common,
        } => eval(checkpoint.as_deref(), dataset.as_deref(), *mask_eval, out.as_deref(), common)?,
        Command::Infer {
            checkpoint,
            image,
            expression,
            out,
            raw_logits,
            common,
        } => infer(checkpoint.as_deref(), image, expression, out, *raw_logits, common)?,
        Command::Ablate {
            sweep,
            values,
            dataset,
            eval_dataset,
            out,
            common,
        } => ablate(sweep, values, dataset.as_deref(), eval_dataset.as_deref(), out.as_deref(), common)?,
        Command::DumpAttention {
            checkpoint,
            image,
            expression,
            out,
            common,
        } => dump_attention(checkpoint.as_deref(), image, expression, out, common)?,
        Command::GradCheck { common } => {
            if !grad_check(common)? {
                return Ok(ExitCode::FAILURE);
            }
        }
    }
    Ok(ExitCode::SUCCESS)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(code) => code,
        Err(e @ Error::Config(_)) => {
            eprintln!("error: {e}");
            eprintln!("{}", Cli::command().render_usage());
            ExitCode::from(2)
        }
        Err(e @ Error::NonFinite(_)) => {
            eprintln!("training diverged: {e}");
            ExitCode::from(3)
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
