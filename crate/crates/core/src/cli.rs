//! Command-line entry points.
//!
//! | command    | artifacts under `--out`                                     |
//! |------------|-------------------------------------------------------------|
//! | `gen-data` | `manifest.tsv`, `clips/<id>.bin`                            |
//! | `pretrain` | `checkpoint.apck`, `train.log`, `timing.log`, `config.toml` |
//! | `finetune` | `checkpoint.apck`, `train.log`, `timing.log`, `config.toml` |
//! | `eval`     | `eval_report.txt`, `eval_report.kv`                         |
//! | `embed`    | `embeddings.csv`, `embeddings_pca.csv`, `embeddings.svg`    |

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use nalgebra::{DMatrix, SymmetricEigen};

use crate::config::{Profile, TrainConfig};
use crate::model::{load_checkpoint, save_checkpoint, Model};
use crate::skeleton::View;
use crate::synth::{generate_corpus, read_corpus, write_corpus, Corpus};
use crate::trainer::{self, worker_threads};
use crate::{Error, Result};

pub const EMBEDDINGS_CSV: &str = "embeddings.csv";
pub const EMBEDDINGS_PCA_CSV: &str = "embeddings_pca.csv";
pub const EMBEDDINGS_SVG: &str = "embeddings.svg";
pub const EVAL_REPORT_TXT: &str = "eval_report.txt";
pub const EVAL_REPORT_KV: &str = "eval_report.kv";

#[derive(Debug, Parser)]
#[command(name = "actionpose", version, about = "Action-aware 2D-to-3D pose lifting")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic labeled motion corpus.
    GenData(Common),
    /// Pretrain both encoders with alignment and masked reconstruction.
    Pretrain(Common),
    /// Fine-tune the pose encoder and regression head.
    Finetune(Common),
    /// Evaluate a checkpoint and write the metric report.
    Eval(Common),
    /// Export pose embeddings with a 2D projection.
    Embed(Common),
}

#[derive(Debug, Args)]
pub struct Common {
    /// TOML config file.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Named defaults applied before any other key.
    #[arg(long)]
    pub profile: Option<Profile>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Output directory.
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    /// Corpus directory from `gen-data`; generated from `data.*` keys when absent.
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// Total optimizer steps, overriding `train.epochs`.
    #[arg(long)]
    pub steps: Option<usize>,
    /// Override any config key, e.g. `--set loss.tau=0.2`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
}

impl Common {
    /// Config file or profile defaults, then flags, then `--set` overrides.
    pub fn resolve_config(&self) -> Result<TrainConfig> {
        let mut cfg = match &self.config {
            Some(p) => TrainConfig::load(p)?,
            None => TrainConfig::profile(self.profile.unwrap_or(Profile::Tiny)),
        };
        if let (Some(_), Some(p)) = (&self.config, self.profile) {
            cfg.set("profile", &p.to_string())?;
        }
        if let Some(s) = self.seed {
            cfg.seed = s;
        }
        if let Some(n) = self.steps {
            cfg.steps = n;
        }
        for o in &self.overrides {
            cfg.apply_override(o)?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    fn corpus(&self, cfg: &TrainConfig) -> Result<Corpus> {
        match &self.data {
            Some(d) => read_corpus(d),
            None => generate_corpus(&cfg.data.corpus_spec(), worker_threads()),
        }
    }

    fn checkpoint(&self, cfg: &mut TrainConfig) -> Result<Model<f32>> {
        let path = self.checkpoint.as_ref().ok_or_else(|| Error::Config { key: "--checkpoint".into(), reason: "required by this command".into() })?;
        let model = load_checkpoint(path)?;
        cfg.model = model.config.clone();
        Ok(model)
    }
}

/// Parses `args` (program name first), runs the command and returns the
/// process exit code.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match run(&cli.command) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

pub fn run(command: &Command) -> Result<()> {
    match command {
        Command::GenData(c) => gen_data(c),
        Command::Pretrain(c) => pretrain(c),
        Command::Finetune(c) => finetune(c),
        Command::Eval(c) => eval(c),
        Command::Embed(c) => embed(c),
    }
}

fn gen_data(c: &Common) -> Result<()> {
    let cfg = c.resolve_config()?;
    let corpus = generate_corpus(&cfg.data.corpus_spec(), worker_threads())?;
    write_corpus(&c.out, &corpus)?;
    println!("wrote {} clips to {}", corpus.clips.len(), c.out.display());
    for (class, n) in corpus.histogram() {
        println!("{class}\t{n}");
    }
    Ok(())
}

fn pretrain(c: &Common) -> Result<()> {
    let mut cfg = c.resolve_config()?;
    let init = match &c.checkpoint {
        Some(_) => Some(c.checkpoint(&mut cfg)?),
        None => None,
    };
    let corpus = c.corpus(&cfg)?;
    let out = trainer::pretrain(&cfg, &corpus, init, Some(&c.out))?;
    save_checkpoint(&c.out.join(trainer::CHECKPOINT_FILE), &out.model)?;
    print!("{}", trainer::summarize(&out.log));
    Ok(())
}

fn finetune(c: &Common) -> Result<()> {
    let mut cfg = c.resolve_config()?;
    let model = c.checkpoint(&mut cfg)?;
    let corpus = c.corpus(&cfg)?;
    let out = trainer::finetune(&cfg, model, &corpus, Some(&c.out))?;
    save_checkpoint(&c.out.join(trainer::CHECKPOINT_FILE), &out.model)?;
    print!("{}", trainer::summarize(&out.log));
    if let (Some(a), Some(b)) = (out.log.initial_mpjpe_mm, out.log.epochs.last().and_then(|e| e.mpjpe_mm)) {
        println!("train mpjpe_mm {a:.3} -> {b:.3}");
    }
    Ok(())
}

fn eval(c: &Common) -> Result<()> {
    let mut cfg = c.resolve_config()?;
    let model = c.checkpoint(&mut cfg)?;
    let corpus = c.corpus(&cfg)?;
    let report = trainer::evaluate(&model, &corpus, cfg.seq_len)?;
    trainer::write_report(&c.out, &report)?;
    print!("{}", report.to_text());
    Ok(())
}

fn embed(c: &Common) -> Result<()> {
    let mut cfg = c.resolve_config()?;
    let model = c.checkpoint(&mut cfg)?;
    let corpus = c.corpus(&cfg)?;
    let h = trainer::embed_clips(&model, &corpus, cfg.seq_len, View::Front)?;
    let ids: Vec<&str> = corpus.clips.iter().map(|c| c.id.as_str()).collect();
    let classes: Vec<String> = corpus.clips.iter().map(|c| c.class.to_string()).collect();
    let pcs = pca_2d(&h);
    fs::create_dir_all(&c.out).map_err(|e| Error::io(&c.out, e))?;
    write(&c.out.join(EMBEDDINGS_CSV), &embeddings_csv(&ids, &classes, &h))?;
    write(&c.out.join(EMBEDDINGS_PCA_CSV), &embeddings_csv(&ids, &classes, &pcs))?;
    write(&c.out.join(EMBEDDINGS_SVG), &scatter_svg(&classes, &pcs))?;
    let (intra, inter) = trainer::class_cosine_means(&h, &classes);
    println!("mean cosine intra-class {intra:.4} inter-class {inter:.4}");
    Ok(())
}

fn write(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// `clip_id,class,c0,c1,...` with one row per clip.
pub fn embeddings_csv(ids: &[&str], classes: &[String], rows: &[Vec<f64>]) -> String {
    let d = rows.first().map_or(0, Vec::len);
    let mut s = String::from("clip_id,class");
    for k in 0..d {
        let _ = write!(s, ",c{k}");
    }
    s.push('\n');
    for ((id, class), r) in ids.iter().zip(classes).zip(rows) {
        let _ = write!(s, "{id},{class}");
        for v in r {
            let _ = write!(s, ",{v:.9}");
        }
        s.push('\n');
    }
    s
}

/// Projection onto the top two principal components. Each component's
/// sign is fixed so its largest-magnitude entry is positive.
pub fn pca_2d(rows: &[Vec<f64>]) -> Vec<Vec<f64>> {
    let n = rows.len();
    let d = rows.first().map_or(0, Vec::len);
    if n == 0 || d == 0 {
        return vec![vec![0.0, 0.0]; n];
    }
    let x = DMatrix::from_fn(n, d, |i, j| rows[i][j]);
    let mean = x.row_mean();
    let centered = DMatrix::from_fn(n, d, |i, j| x[(i, j)] - mean[j]);
    let cov = centered.transpose() * &centered / (n.max(2) - 1) as f64;
    let eig = SymmetricEigen::new(cov);
    let mut order: Vec<usize> = (0..d).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));
    let comps: Vec<Vec<f64>> = order
        .iter()
        .take(2)
        .map(|&k| {
            let v: Vec<f64> = eig.eigenvectors.column(k).iter().copied().collect();
            let big = v.iter().copied().fold(0.0f64, |m, x| if x.abs() > m.abs() { x } else { m });
            v.into_iter().map(|x| if big < 0.0 { -x } else { x }).collect()
        })
        .collect();
    (0..n)
        .map(|i| {
            let mut p: Vec<f64> = comps.iter().map(|c| (0..d).map(|j| centered[(i, j)] * c[j]).sum()).collect();
            p.resize(2, 0.0);
            p
        })
        .collect()
}

const PALETTE: [&str; 10] = ["#1f77b4", "#ff7f0e", "#2ca02c", "#d62728", "#9467bd", "#8c564b", "#e377c2", "#7f7f7f", "#bcbd22", "#17becf"];

/// Scatter plot of 2D points colored by class, with a legend.
pub fn scatter_svg(classes: &[String], points: &[Vec<f64>]) -> String {
    let (w, h, pad) = (640.0, 480.0, 40.0);
    let mut names: Vec<&str> = classes.iter().map(String::as_str).collect();
    names.sort_unstable();
    names.dedup();
    let range = |k: usize| {
        let lo = points.iter().map(|p| p[k]).fold(f64::INFINITY, f64::min);
        let hi = points.iter().map(|p| p[k]).fold(f64::NEG_INFINITY, f64::max);
        if hi > lo { (lo, hi) } else { (lo - 1.0, lo + 1.0) }
    };
    let ((x0, x1), (y0, y1)) = (range(0), range(1));
    let plot_w = w - 2.0 * pad - 140.0;
    let mut s = format!("<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{w}\" height=\"{h}\" viewBox=\"0 0 {w} {h}\">\n");
    let _ = writeln!(s, "<rect width=\"{w}\" height=\"{h}\" fill=\"white\"/>");
    let _ = writeln!(s, "<rect x=\"{pad}\" y=\"{pad}\" width=\"{plot_w}\" height=\"{}\" fill=\"none\" stroke=\"#999\"/>", h - 2.0 * pad);
    for (c, p) in classes.iter().zip(points) {
        let color = PALETTE[names.binary_search(&c.as_str()).unwrap_or(0) % PALETTE.len()];
        let px = pad + (p[0] - x0) / (x1 - x0) * plot_w;
        let py = h - pad - (p[1] - y0) / (y1 - y0) * (h - 2.0 * pad);
        let _ = writeln!(s, "<circle cx=\"{px:.2}\" cy=\"{py:.2}\" r=\"4\" fill=\"{color}\"><title>{c}</title></circle>");
    }
    for (i, name) in names.iter().enumerate() {
        let y = pad + 10.0 + 18.0 * i as f64;
        let x = w - pad - 120.0;
        let _ = writeln!(s, "<circle cx=\"{x}\" cy=\"{y}\" r=\"5\" fill=\"{}\"/>", PALETTE[i % PALETTE.len()]);
        let _ = writeln!(s, "<text x=\"{}\" y=\"{}\" font-family=\"sans-serif\" font-size=\"12\">{name}</text>", x + 10.0, y + 4.0);
    }
    let _ = writeln!(s, "<text x=\"{pad}\" y=\"{}\" font-family=\"sans-serif\" font-size=\"12\">PC1</text>", h - 10.0);
    let _ = writeln!(s, "<text x=\"8\" y=\"{pad}\" font-family=\"sans-serif\" font-size=\"12\">PC2</text>");
    s.push_str("</svg>\n");
    s
}
