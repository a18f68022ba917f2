mod manifest;

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use clap::{Parser, Subcommand};
use gradsynth::data::{self, CorpusSpec};
use gradsynth::harness::{self, PretrainConfig, SweepGrid, UnlearnConfig};
use gradsynth::{report, Error, ModelDims, Result, TinyLM};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use manifest::RunManifest;

#[derive(Parser)]
#[command(name = "gradsynth", version, about = "Gradient synthesis for unlearning on a tiny language model")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate forget/retain corpora and probe sets from a corpus spec.
    GenData {
        #[arg(long)]
        spec: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train the target model on forget ∪ retain with plain gradient descent.
    Pretrain {
        #[arg(long)]
        data: PathBuf,
        /// Model dimensions: a JSON file, or inline JSON.
        #[arg(long)]
        dims: String,
        #[arg(long)]
        steps: usize,
        #[arg(long)]
        eta: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run one unlearning job.
    Unlearn {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run an unlearning job per grid cell and report the Pareto frontier.
    Sweep {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        grid: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Render loss and cosine charts, a trade-off scatter and a summary table.
    Report {
        #[arg(long, num_args = 1.., required = true)]
        logs: Vec<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
}

/// Sweep file: a base config plus the axes to vary.
#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct SweepSpec {
    base: UnlearnConfig,
    grid: SweepGrid,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            if e.is_invariant() {
                ExitCode::from(1)
            } else {
                ExitCode::from(2)
            }
        }
    }
}

fn run(command: Command) -> Result<()> {
    match command {
        Command::GenData { spec, out } => gen_data(&spec, &out),
        Command::Pretrain {
            data,
            dims,
            steps,
            eta,
            seed,
            out,
        } => pretrain(&data, &dims, PretrainConfig { steps, eta, batch_size: None, seed }, &out),
        Command::Unlearn {
            ckpt,
            data,
            config,
            out,
        } => unlearn(&ckpt, &data, &config, &out),
        Command::Sweep {
            ckpt,
            data,
            grid,
            out,
        } => sweep(&ckpt, &data, &grid, &out),
        Command::Report { logs, out } => {
            let r = report::write_report(&logs, &out)?;
            for f in &r.files {
                println!("{}", f.display());
            }
            Ok(())
        }
    }
}

fn parse_json<T: DeserializeOwned>(text: &str, origin: &Path) -> Result<T> {
    serde_json::from_str(text).map_err(|e| Error::Parse {
        path: origin.to_path_buf(),
        line: e.line(),
        message: e.to_string(),
    })
}

fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| Error::Io {
        path: path.to_path_buf(),
        source: e,
    })?;
    parse_json(&text, path)
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::Io {
        path: dir.to_path_buf(),
        source: e,
    })
}

fn data_files(dir: &Path) -> [PathBuf; 4] {
    [
        data::FORGET_FILE,
        data::RETAIN_FILE,
        data::FORGET_PROBES_FILE,
        data::RETAIN_PROBES_FILE,
    ]
    .map(|f| dir.join(f))
}

fn gen_data(spec_path: &Path, out: &Path) -> Result<()> {
    let spec: CorpusSpec = read_json(spec_path)?;
    let generated = data::generate(&spec)?;
    create_dir(out)?;
    data::save_dataset(&generated.dataset, out)?;
    let ds = &generated.dataset;
    println!(
        "forget: {} sequences, {} probes; retain: {} sequences, {} probes",
        ds.forget.len(),
        ds.forget_probes.len(),
        ds.retain.len(),
        ds.retain_probes.len()
    );
    Ok(())
}

fn pretrain(data_dir: &Path, dims_arg: &str, cfg: PretrainConfig, out: &Path) -> Result<()> {
    let start = Instant::now();
    let dims: ModelDims = if dims_arg.trim_start().starts_with('{') {
        parse_json(dims_arg, Path::new("--dims"))?
    } else {
        read_json(Path::new(dims_arg))?
    };
    let dataset = data::load_dataset(data_dir)?;
    let model = TinyLM::init(cfg.seed, dims)?;
    let (trained, report) = harness::pretrain(&model, &dataset, &cfg)?;

    let dir = out.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
    create_dir(dir)?;
    trained.save(out)?;

    let mut m = RunManifest::new(
        "pretrain",
        serde_json::json!({ "dims": dims, "pretrain": cfg }),
    );
    for f in data_files(data_dir) {
        m.input(&f)?;
    }
    m.artifact(out);
    let stem = out
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "model".into());
    m.write(dir, &format!("{stem}.manifest"), start.elapsed())?;

    println!(
        "final_loss={} forget_acc={} retain_acc={}",
        harness::format_sig(report.final_loss, 9),
        harness::format_sig(report.forget_acc, 9),
        harness::format_sig(report.retain_acc, 9)
    );
    Ok(())
}

fn unlearn(ckpt: &Path, data_dir: &Path, config: &Path, out: &Path) -> Result<()> {
    let start = Instant::now();
    let cfg: UnlearnConfig = read_json(config)?;
    cfg.validate()?;
    let model = TinyLM::load(ckpt)?;
    let dataset = data::load_dataset(data_dir)?;
    let run = harness::unlearn(&model, &dataset, &cfg)?;

    create_dir(out)?;
    let model_path = out.join("model.json");
    let log_path = out.join("log.csv");
    run.model.save(&model_path)?;
    harness::write_step_logs(&log_path, &run.logs)?;

    let mut m = RunManifest::new(
        "unlearn",
        serde_json::json!({ "dims": model.dims(), "unlearn": cfg }),
    );
    m.input(ckpt)?;
    for f in data_files(data_dir) {
        m.input(&f)?;
    }
    m.artifact(&model_path);
    m.artifact(&log_path);
    m.write(out, "manifest", start.elapsed())?;

    let last = run.logs.last().expect("at least one step");
    let acc = |v: Option<f64>| v.map(|x| harness::format_sig(x, 9)).unwrap_or_else(|| "n/a".into());
    println!(
        "forget_acc={} retain_acc={}",
        acc(last.forget_acc),
        acc(last.retain_acc)
    );
    Ok(())
}

fn sweep(ckpt: &Path, data_dir: &Path, grid_path: &Path, out: &Path) -> Result<()> {
    let start = Instant::now();
    let spec: SweepSpec = read_json(grid_path)?;
    let model = TinyLM::load(ckpt)?;
    let dataset = data::load_dataset(data_dir)?;
    let table = harness::run_sweep(&model, &dataset, &spec.base, &spec.grid)?;

    create_dir(out)?;
    let sweep_path = out.join("sweep.csv");
    let pareto_path = out.join("pareto.csv");
    harness::write_sweep_table(&sweep_path, &table.rows)?;
    let frontier: Vec<_> = table.frontier().cloned().collect();
    harness::write_sweep_table(&pareto_path, &frontier)?;

    let mut m = RunManifest::new(
        "sweep",
        serde_json::json!({ "dims": model.dims(), "sweep": spec }),
    );
    m.input(ckpt)?;
    for f in data_files(data_dir) {
        m.input(&f)?;
    }
    m.artifact(&sweep_path);
    m.artifact(&pareto_path);
    m.write(out, "manifest", start.elapsed())?;

    println!("{} cells, {} on the Pareto frontier", table.rows.len(), frontier.len());
    for r in &frontier {
        println!(
            "  {} alpha={} gamma={} eta={} forget_acc={} retain_acc={}",
            r.combiner,
            harness::format_sig(r.alpha, 9),
            harness::format_sig(r.gamma, 9),
            harness::format_sig(r.eta, 9),
            harness::format_sig(r.forget_acc, 9),
            harness::format_sig(r.retain_acc, 9)
        );
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sweep_spec_rejects_unknown_fields() {
        let ok = r#"{"base":{"forget_objective":"ga","combiner":"naive","eta":0.1,"steps":2},"grid":{"gamma":[0.5]}}"#;
        assert!(serde_json::from_str::<SweepSpec>(ok).is_ok());
        let bad = r#"{"base":{"forget_objective":"ga","combiner":"naive","eta":0.1,"steps":2},"grid":{"lr":[0.5]}}"#;
        assert!(serde_json::from_str::<SweepSpec>(bad).is_err());
    }

    #[test]
    fn cli_definition_is_consistent() {
        use clap::CommandFactory;
        Cli::command().debug_assert();
    }
}
