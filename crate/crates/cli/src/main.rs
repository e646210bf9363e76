use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand};

use depthforge::engine::{
    ablation_csv, evaluate_domains, pseudo_label, run_ablation_grid, train_student, train_teacher, RunReport,
    StageOutput, StageReport,
};
use depthforge::gradcheck_suite::run_gradcheck_suite;
use depthforge::io::store::{read_datasets, read_pseudo, write_datasets, write_pseudo};
use depthforge::io::{checkpoint, create_dir, write_json, write_text, ConfigFile};
use depthforge::model::FrozenEncoder;
use depthforge::synth::{generate_datasets, Datasets};
use depthforge::Exec;

#[derive(Parser)]
#[command(name = "depthforge", version, about = "Semi-supervised relative depth on synthetic scenes")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// JSON config; built-in defaults when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Overrides both the data and the run seed.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate labeled, unlabeled and shifted-domain test scenes.
    GenData {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train the teacher on the labeled split.
    TrainTeacher {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Label the unlabeled split with a clean teacher pass.
    PseudoLabel {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        data: PathBuf,
        /// Teacher checkpoint file.
        #[arg(long)]
        teacher: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train a fresh student on labeled and pseudo-labeled images.
    TrainStudent {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        pseudo: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Score a checkpoint on every test domain.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run the ablation grid: loss terms, tolerance margins, feature targets.
    Ablate {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Check every analytic gradient against finite differences.
    Gradcheck {
        #[command(flatten)]
        common: Common,
    },
}

fn load_config(common: &Common) -> Result<ConfigFile> {
    let cfg = match &common.config {
        Some(path) => ConfigFile::load(path)?,
        None => ConfigFile::default(),
    };
    Ok(match common.seed {
        Some(s) => cfg.with_seed(s),
        None => cfg,
    })
}

fn prepare_out(out: &Path, cfg: &ConfigFile) -> Result<()> {
    create_dir(out)?;
    write_json(&out.join("config.json"), cfg)?;
    Ok(())
}

fn load_data(dir: &Path) -> Result<Datasets> {
    Ok(read_datasets(dir)?.1)
}

fn stage_report(cfg: &ConfigFile, name: &str, out: &StageOutput, data: &Datasets, exec: Exec) -> Result<RunReport> {
    Ok(RunReport {
        config: cfg.run.clone(),
        stages: vec![StageReport::new(name, out)],
        metrics: evaluate_domains(&out.params, data, &cfg.run, exec)?,
        wall_clock_secs: 0.0,
    })
}

fn run(cli: Cli) -> Result<bool> {
    let exec = Exec::default();
    match cli.command {
        Command::GenData { common, out } => {
            let cfg = load_config(&common)?;
            let data = generate_datasets(&cfg.data, exec)?;
            prepare_out(&out, &cfg)?;
            write_datasets(&out, &cfg.data, &data)?;
            eprintln!(
                "wrote {} labeled, {} unlabeled, {} test splits to {}",
                data.labeled.len(),
                data.unlabeled.len(),
                data.test.len(),
                out.display()
            );
        }
        Command::TrainTeacher { common, data, out } => {
            let cfg = load_config(&common)?;
            let data = load_data(&data)?;
            let teacher = train_teacher(&data.labeled, &cfg.run, exec)?;
            prepare_out(&out, &cfg)?;
            checkpoint::save(&out.join("model.ckpt"), &teacher.params)?;
            write_json(&out.join("report.json"), &stage_report(&cfg, "teacher", &teacher, &data, exec)?)?;
        }
        Command::PseudoLabel {
            common,
            data,
            teacher,
            out,
        } => {
            let cfg = load_config(&common)?;
            let data = load_data(&data)?;
            let teacher = checkpoint::load(&teacher)?;
            let pseudo = pseudo_label(&teacher, &data.unlabeled, exec)?;
            prepare_out(&out, &cfg)?;
            write_pseudo(&out, &pseudo)?;
        }
        Command::TrainStudent {
            common,
            data,
            pseudo,
            out,
        } => {
            let cfg = load_config(&common)?;
            let data = load_data(&data)?;
            let pseudo = read_pseudo(&pseudo)?;
            let frozen = FrozenEncoder::new(&cfg.run.model, cfg.run.frozen_seed);
            let student = train_student(&data.labeled, &pseudo, &frozen, &cfg.run, exec)?;
            prepare_out(&out, &cfg)?;
            checkpoint::save(&out.join("model.ckpt"), &student.params)?;
            write_json(&out.join("report.json"), &stage_report(&cfg, "student", &student, &data, exec)?)?;
        }
        Command::Eval {
            common,
            data,
            checkpoint: ckpt,
            out,
        } => {
            let cfg = load_config(&common)?;
            let params = checkpoint::load(&ckpt)?;
            let data = load_data(&data)?;
            let per_domain = evaluate_domains(&params, &data, &cfg.run, exec)?;
            let mut csv = format!("dataset,{}\n", depthforge::eval::MetricReport::CSV_COLUMNS.join(","));
            for d in &per_domain {
                let values: Vec<String> = d.metrics.csv_values().iter().map(f64::to_string).collect();
                csv.push_str(&format!("domain{},{}\n", d.domain, values.join(",")));
            }
            prepare_out(&out, &cfg)?;
            write_text(&out.join("metrics.csv"), &csv)?;
            write_json(&out.join("metrics.json"), &per_domain)?;
            print!("{csv}");
        }
        Command::Ablate { common, data, out } => {
            let cfg = load_config(&common)?;
            let data = load_data(&data)?;
            let rows = run_ablation_grid(&data, &cfg.run, exec)?;
            prepare_out(&out, &cfg)?;
            let csv = ablation_csv(&rows);
            write_text(&out.join("ablation.csv"), &csv)?;
            write_json(&out.join("ablation.json"), &rows)?;
            print!("{csv}");
        }
        Command::Gradcheck { common } => {
            let cfg = load_config(&common)?;
            let results = run_gradcheck_suite(cfg.run.seed)?;
            let mut ok = true;
            for r in &results {
                println!(
                    "{} {:<26} points={} max_rel_err={:.3e} threshold={:.0e}",
                    if r.passed { "PASS" } else { "FAIL" },
                    r.name,
                    r.points,
                    r.max_error,
                    r.threshold
                );
                ok &= r.passed;
            }
            return Ok(ok);
        }
    }
    Ok(true)
}

fn init_threads() -> Result<()> {
    let Ok(v) = std::env::var("DEPTHFORGE_THREADS") else {
        return Ok(());
    };
    let n: usize = v
        .parse()
        .ok()
        .filter(|&n| n > 0)
        .with_context(|| format!("DEPTHFORGE_THREADS must be a positive integer, got {v:?}"))?;
    #[cfg(feature = "parallel")]
    rayon::ThreadPoolBuilder::new().num_threads(n).build_global()?;
    #[cfg(not(feature = "parallel"))]
    let _ = n;
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 2 } else { 0 });
        }
    };
    let result = init_threads().and_then(|()| run(cli));
    match result {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => {
            eprintln!("error: gradient check failed");
            ExitCode::from(1)
        }
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}
