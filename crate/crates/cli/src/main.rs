//! `xmkd`: command-line driver for the distillation pipeline.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use log::info;
use xmkd_core::config::RunConfig;
use xmkd_core::data::Split;
use xmkd_core::matching::MatchStore;
use xmkd_core::metrics::write_csv;
use xmkd_core::nets::{read_manifest, Bridge, Classifier, ClassifierConfig};
use xmkd_core::pipeline::{self as pl};
use xmkd_core::Error;

#[derive(Parser, Debug)]
#[command(name = "xmkd", version, about = "Unpaired multispectral-to-RGB knowledge distillation")]
struct Cli {
    /// JSON run configuration; defaults apply to every missing key.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the configured seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Overrides the configured output directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Worker threads for data-parallel kernels.
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate the synthetic dataset and its MI table.
    GenData,
    /// Train the multispectral teacher.
    TrainTeacher,
    /// Train the matcher on MS images and their pseudo-RGB slices.
    TrainMatcher,
    /// Build the galleries and the static match of the RGB train split.
    BuildGalleries,
    /// Train the RGB student against the frozen teacher.
    TrainStudent,
    /// Score a checkpoint on one split.
    Evaluate {
        #[arg(long, value_enum, default_value_t = SplitArg::Test)]
        split: SplitArg,
        #[arg(long, value_enum, default_value_t = ModelArg::Student)]
        model: ModelArg,
    },
    /// Transport costs of the current checkpoints, matched vs random pairing.
    DiagnoseOt,
    /// Print the effective configuration as JSON.
    ShowConfig,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum SplitArg {
    Train,
    Val,
    Test,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum ModelArg {
    Teacher,
    Student,
}

fn load_config(cli: &Cli) -> Result<RunConfig, Error> {
    let mut cfg = match &cli.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    };
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    if let Some(out) = &cli.out {
        cfg.out_dir = out.clone();
    }
    Ok(cfg)
}

fn run(cli: &Cli) -> Result<(), Error> {
    let cfg = load_config(cli)?;
    if let Some(n) = cli.threads {
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| Error::Config(format!("thread pool: {e}")))?;
    }
    match &cli.command {
        Command::ShowConfig => println!("{}", cfg.to_json()),
        Command::GenData => {
            pl::gen_data(&cfg)?;
        }
        Command::TrainTeacher => {
            let ds = pl::load_dataset(&cfg)?;
            let run = pl::train_teacher(&cfg, &ds)?;
            if let Some(r) = run.rows.last() {
                println!("teacher: train OA {:.4}, val OA {:.4}, val macro-F1 {:.4}", r.train_oa, r.val_oa, r.val_f1);
            }
        }
        Command::TrainMatcher => {
            let ds = pl::load_dataset(&cfg)?;
            let run = pl::train_matcher(&cfg, &ds)?;
            if let Some(r) = run.rows.last() {
                println!("matcher: loss {:.4}, positive cos {:.4}, negative cos {:.4}", r.loss, r.pos_cos, r.neg_cos);
            }
        }
        Command::BuildGalleries => {
            let ds = pl::load_dataset(&cfg)?;
            let teacher = pl::load_teacher(&cfg)?;
            let matcher = pl::load_matcher(&cfg)?;
            let (galleries, store) = pl::build_galleries_stage(&cfg, &ds, &teacher, &matcher)?;
            println!("galleries: {:?} per class; {} students matched", galleries.sizes(), store.len());
        }
        Command::TrainStudent => {
            let ds = pl::load_dataset(&cfg)?;
            let teacher = pl::load_teacher(&cfg)?;
            let galleries = pl::load_galleries(&cfg)?;
            let initial = if cfg.ablation.ssm { Some(pl::load_initial_match(&cfg)?) } else { None };
            let run = pl::train_student(&cfg, &ds, &teacher, &galleries, initial.as_ref())?;
            if let Some(r) = run.rows.last() {
                println!("student: val OA {:.4}, val macro-F1 {:.4}", r.val_oa, r.val_f1);
            }
        }
        Command::Evaluate { split, model } => {
            let ds = pl::load_dataset(&cfg)?;
            let split = match split {
                SplitArg::Train => Split::Train,
                SplitArg::Val => Split::Val,
                SplitArg::Test => Split::Test,
            };
            let (name, eval) = match model {
                ModelArg::Student => ("student", pl::evaluate_student(&pl::load_student(&cfg)?, &ds, split)?),
                ModelArg::Teacher => ("teacher", pl::evaluate_teacher(&pl::load_teacher(&cfg)?, &ds, split)?),
            };
            let split_name = format!("{split:?}").to_lowercase();
            let path = cfg.out_dir.join(format!("eval_{name}_{split_name}.csv"));
            write_csv(&path, &eval.per_class)?;
            println!("{name} on {split_name}: OA {:.4}, macro-F1 {:.4}", eval.oa, eval.macro_f1);
        }
        Command::DiagnoseOt => {
            let ds = pl::load_dataset(&cfg)?;
            let teacher = pl::load_teacher(&cfg)?;
            let student_dir = pl::stage_dir(&cfg, pl::STUDENT_DIR);
            let student = Classifier::load(&student_dir)?;
            let (manifest, _) = read_manifest::<ClassifierConfig>(&student_dir, "classifier")?;
            let bridge = Bridge::load(&pl::stage_dir(&cfg, pl::BRIDGE_DIR))?;
            let galleries = pl::load_galleries(&cfg)?;
            let store = MatchStore::load(&pl::stage_dir(&cfg, pl::MATCH_DIR))?;
            let rows = pl::diagnose_ot(&cfg, &ds, &teacher, &student, &bridge, &galleries, &store, manifest.epoch)?;
            for r in &rows {
                println!("{:?} {:?}: W_eps {:.6}", r.space, r.pairing, r.w_eps);
            }
        }
    }
    info!("done");
    Ok(())
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Config(_) | Error::Missing { .. } => 2,
        Error::Numeric(_) => 3,
        _ => 1,
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
