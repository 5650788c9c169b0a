//! Document translation workbench: synthetic corpora, model training,
//! distillation, decoding, scoring, and speed comparisons from one binary.
//!
//! Exit codes: 0 success, 1 usage or config, 2 data or model, 3 numeric.

mod cmds;
mod config;
mod svg;

use clap::Parser;

use natdoc_core::Error;

#[derive(Parser)]
#[command(
    name = "natdoc",
    about = "sentence-aligned document translation workbench",
    after_long_help = config_help()
)]
enum Cmd {
    /// Generate a synthetic parallel corpus with a controllable share of
    /// context-dependent words
    GenData(cmds::GenArgs),
    /// Train one model variant and keep the best-dev checkpoint
    Train(cmds::TrainArgs),
    /// Re-target the training split with a trained teacher's translations
    Distill(cmds::DistillArgs),
    /// Translate a corpus file with a trained checkpoint
    Translate(cmds::TranslateArgs),
    /// Score hypotheses against references (BLEU and repetition)
    Evaluate(cmds::EvaluateArgs),
    /// Time checkpoints against the autoregressive baseline
    Bench(cmds::BenchArgs),
    /// Collect eval, train, and bench outputs into one markdown table
    Report(cmds::ReportArgs),
}

fn config_help() -> String {
    format!(
        "CONFIG FILE KEYS (sectioned key=value; flags override the file):\n{}",
        config::schema_help()
    )
}

fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Config(_) => 1,
        Error::Numeric(_) => 3,
        _ => 2,
    }
}

fn main() {
    let cmd = match Cmd::try_parse() {
        Ok(c) => c,
        Err(e) => {
            // clap renders its own message; --help and --version exit 0.
            let code = if e.exit_code() == 0 { 0 } else { 1 };
            let _ = e.print();
            std::process::exit(code);
        }
    };
    let run = match &cmd {
        Cmd::GenData(a) => cmds::gen_data(a),
        Cmd::Train(a) => cmds::train_cmd(a),
        Cmd::Distill(a) => cmds::distill(a),
        Cmd::Translate(a) => cmds::translate(a),
        Cmd::Evaluate(a) => cmds::evaluate(a),
        Cmd::Bench(a) => cmds::bench(a),
        Cmd::Report(a) => cmds::report_cmd(a),
    };
    if let Err(e) = run {
        eprintln!("error: {e}");
        std::process::exit(exit_code(&e));
    }
}
