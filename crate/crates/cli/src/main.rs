use std::process::ExitCode;

use clap::Parser;
use rpeflow::Error;
use rpeflow_cli::{
    gradcheck_failures, gradcheck_table, run_eval, run_gen, run_gradcheck, run_train, run_viz, summarize, Cli, Command,
};

fn run(cli: Cli) -> rpeflow::Result<ExitCode> {
    match cli.command {
        Command::Gen(a) => {
            let m = run_gen(&a)?;
            println!("{}", summarize(&m, &a.out));
        }
        Command::Train(a) => {
            let rows = run_train(&a)?;
            if let Some(r) = rows.last() {
                println!("trained {} iterations, final L {:.6}, EPE2D {:.4}", r.iter, r.loss, r.epe2d);
            }
            println!("checkpoints in {}", a.out.display());
        }
        Command::Eval(a) => print!("{}", run_eval(&a)?.table()),
        Command::Gradcheck(a) => {
            let suites = run_gradcheck(&a)?;
            print!("{}", gradcheck_table(&suites));
            let failed = gradcheck_failures(&suites);
            if !failed.is_empty() {
                eprintln!("gradcheck failed for {} operation(s):", failed.len());
                for f in failed {
                    eprintln!("  {f}");
                }
                return Ok(ExitCode::FAILURE);
            }
        }
        Command::Viz(a) => {
            for p in run_viz(&a)? {
                println!("{}", p.display());
            }
        }
    }
    Ok(ExitCode::SUCCESS)
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            match e {
                Error::Config(_) => ExitCode::from(2),
                _ => ExitCode::FAILURE,
            }
        }
    }
}
