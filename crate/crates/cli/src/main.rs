use std::io::{self, IsTerminal};
use std::process::ExitCode;

use aerovis_cli::{parse_args, Repl, Verb};

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("AEROVIS_LOG", "warn")).init();
    let cli = match parse_args(std::env::args_os()) {
        Ok(cli) => cli,
        Err(Ok(help)) => {
            println!("{help}");
            return ExitCode::SUCCESS;
        }
        Err(Err(e)) => {
            eprintln!("error: {e}");
            return ExitCode::from(e.exit_code());
        }
    };
    let mut repl = Repl::new(cli.opts);
    let Some(verb) = cli.verb else {
        let stdin = io::stdin();
        let prompt = stdin.is_terminal();
        repl.interactive(stdin.lock(), io::stdout(), io::stderr(), prompt);
        return ExitCode::SUCCESS;
    };
    match repl.run(verb.clone()) {
        Ok(reply) => {
            if !reply.text.is_empty() {
                println!("{}", reply.text);
            }
            match verb {
                Verb::Sim { duration } => repl.hold_sim(duration),
                Verb::Gui { .. } => repl.hold_gateway(),
                _ => {}
            }
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
