//! `oae` — occlusion auto-encoder workbench for point clouds.

mod args;
mod commands;
mod config;
mod errors;

use errors::CliError;

const USAGE_HEAD: &str = "\
oae — self-supervised occlusion auto-encoder for point clouds

usage: oae <command> [--flag value]...

commands:";

const USAGE_TAIL: &str = "\
common flags:
  --config FILE     layered run configuration ([model]/[train]/[data] sections)
  --out DIR         output directory (resolved.cfg is always written there)
  --seed N          training seed; every random stream derives from it
  any config key    as a flag, hyphenated: --epochs 30, --ratio 0.75, ...

command flags:
  gen-data          --format bin|xyz
  pretrain          --data MANIFEST, --val on|off
  reconstruct       --checkpoint FILE, --cloud FILE | --category NAME, --gen-seed N
  probe             --checkpoint FILE (omit for a random-weights baseline), --data MANIFEST
  ablate            --axis ratio|strategy|loss|groups|patch-size, --values a,b,c, --data MANIFEST

exit codes: 0 success, 1 usage error, 2 data error, 3 numeric failure";

fn usage() -> String {
    let mut text = String::from(USAGE_HEAD);
    text.push('\n');
    for (name, _, summary) in commands::COMMANDS {
        text.push_str(&format!("  {name:<12}{summary}\n"));
    }
    text.push('\n');
    text.push_str(USAGE_TAIL);
    text
}

fn dispatch(argv: &[String]) -> Result<(), CliError> {
    if argv.is_empty() {
        println!("{}", usage());
        return Err(CliError::Usage("missing subcommand".into()));
    }
    if matches!(argv[0].as_str(), "--help" | "-h" | "help") {
        println!("{}", usage());
        return Ok(());
    }
    let (command, bag) = args::parse(argv)?;
    for (name, handler, _) in commands::COMMANDS {
        if *name == command {
            return handler(bag);
        }
    }
    Err(CliError::Usage(format!("unknown subcommand `{command}`")))
}

fn main() {
    let argv: Vec<String> = std::env::args().skip(1).collect();
    let code = match dispatch(&argv) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {}", e.message());
            e.exit_code()
        }
    };
    std::process::exit(code);
}
