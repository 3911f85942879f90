use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Arg, ArgAction, ArgMatches, Command};

use r2net::checkpoint::Checkpoint;
use r2net::commands::{cmd_eval, cmd_generate, cmd_infer, cmd_train, CONFIG_FILE};
use r2net::config::{RunConfig, Task, ABLATIONS};
use r2net::eval::EvalOptions;
use r2net::error::PathContext;
use r2net::{Error, Result};

fn config_args(cmd: Command) -> Command {
    let cmd = cmd.arg(
        Arg::new("config")
            .long("config")
            .value_name("FILE")
            .help("key = value configuration file"),
    );
    RunConfig::KEYS.iter().fold(cmd, |cmd, &key| {
        cmd.arg(
            Arg::new(key)
                .long(key)
                .value_name("VALUE")
                .help(format!("override `{key}`")),
        )
    })
}

fn ablation_args(cmd: Command) -> Command {
    ABLATIONS.iter().fold(cmd, |cmd, &(flag, key)| {
        cmd.arg(
            Arg::new(flag)
                .long(flag)
                .action(ArgAction::SetTrue)
                .help(format!("set {key} = false")),
        )
    })
}

fn task_arg() -> Arg {
    Arg::new("task")
        .long("task")
        .value_name("predcls|sgcls")
        .help("evaluation protocol (default: the checkpoint's task)")
}

fn cli() -> Command {
    let generate = config_args(
        Command::new("generate")
            .about("write a synthetic dataset with train/val/test splits")
            .arg(Arg::new("out").long("out").value_name("DIR").required(true)),
    );
    let train = ablation_args(config_args(
        Command::new("train")
            .about("train a model and save the best checkpoint")
            .arg(Arg::new("data").long("data").value_name("DIR").required(true))
            .arg(Arg::new("out").long("out").value_name("FILE").required(true)),
    ));
    let eval = Command::new("eval")
        .about("report Recall@K, per-predicate recall and object accuracy")
        .arg(Arg::new("ckpt").long("ckpt").value_name("FILE").required(true))
        .arg(Arg::new("data").long("data").value_name("DIR").required(true))
        .arg(Arg::new("split").long("split").value_name("NAME").default_value("test"))
        .arg(task_arg())
        .arg(
            Arg::new("k")
                .long("k")
                .value_name("K,..")
                .default_value("20,50,100"),
        )
        .arg(
            Arg::new("no-graph-constraint")
                .long("no-graph-constraint")
                .action(ArgAction::SetTrue),
        )
        .arg(
            Arg::new("out")
                .long("out")
                .value_name("FILE")
                .help("also write a JSON summary"),
        );
    let infer = Command::new("infer")
        .about("predict the scene graph of a single scene")
        .arg(Arg::new("ckpt").long("ckpt").value_name("FILE").required(true))
        .arg(Arg::new("scene").long("scene").value_name("FILE").required(true))
        .arg(Arg::new("features").long("features").value_name("FILE").required(true))
        .arg(task_arg())
        .arg(Arg::new("k").long("k").value_name("K").default_value("20"))
        .arg(
            Arg::new("out")
                .long("out")
                .value_name("FILE")
                .help("output file (default: stdout)"),
        );
    Command::new("r2net")
        .about("relation-regularised scene graph generation")
        .subcommand_required(true)
        .arg_required_else_help(true)
        .subcommand(generate)
        .subcommand(train)
        .subcommand(eval)
        .subcommand(infer)
}

/// Base config (file, else `fallback` if it exists, else defaults) with
/// command-line overrides applied.
fn build_config(m: &ArgMatches, fallback: Option<&Path>, ablations: bool) -> Result<RunConfig> {
    let mut cfg = match m.get_one::<String>("config") {
        Some(path) => RunConfig::load(Path::new(path))?,
        None => match fallback.filter(|p| p.exists()) {
            Some(p) => RunConfig::load(p)?,
            None => RunConfig::default(),
        },
    };
    for &key in RunConfig::KEYS {
        if let Some(v) = m.get_one::<String>(key) {
            cfg.set(key, v)?;
        }
    }
    if ablations {
        for &(flag, key) in ABLATIONS {
            if m.get_flag(flag) {
                cfg.set(key, "false")?;
            }
        }
    }
    cfg.validate()?;
    Ok(cfg)
}

/// `--task`, else the task the checkpoint was trained for.
fn resolve_task(m: &ArgMatches, ckpt: &Path) -> Result<Task> {
    match m.get_one::<String>("task") {
        Some(t) => t.parse(),
        None => Ok(Checkpoint::load(ckpt)?.model.config.task),
    }
}

fn parse_k(text: &str) -> Result<Vec<usize>> {
    let ks = text
        .split(',')
        .map(|s| s.trim().parse::<usize>().ok().filter(|&k| k > 0))
        .collect::<Option<Vec<_>>>()
        .ok_or_else(|| Error::Config(format!("bad K list `{text}`")))?;
    if ks.is_empty() {
        return Err(Error::Config("empty K list".into()));
    }
    Ok(ks)
}

fn path(m: &ArgMatches, id: &str) -> PathBuf {
    PathBuf::from(m.get_one::<String>(id).expect("required argument"))
}

fn run(matches: ArgMatches) -> Result<()> {
    match matches.subcommand() {
        Some(("generate", m)) => {
            let cfg = build_config(m, None, false)?;
            let out = path(m, "out");
            let sizes = cmd_generate(&cfg, &out)?;
            println!(
                "wrote {} train, {} val, {} test scenes to {}",
                sizes.train,
                sizes.val,
                sizes.test,
                out.display()
            );
        }
        Some(("train", m)) => {
            let data = path(m, "data");
            let cfg = build_config(m, Some(&data.join(CONFIG_FILE)), true)?;
            let out = path(m, "out");
            let outcome = cmd_train(&cfg, &data, &out)?;
            if let Some(last) = outcome.history.last() {
                println!("final training loss {:.6}", last.loss);
            }
            println!(
                "saved epoch {} checkpoint to {}",
                outcome.checkpoint.epoch,
                out.display()
            );
        }
        Some(("eval", m)) => {
            let ckpt = path(m, "ckpt");
            let task = resolve_task(m, &ckpt)?;
            let opts = EvalOptions {
                task,
                ks: parse_k(m.get_one::<String>("k").expect("has default"))?,
                constrained: vec![!m.get_flag("no-graph-constraint")],
            };
            let split = m.get_one::<String>("split").expect("has default");
            let report = cmd_eval(&ckpt, &path(m, "data"), split, &opts)?;
            print!("{}", report.to_text());
            if let Some(out) = m.get_one::<String>("out") {
                std::fs::write(out, report.to_json()).at(Path::new(out))?;
            }
        }
        Some(("infer", m)) => {
            let ckpt = path(m, "ckpt");
            let k = parse_k(m.get_one::<String>("k").expect("has default"))?;
            if k.len() != 1 {
                return Err(Error::Config("infer takes a single K".into()));
            }
            let task = resolve_task(m, &ckpt)?;
            let out = cmd_infer(&ckpt, &path(m, "scene"), &path(m, "features"), task, k[0])?;
            let line = out.to_json_line() + "\n";
            match m.get_one::<String>("out") {
                Some(p) => std::fs::write(p, line).at(Path::new(p))?,
                None => print!("{line}"),
            }
        }
        _ => unreachable!("subcommand required"),
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format_timestamp(None)
        .init();
    let matches = match cli().try_get_matches() {
        Ok(m) => m,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(matches) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
