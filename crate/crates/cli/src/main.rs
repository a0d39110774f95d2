use std::path::PathBuf;
use std::process::ExitCode;
use std::time::Duration;

use anyhow::Context;
use clap::Parser;
use thumbscope::analyze::{AnalysisConfig, Mode};
use thumbscope::pack::Pack;
use thumbscope::trace::TraceConfig;
use thumbscope_cli::{analyze_corpus, collect_inputs, parse_hex_u32, RunConfig};

/// Extract call arguments from stripped Cortex-M firmware images.
#[derive(Parser, Debug)]
#[command(name = "thumbscope", version)]
struct Args {
    /// Binaries or directories (searched recursively for *.bin).
    #[arg(required = true)]
    inputs: Vec<PathBuf>,

    /// Locate calls by svc number or by matched function.
    #[arg(long, env = "THUMBSCOPE_MODE", default_value = "svc")]
    mode: Mode,

    /// Vendor pack directory containing pack.json.
    #[arg(long, env = "THUMBSCOPE_PACK")]
    pack: PathBuf,

    /// Off-path callees are entered only below this call depth.
    #[arg(long, env = "THUMBSCOPE_MAX_CALL_DEPTH", default_value_t = 1)]
    max_call_depth: u32,

    /// Wall-clock limit per trace, e.g. 90m or 30s.
    #[arg(long, env = "THUMBSCOPE_TRACE_TIME_LIMIT", default_value = "90m", value_parser = humantime::parse_duration)]
    trace_time_limit: Duration,

    /// Worker threads; defaults to the number of CPUs.
    #[arg(long, env = "THUMBSCOPE_WORKERS", value_parser = clap::value_parser!(u32).range(1..))]
    workers: Option<u32>,

    /// Report directory.
    #[arg(long, env = "THUMBSCOPE_OUT", default_value = "reports")]
    out: PathBuf,

    /// Pin the code base instead of recovering it.
    #[arg(long, env = "THUMBSCOPE_CODE_BASE", value_parser = parse_hex_u32)]
    code_base: Option<u32>,

    /// Also write <sha256>.structure.json with blocks and annotations.
    #[arg(long, env = "THUMBSCOPE_DUMP_STRUCTURE")]
    dump_structure: bool,
}

fn run(args: Args) -> anyhow::Result<i32> {
    let pack = Pack::load(&args.pack).with_context(|| format!("loading pack {}", args.pack.display()))?;
    let workers = match args.workers {
        Some(n) => n as usize,
        None => std::thread::available_parallelism().map_or(1, |n| n.get()),
    };
    let cfg = RunConfig {
        analysis: AnalysisConfig {
            mode: args.mode,
            trace: TraceConfig { max_call_depth: args.max_call_depth, time_limit: args.trace_time_limit, ..TraceConfig::default() },
            code_base: args.code_base,
        },
        workers,
        out: args.out,
        dump_structure: args.dump_structure,
    };
    let inputs = collect_inputs(&args.inputs)?;
    let result = analyze_corpus(&inputs, &pack, &cfg)?;
    println!("{}", serde_json::to_string(&result.summary)?);
    if inputs.is_empty() {
        eprintln!("thumbscope: no input binaries found");
    } else if result.summary.reports() == 0 {
        eprintln!("thumbscope: no report was produced");
    }
    if result.crashed() {
        eprintln!("thumbscope: internal error while analysing at least one file; see the log");
    }
    Ok(result.exit_code())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    match run(Args::parse()) {
        Ok(code) => ExitCode::from(code as u8),
        Err(e) => {
            eprintln!("thumbscope: {e:#}");
            ExitCode::from(2)
        }
    }
}
