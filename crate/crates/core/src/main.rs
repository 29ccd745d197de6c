use std::process::ExitCode;

fn main() -> ExitCode {
    if let Some(n) = std::env::var("PCT_THREADS").ok().and_then(|v| v.parse::<usize>().ok()) {
        // 0 leaves rayon's default of one thread per core.
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
            eprintln!("warning: PCT_THREADS ignored: {e}");
        }
    }
    ExitCode::from(pct::commands::run(std::env::args_os()) as u8)
}
