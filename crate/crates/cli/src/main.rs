use std::process::ExitCode;

fn main() -> ExitCode {
    if let Ok(threads) = std::env::var("BISIMLAB_THREADS") {
        match threads.parse::<usize>() {
            Ok(n) if n > 0 => {
                // Fails only if a pool already exists, which cannot happen here.
                let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
            }
            _ => {
                eprintln!("error: BISIMLAB_THREADS must be a positive integer, got {threads:?}");
                return ExitCode::from(1);
            }
        }
    }
    ExitCode::from(bisimlab_cli::run_from(std::env::args_os()) as u8)
}
