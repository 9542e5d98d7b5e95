//! Worker process for the process-per-service benchmark baseline.

fn main() {
    std::process::exit(meshwa_core::bench::worker::worker_main(std::env::args().skip(1)));
}
