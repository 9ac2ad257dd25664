use clap::Parser;
use flowformer::bench::CountingAllocator;

// Installed binary-wide so bench rows report real per-step allocation counts.
#[global_allocator]
static ALLOC: CountingAllocator = CountingAllocator;

fn main() {
    let cli = flowformer_cli::Cli::parse();
    if let Err(failure) = flowformer_cli::run(cli) {
        eprintln!("error: {failure}");
        std::process::exit(failure.exit_code());
    }
}
