use mitoclass::cli::run_cli;

fn main() {
    let args: Vec<String> = std::env::args().collect();
    std::process::exit(run_cli(&args));
}
