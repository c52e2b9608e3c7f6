fn main() {
    std::process::exit(pklbench_cli::run(std::env::args_os()));
}
