fn main() {
    std::process::exit(cop3d_cli::run(std::env::args_os()));
}
