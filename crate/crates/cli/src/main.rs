fn main() {
    std::process::exit(gridkam_cli::run(std::env::args_os()));
}
