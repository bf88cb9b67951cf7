fn main() {
    std::process::exit(s4ecg_cli::run(std::env::args_os()));
}
