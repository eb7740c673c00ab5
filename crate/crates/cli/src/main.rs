fn main() {
    std::process::exit(monge_lab_cli::run(std::env::args_os()));
}
