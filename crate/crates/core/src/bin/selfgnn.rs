fn main() {
    std::process::exit(selfgnn::cli::main_with(std::env::args_os()));
}
