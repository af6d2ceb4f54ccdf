fn main() {
    std::process::exit(survseq::cli::main_with_args(std::env::args().collect()));
}
