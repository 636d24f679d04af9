fn main() {
    let code = qflow::cli::run(std::env::args().collect());
    std::process::exit(code);
}
