fn main() {
    std::process::exit(mmevent::cli::run(std::env::args()));
}
