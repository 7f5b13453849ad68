fn main() {
    std::process::exit(mccsr::cli::run(std::env::args_os()));
}
