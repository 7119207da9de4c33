fn main() {
    std::process::exit(tofalign::cli::run(std::env::args_os()));
}
