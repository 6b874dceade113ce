fn main() {
    std::process::exit(caloric_lab::cli::run(std::env::args_os()));
}
