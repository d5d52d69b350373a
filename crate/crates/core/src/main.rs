fn main() {
    std::process::exit(portrait_field::cli::run(std::env::args_os()));
}
