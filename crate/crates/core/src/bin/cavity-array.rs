fn main() {
    std::process::exit(cavity_array::cli::run(std::env::args_os()));
}
