fn main() {
    std::process::exit(caidd::cli::main_from(std::env::args_os()));
}
