fn main() {
    std::process::exit(kvwait::cli::main_from(std::env::args_os()));
}
