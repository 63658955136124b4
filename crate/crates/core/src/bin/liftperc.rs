fn main() {
    std::process::exit(liftperc::cli::main_from(std::env::args_os()));
}
