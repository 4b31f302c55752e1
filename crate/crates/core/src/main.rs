fn main() {
    std::process::exit(ser_lstm::cli::main_with_args(std::env::args_os()));
}
