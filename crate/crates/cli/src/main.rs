fn main() {
    std::process::exit(calib_cli::main_with(std::env::args_os()));
}
