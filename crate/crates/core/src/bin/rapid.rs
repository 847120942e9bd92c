fn main() {
    std::process::exit(rapid::harness::main_with(std::env::args_os()));
}
