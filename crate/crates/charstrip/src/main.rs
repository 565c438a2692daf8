fn main() {
    std::process::exit(charstrip::main_with_args(std::env::args_os()));
}
