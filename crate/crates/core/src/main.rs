fn main() {
    std::process::exit(bev2d::cli::main_with_args(std::env::args_os()));
}
