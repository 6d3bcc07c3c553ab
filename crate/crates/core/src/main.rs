fn main() {
    std::process::exit(facercnn::cli::main(std::env::args_os()));
}
