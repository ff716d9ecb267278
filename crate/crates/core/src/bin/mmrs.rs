fn main() {
    std::process::exit(mmrs::cli::run(std::env::args_os()));
}
