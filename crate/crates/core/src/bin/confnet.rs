fn main() {
    std::process::exit(confnet_dst::cli::run(std::env::args_os()));
}
