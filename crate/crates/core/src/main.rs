fn main() {
    std::process::exit(patcnn::cli::run(std::env::args_os()));
}
