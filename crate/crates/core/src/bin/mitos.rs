fn main() {
    std::process::exit(mitos_rcnn::cli::run(std::env::args_os()));
}
