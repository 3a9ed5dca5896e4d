fn main() {
    env_logger::init();
    std::process::exit(roadtwin::harness::cli::run(std::env::args_os()));
}
