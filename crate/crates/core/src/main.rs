fn main() {
    std::process::exit(pointdisc::cli::run(std::env::args_os()));
}
