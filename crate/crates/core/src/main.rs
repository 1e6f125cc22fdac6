fn main() {
    std::process::exit(fundus_dwm::cli::run(std::env::args().collect()).exit_code);
}
