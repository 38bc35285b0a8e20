fn main() {
    std::process::exit(siteflip::cli::run(std::env::args_os()));
}
