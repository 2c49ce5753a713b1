fn main() {
    std::process::exit(pfrpn::cli::run(std::env::args_os()));
}
